#include "unicon/volume.hpp"

#include <algorithm>
#include <cmath>

#include "unicon/errors.hpp"

namespace unicon {

namespace {

struct Axis {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

Axis axis_weights(std::size_t src, std::size_t dst) {
    Axis a;
    a.lo.resize(dst);
    a.hi.resize(dst);
    a.frac.resize(dst);
    for (std::size_t i = 0; i < dst; ++i) {
        const double pos = (src == 1 || dst == 1) ? 0.0 : static_cast<double>(i * (src - 1)) / static_cast<double>(dst - 1);
        std::size_t l = static_cast<std::size_t>(std::floor(pos));
        if (l >= src - 1) l = src - 1;
        a.lo[i] = l;
        a.hi[i] = std::min(l + 1, src - 1);
        a.frac[i] = pos - static_cast<double>(l);
    }
    return a;
}

void check_target(const Shape& target) {
    if (target.size() != 3) throw ShapeError("resample target must be 3-D, got " + shape_str(target));
    for (auto d : target) {
        if (d < 2) throw ShapeError("resample target dims must be >= 2, got " + shape_str(target));
    }
}

// Shared kernel: `src` is laid out as [D*H*W x c].
std::vector<double> trilinear(const double* src, const Shape& s, std::size_t c, const Shape& t) {
    const Axis az = axis_weights(s[0], t[0]), ay = axis_weights(s[1], t[1]), ax = axis_weights(s[2], t[2]);
    std::vector<double> out(t[0] * t[1] * t[2] * c);
    auto at = [&](std::size_t z, std::size_t y, std::size_t x, std::size_t ch) {
        return src[((z * s[1] + y) * s[2] + x) * c + ch];
    };
    for (std::size_t z = 0; z < t[0]; ++z)
        for (std::size_t y = 0; y < t[1]; ++y)
            for (std::size_t x = 0; x < t[2]; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double fz = az.frac[z], fy = ay.frac[y], fx = ax.frac[x];
                    auto lerp_x = [&](std::size_t zz, std::size_t yy) {
                        return at(zz, yy, ax.lo[x], ch) * (1.0 - fx) + at(zz, yy, ax.hi[x], ch) * fx;
                    };
                    const double c0 = lerp_x(az.lo[z], ay.lo[y]) * (1.0 - fy) + lerp_x(az.lo[z], ay.hi[y]) * fy;
                    const double c1 = lerp_x(az.hi[z], ay.lo[y]) * (1.0 - fy) + lerp_x(az.hi[z], ay.hi[y]) * fy;
                    out[((z * t[1] + y) * t[2] + x) * c + ch] = c0 * (1.0 - fz) + c1 * fz;
                }
    return out;
}

}  // namespace

Tensor resample_volume(const Tensor& volume, const Shape& target) {
    if (volume.rank() != 3) throw ShapeError("resample_volume expects a 3-D volume, got " + shape_str(volume.shape()));
    check_target(target);
    if (volume.shape() == target) return volume;
    return Tensor(target, trilinear(volume.data().data(), volume.shape(), 1, target));
}

Tensor resample_grid_table(const Tensor& table, const Shape& grid, const Shape& target_grid) {
    if (grid.size() != 3 || target_grid.size() != 3 || table.rank() != 2 || table.rows() != shape_numel(grid)) {
        throw ShapeError("grid table " + shape_str(table.shape()) + " does not match grid " + shape_str(grid));
    }
    if (grid == target_grid) return table;
    for (auto d : target_grid) {
        if (d == 0) throw ShapeError("empty target grid");
    }
    const std::size_t c = table.cols();
    return Tensor({shape_numel(target_grid), c}, trilinear(table.data().data(), grid, c, target_grid));
}

}  // namespace unicon
