#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "unicon/errors.hpp"
#include "unicon/metrics.hpp"
#include "unicon/synth.hpp"
#include "unicon/volume.hpp"

using namespace unicon;

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = (static_cast<double>(i + j) / 2.0) + 1.0;
        i = j + 1;
    }
    return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

CaseParams small_params() {
    CaseParams p;
    p.shape = {16, 16, 16};
    p.radius_min = 2.0;
    p.radius_max = 5.0;
    return p;
}

}  // namespace

TEST_CASE("generation is deterministic and self-consistent") {
    const CaseParams p = small_params();
    const SyntheticCase a = generate_case(77, p), b = generate_case(77, p);
    CHECK(bit_identical(a.ct, b.ct));
    CHECK(bit_identical(a.pet, b.pet));
    CHECK(bit_identical(a.mask, b.mask));
    CHECK(a.report == b.report);
    CHECK(a.time == b.time);

    CaseParams mixed = p;
    mixed.lesion_prob = 0.5;
    for (const auto& c : generate_cases(5, 200, mixed)) {
        CHECK((c.lesion_voxels() > 0) == c.class_label);
        CHECK(c.time > 0.0);
        for (double v : c.mask.data()) CHECK((v == 0.0 || v == 1.0));
        for (double v : c.pet.data()) CHECK(v >= 0.0);
        for (double v : c.ct.data()) {
            CHECK(v >= -1200.0);
            CHECK(v <= 1200.0);
        }
    }

    CaseParams bad = p;
    bad.radius_min = bad.radius_max = 0.5;
    CHECK_THROWS_AS(generate_case(1, bad), GenerationError);
}

TEST_CASE("without complementarity the mask is exactly the CT-visible lesion") {
    CaseParams p = small_params();
    p.noise_hu = 0.0;
    p.texture_hu = 0.0;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const SyntheticCase c = generate_case(seed, p);
        for (std::size_t i = 0; i < c.mask.numel(); ++i) {
            const bool visible = c.ct[i] == p.background_hu + p.contrast_hu;
            CHECK(visible == (c.mask[i] == 1.0));
        }
    }
}

TEST_CASE("with complementarity a CT-only oracle segmenter loses to CT+PET") {
    CaseParams p = small_params();
    p.noise_hu = 0.0;
    p.texture_hu = 0.0;
    p.pet_noise = 0.0;
    p.complementarity = true;
    double ct_dice = 0.0, ctpet_dice = 0.0;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const SyntheticCase c = generate_case(seed, p);
        Tensor ct_pred(c.mask.shape()), both_pred(c.mask.shape());
        for (std::size_t i = 0; i < c.mask.numel(); ++i) {
            ct_pred[i] = c.ct[i] > p.background_hu + p.contrast_hu / 2 ? 1.0 : 0.0;
            both_pred[i] = (ct_pred[i] == 1.0 || c.pet[i] > p.pet_background + 0.5) ? 1.0 : 0.0;
        }
        ct_dice += dice_score(ct_pred, c.mask);
        ctpet_dice += dice_score(both_pred, c.mask);
    }
    CHECK(ct_dice / 30 < ctpet_dice / 30);
    CHECK(ctpet_dice / 30 == 1.0);
}

TEST_CASE("larger lesions survive shorter") {
    CaseParams p;
    std::vector<double> volume, time;
    for (const auto& c : generate_cases(9, 500, p)) {
        volume.push_back(c.lesion_voxels());
        time.push_back(c.time);
    }
    CHECK(spearman(volume, time) < 0.0);
}

TEST_CASE("preprocess_ct clips and scales") {
    const Tensor out = preprocess_ct(Tensor::vector({1024, -1024, 0, 5000, -5000, 512}));
    CHECK(out == Tensor::vector({1.0, -1.0, 0.0, 1.0, -1.0, 0.5}));
    Rng rng(3);
    Tensor in({4, 4, 4});
    for (auto& v : in.data()) v = rng.uniform(-1.0, 1.0);
    CHECK(preprocess_ct(in).all_finite());
    const Tensor raw = rng.normal_tensor({4, 4, 4}, 800.0);
    const Tensor scaled = preprocess_ct(raw);
    for (std::size_t i = 0; i < raw.numel(); ++i) CHECK(scaled[i] * 1024.0 == std::clamp(raw[i], -1024.0, 1024.0));
}

TEST_CASE("preprocess_pet z-scores per volume") {
    const Tensor flat = preprocess_pet(Tensor({3, 3, 3}, 4.2));
    for (double v : flat.data()) CHECK(v == 0.0);
    Rng rng(4);
    const Tensor x = rng.normal_tensor({6, 6, 6}, 3.0);
    const Tensor z = preprocess_pet(x);
    double mean = 0.0, var = 0.0;
    for (double v : z.data()) mean += v;
    mean /= z.numel();
    for (double v : z.data()) var += (v - mean) * (v - mean);
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(std::sqrt(var / z.numel()) - 1.0) < 1e-6);
    Tensor affine = x;
    for (auto& v : affine.data()) v = 2 * v + 3;
    CHECK(max_abs_diff(preprocess_pet(affine), z) < 1e-7);
}

TEST_CASE("resample_volume") {
    Rng rng(5);
    const Tensor vol = rng.normal_tensor({5, 6, 7}, 1.0);
    CHECK(bit_identical(resample_volume(vol, {5, 6, 7}), vol));
    const Tensor constant = resample_volume(Tensor({4, 4, 4}, 2.5), {7, 3, 9});
    for (double v : constant.data()) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));

    // f(z, y, x) = 1 + 2z + 3y - x on a 9^3 grid, downsampled corner-aligned to 5^3.
    Tensor ramp({9, 9, 9});
    for (std::size_t z = 0; z < 9; ++z)
        for (std::size_t y = 0; y < 9; ++y)
            for (std::size_t x = 0; x < 9; ++x) ramp[(z * 9 + y) * 9 + x] = 1.0 + 2.0 * z + 3.0 * y - 1.0 * x;
    const Tensor down = resample_volume(ramp, {5, 5, 5});
    for (std::size_t z = 0; z < 5; ++z)
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 5; ++x) {
                const double want = 1.0 + 2.0 * (2.0 * z) + 3.0 * (2.0 * y) - 2.0 * x;
                CHECK(std::abs(down[(z * 5 + y) * 5 + x] - want) < 1e-12);
            }
    // Upsampling a ramp is exact too, at fractional source coordinates.
    const Tensor up = resample_volume(ramp, {17, 2, 9});
    CHECK(std::abs(up[(3 * 2 + 1) * 9 + 4] - (1.0 + 2.0 * 1.5 + 3.0 * 8.0 - 4.0)) < 1e-12);
}

TEST_CASE("split_folds: sizes, determinism and stratification") {
    std::vector<bool> nine(9, true);
    nine[2] = nine[5] = false;
    const auto f = split_folds(nine, 3, 1);
    std::vector<int> sizes(3, 0);
    for (auto v : f) ++sizes[v];
    CHECK(sizes == std::vector<int>{3, 3, 3});
    CHECK(split_folds(nine, 3, 1) == f);
    CHECK_THROWS_AS(split_folds(std::vector<bool>(2, true), 3, 1), ContractError);

    Rng rng(6);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const std::size_t n = 30 + rng.index(300), k = 2 + rng.index(4);
        std::vector<bool> events(n);
        std::size_t total = 0;
        for (std::size_t i = 0; i < n; ++i) total += (events[i] = rng.bernoulli(0.7));
        const auto folds = split_folds(events, k, seed);
        std::vector<std::size_t> size(k, 0), ev(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++size[folds[i]];
            ev[folds[i]] += events[i];
        }
        const double global = static_cast<double>(total) / n;
        for (std::size_t j = 0; j < k; ++j) {
            CHECK(*std::max_element(size.begin(), size.end()) - size[j] <= 1);
            CHECK(std::abs(static_cast<double>(ev[j]) / size[j] - global) <= 0.15 * global);
        }
    }
}

TEST_CASE("dataset directory round trip") {
    unicon::test::TempDir dir("dataset");
    const CaseParams p = small_params();
    const auto cases = generate_cases(3, 6, p);
    std::vector<bool> events;
    for (const auto& c : cases) events.push_back(c.event);
    const auto folds = split_folds(events, 3, 4);
    write_dataset(dir.path(), cases, folds, p, 3);
    CHECK(std::filesystem::exists(dir / "index.jsonl"));
    CHECK(std::filesystem::exists(dir / "spec.txt"));
    const Dataset back = read_dataset(dir.path());
    REQUIRE(back.cases.size() == 6);
    CHECK(back.folds == folds);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(bit_identical(back.cases[i].ct, cases[i].ct));
        CHECK(bit_identical(back.cases[i].mask, cases[i].mask));
        CHECK(back.cases[i].report == cases[i].report);
        CHECK(back.cases[i].time == cases[i].time);
        CHECK(back.cases[i].event == cases[i].event);
    }
}
