#pragma once

#include <filesystem>
#include <string>

#include "unicon/foundation.hpp"
#include "unicon/rng.hpp"
#include "unicon/tensor.hpp"

namespace unicon::test {

// Small frozen base: 16^3 volumes, 8 patches, two blocks per tower.
inline VisionEncoderConfig tiny_vision() {
    VisionEncoderConfig v;
    v.volume_shape = {16, 16, 16};
    v.patch_size = 8;
    v.embed_dim = 16;
    v.layers = 2;
    v.heads = 2;
    v.proj_dim = 8;
    return v;
}

inline TextEncoderConfig tiny_text() {
    TextEncoderConfig t;
    t.max_tokens = 16;
    t.embed_dim = 16;
    t.layers = 1;
    t.heads = 2;
    t.proj_dim = 8;
    return t;
}

inline FrozenFoundation tiny_base(std::uint64_t seed = 1) {
    FrozenFoundation m(tiny_vision(), tiny_text(), seed);
    m.freeze();
    return m;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) { return rng.normal_tensor(shape, scale); }

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& name) {
        path_ = std::filesystem::temp_directory_path() / ("unicon_test_" + name);
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& child) const { return path_ / child; }

private:
    std::filesystem::path path_;
};

}  // namespace unicon::test
