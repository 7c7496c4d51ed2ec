#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "support.hpp"
#include "unicon/errors.hpp"
#include "unicon/foundation.hpp"
#include "unicon/synth.hpp"

using namespace unicon;
using unicon::test::tiny_base;

namespace {

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

std::vector<double> unit(std::vector<double> v) {
    const double n = norm(v);
    for (auto& x : v) x /= n;
    return v;
}

}  // namespace

TEST_CASE("patch-count law") {
    VisionEncoderConfig v;
    CHECK(v.num_patches() == 64);
    v.volume_shape = {96, 96, 96};
    v.patch_size = 16;
    CHECK(v.num_patches() == 216);
    v.volume_shape = {48, 32, 16};
    v.patch_size = 8;
    CHECK(v.num_patches() == 6 * 4 * 2);
    CHECK(patchify_volume(Tensor({96, 96, 96}), 16).shape() == Shape{216, 4096});
    CHECK(patchify_volume(Tensor({32, 32, 32}), 8).shape() == Shape{64, 512});
    CHECK_THROWS_AS(patchify_volume(Tensor({30, 32, 32}), 8), ResolutionError);
}

TEST_CASE("patchify places voxels row-major within row-major patches") {
    const std::size_t D = 4, H = 6, W = 2, p = 2;
    Tensor vol({D, H, W});
    for (std::size_t i = 0; i < vol.numel(); ++i) vol[i] = static_cast<double>(i);
    const Tensor patches = patchify_volume(vol, p);
    std::size_t n = 0;
    for (std::size_t pz = 0; pz < D / p; ++pz)
        for (std::size_t py = 0; py < H / p; ++py)
            for (std::size_t px = 0; px < W / p; ++px, ++n) {
                std::size_t k = 0;
                for (std::size_t z = 0; z < p; ++z)
                    for (std::size_t y = 0; y < p; ++y)
                        for (std::size_t x = 0; x < p; ++x, ++k) {
                            const std::size_t src = ((pz * p + z) * H + py * p + y) * W + px * p + x;
                            CHECK(patches.at(n, k) == static_cast<double>(src));
                        }
            }
    CHECK(unpatchify_volume(patches, vol.shape(), p) == vol);
}

TEST_CASE("zero volume embeddings differ only by positional embeddings") {
    const FrozenFoundation m = tiny_base();
    Tape tape;
    Binder b(tape);
    const Tensor tokens = m.embed_volume(b, Tensor({16, 16, 16})).value();
    const Tensor& pos = m.parameter("vision.pos_embed").value;
    const Tensor& bias = m.parameter("vision.patch_embed.bias").value;
    for (std::size_t n = 0; n < tokens.rows(); ++n)
        for (std::size_t j = 0; j < tokens.cols(); ++j) CHECK(tokens.at(n, j) == bias[j] + pos.at(n, j));
    CHECK_THROWS_AS(m.embed_volume(b, Tensor({24, 16, 16})), ResolutionError);
}

TEST_CASE("encoders are pure and pooled embeddings are unit norm") {
    const FrozenFoundation m = tiny_base(3);
    Rng rng(4);
    const Tensor vol = rng.normal_tensor({16, 16, 16}, 0.5);
    const auto a = m.encode_image(vol), b = m.encode_image(vol);
    CHECK(bit_identical(a.pooled, b.pooled));
    CHECK(bit_identical(a.tokens, b.tokens));
    CHECK(a.tokens.shape() == Shape{8, 16});
    CHECK(std::abs(norm(a.pooled.data()) - 1.0) < 1e-12);

    const auto t1 = m.encode_text("large mass in left neck"), t2 = m.encode_text("large mass in left neck");
    CHECK(bit_identical(t1.pooled, t2.pooled));
    CHECK(std::abs(norm(t1.pooled.data()) - 1.0) < 1e-12);
    const auto empty = m.encode_text("");
    CHECK(empty.pooled.all_finite());
    CHECK(std::abs(norm(empty.pooled.data()) - 1.0) < 1e-12);
}

TEST_CASE("tokenizer: lowercase, OOV bucket and truncation") {
    const Tokenizer tok;
    const auto ids = tok.encode("MASS zzzunknownzzz mass", 8);
    REQUIRE(ids.size() == 3);
    CHECK(ids[0] == ids[2]);
    CHECK(ids[0] >= 2);
    CHECK(ids[1] == Tokenizer::kOov);
    CHECK(tok.encode("mass mass mass mass", 2).size() == 2);
    CHECK(report_vocabulary().size() <= 60);
}

TEST_CASE("classify_similarity") {
    const std::vector<double> v = unit({1, 2, -1, 0.5});
    std::vector<double> neg = v;
    for (auto& x : neg) x = -x;
    const auto s = classify_similarity(v, {v, neg});
    CHECK(s.scores[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.scores[1] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(s.label == 0);

    const auto tie = classify_similarity(std::vector<double>{1, 0, 0}, {{0, 1, 0}, {0, 0, 1}});
    CHECK(tie.scores == std::vector<double>{0.0, 0.0});
    CHECK(tie.label == 0);

    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> img(6);
        std::vector<std::vector<double>> prompts(4, std::vector<double>(6));
        for (auto& x : img) x = rng.normal();
        img = unit(img);
        for (auto& p : prompts) {
            for (auto& x : p) x = rng.normal();
            p = unit(p);
        }
        const auto r = classify_similarity(img, prompts);
        std::size_t best = 0;
        for (std::size_t c = 0; c < 4; ++c) {
            double dot = 0.0;
            for (std::size_t j = 0; j < 6; ++j) dot += img[j] * prompts[c][j];
            CHECK(r.scores[c] == doctest::Approx(dot).epsilon(1e-14));
            if (dot > r.scores[best]) best = c;
        }
        CHECK(r.label == best);
    }
    CHECK_THROWS_AS(classify_similarity(v, {}), ContractError);
}

TEST_CASE("freeze contract and base hash") {
    FrozenFoundation m(unicon::test::tiny_vision(), unicon::test::tiny_text(), 5);
    CHECK_FALSE(m.frozen());
    CHECK_THROWS_AS(m.base_hash(), ContractError);
    m.freeze();
    CHECK(m.frozen());
    CHECK(m.base_hash() == m.compute_hash());
    CHECK(m.base_hash().size() == 64);
    CHECK_THROWS_AS(m.trainable_parameters(), ContractError);

    const FrozenFoundation other = perturb_weight(m, "vision.block0.attn.q.weight", 3, 1e-6);
    CHECK(other.base_hash() != m.base_hash());
    CHECK(m.base_hash() == m.compute_hash());
}

TEST_CASE("checkpoint round trip is byte identical and digest protected") {
    unicon::test::TempDir dir("foundation");
    const FrozenFoundation m = tiny_base(6);
    m.save(dir / "a.bin");
    const FrozenFoundation back = FrozenFoundation::load(dir / "a.bin");
    CHECK(back.base_hash() == m.base_hash());
    back.save(dir / "b.bin");
    CHECK(read_file_bytes(dir / "a.bin") == read_file_bytes(dir / "b.bin"));
    CHECK(read_container(dir / "a.bin").meta_value("payload_sha256") == m.base_hash());

    auto bytes = read_file_bytes(dir / "a.bin");
    bytes[bytes.size() - 9] ^= 0x40;
    write_file_bytes(dir / "c.bin", bytes);
    CHECK_THROWS_AS(FrozenFoundation::load(dir / "c.bin"), FormatError);
}

TEST_CASE("pretraining on shuffled labels stays at chance") {
    CaseParams params;
    params.site = Site::Chest;
    params.shape = {16, 16, 16};
    params.lesion_prob = 0.5;
    params.radius_min = 2.0;
    params.radius_max = 4.0;
    auto train = pretrain_corpus(21, 120, params);
    auto val = pretrain_corpus(22, 200, params);
    Rng rng(23);
    for (auto* set : {&train, &val}) {
        std::vector<std::size_t> labels;
        for (const auto& s : *set) labels.push_back(s.label);
        std::shuffle(labels.begin(), labels.end(), rng.engine());
        for (std::size_t i = 0; i < set->size(); ++i) (*set)[i].label = labels[i];
    }
    FrozenFoundation m(unicon::test::tiny_vision(), unicon::test::tiny_text(), 24);
    PretrainOptions opt;
    opt.max_epochs = 4;
    opt.target_accuracy = 0.99;
    try {
        pretrain_base(m, train, val, chest_class_prompts(), opt);
        FAIL("shuffled labels should not reach 0.99");
    } catch (const TrainingFailure& e) {
        CHECK(e.final_accuracy() >= 0.4);
        CHECK(e.final_accuracy() <= 0.6);
    }
}
