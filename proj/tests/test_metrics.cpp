#include <doctest.h>

#include <cmath>
#include <fstream>

#include "oracles.hpp"
#include "support.hpp"
#include "unicon/errors.hpp"
#include "unicon/metrics.hpp"
#include "unicon/pipeline.hpp"
#include "unicon/synth.hpp"
#include "unicon/trainer.hpp"

using namespace unicon;

namespace {

std::vector<SurvivalRecord> cohort(Rng& rng, std::size_t n, double censor) {
    std::vector<SurvivalRecord> rec;
    for (std::size_t i = 0; i < n; ++i) rec.push_back({rng.uniform(0.1, 10.0), !rng.bernoulli(censor), 0});
    return rec;
}

Tensor random_mask(Rng& rng, double p) {
    Tensor m({4, 5, 6});
    for (auto& v : m.data()) v = rng.bernoulli(p) ? 1.0 : 0.0;
    return m;
}

}  // namespace

TEST_CASE("concordance examples") {
    const std::vector<SurvivalRecord> rec{{1, true, 0}, {2, true, 0}, {3, true, 0}};
    CHECK(concordance_index(std::vector<double>{3, 2, 1}, rec) == 1.0);
    CHECK(concordance_index(std::vector<double>{1, 2, 3}, rec) == 0.0);
    CHECK(concordance_index(std::vector<double>{5, 5, 5}, rec) == 0.5);

    const std::vector<SurvivalRecord> none{{1, false, 0}, {2, false, 0}};
    CHECK_THROWS_AS(concordance_index(std::vector<double>{1, 2}, none), DegenerateCohortError);
    const std::vector<SurvivalRecord> tie{{2, true, 0}, {2, true, 0}};
    CHECK_THROWS_AS(concordance_index(std::vector<double>{1, 2}, tie), DegenerateCohortError);
}

TEST_CASE("concordance equals pair enumeration and obeys its symmetries") {
    Rng rng(51);
    for (int trial = 0; trial < 200; ++trial) {
        const auto rec = cohort(rng, 50, 0.3);
        std::vector<double> risk(50);
        for (auto& r : risk) r = std::round(rng.normal(0, 2) * 4) / 4;
        CHECK(concordance_index(risk, rec) == oracle::c_index(risk, rec));

        std::vector<double> untied(50), neg(50), mono(50);
        for (std::size_t i = 0; i < 50; ++i) {
            untied[i] = rng.normal();
            neg[i] = -untied[i];
            mono[i] = std::exp(untied[i]) * 3 + 1;
        }
        const double c = concordance_index(untied, rec);
        CHECK(concordance_index(neg, rec) == doctest::Approx(1.0 - c).epsilon(1e-12));
        CHECK(concordance_index(mono, rec) == c);
    }
}

TEST_CASE("dice examples, oracle and symmetry") {
    Tensor a({2, 2, 2}), b({2, 2, 2});
    a[0] = a[1] = 1;
    CHECK(dice_score(a, a) == 1.0);
    b[6] = b[7] = 1;
    CHECK(dice_score(a, b) == 0.0);
    CHECK(dice_score(Tensor({2, 2, 2}), Tensor({2, 2, 2})) == 1.0);
    Tensor p({2, 2, 2}), t({2, 2, 2});
    p[0] = p[1] = p[2] = p[3] = 1;
    t[2] = t[3] = t[4] = t[5] = 1;
    CHECK(dice_score(p, t) == 0.5);
    CHECK_THROWS_AS(dice_score(Tensor({2, 2, 2}), Tensor({2, 2, 3})), ShapeError);
    Tensor half({2, 2, 2});
    half[0] = 0.5;
    CHECK_THROWS_AS(dice_score(half, t), ContractError);

    Rng rng(52);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor x = random_mask(rng, rng.uniform(0, 0.5)), y = random_mask(rng, rng.uniform(0, 0.5));
        const double d = dice_score(x, y);
        CHECK(d == oracle::dice(x, y));
        CHECK(d == dice_score(y, x));
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
    }
    const Tensor bin = binarize_logits(Tensor::vector({-1.0, 0.0, 2.0}));
    CHECK(bin == Tensor::vector({0.0, 0.0, 1.0}));
}

TEST_CASE("accuracy") {
    const std::vector<std::size_t> a{0, 1, 1, 0}, comp{1, 0, 0, 1};
    CHECK(accuracy(a, a) == 1.0);
    CHECK(accuracy(a, comp) == 0.0);
    Rng rng(53);
    std::vector<std::size_t> x(100), y(100);
    std::size_t same = 0;
    for (std::size_t i = 0; i < 100; ++i) {
        x[i] = rng.index(3);
        y[i] = rng.index(3);
        same += x[i] == y[i];
    }
    CHECK(accuracy(x, y) == static_cast<double>(same) / 100.0);
    CHECK_THROWS_AS(accuracy(std::vector<std::size_t>{}, std::vector<std::size_t>{}), ContractError);
}

TEST_CASE("eval reports serialize as json lines") {
    EvalReport r{2, "segmentation/ct", "dice", 0.75, 40, std::nullopt};
    CHECK(r.to_json() == R"({"step":2,"task":"segmentation/ct","metric":"dice","value":0.75,"n":40,"fold":null})");
    r.fold = 1;
    CHECK(r.to_json().find(R"("fold":1})") != std::string::npos);

    unicon::test::TempDir dir("reports");
    append_reports(dir / "r.jsonl", {r, {0, "classification/ct", "accuracy", 0.95, 40, std::nullopt}});
    const auto back = read_reports(dir / "r.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].fold == std::optional<std::size_t>(1));
    CHECK(back[1].value == 0.95);
}

TEST_CASE("forgetting audit: exact replay, missing snapshot and fault injection") {
    const FrozenFoundation m = unicon::test::tiny_base(12);
    AdapterRegistry reg = initial_registry();
    DataSettings ds;
    ds.probes = 4;
    ds.params.shape = {16, 16, 16};
    ds.params.radius_min = 2;
    ds.params.radius_max = 4;
    Rng rng(54);
    StepSettings s = RunConfig::default_step(1);
    s.hidden = 8;
    reg.register_composition(build_prognosis(m, prognosis_key(), s, rng));

    std::vector<ProbeSet> probes{make_probes(classification_key(), ds, 1), make_probes(prognosis_key(), ds, 1)};
    CHECK(probes[0].size() == 4);
    std::vector<Snapshot> snaps{capture_snapshot(m, reg, probes[0], 0), capture_snapshot(m, reg, probes[1], 1)};

    s = RunConfig::default_step(2);
    s.hidden = 8;
    reg.register_composition(build_segmentation(m, segmentation_ct_key(), s, {16, 16, 16}, rng));
    const AuditReport ok = forgetting_audit(m, reg, probes, snaps, 2);
    CHECK(ok.pass());
    REQUIRE(ok.entries.size() == 2);
    for (const auto& e : ok.entries) CHECK(e.max_deviation == 0.0);

    CHECK_THROWS_AS(forgetting_audit(m, reg, probes, {snaps[0]}, 2), AuditConfigError);

    const FrozenFoundation bad = perturb_weight(m, "text.block0.mlp.fc1.weight", 0, 0.25);
    const AuditReport fail = forgetting_audit(bad, reg, probes, snaps, 2);
    CHECK_FALSE(fail.pass());
    for (const auto& e : fail.entries) CHECK(e.max_deviation > 0.0);

    unicon::test::TempDir dir("snapshot");
    save_snapshot(dir / "s.bin", probes[1], snaps[1]);
    const auto [p2, s2] = load_snapshot(dir / "s.bin");
    CHECK(p2.key == prognosis_key());
    CHECK(p2.reports == probes[1].reports);
    REQUIRE(s2.outputs.size() == snaps[1].outputs.size());
    for (std::size_t i = 0; i < s2.outputs.size(); ++i) CHECK(bit_identical(s2.outputs[i], snaps[1].outputs[i]));
}
