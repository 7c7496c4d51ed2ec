#include <doctest.h>

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "support.hpp"
#include "unicon/errors.hpp"
#include "unicon/trainer.hpp"

using namespace unicon;
namespace fs = std::filesystem;

namespace {

DataSettings tiny_data() {
    DataSettings ds;
    ds.cases = 24;
    ds.probes = 4;
    ds.params.shape = {16, 16, 16};
    ds.params.radius_min = 2.5;
    ds.params.radius_max = 5.0;
    return ds;
}

RunConfig tiny_config(const fs::path& base, const fs::path& out) {
    RunConfig c;
    c.seed = 3;
    c.base.checkpoint = base.string();
    c.base.vision = unicon::test::tiny_vision();
    c.base.text = unicon::test::tiny_text();
    c.data = tiny_data();
    c.step1.epochs = 2;
    c.step1.batch_size = 8;
    c.step1.bins = 4;
    c.step1.hidden = 8;
    for (auto* s : {&c.step2, &c.step3}) {
        s->max_steps = 4;
        s->hidden = 8;
    }
    c.output.dir = out.string();
    return c;
}

}  // namespace

TEST_CASE("config: sections, overrides and unknown keys") {
    const RunConfig c = RunConfig::parse(
        "# toy\n[base]\nvolume = 16\npatch_size = 8\n[data]\nshape = 16x16x16\ncases = 40\nradius_min = 2\nradius_max = 5\n"
        "[step1]\nlr = 0.001  # comment\nmodalities = text\n[step2]\nmax_steps = 10\n",
        {"step2.max_steps=12", "output.dir=elsewhere"});
    CHECK(c.base.vision.volume_shape == std::array<std::size_t, 3>{16, 16, 16});
    CHECK(c.data.cases == 40);
    CHECK(c.step1.learning_rate == 0.001);
    CHECK(c.step1.modalities == ModalitySet{Modality::TEXT});
    CHECK(c.step2.max_steps == 12);
    CHECK(c.step1.enabled);
    CHECK(c.step2.enabled);
    CHECK_FALSE(c.step3.enabled);
    CHECK(c.output.dir == "elsewhere");
    CHECK_NOTHROW(c.validate());

    CHECK_THROWS_WITH_AS(RunConfig::parse("[step1]\nlearning_rate = 1\n"), doctest::Contains("lr"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[step4]\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[data]\n[data]\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("cases = 3\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[data]\ncases = many\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::defaults({"data.nope=1"}), ConfigError);

    const RunConfig d = RunConfig::defaults();
    CHECK(d.step1.enabled);
    CHECK(d.step2.enabled);
    CHECK(d.step3.enabled);
    CHECK(d.step1.learning_rate == 3e-4);
    CHECK(d.step1.batch_size == 16);
    CHECK(d.step1.epochs == 50);
    CHECK(d.step2.max_steps == 2000);
    CHECK_NOTHROW(d.validate());
    CHECK_THROWS_AS(RunConfig::defaults({"step2.enabled=false"}).validate(), ConfigError);
    CHECK_NOTHROW(RunConfig::defaults({"step2.enabled=false", "step3.init_from_step2=false"}).validate());
    CHECK_THROWS_AS(RunConfig::defaults({"data.shape=24"}).validate(), ConfigError);
}

TEST_CASE("plan_steps follows the sequence order") {
    const auto steps = plan_steps(RunConfig::defaults());
    REQUIRE(steps.size() == 3);
    CHECK(steps[0].key == prognosis_key());
    CHECK(steps[1].key == segmentation_ct_key());
    CHECK(steps[2].key == segmentation_ctpet_key());
    CHECK(steps[0].metric() == "c_index");
    CHECK(steps[2].metric() == "dice");
    CHECK(steps[2].slug() == "step3_segmentation_ct-pet");
    CHECK(plan_steps(RunConfig::defaults({"step3.enabled=false"})).size() == 2);
}

TEST_CASE("run_step: selection, determinism, loss descent and isolation") {
    const FrozenFoundation m = unicon::test::tiny_base(20);
    const std::string hash = m.base_hash();
    const PreparedData data = obtain_data(tiny_data(), 5);
    AdapterRegistry reg = initial_registry();

    RunConfig c = RunConfig::defaults();
    c.step2.max_steps = 96;
    c.step2.hidden = 8;
    c.step1.epochs = 6;
    c.step1.batch_size = 8;
    c.step1.bins = 4;
    c.step1.hidden = 8;
    const auto steps = plan_steps(c);

    StepResult prog = run_step(m, reg, steps[0], data, 0, 9);
    const auto best_it = std::max_element(prog.curve.begin(), prog.curve.end(),
                                          [](const EpochRecord& a, const EpochRecord& b) { return a.val_metric < b.val_metric; });
    CHECK(prog.best_value == best_it->val_metric);
    CHECK(prog.best_epoch == best_it->epoch);
    CHECK(evaluate_prognosis(m, *prog.composition, data, data.fold_indices(0, true)) == prog.best_value);
    CHECK(prog.curve.size() == 6);

    const StepResult again = run_step(m, reg, steps[0], data, 0, 9);
    CHECK(again.composition->digest() == prog.composition->digest());
    CHECK(again.best_value == prog.best_value);

    const std::string prog_digest = prog.composition->digest();
    reg.register_composition(std::move(prog.composition));

    const StepResult seg = run_step(m, reg, steps[1], data, 0, 9);
    CHECK(seg.best_value == evaluate_segmentation(m, *seg.composition, data, data.fold_indices(0, true)));
    for (const auto& e : seg.curve) CHECK(e.val_metric <= seg.best_value);
    CHECK(seg.curve.back().train_loss < seg.curve.front().train_loss);
    CHECK(reg.route(prognosis_key()).digest() == prog_digest);
    CHECK(m.compute_hash() == hash);

    CHECK_THROWS_AS(run_step(m, reg, steps[0], data, 0, 9), ConflictError);
    CHECK_THROWS_AS(run_step(m, reg, steps[2], data, 0, 9), RoutingError);
}

TEST_CASE("sequence without step 3 leaves that route unservable") {
    unicon::test::TempDir dir("sequence_two");
    unicon::test::tiny_base(21).save(dir / "base_in.bin");
    RunConfig c = tiny_config(dir / "base_in.bin", dir / "run");
    c.step3.enabled = false;
    const SequenceResult run = run_sequence(c);
    CHECK(run.registry.size() == 3);
    CHECK_THROWS_AS(run.registry.route(segmentation_ctpet_key()), RoutingError);
    for (const auto& a : run.audits) CHECK(a.pass());

    std::size_t servable = 0;
    for (const auto& row : run.capabilities) servable += row.after;
    CHECK(servable == 3);
    const auto reports = read_reports(dir / "run" / "report.jsonl");
    CHECK(std::any_of(reports.begin(), reports.end(), [](const EvalReport& r) { return r.step == 2; }));
    CHECK_FALSE(std::any_of(reports.begin(), reports.end(), [](const EvalReport& r) { return r.step == 3; }));
}

TEST_CASE("full tiny sequence: artifacts, reload, isolation and capability") {
    unicon::test::TempDir dir("sequence_full");
    const FrozenFoundation base = unicon::test::tiny_base(22);
    base.save(dir / "base_in.bin");
    const RunConfig c = tiny_config(dir / "base_in.bin", dir / "run");
    const SequenceResult run = run_sequence(c);
    const fs::path out = dir / "run";

    CHECK(run.model->base_hash() == base.base_hash());
    CHECK(run.audits.size() == 3);
    for (const auto& a : run.audits) CHECK(a.pass());
    for (const auto& key : capability_keys()) CHECK(run.registry.contains(key));
    for (const auto& row : run.capabilities) {
        CHECK(row.after);
        CHECK(row.valid_output);
        CHECK(row.before == (row.key == classification_key()));
    }
    CHECK(run.registry.route(segmentation_ctpet_key()).meta("initialized_from") == segmentation_ct_key().str());

    for (const auto& step : plan_steps(c)) {
        CHECK(fs::exists(run_paths::checkpoint(out, step.slug())));
        CHECK(fs::exists(run_paths::snapshot(out, step.slug())));
        CHECK(fs::exists(run_paths::curve(out, step.slug())));
        const auto saved = load_composition(run_paths::checkpoint(out, step.slug()), base.base_hash());
        CHECK(saved->digest() == run.registry.route(step.key).digest());
    }

    std::ifstream cap(run_paths::capability(out));
    const auto j = nlohmann::json::parse(cap);
    CHECK(j.dump().find("Seg(CP)") != std::string::npos);

    const SequenceResult back = load_run(out);
    CHECK(back.registry.size() == 4);
    const AuditReport replay = forgetting_audit(*back.model, back.registry, back.probes, back.snapshots, 3);
    CHECK(replay.pass());
    CHECK(replay.entries.size() == 4);

    const auto reports = evaluate_run(c, back, obtain_data(c.data, c.seed));
    CHECK(reports.size() == 4);
}
