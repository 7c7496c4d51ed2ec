// unicon: command-line driver for pretraining, adaptation, evaluation and audit.
//
// Exit codes: 0 success, 1 config/contract error, 2 training divergence,
// 3 forgetting-audit failure (including unreadable or tampered artifacts).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "unicon/errors.hpp"
#include "unicon/gradcheck.hpp"
#include "unicon/pipeline.hpp"
#include "unicon/trainer.hpp"

namespace fs = std::filesystem;
using namespace unicon;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kDivergence = 2;
constexpr int kAuditFailure = 3;

struct Options {
    std::string config;
    std::vector<std::string> overrides;
    std::string output;
    std::uint64_t seed = 0;
    bool dry_run = false;
    std::size_t step = 0;
    std::size_t seeds = 20;
};

void note(const std::string& msg) { std::cerr << msg << "\n"; }

RunConfig load_config(const Options& o) {
    RunConfig c = o.config.empty() ? RunConfig::defaults(o.overrides) : RunConfig::load(o.config, o.overrides);
    c.seed = o.seed;
    if (!o.output.empty()) c.output.dir = o.output;
    c.validate();
    return c;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

int cmd_pretrain(const Options& o) {
    RunConfig c = load_config(o);
    if (!c.base.checkpoint.empty()) throw ConfigError("pretrain builds a new base; unset base.checkpoint");
    if (o.dry_run) {
        note("dry run: config valid; would pretrain on " + std::to_string(c.base.pretrain_cases) + " chest cases");
        return kOk;
    }
    note("pretraining the base model");
    const SequenceResult run = bootstrap_run(c, obtain_base(c.base, c.seed));
    note("base frozen, hash " + run.model->base_hash() + ", step-0 accuracy " + std::to_string(run.reports.front().value));
    return kOk;
}

int cmd_gen_data(const Options& o) {
    RunConfig c = load_config(o);
    if (o.dry_run) {
        note("dry run: config valid; would write " + std::to_string(c.data.cases) + " cases");
        return kOk;
    }
    const auto cases = generate_cases(mix_seed(c.seed, 3), c.data.cases, c.data.params);
    std::vector<bool> events;
    for (const auto& cs : cases) events.push_back(cs.event);
    write_dataset(c.output.dir, cases, split_folds(events, c.data.folds, mix_seed(c.seed, 4)), c.data.params, c.seed);
    note("wrote " + std::to_string(cases.size()) + " cases to " + c.output.dir);
    return kOk;
}

int cmd_adapt(const Options& o) {
    RunConfig c = load_config(o);
    const auto steps = plan_steps(c);
    const AdaptationStep* step = nullptr;
    for (const auto& s : steps) {
        if (s.index == o.step) step = &s;
    }
    if (!step) throw ConfigError("step " + std::to_string(o.step) + " is not enabled in the config");
    SequenceResult run = load_run(c.output.dir);
    if (o.dry_run) {
        note("dry run: config valid; would adapt " + step->key.str() + " on top of " + std::to_string(run.registry.size()) +
             " routes");
        return kOk;
    }
    const PreparedData data = obtain_data(c.data, c.seed);
    execute_step(c, run, data, *step, note);
    write_capability(run_paths::capability(c.output.dir),
                     capability_matrix(*run.model, initial_registry(), run.registry, run.probes));
    return kOk;
}

int cmd_eval(const Options& o) {
    RunConfig c = load_config(o);
    const SequenceResult run = load_run(c.output.dir);
    if (o.dry_run) {
        note("dry run: run directory loads; " + std::to_string(run.registry.size()) + " routes");
        return kOk;
    }
    const PreparedData data = obtain_data(c.data, c.seed);
    const auto reports = evaluate_run(c, run, data);
    const fs::path path = fs::path(c.output.dir) / "eval.jsonl";
    fs::remove(path);
    append_reports(path, reports);
    for (const auto& r : reports) note(r.task + " " + r.metric + " " + std::to_string(r.value));
    return kOk;
}

int cmd_audit(const Options& o) {
    if (o.output.empty()) throw ConfigError("audit needs --output <run directory>");
    SequenceResult run;
    try {
        run = load_run(o.output);
    } catch (const Error& e) {
        throw AuditFailure(std::string("run artifacts failed verification: ") + e.what());
    }
    std::size_t last = 0;
    for (const auto& s : run.snapshots) last = std::max(last, s.step);
    const AuditReport report = forgetting_audit(*run.model, run.registry, run.probes, run.snapshots, last);
    nlohmann::ordered_json j;
    j["pass"] = report.pass();
    j["entries"] = nlohmann::ordered_json::array();
    for (const auto& e : report.entries) {
        note(e.key.str() + " recorded at step " + std::to_string(e.recorded_step) + ": max deviation " +
             std::to_string(e.max_deviation) + (e.pass() ? " PASS" : " FAIL"));
        j["entries"].push_back({{"route", e.key.str()},
                                {"recorded_step", e.recorded_step},
                                {"max_abs_deviation", e.max_deviation},
                                {"pass", e.pass()}});
    }
    if (!o.dry_run) write_json(fs::path(o.output) / "audit.json", j);
    if (!report.pass()) throw AuditFailure("forgetting audit failed");
    return kOk;
}

int cmd_gradcheck(const Options& o) {
    bool pass = true;
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : run_grad_checks(o.seeds, o.seed)) {
        char line[160];
        std::snprintf(line, sizeof line, "%-20s max rel error %.3e over %zu seeds %s", r.family.c_str(), r.max_rel_error,
                      r.seeds, r.pass() ? "PASS" : "FAIL");
        note(line);
        pass = pass && r.pass();
        j.push_back({{"family", r.family}, {"max_rel_error", r.max_rel_error}, {"seeds", r.seeds}, {"pass", r.pass()}});
    }
    if (!o.output.empty() && !o.dry_run) {
        fs::create_directories(o.output);
        write_json(fs::path(o.output) / "gradcheck.json", j);
    }
    return pass ? kOk : kConfigError;
}

int cmd_sequence(const Options& o) {
    RunConfig c = load_config(o);
    if (o.dry_run) {
        if (!c.base.checkpoint.empty()) {
            const FrozenFoundation base = FrozenFoundation::load(c.base.checkpoint);
            if (!base.frozen()) throw ContractError("base checkpoint " + c.base.checkpoint + " is not frozen");
        }
        std::string plan;
        for (const auto& s : plan_steps(c)) plan += " " + s.key.str();
        note("dry run: config valid; steps:" + (plan.empty() ? std::string(" none") : plan));
        return kOk;
    }
    const SequenceResult run = run_sequence(c, note);
    for (const auto& row : run.capabilities) {
        note(row.label + " (" + row.key.str() + "): before " + (row.before ? "yes" : "no") + ", after " +
             (row.after ? "yes" : "no"));
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unicon: continual adaptation of a frozen CT/text foundation model"};
    app.require_subcommand(1);
    Options o;

    auto common = [&o](CLI::App* sub, bool needs_output) {
        sub->add_option("--config", o.config, "run config (key = value with [section] headers)")->check(CLI::ExistingFile);
        sub->add_option("--set", o.overrides, "override, section.key=value (repeatable)");
        auto* out = sub->add_option("--output", o.output, "output / run directory");
        if (needs_output) out->required();
        sub->add_option("--seed", o.seed, "master seed");
        sub->add_flag("--dry-run", o.dry_run, "validate everything, write nothing");
    };

    auto* pretrain = app.add_subcommand("pretrain", "pretrain and freeze the base model");
    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
    auto* adapt = app.add_subcommand("adapt", "run one adaptation step against a run directory");
    auto* eval = app.add_subcommand("eval", "evaluate every route of a run directory");
    auto* audit = app.add_subcommand("audit", "replay probes and verify bit-exact outputs");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    auto* seq = app.add_subcommand("sequence", "pretrain or load the base, then steps 1-3");
    for (auto* sub : {pretrain, gen, adapt, eval, audit, seq}) common(sub, true);
    common(grad, false);
    adapt->add_option("--step", o.step, "step index (1-3)")->required()->check(CLI::Range(1, 3));
    grad->add_option("--seeds", o.seeds, "random instances per family")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return kConfigError;
    }

    try {
        if (*pretrain) return cmd_pretrain(o);
        if (*gen) return cmd_gen_data(o);
        if (*adapt) return cmd_adapt(o);
        if (*eval) return cmd_eval(o);
        if (*audit) return cmd_audit(o);
        if (*grad) return cmd_gradcheck(o);
        if (*seq) return cmd_sequence(o);
    } catch (const AuditFailure& e) {
        note(std::string("audit failure: ") + e.what());
        return kAuditFailure;
    } catch (const DivergenceError& e) {
        note(std::string("divergence: ") + e.what());
        return kDivergence;
    } catch (const TrainingFailure& e) {
        note(std::string("pretraining failed: ") + e.what());
        return kDivergence;
    } catch (const std::exception& e) {
        note(std::string("error: ") + e.what());
        return kConfigError;
    }
    return kConfigError;
}
