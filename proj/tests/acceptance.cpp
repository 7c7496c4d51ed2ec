// Acceptance runner: `unicon_acceptance <n>` checks one criterion and prints a
// single PASS/FAIL line. Exit status is 0 on PASS.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "support.hpp"
#include "unicon/errors.hpp"
#include "unicon/gradcheck.hpp"
#include "unicon/pipeline.hpp"
#include "unicon/trainer.hpp"

using namespace unicon;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

RunConfig toy_config(const fs::path& out) {
    RunConfig c = RunConfig::load(UNICON_TOY_CONFIG);
    c.seed = 1;
    c.output.dir = out.string();
    c.validate();
    return c;
}

FrozenFoundation pretrained_base(std::uint64_t seed) { return obtain_base(BaseSettings{}, seed); }

Outcome zero_init_identity() {
    FrozenFoundation m(VisionEncoderConfig{}, TextEncoderConfig{}, 3);
    m.freeze();
    DataSettings ds;
    Rng rng(4);
    StepSettings s1 = RunConfig::default_step(1);
    s1.image_lora = true;
    auto prog = build_prognosis(m, prognosis_key(), s1, rng);
    auto text_only = build_prognosis(m, {Task::Prognosis, {Modality::TEXT}}, s1, rng);
    const StepSettings s2 = RunConfig::default_step(2), s3 = RunConfig::default_step(3);
    auto seg_ct = build_segmentation(m, segmentation_ct_key(), s2, ds.params.shape, rng);
    auto seg_ctpet = build_segmentation(m, segmentation_ctpet_key(), s3, ds.params.shape, rng);
    auto seg_ctpet_init = build_segmentation(m, segmentation_ctpet_key(), s3, ds.params.shape, rng, seg_ct.get());
    const ProbeSet probes = make_probes(segmentation_ctpet_key(), ds, 5);
    const ProbeSet prog_probes = make_probes(prognosis_key(), ds, 5);

    std::size_t compared = 0, mismatched = 0;
    auto expect = [&](const Tensor& got, const Tensor& want) {
        ++compared;
        mismatched += !bit_identical(got, want);
    };
    for (std::size_t i = 0; i < 16; ++i) {
        Tape tape;
        Binder b(tape);
        const Tensor& ct = prog_probes.ct[i];
        const std::string& report = prog_probes.reports[i];
        const Var img = tape.constant(m.encode_image(ct).pooled);
        const Var txt = tape.constant(m.encode_text(report).pooled);
        expect(run_composition(m, *prog, {&ct, nullptr, &report}), prognosis_head(*prog, b, img, txt).value());
        expect(run_composition(m, *prog, {&ct, nullptr, &report}), prognosis_head(*prog, b, std::nullopt, txt).value());
        expect(run_composition(m, *text_only, {nullptr, nullptr, &report}),
               prognosis_head(*text_only, b, std::nullopt, txt).value());

        const Tensor& sct = probes.ct[i];
        const Tensor& spet = probes.pet[i];
        const Var frozen_tokens = tape.constant(m.encode_image(sct).tokens);
        expect(run_composition(m, *seg_ct, {&sct, nullptr, nullptr}),
               seg_ct->get<DecoderAdapter>("decoder").decode(b, frozen_tokens, sct.shape()).value());
        expect(run_composition(m, *seg_ctpet, {&sct, &spet, nullptr}),
               seg_ctpet->get<DecoderAdapter>("decoder").decode(b, frozen_tokens, sct.shape()).value());
        expect(run_composition(m, *seg_ctpet_init, {&sct, &spet, nullptr}), run_composition(m, *seg_ct, {&sct, nullptr, nullptr}));
    }
    return {compared == 96 && mismatched == 0,
            std::to_string(compared - mismatched) + "/" + std::to_string(compared) + " outputs bit-identical"};
}

Outcome lora_equivalence() {
    Rng rng(2);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 4 + rng.index(29), h = 4 + rng.index(29), r = 1 + rng.index(std::min<std::size_t>(8, std::min(d, h) / 2));
        auto lora = LoraModule::create("w", d, h, r, rng.uniform(1.0, 16.0), rng);
        lora.phi2.value = rng.normal_tensor({r, h}, 0.5);
        const Tensor x = rng.normal_tensor({1 + rng.index(6), d}, 1.0);
        const Tensor w = rng.normal_tensor({d, h}, 1.0);
        Tensor dense = w;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < h; ++j) {
                long double s = 0;
                for (std::size_t k = 0; k < r; ++k) s += lora.phi1.value.at(i, k) * lora.phi2.value.at(k, j);
                dense.at(i, j) += static_cast<double>(lora.scaling() * s);
            }
        Tensor want({x.rows(), h});
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < h; ++j) {
                long double s = 0;
                for (std::size_t k = 0; k < d; ++k) s += x.at(i, k) * dense.at(k, j);
                want.at(i, j) = static_cast<double>(s);
            }
        Tape tape;
        Binder b(tape);
        worst = std::max(worst, max_abs_diff(lora_forward(b, tape.constant(x), tape.constant(w), lora).value(), want));
    }
    return {worst < 1e-12, "max abs diff " + fmt("%.3e", worst) + " over 100 instances"};
}

Outcome gradient_integrity() {
    const std::set<std::string> required{"lora_attention", "fusion_head", "decoder_dice_ce", "mtlr", "deephit"};
    std::set<std::string> seen;
    bool pass = true;
    double worst = 0.0;
    std::string failing;
    for (const auto& r : run_grad_checks(20, 11)) {
        seen.insert(r.family);
        worst = std::max(worst, r.max_rel_error);
        if (!r.pass() || r.seeds < 20) {
            pass = false;
            failing += " " + r.family;
        }
    }
    std::string missing;
    for (const auto& f : required)
        if (!seen.count(f)) missing += " " + f;
    return {pass && missing.empty(), std::to_string(seen.size()) + " families, worst rel error " + fmt("%.3e", worst) +
                                         (failing.empty() ? "" : ", failing:" + failing) +
                                         (missing.empty() ? "" : ", missing:" + missing)};
}

Outcome no_forgetting() {
    unicon::test::TempDir dir("acceptance_forgetting");
    const RunConfig c = toy_config(dir / "run");
    const SequenceResult run = run_sequence(c);
    std::size_t checked = 0;
    bool all_zero = run.audits.size() == 3;
    for (const auto& a : run.audits)
        for (const auto& e : a.entries) {
            ++checked;
            all_zero = all_zero && e.pass() && e.max_deviation == 0.0;
        }
    const FrozenFoundation bad = perturb_weight(*run.model, "vision.block0.mlp.fc1.weight", 0, 0.5);
    const AuditReport control = forgetting_audit(bad, run.registry, run.probes, run.snapshots, 3);
    std::size_t moved = 0;
    for (const auto& e : control.entries) moved += e.max_deviation > 0.0;
    const bool pass = all_zero && checked == 1 + 2 + 3 && moved == control.entries.size() && moved == 4;
    return {pass, std::to_string(checked) + " route audits at deviation 0; fault injection moved " + std::to_string(moved) +
                      "/" + std::to_string(control.entries.size()) + " routes"};
}

std::vector<SurvivalRecord> random_cohort(Rng& rng, std::size_t n) {
    std::vector<SurvivalRecord> rec;
    for (std::size_t i = 0; i < n; ++i) rec.push_back({std::round(rng.uniform(0.1, 10.0) * 4) / 4, rng.bernoulli(0.7), 0});
    return rec;
}

Outcome metric_oracles() {
    Rng rng(5);
    std::size_t c_ok = 0, d_ok = 0, loss_ok = 0, loss_n = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 5 + rng.index(60);
        auto rec = random_cohort(rng, n);
        rec[0].event = true;
        rec[0].time = 0.01;
        std::vector<double> risk(n);
        for (auto& r : risk) r = std::round(rng.normal(0, 2) * 2) / 2;
        c_ok += concordance_index(risk, rec) == oracle::c_index(risk, rec);

        Tensor a({6, 5, 4}), b({6, 5, 4});
        const double pa = rng.uniform(0, 0.6), pb = rng.uniform(0, 0.6);
        for (std::size_t i = 0; i < a.numel(); ++i) {
            a[i] = rng.bernoulli(pa) ? 1.0 : 0.0;
            b[i] = rng.bernoulli(pb) ? 1.0 : 0.0;
        }
        d_ok += dice_score(a, b) == oracle::dice(a, b);
    }
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t K = 2 + rng.index(3), n = 1 + rng.index(5);
        std::vector<SurvivalRecord> rec;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t bin = rng.index(K);
            rec.push_back({1.0 + static_cast<double>(bin) + rng.uniform(0, 0.9), rng.bernoulli(0.6), bin});
        }
        const Tensor logits = rng.normal_tensor({n, K}, 1.5), scores = rng.normal_tensor({n, K - 1}, 1.5);
        std::vector<std::vector<double>> lrows, srows;
        for (std::size_t i = 0; i < n; ++i) {
            lrows.emplace_back(logits.data().begin() + i * K, logits.data().begin() + (i + 1) * K);
            srows.emplace_back(scores.data().begin() + i * (K - 1), scores.data().begin() + (i + 1) * (K - 1));
        }
        Tape tape;
        const double dh = deephit_loss(tape.constant(logits), rec, 0.1, 0.1).total.value().item();
        const double mt = mtlr_loss(tape.constant(scores), rec).value().item();
        loss_ok += std::abs(dh - oracle::deephit(lrows, rec, 0.1, 0.1).total) < 1e-10;
        loss_ok += std::abs(mt - oracle::mtlr(srows, rec)) < 1e-10;
        loss_n += 2;
    }
    return {c_ok == 200 && d_ok == 200 && loss_ok == loss_n,
            "C-index " + std::to_string(c_ok) + "/200, Dice " + std::to_string(d_ok) + "/200, survival losses " +
                std::to_string(loss_ok) + "/" + std::to_string(loss_n)};
}

Outcome prognosis_learnability() {
    const std::uint64_t seed = 7;
    const FrozenFoundation m = pretrained_base(seed);
    const PreparedData data = obtain_data(DataSettings{}, seed);
    const StepSettings s = RunConfig::default_step(1);
    const double both = mean(cross_validate_prognosis(m, prognosis_key(), s, data, seed));
    const double text = mean(cross_validate_prognosis(m, {Task::Prognosis, {Modality::TEXT}}, s, data, seed));
    const double shuffled = mean(cross_validate_prognosis(m, prognosis_key(), s, shuffle_survival(data, seed + 1), seed));
    const bool pass = data.size() == 300 && both >= 0.70 && both >= text - 0.02 && shuffled >= 0.40 && shuffled <= 0.60;
    return {pass, "3-fold C-index I+T " + fmt("%.4f", both) + ", T " + fmt("%.4f", text) + ", shuffled " +
                      fmt("%.4f", shuffled)};
}

Outcome segmentation_learnability() {
    const std::uint64_t seed = 7;
    const FrozenFoundation m = pretrained_base(seed);
    const RunConfig c = RunConfig::defaults();
    const auto steps = plan_steps(c);

    DataSettings easy;
    easy.params.complementarity = false;
    const PreparedData easy_data = obtain_data(easy, seed);
    AdapterRegistry easy_reg = initial_registry();
    const double easy_dice = run_step(m, easy_reg, steps[1], easy_data, 0, seed).best_value;

    const PreparedData data = obtain_data(DataSettings{}, seed);
    AdapterRegistry reg = initial_registry();
    StepResult ct = run_step(m, reg, steps[1], data, 0, seed);
    const double ct_dice = ct.best_value;
    reg.register_composition(std::move(ct.composition));
    const double ctpet_dice = run_step(m, reg, steps[2], data, 0, seed).best_value;

    const bool pass = easy_dice >= 0.80 && ctpet_dice >= ct_dice + 0.02;
    return {pass, "easy CT Dice " + fmt("%.4f", easy_dice) + "; complementary CT " + fmt("%.4f", ct_dice) + ", CT+PET " +
                      fmt("%.4f", ctpet_dice)};
}

Outcome resolution_adaptation() {
    const std::uint64_t seed = 7;
    const FrozenFoundation m = pretrained_base(seed);
    const std::string hash = m.compute_hash();
    DataSettings ds;
    const ProbeSet probes = make_probes(classification_key(), ds, 9);
    std::vector<Tensor> before;
    for (std::size_t i = 0; i < probes.size(); ++i) before.push_back(m.encode_image(probes.ct[i]).tokens);

    CaseParams p = ds.params;
    p.shape = {48, 48, 48};
    p.radius_min *= 1.5;
    p.radius_max *= 1.5;
    const auto cases = generate_cases(seed, 40, p);
    Rng rng(seed);
    StepSettings s = RunConfig::default_step(2);
    auto comp = build_segmentation(m, segmentation_ct_key(), s, {48, 48, 48}, rng);
    const std::size_t tokens = comp->get<ResolutionReembed>("ct.embed").num_tokens();
    AdamW opt(comp->parameters(), {s.learning_rate, 0.9, 0.999, 1e-8, s.weight_decay});
    std::vector<double> losses;
    for (std::size_t step = 0; step < 200; ++step) {
        const SyntheticCase& cs = cases[step % cases.size()];
        const Tensor ct = preprocess_ct(cs.ct);
        Tape tape;
        Binder b(tape, false, true);
        const Var loss = dice_ce_loss(segmentation_logits(m, *comp, b, ct, nullptr), cs.mask, 1.0, 1.0);
        losses.push_back(loss.value().item());
        tape.backward(loss);
        opt.step(tape.param_grads());
    }
    const double initial = mean({losses.begin(), losses.begin() + 20});
    const double final = mean({losses.end() - 20, losses.end()});

    bool identical = m.compute_hash() == hash;
    for (std::size_t i = 0; i < probes.size(); ++i) identical = identical && bit_identical(m.encode_image(probes.ct[i]).tokens, before[i]);
    bool rejected = false;
    try {
        m.encode_image(preprocess_ct(cases[0].ct));
    } catch (const ResolutionError&) {
        rejected = true;
    }
    return {tokens == 216 && final < initial && identical && rejected,
            "48^3 re-embed with " + std::to_string(tokens) + " tokens; loss " + fmt("%.4f", initial) + " -> " +
                fmt("%.4f", final) + " (mean of first/last 20 of 200 steps); 32^3 path " +
                (identical ? "bit-identical" : "changed")};
}

Outcome capability_matrix_check() {
    unicon::test::TempDir dir("acceptance_capability");
    const SequenceResult run = run_sequence(toy_config(dir / "run"));
    std::set<std::string> before, after, want;
    bool valid = true;
    for (const auto& row : run.capabilities) {
        if (row.before) before.insert(row.label);
        if (row.after) after.insert(row.label);
        if (row.after) valid = valid && row.valid_output;
    }
    for (const auto& k : capability_keys()) want.insert(k.str());
    std::set<std::string> registered;
    for (const auto& k : capability_keys())
        if (run.registry.contains(k)) registered.insert(k.str());
    auto join = [](const std::set<std::string>& s) {
        std::string out;
        for (const auto& x : s) out += (out.empty() ? "" : ",") + x;
        return "{" + out + "}";
    };
    const bool pass = before == std::set<std::string>{"Cls"} &&
                      after == std::set<std::string>{"Cls", "Prog", "Seg(C)", "Seg(CP)"} && valid && registered == want &&
                      run.registry.size() == 4;
    return {pass, "before " + join(before) + ", after " + join(after) + (valid ? ", outputs valid" : ", invalid output")};
}

int cli(const std::string& args) {
    const std::string cmd = std::string(UNICON_CLI_PATH) + " " + args + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
    unicon::test::TempDir dir("acceptance_determinism");
    const std::string base = std::string("sequence --config ") + UNICON_TOY_CONFIG + " --seed 5 --output ";
    const int a = cli(base + (dir / "a").string()), b = cli(base + (dir / "b").string());
    if (a != 0 || b != 0) return {false, "sequence exit codes " + std::to_string(a) + ", " + std::to_string(b)};
    std::size_t files = 0, same = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
        const auto ext = e.path().extension();
        if (ext != ".bin" && e.path().filename() != "report.jsonl") continue;
        ++files;
        const fs::path other = dir / "b" / fs::relative(e.path(), dir / "a");
        same += fs::exists(other) && slurp(e.path()) == slurp(other);
    }
    return {files == 10 && same == files, std::to_string(same) + "/" + std::to_string(files) +
                                              " artifacts byte-identical (report.jsonl, base, checkpoints, snapshots)"};
}

struct Criterion {
    std::string name;
    std::function<Outcome()> check;
    double budget_s;  // 0 = unbounded
};

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> all{
        {"zero-init identity", zero_init_identity, 10},
        {"LoRA equivalence", lora_equivalence, 5},
        {"gradient integrity", gradient_integrity, 120},
        {"no forgetting", no_forgetting, 60},
        {"metric oracles", metric_oracles, 30},
        {"prognosis learnability", prognosis_learnability, 600},
        {"segmentation learnability and multimodal gain", segmentation_learnability, 900},
        {"resolution adaptation", resolution_adaptation, 300},
        {"capability matrix", capability_matrix_check, 0},
        {"determinism", determinism, 0},
    };
    return all;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: unicon_acceptance <criterion 1-10>\n";
        return 2;
    }
    const int n = std::atoi(argv[1]);
    if (n < 1 || n > static_cast<int>(criteria().size())) {
        std::cerr << "criterion must be 1-10\n";
        return 2;
    }
    const auto& [name, check, budget] = criteria()[static_cast<std::size_t>(n - 1)];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = check();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (budget > 0 && secs > budget) {
        o.pass = false;
        o.detail += "; over the " + fmt("%.0f", budget) + " s budget";
    }
    std::printf("criterion %d %s: %s (%s; %.1f s)\n", n, name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    return o.pass ? 0 : 1;
}
