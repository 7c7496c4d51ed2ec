#include "unicon/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "unicon/errors.hpp"

namespace unicon {

double concordance_index(std::span<const double> risks, std::span<const SurvivalRecord> records) {
    if (risks.size() != records.size()) throw ShapeError("one risk per survival record is required");
    if (risks.size() < 2) throw DegenerateCohortError("the C-index needs at least two records");
    double concordant = 0.0;
    std::size_t comparable = 0;
    for (std::size_t i = 0; i < risks.size(); ++i) {
        if (!records[i].event) continue;
        for (std::size_t j = 0; j < risks.size(); ++j) {
            if (!(records[i].time < records[j].time)) continue;
            ++comparable;
            if (risks[i] > risks[j]) {
                concordant += 1.0;
            } else if (risks[i] == risks[j]) {
                concordant += 0.5;
            }
        }
    }
    if (comparable == 0) throw DegenerateCohortError("no comparable pairs (no event precedes another observed time)");
    return concordant / static_cast<double>(comparable);
}

double dice_score(const Tensor& pred, const Tensor& truth) {
    if (pred.shape() != truth.shape()) {
        throw ShapeError("dice_score shapes differ: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
    }
    std::size_t p = 0, t = 0, both = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double a = pred[i], b = truth[i];
        if ((a != 0.0 && a != 1.0) || (b != 0.0 && b != 1.0)) throw ContractError("dice_score expects binary volumes");
        p += a == 1.0;
        t += b == 1.0;
        both += a == 1.0 && b == 1.0;
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

Tensor binarize_logits(const Tensor& logits) {
    Tensor out(logits.shape());
    for (std::size_t i = 0; i < logits.numel(); ++i) out[i] = logits[i] > 0.0 ? 1.0 : 0.0;
    return out;
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
    if (predicted.size() != truth.size() || predicted.empty()) throw ContractError("accuracy needs equal, non-empty label vectors");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == truth[i];
    return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["task"] = task;
    j["metric"] = metric;
    j["value"] = value;
    j["n"] = n;
    j["fold"] = fold ? nlohmann::ordered_json(*fold) : nlohmann::ordered_json(nullptr);
    return j.dump();
}

void append_reports(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw FormatError("cannot open " + path.string() + " for appending");
    for (const auto& r : reports) out << r.to_json() << "\n";
}

std::vector<EvalReport> read_reports(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + path.string());
    std::vector<EvalReport> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        EvalReport r;
        r.step = j.at("step").get<std::size_t>();
        r.task = j.at("task").get<std::string>();
        r.metric = j.at("metric").get<std::string>();
        r.value = j.at("value").get<double>();
        r.n = j.at("n").get<std::size_t>();
        if (!j.at("fold").is_null()) r.fold = j.at("fold").get<std::size_t>();
        out.push_back(std::move(r));
    }
    return out;
}

std::size_t ProbeSet::size() const { return std::max({ct.size(), pet.size(), reports.size()}); }

TaskInput ProbeSet::input(std::size_t i) const {
    TaskInput in;
    if (i < ct.size()) in.ct = &ct[i];
    if (i < pet.size()) in.pet = &pet[i];
    if (i < reports.size()) in.report = &reports[i];
    return in;
}

std::vector<Tensor> replay_probes(const FrozenFoundation& model, const AdapterRegistry& registry, const ProbeSet& probes) {
    const Composition& comp = registry.route(probes.key);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < probes.size(); ++i) out.push_back(run_composition(model, comp, probes.input(i)));
    return out;
}

Snapshot capture_snapshot(const FrozenFoundation& model, const AdapterRegistry& registry, const ProbeSet& probes,
                          std::size_t step) {
    return {probes.key, step, replay_probes(model, registry, probes)};
}

bool AuditReport::pass() const {
    return std::all_of(entries.begin(), entries.end(), [](const AuditEntry& e) { return e.pass(); });
}

AuditReport forgetting_audit(const FrozenFoundation& model, const AdapterRegistry& registry,
                             const std::vector<ProbeSet>& probes, const std::vector<Snapshot>& snapshots,
                             std::size_t audited_step) {
    AuditReport report;
    for (const auto& ps : probes) {
        const Snapshot* snap = nullptr;
        for (const auto& s : snapshots) {
            if (s.key == ps.key) snap = &s;
        }
        if (!snap) throw AuditConfigError("no snapshot recorded for route " + ps.key.str());
        AuditEntry e;
        e.key = ps.key;
        e.recorded_step = snap->step;
        e.audited_step = audited_step;
        const auto now = replay_probes(model, registry, ps);
        e.bit_exact = now.size() == snap->outputs.size();
        for (std::size_t i = 0; e.bit_exact && i < now.size(); ++i) {
            if (now[i].shape() != snap->outputs[i].shape()) {
                e.bit_exact = false;
                break;
            }
            e.max_deviation = std::max(e.max_deviation, max_abs_diff(now[i], snap->outputs[i]));
            e.bit_exact = e.bit_exact && bit_identical(now[i], snap->outputs[i]);
        }
        if (!e.bit_exact && e.max_deviation == 0.0) e.max_deviation = std::numeric_limits<double>::infinity();
        report.entries.push_back(e);
    }
    return report;
}

void save_snapshot(const std::filesystem::path& path, const ProbeSet& probes, const Snapshot& snap) {
    if (probes.key != snap.key) throw ContractError("probe set and snapshot belong to different routes");
    Container c;
    c.set_meta("kind", "snapshot");
    c.set_meta("routing_key", snap.key.str());
    c.set_meta("step", std::to_string(snap.step));
    c.set_meta("probes", std::to_string(probes.size()));
    c.set_meta("has_ct", probes.ct.empty() ? "0" : "1");
    c.set_meta("has_pet", probes.pet.empty() ? "0" : "1");
    c.set_meta("has_report", probes.reports.empty() ? "0" : "1");
    for (std::size_t i = 0; i < probes.size(); ++i) {
        const std::string id = std::to_string(i);
        if (!probes.ct.empty()) c.arrays.push_back({"probe/" + id + "/ct", probes.ct[i]});
        if (!probes.pet.empty()) c.arrays.push_back({"probe/" + id + "/pet", probes.pet[i]});
        if (!probes.reports.empty()) c.set_meta("report." + id, probes.reports[i]);
    }
    for (std::size_t i = 0; i < snap.outputs.size(); ++i) c.arrays.push_back({"output/" + std::to_string(i), snap.outputs[i]});
    write_container(path, c);
}

std::pair<ProbeSet, Snapshot> load_snapshot(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.find_meta("kind") != std::optional<std::string>("snapshot")) throw FormatError(path.string() + " is not a snapshot");
    ProbeSet ps;
    Snapshot s;
    ps.key = s.key = RoutingKey::parse(c.meta_value("routing_key"));
    s.step = std::stoull(c.meta_value("step"));
    const std::size_t n = std::stoull(c.meta_value("probes"));
    for (std::size_t i = 0; i < n; ++i) {
        const std::string id = std::to_string(i);
        if (c.meta_value("has_ct") == "1") ps.ct.push_back(c.array("probe/" + id + "/ct"));
        if (c.meta_value("has_pet") == "1") ps.pet.push_back(c.array("probe/" + id + "/pet"));
        if (c.meta_value("has_report") == "1") ps.reports.push_back(c.meta_value("report." + id));
        s.outputs.push_back(c.array("output/" + id));
    }
    return {std::move(ps), std::move(s)};
}

}  // namespace unicon
