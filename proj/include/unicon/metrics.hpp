#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unicon/adapters.hpp"
#include "unicon/foundation.hpp"
#include "unicon/heads.hpp"
#include "unicon/pipeline.hpp"

namespace unicon {

// Harrell's C. Comparable pairs: event_i and t_i < t_j (time ties excluded).
// Risk ties count one half. Throws DegenerateCohortError when nothing is comparable.
double concordance_index(std::span<const double> risks, std::span<const SurvivalRecord> records);

// 2|P & T| / (|P| + |T|) on {0, 1} volumes; 1.0 when both are empty.
double dice_score(const Tensor& pred, const Tensor& truth);
// Voxel logits -> {0, 1} at probability 0.5.
Tensor binarize_logits(const Tensor& logits);

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);

struct EvalReport {
    std::size_t step = 0;
    std::string task;
    std::string metric;
    double value = 0.0;
    std::size_t n = 0;
    std::optional<std::size_t> fold;

    std::string to_json() const;  // one line, no trailing newline
};

void append_reports(const std::filesystem::path& path, const std::vector<EvalReport>& reports);
std::vector<EvalReport> read_reports(const std::filesystem::path& path);

// Fixed probe inputs for one task route (preprocessed volumes).
struct ProbeSet {
    RoutingKey key;
    std::vector<Tensor> ct;
    std::vector<Tensor> pet;
    std::vector<std::string> reports;

    std::size_t size() const;
    TaskInput input(std::size_t i) const;
};

// Outputs of one route on its probe set, captured when its step finished.
struct Snapshot {
    RoutingKey key;
    std::size_t step = 0;
    std::vector<Tensor> outputs;
};

std::vector<Tensor> replay_probes(const FrozenFoundation& model, const AdapterRegistry& registry, const ProbeSet& probes);
Snapshot capture_snapshot(const FrozenFoundation& model, const AdapterRegistry& registry, const ProbeSet& probes,
                          std::size_t step);

struct AuditEntry {
    RoutingKey key;
    std::size_t recorded_step = 0;
    std::size_t audited_step = 0;
    double max_deviation = 0.0;  // +inf on shape or count mismatch
    bool bit_exact = false;

    bool pass() const { return bit_exact && max_deviation == 0.0; }
};

struct AuditReport {
    std::vector<AuditEntry> entries;
    bool pass() const;
};

// Replays every probe set through route() and compares with its snapshot.
// Throws AuditConfigError when a probe set has no snapshot.
AuditReport forgetting_audit(const FrozenFoundation& model, const AdapterRegistry& registry,
                             const std::vector<ProbeSet>& probes, const std::vector<Snapshot>& snapshots,
                             std::size_t audited_step);

void save_snapshot(const std::filesystem::path& path, const ProbeSet& probes, const Snapshot& snap);
std::pair<ProbeSet, Snapshot> load_snapshot(const std::filesystem::path& path);

}  // namespace unicon
