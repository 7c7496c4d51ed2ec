#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "unicon/adapters.hpp"
#include "unicon/foundation.hpp"
#include "unicon/heads.hpp"
#include "unicon/metrics.hpp"
#include "unicon/optim.hpp"
#include "unicon/synth.hpp"

namespace unicon {

// ---- run configuration -----------------------------------------------------

struct BaseSettings {
    std::string checkpoint;  // frozen base to load; empty = pretrain one
    VisionEncoderConfig vision;
    TextEncoderConfig text;
    std::size_t pretrain_cases = 200;  // chest corpus, 80/20 train/validation
    PretrainOptions pretrain;
};

struct DataSettings {
    std::string dir;  // dataset written by gen-data; empty = generate in memory
    std::size_t cases = 300;
    std::size_t folds = 3;
    std::size_t validation_fold = 0;
    std::size_t probes = 16;
    CaseParams params = default_params();

    static CaseParams default_params();  // head-and-neck, PET complementarity on
};

struct StepSettings {
    bool enabled = true;
    double learning_rate = 3e-4;
    double weight_decay = 1e-5;
    std::size_t batch_size = 16;
    std::size_t epochs = 50;     // prognosis budget
    std::size_t max_steps = 0;   // segmentation budget (optimizer steps)
    std::size_t lora_rank = 4;
    double lora_alpha = 8.0;
    std::size_t hidden = 64;

    // prognosis
    std::string head = "deephit";
    std::size_t bins = 8;
    double sigma = 0.1;
    double lambda_rank = 0.1;
    ModalitySet modalities{Modality::CT, Modality::TEXT};
    bool text_lora = true;
    bool image_lora = false;

    // CT+PET segmentation
    bool init_from_step2 = true;
};

struct OutputSettings {
    std::string dir = "run";
    bool curves = true;
};

struct RunConfig {
    std::uint64_t seed = 0;
    BaseSettings base;
    DataSettings data;
    StepSettings step1 = default_step(1);
    StepSettings step2 = default_step(2);
    StepSettings step3 = default_step(3);
    OutputSettings output;

    static StepSettings default_step(std::size_t index);

    // `[section]` headers and `key = value` lines; '#' starts a comment. A step
    // runs only when its section is present. Overrides are "section.key=value"
    // and apply after the file. Unknown sections or keys are ConfigErrors.
    static RunConfig parse(const std::string& text, const std::vector<std::string>& overrides = {});
    static RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
    // Built-in defaults (every step enabled) plus overrides.
    static RunConfig defaults(const std::vector<std::string>& overrides = {});
    void validate() const;
    const StepSettings& step(std::size_t index) const;
    StepSettings& step(std::size_t index);
};

// ---- data ------------------------------------------------------------------

// Preprocessed cases ready for training.
struct PreparedData {
    std::vector<Tensor> ct;
    std::vector<Tensor> pet;
    std::vector<Tensor> mask;
    std::vector<std::string> reports;
    std::vector<double> times;
    std::vector<bool> events;
    std::vector<std::size_t> folds;

    std::size_t size() const noexcept { return ct.size(); }
    // Indices with fold == f (validation) or fold != f (training).
    std::vector<std::size_t> fold_indices(std::size_t f, bool validation) const;
};

PreparedData prepare_data(const std::vector<SyntheticCase>& cases, const std::vector<std::size_t>& folds);
// Survival labels permuted across cases (times and events move together).
PreparedData shuffle_survival(const PreparedData& data, std::uint64_t seed);

// ---- steps -----------------------------------------------------------------

struct AdaptationStep {
    std::size_t index = 0;  // 1 prognosis, 2 CT segmentation, 3 CT+PET segmentation
    RoutingKey key;
    StepSettings settings;

    std::string metric() const;  // "c_index" or "dice"
    std::string slug() const;    // file-name form, e.g. "step2_segmentation_ct"
};

std::vector<AdaptationStep> plan_steps(const RunConfig& config);

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t steps = 0;  // optimizer steps so far
    double train_loss = 0.0;
    double val_metric = 0.0;
};

struct StepResult {
    std::unique_ptr<Composition> composition;  // best-epoch arrays
    std::string metric;
    double best_value = 0.0;
    std::size_t best_epoch = 0;
    std::size_t validation_n = 0;
    std::vector<EpochRecord> curve;
};

std::unique_ptr<Composition> build_prognosis(const FrozenFoundation& model, const RoutingKey& key,
                                             const StepSettings& s, Rng& rng);
// `init_from` (CT segmentation) seeds the CT embedding, CT LoRA and decoder.
std::unique_ptr<Composition> build_segmentation(const FrozenFoundation& model, const RoutingKey& key,
                                                const StepSettings& s, const Shape& volume_shape, Rng& rng,
                                                const Composition* init_from = nullptr);

// Trains a freshly built composition on `train`, validating each epoch on
// `validation` and keeping the best epoch. Throws DivergenceError on a
// non-finite loss or metric.
StepResult train_prognosis(const FrozenFoundation& model, std::unique_ptr<Composition> comp, const StepSettings& s,
                           const PreparedData& data, const std::vector<std::size_t>& train,
                           const std::vector<std::size_t>& validation, std::uint64_t seed);
StepResult train_segmentation(const FrozenFoundation& model, std::unique_ptr<Composition> comp, const StepSettings& s,
                              const PreparedData& data, const std::vector<std::size_t>& train,
                              const std::vector<std::size_t>& validation, std::uint64_t seed);

// Validation metric of a trained composition.
double evaluate_prognosis(const FrozenFoundation& model, const Composition& comp, const PreparedData& data,
                          const std::vector<std::size_t>& idx);
double evaluate_segmentation(const FrozenFoundation& model, const Composition& comp, const PreparedData& data,
                             const std::vector<std::size_t>& idx);

// Builds and trains the step's composition; registering it is left to the
// caller. Requires the classification route (and, for step 3 with
// init_from_step2, the CT segmentation route) to be registered already.
StepResult run_step(const FrozenFoundation& model, const AdapterRegistry& registry, const AdaptationStep& step,
                    const PreparedData& data, std::size_t validation_fold, std::uint64_t seed);

// Per-fold validation C-index of prognosis under k-fold cross-validation.
std::vector<double> cross_validate_prognosis(const FrozenFoundation& model, const RoutingKey& key,
                                             const StepSettings& s, const PreparedData& data, std::uint64_t seed);

// ---- sequence and run directory ---------------------------------------------

// Frozen base: loaded from settings.checkpoint or pretrained on the chest corpus.
FrozenFoundation obtain_base(const BaseSettings& settings, std::uint64_t seed);
// Generated in memory or read from data.dir.
PreparedData obtain_data(const DataSettings& settings, std::uint64_t seed);

// Registry holding only the frozen model's own classification route.
AdapterRegistry initial_registry();
ProbeSet make_probes(const RoutingKey& key, const DataSettings& settings, std::uint64_t seed);

struct CapabilityRow {
    RoutingKey key;
    std::string label;  // Cls, Prog, Seg(C), Seg(CP)
    bool before = false;
    bool after = false;
    bool valid_output = false;
};

// Servable routes and whether each produces a finite output of the expected
// shape on its first probe.
std::vector<CapabilityRow> capability_matrix(const FrozenFoundation& model, const AdapterRegistry& before,
                                             const AdapterRegistry& after, const std::vector<ProbeSet>& probes);

struct SequenceResult {
    std::unique_ptr<FrozenFoundation> model;
    AdapterRegistry registry;
    std::vector<EvalReport> reports;
    std::vector<AuditReport> audits;  // one per adaptation step
    std::vector<CapabilityRow> capabilities;
    std::vector<ProbeSet> probes;
    std::vector<Snapshot> snapshots;
};

using Logger = std::function<void(const std::string&)>;

// Layout of a run directory.
namespace run_paths {
std::filesystem::path base(const std::filesystem::path& dir);
std::filesystem::path report(const std::filesystem::path& dir);
std::filesystem::path capability(const std::filesystem::path& dir);
std::filesystem::path checkpoint(const std::filesystem::path& dir, const std::string& slug);
std::filesystem::path snapshot(const std::filesystem::path& dir, const std::string& slug);
std::filesystem::path curve(const std::filesystem::path& dir, const std::string& slug);
}  // namespace run_paths

// Starts a run directory from a frozen base: base.bin, the classification
// route's checkpoint and snapshot, and its step-0 accuracy report. An existing
// report.jsonl is replaced.
SequenceResult bootstrap_run(const RunConfig& config, FrozenFoundation model);

// Trains, registers and persists one step, then audits every earlier route.
// Appends the step's reports. Throws AuditFailure if any earlier output moved.
void execute_step(const RunConfig& config, SequenceResult& run, const PreparedData& data, const AdaptationStep& step,
                  const Logger& log = {});

// Base, step 0 and every enabled step in order, then capability.json.
// Writes under config.output.dir; a failed step leaves the earlier reports
// and checkpoints in place.
SequenceResult run_sequence(const RunConfig& config, const Logger& log = {});

// Reloads base, checkpoints and snapshots of a run directory, in step order.
SequenceResult load_run(const std::filesystem::path& dir);

// Step-0 accuracy on the chest evaluation corpus plus the validation metric
// of every adapted route.
std::vector<EvalReport> evaluate_run(const RunConfig& config, const SequenceResult& run, const PreparedData& data);

void write_capability(const std::filesystem::path& path, const std::vector<CapabilityRow>& rows);

}  // namespace unicon
