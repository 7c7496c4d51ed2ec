#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unicon/autodiff.hpp"
#include "unicon/container.hpp"

namespace unicon {

struct VisionEncoderConfig {
    std::array<std::size_t, 3> volume_shape{32, 32, 32};
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t proj_dim = 32;

    std::size_t num_patches() const;
    void validate() const;
};

struct TextEncoderConfig {
    std::size_t vocab_size = 256;
    std::size_t max_tokens = 32;
    std::size_t embed_dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t proj_dim = 32;

    void validate() const;
};

// Lowercase whitespace tokenizer over a closed vocabulary. Id 0 is padding,
// id 1 the out-of-vocabulary bucket, known words start at 2.
class Tokenizer {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kOov = 1;

    Tokenizer();  // the built-in report vocabulary
    explicit Tokenizer(std::vector<std::string> words);

    std::vector<std::size_t> encode(const std::string& text, std::size_t max_tokens) const;
    std::size_t vocab_used() const noexcept { return words_.size() + 2; }
    const std::vector<std::string>& words() const noexcept { return words_; }

private:
    std::vector<std::string> words_;
    std::map<std::string, std::size_t> ids_;
};

// The closed vocabulary that templated reports draw from.
const std::vector<std::string>& report_vocabulary();

// Non-overlapping cubic patches, patch grid in row-major (z, y, x) order and
// voxels row-major inside each patch: [D x H x W] -> [n x p^3].
Tensor patchify_volume(const Tensor& volume, std::size_t patch_size);
// Inverse placement of patchify_volume: [n x p^3] -> volume.
Tensor unpatchify_volume(const Tensor& patches, const Shape& volume_shape, std::size_t patch_size);
// Source index of every output voxel of unpatchify_volume, for gather-based autodiff.
std::vector<std::size_t> unpatchify_index(const Shape& volume_shape, std::size_t patch_size);

// Binds parameters onto a tape with the trainability of the current pass.
class Binder {
public:
    explicit Binder(Tape& tape, bool base_trainable = false, bool adapters_trainable = false)
        : tape_(tape), base_trainable_(base_trainable), adapters_trainable_(adapters_trainable) {}

    Tape& tape() const { return tape_; }
    Var base(const Parameter& p) const { return tape_.param(p, base_trainable_); }
    Var adapter(const Parameter& p) const { return tape_.param(p, adapters_trainable_); }
    bool adapters_trainable() const { return adapters_trainable_; }

private:
    Tape& tape_;
    bool base_trainable_;
    bool adapters_trainable_;
};

// Additive correction for a frozen linear layer, keyed by layer name
// (e.g. "vision.block0.attn.q"). Returns nullopt when the layer is untouched.
using LinearDelta = std::function<std::optional<Var>(const Binder&, const std::string& layer, Var x)>;

// Replaces the frozen patch + positional embedding of the image encoder.
using VolumeEmbedding = std::function<Var(const Binder&, const Tensor& volume)>;

struct EncoderAdaptation {
    LinearDelta delta;
    VolumeEmbedding embed;
};

struct Encoding {
    Var tokens;  // [n x d] after the final layer norm
    Var pooled;  // [1 x s], unit L2 norm
};

struct EncodingValues {
    Tensor tokens;
    Tensor pooled;
};

class FrozenFoundation {
public:
    FrozenFoundation(VisionEncoderConfig vision, TextEncoderConfig text, std::uint64_t seed);

    const VisionEncoderConfig& vision_config() const noexcept { return vision_; }
    const TextEncoderConfig& text_config() const noexcept { return text_; }
    const Tokenizer& tokenizer() const noexcept { return tokenizer_; }

    bool frozen() const noexcept { return frozen_; }
    // Marks the model immutable and records base_hash.
    void freeze();
    // SHA-256 over the little-endian payload of every weight in canonical order.
    // Equals the payload digest of the model checkpoint.
    const std::string& base_hash() const;
    std::string compute_hash() const;

    const std::vector<Parameter>& parameters() const noexcept { return params_; }
    const Parameter& parameter(const std::string& name) const;
    // Mutable weights for pretraining; throws ContractError once frozen.
    std::vector<Parameter*> trainable_parameters();
    bool has_parameter(const std::string& name) const { return index_.count(name) != 0; }
    // Names of linear layers that LoRA may target.
    std::vector<std::string> linear_layers() const;
    bool has_linear(const std::string& layer) const;

    // Frozen patch + positional embedding; throws ResolutionError for volumes
    // that do not match the configured shape.
    Var embed_volume(const Binder& b, const Tensor& volume) const;
    Var run_vision_blocks(const Binder& b, Var tokens, const LinearDelta& delta) const;
    Encoding encode_image(const Binder& b, const Tensor& volume, const EncoderAdaptation& adapt = {}) const;
    Encoding encode_text(const Binder& b, const std::vector<std::size_t>& ids, const EncoderAdaptation& adapt = {}) const;
    Encoding encode_report(const Binder& b, const std::string& report, const EncoderAdaptation& adapt = {}) const;

    // Tape-free conveniences over the frozen path.
    EncodingValues encode_image(const Tensor& volume) const;
    EncodingValues encode_text(const std::string& report) const;

    Container to_container() const;
    static FrozenFoundation from_container(const Container& c);
    void save(const std::filesystem::path& path) const;
    static FrozenFoundation load(const std::filesystem::path& path);

private:
    friend class FoundationTrainerAccess;
    friend FrozenFoundation perturb_weight(const FrozenFoundation&, const std::string&, std::size_t, double);

    void add_param(std::string name, Tensor value);
    Var linear(const Binder& b, const std::string& layer, Var x, const LinearDelta& delta) const;
    Var block(const Binder& b, const std::string& prefix, std::size_t heads, Var x, const LinearDelta& delta) const;
    Encoding pool(const Binder& b, const std::string& prefix, Var tokens) const;
    void init_block(const std::string& prefix, std::size_t d, class Rng& rng);
    Parameter& mutable_parameter(const std::string& name);

    VisionEncoderConfig vision_;
    TextEncoderConfig text_;
    Tokenizer tokenizer_;
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
    bool frozen_ = false;
    std::string base_hash_;
};

// A copy of `model` with one weight entry shifted by `delta`, rehashed. Used
// to fault-inject the forgetting audit; the original is left untouched.
FrozenFoundation perturb_weight(const FrozenFoundation& model, const std::string& name, std::size_t index,
                                double delta);

struct ClassScores {
    std::vector<double> scores;
    std::size_t label = 0;
};

// Cosine similarity against each class prompt; argmax with lowest-index ties.
ClassScores classify_similarity(std::span<const double> image_pooled,
                                const std::vector<std::vector<double>>& class_prompts);

struct PretrainSample {
    Tensor volume;  // preprocessed, at the configured vision resolution
    std::string report;
    std::size_t label = 0;
};

struct PretrainOptions {
    std::size_t max_epochs = 20;
    std::size_t batch_size = 8;
    double learning_rate = 1e-3;
    double weight_decay = 1e-5;
    double temperature = 0.07;
    double target_accuracy = 0.9;
    std::uint64_t seed = 0;
    std::function<void(std::size_t epoch, double loss, double accuracy)> on_epoch;
};

struct PretrainResult {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;
};

// Symmetric in-batch contrastive training of both encoders until validation
// accuracy of similarity classification reaches the target, then freezes.
// Throws TrainingFailure (carrying the final accuracy) when the epoch budget
// runs out first.
PretrainResult pretrain_base(FrozenFoundation& model, std::span<const PretrainSample> train,
                             std::span<const PretrainSample> validation,
                             const std::vector<std::string>& class_prompts, const PretrainOptions& options);

// Similarity-classification accuracy of a model on labelled samples.
double classification_accuracy(const FrozenFoundation& model, std::span<const PretrainSample> samples,
                               const std::vector<std::string>& class_prompts);

}  // namespace unicon
