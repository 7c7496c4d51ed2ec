#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "unicon/autodiff.hpp"
#include "unicon/container.hpp"
#include "unicon/errors.hpp"
#include "unicon/foundation.hpp"
#include "unicon/rng.hpp"

namespace unicon {

enum class Task { Classification, Prognosis, Segmentation };

enum class Modality : unsigned { CT = 1, PET = 2, TEXT = 4 };

std::string task_name(Task t);
Task parse_task(const std::string& s);
std::string modality_name(Modality m);
Modality parse_modality(const std::string& s);

// Subset of {CT, PET, TEXT}; printed as e.g. "ct+pet".
class ModalitySet {
public:
    ModalitySet() = default;
    ModalitySet(std::initializer_list<Modality> mods);

    bool contains(Modality m) const noexcept { return (bits_ & static_cast<unsigned>(m)) != 0; }
    bool empty() const noexcept { return bits_ == 0; }
    std::vector<Modality> members() const;
    std::string str() const;
    static ModalitySet parse(const std::string& s);

    auto operator<=>(const ModalitySet&) const = default;

private:
    unsigned bits_ = 0;
};

struct RoutingKey {
    Task task = Task::Classification;
    ModalitySet modalities;

    std::string str() const;  // "<task>/<modalities>"
    static RoutingKey parse(const std::string& s);
    auto operator<=>(const RoutingKey&) const = default;
};

// W' = W + (alpha / r) * Phi1 * Phi2, applied without materializing W'.
struct LoraModule {
    std::string target;  // frozen linear layer, e.g. "vision.block0.attn.q"
    std::size_t rank = 0;
    double alpha = 0.0;
    Parameter phi1;  // [d x r], N(0, 0.02^2)
    Parameter phi2;  // [r x h], zero

    // Throws ConfigError unless 1 <= rank <= min(d, h) / 2.
    static LoraModule create(std::string target, std::size_t d, std::size_t h, std::size_t rank, double alpha, Rng& rng);
    double scaling() const { return alpha / static_cast<double>(rank); }
    // (alpha / r) * (x Phi1) Phi2
    Var delta(const Binder& b, Var x) const;
};

// x W + (alpha / r) (x Phi1) Phi2; gradients reach only the LoRA factors when W
// is bound as frozen.
Var lora_forward(const Binder& b, Var x, Var w, const LoraModule& lora);

struct MlpAdapter {
    Parameter fc1_w, fc1_b, fc2_w, fc2_b;

    // zero_output zero-initializes the second layer, making the adapter output 0.
    static MlpAdapter create(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, bool zero_output = false);
    std::size_t in_dim() const { return fc1_w.value.rows(); }
    std::size_t out_dim() const { return fc2_w.value.cols(); }
    Var forward(const Binder& b, Var x) const;  // fc2(gelu(fc1(x))), row-wise
};

// Concat-project fusion: each modality is projected (no bias) to proj_dim,
// projections are concatenated in modality order and fed to an MLP. Absent
// modalities contribute zero blocks. In residual mode the output is
// features[first modality] + MLP(...), with the MLP output zero-initialized.
struct FusionAdapter {
    std::vector<Modality> modalities;
    std::vector<Parameter> projections;  // one [in_dim x proj_dim] per modality
    MlpAdapter mlp;
    bool residual = false;

    static FusionAdapter create(std::vector<Modality> modalities, std::size_t in_dim, std::size_t proj_dim,
                                std::size_t hidden, std::size_t out_dim, const ModalitySet& zero_init, bool residual,
                                Rng& rng);
    std::size_t in_dim() const { return projections.front().value.rows(); }
    Var forward(const Binder& b, const std::map<Modality, Var>& features) const;
};

// Per-token linear map d -> p^3, placed back on the volume grid.
struct DecoderAdapter {
    std::size_t patch_size = 0;
    Parameter weight;  // [d x p^3]
    Parameter bias;    // [p^3]

    static DecoderAdapter create(std::size_t d, std::size_t patch_size, Rng& rng);
    Var decode(const Binder& b, Var tokens, const Shape& volume_shape) const;
};

// Trainable patch + positional embedding for a new resolution (or a new
// modality) feeding the frozen transformer blocks.
struct ResolutionReembed {
    Shape volume_shape;
    std::size_t patch_size = 0;
    Parameter weight;     // [p'^3 x d]
    Parameter bias;       // [d]
    Parameter pos_embed;  // [n' x d]

    // Starts from the frozen embedding: weights are copied when the patch size
    // matches (random otherwise) and the positional table is resampled
    // trilinearly over the patch grid.
    static ResolutionReembed from_base(const FrozenFoundation& model, const Shape& volume_shape, std::size_t patch_size,
                                       Rng& rng);
    std::size_t num_tokens() const { return pos_embed.value.rows(); }
    Var embed(const Binder& b, const Tensor& volume) const;
};

using ModuleBody = std::variant<LoraModule, MlpAdapter, FusionAdapter, DecoderAdapter, ResolutionReembed>;

struct AdapterModule {
    std::string name;
    ModuleBody body;

    std::string kind() const;
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
};

// The ordered adapter set for one routing key. Owns its arrays; parameter
// addresses are stable for the lifetime of the composition.
class Composition {
public:
    explicit Composition(RoutingKey key);
    Composition(const Composition&) = delete;
    Composition& operator=(const Composition&) = delete;

    const RoutingKey& key() const noexcept { return key_; }

    AdapterModule& add(const std::string& name, ModuleBody body);
    const AdapterModule* find(const std::string& name) const;
    bool contains(const std::string& name) const { return find(name) != nullptr; }
    template <class T>
    const T& get(const std::string& name) const;
    template <class T>
    T& get_mutable(const std::string& name);
    const std::vector<std::unique_ptr<AdapterModule>>& modules() const noexcept { return modules_; }

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::size_t parameter_count() const;
    std::string digest() const;

    // Routes every frozen linear layer with a module named
    // "<path>.lora.<layer>" through its LoRA delta. Empty when none exist.
    LinearDelta lora_delta(const std::string& path) const;

    void set_meta(const std::string& key, std::string value) { meta_[key] = std::move(value); }
    std::optional<std::string> find_meta(const std::string& key) const;
    std::string meta(const std::string& key) const;  // throws LookupError when absent
    const std::map<std::string, std::string>& all_meta() const noexcept { return meta_; }

    // Array names: adapter/<task>/<modalities>/<module>/<array>. Records the
    // base_hash the composition was trained against.
    Container to_container(const std::string& base_hash) const;
    static std::unique_ptr<Composition> from_container(const Container& c, const std::string& expected_base_hash);

private:
    std::string prefix() const;

    RoutingKey key_;
    std::vector<std::unique_ptr<AdapterModule>> modules_;
    std::map<std::string, std::string> meta_;
};

template <class T>
const T& Composition::get(const std::string& name) const {
    const AdapterModule* m = find(name);
    if (!m) throw LookupError("composition " + key_.str() + " has no module '" + name + "'");
    const T* body = std::get_if<T>(&m->body);
    if (!body) throw CompositionError("module '" + name + "' is a " + m->kind());
    return *body;
}

template <class T>
T& Composition::get_mutable(const std::string& name) {
    return const_cast<T&>(get<T>(name));
}

// Attention query and value projections of every block of a tower
// ("vision" or "text").
std::vector<std::string> qv_targets(const FrozenFoundation& model, const std::string& tower);

// Adds one LoRA module per target, named "<path>.lora.<target>". Throws
// LookupError listing the valid layer names for an unknown target.
std::size_t attach_lora(const FrozenFoundation& model, Composition& comp, const std::string& path,
                        const std::vector<std::string>& targets, std::size_t rank, double alpha, Rng& rng);

class AdapterRegistry {
public:
    // Throws ConflictError if the key is already bound.
    void register_composition(std::unique_ptr<Composition> comp);
    // Throws RoutingError naming every registered key.
    const Composition& route(const RoutingKey& key) const;
    bool contains(const RoutingKey& key) const { return entries_.count(key) != 0; }
    std::vector<RoutingKey> keys() const;
    std::size_t size() const noexcept { return entries_.size(); }

private:
    std::map<RoutingKey, std::unique_ptr<Composition>> entries_;
};

void save_composition(const std::filesystem::path& path, const Composition& comp, const std::string& base_hash);
std::unique_ptr<Composition> load_composition(const std::filesystem::path& path, const std::string& expected_base_hash);

}  // namespace unicon
