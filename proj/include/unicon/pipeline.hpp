#pragma once

#include <optional>
#include <string>
#include <vector>

#include "unicon/adapters.hpp"
#include "unicon/foundation.hpp"
#include "unicon/heads.hpp"

namespace unicon {

// Preprocessed inputs for one sample; which fields are needed depends on the
// routing key.
struct TaskInput {
    const Tensor* ct = nullptr;
    const Tensor* pet = nullptr;
    const std::string* report = nullptr;
};

RoutingKey classification_key();
RoutingKey prognosis_key();
RoutingKey segmentation_ct_key();
RoutingKey segmentation_ctpet_key();
// The four task routes of the full sequence, in sequence order.
std::vector<RoutingKey> capability_keys();

// Classification uses the frozen model as is; the composition holds no
// arrays, only the class prompts.
std::unique_ptr<Composition> make_classification_composition(const std::vector<std::string>& class_prompts);
std::vector<std::string> class_prompts(const Composition& comp);

// Frozen image embedding of `ct` adapted by the composition's "image" LoRA
// modules, if any.
Encoding prognosis_image(const FrozenFoundation& model, const Composition& comp, const Binder& b, const Tensor& ct);
Encoding prognosis_text(const FrozenFoundation& model, const Composition& comp, const Binder& b, const std::string& report);
// Head output [n x width] from per-modality pooled rows: optional
// "image.mlp" / "text.mlp" adapters, then fusion and head.
Var prognosis_head(const Composition& comp, const Binder& b, std::optional<Var> image_pooled, std::optional<Var> text_pooled);
SurvivalModel prognosis_model(const Composition& comp);

// Voxel logits with the volume's shape.
Var segmentation_logits(const FrozenFoundation& model, const Composition& comp, const Binder& b, const Tensor& ct,
                        const Tensor* pet);

// One frozen forward pass of a composition: class scores [1 x C], head output
// [1 x width] or voxel logits.
Tensor run_composition(const FrozenFoundation& model, const Composition& comp, const TaskInput& input);
Tensor infer(const FrozenFoundation& model, const AdapterRegistry& registry, const RoutingKey& key, const TaskInput& input);

}  // namespace unicon
