#include "unicon/pipeline.hpp"

#include "unicon/errors.hpp"

namespace unicon {

RoutingKey classification_key() { return {Task::Classification, {Modality::CT}}; }
RoutingKey prognosis_key() { return {Task::Prognosis, {Modality::CT, Modality::TEXT}}; }
RoutingKey segmentation_ct_key() { return {Task::Segmentation, {Modality::CT}}; }
RoutingKey segmentation_ctpet_key() { return {Task::Segmentation, {Modality::CT, Modality::PET}}; }

std::vector<RoutingKey> capability_keys() {
    return {classification_key(), prognosis_key(), segmentation_ct_key(), segmentation_ctpet_key()};
}

std::unique_ptr<Composition> make_classification_composition(const std::vector<std::string>& prompts) {
    if (prompts.empty()) throw ContractError("classification needs at least one class prompt");
    auto comp = std::make_unique<Composition>(classification_key());
    comp->set_meta("classes", std::to_string(prompts.size()));
    for (std::size_t i = 0; i < prompts.size(); ++i) comp->set_meta("prompt." + std::to_string(i), prompts[i]);
    return comp;
}

std::vector<std::string> class_prompts(const Composition& comp) {
    const std::size_t n = std::stoull(comp.meta("classes"));
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(comp.meta("prompt." + std::to_string(i)));
    return out;
}

Encoding prognosis_image(const FrozenFoundation& model, const Composition& comp, const Binder& b, const Tensor& ct) {
    return model.encode_image(b, ct, {comp.lora_delta("image"), {}});
}

Encoding prognosis_text(const FrozenFoundation& model, const Composition& comp, const Binder& b, const std::string& report) {
    return model.encode_report(b, report, {comp.lora_delta("text"), {}});
}

Var prognosis_head(const Composition& comp, const Binder& b, std::optional<Var> image_pooled, std::optional<Var> text_pooled) {
    if (image_pooled && comp.contains("image.mlp")) image_pooled = comp.get<MlpAdapter>("image.mlp").forward(b, *image_pooled);
    if (text_pooled && comp.contains("text.mlp")) text_pooled = comp.get<MlpAdapter>("text.mlp").forward(b, *text_pooled);
    return prognosis_forward(b, image_pooled, text_pooled, comp.get<FusionAdapter>("fusion"), comp.get<MlpAdapter>("head"));
}

SurvivalModel prognosis_model(const Composition& comp) { return parse_survival_model(comp.meta("head")); }

namespace {

Encoding encode_path(const FrozenFoundation& model, const Composition& comp, const Binder& b, const std::string& path,
                     const Tensor& volume) {
    const auto& reembed = comp.get<ResolutionReembed>(path + ".embed");
    VolumeEmbedding embed = [&reembed](const Binder& bb, const Tensor& v) { return reembed.embed(bb, v); };
    return model.encode_image(b, volume, {comp.lora_delta(path), embed});
}

}  // namespace

Var segmentation_logits(const FrozenFoundation& model, const Composition& comp, const Binder& b, const Tensor& ct,
                        const Tensor* pet) {
    Var tokens = encode_path(model, comp, b, "ct", ct).tokens;
    if (comp.key().modalities.contains(Modality::PET)) {
        if (!pet) throw ContractError("route " + comp.key().str() + " needs a PET volume");
        if (pet->shape() != ct.shape()) throw ShapeError("CT and PET volumes must be co-registered");
        Var pet_tokens = encode_path(model, comp, b, "pet", *pet).tokens;
        tokens = comp.get<FusionAdapter>("fusion").forward(b, {{Modality::CT, tokens}, {Modality::PET, pet_tokens}});
    }
    return comp.get<DecoderAdapter>("decoder").decode(b, tokens, ct.shape());
}

Tensor run_composition(const FrozenFoundation& model, const Composition& comp, const TaskInput& in) {
    const RoutingKey& key = comp.key();
    const auto need = [&](const void* p, const char* what) {
        if (!p) throw ContractError("route " + key.str() + " needs a " + what + " input");
    };
    Tape tape;
    Binder b(tape);
    switch (key.task) {
        case Task::Classification: {
            need(in.ct, "CT");
            std::vector<std::vector<double>> prompts;
            for (const auto& p : class_prompts(comp)) {
                const auto e = model.encode_text(p);
                prompts.emplace_back(e.pooled.data().begin(), e.pooled.data().end());
            }
            const auto img = model.encode_image(*in.ct);
            const auto scores = classify_similarity(img.pooled.data(), prompts);
            return Tensor({1, scores.scores.size()}, scores.scores);
        }
        case Task::Prognosis: {
            std::optional<Var> img, txt;
            if (key.modalities.contains(Modality::CT)) {
                need(in.ct, "CT");
                img = prognosis_image(model, comp, b, *in.ct).pooled;
            }
            if (key.modalities.contains(Modality::TEXT)) {
                need(in.report, "report");
                txt = prognosis_text(model, comp, b, *in.report).pooled;
            }
            return prognosis_head(comp, b, img, txt).value();
        }
        case Task::Segmentation:
            need(in.ct, "CT");
            return segmentation_logits(model, comp, b, *in.ct, in.pet).value();
    }
    throw ContractError("unknown task");
}

Tensor infer(const FrozenFoundation& model, const AdapterRegistry& registry, const RoutingKey& key, const TaskInput& input) {
    return run_composition(model, registry.route(key), input);
}

}  // namespace unicon
