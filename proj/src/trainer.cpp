#include "unicon/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "unicon/errors.hpp"
#include "unicon/pipeline.hpp"

namespace unicon {

namespace fs = std::filesystem;

namespace {

// Stream indices under the master seed.
constexpr std::uint64_t kBaseInitStream = 1;
constexpr std::uint64_t kPretrainStream = 2;
constexpr std::uint64_t kDataStream = 3;
constexpr std::uint64_t kFoldStream = 4;
constexpr std::uint64_t kChestProbeStream = 5;
constexpr std::uint64_t kProbeStream = 6;
constexpr std::uint64_t kClsEvalStream = 7;
constexpr std::uint64_t kStepStream = 16;
constexpr std::uint64_t kCrossValStream = 64;

constexpr std::size_t kClsEvalCases = 40;

CaseParams chest_params(const Shape& shape) {
    CaseParams p;
    p.site = Site::Chest;
    p.lesion_prob = 0.5;
    const double scale = static_cast<double>(*std::min_element(shape.begin(), shape.end())) / 32.0;
    p.radius_min *= scale;
    p.radius_max *= scale;
    p.shape = shape;
    return p;
}

Shape vision_shape(const FrozenFoundation& model) {
    const auto& v = model.vision_config().volume_shape;
    return {v[0], v[1], v[2]};
}

std::vector<Tensor> values_of(const Composition& comp) {
    std::vector<Tensor> out;
    for (const Parameter* p : comp.parameters()) out.push_back(p->value);
    return out;
}

void restore(Composition& comp, const std::vector<Tensor>& values) {
    const auto params = comp.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    char buf[32];
    for (double x : v) {
        std::snprintf(buf, sizeof buf, "%.17g", x);
        out += (out.empty() ? "" : " ") + std::string(buf);
    }
    return out;
}

// Pooled image / text rows for a batch of prognosis cases. Frozen encoder
// outputs are cached, since without LoRA on a path they never change.
class PrognosisFeatures {
public:
    PrognosisFeatures(const FrozenFoundation& model, const Composition& comp, const PreparedData& data)
        : model_(model), comp_(comp), data_(data) {
        const auto& mods = comp.key().modalities;
        use_image_ = mods.contains(Modality::CT);
        use_text_ = mods.contains(Modality::TEXT);
        image_adapted_ = static_cast<bool>(comp.lora_delta("image"));
        text_adapted_ = static_cast<bool>(comp.lora_delta("text"));
    }

    Var head(const Binder& b, const std::vector<std::size_t>& idx) {
        std::optional<Var> img, txt;
        if (use_image_) img = image_rows(b, idx);
        if (use_text_) txt = text_rows(b, idx);
        return prognosis_head(comp_, b, img, txt);
    }

private:
    Var image_rows(const Binder& b, const std::vector<std::size_t>& idx) {
        if (!image_adapted_) {
            return b.tape().constant(stack(idx, [&](std::size_t i) -> const Tensor& {
                auto it = image_cache_.find(i);
                if (it == image_cache_.end()) it = image_cache_.emplace(i, model_.encode_image(data_.ct[i]).pooled).first;
                return it->second;
            }));
        }
        std::vector<Var> rows;
        for (std::size_t i : idx) rows.push_back(prognosis_image(model_, comp_, b, data_.ct[i]).pooled);
        return rows.size() == 1 ? rows[0] : ops::concat_rows(rows);
    }

    Var text_rows(const Binder& b, const std::vector<std::size_t>& idx) {
        if (!text_adapted_) {
            return b.tape().constant(stack(idx, [&](std::size_t i) -> const Tensor& {
                const std::string& r = data_.reports[i];
                auto it = text_cache_.find(r);
                if (it == text_cache_.end()) it = text_cache_.emplace(r, model_.encode_text(r).pooled).first;
                return it->second;
            }));
        }
        std::map<std::string, Var> seen;
        std::vector<Var> rows;
        for (std::size_t i : idx) {
            const std::string& r = data_.reports[i];
            auto it = seen.find(r);
            if (it == seen.end()) it = seen.emplace(r, prognosis_text(model_, comp_, b, r).pooled).first;
            rows.push_back(it->second);
        }
        return rows.size() == 1 ? rows[0] : ops::concat_rows(rows);
    }

    template <class F>
    static Tensor stack(const std::vector<std::size_t>& idx, F row) {
        const std::size_t s = row(idx.front()).numel();
        Tensor out({idx.size(), s});
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const Tensor& t = row(idx[r]);
            std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * s));
        }
        return out;
    }

    const FrozenFoundation& model_;
    const Composition& comp_;
    const PreparedData& data_;
    bool use_image_ = false, use_text_ = false, image_adapted_ = false, text_adapted_ = false;
    std::map<std::size_t, Tensor> image_cache_;
    std::map<std::string, Tensor> text_cache_;
};

std::vector<SurvivalRecord> records_for(const DiscretizationGrid& grid, const PreparedData& data,
                                        const std::vector<std::size_t>& idx) {
    std::vector<SurvivalRecord> out;
    for (std::size_t i : idx) out.push_back(grid.record(data.times[i], data.events[i]));
    return out;
}

std::vector<double> prognosis_risks(PrognosisFeatures& feats, const Composition& comp,
                                    const std::vector<std::size_t>& idx) {
    const SurvivalModel m = prognosis_model(comp);
    std::vector<double> risks;
    constexpr std::size_t kChunk = 32;
    for (std::size_t start = 0; start < idx.size(); start += kChunk) {
        const std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                            idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + kChunk)));
        Tape tape;
        Binder b(tape);
        const Tensor out = feats.head(b, part).value();
        const std::size_t w = out.cols();
        for (std::size_t r = 0; r < part.size(); ++r) {
            const std::span<const double> row(out.data().data() + r * w, w);
            risks.push_back(risk_score(survival_curve(m, row)));
        }
    }
    return risks;
}

double c_index_of(PrognosisFeatures& feats, const Composition& comp, const PreparedData& data,
                  const std::vector<std::size_t>& idx) {
    const auto risks = prognosis_risks(feats, comp, idx);
    std::vector<SurvivalRecord> recs;
    for (std::size_t i : idx) recs.push_back({data.times[i], data.events[i], 0});
    return concordance_index(risks, recs);
}

void check_finite(double v, const std::string& what, std::size_t epoch) {
    if (!std::isfinite(v)) throw DivergenceError(what + " became non-finite at epoch " + std::to_string(epoch));
}

// Keeps the best epoch; strictly better replaces, so ties stay with the earliest.
struct Selection {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t epoch = 0;
    std::vector<Tensor> values;
    bool any = false;

    void offer(const Composition& comp, double metric, std::size_t e) {
        if (!any || metric > best) {
            best = metric;
            epoch = e;
            values = values_of(comp);
            any = true;
        }
    }
};

template <class Epoch>
StepResult train_loop(std::unique_ptr<Composition> comp, const std::string& metric, std::size_t n_val, Epoch&& run_epoch) {
    StepResult result;
    result.metric = metric;
    result.validation_n = n_val;
    Selection sel;
    const auto initial = values_of(*comp);
    try {
        for (std::size_t epoch = 0;; ++epoch) {
            std::optional<EpochRecord> rec = run_epoch(*comp, epoch);
            if (!rec) break;
            check_finite(rec->train_loss, "training loss", epoch);
            check_finite(rec->val_metric, "validation " + metric, epoch);
            result.curve.push_back(*rec);
            sel.offer(*comp, rec->val_metric, epoch);
        }
    } catch (const NumericError& e) {
        restore(*comp, sel.any ? sel.values : initial);
        throw DivergenceError(std::string("training diverged: ") + e.what());
    } catch (const DivergenceError&) {
        restore(*comp, sel.any ? sel.values : initial);
        throw;
    }
    if (!sel.any) throw ContractError("the training budget allows no epoch");
    restore(*comp, sel.values);
    result.best_value = sel.best;
    result.best_epoch = sel.epoch;
    result.composition = std::move(comp);
    return result;
}

}  // namespace

// ---- data ------------------------------------------------------------------

std::vector<std::size_t> PreparedData::fold_indices(std::size_t f, bool validation) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < folds.size(); ++i) {
        if ((folds[i] == f) == validation) out.push_back(i);
    }
    return out;
}

PreparedData prepare_data(const std::vector<SyntheticCase>& cases, const std::vector<std::size_t>& folds) {
    if (cases.size() != folds.size()) throw ContractError("one fold assignment per case is required");
    PreparedData d;
    for (const auto& c : cases) {
        d.ct.push_back(preprocess_ct(c.ct));
        d.pet.push_back(preprocess_pet(c.pet));
        d.mask.push_back(c.mask);
        d.reports.push_back(c.report);
        d.times.push_back(c.time);
        d.events.push_back(c.event);
    }
    d.folds = folds;
    return d;
}

PreparedData shuffle_survival(const PreparedData& data, std::uint64_t seed) {
    std::vector<std::size_t> perm(data.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    PreparedData out = data;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.times[i] = data.times[perm[i]];
        out.events[i] = data.events[perm[i]];
    }
    return out;
}

// ---- steps -----------------------------------------------------------------

std::string AdaptationStep::metric() const { return key.task == Task::Prognosis ? "c_index" : "dice"; }

std::string AdaptationStep::slug() const {
    std::string mods = key.modalities.str();
    std::replace(mods.begin(), mods.end(), '+', '-');
    return "step" + std::to_string(index) + "_" + task_name(key.task) + "_" + mods;
}

std::vector<AdaptationStep> plan_steps(const RunConfig& config) {
    std::vector<AdaptationStep> out;
    if (config.step1.enabled) out.push_back({1, {Task::Prognosis, config.step1.modalities}, config.step1});
    if (config.step2.enabled) out.push_back({2, segmentation_ct_key(), config.step2});
    if (config.step3.enabled) out.push_back({3, segmentation_ctpet_key(), config.step3});
    return out;
}

std::unique_ptr<Composition> build_prognosis(const FrozenFoundation& model, const RoutingKey& key,
                                             const StepSettings& s, Rng& rng) {
    if (key.task != Task::Prognosis) throw ContractError("build_prognosis needs a prognosis route");
    if (key.modalities.empty() || key.modalities.contains(Modality::PET)) {
        throw ConfigError("prognosis takes CT and/or report text, got " + key.modalities.str());
    }
    const SurvivalModel head = parse_survival_model(s.head);
    const std::size_t dim = model.vision_config().proj_dim;
    auto comp = std::make_unique<Composition>(key);
    const bool ct = key.modalities.contains(Modality::CT);
    const bool text = key.modalities.contains(Modality::TEXT);
    if (ct && s.image_lora) attach_lora(model, *comp, "image", qv_targets(model, "vision"), s.lora_rank, s.lora_alpha, rng);
    if (text && s.text_lora) attach_lora(model, *comp, "text", qv_targets(model, "text"), s.lora_rank, s.lora_alpha, rng);
    if (ct) comp->add("image.mlp", MlpAdapter::create(dim, s.hidden, dim, rng));
    if (text) comp->add("text.mlp", MlpAdapter::create(dim, s.hidden, dim, rng));
    ModalitySet zero;
    if (ct && text) zero = {Modality::CT};
    comp->add("fusion", FusionAdapter::create(key.modalities.members(), dim, dim, s.hidden, s.hidden, zero, false, rng));
    comp->add("head", MlpAdapter::create(s.hidden, s.hidden, head_width(head, s.bins), rng));
    comp->set_meta("head", survival_model_name(head));
    comp->set_meta("bins", std::to_string(s.bins));
    return comp;
}

std::unique_ptr<Composition> build_segmentation(const FrozenFoundation& model, const RoutingKey& key,
                                                const StepSettings& s, const Shape& volume_shape, Rng& rng,
                                                const Composition* init_from) {
    if (key.task != Task::Segmentation || !key.modalities.contains(Modality::CT) ||
        key.modalities.contains(Modality::TEXT)) {
        throw ContractError("segmentation routes are ct or ct+pet, got " + key.str());
    }
    const std::size_t p = model.vision_config().patch_size;
    const std::size_t d = model.vision_config().embed_dim;
    auto comp = std::make_unique<Composition>(key);
    comp->add("ct.embed", ResolutionReembed::from_base(model, volume_shape, p, rng));
    attach_lora(model, *comp, "ct", qv_targets(model, "vision"), s.lora_rank, s.lora_alpha, rng);
    if (key.modalities.contains(Modality::PET)) {
        comp->add("pet.embed", ResolutionReembed::from_base(model, volume_shape, p, rng));
        attach_lora(model, *comp, "pet", qv_targets(model, "vision"), s.lora_rank, s.lora_alpha, rng);
        comp->add("fusion", FusionAdapter::create({Modality::CT, Modality::PET}, d, d, s.hidden, d, {Modality::PET}, true, rng));
    }
    comp->add("decoder", DecoderAdapter::create(d, p, rng));
    if (init_from) {
        for (const auto& m : comp->modules()) {
            const bool copied = m->name == "ct.embed" || m->name == "decoder" || m->name.rfind("ct.lora.", 0) == 0;
            if (!copied) continue;
            const AdapterModule* src = init_from->find(m->name);
            if (!src) throw CompositionError("initialization source " + init_from->key().str() + " lacks '" + m->name + "'");
            const auto to = m->parameters();
            const auto from = src->parameters();
            if (to.size() != from.size()) throw CompositionError("module '" + m->name + "' differs from its source");
            for (std::size_t i = 0; i < to.size(); ++i) {
                if (to[i]->value.shape() != from[i]->value.shape()) {
                    throw ShapeError("cannot copy '" + from[i]->name + "' " + shape_str(from[i]->value.shape()) + " into " +
                                     shape_str(to[i]->value.shape()));
                }
                to[i]->value = from[i]->value;
            }
        }
        comp->set_meta("initialized_from", init_from->key().str());
    }
    return comp;
}

double evaluate_prognosis(const FrozenFoundation& model, const Composition& comp, const PreparedData& data,
                          const std::vector<std::size_t>& idx) {
    PrognosisFeatures feats(model, comp, data);
    return c_index_of(feats, comp, data, idx);
}

double evaluate_segmentation(const FrozenFoundation& model, const Composition& comp, const PreparedData& data,
                             const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ContractError("segmentation evaluation needs at least one case");
    double total = 0.0;
    for (std::size_t i : idx) {
        TaskInput in{&data.ct[i], &data.pet[i], nullptr};
        total += dice_score(binarize_logits(run_composition(model, comp, in)), data.mask[i]);
    }
    return total / static_cast<double>(idx.size());
}

StepResult train_prognosis(const FrozenFoundation& model, std::unique_ptr<Composition> comp, const StepSettings& s,
                           const PreparedData& data, const std::vector<std::size_t>& train,
                           const std::vector<std::size_t>& validation, std::uint64_t seed) {
    if (train.empty() || validation.empty()) throw ContractError("prognosis needs training and validation cases");
    std::vector<double> train_times;
    for (std::size_t i : train) train_times.push_back(data.times[i]);
    const std::size_t bins = std::stoull(comp->meta("bins"));
    const DiscretizationGrid grid = DiscretizationGrid::from_quantiles(train_times, bins);
    comp->set_meta("grid", join_doubles(grid.lower_edges()));
    const SurvivalModel kind = prognosis_model(*comp);

    PrognosisFeatures feats(model, *comp, data);
    AdamW opt(comp->parameters(), {s.learning_rate, 0.9, 0.999, 1e-8, s.weight_decay});
    Rng rng(seed);
    std::vector<std::size_t> order = train;
    std::size_t steps = 0;
    return train_loop(std::move(comp), "c_index", validation.size(), [&](Composition& c, std::size_t epoch) -> std::optional<EpochRecord> {
        if (epoch >= s.epochs) return std::nullopt;
        std::shuffle(order.begin(), order.end(), rng.engine());
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += s.batch_size) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + s.batch_size)));
            const auto recs = records_for(grid, data, idx);
            Tape tape;
            Binder b(tape, false, true);
            Var out = feats.head(b, idx);
            Var loss = kind == SurvivalModel::DeepHit ? deephit_loss(out, recs, s.sigma, s.lambda_rank).total
                                                      : mtlr_loss(out, recs);
            tape.backward(loss);
            opt.step(tape.param_grads());
            loss_sum += loss.value()[0];
            ++batches;
            ++steps;
        }
        return EpochRecord{epoch, steps, loss_sum / static_cast<double>(batches), c_index_of(feats, c, data, validation)};
    });
}

StepResult train_segmentation(const FrozenFoundation& model, std::unique_ptr<Composition> comp, const StepSettings& s,
                              const PreparedData& data, const std::vector<std::size_t>& train,
                              const std::vector<std::size_t>& validation, std::uint64_t seed) {
    if (train.empty() || validation.empty()) throw ContractError("segmentation needs training and validation cases");
    const bool pet = comp->key().modalities.contains(Modality::PET);
    AdamW opt(comp->parameters(), {s.learning_rate, 0.9, 0.999, 1e-8, s.weight_decay});
    Rng rng(seed);
    std::vector<std::size_t> order = train;
    std::size_t steps = 0;
    return train_loop(std::move(comp), "dice", validation.size(), [&](Composition& c, std::size_t epoch) -> std::optional<EpochRecord> {
        if (steps >= s.max_steps) return std::nullopt;
        std::shuffle(order.begin(), order.end(), rng.engine());
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size() && steps < s.max_steps; start += s.batch_size) {
            const std::size_t end = std::min(order.size(), start + s.batch_size);
            Tape tape;
            Binder b(tape, false, true);
            std::optional<Var> loss;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                Var l = dice_ce_loss(segmentation_logits(model, c, b, data.ct[i], pet ? &data.pet[i] : nullptr),
                                     data.mask[i], 1.0, 1.0);
                loss = loss ? ops::add(*loss, l) : l;
            }
            if (end - start > 1) loss = ops::scale(*loss, 1.0 / static_cast<double>(end - start));
            tape.backward(*loss);
            opt.step(tape.param_grads());
            loss_sum += loss->value()[0];
            ++batches;
            ++steps;
        }
        return EpochRecord{epoch, steps, loss_sum / static_cast<double>(batches), evaluate_segmentation(model, c, data, validation)};
    });
}

StepResult run_step(const FrozenFoundation& model, const AdapterRegistry& registry, const AdaptationStep& step,
                    const PreparedData& data, std::size_t validation_fold, std::uint64_t seed) {
    if (!model.frozen()) throw ContractError("adaptation needs a frozen base");
    if (!registry.contains(classification_key())) {
        throw ContractError("the classification route must be registered before adaptation");
    }
    if (registry.contains(step.key)) throw ConflictError("route " + step.key.str() + " is already adapted");
    const auto train = data.fold_indices(validation_fold, false);
    const auto val = data.fold_indices(validation_fold, true);
    Rng rng(seed, kStepStream + step.index);
    const std::uint64_t loop_seed = mix_seed(seed, kStepStream + 8 + step.index);
    StepResult r;
    if (step.key.task == Task::Prognosis) {
        r = train_prognosis(model, build_prognosis(model, step.key, step.settings, rng), step.settings, data, train, val, loop_seed);
    } else if (step.key.task == Task::Segmentation) {
        const Composition* init = nullptr;
        if (step.key.modalities.contains(Modality::PET) && step.settings.init_from_step2) {
            init = &registry.route(segmentation_ct_key());
        }
        auto comp = build_segmentation(model, step.key, step.settings, data.ct.front().shape(), rng, init);
        r = train_segmentation(model, std::move(comp), step.settings, data, train, val, loop_seed);
    } else {
        throw ContractError("classification is served by the frozen base and has no adaptation step");
    }
    r.composition->set_meta("step", std::to_string(step.index));
    return r;
}

std::vector<double> cross_validate_prognosis(const FrozenFoundation& model, const RoutingKey& key,
                                             const StepSettings& s, const PreparedData& data, std::uint64_t seed) {
    const std::size_t k = *std::max_element(data.folds.begin(), data.folds.end()) + 1;
    std::vector<double> out;
    for (std::size_t f = 0; f < k; ++f) {
        Rng rng(seed, kCrossValStream + f);
        auto comp = build_prognosis(model, key, s, rng);
        out.push_back(train_prognosis(model, std::move(comp), s, data, data.fold_indices(f, false),
                                      data.fold_indices(f, true), mix_seed(seed, kCrossValStream + 32 + f))
                          .best_value);
    }
    return out;
}

// ---- sequence ----------------------------------------------------------------

FrozenFoundation obtain_base(const BaseSettings& settings, std::uint64_t seed) {
    if (!settings.checkpoint.empty()) {
        FrozenFoundation m = FrozenFoundation::load(settings.checkpoint);
        if (!m.frozen()) throw ContractError("base checkpoint " + settings.checkpoint + " is not frozen");
        return m;
    }
    FrozenFoundation m(settings.vision, settings.text, mix_seed(seed, kBaseInitStream));
    const Shape shape(settings.vision.volume_shape.begin(), settings.vision.volume_shape.end());
    const auto corpus = pretrain_corpus(mix_seed(seed, kPretrainStream), settings.pretrain_cases, chest_params(shape));
    const std::size_t n_train = corpus.size() * 4 / 5;
    PretrainOptions opt = settings.pretrain;
    opt.seed = mix_seed(seed, kPretrainStream + 100);
    pretrain_base(m, std::span(corpus).first(n_train), std::span(corpus).subspan(n_train), chest_class_prompts(), opt);
    return m;
}

PreparedData obtain_data(const DataSettings& settings, std::uint64_t seed) {
    if (!settings.dir.empty()) {
        const Dataset ds = read_dataset(settings.dir);
        return prepare_data(ds.cases, ds.folds);
    }
    const auto cases = generate_cases(mix_seed(seed, kDataStream), settings.cases, settings.params);
    std::vector<bool> events;
    for (const auto& c : cases) events.push_back(c.event);
    return prepare_data(cases, split_folds(events, settings.folds, mix_seed(seed, kFoldStream)));
}

AdapterRegistry initial_registry() {
    AdapterRegistry r;
    r.register_composition(make_classification_composition(chest_class_prompts()));
    return r;
}

ProbeSet make_probes(const RoutingKey& key, const DataSettings& settings, std::uint64_t seed) {
    ProbeSet ps;
    ps.key = key;
    if (key.task == Task::Classification) {
        for (auto& s : pretrain_corpus(mix_seed(seed, kChestProbeStream), settings.probes, chest_params(settings.params.shape))) {
            ps.ct.push_back(std::move(s.volume));
        }
        return ps;
    }
    for (const auto& c : generate_cases(mix_seed(seed, kProbeStream), settings.probes, settings.params)) {
        if (key.modalities.contains(Modality::CT)) ps.ct.push_back(preprocess_ct(c.ct));
        if (key.modalities.contains(Modality::PET)) ps.pet.push_back(preprocess_pet(c.pet));
        if (key.modalities.contains(Modality::TEXT)) ps.reports.push_back(c.report);
    }
    return ps;
}

namespace {

std::string route_label(const RoutingKey& key) {
    if (key == classification_key()) return "Cls";
    if (key.task == Task::Prognosis) return "Prog";
    if (key == segmentation_ct_key()) return "Seg(C)";
    if (key == segmentation_ctpet_key()) return "Seg(CP)";
    return key.str();
}

bool valid_output(const FrozenFoundation& model, const Composition& comp, const ProbeSet& probes) {
    if (probes.size() == 0) return false;
    try {
        const Tensor out = run_composition(model, comp, probes.input(0));
        for (double v : out.data()) {
            if (!std::isfinite(v)) return false;
        }
        switch (comp.key().task) {
            case Task::Classification:
                return out.shape() == Shape{1, class_prompts(comp).size()};
            case Task::Prognosis: {
                const std::size_t bins = std::stoull(comp.meta("bins"));
                return out.shape() == Shape{1, head_width(prognosis_model(comp), bins)};
            }
            case Task::Segmentation:
                return out.shape() == probes.ct.front().shape();
        }
    } catch (const Error&) {
        return false;
    }
    return false;
}

const ProbeSet* find_probes(const std::vector<ProbeSet>& probes, const RoutingKey& key) {
    for (const auto& p : probes) {
        if (p.key == key) return &p;
    }
    return nullptr;
}

void write_curve(const fs::path& path, const std::string& metric, const std::vector<EpochRecord>& curve) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "epoch,steps,train_loss,val_" << metric << "\n";
    char buf[128];
    for (const auto& r : curve) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g\n", r.epoch, r.steps, r.train_loss, r.val_metric);
        out << buf;
    }
}

void persist(const fs::path& dir, const FrozenFoundation& model, const std::string& slug, const Composition& comp,
             const ProbeSet& probes, const Snapshot& snap) {
    fs::create_directories(run_paths::checkpoint(dir, slug).parent_path());
    fs::create_directories(run_paths::snapshot(dir, slug).parent_path());
    save_composition(run_paths::checkpoint(dir, slug), comp, model.base_hash());
    save_snapshot(run_paths::snapshot(dir, slug), probes, snap);
}

void emit(const RunConfig& config, SequenceResult& run, std::vector<EvalReport> reports) {
    append_reports(run_paths::report(config.output.dir), reports);
    run.reports.insert(run.reports.end(), reports.begin(), reports.end());
}

}  // namespace

std::vector<CapabilityRow> capability_matrix(const FrozenFoundation& model, const AdapterRegistry& before,
                                             const AdapterRegistry& after, const std::vector<ProbeSet>& probes) {
    std::vector<CapabilityRow> rows;
    for (const auto& key : capability_keys()) {
        CapabilityRow r{key, route_label(key), before.contains(key), after.contains(key), false};
        const ProbeSet* ps = find_probes(probes, key);
        if (r.after && ps) r.valid_output = valid_output(model, after.route(key), *ps);
        rows.push_back(r);
    }
    return rows;
}

namespace run_paths {
fs::path base(const fs::path& dir) { return dir / "base.bin"; }
fs::path report(const fs::path& dir) { return dir / "report.jsonl"; }
fs::path capability(const fs::path& dir) { return dir / "capability.json"; }
fs::path checkpoint(const fs::path& dir, const std::string& slug) { return dir / "checkpoints" / (slug + ".bin"); }
fs::path snapshot(const fs::path& dir, const std::string& slug) { return dir / "snapshots" / (slug + ".bin"); }
fs::path curve(const fs::path& dir, const std::string& slug) { return dir / "curves" / (slug + ".csv"); }
}  // namespace run_paths

void write_capability(const fs::path& path, const std::vector<CapabilityRow>& rows) {
    nlohmann::ordered_json j;
    j["routes"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        nlohmann::ordered_json e;
        e["route"] = r.key.str();
        e["label"] = r.label;
        e["before"] = r.before;
        e["after"] = r.after;
        e["valid_output"] = r.valid_output;
        j["routes"].push_back(e);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

SequenceResult bootstrap_run(const RunConfig& config, FrozenFoundation model) {
    if (!model.frozen()) throw ContractError("a run starts from a frozen base");
    const Shape vs = vision_shape(model);
    if (config.data.params.shape != vs) {
        throw ConfigError("data shape " + shape_str(config.data.params.shape) + " does not match the base resolution " +
                          shape_str(vs));
    }
    const fs::path dir = config.output.dir;
    fs::create_directories(dir);
    fs::remove(run_paths::report(dir));
    fs::remove(run_paths::capability(dir));
    for (const char* sub : {"checkpoints", "snapshots", "curves"}) fs::remove_all(dir / sub);

    SequenceResult run;
    run.model = std::make_unique<FrozenFoundation>(std::move(model));
    run.model->save(run_paths::base(dir));
    run.registry = initial_registry();

    const auto eval = pretrain_corpus(mix_seed(config.seed, kClsEvalStream), kClsEvalCases, chest_params(vs));
    const double acc = classification_accuracy(*run.model, eval, chest_class_prompts());

    ProbeSet probes = make_probes(classification_key(), config.data, config.seed);
    Snapshot snap = capture_snapshot(*run.model, run.registry, probes, 0);
    persist(dir, *run.model, "step0_classification_ct", run.registry.route(classification_key()), probes, snap);
    run.probes.push_back(std::move(probes));
    run.snapshots.push_back(std::move(snap));
    emit(config, run, {{0, classification_key().str(), "accuracy", acc, eval.size(), std::nullopt}});
    return run;
}

void execute_step(const RunConfig& config, SequenceResult& run, const PreparedData& data, const AdaptationStep& step,
                  const Logger& log) {
    const fs::path dir = config.output.dir;
    const FrozenFoundation& model = *run.model;
    const std::size_t vf = config.data.validation_fold;
    if (log) log("step " + std::to_string(step.index) + ": adapting " + step.key.str());
    StepResult r = run_step(model, run.registry, step, data, vf, config.seed);
    if (log) {
        log("step " + std::to_string(step.index) + ": best validation " + r.metric + " " + std::to_string(r.best_value) +
            " at epoch " + std::to_string(r.best_epoch));
    }
    const std::size_t n_train = data.size() - r.validation_n;
    std::vector<EvalReport> reports{
        {step.index, step.key.str(), "val_" + r.metric, r.best_value, r.validation_n, vf},
        {step.index, step.key.str(), "train_loss_first_epoch", r.curve.front().train_loss, n_train, vf},
        {step.index, step.key.str(), "train_loss_best_epoch", r.curve[r.best_epoch].train_loss, n_train, vf},
    };
    run.registry.register_composition(std::move(r.composition));
    const Composition& comp = run.registry.route(step.key);

    ProbeSet probes = make_probes(step.key, config.data, config.seed);
    Snapshot snap = capture_snapshot(model, run.registry, probes, step.index);
    persist(dir, model, step.slug(), comp, probes, snap);
    if (config.output.curves) write_curve(run_paths::curve(dir, step.slug()), r.metric, r.curve);

    const AuditReport audit = forgetting_audit(model, run.registry, run.probes, run.snapshots, step.index);
    for (const auto& e : audit.entries) {
        reports.push_back({step.index, e.key.str(), "forgetting_max_abs_deviation", e.max_deviation,
                           find_probes(run.probes, e.key)->size(), std::nullopt});
    }
    run.probes.push_back(std::move(probes));
    run.snapshots.push_back(std::move(snap));
    run.audits.push_back(audit);
    emit(config, run, std::move(reports));
    if (!audit.pass()) throw AuditFailure("forgetting audit failed after step " + std::to_string(step.index));
    if (log) log("step " + std::to_string(step.index) + ": audit of " + std::to_string(audit.entries.size()) + " earlier routes passed");
}

SequenceResult run_sequence(const RunConfig& config, const Logger& log) {
    config.validate();
    if (log) log(config.base.checkpoint.empty() ? "pretraining the base model" : "loading base " + config.base.checkpoint);
    SequenceResult run = bootstrap_run(config, obtain_base(config.base, config.seed));
    const AdapterRegistry before = initial_registry();
    const PreparedData data = obtain_data(config.data, config.seed);
    for (const auto& step : plan_steps(config)) execute_step(config, run, data, step, log);
    run.capabilities = capability_matrix(*run.model, before, run.registry, run.probes);
    write_capability(run_paths::capability(config.output.dir), run.capabilities);
    return run;
}

std::vector<EvalReport> evaluate_run(const RunConfig& config, const SequenceResult& run, const PreparedData& data) {
    std::vector<EvalReport> out;
    const std::size_t vf = config.data.validation_fold;
    const auto val = data.fold_indices(vf, true);
    for (const auto& key : run.registry.keys()) {
        const Composition& comp = run.registry.route(key);
        const std::size_t step = comp.find_meta("step") ? std::stoull(comp.meta("step")) : 0;
        switch (key.task) {
            case Task::Classification: {
                const auto eval = pretrain_corpus(mix_seed(config.seed, kClsEvalStream), kClsEvalCases,
                                                  chest_params(vision_shape(*run.model)));
                out.push_back({step, key.str(), "accuracy",
                               classification_accuracy(*run.model, eval, class_prompts(comp)), eval.size(), std::nullopt});
                break;
            }
            case Task::Prognosis:
                out.push_back({step, key.str(), "val_c_index", evaluate_prognosis(*run.model, comp, data, val), val.size(), vf});
                break;
            case Task::Segmentation:
                out.push_back({step, key.str(), "val_dice", evaluate_segmentation(*run.model, comp, data, val), val.size(), vf});
                break;
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const EvalReport& a, const EvalReport& b) { return a.step < b.step; });
    return out;
}

SequenceResult load_run(const fs::path& dir) {
    SequenceResult run;
    run.model = std::make_unique<FrozenFoundation>(FrozenFoundation::load(run_paths::base(dir)));
    if (!run.model->frozen()) throw ContractError(run_paths::base(dir).string() + " is not a frozen base");
    std::vector<fs::path> files;
    if (fs::is_directory(dir / "checkpoints")) {
        for (const auto& e : fs::directory_iterator(dir / "checkpoints")) {
            if (e.path().extension() == ".bin") files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        const std::string slug = f.stem().string();
        run.registry.register_composition(load_composition(f, run.model->base_hash()));
        auto [probes, snap] = load_snapshot(run_paths::snapshot(dir, slug));
        run.probes.push_back(std::move(probes));
        run.snapshots.push_back(std::move(snap));
    }
    return run;
}

}  // namespace unicon
