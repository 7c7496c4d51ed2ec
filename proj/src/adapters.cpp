#include "unicon/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "unicon/volume.hpp"

namespace unicon {

namespace {

constexpr double kLoraInitStd = 0.02;

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    return out;
}

bool valid_module_name(const std::string& n) {
    if (n.empty()) return false;
    return std::none_of(n.begin(), n.end(), [](char c) { return c == '/' || std::isspace(static_cast<unsigned char>(c)); });
}

Parameter named(std::string name, Tensor t) { return {std::move(name), std::move(t)}; }

}  // namespace

std::string task_name(Task t) {
    switch (t) {
        case Task::Classification: return "classification";
        case Task::Prognosis: return "prognosis";
        case Task::Segmentation: return "segmentation";
    }
    return "?";
}

Task parse_task(const std::string& s) {
    if (s == "classification") return Task::Classification;
    if (s == "prognosis") return Task::Prognosis;
    if (s == "segmentation") return Task::Segmentation;
    throw ConfigError("unknown task '" + s + "'");
}

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::CT: return "ct";
        case Modality::PET: return "pet";
        case Modality::TEXT: return "text";
    }
    return "?";
}

Modality parse_modality(const std::string& s) {
    if (s == "ct") return Modality::CT;
    if (s == "pet") return Modality::PET;
    if (s == "text") return Modality::TEXT;
    throw ConfigError("unknown modality '" + s + "'");
}

ModalitySet::ModalitySet(std::initializer_list<Modality> mods) {
    for (auto m : mods) bits_ |= static_cast<unsigned>(m);
}

std::vector<Modality> ModalitySet::members() const {
    std::vector<Modality> out;
    for (auto m : {Modality::CT, Modality::PET, Modality::TEXT}) {
        if (contains(m)) out.push_back(m);
    }
    return out;
}

std::string ModalitySet::str() const {
    std::string s;
    for (auto m : members()) s += (s.empty() ? "" : "+") + modality_name(m);
    return s.empty() ? "none" : s;
}

ModalitySet ModalitySet::parse(const std::string& s) {
    ModalitySet out;
    for (const auto& part : split(s, '+')) out.bits_ |= static_cast<unsigned>(parse_modality(part));
    if (out.empty()) throw ConfigError("empty modality set '" + s + "'");
    return out;
}

std::string RoutingKey::str() const { return task_name(task) + "/" + modalities.str(); }

RoutingKey RoutingKey::parse(const std::string& s) {
    const auto slash = s.find('/');
    if (slash == std::string::npos) throw ConfigError("routing key '" + s + "' must look like <task>/<modalities>");
    return {parse_task(s.substr(0, slash)), ModalitySet::parse(s.substr(slash + 1))};
}

LoraModule LoraModule::create(std::string target, std::size_t d, std::size_t h, std::size_t rank, double alpha, Rng& rng) {
    if (rank == 0 || 2 * rank > std::min(d, h)) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " for '" + target + "' must be in [1, " +
                          std::to_string(std::min(d, h) / 2) + "] (r <= min(d, h) / 2)");
    }
    if (!std::isfinite(alpha)) throw ConfigError("LoRA alpha must be finite");
    LoraModule m;
    m.target = std::move(target);
    m.rank = rank;
    m.alpha = alpha;
    m.phi1 = named("phi1", rng.normal_tensor({d, rank}, kLoraInitStd));
    m.phi2 = named("phi2", Tensor({rank, h}, 0.0));
    return m;
}

Var LoraModule::delta(const Binder& b, Var x) const {
    return ops::scale(ops::matmul(ops::matmul(x, b.adapter(phi1)), b.adapter(phi2)), scaling());
}

Var lora_forward(const Binder& b, Var x, Var w, const LoraModule& lora) {
    const Tensor& W = w.value();
    if (W.rank() != 2 || W.rows() != lora.phi1.value.rows() || W.cols() != lora.phi2.value.cols()) {
        throw CompositionError("LoRA factors " + shape_str(lora.phi1.value.shape()) + " x " +
                               shape_str(lora.phi2.value.shape()) + " do not fit weight " + shape_str(W.shape()));
    }
    return ops::add(ops::matmul(x, w), lora.delta(b, x));
}

MlpAdapter MlpAdapter::create(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, bool zero_output) {
    if (in == 0 || hidden == 0 || out == 0) throw ConfigError("MLP adapter dimensions must be positive");
    MlpAdapter m;
    m.fc1_w = named("fc1.weight", rng.normal_tensor({in, hidden}, 1.0 / std::sqrt(double(in))));
    m.fc1_b = named("fc1.bias", Tensor({hidden}, 0.0));
    m.fc2_w = named("fc2.weight", zero_output ? Tensor({hidden, out}, 0.0)
                                              : rng.normal_tensor({hidden, out}, 1.0 / std::sqrt(double(hidden))));
    m.fc2_b = named("fc2.bias", Tensor({out}, 0.0));
    return m;
}

Var MlpAdapter::forward(const Binder& b, Var x) const {
    if (x.value().cols() != in_dim()) {
        throw CompositionError("MLP adapter expects " + std::to_string(in_dim()) + " input features, got " +
                               shape_str(x.shape()));
    }
    Var h = ops::gelu(ops::add_row(ops::matmul(x, b.adapter(fc1_w)), b.adapter(fc1_b)));
    return ops::add_row(ops::matmul(h, b.adapter(fc2_w)), b.adapter(fc2_b));
}

FusionAdapter FusionAdapter::create(std::vector<Modality> modalities, std::size_t in_dim, std::size_t proj_dim,
                                    std::size_t hidden, std::size_t out_dim, const ModalitySet& zero_init, bool residual,
                                    Rng& rng) {
    if (modalities.empty()) throw ConfigError("fusion needs at least one modality");
    if (residual && out_dim != in_dim) throw ConfigError("residual fusion needs out_dim == in_dim");
    FusionAdapter f;
    f.modalities = std::move(modalities);
    f.residual = residual;
    for (auto m : f.modalities) {
        Tensor w = zero_init.contains(m) ? Tensor({in_dim, proj_dim}, 0.0)
                                         : rng.normal_tensor({in_dim, proj_dim}, 1.0 / std::sqrt(double(in_dim)));
        f.projections.push_back(named("proj." + modality_name(m), std::move(w)));
    }
    f.mlp = MlpAdapter::create(proj_dim * f.modalities.size(), hidden, out_dim, rng, residual);
    f.mlp.fc1_w.name = "mlp." + f.mlp.fc1_w.name;
    f.mlp.fc1_b.name = "mlp." + f.mlp.fc1_b.name;
    f.mlp.fc2_w.name = "mlp." + f.mlp.fc2_w.name;
    f.mlp.fc2_b.name = "mlp." + f.mlp.fc2_b.name;
    return f;
}

Var FusionAdapter::forward(const Binder& b, const std::map<Modality, Var>& features) const {
    std::optional<std::size_t> rows;
    for (const auto& [m, v] : features) {
        if (std::find(modalities.begin(), modalities.end(), m) == modalities.end()) {
            throw CompositionError("fusion adapter has no projection for modality '" + modality_name(m) + "'");
        }
        if (v.value().rank() != 2 || v.value().cols() != in_dim()) {
            throw ShapeError("fusion input for '" + modality_name(m) + "' must be [n x " + std::to_string(in_dim()) +
                             "], got " + shape_str(v.shape()));
        }
        if (rows && *rows != v.value().rows()) throw ShapeError("fusion inputs disagree on row count");
        rows = v.value().rows();
    }
    if (!rows) throw ContractError("fusion needs at least one modality present");
    Tape& tape = b.tape();
    std::vector<Var> parts;
    for (std::size_t i = 0; i < modalities.size(); ++i) {
        auto it = features.find(modalities[i]);
        if (it == features.end()) {
            parts.push_back(tape.constant(Tensor({*rows, projections[i].value.cols()}, 0.0)));
        } else {
            parts.push_back(ops::matmul(it->second, b.adapter(projections[i])));
        }
    }
    Var out = mlp.forward(b, parts.size() == 1 ? parts[0] : ops::concat_cols(parts));
    if (residual) {
        auto it = features.find(modalities.front());
        if (it == features.end()) {
            throw ContractError("residual fusion needs its primary modality '" + modality_name(modalities.front()) + "'");
        }
        out = ops::add(it->second, out);
    }
    return out;
}

DecoderAdapter DecoderAdapter::create(std::size_t d, std::size_t patch_size, Rng& rng) {
    if (patch_size == 0) throw ConfigError("decoder patch size must be positive");
    const std::size_t p3 = patch_size * patch_size * patch_size;
    DecoderAdapter dec;
    dec.patch_size = patch_size;
    dec.weight = named("weight", rng.normal_tensor({d, p3}, 0.1 / std::sqrt(double(d))));
    dec.bias = named("bias", Tensor({p3}, 0.0));
    return dec;
}

Var DecoderAdapter::decode(const Binder& b, Var tokens, const Shape& volume_shape) const {
    const auto index = unpatchify_index(volume_shape, patch_size);
    const std::size_t p3 = patch_size * patch_size * patch_size;
    const std::size_t n = index.size() / p3;
    if (tokens.value().rank() != 2 || tokens.value().rows() != n || tokens.value().cols() != weight.value.rows()) {
        throw ShapeError("decoder expects [" + std::to_string(n) + " x " + std::to_string(weight.value.rows()) +
                         "] tokens for volume " + shape_str(volume_shape) + ", got " + shape_str(tokens.shape()));
    }
    Var patches = ops::add_row(ops::matmul(tokens, b.adapter(weight)), b.adapter(bias));
    return ops::gather(patches, index, volume_shape);
}

ResolutionReembed ResolutionReembed::from_base(const FrozenFoundation& model, const Shape& volume_shape,
                                               std::size_t patch_size, Rng& rng) {
    if (volume_shape.size() != 3 || patch_size == 0) throw ResolutionError("re-embedding needs a 3-D shape and a patch size");
    for (auto d : volume_shape) {
        if (d == 0 || d % patch_size != 0) {
            throw ResolutionError("volume " + shape_str(volume_shape) + " is not divisible by patch size " +
                                  std::to_string(patch_size));
        }
    }
    const auto& vc = model.vision_config();
    const std::size_t p = vc.patch_size;
    const Shape base_grid{vc.volume_shape[0] / p, vc.volume_shape[1] / p, vc.volume_shape[2] / p};
    const Shape grid{volume_shape[0] / patch_size, volume_shape[1] / patch_size, volume_shape[2] / patch_size};
    const std::size_t p3 = patch_size * patch_size * patch_size;

    ResolutionReembed r;
    r.volume_shape = volume_shape;
    r.patch_size = patch_size;
    r.weight = named("weight", patch_size == p ? model.parameter("vision.patch_embed.weight").value
                                               : rng.normal_tensor({p3, vc.embed_dim}, 1.0 / std::sqrt(double(p3))));
    r.bias = named("bias", model.parameter("vision.patch_embed.bias").value);
    r.pos_embed = named("pos_embed", resample_grid_table(model.parameter("vision.pos_embed").value, base_grid, grid));
    return r;
}

Var ResolutionReembed::embed(const Binder& b, const Tensor& volume) const {
    if (volume.shape() != volume_shape) {
        throw ResolutionError("re-embedding built for " + shape_str(volume_shape) + " received volume " +
                              shape_str(volume.shape()));
    }
    Var patches = b.tape().constant(patchify_volume(volume, patch_size));
    Var tokens = ops::add_row(ops::matmul(patches, b.adapter(weight)), b.adapter(bias));
    return ops::add(tokens, b.adapter(pos_embed));
}

std::string AdapterModule::kind() const {
    return std::visit(
        [](const auto& m) -> std::string {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, LoraModule>) return "lora";
            if constexpr (std::is_same_v<T, MlpAdapter>) return "mlp";
            if constexpr (std::is_same_v<T, FusionAdapter>) return "fusion";
            if constexpr (std::is_same_v<T, DecoderAdapter>) return "decoder";
            if constexpr (std::is_same_v<T, ResolutionReembed>) return "reembed";
        },
        body);
}

std::vector<Parameter*> AdapterModule::parameters() {
    return std::visit(
        [](auto& m) -> std::vector<Parameter*> {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, LoraModule>) return {&m.phi1, &m.phi2};
            if constexpr (std::is_same_v<T, MlpAdapter>) return {&m.fc1_w, &m.fc1_b, &m.fc2_w, &m.fc2_b};
            if constexpr (std::is_same_v<T, FusionAdapter>) {
                std::vector<Parameter*> out;
                for (auto& p : m.projections) out.push_back(&p);
                for (auto* p : {&m.mlp.fc1_w, &m.mlp.fc1_b, &m.mlp.fc2_w, &m.mlp.fc2_b}) out.push_back(p);
                return out;
            }
            if constexpr (std::is_same_v<T, DecoderAdapter>) return {&m.weight, &m.bias};
            if constexpr (std::is_same_v<T, ResolutionReembed>) return {&m.weight, &m.bias, &m.pos_embed};
        },
        body);
}

std::vector<const Parameter*> AdapterModule::parameters() const {
    auto ps = const_cast<AdapterModule*>(this)->parameters();
    return {ps.begin(), ps.end()};
}

Composition::Composition(RoutingKey key) : key_(key) {}

std::string Composition::prefix() const { return task_name(key_.task) + "/" + key_.modalities.str() + "/"; }

AdapterModule& Composition::add(const std::string& name, ModuleBody body) {
    if (!valid_module_name(name)) throw CompositionError("invalid module name '" + name + "'");
    if (find(name)) throw CompositionError("composition " + key_.str() + " already has a module '" + name + "'");
    auto m = std::make_unique<AdapterModule>(AdapterModule{name, std::move(body)});
    for (Parameter* p : m->parameters()) {
        const auto slash = p->name.rfind('/');
        const std::string local = slash == std::string::npos ? p->name : p->name.substr(slash + 1);
        p->name = prefix() + name + "/" + local;
    }
    modules_.push_back(std::move(m));
    return *modules_.back();
}

const AdapterModule* Composition::find(const std::string& name) const {
    for (const auto& m : modules_) {
        if (m->name == name) return m.get();
    }
    return nullptr;
}

std::vector<Parameter*> Composition::parameters() {
    std::vector<Parameter*> out;
    for (auto& m : modules_) {
        for (Parameter* p : m->parameters()) out.push_back(p);
    }
    return out;
}

std::vector<const Parameter*> Composition::parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& m : modules_) {
        for (const Parameter* p : std::as_const(*m).parameters()) out.push_back(p);
    }
    return out;
}

std::size_t Composition::parameter_count() const {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) n += p->value.numel();
    return n;
}

std::string Composition::digest() const {
    std::vector<NamedArray> arrays;
    for (const Parameter* p : parameters()) arrays.push_back({p->name, p->value});
    return payload_sha256(arrays);
}

LinearDelta Composition::lora_delta(const std::string& path) const {
    auto table = std::make_shared<std::map<std::string, const LoraModule*>>();
    const std::string stem = path + ".lora.";
    for (const auto& m : modules_) {
        if (m->name.rfind(stem, 0) != 0) continue;
        if (const auto* l = std::get_if<LoraModule>(&m->body)) (*table)[l->target] = l;
    }
    if (table->empty()) return {};
    return [table](const Binder& b, const std::string& layer, Var x) -> std::optional<Var> {
        auto it = table->find(layer);
        if (it == table->end()) return std::nullopt;
        return it->second->delta(b, x);
    };
}

std::optional<std::string> Composition::find_meta(const std::string& key) const {
    auto it = meta_.find(key);
    if (it == meta_.end()) return std::nullopt;
    return it->second;
}

std::string Composition::meta(const std::string& key) const {
    auto it = meta_.find(key);
    if (it == meta_.end()) throw LookupError("composition " + key_.str() + " has no setting '" + key + "'");
    return it->second;
}

Container Composition::to_container(const std::string& base_hash) const {
    Container c;
    c.set_meta("kind", "adapter");
    c.set_meta("routing_key", key_.str());
    c.set_meta("base_hash", base_hash);
    for (const auto& [k, v] : meta_) c.set_meta("comp." + k, v);
    char idx[16];
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        const AdapterModule& m = *modules_[i];
        std::string desc = m.kind() + " " + m.name;
        if (const auto* l = std::get_if<LoraModule>(&m.body)) {
            desc += " " + l->target + " " + std::to_string(l->rank) + " " + fmt_double(l->alpha);
        } else if (const auto* f = std::get_if<FusionAdapter>(&m.body)) {
            std::string mods;
            for (auto mod : f->modalities) mods += (mods.empty() ? "" : ",") + modality_name(mod);
            desc += " " + mods + (f->residual ? " residual" : " plain");
        } else if (const auto* d = std::get_if<DecoderAdapter>(&m.body)) {
            desc += " " + std::to_string(d->patch_size);
        } else if (const auto* r = std::get_if<ResolutionReembed>(&m.body)) {
            desc += " " + std::to_string(r->patch_size) + " " + shape_str(r->volume_shape);
        }
        std::snprintf(idx, sizeof idx, "module.%03zu", i);
        c.set_meta(idx, desc);
        for (const Parameter* p : m.parameters()) c.arrays.push_back({"adapter/" + p->name, p->value});
    }
    return c;
}

namespace {

Shape parse_shape_text(const std::string& s) {
    // shape_str renders as "[a x b x c]"
    Shape out;
    std::string digits;
    for (char ch : s) {
        if (std::isdigit(static_cast<unsigned char>(ch))) {
            digits += ch;
        } else if (!digits.empty()) {
            out.push_back(std::stoull(digits));
            digits.clear();
        }
    }
    if (!digits.empty()) out.push_back(std::stoull(digits));
    return out;
}

}  // namespace

std::unique_ptr<Composition> Composition::from_container(const Container& c, const std::string& expected_base_hash) {
    if (c.find_meta("kind") != std::optional<std::string>("adapter")) throw FormatError("container does not hold an adapter composition");
    const std::string recorded = c.meta_value("base_hash");
    if (recorded != expected_base_hash) {
        throw IncompatibilityError("adapters were trained against base " + recorded + " but the loaded base is " +
                                   expected_base_hash);
    }
    auto comp = std::make_unique<Composition>(RoutingKey::parse(c.meta_value("routing_key")));
    for (const auto& [k, v] : c.meta) {
        if (k.rfind("comp.", 0) == 0) comp->set_meta(k.substr(5), v);
    }
    const std::string stem = "adapter/" + comp->prefix();
    auto arr = [&](const std::string& module, const std::string& name) {
        return named(name, c.array(stem + module + "/" + name));
    };
    for (const auto& [k, v] : c.meta) {
        if (k.rfind("module.", 0) != 0) continue;
        std::istringstream in(v);
        std::string kind, name;
        in >> kind >> name;
        if (kind == "lora") {
            LoraModule l;
            in >> l.target >> l.rank;
            std::string alpha;
            in >> alpha;
            l.alpha = std::stod(alpha);
            l.phi1 = arr(name, "phi1");
            l.phi2 = arr(name, "phi2");
            comp->add(name, std::move(l));
        } else if (kind == "mlp") {
            comp->add(name, MlpAdapter{arr(name, "fc1.weight"), arr(name, "fc1.bias"), arr(name, "fc2.weight"),
                                       arr(name, "fc2.bias")});
        } else if (kind == "fusion") {
            std::string mods, mode;
            in >> mods >> mode;
            FusionAdapter f;
            f.residual = mode == "residual";
            for (const auto& m : split(mods, ',')) {
                f.modalities.push_back(parse_modality(m));
                f.projections.push_back(arr(name, "proj." + m));
            }
            f.mlp = MlpAdapter{arr(name, "mlp.fc1.weight"), arr(name, "mlp.fc1.bias"), arr(name, "mlp.fc2.weight"),
                               arr(name, "mlp.fc2.bias")};
            comp->add(name, std::move(f));
        } else if (kind == "decoder") {
            DecoderAdapter d;
            in >> d.patch_size;
            d.weight = arr(name, "weight");
            d.bias = arr(name, "bias");
            comp->add(name, std::move(d));
        } else if (kind == "reembed") {
            ResolutionReembed r;
            in >> r.patch_size;
            std::string rest;
            std::getline(in, rest);
            r.volume_shape = parse_shape_text(rest);
            r.weight = arr(name, "weight");
            r.bias = arr(name, "bias");
            r.pos_embed = arr(name, "pos_embed");
            comp->add(name, std::move(r));
        } else {
            throw FormatError("unknown adapter module kind '" + kind + "'");
        }
        if (in.fail()) throw FormatError("malformed module record '" + v + "'");
    }
    std::size_t expected_arrays = 0;
    for (const auto& m : comp->modules()) expected_arrays += std::as_const(*m).parameters().size();
    if (expected_arrays != c.arrays.size()) throw FormatError("adapter checkpoint has arrays no module claims");
    return comp;
}

std::vector<std::string> qv_targets(const FrozenFoundation& model, const std::string& tower) {
    std::size_t layers = 0;
    if (tower == "vision") {
        layers = model.vision_config().layers;
    } else if (tower == "text") {
        layers = model.text_config().layers;
    } else {
        throw LookupError("unknown encoder tower '" + tower + "' (expected vision or text)");
    }
    std::vector<std::string> out;
    for (std::size_t i = 0; i < layers; ++i) {
        out.push_back(tower + ".block" + std::to_string(i) + ".attn.q");
        out.push_back(tower + ".block" + std::to_string(i) + ".attn.v");
    }
    return out;
}

std::size_t attach_lora(const FrozenFoundation& model, Composition& comp, const std::string& path,
                        const std::vector<std::string>& targets, std::size_t rank, double alpha, Rng& rng) {
    for (const auto& t : targets) {
        if (!model.has_linear(t)) {
            std::string valid;
            for (const auto& l : model.linear_layers()) valid += (valid.empty() ? "" : ", ") + l;
            throw LookupError("unknown LoRA target '" + t + "'; valid targets: " + valid);
        }
    }
    for (const auto& t : targets) {
        const Tensor& w = model.parameter(t + ".weight").value;
        comp.add(path + ".lora." + t, LoraModule::create(t, w.rows(), w.cols(), rank, alpha, rng));
    }
    return targets.size();
}

void AdapterRegistry::register_composition(std::unique_ptr<Composition> comp) {
    if (!comp) throw ContractError("cannot register a null composition");
    const RoutingKey key = comp->key();
    if (entries_.count(key)) throw ConflictError("routing key " + key.str() + " is already registered");
    entries_.emplace(key, std::move(comp));
}

const Composition& AdapterRegistry::route(const RoutingKey& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) {
        std::string known;
        for (const auto& [k, _] : entries_) known += (known.empty() ? "" : ", ") + k.str();
        throw RoutingError("no composition registered for " + key.str() + "; registered keys: [" + known + "]");
    }
    return *it->second;
}

std::vector<RoutingKey> AdapterRegistry::keys() const {
    std::vector<RoutingKey> out;
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
}

void save_composition(const std::filesystem::path& path, const Composition& comp, const std::string& base_hash) {
    write_container(path, comp.to_container(base_hash));
}

std::unique_ptr<Composition> load_composition(const std::filesystem::path& path, const std::string& expected_base_hash) {
    return Composition::from_container(read_container(path), expected_base_hash);
}

}  // namespace unicon
