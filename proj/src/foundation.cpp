#include "unicon/foundation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

#include "unicon/errors.hpp"
#include "unicon/optim.hpp"
#include "unicon/rng.hpp"

namespace unicon {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::size_t kMlpRatio = 4;

std::string block_prefix(const std::string& tower, std::size_t i) { return tower + ".block" + std::to_string(i); }

}  // namespace

std::size_t VisionEncoderConfig::num_patches() const {
    return (volume_shape[0] / patch_size) * (volume_shape[1] / patch_size) * (volume_shape[2] / patch_size);
}

void VisionEncoderConfig::validate() const {
    if (patch_size == 0) throw ConfigError("vision patch_size must be positive");
    for (auto d : volume_shape) {
        if (d == 0 || d % patch_size != 0) {
            throw ConfigError("vision volume dimension " + std::to_string(d) + " is not divisible by patch size " +
                              std::to_string(patch_size));
        }
    }
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
        throw ConfigError("vision embed_dim " + std::to_string(embed_dim) + " must be divisible by heads " +
                          std::to_string(heads));
    }
    if (layers == 0 || proj_dim == 0) throw ConfigError("vision layers and proj_dim must be positive");
}

void TextEncoderConfig::validate() const {
    if (max_tokens == 0) throw ConfigError("text max_tokens must be at least 1");
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
        throw ConfigError("text embed_dim " + std::to_string(embed_dim) + " must be divisible by heads " +
                          std::to_string(heads));
    }
    if (layers == 0 || proj_dim == 0) throw ConfigError("text layers and proj_dim must be positive");
    if (vocab_size < report_vocabulary().size() + 2) throw ConfigError("text vocab_size too small for the report vocabulary");
}

const std::vector<std::string>& report_vocabulary() {
    static const std::vector<std::string> words = {
        "chest",    "ct",          "shows",       "no",       "nodule",   "lung",     "left",     "right",
        "upper",    "lower",       "lobe",        "clear",    "head",     "neck",     "scan",     "primary",
        "tumor",    "in",          "the",         "with",     "uptake",   "pet",      "oropharynx", "larynx",
        "hypopharynx", "nasopharynx", "tongue",   "tonsil",   "tiny",     "small",    "modest",   "medium",
        "sizable",  "large",       "bulky",       "massive",  "faint",    "low",      "moderate", "high",
        "intense",  "lesion",      "present",     "mass",     "measuring", "and",     "patient",  "male",
        "female",   "smoker",      "nonsmoker",   "hpv",      "positive", "negative", "stage",    "early",
        "advanced", "of",          "a",           "report"};
    return words;
}

Tokenizer::Tokenizer() : Tokenizer(report_vocabulary()) {}

Tokenizer::Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!ids_.emplace(words_[i], i + 2).second) throw ConfigError("duplicate vocabulary word '" + words_[i] + "'");
    }
}

std::vector<std::size_t> Tokenizer::encode(const std::string& text, std::size_t max_tokens) const {
    std::vector<std::size_t> ids;
    std::istringstream in(text);
    std::string word;
    while (in >> word && ids.size() < max_tokens) {
        std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
        auto it = ids_.find(word);
        ids.push_back(it == ids_.end() ? kOov : it->second);
    }
    return ids;
}

Tensor patchify_volume(const Tensor& volume, std::size_t p) {
    if (volume.rank() != 3) throw ShapeError("patchify_volume expects a [D x H x W] volume, got " + shape_str(volume.shape()));
    const std::size_t D = volume.dim(0), H = volume.dim(1), W = volume.dim(2);
    if (p == 0 || D % p || H % p || W % p) {
        throw ResolutionError("volume " + shape_str(volume.shape()) + " is not divisible by patch size " +
                              std::to_string(p) + "; use resolution_reembed for this resolution");
    }
    const std::size_t gd = D / p, gh = H / p, gw = W / p, p3 = p * p * p;
    Tensor out({gd * gh * gw, p3});
    for (std::size_t a = 0; a < gd; ++a)
        for (std::size_t b = 0; b < gh; ++b)
            for (std::size_t c = 0; c < gw; ++c) {
                double* dst = out.data().data() + ((a * gh + b) * gw + c) * p3;
                for (std::size_t z = 0; z < p; ++z)
                    for (std::size_t y = 0; y < p; ++y) {
                        const double* src = volume.data().data() + ((a * p + z) * H + (b * p + y)) * W + c * p;
                        std::copy_n(src, p, dst + (z * p + y) * p);
                    }
            }
    return out;
}

std::vector<std::size_t> unpatchify_index(const Shape& shape, std::size_t p) {
    if (shape.size() != 3 || p == 0 || shape[0] % p || shape[1] % p || shape[2] % p) {
        throw ResolutionError("volume " + shape_str(shape) + " is not divisible by patch size " + std::to_string(p));
    }
    const std::size_t H = shape[1], W = shape[2];
    const std::size_t gh = H / p, gw = W / p, p3 = p * p * p;
    std::vector<std::size_t> index(shape_numel(shape));
    for (std::size_t z = 0; z < shape[0]; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t patch = ((z / p) * gh + y / p) * gw + x / p;
                const std::size_t inner = ((z % p) * p + y % p) * p + x % p;
                index[(z * H + y) * W + x] = patch * p3 + inner;
            }
    return index;
}

Tensor unpatchify_volume(const Tensor& patches, const Shape& shape, std::size_t p) {
    const auto index = unpatchify_index(shape, p);
    if (patches.numel() != index.size() || patches.cols() != p * p * p) {
        throw ShapeError("patch matrix " + shape_str(patches.shape()) + " does not tile volume " + shape_str(shape));
    }
    Tensor out(shape);
    for (std::size_t i = 0; i < index.size(); ++i) out[i] = patches[index[i]];
    return out;
}

FrozenFoundation::FrozenFoundation(VisionEncoderConfig vision, TextEncoderConfig text, std::uint64_t seed)
    : vision_(vision), text_(text) {
    vision_.validate();
    text_.validate();
    if (vision_.proj_dim != text_.proj_dim) throw ConfigError("vision and text proj_dim must match");

    Rng rng(seed, 0xF0);
    const std::size_t p3 = vision_.patch_size * vision_.patch_size * vision_.patch_size;
    const std::size_t dv = vision_.embed_dim;
    add_param("vision.patch_embed.weight", rng.normal_tensor({p3, dv}, 1.0 / std::sqrt(double(p3))));
    add_param("vision.patch_embed.bias", Tensor({dv}, 0.0));
    add_param("vision.pos_embed", rng.normal_tensor({vision_.num_patches(), dv}, 0.02));
    for (std::size_t i = 0; i < vision_.layers; ++i) init_block(block_prefix("vision", i), dv, rng);
    add_param("vision.ln_final.gamma", Tensor({dv}, 1.0));
    add_param("vision.ln_final.beta", Tensor({dv}, 0.0));
    add_param("vision.proj", rng.normal_tensor({dv, vision_.proj_dim}, 1.0 / std::sqrt(double(dv))));

    const std::size_t dt = text_.embed_dim;
    add_param("text.token_embed", rng.normal_tensor({text_.vocab_size, dt}, 0.1));
    add_param("text.pos_embed", rng.normal_tensor({text_.max_tokens, dt}, 0.02));
    for (std::size_t i = 0; i < text_.layers; ++i) init_block(block_prefix("text", i), dt, rng);
    add_param("text.ln_final.gamma", Tensor({dt}, 1.0));
    add_param("text.ln_final.beta", Tensor({dt}, 0.0));
    add_param("text.proj", rng.normal_tensor({dt, text_.proj_dim}, 1.0 / std::sqrt(double(dt))));
}

void FrozenFoundation::init_block(const std::string& prefix, std::size_t d, Rng& rng) {
    const std::size_t hidden = kMlpRatio * d;
    add_param(prefix + ".ln1.gamma", Tensor({d}, 1.0));
    add_param(prefix + ".ln1.beta", Tensor({d}, 0.0));
    for (const char* proj : {"q", "k", "v", "o"}) {
        add_param(prefix + ".attn." + proj + ".weight", rng.normal_tensor({d, d}, 1.0 / std::sqrt(double(d))));
        add_param(prefix + ".attn." + proj + ".bias", Tensor({d}, 0.0));
    }
    add_param(prefix + ".ln2.gamma", Tensor({d}, 1.0));
    add_param(prefix + ".ln2.beta", Tensor({d}, 0.0));
    add_param(prefix + ".mlp.fc1.weight", rng.normal_tensor({d, hidden}, 1.0 / std::sqrt(double(d))));
    add_param(prefix + ".mlp.fc1.bias", Tensor({hidden}, 0.0));
    add_param(prefix + ".mlp.fc2.weight", rng.normal_tensor({hidden, d}, 1.0 / std::sqrt(double(hidden))));
    add_param(prefix + ".mlp.fc2.bias", Tensor({d}, 0.0));
}

void FrozenFoundation::add_param(std::string name, Tensor value) {
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(value)});
}

const Parameter& FrozenFoundation::parameter(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("foundation has no weight named '" + name + "'");
    return params_[it->second];
}

std::vector<Parameter*> FrozenFoundation::trainable_parameters() {
    if (frozen_) throw ContractError("foundation weights are frozen");
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

Parameter& FrozenFoundation::mutable_parameter(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("foundation has no weight named '" + name + "'");
    return params_[it->second];
}

std::vector<std::string> FrozenFoundation::linear_layers() const {
    std::vector<std::string> out;
    for (const auto& p : params_) {
        const std::string suffix = ".weight";
        if (p.value.rank() == 2 && p.name.size() > suffix.size() &&
            p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0 &&
            p.name.find(".block") != std::string::npos) {
            out.push_back(p.name.substr(0, p.name.size() - suffix.size()));
        }
    }
    return out;
}

bool FrozenFoundation::has_linear(const std::string& layer) const {
    const auto layers = linear_layers();
    return std::find(layers.begin(), layers.end(), layer) != layers.end();
}

void FrozenFoundation::freeze() {
    base_hash_ = compute_hash();
    frozen_ = true;
}

const std::string& FrozenFoundation::base_hash() const {
    if (!frozen_) throw ContractError("base_hash is only defined for a frozen foundation");
    return base_hash_;
}

std::string FrozenFoundation::compute_hash() const {
    std::vector<NamedArray> arrays;
    arrays.reserve(params_.size());
    for (const auto& p : params_) arrays.push_back({p.name, p.value});
    return payload_sha256(arrays);
}

Var FrozenFoundation::linear(const Binder& b, const std::string& layer, Var x, const LinearDelta& delta) const {
    Var y = ops::matmul(x, b.base(parameter(layer + ".weight")));
    if (delta) {
        if (auto d = delta(b, layer, x)) y = ops::add(y, *d);
    }
    return ops::add_row(y, b.base(parameter(layer + ".bias")));
}

Var FrozenFoundation::block(const Binder& b, const std::string& prefix, std::size_t heads, Var x,
                            const LinearDelta& delta) const {
    Var h = ops::layer_norm(x, b.base(parameter(prefix + ".ln1.gamma")), b.base(parameter(prefix + ".ln1.beta")),
                            kLayerNormEps);
    Var q = linear(b, prefix + ".attn.q", h, delta);
    Var k = linear(b, prefix + ".attn.k", h, delta);
    Var v = linear(b, prefix + ".attn.v", h, delta);
    const std::size_t d = x.value().cols();
    const std::size_t dh = d / heads;
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t i = 0; i < heads; ++i) {
        outs.push_back(ops::attention(ops::slice_cols(q, i * dh, dh), ops::slice_cols(k, i * dh, dh),
                                      ops::slice_cols(v, i * dh, dh)));
    }
    Var attn = heads == 1 ? outs[0] : ops::concat_cols(outs);
    x = ops::add(x, linear(b, prefix + ".attn.o", attn, delta));
    Var h2 = ops::layer_norm(x, b.base(parameter(prefix + ".ln2.gamma")), b.base(parameter(prefix + ".ln2.beta")),
                             kLayerNormEps);
    Var m = linear(b, prefix + ".mlp.fc2", ops::gelu(linear(b, prefix + ".mlp.fc1", h2, delta)), delta);
    return ops::add(x, m);
}

Encoding FrozenFoundation::pool(const Binder& b, const std::string& prefix, Var tokens) const {
    Var t = ops::layer_norm(tokens, b.base(parameter(prefix + ".ln_final.gamma")),
                            b.base(parameter(prefix + ".ln_final.beta")), kLayerNormEps);
    Var pooled = ops::l2_normalize_rows(ops::matmul(ops::mean_rows(t), b.base(parameter(prefix + ".proj"))));
    return {t, pooled};
}

Var FrozenFoundation::embed_volume(const Binder& b, const Tensor& volume) const {
    const Shape expected{vision_.volume_shape[0], vision_.volume_shape[1], vision_.volume_shape[2]};
    if (volume.shape() != expected) {
        throw ResolutionError("volume " + shape_str(volume.shape()) + " does not match the frozen embedding resolution " +
                              shape_str(expected) + "; use resolution_reembed");
    }
    Var patches = b.tape().constant(patchify_volume(volume, vision_.patch_size));
    Var tokens = ops::add_row(ops::matmul(patches, b.base(parameter("vision.patch_embed.weight"))),
                              b.base(parameter("vision.patch_embed.bias")));
    return ops::add(tokens, b.base(parameter("vision.pos_embed")));
}

Var FrozenFoundation::run_vision_blocks(const Binder& b, Var tokens, const LinearDelta& delta) const {
    if (tokens.value().rank() != 2 || tokens.value().cols() != vision_.embed_dim) {
        throw ShapeError("vision blocks expect [n x " + std::to_string(vision_.embed_dim) + "] tokens, got " +
                         shape_str(tokens.shape()));
    }
    for (std::size_t i = 0; i < vision_.layers; ++i) tokens = block(b, block_prefix("vision", i), vision_.heads, tokens, delta);
    return tokens;
}

Encoding FrozenFoundation::encode_image(const Binder& b, const Tensor& volume, const EncoderAdaptation& adapt) const {
    Var tokens = adapt.embed ? adapt.embed(b, volume) : embed_volume(b, volume);
    return pool(b, "vision", run_vision_blocks(b, tokens, adapt.delta));
}

Encoding FrozenFoundation::encode_text(const Binder& b, const std::vector<std::size_t>& ids_in,
                                       const EncoderAdaptation& adapt) const {
    // Padding positions are masked out of attention and pooling, which is the
    // same as not materializing them. An all-padding input keeps one pad token.
    std::vector<std::size_t> ids(ids_in.begin(), ids_in.begin() + std::min(ids_in.size(), text_.max_tokens));
    if (ids.empty()) ids.push_back(Tokenizer::kPad);
    for (auto id : ids) {
        if (id >= text_.vocab_size) throw ShapeError("token id " + std::to_string(id) + " outside vocabulary");
    }
    Var x = ops::embedding(b.base(parameter("text.token_embed")), ids);
    x = ops::add(x, ops::slice_rows(b.base(parameter("text.pos_embed")), 0, ids.size()));
    for (std::size_t i = 0; i < text_.layers; ++i) x = block(b, block_prefix("text", i), text_.heads, x, adapt.delta);
    return pool(b, "text", x);
}

Encoding FrozenFoundation::encode_report(const Binder& b, const std::string& report, const EncoderAdaptation& adapt) const {
    return encode_text(b, tokenizer_.encode(report, text_.max_tokens), adapt);
}

EncodingValues FrozenFoundation::encode_image(const Tensor& volume) const {
    Tape t;
    Binder b(t);
    auto e = encode_image(b, volume);
    return {e.tokens.value(), e.pooled.value()};
}

EncodingValues FrozenFoundation::encode_text(const std::string& report) const {
    Tape t;
    Binder b(t);
    auto e = encode_report(b, report);
    return {e.tokens.value(), e.pooled.value()};
}

Container FrozenFoundation::to_container() const {
    Container c;
    c.set_meta("kind", "foundation");
    auto put = [&](const std::string& k, std::size_t v) { c.set_meta(k, std::to_string(v)); };
    put("vision.depth", vision_.volume_shape[0]);
    put("vision.height", vision_.volume_shape[1]);
    put("vision.width", vision_.volume_shape[2]);
    put("vision.patch_size", vision_.patch_size);
    put("vision.embed_dim", vision_.embed_dim);
    put("vision.layers", vision_.layers);
    put("vision.heads", vision_.heads);
    put("vision.proj_dim", vision_.proj_dim);
    put("text.vocab_size", text_.vocab_size);
    put("text.max_tokens", text_.max_tokens);
    put("text.embed_dim", text_.embed_dim);
    put("text.layers", text_.layers);
    put("text.heads", text_.heads);
    put("text.proj_dim", text_.proj_dim);
    c.set_meta("frozen", frozen_ ? "1" : "0");
    if (frozen_) c.set_meta("base_hash", base_hash_);
    for (const auto& p : params_) c.arrays.push_back({p.name, p.value});
    return c;
}

FrozenFoundation FrozenFoundation::from_container(const Container& c) {
    if (c.find_meta("kind") != std::optional<std::string>("foundation")) {
        throw FormatError("container does not hold a foundation model");
    }
    auto get = [&](const std::string& k) -> std::size_t {
        const std::string v = c.meta_value(k);
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
            throw FormatError("meta field '" + k + "' is not an unsigned integer");
        }
        return std::stoull(v);
    };
    VisionEncoderConfig vc;
    vc.volume_shape = {get("vision.depth"), get("vision.height"), get("vision.width")};
    vc.patch_size = get("vision.patch_size");
    vc.embed_dim = get("vision.embed_dim");
    vc.layers = get("vision.layers");
    vc.heads = get("vision.heads");
    vc.proj_dim = get("vision.proj_dim");
    TextEncoderConfig tc;
    tc.vocab_size = get("text.vocab_size");
    tc.max_tokens = get("text.max_tokens");
    tc.embed_dim = get("text.embed_dim");
    tc.layers = get("text.layers");
    tc.heads = get("text.heads");
    tc.proj_dim = get("text.proj_dim");
    FrozenFoundation m(vc, tc, 0);
    if (c.arrays.size() != m.params_.size()) throw FormatError("foundation checkpoint has an unexpected array count");
    for (std::size_t i = 0; i < c.arrays.size(); ++i) {
        Parameter& p = m.params_[i];
        if (c.arrays[i].name != p.name || c.arrays[i].tensor.shape() != p.value.shape()) {
            throw FormatError("foundation checkpoint array " + std::to_string(i) + " ('" + c.arrays[i].name +
                              "') does not match expected '" + p.name + "' " + shape_str(p.value.shape()));
        }
        p.value = c.arrays[i].tensor;
    }
    if (c.find_meta("frozen") == std::optional<std::string>("1")) {
        m.freeze();
        if (m.base_hash_ != c.meta_value("base_hash")) {
            throw IncompatibilityError("foundation weights do not match their recorded base_hash");
        }
    }
    return m;
}

void FrozenFoundation::save(const std::filesystem::path& path) const { write_container(path, to_container()); }

FrozenFoundation FrozenFoundation::load(const std::filesystem::path& path) { return from_container(read_container(path)); }

FrozenFoundation perturb_weight(const FrozenFoundation& model, const std::string& name, std::size_t index, double delta) {
    FrozenFoundation copy = model;
    Parameter& p = copy.mutable_parameter(name);
    if (index >= p.value.numel()) throw LookupError("index out of range for weight '" + name + "'");
    p.value[index] += delta;
    if (copy.frozen_) copy.base_hash_ = copy.compute_hash();
    return copy;
}

ClassScores classify_similarity(std::span<const double> image, const std::vector<std::vector<double>>& prompts) {
    if (prompts.empty()) throw ContractError("classify_similarity needs at least one class prompt");
    auto check_unit = [](std::span<const double> v, const char* what) {
        double s = 0.0;
        for (double x : v) s += x * x;
        if (std::abs(std::sqrt(s) - 1.0) > 1e-9) throw ContractError(std::string(what) + " is not L2-normalized");
    };
    check_unit(image, "image embedding");
    ClassScores out;
    for (const auto& p : prompts) {
        if (p.size() != image.size()) throw ShapeError("class prompt dimension does not match image embedding");
        check_unit(p, "class prompt embedding");
        double dot = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) dot += image[i] * p[i];
        out.scores.push_back(dot);
    }
    out.label = static_cast<std::size_t>(std::max_element(out.scores.begin(), out.scores.end()) - out.scores.begin());
    return out;
}

namespace {

std::vector<std::vector<double>> prompt_embeddings(const FrozenFoundation& model, const std::vector<std::string>& prompts) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prompts) {
        const auto e = model.encode_text(p);
        out.emplace_back(e.pooled.data().begin(), e.pooled.data().end());
    }
    return out;
}

}  // namespace

double classification_accuracy(const FrozenFoundation& model, std::span<const PretrainSample> samples,
                               const std::vector<std::string>& class_prompts) {
    if (samples.empty()) throw ContractError("classification_accuracy needs at least one sample");
    const auto prompts = prompt_embeddings(model, class_prompts);
    std::size_t correct = 0;
    for (const auto& s : samples) {
        const auto e = model.encode_image(s.volume);
        correct += classify_similarity(e.pooled.data(), prompts).label == s.label;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

PretrainResult pretrain_base(FrozenFoundation& model, std::span<const PretrainSample> train,
                             std::span<const PretrainSample> validation, const std::vector<std::string>& class_prompts,
                             const PretrainOptions& options) {
    if (model.frozen()) throw ContractError("pretrain_base called on a frozen foundation");
    if (train.size() < 2 || validation.empty()) throw ContractError("pretrain_base needs >= 2 training and >= 1 validation samples");

    AdamW opt(model.trainable_parameters(), {options.learning_rate, 0.9, 0.999, 1e-8, options.weight_decay});

    Rng rng(options.seed, 0xBA5E);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    PretrainResult result;
    const double inv_tau = 1.0 / options.temperature;

    for (std::size_t epoch = 0; epoch < options.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start + 1 < order.size(); start += options.batch_size) {
            const std::size_t end = std::min(order.size(), start + options.batch_size);
            const std::size_t n = end - start;
            if (n < 2) break;
            Tape tape;
            Binder b(tape, true, false);
            std::vector<Var> img, txt;
            for (std::size_t i = start; i < end; ++i) {
                const auto& s = train[order[i]];
                img.push_back(model.encode_image(b, s.volume).pooled);
                txt.push_back(model.encode_report(b, s.report).pooled);
            }
            Var I = ops::concat_rows(img);
            Var T = ops::concat_rows(txt);
            Var logits = ops::scale(ops::matmul(I, ops::transpose(T)), inv_tau);
            std::vector<bool> all(n * n, true);
            std::vector<std::size_t> diag(n);
            for (std::size_t i = 0; i < n; ++i) diag[i] = i * n + i;
            Var pos = ops::gather(logits, diag, {n, 1});
            Var row_loss = ops::sub(ops::logsumexp_masked(logits, all), pos);
            Var col_loss = ops::sub(ops::logsumexp_masked(ops::transpose(logits), all), pos);
            Var loss = ops::scale(ops::add(ops::mean(row_loss), ops::mean(col_loss)), 0.5);
            tape.backward(loss);
            opt.step(tape.param_grads());
            loss_sum += loss.value().item();
            ++batches;
        }
        result.epoch_loss.push_back(batches ? loss_sum / double(batches) : 0.0);
        const double acc = classification_accuracy(model, validation, class_prompts);
        result.epoch_accuracy.push_back(acc);
        if (options.on_epoch) options.on_epoch(epoch, result.epoch_loss.back(), acc);
        if (acc >= options.target_accuracy) {
            model.freeze();
            return result;
        }
    }
    const double final_acc = result.epoch_accuracy.empty() ? 0.0 : result.epoch_accuracy.back();
    throw TrainingFailure("pretraining stopped at " + std::to_string(options.max_epochs) +
                              " epochs with validation accuracy " + std::to_string(final_acc) + " < " +
                              std::to_string(options.target_accuracy),
                          final_acc);
}

}  // namespace unicon
