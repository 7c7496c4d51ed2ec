#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <utility>

#include "unicon/errors.hpp"
#include "unicon/trainer.hpp"

namespace unicon {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string where(const std::string& key) { return "config key '" + key + "'"; }

std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(where(key) + ": '" + v + "' is not a non-negative integer");
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) {
        throw ConfigError(where(key) + ": '" + v + "' is not a finite number");
    }
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(where(key) + ": '" + v + "' is not a boolean");
}

// "32" or "32x48x32"
Shape to_shape(const std::string& key, const std::string& v) {
    Shape out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, 'x')) out.push_back(to_size(key, part));
    if (out.size() == 1) out = {out[0], out[0], out[0]};
    if (out.size() != 3) throw ConfigError(where(key) + ": expected N or DxHxW, got '" + v + "'");
    return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;
using Schema = std::map<std::string, std::map<std::string, Setter>>;

template <class F>
Setter step_setter(F f) {
    return [f](RunConfig& c, const std::string& k, const std::string& v) {
        const auto dot = k.find('.');
        const std::size_t idx = static_cast<std::size_t>(k[dot - 1] - '0');
        f(c.step(idx), k, v);
    };
}

void add_common_step_keys(std::map<std::string, Setter>& m) {
    m["enabled"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.enabled = to_bool(k, v); });
    m["lr"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.learning_rate = to_double(k, v); });
    m["weight_decay"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.weight_decay = to_double(k, v); });
    m["batch_size"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.batch_size = to_size(k, v); });
    m["lora_rank"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.lora_rank = to_size(k, v); });
    m["lora_alpha"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.lora_alpha = to_double(k, v); });
    m["hidden"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.hidden = to_size(k, v); });
}

const Schema& schema() {
    static const Schema s = [] {
        Schema out;
        auto& base = out["base"];
        base["checkpoint"] = [](RunConfig& c, auto&, auto& v) { c.base.checkpoint = v; };
        base["volume"] = [](RunConfig& c, auto& k, auto& v) {
            const Shape sh = to_shape(k, v);
            c.base.vision.volume_shape = {sh[0], sh[1], sh[2]};
        };
        base["patch_size"] = [](RunConfig& c, auto& k, auto& v) { c.base.vision.patch_size = to_size(k, v); };
        base["embed_dim"] = [](RunConfig& c, auto& k, auto& v) {
            c.base.vision.embed_dim = c.base.text.embed_dim = to_size(k, v);
        };
        base["layers"] = [](RunConfig& c, auto& k, auto& v) { c.base.vision.layers = to_size(k, v); };
        base["heads"] = [](RunConfig& c, auto& k, auto& v) { c.base.vision.heads = c.base.text.heads = to_size(k, v); };
        base["proj_dim"] = [](RunConfig& c, auto& k, auto& v) {
            c.base.vision.proj_dim = c.base.text.proj_dim = to_size(k, v);
        };
        base["text_layers"] = [](RunConfig& c, auto& k, auto& v) { c.base.text.layers = to_size(k, v); };
        base["max_tokens"] = [](RunConfig& c, auto& k, auto& v) { c.base.text.max_tokens = to_size(k, v); };
        base["pretrain_cases"] = [](RunConfig& c, auto& k, auto& v) { c.base.pretrain_cases = to_size(k, v); };
        base["pretrain_epochs"] = [](RunConfig& c, auto& k, auto& v) { c.base.pretrain.max_epochs = to_size(k, v); };
        base["pretrain_batch"] = [](RunConfig& c, auto& k, auto& v) { c.base.pretrain.batch_size = to_size(k, v); };
        base["pretrain_lr"] = [](RunConfig& c, auto& k, auto& v) { c.base.pretrain.learning_rate = to_double(k, v); };
        base["pretrain_weight_decay"] = [](RunConfig& c, auto& k, auto& v) {
            c.base.pretrain.weight_decay = to_double(k, v);
        };
        base["temperature"] = [](RunConfig& c, auto& k, auto& v) { c.base.pretrain.temperature = to_double(k, v); };
        base["target_accuracy"] = [](RunConfig& c, auto& k, auto& v) {
            c.base.pretrain.target_accuracy = to_double(k, v);
        };

        auto& data = out["data"];
        data["dir"] = [](RunConfig& c, auto&, auto& v) { c.data.dir = v; };
        data["cases"] = [](RunConfig& c, auto& k, auto& v) { c.data.cases = to_size(k, v); };
        data["folds"] = [](RunConfig& c, auto& k, auto& v) { c.data.folds = to_size(k, v); };
        data["validation_fold"] = [](RunConfig& c, auto& k, auto& v) { c.data.validation_fold = to_size(k, v); };
        data["probes"] = [](RunConfig& c, auto& k, auto& v) { c.data.probes = to_size(k, v); };
        data["shape"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.shape = to_shape(k, v); };
        data["complementarity"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.complementarity = to_bool(k, v); };
        data["radius_min"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.radius_min = to_double(k, v); };
        data["radius_max"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.radius_max = to_double(k, v); };
        data["contrast_hu"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.contrast_hu = to_double(k, v); };
        data["noise_hu"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.noise_hu = to_double(k, v); };
        data["censor_rate"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.censor_rate = to_double(k, v); };
        data["time_noise"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.time_noise = to_double(k, v); };
        data["beta_volume"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.beta_volume = to_double(k, v); };
        data["beta_uptake"] = [](RunConfig& c, auto& k, auto& v) { c.data.params.beta_uptake = to_double(k, v); };

        auto& s1 = out["step1"];
        add_common_step_keys(s1);
        s1["epochs"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.epochs = to_size(k, v); });
        s1["head"] = step_setter([](StepSettings& s, auto&, auto& v) {
            parse_survival_model(v);
            s.head = v;
        });
        s1["bins"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.bins = to_size(k, v); });
        s1["sigma"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.sigma = to_double(k, v); });
        s1["lambda_rank"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.lambda_rank = to_double(k, v); });
        s1["modalities"] = step_setter([](StepSettings& s, auto&, auto& v) { s.modalities = ModalitySet::parse(v); });
        s1["text_lora"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.text_lora = to_bool(k, v); });
        s1["image_lora"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.image_lora = to_bool(k, v); });

        auto& s2 = out["step2"];
        add_common_step_keys(s2);
        s2["max_steps"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.max_steps = to_size(k, v); });

        auto& s3 = out["step3"];
        s3 = s2;
        s3["init_from_step2"] = step_setter([](StepSettings& s, auto& k, auto& v) { s.init_from_step2 = to_bool(k, v); });

        auto& o = out["output"];
        o["dir"] = [](RunConfig& c, auto&, auto& v) { c.output.dir = v; };
        o["curves"] = [](RunConfig& c, auto& k, auto& v) { c.output.curves = to_bool(k, v); };
        return out;
    }();
    return s;
}

void apply(RunConfig& c, const std::string& section, const std::string& key, const std::string& value) {
    const auto& sc = schema();
    const auto sit = sc.find(section);
    if (sit == sc.end()) throw ConfigError("unknown config section [" + section + "]");
    const auto kit = sit->second.find(key);
    if (kit == sit->second.end()) {
        std::string valid;
        for (const auto& [k, _] : sit->second) valid += (valid.empty() ? "" : ", ") + k;
        throw ConfigError("unknown key '" + key + "' in [" + section + "] (valid: " + valid + ")");
    }
    kit->second(c, section + "." + key, value);
}

void apply_overrides(RunConfig& c, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        const auto dot = o.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
            throw ConfigError("override '" + o + "' is not of the form section.key=value");
        }
        apply(c, trim(o.substr(0, dot)), trim(o.substr(dot + 1, eq - dot - 1)), trim(o.substr(eq + 1)));
    }
}

}  // namespace

CaseParams DataSettings::default_params() {
    CaseParams p;
    p.site = Site::HeadNeck;
    p.complementarity = true;
    return p;
}

StepSettings RunConfig::default_step(std::size_t index) {
    StepSettings s;
    if (index == 1) return s;
    s.learning_rate = 1e-3;
    s.weight_decay = 1e-5;
    s.batch_size = 1;
    s.epochs = 0;
    s.max_steps = 2000;
    if (index == 3) s.hidden = 128;
    return s;
}

const StepSettings& RunConfig::step(std::size_t index) const {
    switch (index) {
        case 1: return step1;
        case 2: return step2;
        case 3: return step3;
    }
    throw ContractError("adaptation steps are numbered 1 to 3, got " + std::to_string(index));
}

StepSettings& RunConfig::step(std::size_t index) {
    return const_cast<StepSettings&>(std::as_const(*this).step(index));
}

RunConfig RunConfig::parse(const std::string& text, const std::vector<std::string>& overrides) {
    RunConfig c;
    std::set<std::string> sections;
    std::vector<std::tuple<std::string, std::string, std::string>> entries;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (!schema().count(section)) throw ConfigError("line " + std::to_string(lineno) + ": unknown section [" + section + "]");
            if (!sections.insert(section).second) throw ConfigError("section [" + section + "] appears twice");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside of any [section]");
        entries.emplace_back(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    for (std::size_t i = 1; i <= 3; ++i) {
        if (!sections.count("step" + std::to_string(i))) c.step(i).enabled = false;
    }
    for (const auto& [s, k, v] : entries) apply(c, s, k, v);
    apply_overrides(c, overrides);
    return c;
}

RunConfig RunConfig::defaults(const std::vector<std::string>& overrides) {
    RunConfig c;
    apply_overrides(c, overrides);
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), overrides);
}

void RunConfig::validate() const {
    base.vision.validate();
    base.text.validate();
    data.params.validate();
    if (base.pretrain_cases < 10) throw ConfigError("base.pretrain_cases must be at least 10");
    const Shape vs(base.vision.volume_shape.begin(), base.vision.volume_shape.end());
    if (data.params.shape != vs) {
        throw ConfigError("data.shape " + shape_str(data.params.shape) + " must equal base.volume " + shape_str(vs));
    }
    if (data.folds < 2) throw ConfigError("data.folds must be at least 2");
    if (data.cases < data.folds) throw ConfigError("data.cases must be at least data.folds");
    if (data.validation_fold >= data.folds) throw ConfigError("data.validation_fold must be below data.folds");
    if (data.probes == 0) throw ConfigError("data.probes must be at least 1");
    for (std::size_t i = 1; i <= 3; ++i) {
        const StepSettings& s = step(i);
        if (!s.enabled) continue;
        const std::string p = "step" + std::to_string(i) + ".";
        if (!(s.learning_rate > 0.0)) throw ConfigError(p + "lr must be positive");
        if (s.weight_decay < 0.0) throw ConfigError(p + "weight_decay must be non-negative");
        if (s.batch_size == 0) throw ConfigError(p + "batch_size must be at least 1");
        if (s.lora_rank == 0) throw ConfigError(p + "lora_rank must be at least 1");
        if (s.hidden == 0) throw ConfigError(p + "hidden must be at least 1");
        if (i == 1) {
            if (s.epochs == 0) throw ConfigError(p + "epochs must be at least 1");
            if (s.bins < 2) throw ConfigError(p + "bins must be at least 2");
            if (!(s.sigma > 0.0)) throw ConfigError(p + "sigma must be positive");
            if (s.lambda_rank < 0.0) throw ConfigError(p + "lambda_rank must be non-negative");
            if (s.modalities.empty() || s.modalities.contains(Modality::PET)) {
                throw ConfigError(p + "modalities must be a non-empty subset of ct+text");
            }
            parse_survival_model(s.head);
        } else if (s.max_steps == 0) {
            throw ConfigError(p + "max_steps must be at least 1");
        }
    }
    if (step3.enabled && step3.init_from_step2 && !step2.enabled) {
        throw ConfigError("step3.init_from_step2 needs step 2 in the same run");
    }
    if (output.dir.empty()) throw ConfigError("output.dir must not be empty");
}

}  // namespace unicon
