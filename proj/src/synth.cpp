#include "unicon/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "unicon/container.hpp"
#include "unicon/errors.hpp"
#include "unicon/rng.hpp"

namespace unicon {

namespace {

const std::array<const char*, 2> kSizeWords = {"small", "large"};
const std::array<const char*, 5> kUptakeWords = {"faint", "low", "moderate", "high", "intense"};
const std::array<const char*, 6> kSites = {"oropharynx", "larynx", "hypopharynx", "nasopharynx", "tongue", "tonsil"};

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::size_t word_bin(double unit, std::size_t n) {
    return std::min(n - 1, static_cast<std::size_t>(std::max(0.0, unit) * static_cast<double>(n)));
}

std::string chest_report(bool lesion, Rng& rng) {
    if (!lesion) return rng.bernoulli(0.5) ? "chest ct shows no nodule" : "chest ct shows no nodule lung clear";
    std::string r = "chest ct shows nodule";
    if (rng.bernoulli(0.5)) {
        r += rng.bernoulli(0.5) ? " in the left" : " in the right";
        r += rng.bernoulli(0.5) ? " upper lobe" : " lower lobe";
    }
    return r;
}

std::string head_neck_report(std::size_t size_bin, std::size_t uptake_bin, Rng& rng) {
    std::string r = "head neck pet ct shows primary tumor in the ";
    r += kSites[rng.index(kSites.size())];
    r += " measuring ";
    r += kSizeWords[size_bin];
    r += " with ";
    r += kUptakeWords[uptake_bin];
    r += " uptake patient ";
    r += rng.bernoulli(0.5) ? "male " : "female ";
    r += rng.bernoulli(0.5) ? "smoker " : "nonsmoker ";
    r += rng.bernoulli(0.5) ? "hpv positive" : "hpv negative";
    return r;
}

}  // namespace

void CaseParams::validate() const {
    if (shape.size() != 3) throw ConfigError("case shape must be 3-D");
    for (auto d : shape) {
        if (d < 4) throw ConfigError("case volume dims must be >= 4");
    }
    if (!(lesion_prob >= 0.0 && lesion_prob <= 1.0)) throw ConfigError("lesion_prob must be in [0, 1]");
    if (!(radius_max >= radius_min)) throw ConfigError("radius_max must be >= radius_min");
    const double half = static_cast<double>(*std::min_element(shape.begin(), shape.end())) / 2.0;
    if (radius_max + 1.0 >= half) throw ConfigError("radius_max does not fit in the volume");
    if (!(uptake_max > uptake_min)) throw ConfigError("uptake_max must exceed uptake_min");
    if (!(censor_rate >= 0.0 && censor_rate < 1.0)) throw ConfigError("censor_rate must be in [0, 1)");
    if (!(time_scale > 0.0) || !(time_noise >= 0.0) || !(noise_hu >= 0.0) || !(pet_noise >= 0.0)) {
        throw ConfigError("time_scale must be positive and noise levels non-negative");
    }
}

double SyntheticCase::lesion_voxels() const {
    double s = 0.0;
    for (double v : mask.data()) s += v;
    return s;
}

SyntheticCase generate_case(std::uint64_t seed, const CaseParams& p) {
    p.validate();
    Rng rng(seed);
    SyntheticCase c;
    c.seed = seed;
    c.class_label = rng.bernoulli(p.lesion_prob);
    c.radius = c.class_label ? rng.uniform(p.radius_min, p.radius_max) : 0.0;
    if (c.class_label && !(c.radius >= 1.0)) {
        throw GenerationError("lesion case needs a radius of at least one voxel, got " + fmt_double(c.radius));
    }
    const double D = static_cast<double>(p.shape[0]), H = static_cast<double>(p.shape[1]), W = static_cast<double>(p.shape[2]);
    std::array<double, 3> centre{};
    const std::array<double, 3> extent{D, H, W};
    for (std::size_t a = 0; a < 3; ++a) centre[a] = rng.uniform(c.radius + 1.0, extent[a] - c.radius - 2.0);
    c.uptake = c.class_label ? rng.uniform(p.uptake_min, p.uptake_max) : 0.0;
    std::array<double, 3> normal{rng.normal(), rng.normal(), rng.normal()};
    const double nn = std::sqrt(normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]);
    for (auto& v : normal) v /= nn;

    const double uptake_unit = c.class_label ? (c.uptake - p.uptake_min) / (p.uptake_max - p.uptake_min) : 0.0;
    if (p.site == Site::Chest) {
        c.report = chest_report(c.class_label, rng);
    } else {
        const double size_unit = (c.radius - p.radius_min) / std::max(p.radius_max - p.radius_min, 1e-12);
        c.report = head_neck_report(word_bin(size_unit, kSizeWords.size()), word_bin(uptake_unit, kUptakeWords.size()), rng);
    }

    struct Wave {
        std::array<double, 3> f;
        double phase;
    };
    std::array<Wave, 3> waves{};
    for (auto& w : waves) {
        for (auto& f : w.f) f = rng.uniform(-1.5, 1.5);
        w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }

    c.ct = Tensor(p.shape);
    c.pet = Tensor(p.shape);
    c.mask = Tensor(p.shape);
    std::size_t i = 0;
    for (std::size_t z = 0; z < p.shape[0]; ++z)
        for (std::size_t y = 0; y < p.shape[1]; ++y)
            for (std::size_t x = 0; x < p.shape[2]; ++x, ++i) {
                const std::array<double, 3> pos{z + 0.5, y + 0.5, x + 0.5};
                double field = 0.0;
                for (const auto& w : waves) {
                    field += std::sin(2.0 * std::numbers::pi * (w.f[0] * pos[0] / D + w.f[1] * pos[1] / H + w.f[2] * pos[2] / W) + w.phase);
                }
                double ct = p.background_hu + p.texture_hu * field / 3.0;
                double pet = p.pet_background;
                if (c.class_label) {
                    const std::array<double, 3> d{pos[0] - centre[0], pos[1] - centre[1], pos[2] - centre[2]};
                    if (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= c.radius * c.radius) {
                        c.mask[i] = 1.0;
                        pet = c.uptake;
                        const bool pet_only = p.complementarity && d[0] * normal[0] + d[1] * normal[1] + d[2] * normal[2] > 0.0;
                        if (!pet_only) ct += p.contrast_hu;
                    }
                }
                c.ct[i] = ct;
                c.pet[i] = pet;
            }
    for (auto& v : c.ct.data()) v += rng.normal(0.0, p.noise_hu);
    for (auto& v : c.pet.data()) v = std::max(0.0, v + rng.normal(0.0, p.pet_noise));
    for (auto& v : c.ct.data()) v = std::clamp(v, -1200.0, 1200.0);

    const double r_max = std::max(p.radius_max, 1e-12);
    const double volume_unit = (c.radius * c.radius * c.radius) / (r_max * r_max * r_max);
    const double log_t = std::log(p.time_scale) - p.beta_volume * volume_unit - p.beta_uptake * uptake_unit +
                         p.time_noise * rng.normal();
    const double t = std::exp(log_t);
    c.event = !rng.bernoulli(p.censor_rate);
    const double u = rng.uniform(0.05, 1.0);
    c.time = c.event ? t : u * t;
    return c;
}

std::vector<SyntheticCase> generate_cases(std::uint64_t master_seed, std::size_t n, const CaseParams& params) {
    std::vector<SyntheticCase> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_case(mix_seed(master_seed, i), params));
    return out;
}

Tensor preprocess_ct(const Tensor& volume) {
    Tensor out = volume;
    for (auto& v : out.data()) v = std::clamp(v, -1024.0, 1024.0) / 1024.0;
    return out;
}

Tensor preprocess_pet(const Tensor& volume) {
    // Statistics are taken about the first voxel so a constant volume maps to exact zeros.
    const double n = static_cast<double>(volume.numel());
    const double shift = volume[0];
    double mean = 0.0;
    for (double v : volume.data()) mean += v - shift;
    mean /= n;
    double var = 0.0;
    for (double v : volume.data()) var += (v - shift - mean) * (v - shift - mean);
    const double sd = std::sqrt(var / n);
    Tensor out = volume;
    for (auto& v : out.data()) v = (v - shift - mean) / (sd + 1e-8);
    return out;
}

std::vector<std::size_t> split_folds(const std::vector<bool>& events, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ContractError("split_folds needs k >= 2");
    if (events.size() < k) {
        throw ContractError("split_folds needs at least k = " + std::to_string(k) + " cases, got " + std::to_string(events.size()));
    }
    Rng rng(seed, 0xF01D);
    std::vector<std::size_t> ev, cens;
    for (std::size_t i = 0; i < events.size(); ++i) (events[i] ? ev : cens).push_back(i);
    std::shuffle(ev.begin(), ev.end(), rng.engine());
    std::shuffle(cens.begin(), cens.end(), rng.engine());
    std::vector<std::size_t> folds(events.size());
    std::size_t slot = 0;
    for (auto i : ev) folds[i] = slot++ % k;
    for (auto i : cens) folds[i] = slot++ % k;
    return folds;
}

const std::vector<std::string>& chest_class_prompts() {
    static const std::vector<std::string> prompts = {"chest ct shows no nodule", "chest ct shows nodule"};
    return prompts;
}

std::vector<PretrainSample> pretrain_corpus(std::uint64_t master_seed, std::size_t n, const CaseParams& params) {
    CaseParams p = params;
    p.site = Site::Chest;
    std::vector<PretrainSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        SyntheticCase c = generate_case(mix_seed(master_seed, i), p);
        out.push_back({preprocess_ct(c.ct), c.report, c.class_label ? 1u : 0u});
    }
    return out;
}

std::string describe_params(const CaseParams& p) {
    std::ostringstream o;
    o << "site = " << (p.site == Site::Chest ? "chest" : "head_neck") << "\n"
      << "shape = " << p.shape[0] << "x" << p.shape[1] << "x" << p.shape[2] << "\n"
      << "lesion_prob = " << fmt_double(p.lesion_prob) << "\n"
      << "radius_min = " << fmt_double(p.radius_min) << "\n"
      << "radius_max = " << fmt_double(p.radius_max) << "\n"
      << "background_hu = " << fmt_double(p.background_hu) << "\n"
      << "texture_hu = " << fmt_double(p.texture_hu) << "\n"
      << "noise_hu = " << fmt_double(p.noise_hu) << "\n"
      << "contrast_hu = " << fmt_double(p.contrast_hu) << "\n"
      << "pet_background = " << fmt_double(p.pet_background) << "\n"
      << "pet_noise = " << fmt_double(p.pet_noise) << "\n"
      << "uptake_min = " << fmt_double(p.uptake_min) << "\n"
      << "uptake_max = " << fmt_double(p.uptake_max) << "\n"
      << "complementarity = " << (p.complementarity ? "true" : "false") << "\n"
      << "time_scale = " << fmt_double(p.time_scale) << "\n"
      << "beta_volume = " << fmt_double(p.beta_volume) << "\n"
      << "beta_uptake = " << fmt_double(p.beta_uptake) << "\n"
      << "time_noise = " << fmt_double(p.time_noise) << "\n"
      << "censor_rate = " << fmt_double(p.censor_rate) << "\n";
    return o.str();
}

void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticCase>& cases,
                   const std::vector<std::size_t>& folds, const CaseParams& params, std::uint64_t master_seed) {
    if (folds.size() != cases.size()) throw ContractError("one fold assignment per case is required");
    std::filesystem::create_directories(dir / "cases");
    std::ofstream index(dir / "index.jsonl", std::ios::binary | std::ios::trunc);
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const SyntheticCase& c = cases[i];
        char id[16];
        std::snprintf(id, sizeof id, "case%05zu", i);
        Container box;
        box.set_meta("kind", "case");
        box.set_meta("report", c.report);
        box.set_meta("time", fmt_double(c.time));
        box.set_meta("event", c.event ? "1" : "0");
        box.set_meta("class_label", c.class_label ? "1" : "0");
        box.set_meta("radius", fmt_double(c.radius));
        box.set_meta("uptake", fmt_double(c.uptake));
        box.set_meta("seed", std::to_string(c.seed));
        box.arrays = {{"ct", c.ct}, {"pet", c.pet}, {"mask", c.mask}};
        write_container(dir / "cases" / (std::string(id) + ".bin"), box);
        nlohmann::json j = {{"id", id},       {"class_label", c.class_label}, {"time", c.time},
                            {"event", c.event}, {"fold", folds[i]}};
        index << j.dump() << "\n";
    }
    std::ofstream spec(dir / "spec.txt", std::ios::binary | std::ios::trunc);
    spec << "master_seed = " << master_seed << "\n" << "cases = " << cases.size() << "\n" << describe_params(params);
}

Dataset read_dataset(const std::filesystem::path& dir) {
    std::ifstream index(dir / "index.jsonl", std::ios::binary);
    if (!index) throw FormatError("no index.jsonl in " + dir.string());
    Dataset ds;
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        const Container box = read_container(dir / "cases" / (j.at("id").get<std::string>() + ".bin"));
        SyntheticCase c;
        c.ct = box.array("ct");
        c.pet = box.array("pet");
        c.mask = box.array("mask");
        c.report = box.meta_value("report");
        c.time = std::stod(box.meta_value("time"));
        c.event = box.meta_value("event") == "1";
        c.class_label = box.meta_value("class_label") == "1";
        c.radius = std::stod(box.meta_value("radius"));
        c.uptake = std::stod(box.meta_value("uptake"));
        c.seed = std::stoull(box.meta_value("seed"));
        ds.cases.push_back(std::move(c));
        ds.folds.push_back(j.at("fold").get<std::size_t>());
    }
    return ds;
}

}  // namespace unicon
