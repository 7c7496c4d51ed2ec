#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "unicon/foundation.hpp"
#include "unicon/heads.hpp"
#include "unicon/tensor.hpp"
#include "unicon/volume.hpp"

namespace unicon {

enum class Site { Chest, HeadNeck };

struct CaseParams {
    Site site = Site::HeadNeck;
    Shape shape{32, 32, 32};
    double lesion_prob = 1.0;  // P(class_label = true)
    double radius_min = 4.0;
    double radius_max = 9.0;
    double background_hu = 40.0;
    double texture_hu = 40.0;   // amplitude of the smooth background field
    double noise_hu = 25.0;
    double contrast_hu = 250.0;
    double pet_background = 1.0;
    double pet_noise = 0.3;
    double uptake_min = 2.0;
    double uptake_max = 10.0;
    // A random half of the lesion (split by a plane through its centre) gets
    // no CT contrast and is visible only in PET.
    bool complementarity = false;
    double time_scale = 60.0;
    double beta_volume = 2.0;  // on lesion volume relative to the largest possible lesion
    double beta_uptake = 1.0;  // on uptake rescaled to [0, 1]
    double time_noise = 0.4;   // sigma of the log-normal factor
    double censor_rate = 0.3;

    void validate() const;
};

struct SyntheticCase {
    Tensor ct;    // HU-like, raw
    Tensor pet;   // SUV-like, raw
    Tensor mask;  // {0, 1}
    std::string report;
    double time = 0.0;
    bool event = false;
    bool class_label = false;
    double radius = 0.0;
    double uptake = 0.0;
    std::uint64_t seed = 0;

    double lesion_voxels() const;
};

// Throws GenerationError for a lesion case with radius below one voxel.
SyntheticCase generate_case(std::uint64_t seed, const CaseParams& params);
// Case i is generated from mix_seed(master_seed, i).
std::vector<SyntheticCase> generate_cases(std::uint64_t master_seed, std::size_t n, const CaseParams& params);

// clamp(v, -1024, 1024) / 1024
Tensor preprocess_ct(const Tensor& volume);
// (v - mean) / (std + 1e-8), per volume
Tensor preprocess_pet(const Tensor& volume);

// Stratified by event flag: events and censored cases are shuffled separately
// and dealt round-robin, so fold sizes differ by at most one.
std::vector<std::size_t> split_folds(const std::vector<bool>& events, std::size_t k, std::uint64_t seed);

// Classification corpus for the base model: preprocessed CT plus report,
// label 1 = lesion present.
std::vector<PretrainSample> pretrain_corpus(std::uint64_t master_seed, std::size_t n, const CaseParams& params);
const std::vector<std::string>& chest_class_prompts();

// cases/<id>.bin, index.jsonl, spec.txt
void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticCase>& cases,
                   const std::vector<std::size_t>& folds, const CaseParams& params, std::uint64_t master_seed);
struct Dataset {
    std::vector<SyntheticCase> cases;
    std::vector<std::size_t> folds;
};
Dataset read_dataset(const std::filesystem::path& dir);

std::string describe_params(const CaseParams& p);  // key = value lines

}  // namespace unicon
