#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unicon/adapters.hpp"
#include "unicon/autodiff.hpp"

namespace unicon {

// Censored records (event = false) carry the censoring time.
struct SurvivalRecord {
    double time = 0.0;
    bool event = false;
    std::size_t bin = 0;
};

// K time bins: bin k covers [lower_edges[k], lower_edges[k+1]), the last one
// is open to +infinity. lower_edges[0] == 0.
class DiscretizationGrid {
public:
    explicit DiscretizationGrid(std::vector<double> lower_edges);

    // Edges at the k/K quantiles of the observed times (censored included).
    static DiscretizationGrid from_quantiles(std::span<const double> times, std::size_t bins);

    std::size_t bins() const noexcept { return edges_.size(); }
    const std::vector<double>& lower_edges() const noexcept { return edges_; }
    std::size_t bin_of(double time) const;
    SurvivalRecord record(double time, bool event) const;

private:
    std::vector<double> edges_;
};

enum class SurvivalModel { DeepHit, MTLR };

std::string survival_model_name(SurvivalModel m);
SurvivalModel parse_survival_model(const std::string& s);
// Width of the head output for K bins: K for DeepHit, K - 1 for MTLR.
std::size_t head_width(SurvivalModel m, std::size_t bins);

struct DeepHitLoss {
    Var total;
    Var nll;
    Var rank;
    std::size_t comparable_pairs = 0;
    // Censored records in the last bin, whose empty tail was replaced by eps.
    std::size_t guarded_tails = 0;
};

inline constexpr double kTailGuard = 1e-12;

// Single-risk DeepHit: mean NLL of the softmax bin distribution plus
// lambda_rank * mean over comparable pairs (i event, t_i < t_j) of
// exp(-(F_i(t_i) - F_j(t_i)) / sigma), F the cumulative incidence.
DeepHitLoss deephit_loss(Var logits, std::span<const SurvivalRecord> records, double sigma, double lambda_rank);

// MTLR by exact enumeration of the K monotone event sequences. Mean over the batch.
Var mtlr_loss(Var scores, std::span<const SurvivalRecord> records);

// Per-sample event-bin probabilities from one head output row.
std::vector<double> deephit_pmf(std::span<const double> logits);
std::vector<double> mtlr_pmf(std::span<const double> scores);
std::vector<double> event_pmf(SurvivalModel m, std::span<const double> head_row);

// S(k) = P(event after bin k), non-increasing, in [0, 1], S(K-1) = 0.
std::vector<double> survival_from_pmf(std::span<const double> pmf);
std::vector<double> survival_curve(SurvivalModel m, std::span<const double> head_row);
// Negative expected survival mass: -sum_k S(k).
double risk_score(std::span<const double> survival);

// w_dice * (1 - softDice(sigmoid(logits), mask)) + w_ce * mean BCE, with
// smoothing 1 in the soft Dice numerator and denominator.
Var dice_ce_loss(Var logits, const Tensor& mask, double w_dice, double w_ce);

// Risk logits [n x width] from pooled image and/or text features [n x s].
Var prognosis_forward(const Binder& b, std::optional<Var> image_pooled, std::optional<Var> text_pooled,
                      const FusionAdapter& fusion, const MlpAdapter& head);

}  // namespace unicon
