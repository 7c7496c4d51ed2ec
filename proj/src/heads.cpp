#include "unicon/heads.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "unicon/errors.hpp"

namespace unicon {

DiscretizationGrid::DiscretizationGrid(std::vector<double> lower_edges) : edges_(std::move(lower_edges)) {
    if (edges_.size() < 2) throw ConfigError("a discretization grid needs K >= 2 bins");
    if (edges_.front() != 0.0) throw ConfigError("the first bin edge must be 0");
    for (std::size_t i = 1; i < edges_.size(); ++i) {
        if (!(edges_[i] > edges_[i - 1]) || !std::isfinite(edges_[i])) {
            throw ConfigError("bin edges must be finite and strictly increasing");
        }
    }
}

DiscretizationGrid DiscretizationGrid::from_quantiles(std::span<const double> times, std::size_t bins) {
    if (bins < 2) throw ConfigError("a discretization grid needs K >= 2 bins");
    if (times.size() < bins) throw DegenerateCohortError("fewer observed times than bins");
    std::vector<double> sorted(times.begin(), times.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> edges{0.0};
    for (std::size_t k = 1; k < bins; ++k) {
        const double q = sorted[k * sorted.size() / bins];
        if (!(q > edges.back())) throw DegenerateCohortError("observed times have fewer distinct quantiles than bins");
        edges.push_back(q);
    }
    return DiscretizationGrid(std::move(edges));
}

std::size_t DiscretizationGrid::bin_of(double time) const {
    if (!(time > 0.0) || !std::isfinite(time)) throw ContractError("survival times must be positive and finite");
    return static_cast<std::size_t>(std::upper_bound(edges_.begin(), edges_.end(), time) - edges_.begin()) - 1;
}

SurvivalRecord DiscretizationGrid::record(double time, bool event) const { return {time, event, bin_of(time)}; }

std::string survival_model_name(SurvivalModel m) { return m == SurvivalModel::DeepHit ? "deephit" : "mtlr"; }

SurvivalModel parse_survival_model(const std::string& s) {
    if (s == "deephit") return SurvivalModel::DeepHit;
    if (s == "mtlr") return SurvivalModel::MTLR;
    throw ConfigError("unknown survival head '" + s + "' (expected deephit or mtlr)");
}

std::size_t head_width(SurvivalModel m, std::size_t bins) { return m == SurvivalModel::DeepHit ? bins : bins - 1; }

namespace {

void check_batch(const Tensor& out, std::span<const SurvivalRecord> records, std::size_t bins, const char* what) {
    if (out.rank() != 2 || out.rows() != records.size()) {
        throw ShapeError(std::string(what) + " output " + shape_str(out.shape()) + " does not match a batch of " +
                         std::to_string(records.size()));
    }
    for (const auto& r : records) {
        if (r.bin >= bins) throw ContractError(std::string(what) + " record bin " + std::to_string(r.bin) + " outside K");
    }
}

Var constant_scalar(Tape& t, double v) { return t.constant(Tensor::scalar(v)); }

}  // namespace

DeepHitLoss deephit_loss(Var logits, std::span<const SurvivalRecord> records, double sigma, double lambda_rank) {
    const std::size_t n = logits.value().rows();
    const std::size_t K = logits.value().cols();
    if (K < 2) throw ContractError("DeepHit needs K >= 2 bins");
    if (!(sigma > 0.0)) throw ContractError("DeepHit sigma must be positive");
    check_batch(logits.value(), records, K, "DeepHit");
    Tape& tape = logits.tape();
    DeepHitLoss out;

    Var lse = ops::logsumexp_masked(logits, std::vector<bool>(n * K, true));

    // Uncensored: -(z[i, bin] - lse_i). Censored: -(lse over k > bin - lse_i).
    std::vector<std::size_t> ev_idx, ev_rows, cen_rows;
    std::vector<bool> cen_mask;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = records[i];
        if (r.event) {
            ev_idx.push_back(i * K + r.bin);
            ev_rows.push_back(i);
        } else if (r.bin + 1 < K) {
            cen_rows.push_back(i);
            for (std::size_t k = 0; k < K; ++k) cen_mask.push_back(k > r.bin);
        } else {
            ++out.guarded_tails;
        }
    }
    std::vector<Var> terms;
    if (!ev_rows.empty()) {
        Var z = ops::gather(logits, ev_idx, {ev_rows.size(), 1});
        Var l = ops::gather(lse, ev_rows, {ev_rows.size(), 1});
        terms.push_back(ops::sum(ops::sub(l, z)));
    }
    if (!cen_rows.empty()) {
        std::vector<std::size_t> idx;
        for (auto i : cen_rows)
            for (std::size_t k = 0; k < K; ++k) idx.push_back(i * K + k);
        Var rows = ops::gather(logits, idx, {cen_rows.size(), K});
        Var tail = ops::logsumexp_masked(rows, cen_mask);
        Var l = ops::gather(lse, cen_rows, {cen_rows.size(), 1});
        terms.push_back(ops::sum(ops::sub(l, tail)));
    }
    if (out.guarded_tails) {
        terms.push_back(constant_scalar(tape, -std::log(kTailGuard) * static_cast<double>(out.guarded_tails)));
    }
    Var nll_sum = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) nll_sum = ops::add(nll_sum, terms[i]);
    out.nll = ops::scale(nll_sum, 1.0 / static_cast<double>(n));

    std::vector<std::size_t> fi, fj;
    for (std::size_t i = 0; i < n; ++i) {
        if (!records[i].event) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (records[i].time < records[j].time) {
                fi.push_back(i * K + records[i].bin);
                fj.push_back(j * K + records[i].bin);
            }
        }
    }
    out.comparable_pairs = fi.size();
    if (fi.empty()) {
        out.rank = constant_scalar(tape, 0.0);
    } else {
        Tensor upper({K, K}, 0.0);
        for (std::size_t a = 0; a < K; ++a)
            for (std::size_t c = a; c < K; ++c) upper.at(a, c) = 1.0;
        Var cif = ops::matmul(ops::softmax(logits), tape.constant(std::move(upper)));
        Var diff = ops::sub(ops::gather(cif, fi, {fi.size(), 1}), ops::gather(cif, fj, {fj.size(), 1}));
        out.rank = ops::mean(ops::exp(ops::scale(diff, -1.0 / sigma)));
    }
    out.total = lambda_rank == 0.0 ? out.nll : ops::add(out.nll, ops::scale(out.rank, lambda_rank));
    return out;
}

Var mtlr_loss(Var scores, std::span<const SurvivalRecord> records) {
    const std::size_t n = scores.value().rows();
    const std::size_t K = scores.value().cols() + 1;
    if (K < 2) throw ContractError("MTLR needs K >= 2 bins");
    if (K > 16) throw ContractError("MTLR enumeration is limited to K <= 16 bins");
    check_batch(scores.value(), records, K, "MTLR");
    Tape& tape = scores.tape();

    // Sequence with event in bin b has y_k = 1 for k >= b, so its score is
    // sum_{k >= b} score_k; b = K - 1 is the all-zero sequence.
    Tensor m({K - 1, K}, 0.0);
    for (std::size_t k = 0; k + 1 < K; ++k)
        for (std::size_t b = 0; b <= k; ++b) m.at(k, b) = 1.0;
    Var seq = ops::matmul(scores, tape.constant(std::move(m)));

    std::vector<bool> keep(n * K);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = records[i];
        for (std::size_t b = 0; b < K; ++b) keep[i * K + b] = r.event ? b == r.bin : b >= r.bin;
    }
    Var num = ops::logsumexp_masked(seq, keep);
    Var log_z = ops::logsumexp_masked(seq, std::vector<bool>(n * K, true));
    return ops::mean(ops::sub(log_z, num));
}

std::vector<double> deephit_pmf(std::span<const double> logits) {
    if (logits.empty()) throw ShapeError("empty head output");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) s += (p[k] = std::exp(logits[k] - mx));
    for (auto& v : p) v /= s;
    return p;
}

std::vector<double> mtlr_pmf(std::span<const double> scores) {
    const std::size_t K = scores.size() + 1;
    std::vector<double> seq(K, 0.0);
    double acc = 0.0;
    for (std::size_t b = K - 1; b-- > 0;) {
        acc += scores[b];
        seq[b] = acc;
    }
    return deephit_pmf(seq);
}

std::vector<double> event_pmf(SurvivalModel m, std::span<const double> row) {
    return m == SurvivalModel::DeepHit ? deephit_pmf(row) : mtlr_pmf(row);
}

std::vector<double> survival_from_pmf(std::span<const double> pmf) {
    std::vector<double> s(pmf.size(), 0.0);
    double tail = 0.0;
    for (std::size_t k = pmf.size(); k-- > 0;) {
        s[k] = std::min(1.0, tail);
        tail += pmf[k];
    }
    return s;
}

std::vector<double> survival_curve(SurvivalModel m, std::span<const double> row) {
    return survival_from_pmf(event_pmf(m, row));
}

double risk_score(std::span<const double> survival) {
    double s = 0.0;
    for (double v : survival) s += v;
    return -s;
}

Var dice_ce_loss(Var logits, const Tensor& mask, double w_dice, double w_ce) {
    if (logits.shape() != mask.shape()) {
        throw ShapeError("logits " + shape_str(logits.shape()) + " and mask " + shape_str(mask.shape()) + " differ");
    }
    Tape& tape = logits.tape();
    double mask_sum = 0.0;
    for (double v : mask.data()) mask_sum += v;
    Var m = tape.constant(mask);
    Var p = ops::sigmoid(logits);
    Var inter = ops::sum(ops::mul(p, m));
    Var soft_dice = ops::div(ops::add_scalar(ops::scale(inter, 2.0), 1.0), ops::add_scalar(ops::sum(p), mask_sum + 1.0));
    Var bce = ops::mean(ops::sub(ops::softplus(logits), ops::mul(m, logits)));
    return ops::add(ops::scale(ops::add_scalar(ops::neg(soft_dice), 1.0), w_dice), ops::scale(bce, w_ce));
}

Var prognosis_forward(const Binder& b, std::optional<Var> image_pooled, std::optional<Var> text_pooled,
                      const FusionAdapter& fusion, const MlpAdapter& head) {
    if (!image_pooled && !text_pooled) throw ContractError("prognosis needs an image or a text embedding");
    std::map<Modality, Var> feats;
    if (image_pooled) feats.emplace(Modality::CT, *image_pooled);
    if (text_pooled) feats.emplace(Modality::TEXT, *text_pooled);
    return head.forward(b, fusion.forward(b, feats));
}

}  // namespace unicon
