#include "unicon/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "unicon/adapters.hpp"
#include "unicon/errors.hpp"
#include "unicon/heads.hpp"
#include "unicon/rng.hpp"

namespace unicon {

double param_grad_check(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params, double h) {
    std::map<const Parameter*, Tensor> analytic;
    {
        Tape t;
        Var out = loss(t);
        if (out.value().numel() != 1) throw ContractError("param_grad_check: loss is not scalar-valued");
        t.backward(out);
        for (auto& [p, g] : t.param_grads()) analytic.emplace(p, std::move(g));
    }
    const auto eval = [&] {
        Tape t;
        return loss(t).value().item();
    };
    double worst = 0.0;
    for (Parameter* p : params) {
        const auto it = analytic.find(p);
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            const double x = p->value[i];
            p->value[i] = x + h;
            const double fp = eval();
            p->value[i] = x - h;
            const double fm = eval();
            p->value[i] = x;
            const double fd = (fp - fm) / (2.0 * h);
            const double a = it == analytic.end() ? 0.0 : it->second[i];
            worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8}));
        }
    }
    return worst;
}

namespace {

using Family = std::function<double(Rng&)>;

Tensor randn(Rng& rng, const Shape& s, double scale = 1.0) { return rng.normal_tensor(s, scale); }

Tensor positive(Rng& rng, const Shape& s) {
    Tensor t(s);
    for (auto& v : t.data()) v = 0.5 + std::abs(rng.normal());
    return t;
}

// <y, W> with a fixed random W, so every output entry reaches the scalar.
Var project(Tape& t, Var y, const Tensor& w) { return ops::sum(ops::mul(y, t.constant(w))); }

// Checks f(x) -> y through a random projection.
double check_unary(Rng& rng, const Shape& in, const Shape& out, const std::function<Var(Tape&, Var)>& f,
                   std::optional<Tensor> x = std::nullopt) {
    const Tensor w = randn(rng, out);
    const Tensor at = x ? *x : randn(rng, in);
    return grad_check([&](Tape& t, Var v) { return project(t, f(t, v), w); }, at);
}

// Checks both operands of a binary op.
double check_binary(Rng& rng, const Tensor& a, const Tensor& b, const Shape& out,
                    const std::function<Var(Var, Var)>& f) {
    const Tensor w = randn(rng, out);
    const double ea = grad_check([&](Tape& t, Var v) { return project(t, f(v, t.constant(b)), w); }, a);
    const double eb = grad_check([&](Tape& t, Var v) { return project(t, f(t.constant(a), v), w); }, b);
    return std::max(ea, eb);
}

std::vector<SurvivalRecord> random_records(Rng& rng, std::size_t n, std::size_t K) {
    std::vector<SurvivalRecord> recs;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t bin = rng.index(K);
        recs.push_back({static_cast<double>(bin) + rng.uniform(0.01, 0.99), rng.bernoulli(0.6), bin});
    }
    return recs;
}

FrozenFoundation tiny_model(std::uint64_t seed) {
    VisionEncoderConfig v;
    v.volume_shape = {8, 8, 8};
    v.patch_size = 4;
    v.embed_dim = 8;
    v.layers = 1;
    v.heads = 2;
    v.proj_dim = 4;
    TextEncoderConfig t;
    t.embed_dim = 8;
    t.layers = 1;
    t.heads = 2;
    t.proj_dim = 4;
    t.max_tokens = 8;
    FrozenFoundation m(v, t, seed);
    m.freeze();
    return m;
}

const std::map<std::string, Family>& families() {
    static const std::map<std::string, Family> f = {
        {"matmul", [](Rng& r) { return check_binary(r, randn(r, {3, 4}), randn(r, {4, 5}), {3, 5}, ops::matmul); }},
        {"add_sub", [](Rng& r) {
             const Tensor a = randn(r, {3, 4}), b = randn(r, {3, 4});
             return std::max(check_binary(r, a, b, {3, 4}, ops::add), check_binary(r, a, b, {3, 4}, ops::sub));
         }},
        {"mul_div", [](Rng& r) {
             const Tensor a = randn(r, {3, 4}), b = positive(r, {3, 4});
             return std::max(check_binary(r, a, b, {3, 4}, ops::mul), check_binary(r, a, b, {3, 4}, ops::div));
         }},
        {"row_broadcast", [](Rng& r) {
             const Tensor a = randn(r, {3, 4}), row = randn(r, {4});
             return std::max(check_binary(r, a, row, {3, 4}, ops::add_row), check_binary(r, a, row, {3, 4}, ops::mul_row));
         }},
        {"scale_shift", [](Rng& r) {
             const double c = r.normal();
             return check_unary(r, {3, 4}, {3, 4},
                                [c](Tape&, Var x) { return ops::neg(ops::add_scalar(ops::scale(x, c), 0.3)); });
         }},
        {"exp_log", [](Rng& r) {
             const double e = check_unary(r, {3, 4}, {3, 4}, [](Tape&, Var x) { return ops::exp(x); }, randn(r, {3, 4}, 0.5));
             const double l = check_unary(r, {3, 4}, {3, 4}, [](Tape&, Var x) { return ops::log(x); }, positive(r, {3, 4}));
             return std::max(e, l);
         }},
        {"gelu", [](Rng& r) { return check_unary(r, {3, 4}, {3, 4}, [](Tape&, Var x) { return ops::gelu(x); }); }},
        {"sigmoid", [](Rng& r) { return check_unary(r, {3, 4}, {3, 4}, [](Tape&, Var x) { return ops::sigmoid(x); }); }},
        {"softplus", [](Rng& r) { return check_unary(r, {3, 4}, {3, 4}, [](Tape&, Var x) { return ops::softplus(x); }); }},
        {"reductions", [](Rng& r) {
             double e = check_unary(r, {3, 4}, {1}, [](Tape&, Var x) { return ops::sum(x); });
             e = std::max(e, check_unary(r, {3, 4}, {1}, [](Tape&, Var x) { return ops::mean(x); }));
             e = std::max(e, check_unary(r, {3, 4}, {3, 1}, [](Tape&, Var x) { return ops::sum_cols(x); }));
             return std::max(e, check_unary(r, {3, 4}, {1, 4}, [](Tape&, Var x) { return ops::mean_rows(x); }));
         }},
        {"reshape_transpose", [](Rng& r) {
             const double a = check_unary(r, {3, 4}, {2, 6}, [](Tape&, Var x) { return ops::reshape(x, {2, 6}); });
             return std::max(a, check_unary(r, {3, 4}, {4, 3}, [](Tape&, Var x) { return ops::transpose(x); }));
         }},
        {"concat_slice", [](Rng& r) {
             const Tensor other = randn(r, {3, 2});
             double e = check_unary(r, {3, 4}, {3, 10}, [&](Tape& t, Var x) { return ops::concat_cols({x, t.constant(other), x}); });
             const Tensor other_rows = randn(r, {2, 4});
             e = std::max(e, check_unary(r, {3, 4}, {5, 4}, [&](Tape& t, Var x) { return ops::concat_rows({t.constant(other_rows), x}); }));
             e = std::max(e, check_unary(r, {3, 4}, {3, 2}, [](Tape&, Var x) { return ops::slice_cols(x, 1, 2); }));
             return std::max(e, check_unary(r, {3, 4}, {2, 4}, [](Tape&, Var x) { return ops::slice_rows(x, 1, 2); }));
         }},
        {"embedding", [](Rng& r) {
             const std::vector<std::size_t> ids{3, 0, 3, 1};
             return check_unary(r, {5, 3}, {4, 3}, [&](Tape&, Var table) { return ops::embedding(table, ids); });
         }},
        {"gather", [](Rng& r) {
             std::vector<std::size_t> idx;
             for (int i = 0; i < 10; ++i) idx.push_back(r.index(12));
             return check_unary(r, {3, 4}, {2, 5}, [&](Tape&, Var x) { return ops::gather(x, idx, {2, 5}); });
         }},
        {"softmax", [](Rng& r) { return check_unary(r, {3, 5}, {3, 5}, [](Tape&, Var x) { return ops::softmax(x); }); }},
        {"logsumexp_masked", [](Rng& r) {
             std::vector<bool> mask(15);
             for (std::size_t i = 0; i < 15; ++i) mask[i] = i % 5 == 0 || r.bernoulli(0.6);
             return check_unary(r, {3, 5}, {3, 1}, [&](Tape&, Var x) { return ops::logsumexp_masked(x, mask); });
         }},
        {"layer_norm", [](Rng& r) {
             const Tensor x = randn(r, {3, 6}), g = positive(r, {6}), b = randn(r, {6});
             const Tensor w = randn(r, {3, 6});
             double e = grad_check([&](Tape& t, Var v) {
                 return project(t, ops::layer_norm(v, t.constant(g), t.constant(b), 1e-5), w);
             }, x);
             e = std::max(e, grad_check([&](Tape& t, Var v) {
                 return project(t, ops::layer_norm(t.constant(x), v, t.constant(b), 1e-5), w);
             }, g));
             return std::max(e, grad_check([&](Tape& t, Var v) {
                 return project(t, ops::layer_norm(t.constant(x), t.constant(g), v, 1e-5), w);
             }, b));
         }},
        {"l2_normalize", [](Rng& r) {
             return check_unary(r, {3, 4}, {3, 4}, [](Tape&, Var x) { return ops::l2_normalize_rows(x); });
         }},
        {"attention", [](Rng& r) {
             const Tensor q = randn(r, {4, 3}), k = randn(r, {5, 3}), v = randn(r, {5, 2});
             const Tensor w = randn(r, {4, 2});
             double e = grad_check([&](Tape& t, Var x) { return project(t, ops::attention(x, t.constant(k), t.constant(v)), w); }, q);
             e = std::max(e, grad_check([&](Tape& t, Var x) { return project(t, ops::attention(t.constant(q), x, t.constant(v)), w); }, k));
             return std::max(e, grad_check([&](Tape& t, Var x) { return project(t, ops::attention(t.constant(q), t.constant(k), x), w); }, v));
         }},
        {"lora_attention", [](Rng& r) {
             const FrozenFoundation model = tiny_model(r.next());
             Composition comp(RoutingKey{Task::Segmentation, {Modality::CT}});
             attach_lora(model, comp, "ct", qv_targets(model, "vision"), 2, 4.0, r);
             for (Parameter* p : comp.parameters()) p->value = randn(r, p->value.shape(), 0.3);
             const Tensor vol = randn(r, {8, 8, 8}, 0.5);
             const Tensor w = randn(r, {8, 8});
             const auto delta = comp.lora_delta("ct");
             return param_grad_check([&](Tape& t) {
                 Binder b(t, false, true);
                 return project(t, model.encode_image(b, vol, {delta, {}}).tokens, w);
             }, comp.parameters());
         }},
        {"fusion_head", [](Rng& r) {
             auto fusion = FusionAdapter::create({Modality::CT, Modality::TEXT}, 4, 3, 5, 6, {}, false, r);
             auto head = MlpAdapter::create(6, 5, 4, r);
             const Tensor img = randn(r, {3, 4}), txt = randn(r, {3, 4});
             const auto recs = random_records(r, 3, 4);
             std::vector<Parameter*> params;
             for (auto& p : fusion.projections) params.push_back(&p);
             for (MlpAdapter* m : {&fusion.mlp, &head}) {
                 for (Parameter* p : {&m->fc1_w, &m->fc1_b, &m->fc2_w, &m->fc2_b}) params.push_back(p);
             }
             return param_grad_check([&](Tape& t) {
                 Binder b(t, false, true);
                 Var out = prognosis_forward(b, t.constant(img), t.constant(txt), fusion, head);
                 return deephit_loss(out, recs, 0.5, 0.5).total;
             }, params);
         }},
        {"decoder_dice_ce", [](Rng& r) {
             auto dec = DecoderAdapter::create(4, 2, r);
             dec.bias.value = randn(r, dec.bias.value.shape(), 0.1);
             const Tensor tokens = randn(r, {8, 4});
             Tensor mask({4, 4, 4});
             for (auto& v : mask.data()) v = r.bernoulli(0.3) ? 1.0 : 0.0;
             return param_grad_check([&](Tape& t) {
                 Binder b(t, false, true);
                 return dice_ce_loss(dec.decode(b, t.constant(tokens), {4, 4, 4}), mask, 1.0, 1.0);
             }, {&dec.weight, &dec.bias});
         }},
        {"reembed", [](Rng& r) {
             const FrozenFoundation model = tiny_model(r.next());
             auto re = ResolutionReembed::from_base(model, {12, 8, 8}, 4, r);
             const Tensor vol = randn(r, {12, 8, 8}, 0.5);
             const Tensor w = randn(r, {re.num_tokens(), 8});
             return param_grad_check([&](Tape& t) {
                 Binder b(t, false, true);
                 return project(t, re.embed(b, vol), w);
             }, {&re.weight, &re.bias, &re.pos_embed});
         }},
        {"mtlr", [](Rng& r) {
             const std::size_t K = 2 + r.index(4);
             const std::size_t n = 1 + r.index(5);
             const auto recs = random_records(r, n, K);
             return grad_check([&](Tape&, Var x) { return mtlr_loss(x, recs); }, randn(r, {n, K - 1}));
         }},
        {"deephit", [](Rng& r) {
             const std::size_t K = 2 + r.index(4);
             const std::size_t n = 2 + r.index(4);
             const auto recs = random_records(r, n, K);
             const double sigma = r.uniform(0.1, 1.0), lambda = r.uniform(0.0, 1.0);
             return grad_check([&](Tape&, Var x) { return deephit_loss(x, recs, sigma, lambda).total; }, randn(r, {n, K}));
         }},
    };
    return f;
}

}  // namespace

std::vector<std::string> grad_check_families() {
    std::vector<std::string> out;
    for (const auto& [name, _] : families()) out.push_back(name);
    return out;
}

GradCheckResult run_grad_check(const std::string& family, std::size_t seeds, std::uint64_t master_seed) {
    const auto it = families().find(family);
    if (it == families().end()) throw LookupError("unknown gradient-check family '" + family + "'");
    GradCheckResult res{family, 0.0, seeds};
    const auto names = grad_check_families();
    const std::uint64_t fam = static_cast<std::uint64_t>(std::find(names.begin(), names.end(), family) - names.begin());
    for (std::size_t s = 0; s < seeds; ++s) {
        Rng rng(mix_seed(master_seed, fam), s);
        res.max_rel_error = std::max(res.max_rel_error, it->second(rng));
    }
    return res;
}

std::vector<GradCheckResult> run_grad_checks(std::size_t seeds, std::uint64_t master_seed) {
    std::vector<GradCheckResult> out;
    for (const auto& name : grad_check_families()) out.push_back(run_grad_check(name, seeds, master_seed));
    return out;
}

}  // namespace unicon
