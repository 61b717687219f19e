#pragma once

// Differentiable operations over Graph tensors. Every op registers a node
// whose backward closure scatters the incoming gradient into the parents
// that require one. Gradient correctness for each op is covered by the
// finite-difference suite in tests/.

#include <cmath>
#include <span>
#include <vector>

#include "coved/tensor.hpp"

namespace coved {

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

inline bool wants(const NodePtr& p) { return p->requires_grad; }

}  // namespace detail

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    return g.make_node(a.shape(), std::move(out), {a.node(), b.node()},
                       [](detail::TensorNode& n) {
                           for (auto& p : n.parents) {
                               if (!detail::wants(p)) continue;
                               p->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   p->grad[i] += n.grad[i];
                           }
                       });
}

inline Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    return g.make_node(a.shape(), std::move(out), {a.node(), b.node()},
                       [](detail::TensorNode& n) {
                           auto& pa = n.parents[0];
                           auto& pb = n.parents[1];
                           if (detail::wants(pa)) {
                               pa->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pa->grad[i] += n.grad[i];
                           }
                           if (detail::wants(pb)) {
                               pb->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pb->grad[i] -= n.grad[i];
                           }
                       });
}

// elementwise product
inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    return g.make_node(a.shape(), std::move(out), {a.node(), b.node()},
                       [](detail::TensorNode& n) {
                           auto& pa = n.parents[0];
                           auto& pb = n.parents[1];
                           if (detail::wants(pa)) {
                               pa->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pa->grad[i] += n.grad[i] * pb->data[i];
                           }
                           if (detail::wants(pb)) {
                               pb->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pb->grad[i] += n.grad[i] * pa->data[i];
                           }
                       });
}

inline Tensor scale(Graph& g, const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
    return g.make_node(a.shape(), std::move(out), {a.node()}, [s](detail::TensorNode& n) {
        auto& pa = n.parents[0];
        if (!detail::wants(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * s;
    });
}

// Matrix product with 1-D promotion: a vector on the left acts as a row,
// on the right as a column, and the singleton axis is squeezed from the result.
inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    const bool a_vec = a.shape().size() == 1;
    const bool b_vec = b.shape().size() == 1;
    if (a.shape().size() > 2 || b.shape().size() > 2)
        throw DimensionError("matmul: operands must be 1-D or 2-D, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const std::size_t m = a_vec ? 1 : a.shape()[0];
    const std::size_t k = a_vec ? a.shape()[0] : a.shape()[1];
    const std::size_t k2 = b.shape()[0];
    const std::size_t n = b_vec ? 1 : b.shape()[1];
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));

    std::vector<double> out(m * n, 0.0);
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double av = ad[i * k + l];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * bd[l * n + j];
        }

    Shape out_shape;
    if (a_vec && b_vec) out_shape = {1};
    else if (a_vec) out_shape = {n};
    else if (b_vec) out_shape = {m};
    else out_shape = {m, n};

    return g.make_node(out_shape, std::move(out), {a.node(), b.node()},
                       [m, k, n](detail::TensorNode& nd) {
                           auto& pa = nd.parents[0];
                           auto& pb = nd.parents[1];
                           if (detail::wants(pa)) {
                               pa->ensure_grad();
                               // dA = G · B^T
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const double gv = nd.grad[i * n + j];
                                       if (gv == 0.0) continue;
                                       for (std::size_t l = 0; l < k; ++l)
                                           pa->grad[i * k + l] += gv * pb->data[l * n + j];
                                   }
                           }
                           if (detail::wants(pb)) {
                               pb->ensure_grad();
                               // dB = A^T · G
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t l = 0; l < k; ++l) {
                                       const double av = pa->data[i * k + l];
                                       if (av == 0.0) continue;
                                       for (std::size_t j = 0; j < n; ++j)
                                           pb->grad[l * n + j] += av * nd.grad[i * n + j];
                                   }
                           }
                       });
}

// 1-D concatenation
inline Tensor concat(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 1 || b.shape().size() != 1)
        throw DimensionError("concat: expects 1-D tensors");
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t na = a.size();
    return g.make_node({a.size() + b.size()}, std::move(out), {a.node(), b.node()},
                       [na](detail::TensorNode& n) {
                           auto& pa = n.parents[0];
                           auto& pb = n.parents[1];
                           if (detail::wants(pa)) {
                               pa->ensure_grad();
                               for (std::size_t i = 0; i < na; ++i) pa->grad[i] += n.grad[i];
                           }
                           if (detail::wants(pb)) {
                               pb->ensure_grad();
                               for (std::size_t i = na; i < n.grad.size(); ++i)
                                   pb->grad[i - na] += n.grad[i];
                           }
                       });
}

inline Tensor sum(Graph& g, const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return g.make_node({1}, {s}, {a.node()}, [](detail::TensorNode& n) {
        auto& pa = n.parents[0];
        if (!detail::wants(pa)) return;
        pa->ensure_grad();
        for (double& gv : pa->grad) gv += n.grad[0];
    });
}

inline Tensor mean(Graph& g, const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    return g.make_node({1}, {s * inv}, {a.node()}, [inv](detail::TensorNode& n) {
        auto& pa = n.parents[0];
        if (!detail::wants(pa)) return;
        pa->ensure_grad();
        for (double& gv : pa->grad) gv += n.grad[0] * inv;
    });
}

inline Tensor tanh(Graph& g, const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.at(i));
    return g.make_node(a.shape(), std::move(out), {a.node()}, [](detail::TensorNode& n) {
        auto& pa = n.parents[0];
        if (!detail::wants(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa->grad[i] += n.grad[i] * (1.0 - n.data[i] * n.data[i]);
    });
}

inline Tensor sigmoid(Graph& g, const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.at(i);
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return g.make_node(a.shape(), std::move(out), {a.node()}, [](detail::TensorNode& n) {
        auto& pa = n.parents[0];
        if (!detail::wants(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa->grad[i] += n.grad[i] * n.data[i] * (1.0 - n.data[i]);
    });
}

inline Tensor exp(Graph& g, const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.at(i));
    return g.make_node(a.shape(), std::move(out), {a.node()}, [](detail::TensorNode& n) {
        auto& pa = n.parents[0];
        if (!detail::wants(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * n.data[i];
    });
}

// clamp to [lo, hi]; gradient passes where lo <= x <= hi
inline Tensor clamp(Graph& g, const Tensor& a, double lo, double hi) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::min(hi, std::max(lo, a.at(i)));
    return g.make_node(a.shape(), std::move(out), {a.node()}, [lo, hi](detail::TensorNode& n) {
        auto& pa = n.parents[0];
        if (!detail::wants(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double x = pa->data[i];
            if (x >= lo && x <= hi) pa->grad[i] += n.grad[i];
        }
    });
}

// elementwise max(x, floor); gradient passes where x >= floor, is zero
// through clamped entries
inline Tensor clamp_min(Graph& g, const Tensor& a, double floor) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(floor, a.at(i));
    return g.make_node(a.shape(), std::move(out), {a.node()}, [floor](detail::TensorNode& n) {
        auto& pa = n.parents[0];
        if (!detail::wants(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (pa->data[i] >= floor) pa->grad[i] += n.grad[i];
    });
}

namespace detail {

inline double log_sum_exp(std::span<const double> x) {
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

}  // namespace detail

// -log softmax(logits)[target], computed with max-shift.
// Gradient wrt logits is softmax(logits) - onehot(target).
inline Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, int target) {
    if (logits.shape().size() != 1)
        throw DimensionError("softmax_cross_entropy: logits must be 1-D");
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
        throw DimensionError("softmax_cross_entropy: target " + std::to_string(target) +
                             " out of range for " + std::to_string(logits.size()) + " classes");
    const double lse = detail::log_sum_exp(logits.data());
    const double loss = lse - logits.at(static_cast<std::size_t>(target));
    return g.make_node({1}, {loss}, {logits.node()}, [lse, target](detail::TensorNode& n) {
        auto& pa = n.parents[0];
        if (!detail::wants(pa)) return;
        pa->ensure_grad();
        const double go = n.grad[0];
        for (std::size_t i = 0; i < pa->data.size(); ++i) {
            double p = std::exp(pa->data[i] - lse);
            if (i == static_cast<std::size_t>(target)) p -= 1.0;
            pa->grad[i] += go * p;
        }
    });
}

// Sum of cross-entropies of several targets against one shared logits vector
// (the bag-of-words case). Equals n*logsumexp - sum(logits[target_i]).
inline Tensor softmax_cross_entropy_multi(Graph& g, const Tensor& logits,
                                          std::span<const int> targets) {
    if (logits.shape().size() != 1)
        throw DimensionError("softmax_cross_entropy_multi: logits must be 1-D");
    if (targets.empty()) return g.zeros({1});
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= logits.size())
            throw DimensionError("softmax_cross_entropy_multi: target " + std::to_string(t) +
                                 " out of range");
    const double lse = detail::log_sum_exp(logits.data());
    double loss = static_cast<double>(targets.size()) * lse;
    for (int t : targets) loss -= logits.at(static_cast<std::size_t>(t));
    std::vector<int> ids(targets.begin(), targets.end());
    return g.make_node({1}, {loss}, {logits.node()},
                       [lse, ids = std::move(ids)](detail::TensorNode& n) {
                           auto& pa = n.parents[0];
                           if (!detail::wants(pa)) return;
                           pa->ensure_grad();
                           const double go = n.grad[0];
                           const double cnt = static_cast<double>(ids.size());
                           for (std::size_t i = 0; i < pa->data.size(); ++i)
                               pa->grad[i] += go * cnt * std::exp(pa->data[i] - lse);
                           for (int t : ids) pa->grad[static_cast<std::size_t>(t)] -= go;
                       });
}

// Diagonal Gaussian given by mean and log-variance vectors.
struct GaussianParams {
    Tensor mean;
    Tensor logvar;

    std::size_t dim() const { return mean.size(); }
};

// mu + exp(logvar/2) * noise, differentiable wrt mu and logvar
inline Tensor reparameterize(Graph& g, const GaussianParams& q, const Tensor& noise) {
    detail::check_same_shape(q.mean, q.logvar, "reparameterize");
    detail::check_same_shape(q.mean, noise, "reparameterize");
    std::vector<double> out(q.mean.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = q.mean.at(i) + std::exp(0.5 * q.logvar.at(i)) * noise.at(i);
    return g.make_node(q.mean.shape(), std::move(out),
                       {q.mean.node(), q.logvar.node(), noise.node()},
                       [](detail::TensorNode& n) {
                           auto& pm = n.parents[0];
                           auto& pl = n.parents[1];
                           auto& pn = n.parents[2];
                           if (detail::wants(pm)) {
                               pm->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pm->grad[i] += n.grad[i];
                           }
                           if (detail::wants(pl)) {
                               pl->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i) {
                                   const double sigma_n = n.data[i] - pm->data[i];
                                   pl->grad[i] += n.grad[i] * 0.5 * sigma_n;
                               }
                           }
                           if (detail::wants(pn)) {
                               pn->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pn->grad[i] += n.grad[i] * std::exp(0.5 * pl->data[i]);
                           }
                       });
}

// Per-dimension KL(q || p) between diagonal Gaussians:
//   kl_d = (logvar_p - logvar_q + (var_q + (mu_q - mu_p)^2) / var_p - 1) / 2
inline Tensor gaussian_kl(Graph& g, const GaussianParams& q, const GaussianParams& p) {
    detail::check_same_shape(q.mean, q.logvar, "gaussian_kl");
    detail::check_same_shape(p.mean, p.logvar, "gaussian_kl");
    detail::check_same_shape(q.mean, p.mean, "gaussian_kl");
    const std::size_t d = q.dim();
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double dm = q.mean.at(i) - p.mean.at(i);
        const double ratio = std::exp(q.logvar.at(i) - p.logvar.at(i));
        out[i] = 0.5 * (p.logvar.at(i) - q.logvar.at(i) +
                        ratio + dm * dm * std::exp(-p.logvar.at(i)) - 1.0);
    }
    return g.make_node(
        q.mean.shape(), std::move(out),
        {q.mean.node(), q.logvar.node(), p.mean.node(), p.logvar.node()},
        [](detail::TensorNode& n) {
            auto& mq = n.parents[0];
            auto& lq = n.parents[1];
            auto& mp = n.parents[2];
            auto& lp = n.parents[3];
            for (auto& pp : n.parents)
                if (detail::wants(pp)) pp->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                const double go = n.grad[i];
                if (go == 0.0) continue;
                const double dm = mq->data[i] - mp->data[i];
                const double inv_vp = std::exp(-lp->data[i]);
                const double ratio = std::exp(lq->data[i] - lp->data[i]);
                if (detail::wants(mq)) mq->grad[i] += go * dm * inv_vp;
                if (detail::wants(mp)) mp->grad[i] -= go * dm * inv_vp;
                if (detail::wants(lq)) lq->grad[i] += go * 0.5 * (ratio - 1.0);
                if (detail::wants(lp))
                    lp->grad[i] += go * 0.5 * (1.0 - ratio - dm * dm * inv_vp);
            }
        });
}

// Row gather from an embedding parameter. Backward scatters into the
// parameter's gradient directly, so the full table never enters the graph.
inline Tensor embedding_row(Graph& g, const ParamPtr& table, int id, bool trainable) {
    if (table->shape().size() != 2)
        throw DimensionError("embedding_row: table must be 2-D");
    const std::size_t v = table->shape()[0];
    const std::size_t d = table->shape()[1];
    if (id < 0 || static_cast<std::size_t>(id) >= v)
        throw DimensionError("embedding_row: id " + std::to_string(id) + " out of range for " +
                             table->name());
    std::vector<double> out(table->value.begin() + id * d,
                            table->value.begin() + (id + 1) * d);
    if (!trainable) return g.input({d}, std::move(out));
    ParamPtr captured = table;
    return g.make_node(
        {d}, std::move(out), {},
        [captured, id, d](detail::TensorNode& n) {
            for (std::size_t i = 0; i < d; ++i)
                captured->grad[static_cast<std::size_t>(id) * d + i] += n.grad[i];
        },
        /*force_grad=*/true);
}

// y = x W + b with W of shape [in, out].
struct LinearParams {
    ParamPtr w, b;
};

inline LinearParams make_linear(ParameterStore& store, const std::string& prefix,
                                std::size_t in, std::size_t out, Rng& rng) {
    LinearParams p;
    p.w = store.create_uniform(prefix + ".w", {in, out}, rng);
    p.b = store.create(prefix + ".b", {out});
    return p;
}

struct LinearRef {
    Tensor w, b;
};

inline LinearRef use_linear(Graph& g, const LinearParams& p, bool trainable) {
    return {g.use(p.w, trainable), g.use(p.b, trainable)};
}

inline Tensor apply_linear(Graph& g, const LinearRef& l, const Tensor& x) {
    return add(g, matmul(g, x, l.w), l.b);
}

// Parameters of one GRU: reset/update/candidate input and recurrent weights.
struct GruParams {
    ParamPtr w_reset, u_reset, b_reset;
    ParamPtr w_update, u_update, b_update;
    ParamPtr w_cand, u_cand, b_cand;

    std::size_t input_dim() const { return w_reset->shape()[0]; }
    std::size_t hidden_dim() const { return w_reset->shape()[1]; }
};

inline GruParams make_gru_params(ParameterStore& store, const std::string& prefix,
                                 std::size_t in, std::size_t hidden, Rng& rng) {
    GruParams p;
    p.w_reset = store.create_uniform(prefix + ".w_reset", {in, hidden}, rng);
    p.u_reset = store.create_uniform(prefix + ".u_reset", {hidden, hidden}, rng);
    p.b_reset = store.create(prefix + ".b_reset", {hidden});
    p.w_update = store.create_uniform(prefix + ".w_update", {in, hidden}, rng);
    p.u_update = store.create_uniform(prefix + ".u_update", {hidden, hidden}, rng);
    p.b_update = store.create(prefix + ".b_update", {hidden});
    p.w_cand = store.create_uniform(prefix + ".w_cand", {in, hidden}, rng);
    p.u_cand = store.create_uniform(prefix + ".u_cand", {hidden, hidden}, rng);
    p.b_cand = store.create(prefix + ".b_cand", {hidden});
    return p;
}

// Weight tensors of one GRU bound into a graph.
struct GruRef {
    Tensor w_reset, u_reset, b_reset;
    Tensor w_update, u_update, b_update;
    Tensor w_cand, u_cand, b_cand;
};

inline GruRef use_gru(Graph& g, const GruParams& p, bool trainable) {
    GruRef r;
    r.w_reset = g.use(p.w_reset, trainable);
    r.u_reset = g.use(p.u_reset, trainable);
    r.b_reset = g.use(p.b_reset, trainable);
    r.w_update = g.use(p.w_update, trainable);
    r.u_update = g.use(p.u_update, trainable);
    r.b_update = g.use(p.b_update, trainable);
    r.w_cand = g.use(p.w_cand, trainable);
    r.u_cand = g.use(p.u_cand, trainable);
    r.b_cand = g.use(p.b_cand, trainable);
    return r;
}

inline void collect_params(const LinearParams& p, std::vector<ParamPtr>& out) {
    out.push_back(p.w);
    out.push_back(p.b);
}

inline void collect_params(const GruParams& p, std::vector<ParamPtr>& out) {
    out.insert(out.end(), {p.w_reset, p.u_reset, p.b_reset, p.w_update, p.u_update, p.b_update,
                           p.w_cand, p.u_cand, p.b_cand});
}

// Standard update/reset-gate GRU step. The reset gate is applied to the
// hidden state before the candidate projection:
//   r = sigmoid(x W_r + h U_r + b_r)
//   u = sigmoid(x W_u + h U_u + b_u)
//   n = tanh(x W_c + (r*h) U_c + b_c)
//   h' = (1-u)*h + u*n
inline Tensor gru_cell(Graph& g, const GruRef& w, const Tensor& x, const Tensor& h) {
    Tensor r = sigmoid(g, add(g, add(g, matmul(g, x, w.w_reset), matmul(g, h, w.u_reset)),
                              w.b_reset));
    Tensor u = sigmoid(g, add(g, add(g, matmul(g, x, w.w_update), matmul(g, h, w.u_update)),
                              w.b_update));
    Tensor rh = mul(g, r, h);
    Tensor n = tanh(g, add(g, add(g, matmul(g, x, w.w_cand), matmul(g, rh, w.u_cand)),
                           w.b_cand));
    // h + u*(n - h)
    return add(g, h, mul(g, u, sub(g, n, h)));
}

}  // namespace coved
