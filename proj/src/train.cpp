#include "kvcore/train.hpp"

#include "kvcore/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace kvcore {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kGeluScale = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

struct NormCache {
    DenseMatrix xhat;
    std::vector<double> inv;
};

DenseMatrix norm_forward(const DenseMatrix& h, const std::vector<double>& gain, NormCache& cache) {
    const auto n = static_cast<double>(h.cols());
    cache.xhat = DenseMatrix(h.rows(), h.cols());
    cache.inv.assign(h.rows(), 0.0);
    DenseMatrix out(h.rows(), h.cols());
    for (std::size_t t = 0; t < h.rows(); ++t) {
        const auto row = h.row(t);
        double mean = 0.0;
        for (double x : row) mean += x;
        mean /= n;
        double var = 0.0;
        for (double x : row) var += (x - mean) * (x - mean);
        var /= n;
        cache.inv[t] = 1.0 / std::sqrt(var + kNormEps);
        for (std::size_t c = 0; c < h.cols(); ++c) {
            cache.xhat(t, c) = (row[c] - mean) * cache.inv[t];
            out(t, c) = cache.xhat(t, c) * gain[c];
        }
    }
    return out;
}

// Accumulates the gain gradient and returns d/dh.
DenseMatrix norm_backward(const DenseMatrix& dy, const std::vector<double>& gain, const NormCache& cache,
                          std::vector<double>& dgain) {
    const auto n = static_cast<double>(dy.cols());
    DenseMatrix dh(dy.rows(), dy.cols());
    std::vector<double> dxhat(dy.cols());
    for (std::size_t t = 0; t < dy.rows(); ++t) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < dy.cols(); ++c) {
            dgain[c] += dy(t, c) * cache.xhat(t, c);
            dxhat[c] = dy(t, c) * gain[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * cache.xhat(t, c);
        }
        m1 /= n;
        m2 /= n;
        for (std::size_t c = 0; c < dy.cols(); ++c) dh(t, c) = cache.inv[t] * (dxhat[c] - m1 - cache.xhat(t, c) * m2);
    }
    return dh;
}

void add_into(DenseMatrix& acc, const DenseMatrix& x) {
    auto a = acc.data();
    auto b = x.data();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

struct LayerCache {
    DenseMatrix h_in;
    NormCache attn_norm;
    DenseMatrix x, q, k, v;
    std::vector<DenseMatrix> probs;  // per head, T × T (lower triangle used)
    DenseMatrix attn_out;
    NormCache mlp_norm;
    DenseMatrix y, pre, act;
};

std::vector<std::span<double>> tensors(ModelWeights& w) {
    std::vector<std::span<double>> out{w.embedding.data()};
    for (auto& l : w.layers) {
        out.insert(out.end(), {std::span<double>(l.attn_norm), l.wq.data(), l.wk.data(), l.wv.data(), l.wo.data(),
                               std::span<double>(l.mlp_norm), l.w_in.data(), l.w_out.data()});
    }
    out.emplace_back(w.final_norm);
    return out;
}

// Forward and backward for one sequence; gradients are added into `grad`
// with the per-position weight `scale`. Returns the summed NLL.
double sequence_pass(const ModelConfig& cfg, const ModelWeights& w, std::span<const std::uint32_t> tokens,
                     double scale, ModelWeights* grad) {
    const std::size_t t_len = tokens.size();
    const std::size_t dh = cfg.d_h;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    DenseMatrix h(t_len, cfg.d_e);
    for (std::size_t t = 0; t < t_len; ++t) {
        if (tokens[t] >= cfg.vocab) throw ArgumentError("train: token id " + std::to_string(tokens[t]) + " outside vocab");
        std::copy_n(w.embedding.row(tokens[t]).begin(), cfg.d_e, h.row(t).begin());
    }

    std::vector<LayerCache> caches(cfg.n_layers);
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[l];
        auto& c = caches[l];
        c.h_in = h;
        c.x = norm_forward(h, lw.attn_norm, c.attn_norm);
        c.q = matmul(c.x, lw.wq);
        c.k = matmul(c.x, lw.wk);
        c.v = matmul(c.x, lw.wv);
        c.attn_out = DenseMatrix(t_len, cfg.query_width());
        c.probs.assign(cfg.m_h, DenseMatrix(t_len, t_len));
        for (std::size_t head = 0; head < cfg.m_h; ++head) {
            const std::size_t qo = head * dh;
            const std::size_t ko = (group_map(head + 1, cfg.m_h, cfg.m_g) - 1) * dh;
            auto& p = c.probs[head];
            for (std::size_t t = 0; t < t_len; ++t) {
                double top = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= t; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += c.q(t, qo + e) * c.k(j, ko + e);
                    p(t, j) = s * att_scale;
                    top = std::max(top, p(t, j));
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= t; ++j) z += (p(t, j) = std::exp(p(t, j) - top));
                for (std::size_t j = 0; j <= t; ++j) {
                    p(t, j) /= z;
                    for (std::size_t e = 0; e < dh; ++e) c.attn_out(t, qo + e) += p(t, j) * c.v(j, ko + e);
                }
            }
        }
        h = h + matmul(c.attn_out, lw.wo);
        c.y = norm_forward(h, lw.mlp_norm, c.mlp_norm);
        c.pre = matmul(c.y, lw.w_in);
        c.act = c.pre;
        for (double& z : c.act.data()) z = 0.5 * z * (1.0 + std::tanh(kGeluScale * (z + kGeluCubic * z * z * z)));
        h = h + matmul(c.act, lw.w_out);
    }
    NormCache final_cache;
    const auto f = norm_forward(h, w.final_norm, final_cache);
    auto logits = matmul_nt(f, w.embedding);

    double nll = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
        auto row = logits.row(t);
        if (t + 1 == t_len) {
            std::fill(row.begin(), row.end(), 0.0);
            continue;
        }
        const double top = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double x : row) z += std::exp(x - top);
        const auto target = tokens[t + 1];
        nll += std::log(z) + top - row[target];
        // row becomes d(loss)/d(logits)
        for (double& x : row) x = scale * std::exp(x - top) / z;
        row[target] -= scale;
    }
    if (grad == nullptr) return nll;

    auto& g = *grad;
    const auto& dlogits = logits;
    add_into(g.embedding, matmul_tn(dlogits, f));
    auto dh_acc = norm_backward(matmul(dlogits, w.embedding), w.final_norm, final_cache, g.final_norm);

    for (std::uint32_t li = cfg.n_layers; li-- > 0;) {
        const auto& lw = w.layers[li];
        auto& gl = g.layers[li];
        const auto& c = caches[li];

        // MLP block
        add_into(gl.w_out, matmul_tn(c.act, dh_acc));
        auto dpre = matmul_nt(dh_acc, lw.w_out);
        {
            auto d = dpre.data();
            auto z = c.pre.data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                const double x = z[i];
                const double th = std::tanh(kGeluScale * (x + kGeluCubic * x * x * x));
                const double deriv =
                    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
                d[i] *= deriv;
            }
        }
        add_into(gl.w_in, matmul_tn(c.y, dpre));
        add_into(dh_acc, norm_backward(matmul_nt(dpre, lw.w_in), lw.mlp_norm, c.mlp_norm, gl.mlp_norm));

        // attention block
        add_into(gl.wo, matmul_tn(c.attn_out, dh_acc));
        const auto dout = matmul_nt(dh_acc, lw.wo);
        DenseMatrix dq(t_len, cfg.query_width());
        DenseMatrix dk(t_len, cfg.kv_width());
        DenseMatrix dv(t_len, cfg.kv_width());
        std::vector<double> dp(t_len);
        for (std::size_t head = 0; head < cfg.m_h; ++head) {
            const std::size_t qo = head * dh;
            const std::size_t ko = (group_map(head + 1, cfg.m_h, cfg.m_g) - 1) * dh;
            const auto& p = c.probs[head];
            for (std::size_t t = 0; t < t_len; ++t) {
                double dot = 0.0;
                for (std::size_t j = 0; j <= t; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        s += dout(t, qo + e) * c.v(j, ko + e);
                        dv(j, ko + e) += p(t, j) * dout(t, qo + e);
                    }
                    dp[j] = s;
                    dot += s * p(t, j);
                }
                for (std::size_t j = 0; j <= t; ++j) {
                    const double ds = p(t, j) * (dp[j] - dot) * att_scale;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dq(t, qo + e) += ds * c.k(j, ko + e);
                        dk(j, ko + e) += ds * c.q(t, qo + e);
                    }
                }
            }
        }
        add_into(gl.wq, matmul_tn(c.x, dq));
        add_into(gl.wk, matmul_tn(c.x, dk));
        add_into(gl.wv, matmul_tn(c.x, dv));
        auto dx = matmul_nt(dq, lw.wq);
        add_into(dx, matmul_nt(dk, lw.wk));
        add_into(dx, matmul_nt(dv, lw.wv));
        add_into(dh_acc, norm_backward(dx, lw.attn_norm, c.attn_norm, gl.attn_norm));
    }
    for (std::size_t t = 0; t < t_len; ++t) {
        auto dst = g.embedding.row(tokens[t]);
        const auto src = dh_acc.row(t);
        for (std::size_t e = 0; e < cfg.d_e; ++e) dst[e] += src[e];
    }
    return nll;
}

} // namespace

ModelWeights zeros_like(const ModelWeights& w) {
    ModelWeights z = w;
    for (auto s : tensors(z)) std::fill(s.begin(), s.end(), 0.0);
    return z;
}

double loss_and_gradient(const ModelConfig& cfg, const ModelWeights& weights, const Corpus& batch,
                         ModelWeights* grad) {
    std::size_t positions = 0;
    for (const auto& s : batch) positions += s.size() > 1 ? s.size() - 1 : 0;
    if (positions == 0) throw ArgumentError("train: batch has no position with a successor");
    if (grad != nullptr) *grad = zeros_like(weights);
    const double scale = 1.0 / static_cast<double>(positions);
    double nll = 0.0;
    for (const auto& s : batch)
        if (s.size() > 1) nll += sequence_pass(cfg, weights, s, scale, grad);
    return nll * scale;
}

std::vector<double> train(const ModelConfig& cfg, ModelWeights& weights, const Corpus& corpus, const TrainSpec& spec) {
    cfg.validate();
    if (spec.batch == 0) throw ArgumentError("train: batch must be >= 1");
    if (!(spec.learning_rate > 0.0)) throw ArgumentError("train: learning rate must be > 0");
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < corpus.size(); ++i)
        if (corpus[i].size() > 1) usable.push_back(i);
    if (spec.steps > 0 && usable.empty()) throw ArgumentError("train: corpus has no sequence longer than one token");

    std::mt19937_64 rng(spec.seed);
    auto m = zeros_like(weights);
    auto v = zeros_like(weights);
    ModelWeights grad;
    auto params = tensors(weights);
    auto ms = tensors(m);
    auto vs = tensors(v);
    std::vector<double> losses;
    for (std::uint32_t step = 1; step <= spec.steps; ++step) {
        Corpus batch;
        for (std::uint32_t b = 0; b < spec.batch; ++b) batch.push_back(corpus[usable[rng() % usable.size()]]);
        const double loss = loss_and_gradient(cfg, weights, batch, &grad);
        if (!std::isfinite(loss)) throw NumericalError("train: non-finite loss at step " + std::to_string(step));
        losses.push_back(loss);
        const auto gs = tensors(grad);
        const double c1 = 1.0 - std::pow(spec.beta1, step);
        const double c2 = 1.0 - std::pow(spec.beta2, step);
        for (std::size_t i = 0; i < params.size(); ++i) {
            for (std::size_t j = 0; j < params[i].size(); ++j) {
                const double gj = gs[i][j];
                ms[i][j] = spec.beta1 * ms[i][j] + (1.0 - spec.beta1) * gj;
                vs[i][j] = spec.beta2 * vs[i][j] + (1.0 - spec.beta2) * gj * gj;
                params[i][j] -= spec.learning_rate * (ms[i][j] / c1) / (std::sqrt(vs[i][j] / c2) + spec.epsilon);
            }
        }
    }
    for (auto s : params)
        for (double& x : s) x = static_cast<double>(static_cast<float>(x));
    return losses;
}

} // namespace kvcore
