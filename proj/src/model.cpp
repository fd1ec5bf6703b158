#include "gist/model.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>

namespace gist {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr double kNormEps = 1e-5;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapMat<T> cmat(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
    return CMapMat<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MapMat<T> mmat(std::vector<T>& v, std::size_t rows, std::size_t cols) {
    return MapMat<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
T silu(T x) {
    return x / (T(1) + std::exp(-x));
}

template <typename T>
T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

// Activations kept for the backward pass.
template <typename T>
struct LayerTrace {
    std::vector<T> x_in, inv_rms1, h1, q, k, v, probs, ctx, x_mid, inv_rms2, h2, u, s;
};

template <typename T>
struct Trace {
    std::vector<std::vector<std::uint32_t>> keys;  // per query
    std::vector<std::size_t> offsets;              // into per-head probs
    std::size_t total_keys = 0;
    std::vector<LayerTrace<T>> layers;
    std::vector<T> x_final, inv_rms_f, hf;
};

template <typename T>
void norm_rows(const std::vector<T>& x, const std::vector<T>& gain, std::size_t rows, std::size_t d,
               std::vector<T>& inv_rms, std::vector<T>& out) {
    inv_rms.resize(rows);
    out.resize(rows * d);
    for (std::size_t t = 0; t < rows; ++t) {
        const T* xr = x.data() + t * d;
        T ss = 0;
        for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
        const T r = T(1) / std::sqrt(ss / T(d) + T(kNormEps));
        inv_rms[t] = r;
        T* o = out.data() + t * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = xr[j] * r * gain[j];
    }
}

// dx += d/dx of (x * r(x) * g) given dy; dg += dy * x * r.
template <typename T>
void norm_backward(const std::vector<T>& x, const std::vector<T>& inv_rms, const std::vector<T>& gain,
                   const std::vector<T>& dy, std::size_t rows, std::size_t d, std::vector<T>& dx,
                   std::vector<T>& dgain) {
    for (std::size_t t = 0; t < rows; ++t) {
        const T* xr = x.data() + t * d;
        const T* dyr = dy.data() + t * d;
        T* dxr = dx.data() + t * d;
        const T r = inv_rms[t];
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) {
            dgain[j] += dyr[j] * xr[j] * r;
            dot += gain[j] * dyr[j] * xr[j];
        }
        const T c = r * r * r * dot / T(d);
        for (std::size_t j = 0; j < d; ++j) dxr[j] += r * gain[j] * dyr[j] - xr[j] * c;
    }
}

// Rotates row t by its position; inverse applies the transpose rotation.
template <typename T>
void rope_rows(std::vector<T>& m, std::size_t rows, const ModelConfig& c, bool inverse) {
    const std::size_t d = c.d_model;
    const std::uint32_t hd = c.head_dim();
    for (std::size_t t = 0; t < rows; ++t) {
        T* row = m.data() + t * d;
        if (!inverse) {
            apply_rope(std::span<T>(row, d), static_cast<std::uint32_t>(t), c.n_heads, c.rope_base);
            continue;
        }
        for (std::uint32_t i = 0; i < hd / 2; ++i) {
            const double theta = static_cast<double>(t) * std::pow(c.rope_base, -2.0 * i / hd);
            const T cs = static_cast<T>(std::cos(theta));
            const T sn = static_cast<T>(std::sin(theta));
            for (std::uint32_t h = 0; h < c.n_heads; ++h) {
                T* pr = row + h * hd + 2 * i;
                const T a = pr[0], b = pr[1];
                pr[0] = a * cs + b * sn;
                pr[1] = -a * sn + b * cs;
            }
        }
    }
}

template <typename T>
ForwardOutput<T> forward_impl(const ModelParams<T>& p, std::span<const TokenId> ids, const SentenceMask& m,
                              const ForwardOptions<T>& opts, Trace<T>* trace) {
    const ModelConfig& c = p.config;
    const std::size_t L = ids.size();
    const std::size_t d = c.d_model, V = c.vocab_size, ff = c.d_ff;
    const std::uint32_t hd = c.head_dim();
    if (L > c.max_seq_len)
        throw Error("sequence length " + std::to_string(L) + " exceeds max_seq_len " +
                    std::to_string(c.max_seq_len));
    if (m.size() != L) throw Error("mask size does not match sequence length");

    Trace<T> local;
    Trace<T>& tr = trace ? *trace : local;
    tr.keys.resize(L);
    tr.offsets.resize(L + 1);
    tr.offsets[0] = 0;
    for (std::size_t q = 0; q < L; ++q) {
        tr.keys[q] = m.keys_for(static_cast<std::uint32_t>(q));
        tr.offsets[q + 1] = tr.offsets[q] + tr.keys[q].size();
    }
    tr.total_keys = tr.offsets[L];

    std::vector<T> x(L * d);
    for (std::size_t t = 0; t < L; ++t) {
        if (ids[t] >= V) throw Error("token id " + std::to_string(ids[t]) + " outside the model vocab");
        std::copy_n(p.embedding.begin() + ids[t] * d, d, x.begin() + t * d);
        if (opts.embedding_delta)
            for (std::size_t j = 0; j < d; ++j) x[t * d + j] += (*opts.embedding_delta)[t * d + j];
        if (c.pos_encoding == PosEncoding::Learned)
            for (std::size_t j = 0; j < d; ++j) x[t * d + j] += p.pos_embedding[t * d + j];
    }

    ForwardOutput<T> out;
    out.length = static_cast<std::uint32_t>(L);
    out.vocab = static_cast<std::uint32_t>(V);
    tr.layers.resize(c.n_layers);

    std::vector<const T*> krows, vrows;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& P = p.layers[l];
        auto& lt = tr.layers[l];
        lt.x_in = x;
        norm_rows(x, P.attn_norm, L, d, lt.inv_rms1, lt.h1);
        lt.q.resize(L * d);
        lt.k.resize(L * d);
        lt.v.resize(L * d);
        linear_rows(lt.h1.data(), L, P.wq, d, d, lt.q.data());
        linear_rows(lt.h1.data(), L, P.wk, d, d, lt.k.data());
        linear_rows(lt.h1.data(), L, P.wv, d, d, lt.v.data());
        if (c.pos_encoding == PosEncoding::Rotary) {
            rope_rows(lt.q, L, c, false);
            rope_rows(lt.k, L, c, false);
        }
        if (opts.kv_override) {
            for (auto pos : opts.kv_override->positions) {
                if (pos >= L) throw Error("kv override position out of range");
                std::copy_n(opts.kv_override->keys[l].begin() + pos * d, d, lt.k.begin() + pos * d);
                std::copy_n(opts.kv_override->values[l].begin() + pos * d, d, lt.v.begin() + pos * d);
            }
        }
        if (opts.capture_kv) {
            out.keys.push_back(lt.k);
            out.values.push_back(lt.v);
        }

        lt.probs.assign(c.n_heads * tr.total_keys, T(0));
        lt.ctx.assign(L * d, T(0));
        for (std::size_t q = 0; q < L; ++q) {
            const auto& ks = tr.keys[q];
            krows.resize(ks.size());
            vrows.resize(ks.size());
            for (std::size_t j = 0; j < ks.size(); ++j) {
                krows[j] = lt.k.data() + ks[j] * d;
                vrows[j] = lt.v.data() + ks[j] * d;
            }
            for (std::uint32_t h = 0; h < c.n_heads; ++h)
                attend_head<T>(lt.q.data() + q * d + h * hd, krows, vrows, h * hd, hd,
                               lt.probs.data() + h * tr.total_keys + tr.offsets[q],
                               lt.ctx.data() + q * d + h * hd);
        }

        lt.x_mid.resize(L * d);
        linear_rows(lt.ctx.data(), L, P.wo, d, d, lt.x_mid.data());
        for (std::size_t i = 0; i < L * d; ++i) lt.x_mid[i] += x[i];

        norm_rows(lt.x_mid, P.mlp_norm, L, d, lt.inv_rms2, lt.h2);
        lt.u.resize(L * ff);
        linear_rows(lt.h2.data(), L, P.w1, ff, d, lt.u.data());
        lt.s.resize(L * ff);
        for (std::size_t i = 0; i < L * ff; ++i) lt.s[i] = silu(lt.u[i]);
        linear_rows(lt.s.data(), L, P.w2, d, ff, x.data());
        for (std::size_t i = 0; i < L * d; ++i) x[i] += lt.x_mid[i];
    }

    tr.x_final = x;
    norm_rows(x, p.final_norm, L, d, tr.inv_rms_f, tr.hf);
    out.logits.resize(L * V);
    const auto& head = c.tied_lm_head ? p.embedding : p.lm_head;
    linear_rows(tr.hf.data(), L, head, V, d, out.logits.data());
    return out;
}

template <typename T>
double add_sequence_grad(const ModelParams<T>& p, const TrainSequence& ts, LossMode mode, double weight,
                         ModelParams<T>& g, std::size_t* count_out, std::array<double, 3>& mode_sums,
                         std::array<std::size_t, 3>& mode_counts) {
    const ModelConfig& c = p.config;
    const auto& a = ts.seq;
    const std::size_t L = a.size();
    const std::size_t d = c.d_model, V = c.vocab_size, ff = c.d_ff;
    const std::uint32_t hd = c.head_dim();
    const T scale = T(1) / std::sqrt(T(hd));

    Trace<T> tr;
    auto out = forward_impl(p, std::span<const TokenId>(a.ids), ts.mask, ForwardOptions<T>{}, &tr);

    // dlogits = weight * (softmax - onehot) at contributing positions.
    std::vector<T> dlogits(L * V, T(0));
    double loss_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t + 1 < L; ++t) {
        const T* row = out.logits.data() + t * V;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double sum = 0;
        for (std::size_t j = 0; j < V; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        const double lse = mx + std::log(sum);
        const TokenId target = a.ids[t + 1];
        const double ce = lse - static_cast<double>(row[target]);
        for (auto m : {LossMode::All, LossMode::RegularOnly, LossMode::FinalGist}) {
            if (!contributes(a, t, m)) continue;
            mode_sums[static_cast<std::size_t>(m)] += ce;
            mode_counts[static_cast<std::size_t>(m)]++;
        }
        if (!contributes(a, t, mode)) continue;
        loss_sum += ce;
        ++count;
        T* dr = dlogits.data() + t * V;
        for (std::size_t j = 0; j < V; ++j)
            dr[j] = static_cast<T>(weight * std::exp(static_cast<double>(row[j]) - lse));
        dr[target] -= static_cast<T>(weight);
    }
    if (count_out) *count_out = count;

    const auto& head = c.tied_lm_head ? p.embedding : p.lm_head;
    auto& dhead = c.tied_lm_head ? g.embedding : g.lm_head;
    mmat(dhead, V, d).noalias() += cmat(dlogits, L, V).transpose() * cmat(tr.hf, L, d);
    std::vector<T> dhf(L * d);
    mmat(dhf, L, d).noalias() = cmat(dlogits, L, V) * cmat(head, V, d);

    std::vector<T> dx(L * d, T(0));
    norm_backward(tr.x_final, tr.inv_rms_f, p.final_norm, dhf, L, d, dx, g.final_norm);

    std::vector<T> ds(L * ff), dh(L * d), dctx(L * d), dq(L * d), dk(L * d), dv(L * d);
    for (std::size_t l = c.n_layers; l-- > 0;) {
        const auto& P = p.layers[l];
        auto& G = g.layers[l];
        const auto& lt = tr.layers[l];

        // MLP: x_out = x_mid + s W2^T, s = silu(h2 W1^T)
        auto dxm = cmat(dx, L, d);
        mmat(G.w2, d, ff).noalias() += dxm.transpose() * cmat(lt.s, L, ff);
        mmat(ds, L, ff).noalias() = dxm * cmat(P.w2, d, ff);
        for (std::size_t i = 0; i < L * ff; ++i) ds[i] *= silu_grad(lt.u[i]);
        mmat(G.w1, ff, d).noalias() += cmat(ds, L, ff).transpose() * cmat(lt.h2, L, d);
        mmat(dh, L, d).noalias() = cmat(ds, L, ff) * cmat(P.w1, ff, d);
        norm_backward(lt.x_mid, lt.inv_rms2, P.mlp_norm, dh, L, d, dx, G.mlp_norm);

        // Attention output projection.
        mmat(G.wo, d, d).noalias() += cmat(dx, L, d).transpose() * cmat(lt.ctx, L, d);
        mmat(dctx, L, d).noalias() = cmat(dx, L, d) * cmat(P.wo, d, d);

        std::fill(dq.begin(), dq.end(), T(0));
        std::fill(dk.begin(), dk.end(), T(0));
        std::fill(dv.begin(), dv.end(), T(0));
        std::vector<T> dp;
        for (std::size_t q = 0; q < L; ++q) {
            const auto& ks = tr.keys[q];
            dp.resize(ks.size());
            for (std::uint32_t h = 0; h < c.n_heads; ++h) {
                const std::size_t off = h * hd;
                const T* pr = lt.probs.data() + h * tr.total_keys + tr.offsets[q];
                const T* dc = dctx.data() + q * d + off;
                T sum_pdp = 0;
                for (std::size_t j = 0; j < ks.size(); ++j) {
                    const T* vr = lt.v.data() + ks[j] * d + off;
                    T acc = 0;
                    for (std::uint32_t i = 0; i < hd; ++i) acc += dc[i] * vr[i];
                    dp[j] = acc;
                    sum_pdp += pr[j] * acc;
                    T* dvr = dv.data() + ks[j] * d + off;
                    for (std::uint32_t i = 0; i < hd; ++i) dvr[i] += pr[j] * dc[i];
                }
                const T* qr = lt.q.data() + q * d + off;
                T* dqr = dq.data() + q * d + off;
                for (std::size_t j = 0; j < ks.size(); ++j) {
                    const T dsj = pr[j] * (dp[j] - sum_pdp) * scale;
                    const T* kr = lt.k.data() + ks[j] * d + off;
                    T* dkr = dk.data() + ks[j] * d + off;
                    for (std::uint32_t i = 0; i < hd; ++i) {
                        dqr[i] += dsj * kr[i];
                        dkr[i] += dsj * qr[i];
                    }
                }
            }
        }
        if (c.pos_encoding == PosEncoding::Rotary) {
            rope_rows(dq, L, c, true);
            rope_rows(dk, L, c, true);
        }
        auto h1 = cmat(lt.h1, L, d);
        mmat(G.wq, d, d).noalias() += cmat(dq, L, d).transpose() * h1;
        mmat(G.wk, d, d).noalias() += cmat(dk, L, d).transpose() * h1;
        mmat(G.wv, d, d).noalias() += cmat(dv, L, d).transpose() * h1;
        mmat(dh, L, d).noalias() = cmat(dq, L, d) * cmat(P.wq, d, d);
        mmat(dh, L, d).noalias() += cmat(dk, L, d) * cmat(P.wk, d, d);
        mmat(dh, L, d).noalias() += cmat(dv, L, d) * cmat(P.wv, d, d);
        norm_backward(lt.x_in, lt.inv_rms1, P.attn_norm, dh, L, d, dx, G.attn_norm);
    }

    for (std::size_t t = 0; t < L; ++t) {
        T* er = g.embedding.data() + a.ids[t] * d;
        const T* dr = dx.data() + t * d;
        for (std::size_t j = 0; j < d; ++j) er[j] += dr[j];
        if (c.pos_encoding == PosEncoding::Learned) {
            T* pr = g.pos_embedding.data() + t * d;
            for (std::size_t j = 0; j < d; ++j) pr[j] += dr[j];
        }
    }
    return loss_sum;
}

std::size_t count_contributing(std::span<const TrainSequence> batch, LossMode mode) {
    std::size_t n = 0;
    for (const auto& ts : batch)
        for (std::size_t t = 0; t + 1 < ts.seq.size(); ++t) n += contributes(ts.seq, t, mode);
    return n;
}

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw Error("d_model must be a positive multiple of n_heads");
    if (pos_encoding == PosEncoding::Rotary && head_dim() % 2 != 0)
        throw Error("rotary positions need an even head dimension");
    if (n_layers == 0 || d_ff == 0 || max_seq_len == 0) throw Error("model dimensions must be positive");
    if (vocab_size < 2 || n_g >= vocab_size) throw Error("vocab_size must exceed n_g and be at least 2");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"d_model", d_model},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"d_ff", d_ff},
            {"vocab_size", vocab_size},
            {"n_g", n_g},
            {"max_seq_len", max_seq_len},
            {"pos_encoding", pos_encoding == PosEncoding::Rotary ? "rotary" : "learned"},
            {"tied_lm_head", tied_lm_head},
            {"rope_base", rope_base},
            {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.n_g = j.value("n_g", c.n_g);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    const auto pe = j.value("pos_encoding", std::string("rotary"));
    if (pe == "rotary")
        c.pos_encoding = PosEncoding::Rotary;
    else if (pe == "learned")
        c.pos_encoding = PosEncoding::Learned;
    else
        throw Error("unknown pos_encoding: " + pe);
    c.tied_lm_head = j.value("tied_lm_head", c.tied_lm_head);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.init_std = j.value("init_std", c.init_std);
    return c;
}

// ---------------------------------------------------------------- params

template <typename T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& c) {
    c.validate();
    ModelParams<T> p;
    p.config = c;
    const std::size_t d = c.d_model, v = c.vocab_size, ff = c.d_ff;
    p.embedding.assign(v * d, T(0));
    if (!c.tied_lm_head) p.lm_head.assign(v * d, T(0));
    if (c.pos_encoding == PosEncoding::Learned) p.pos_embedding.assign(std::size_t{c.max_seq_len} * d, T(0));
    p.layers.resize(c.n_layers);
    for (auto& L : p.layers) {
        L.attn_norm.assign(d, T(0));
        L.mlp_norm.assign(d, T(0));
        for (auto* w : {&L.wq, &L.wk, &L.wv, &L.wo}) w->assign(d * d, T(0));
        L.w1.assign(ff * d, T(0));
        L.w2.assign(d * ff, T(0));
    }
    p.final_norm.assign(d, T(0));
    return p;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const std::vector<T>& t, const auto&) { n += t.size(); });
    return n;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& c, std::uint64_t seed) {
    auto p = ModelParams<T>::zeros(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double proj_std = c.init_std / std::sqrt(2.0 * c.n_layers);
    p.visit([&](const std::string& name, std::vector<T>& t, const auto&) {
        if (name.ends_with("norm")) {
            std::fill(t.begin(), t.end(), T(1));
            return;
        }
        const double sd = (name.ends_with(".wo") || name.ends_with(".w2")) ? proj_std : c.init_std;
        for (auto& x : t) x = static_cast<T>(sd * normal(rng));
    });
    return p;
}

std::vector<float> extend_vocab_mean_resize(std::span<const float> e_base, std::size_t rows,
                                            std::size_t dim, std::size_t n_g, double eps,
                                            std::uint64_t seed) {
    if (rows < 2) throw Error("mean-resizing needs at least two base rows");
    if (eps < 0) throw Error("eps must be non-negative");
    if (e_base.size() != rows * dim) throw Error("embedding shape mismatch");

    Eigen::MatrixXd E(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < dim; ++j) E(i, j) = e_base[i * dim + j];
    const Eigen::VectorXd mu = E.colwise().mean().transpose();
    const Eigen::MatrixXd centered = E.rowwise() - mu.transpose();
    Eigen::MatrixXd sigma = (centered.transpose() * centered) / static_cast<double>(rows - 1);
    sigma.diagonal().array() += eps;

    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    // LLT only reports failure on a non-positive pivot; a rank-deficient
    // covariance can slip through with a vanishing pivot instead.
    const Eigen::MatrixXd Lc = llt.matrixL();
    const double min_pivot = Lc.diagonal().minCoeff();
    if (llt.info() != Eigen::Success || !(min_pivot > 1e-12 * std::sqrt(std::max(sigma.diagonal().maxCoeff(), 1e-300))))
        throw Error("covariance not PD; set eps>0");

    std::vector<float> out(e_base.begin(), e_base.end());
    out.reserve((rows + n_g) * dim);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd z(static_cast<Eigen::Index>(dim));
    for (std::size_t r = 0; r < n_g; ++r) {
        for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = normal(rng);
        const Eigen::VectorXd x = mu + Lc * z;
        for (Eigen::Index j = 0; j < x.size(); ++j) out.push_back(static_cast<float>(x(j)));
    }
    return out;
}

ModelParams<float> extend_with_gists(const ModelParams<float>& base, std::uint32_t n_g, double eps,
                                     std::uint64_t seed) {
    if (base.config.n_g != 0) throw Error("model already has gist rows");
    ModelConfig c = base.config;
    const std::size_t v0 = c.vocab_size, d = c.d_model;
    c.vocab_size += n_g;
    c.n_g = n_g;
    ModelParams<float> p = base;
    p.config = c;
    p.embedding = extend_vocab_mean_resize(base.embedding, v0, d, n_g, eps, seed);
    if (!c.tied_lm_head)
        p.lm_head = extend_vocab_mean_resize(base.lm_head, v0, d, n_g, eps, seed ^ 0x9e3779b97f4a7c15ULL);
    return p;
}

// ---------------------------------------------------------------- kernels

template <typename T>
void linear_rows(const T* x, std::size_t rows, const std::vector<T>& w, std::size_t out, std::size_t in, T* y) {
    constexpr std::size_t kLanes = 8;
    const std::size_t body = in - in % kLanes;
    for (std::size_t t = 0; t < rows; ++t) {
        const T* xr = x + t * in;
        for (std::size_t i = 0; i < out; ++i) {
            const T* wr = w.data() + i * in;
            T acc[kLanes] = {};
            for (std::size_t j = 0; j < body; j += kLanes)
                for (std::size_t k = 0; k < kLanes; ++k) acc[k] += wr[j + k] * xr[j + k];
            T tail = 0;
            for (std::size_t j = body; j < in; ++j) tail += wr[j] * xr[j];
            y[t * out + i] = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
        }
    }
}

template <typename T>
void rms_norm(std::span<const T> x, std::span<const T> gain, std::span<T> out) {
    const std::size_t d = x.size();
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += x[j] * x[j];
    const T r = T(1) / std::sqrt(ss / T(d) + T(kNormEps));
    for (std::size_t j = 0; j < d; ++j) out[j] = x[j] * r * gain[j];
}

template <typename T>
void apply_rope(std::span<T> row, std::uint32_t position, std::uint32_t n_heads, double base) {
    const std::uint32_t hd = static_cast<std::uint32_t>(row.size()) / n_heads;
    for (std::uint32_t i = 0; i < hd / 2; ++i) {
        const double theta = static_cast<double>(position) * std::pow(base, -2.0 * i / hd);
        const T cs = static_cast<T>(std::cos(theta));
        const T sn = static_cast<T>(std::sin(theta));
        for (std::uint32_t h = 0; h < n_heads; ++h) {
            T* pr = row.data() + h * hd + 2 * i;
            const T a = pr[0], b = pr[1];
            pr[0] = a * cs - b * sn;
            pr[1] = a * sn + b * cs;
        }
    }
}

template <typename T>
void attend_head(const T* q, std::span<const T* const> keys, std::span<const T* const> values,
                 std::uint32_t offset, std::uint32_t head_dim, T* probs, T* ctx) {
    const T scale = T(1) / std::sqrt(T(head_dim));
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < keys.size(); ++j) {
        const T* kr = keys[j] + offset;
        T s = 0;
        for (std::uint32_t i = 0; i < head_dim; ++i) s += q[i] * kr[i];
        s *= scale;
        probs[j] = s;
        mx = std::max(mx, s);
    }
    T sum = 0;
    for (std::size_t j = 0; j < keys.size(); ++j) {
        probs[j] = std::exp(probs[j] - mx);
        sum += probs[j];
    }
    const T inv = T(1) / sum;
    std::fill_n(ctx, head_dim, T(0));
    for (std::size_t j = 0; j < keys.size(); ++j) {
        probs[j] *= inv;
        const T* vr = values[j] + offset;
        for (std::uint32_t i = 0; i < head_dim; ++i) ctx[i] += probs[j] * vr[i];
    }
}

// ---------------------------------------------------------------- forward / loss

template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& p, std::span<const TokenId> ids, const SentenceMask& m,
                         const ForwardOptions<T>& opts) {
    return forward_impl<T>(p, ids, m, opts, nullptr);
}

std::string_view to_string(LossMode m) {
    switch (m) {
        case LossMode::All: return "all";
        case LossMode::RegularOnly: return "regular_only";
        case LossMode::FinalGist: return "final_gist";
    }
    return "all";
}

LossMode loss_mode_from_string(std::string_view s) {
    if (s == "all") return LossMode::All;
    if (s == "regular_only") return LossMode::RegularOnly;
    if (s == "final_gist") return LossMode::FinalGist;
    throw Error("unknown loss mode: " + std::string(s));
}

bool contributes(const AnnotatedSequence& a, std::size_t t, LossMode mode) {
    if (t + 1 >= a.size()) return false;
    switch (mode) {
        case LossMode::All: return true;
        case LossMode::RegularOnly: return a.roles[t] == kRegular;
        case LossMode::FinalGist: return a.roles[t] == kRegular || a.roles[t] == a.n_g;
    }
    return false;
}

template <typename T>
LossResult lm_loss(const ForwardOutput<T>& out, const AnnotatedSequence& a, LossMode mode) {
    const std::size_t L = a.size();
    if (L < 2) throw Error("nothing to predict");
    if (out.length != L) throw Error("forward output does not match the sequence");
    LossResult r;
    r.per_position.resize(L - 1);
    r.contributing.resize(L - 1);
    double sum = 0;
    for (std::size_t t = 0; t + 1 < L; ++t) {
        auto row = out.row(static_cast<std::uint32_t>(t));
        double mx = -std::numeric_limits<double>::infinity();
        for (T x : row) mx = std::max(mx, static_cast<double>(x));
        double s = 0;
        for (T x : row) s += std::exp(static_cast<double>(x) - mx);
        r.per_position[t] = mx + std::log(s) - static_cast<double>(row[a.ids[t + 1]]);
        r.contributing[t] = contributes(a, t, mode);
        if (r.contributing[t]) {
            sum += r.per_position[t];
            ++r.count;
        }
    }
    r.loss = r.count ? sum / static_cast<double>(r.count) : 0.0;
    return r;
}

template <typename T>
GradResult<T> grad(const ModelParams<T>& p, std::span<const TrainSequence> batch, LossMode mode) {
    GradResult<T> r{ModelParams<T>::zeros(p.config), 0.0, 0};
    const std::size_t total = count_contributing(batch, mode);
    if (total == 0) throw Error("batch has no contributing positions");
    const double w = 1.0 / static_cast<double>(total);
    double loss_sum = 0;
    std::array<double, 3> mode_sums{};
    std::array<std::size_t, 3> mode_counts{};
    for (std::size_t b = 0; b < batch.size(); ++b) {
        std::size_t n = 0;
        const double ls = add_sequence_grad(p, batch[b], mode, w, r.grad, &n, mode_sums, mode_counts);
        if (!std::isfinite(ls)) throw Error("non-finite loss in batch element " + std::to_string(b));
        loss_sum += ls;
        r.count += n;
    }
    r.loss = loss_sum / static_cast<double>(total);
    for (std::size_t m = 0; m < 3; ++m)
        r.mode_loss[m] = mode_counts[m] ? mode_sums[m] / static_cast<double>(mode_counts[m]) : 0.0;
    return r;
}

template <typename T>
double batch_loss(const ModelParams<T>& p, std::span<const TrainSequence> batch, LossMode mode) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& ts : batch) {
        if (ts.seq.size() < 2) continue;
        auto out = forward(p, ts.seq, ts.mask);
        auto lr = lm_loss(out, ts.seq, mode);
        sum += lr.loss * static_cast<double>(lr.count);
        n += lr.count;
    }
    if (n == 0) throw Error("batch has no contributing positions");
    return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------- checkpoints

std::filesystem::path checkpoint_stem(const std::filesystem::path& p) {
    namespace fs = std::filesystem;
    if (fs::is_directory(p)) return p / "model";
    if (p.extension() == ".json" || p.extension() == ".bin") return fs::path(p).replace_extension();
    return p;
}

void save_checkpoint(const std::filesystem::path& stem, const ModelParams<float>& p,
                     const CheckpointMeta& meta) {
    namespace fs = std::filesystem;
    fs::path json_path = stem, bin_path = stem;
    json_path += ".json";
    bin_path += ".bin";
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());

    nlohmann::json tensors = nlohmann::json::array();
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw Error("cannot write " + bin_path.string());
    std::uint64_t offset = 0;
    p.visit([&](const std::string& name, const std::vector<float>& t, const std::vector<std::size_t>& shape) {
        const std::uint64_t nbytes = t.size() * sizeof(float);
        tensors.push_back({{"name", name}, {"shape", shape}, {"dtype", "f32"}, {"offset", offset}, {"nbytes", nbytes}});
        bin.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(nbytes));
        offset += nbytes;
    });
    if (!bin) throw Error("short write on " + bin_path.string());

    nlohmann::json manifest = {{"schema", 1},
                               {"format", "gist-checkpoint"},
                               {"config", p.config.to_json()},
                               {"blob", bin_path.filename().string()},
                               {"blob_bytes", offset},
                               {"tensors", std::move(tensors)},
                               {"meta", meta.extra}};
    std::ofstream js(json_path);
    js << manifest.dump(2) << '\n';
    if (!js) throw Error("cannot write " + json_path.string());
}

ModelParams<float> load_checkpoint(const std::filesystem::path& stem_in, CheckpointMeta* meta) {
    namespace fs = std::filesystem;
    const fs::path stem = checkpoint_stem(stem_in);
    fs::path json_path = stem;
    json_path += ".json";
    std::ifstream js(json_path);
    if (!js) throw Error("checkpoint not found: " + json_path.string());
    nlohmann::json manifest = nlohmann::json::parse(js);
    if (manifest.value("format", "") != "gist-checkpoint") throw Error("not a checkpoint manifest");
    auto p = ModelParams<float>::zeros(ModelConfig::from_json(manifest.at("config")));
    const fs::path bin_path = json_path.parent_path() / manifest.at("blob").get<std::string>();
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw Error("checkpoint blob not found: " + bin_path.string());

    std::map<std::string, nlohmann::json> by_name;
    for (const auto& t : manifest.at("tensors")) by_name[t.at("name").get<std::string>()] = t;
    p.visit([&](const std::string& name, std::vector<float>& t, const std::vector<std::size_t>& shape) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw Error("checkpoint is missing tensor " + name);
        if (it->second.at("shape").get<std::vector<std::size_t>>() != shape)
            throw Error("shape mismatch for tensor " + name);
        bin.seekg(static_cast<std::streamoff>(it->second.at("offset").get<std::uint64_t>()));
        bin.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!bin) throw Error("truncated checkpoint blob at tensor " + name);
    });
    if (meta) meta->extra = manifest.value("meta", nlohmann::json::object());
    return p;
}

// ---------------------------------------------------------------- instantiations

#define GIST_INSTANTIATE(T)                                                                           \
    template struct ModelParams<T>;                                                                   \
    template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                       \
    template ForwardOutput<T> forward<T>(const ModelParams<T>&, std::span<const TokenId>,            \
                                         const SentenceMask&, const ForwardOptions<T>&);              \
    template LossResult lm_loss<T>(const ForwardOutput<T>&, const AnnotatedSequence&, LossMode);      \
    template GradResult<T> grad<T>(const ModelParams<T>&, std::span<const TrainSequence>, LossMode); \
    template double batch_loss<T>(const ModelParams<T>&, std::span<const TrainSequence>, LossMode);  \
    template void linear_rows<T>(const T*, std::size_t, const std::vector<T>&, std::size_t, std::size_t, T*); \
    template void rms_norm<T>(std::span<const T>, std::span<const T>, std::span<T>);                 \
    template void apply_rope<T>(std::span<T>, std::uint32_t, std::uint32_t, double);                 \
    template void attend_head<T>(const T*, std::span<const T* const>, std::span<const T* const>,     \
                                 std::uint32_t, std::uint32_t, T*, T*);

GIST_INSTANTIATE(float)
GIST_INSTANTIATE(double)

#undef GIST_INSTANTIATE

}  // namespace gist
