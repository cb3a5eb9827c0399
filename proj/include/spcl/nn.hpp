#pragma once

// Tiny deterministic autoregressive transformer with explicit gradients.
//
// Architecture: learned token + absolute positional embeddings, pre-norm
// blocks (attention then 4x GELU MLP), a final layer norm whose output is
// "the final hidden layer", and an untied vocabulary head.  Everything is
// templated on the scalar type so training runs in float and gradient
// checks run the same code in double.
//
// Initialization draws from a single splitmix64-seeded Gaussian stream,
// filling tensors in lexicographic name order (std 0.02 for weights, zero
// biases, unit layer-norm gains), so parameter init is bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "spcl/rng.hpp"
#include "spcl/tensor.hpp"

namespace spcl::nn {

struct ModelConfig {
    std::size_t vocab_size = 64;
    std::size_t context_length = 32;
    std::size_t embed_dim = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size == 0 || context_length == 0 || embed_dim == 0 ||
            n_layers == 0 || n_heads == 0)
            throw std::invalid_argument("ModelConfig: all counts must be >= 1");
        if (embed_dim % n_heads != 0)
            throw std::invalid_argument(
                "ModelConfig: embed_dim must be divisible by n_heads");
    }

    std::size_t head_dim() const { return embed_dim / n_heads; }
    std::size_t mlp_dim() const { return 4 * embed_dim; }
};

// Token sequences with aligned next-token targets.  `mask[s][t]` selects the
// positions that contribute to the cross-entropy loss (prompt positions are
// masked out).  targets/mask may be left empty for unsupervised batches that
// are only run forward (inquiry text).
struct Batch {
    std::vector<std::vector<int>> inputs;
    std::vector<std::vector<int>> targets;
    std::vector<std::vector<std::uint8_t>> mask;

    bool supervised() const { return !targets.empty(); }
};

inline void validate_batch(const ModelConfig& cfg, const Batch& batch) {
    if (batch.inputs.empty())
        throw std::invalid_argument("batch: no sequences");
    if (batch.supervised() &&
        (batch.targets.size() != batch.inputs.size() ||
         batch.mask.size() != batch.inputs.size()))
        throw std::invalid_argument("batch: inputs/targets/mask count mismatch");
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        const auto& seq = batch.inputs[s];
        if (seq.empty())
            throw std::invalid_argument("batch: empty sequence at index " +
                                        std::to_string(s));
        if (seq.size() > cfg.context_length)
            throw std::invalid_argument(
                "batch: sequence " + std::to_string(s) + " has length " +
                std::to_string(seq.size()) + " > context_length " +
                std::to_string(cfg.context_length));
        for (int id : seq)
            if (id < 0 || std::size_t(id) >= cfg.vocab_size)
                throw std::invalid_argument("batch: token id " +
                                            std::to_string(id) +
                                            " out of vocabulary");
        if (batch.supervised()) {
            if (batch.targets[s].size() != seq.size() ||
                batch.mask[s].size() != seq.size())
                throw std::invalid_argument(
                    "batch: targets/mask length mismatch at sequence " +
                    std::to_string(s));
            for (int id : batch.targets[s])
                if (id < 0 || std::size_t(id) >= cfg.vocab_size)
                    throw std::invalid_argument("batch: target id " +
                                                std::to_string(id) +
                                                " out of vocabulary");
        }
    }
}

namespace detail {

constexpr double kLnEps = 1e-5;

template <typename S>
void affine(const S* x, const S* w, const S* b, std::size_t t_len,
            std::size_t in_dim, std::size_t out_dim, S* y) {
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t e = 0; e < out_dim; ++e) {
            S acc = b ? b[e] : S(0);
            for (std::size_t d = 0; d < in_dim; ++d)
                acc += x[t * in_dim + d] * w[d * out_dim + e];
            y[t * out_dim + e] = acc;
        }
}

// Accumulates dx, gw, gb from dy; x is the forward input.
template <typename S>
void affine_backward(const S* x, const S* w, const S* dy, std::size_t t_len,
                     std::size_t in_dim, std::size_t out_dim, S* dx, S* gw,
                     S* gb) {
    for (std::size_t t = 0; t < t_len; ++t) {
        const S* dyt = dy + t * out_dim;
        const S* xt = x + t * in_dim;
        if (gb)
            for (std::size_t e = 0; e < out_dim; ++e) gb[e] += dyt[e];
        for (std::size_t d = 0; d < in_dim; ++d) {
            S acc = 0;
            for (std::size_t e = 0; e < out_dim; ++e) {
                gw[d * out_dim + e] += xt[d] * dyt[e];
                acc += w[d * out_dim + e] * dyt[e];
            }
            dx[t * in_dim + d] += acc;
        }
    }
}

// y = g * (x - mean) * rstd + b; caches xhat and rstd for the backward pass.
template <typename S>
void layernorm(const S* x, const S* g, const S* b, std::size_t t_len,
               std::size_t dim, S* xhat, S* rstd, S* y) {
    for (std::size_t t = 0; t < t_len; ++t) {
        const S* xt = x + t * dim;
        S mean = 0;
        for (std::size_t d = 0; d < dim; ++d) mean += xt[d];
        mean /= S(dim);
        S var = 0;
        for (std::size_t d = 0; d < dim; ++d)
            var += (xt[d] - mean) * (xt[d] - mean);
        var /= S(dim);
        S r = S(1) / std::sqrt(var + S(kLnEps));
        rstd[t] = r;
        for (std::size_t d = 0; d < dim; ++d) {
            S xh = (xt[d] - mean) * r;
            xhat[t * dim + d] = xh;
            y[t * dim + d] = g[d] * xh + b[d];
        }
    }
}

template <typename S>
void layernorm_backward(const S* xhat, const S* rstd, const S* g, const S* dy,
                        std::size_t t_len, std::size_t dim, S* dx, S* dg,
                        S* db) {
    std::vector<S> dxhat(dim);
    for (std::size_t t = 0; t < t_len; ++t) {
        const S* dyt = dy + t * dim;
        const S* xh = xhat + t * dim;
        S m1 = 0, m2 = 0;
        for (std::size_t d = 0; d < dim; ++d) {
            dg[d] += dyt[d] * xh[d];
            db[d] += dyt[d];
            dxhat[d] = dyt[d] * g[d];
            m1 += dxhat[d];
            m2 += dxhat[d] * xh[d];
        }
        m1 /= S(dim);
        m2 /= S(dim);
        for (std::size_t d = 0; d < dim; ++d)
            dx[t * dim + d] += rstd[t] * (dxhat[d] - m1 - xh[d] * m2);
    }
}

template <typename S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x / std::sqrt(S(2))));
}

template <typename S>
S gelu_grad(S x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    return S(0.5) * (S(1) + std::erf(x / std::sqrt(S(2)))) +
           x * S(inv_sqrt_2pi) * std::exp(S(-0.5) * x * x);
}

// In-place softmax over row[0..n); max-subtracted for stability.
template <typename S>
void softmax_row(S* row, std::size_t n) {
    S hi = row[0];
    for (std::size_t i = 1; i < n; ++i) hi = std::max(hi, row[i]);
    S total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - hi);
        total += row[i];
    }
    for (std::size_t i = 0; i < n; ++i) row[i] /= total;
}

} // namespace detail

// Activations cached for one block of one sequence.
template <typename S>
struct BlockTrace {
    std::vector<S> ln1_xhat, ln1_y;     // [T*D]
    std::vector<S> ln1_rstd;            // [T]
    std::vector<S> q, k, v;             // [T*D]
    std::vector<S> att;                 // [H*T*T], causal softmax weights
    std::vector<S> ctx;                 // [T*D], concatenated head outputs
    std::vector<S> resid1;              // [T*D], x + attention
    std::vector<S> ln2_xhat, ln2_y;     // [T*D]
    std::vector<S> ln2_rstd;            // [T]
    std::vector<S> fc;                  // [T*F], pre-GELU
    std::vector<S> act;                 // [T*F], post-GELU
    std::vector<S> resid2;              // [T*D], block output
};

// Full per-sequence trace: embeddings in, logits and final hidden out.
template <typename S>
struct SeqTrace {
    std::size_t t_len = 0;
    std::vector<S> x0;                  // [T*D], tok + pos embedding
    std::vector<BlockTrace<S>> blocks;
    std::vector<S> lnf_xhat;            // [T*D]
    std::vector<S> lnf_rstd;            // [T]
    std::vector<S> hidden;              // [T*D], final hidden layer output
    std::vector<S> logits;              // [T*V]
};

template <typename S>
using ForwardTraceT = std::vector<SeqTrace<S>>;
using ForwardTrace = ForwardTraceT<float>;

inline std::map<std::string, std::vector<std::size_t>> expected_param_shapes(
    const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim, f = cfg.mlp_dim();
    std::map<std::string, std::vector<std::size_t>> shapes;
    shapes["tok_emb"] = {cfg.vocab_size, d};
    shapes["pos_emb"] = {cfg.context_length, d};
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        std::string p = "blk" + std::to_string(i) + ".";
        shapes[p + "ln1.w"] = {d};
        shapes[p + "ln1.b"] = {d};
        shapes[p + "attn.wq"] = {d, d};
        shapes[p + "attn.bq"] = {d};
        shapes[p + "attn.wk"] = {d, d};
        shapes[p + "attn.bk"] = {d};
        shapes[p + "attn.wv"] = {d, d};
        shapes[p + "attn.bv"] = {d};
        shapes[p + "attn.wo"] = {d, d};
        shapes[p + "attn.bo"] = {d};
        shapes[p + "ln2.w"] = {d};
        shapes[p + "ln2.b"] = {d};
        shapes[p + "mlp.wfc"] = {d, f};
        shapes[p + "mlp.bfc"] = {f};
        shapes[p + "mlp.wproj"] = {f, d};
        shapes[p + "mlp.bproj"] = {d};
    }
    shapes["ln_f.w"] = {d};
    shapes["ln_f.b"] = {d};
    // The vocabulary head carries no bias: a bias row would act as a raw
    // token-frequency prior that later fine-tuning could shift without any
    // trace in the hidden states.
    shapes["head.w"] = {d, cfg.vocab_size};
    return shapes;
}

template <typename S>
void validate_params(const ModelConfig& cfg, const ParamSetT<S>& params) {
    auto shapes = expected_param_shapes(cfg);
    for (const auto& [name, shape] : shapes) {
        if (!params.contains(name))
            throw std::invalid_argument("params: missing tensor '" + name + "'");
        if (params.at(name).shape != shape)
            throw std::invalid_argument("params: tensor '" + name +
                                        "' has the wrong shape");
    }
    if (params.size() != shapes.size())
        for (const auto& [name, t] : params)
            if (!shapes.count(name))
                throw std::invalid_argument("params: unexpected tensor '" +
                                            name + "'");
}

inline ParamSet init_params(const ModelConfig& cfg) {
    auto shapes = expected_param_shapes(cfg);
    Rng rng(cfg.seed);
    ParamSet params;
    for (const auto& [name, shape] : shapes) {
        Tensor<float> t = Tensor<float>::zeros(shape);
        // leaf component decides the kind: b* = bias, layer-norm w = gain
        std::string leaf = name.substr(name.rfind('.') + 1);
        bool is_ln_gain = leaf == "w" && name.find("ln") != std::string::npos;
        bool is_bias = !leaf.empty() && leaf[0] == 'b';
        if (is_ln_gain) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else if (!is_bias) {
            for (auto& v : t.data) v = float(rng.gaussian() * 0.02);
        }
        params.put(name, std::move(t));
    }
    return params;
}

// Runs one sequence through the model, caching everything backward needs.
template <typename S>
SeqTrace<S> forward_seq(const ModelConfig& cfg, const ParamSetT<S>& params,
                        const std::vector<int>& tokens) {
    const std::size_t t_len = tokens.size();
    const std::size_t d = cfg.embed_dim, h = cfg.n_heads, hd = cfg.head_dim();
    const std::size_t f = cfg.mlp_dim(), v = cfg.vocab_size;
    const S scale = S(1) / std::sqrt(S(hd));

    SeqTrace<S> tr;
    tr.t_len = t_len;
    tr.x0.resize(t_len * d);
    const auto& tok = params.at("tok_emb").data;
    const auto& pos = params.at("pos_emb").data;
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t e = 0; e < d; ++e)
            tr.x0[t * d + e] = tok[std::size_t(tokens[t]) * d + e] + pos[t * d + e];

    tr.blocks.resize(cfg.n_layers);
    const std::vector<S>* x = &tr.x0;
    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        std::string p = "blk" + std::to_string(layer) + ".";
        BlockTrace<S>& bt = tr.blocks[layer];
        bt.ln1_xhat.resize(t_len * d);
        bt.ln1_rstd.resize(t_len);
        bt.ln1_y.resize(t_len * d);
        detail::layernorm(x->data(), params.at(p + "ln1.w").data.data(),
                          params.at(p + "ln1.b").data.data(), t_len, d,
                          bt.ln1_xhat.data(), bt.ln1_rstd.data(),
                          bt.ln1_y.data());

        bt.q.resize(t_len * d);
        bt.k.resize(t_len * d);
        bt.v.resize(t_len * d);
        detail::affine(bt.ln1_y.data(), params.at(p + "attn.wq").data.data(),
                       params.at(p + "attn.bq").data.data(), t_len, d, d,
                       bt.q.data());
        detail::affine(bt.ln1_y.data(), params.at(p + "attn.wk").data.data(),
                       params.at(p + "attn.bk").data.data(), t_len, d, d,
                       bt.k.data());
        detail::affine(bt.ln1_y.data(), params.at(p + "attn.wv").data.data(),
                       params.at(p + "attn.bv").data.data(), t_len, d, d,
                       bt.v.data());

        bt.att.assign(h * t_len * t_len, S(0));
        bt.ctx.assign(t_len * d, S(0));
        for (std::size_t head = 0; head < h; ++head) {
            const std::size_t off = head * hd;
            for (std::size_t t = 0; t < t_len; ++t) {
                S* row = bt.att.data() + (head * t_len + t) * t_len;
                for (std::size_t u = 0; u <= t; ++u) {
                    S acc = 0;
                    for (std::size_t e = 0; e < hd; ++e)
                        acc += bt.q[t * d + off + e] * bt.k[u * d + off + e];
                    row[u] = acc * scale;
                }
                detail::softmax_row(row, t + 1);
                for (std::size_t u = 0; u <= t; ++u)
                    for (std::size_t e = 0; e < hd; ++e)
                        bt.ctx[t * d + off + e] += row[u] * bt.v[u * d + off + e];
            }
        }

        bt.resid1.resize(t_len * d);
        detail::affine(bt.ctx.data(), params.at(p + "attn.wo").data.data(),
                       params.at(p + "attn.bo").data.data(), t_len, d, d,
                       bt.resid1.data());
        for (std::size_t i = 0; i < t_len * d; ++i) bt.resid1[i] += (*x)[i];

        bt.ln2_xhat.resize(t_len * d);
        bt.ln2_rstd.resize(t_len);
        bt.ln2_y.resize(t_len * d);
        detail::layernorm(bt.resid1.data(), params.at(p + "ln2.w").data.data(),
                          params.at(p + "ln2.b").data.data(), t_len, d,
                          bt.ln2_xhat.data(), bt.ln2_rstd.data(),
                          bt.ln2_y.data());

        bt.fc.resize(t_len * f);
        detail::affine(bt.ln2_y.data(), params.at(p + "mlp.wfc").data.data(),
                       params.at(p + "mlp.bfc").data.data(), t_len, d, f,
                       bt.fc.data());
        bt.act.resize(t_len * f);
        for (std::size_t i = 0; i < t_len * f; ++i)
            bt.act[i] = detail::gelu(bt.fc[i]);

        bt.resid2.resize(t_len * d);
        detail::affine(bt.act.data(), params.at(p + "mlp.wproj").data.data(),
                       params.at(p + "mlp.bproj").data.data(), t_len, f, d,
                       bt.resid2.data());
        for (std::size_t i = 0; i < t_len * d; ++i) bt.resid2[i] += bt.resid1[i];

        x = &bt.resid2;
    }

    tr.lnf_xhat.resize(t_len * d);
    tr.lnf_rstd.resize(t_len);
    tr.hidden.resize(t_len * d);
    detail::layernorm(x->data(), params.at("ln_f.w").data.data(),
                      params.at("ln_f.b").data.data(), t_len, d,
                      tr.lnf_xhat.data(), tr.lnf_rstd.data(), tr.hidden.data());

    tr.logits.resize(t_len * v);
    detail::affine(tr.hidden.data(), params.at("head.w").data.data(),
                   static_cast<const S*>(nullptr), t_len, d, v,
                   tr.logits.data());
    for (S val : tr.logits)
        if (!std::isfinite(double(val)))
            throw std::runtime_error("forward: non-finite logit");
    return tr;
}

template <typename S>
ForwardTraceT<S> forward(const ModelConfig& cfg, const ParamSetT<S>& params,
                         const Batch& batch) {
    validate_params(cfg, params);
    validate_batch(cfg, batch);
    ForwardTraceT<S> traces;
    traces.reserve(batch.inputs.size());
    for (const auto& seq : batch.inputs)
        traces.push_back(forward_seq(cfg, params, seq));
    return traces;
}

inline std::size_t count_supervised(const Batch& batch) {
    std::size_t n = 0;
    for (const auto& m : batch.mask)
        for (std::uint8_t bit : m) n += bit ? 1 : 0;
    return n;
}

// Mean negative log-likelihood over every unmasked position in the batch.
template <typename S>
double loss_ce(const ModelConfig& cfg, const ForwardTraceT<S>& traces,
               const Batch& batch) {
    if (!batch.supervised() || count_supervised(batch) == 0)
        throw std::invalid_argument("loss_ce: batch has no supervised positions");
    if (traces.size() != batch.inputs.size())
        throw std::invalid_argument("loss_ce: trace/batch mismatch");
    const std::size_t v = cfg.vocab_size;
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < traces.size(); ++s) {
        const auto& tr = traces[s];
        for (std::size_t t = 0; t < tr.t_len; ++t) {
            if (!batch.mask[s][t]) continue;
            const S* row = tr.logits.data() + t * v;
            double hi = double(row[0]);
            for (std::size_t c = 1; c < v; ++c) hi = std::max(hi, double(row[c]));
            double z = 0.0;
            for (std::size_t c = 0; c < v; ++c) z += std::exp(double(row[c]) - hi);
            total += hi + std::log(z) - double(row[batch.targets[s][t]]);
            ++n;
        }
    }
    return total / double(n);
}

// Backward pass seam: gradients are injected at the logits and/or at the
// final hidden layer, so cross-entropy, distillation, and representation
// losses all reuse one path.  Empty dlogits/dhidden mean zero.  Gradients
// accumulate into `grads` (which must be zeros_like(params) on first use).
template <typename S>
void backward_seq(const ModelConfig& cfg, const ParamSetT<S>& params,
                  const std::vector<int>& tokens, const SeqTrace<S>& tr,
                  const std::vector<S>& dlogits, const std::vector<S>& dhidden,
                  ParamSetT<S>& grads) {
    const std::size_t t_len = tr.t_len;
    const std::size_t d = cfg.embed_dim, h = cfg.n_heads, hd = cfg.head_dim();
    const std::size_t f = cfg.mlp_dim(), v = cfg.vocab_size;
    const S scale = S(1) / std::sqrt(S(hd));
    if (!dlogits.empty() && dlogits.size() != t_len * v)
        throw std::invalid_argument("backward: dlogits size mismatch");
    if (!dhidden.empty() && dhidden.size() != t_len * d)
        throw std::invalid_argument("backward: dhidden size mismatch");

    std::vector<S> dh(t_len * d, S(0));
    if (!dhidden.empty()) dh = dhidden;
    if (!dlogits.empty())
        detail::affine_backward(tr.hidden.data(),
                                params.at("head.w").data.data(), dlogits.data(),
                                t_len, d, v, dh.data(),
                                grads.at("head.w").data.data(),
                                grads.at("head.b").data.data());

    std::vector<S> dx(t_len * d, S(0));
    detail::layernorm_backward(tr.lnf_xhat.data(), tr.lnf_rstd.data(),
                               params.at("ln_f.w").data.data(), dh.data(),
                               t_len, d, dx.data(),
                               grads.at("ln_f.w").data.data(),
                               grads.at("ln_f.b").data.data());

    std::vector<S> dresid1(t_len * d), dln2y(t_len * d), dfc(t_len * f);
    std::vector<S> dctx(t_len * d), dln1y(t_len * d), dq(t_len * d),
        dk(t_len * d), dv(t_len * d);
    for (std::size_t layer = cfg.n_layers; layer-- > 0;) {
        std::string p = "blk" + std::to_string(layer) + ".";
        const BlockTrace<S>& bt = tr.blocks[layer];

        // dx currently holds d(resid2).  MLP branch first.
        std::fill(dresid1.begin(), dresid1.end(), S(0));
        std::fill(dfc.begin(), dfc.end(), S(0));
        {
            std::vector<S> dact(t_len * f, S(0));
            detail::affine_backward(bt.act.data(),
                                    params.at(p + "mlp.wproj").data.data(),
                                    dx.data(), t_len, f, d, dact.data(),
                                    grads.at(p + "mlp.wproj").data.data(),
                                    grads.at(p + "mlp.bproj").data.data());
            for (std::size_t i = 0; i < t_len * f; ++i)
                dfc[i] = dact[i] * detail::gelu_grad(bt.fc[i]);
        }
        std::fill(dln2y.begin(), dln2y.end(), S(0));
        detail::affine_backward(bt.ln2_y.data(),
                                params.at(p + "mlp.wfc").data.data(),
                                dfc.data(), t_len, d, f, dln2y.data(),
                                grads.at(p + "mlp.wfc").data.data(),
                                grads.at(p + "mlp.bfc").data.data());
        detail::layernorm_backward(bt.ln2_xhat.data(), bt.ln2_rstd.data(),
                                   params.at(p + "ln2.w").data.data(),
                                   dln2y.data(), t_len, d, dresid1.data(),
                                   grads.at(p + "ln2.w").data.data(),
                                   grads.at(p + "ln2.b").data.data());
        for (std::size_t i = 0; i < t_len * d; ++i) dresid1[i] += dx[i];

        // Attention branch: resid1 = block_in + (ctx @ wo + bo).
        std::fill(dctx.begin(), dctx.end(), S(0));
        detail::affine_backward(bt.ctx.data(),
                                params.at(p + "attn.wo").data.data(),
                                dresid1.data(), t_len, d, d, dctx.data(),
                                grads.at(p + "attn.wo").data.data(),
                                grads.at(p + "attn.bo").data.data());

        std::fill(dq.begin(), dq.end(), S(0));
        std::fill(dk.begin(), dk.end(), S(0));
        std::fill(dv.begin(), dv.end(), S(0));
        std::vector<S> datt(t_len), dscore(t_len);
        for (std::size_t head = 0; head < h; ++head) {
            const std::size_t off = head * hd;
            for (std::size_t t = 0; t < t_len; ++t) {
                const S* row = bt.att.data() + (head * t_len + t) * t_len;
                for (std::size_t u = 0; u <= t; ++u) {
                    S acc = 0;
                    for (std::size_t e = 0; e < hd; ++e) {
                        acc += dctx[t * d + off + e] * bt.v[u * d + off + e];
                        dv[u * d + off + e] +=
                            row[u] * dctx[t * d + off + e];
                    }
                    datt[u] = acc;
                }
                S dot = 0;
                for (std::size_t u = 0; u <= t; ++u) dot += row[u] * datt[u];
                for (std::size_t u = 0; u <= t; ++u)
                    dscore[u] = row[u] * (datt[u] - dot);
                for (std::size_t u = 0; u <= t; ++u)
                    for (std::size_t e = 0; e < hd; ++e) {
                        dq[t * d + off + e] +=
                            scale * dscore[u] * bt.k[u * d + off + e];
                        dk[u * d + off + e] +=
                            scale * dscore[u] * bt.q[t * d + off + e];
                    }
            }
        }

        std::fill(dln1y.begin(), dln1y.end(), S(0));
        detail::affine_backward(bt.ln1_y.data(),
                                params.at(p + "attn.wq").data.data(), dq.data(),
                                t_len, d, d, dln1y.data(),
                                grads.at(p + "attn.wq").data.data(),
                                grads.at(p + "attn.bq").data.data());
        detail::affine_backward(bt.ln1_y.data(),
                                params.at(p + "attn.wk").data.data(), dk.data(),
                                t_len, d, d, dln1y.data(),
                                grads.at(p + "attn.wk").data.data(),
                                grads.at(p + "attn.bk").data.data());
        detail::affine_backward(bt.ln1_y.data(),
                                params.at(p + "attn.wv").data.data(), dv.data(),
                                t_len, d, d, dln1y.data(),
                                grads.at(p + "attn.wv").data.data(),
                                grads.at(p + "attn.bv").data.data());

        std::fill(dx.begin(), dx.end(), S(0));
        detail::layernorm_backward(bt.ln1_xhat.data(), bt.ln1_rstd.data(),
                                   params.at(p + "ln1.w").data.data(),
                                   dln1y.data(), t_len, d, dx.data(),
                                   grads.at(p + "ln1.w").data.data(),
                                   grads.at(p + "ln1.b").data.data());
        for (std::size_t i = 0; i < t_len * d; ++i) dx[i] += dresid1[i];
    }

    auto& g_tok = grads.at("tok_emb").data;
    auto& g_pos = grads.at("pos_emb").data;
    for (std::size_t t = 0; t < t_len; ++t) {
        const std::size_t row = std::size_t(tokens[t]) * d;
        for (std::size_t e = 0; e < d; ++e) {
            g_tok[row + e] += dx[t * d + e];
            g_pos[t * d + e] += dx[t * d + e];
        }
    }
}

// Cross-entropy gradient at the logits for one sequence: (softmax - onehot)
// / n_total on supervised positions, zero elsewhere.
template <typename S>
std::vector<S> ce_dlogits(const ModelConfig& cfg, const SeqTrace<S>& tr,
                          const std::vector<int>& targets,
                          const std::vector<std::uint8_t>& mask,
                          std::size_t n_total) {
    const std::size_t v = cfg.vocab_size;
    std::vector<S> dl(tr.t_len * v, S(0));
    for (std::size_t t = 0; t < tr.t_len; ++t) {
        if (!mask[t]) continue;
        S* row = dl.data() + t * v;
        const S* lg = tr.logits.data() + t * v;
        for (std::size_t c = 0; c < v; ++c) row[c] = lg[c];
        detail::softmax_row(row, v);
        for (std::size_t c = 0; c < v; ++c) row[c] /= S(n_total);
        row[std::size_t(targets[t])] -= S(1) / S(n_total);
    }
    return dl;
}

// Gradient of the mean cross-entropy loss for a supervised batch.
template <typename S>
ParamSetT<S> backward_ce(const ModelConfig& cfg, const ParamSetT<S>& params,
                         const Batch& batch) {
    validate_params(cfg, params);
    validate_batch(cfg, batch);
    const std::size_t n_total = count_supervised(batch);
    if (n_total == 0)
        throw std::invalid_argument("backward: batch has no supervised positions");
    ParamSetT<S> grads = zeros_like(params);
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        SeqTrace<S> tr = forward_seq(cfg, params, batch.inputs[s]);
        std::vector<S> dl =
            ce_dlogits(cfg, tr, batch.targets[s], batch.mask[s], n_total);
        backward_seq(cfg, params, batch.inputs[s], tr, dl, {}, grads);
    }
    return grads;
}

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void validate() const {
        if (!(lr > 0)) throw std::invalid_argument("adamw: lr must be > 0");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw std::invalid_argument("adamw: betas must lie in [0, 1)");
        if (weight_decay < 0)
            throw std::invalid_argument("adamw: weight_decay must be >= 0");
    }
};

template <typename S>
struct AdamWState {
    ParamSetT<S> m, v;
    std::size_t step = 0;
};

template <typename S>
AdamWState<S> make_adamw_state(const ParamSetT<S>& params) {
    return {zeros_like(params), zeros_like(params), 0};
}

// Decoupled-weight-decay Adam step; mutates params and state in place.
template <typename S>
void adamw_step(ParamSetT<S>& params, const ParamSetT<S>& grads,
                AdamWState<S>& state, const AdamWConfig& cfg) {
    cfg.validate();
    require_compatible(params, grads, "adamw params/grads");
    require_compatible(params, state.m, "adamw params/state");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    auto im = state.m.begin();
    auto iv = state.v.begin();
    auto ig = grads.begin();
    for (auto& [name, p] : params) {
        auto& m = im->second.data;
        auto& vv = iv->second.data;
        const auto& g = ig->second.data;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            double gi = double(g[i]);
            double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi;
            double vi = cfg.beta2 * double(vv[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = S(mi);
            vv[i] = S(vi);
            double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            double decayed = double(p.data[i]) -
                             cfg.lr * cfg.weight_decay * double(p.data[i]);
            p.data[i] = S(decayed - cfg.lr * update);
        }
        ++im;
        ++iv;
        ++ig;
    }
}

// Greedy decoding per Eq-style argmax; returns prompt + generated tokens,
// stopping at eos_id, max_new tokens, or the context limit.
template <typename S>
std::vector<int> decode_greedy(const ModelConfig& cfg,
                               const ParamSetT<S>& params,
                               std::vector<int> prompt, std::size_t max_new,
                               int eos_id = 0) {
    if (prompt.empty())
        throw std::invalid_argument("decode_greedy: empty prompt");
    for (std::size_t step = 0; step < max_new; ++step) {
        if (prompt.size() >= cfg.context_length) break;
        SeqTrace<S> tr = forward_seq(cfg, params, prompt);
        const S* row = tr.logits.data() + (tr.t_len - 1) * cfg.vocab_size;
        std::size_t best = 0;
        for (std::size_t c = 1; c < cfg.vocab_size; ++c)
            if (row[c] > row[best]) best = c;
        prompt.push_back(int(best));
        if (int(best) == eos_id) break;
    }
    return prompt;
}

} // namespace spcl::nn
