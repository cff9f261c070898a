#include "duoattn/forward.hpp"

#include <cmath>

#include "duoattn/kernels.hpp"

namespace duoattn {

namespace kn = kernels;

namespace {

void check_tokens(const ModelSpec& spec, std::span<const Token> tokens) {
    if (tokens.empty()) throw LengthError("token sequence is empty");
    if (tokens.size() > spec.max_seq_len) {
        throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                          std::to_string(spec.max_seq_len));
    }
    for (Token t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= spec.vocab_size) {
            throw ContractError("token id " + std::to_string(t) + " outside vocabulary of " +
                                std::to_string(spec.vocab_size));
        }
    }
}

// out = x * W for every row.
MatrixD matmul(const MatrixD& x, const MatrixD& w) {
    MatrixD y(x.rows(), w.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) kn::vec_mat(x.row(r).data(), w.data(), w.rows(), w.cols(), y.row(r).data());
    return y;
}

// dx[r] += dy[r] * W^T
void matmul_t_acc(const MatrixD& dy, const MatrixD& w, MatrixD& dx) {
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        double* out = dx.row(r).data();
        for (std::size_t c = 0; c < w.rows(); ++c) out[c] += kn::dot(dy.row(r).data(), w.row(c).data(), w.cols());
    }
}

// dW += x^T * dy
void outer_acc(const MatrixD& x, const MatrixD& dy, MatrixD& dw) {
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const double xc = x(r, c);
            if (xc != 0.0) kn::axpy(dw.row(c).data(), xc, dy.row(r).data(), dy.cols());
        }
}

void rmsnorm_rows(const MatrixD& x, const std::vector<double>& gain, MatrixD& y, std::vector<double>& rms) {
    y = MatrixD(x.rows(), x.cols());
    rms.resize(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        rms[r] = kn::rms_factor(x.row(r).data(), x.cols(), kNormEps);
        for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = gain[c] * x(r, c) * rms[r];
    }
}

// dx += d(rmsnorm)/dx applied to dy; dgain += dy * x * r.
void rmsnorm_backward(std::span<const double> x, std::span<const double> gain, double r, std::span<const double> dy,
                      double* dx, double* dgain) {
    const std::size_t n = x.size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += gain[i] * dy[i] * x[i];
    const double coef = r * r * r * s / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        dx[i] += r * gain[i] * dy[i] - x[i] * coef;
        if (dgain != nullptr) dgain[i] += dy[i] * x[i] * r;
    }
}

struct RopeTable {
    std::size_t pairs = 0;
    std::vector<double> cos, sin;  // [T x pairs]

    RopeTable(std::size_t T, std::size_t head_dim, double theta) : pairs(head_dim / 2), cos(T * pairs), sin(T * pairs) {
        const auto freq = kn::rope_inv_freq(head_dim, theta);
        for (std::size_t t = 0; t < T; ++t)
            kn::rope_angles(static_cast<double>(t), freq, cos.data() + t * pairs, sin.data() + t * pairs);
    }

    void apply(MatrixD& m, std::size_t n_heads, std::size_t head_dim, bool inverse) const {
        for (std::size_t t = 0; t < m.rows(); ++t)
            for (std::size_t h = 0; h < n_heads; ++h)
                kn::rope_rotate(m.row(t).data() + h * head_dim, cos.data() + t * pairs, sin.data() + t * pairs, pairs,
                                inverse);
    }
};

// Single-head attention over column slices of q/k/v; writes the head's output
// slice of `out` and optionally the probability table.
void attend_head(const MatrixD& q, std::size_t q_off, const MatrixD& k, const MatrixD& v, std::size_t kv_off,
                 std::size_t head_dim, const AttentionMask& mask, double scale, MatrixD& out, std::size_t out_off,
                 MatrixD* probs) {
    const std::size_t T = q.rows();
    std::vector<double> buf(T);
    std::vector<std::size_t> idx(T);
    for (std::size_t i = 0; i < T; ++i) {
        std::size_t n = 0;
        const double* qi = q.row(i).data() + q_off;
        for (std::size_t j = 0; j <= i; ++j) {
            if (!mask(i, j)) continue;
            buf[n] = kn::dot(qi, k.row(j).data() + kv_off, head_dim) * scale;
            idx[n++] = j;
        }
        if (!kn::softmax_inplace(buf.data(), n)) {
            throw ContractError("attention query row " + std::to_string(i) + " has zero unmasked keys");
        }
        double* o = out.row(i).data() + out_off;
        std::fill(o, o + head_dim, 0.0);
        for (std::size_t t = 0; t < n; ++t) {
            kn::axpy(o, buf[t], v.row(idx[t]).data() + kv_off, head_dim);
            if (probs != nullptr) (*probs)(i, idx[t]) = buf[t];
        }
    }
}

// Reverse pass of one head's attention given its probability table.
void attend_head_backward(const MatrixD& p, const MatrixD& d_out, std::size_t out_off, const MatrixD& q,
                          std::size_t q_off, const MatrixD& k, const MatrixD& v, std::size_t kv_off,
                          std::size_t head_dim, double scale, MatrixD& dq, MatrixD& dk, MatrixD& dv) {
    const std::size_t T = p.rows();
    std::vector<double> dp(T);
    for (std::size_t i = 0; i < T; ++i) {
        const double* doi = d_out.row(i).data() + out_off;
        double row_sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            const double pij = p(i, j);
            if (pij == 0.0) continue;
            dp[j] = kn::dot(doi, v.row(j).data() + kv_off, head_dim);
            row_sum += pij * dp[j];
            kn::axpy(dv.row(j).data() + kv_off, pij, doi, head_dim);
        }
        double* dqi = dq.row(i).data() + q_off;
        const double* qi = q.row(i).data() + q_off;
        for (std::size_t j = 0; j <= i; ++j) {
            const double pij = p(i, j);
            if (pij == 0.0) continue;
            const double ds = pij * (dp[j] - row_sum) * scale;
            kn::axpy(dqi, ds, k.row(j).data() + kv_off, head_dim);
            kn::axpy(dk.row(j).data() + kv_off, ds, qi, head_dim);
        }
    }
}

}  // namespace

HiddenStates forward_hidden(const ModelWeights& w, std::span<const Token> tokens, const GateMatrix* gates,
                            const MixOptions& opts, ForwardTape* tape) {
    const ModelSpec& spec = w.spec;
    check_tokens(spec, tokens);
    if (gates != nullptr) gates->require_matches(spec);
    const std::size_t T = tokens.size();
    const std::size_t D = spec.hidden_dim;
    const std::size_t hd = spec.head_dim;
    const std::size_t group = spec.group_size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    const AttentionMask causal = causal_mask(T);
    AttentionMask stream;
    if (gates != nullptr) {
        stream = opts.block_sparse ? block_sparse_streaming_mask(T, opts.streaming, opts.block_size)
                                   : streaming_mask(T, opts.streaming);
    }
    const RopeTable rope(T, hd, spec.rope_theta);

    if (tape != nullptr) {
        tape->tokens.assign(tokens.begin(), tokens.end());
        tape->layers.assign(spec.n_layers, LayerTape{});
        tape->mixed = gates != nullptr;
    }

    MatrixD x(T, D);
    for (std::size_t t = 0; t < T; ++t) {
        const auto e = w.embedding.row(static_cast<std::size_t>(tokens[t]));
        std::copy(e.begin(), e.end(), x.row(t).begin());
    }

    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        LayerTape local;
        LayerTape& lt = tape != nullptr ? tape->layers[l] : local;

        if (tape != nullptr) lt.x_in = x;
        rmsnorm_rows(x, lw.attn_norm, lt.a, lt.rms_attn);
        lt.q = matmul(lt.a, lw.wq);
        lt.k = matmul(lt.a, lw.wk);
        lt.v = matmul(lt.a, lw.wv);
        rope.apply(lt.q, spec.n_query_heads, hd, false);
        rope.apply(lt.k, spec.n_kv_heads, hd, false);

        lt.o_full = MatrixD(T, spec.q_width());
        if (gates != nullptr) lt.o_stream = MatrixD(T, spec.q_width());
        if (tape != nullptr) {
            lt.p_full.assign(spec.n_query_heads, MatrixD(T, T, 0.0));
            if (gates != nullptr) lt.p_stream.assign(spec.n_query_heads, MatrixD(T, T, 0.0));
        }
        for (std::size_t h = 0; h < spec.n_query_heads; ++h) {
            const std::size_t g = h / group;
            attend_head(lt.q, h * hd, lt.k, lt.v, g * hd, hd, causal, scale, lt.o_full, h * hd,
                        tape != nullptr ? &lt.p_full[h] : nullptr);
            if (gates != nullptr) {
                attend_head(lt.q, h * hd, lt.k, lt.v, g * hd, hd, stream, scale, lt.o_stream, h * hd,
                            tape != nullptr ? &lt.p_stream[h] : nullptr);
            }
        }
        if (gates != nullptr) {
            lt.o_mixed = MatrixD(T, spec.q_width());
            for (std::size_t h = 0; h < spec.n_query_heads; ++h) {
                const double alpha = (*gates)(l, h / group);
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t c = h * hd; c < (h + 1) * hd; ++c)
                        lt.o_mixed(t, c) = alpha * lt.o_full(t, c) + (1.0 - alpha) * lt.o_stream(t, c);
            }
        } else {
            lt.o_mixed = lt.o_full;
        }

        const MatrixD attn_out = matmul(lt.o_mixed, lw.wo);
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += attn_out.data()[i];
        if (tape != nullptr) lt.x_mid = x;

        rmsnorm_rows(x, lw.ffn_norm, lt.b, lt.rms_ffn);
        lt.gate_pre = matmul(lt.b, lw.w_gate);
        lt.up = matmul(lt.b, lw.w_up);
        lt.act = MatrixD(T, spec.ffn_dim);
        for (std::size_t i = 0; i < lt.act.size(); ++i)
            lt.act.data()[i] = kn::silu(lt.gate_pre.data()[i]) * lt.up.data()[i];
        const MatrixD ffn_out = matmul(lt.act, lw.w_down);
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += ffn_out.data()[i];
    }

    HiddenStates hs;
    hs.values = std::move(x);
    hs.position_ids.resize(T);
    for (std::size_t t = 0; t < T; ++t) hs.position_ids[t] = t;
    return hs;
}

MatrixD logits_for_rows(const ModelWeights& w, const MatrixD& hidden, std::span<const std::size_t> rows) {
    const std::size_t D = w.spec.hidden_dim;
    MatrixD logits(rows.size(), w.spec.vocab_size);
    std::vector<double> normed(D);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        kn::rmsnorm_row(hidden.row(rows[i]).data(), w.final_norm.data(), D, kNormEps, normed.data());
        kn::vec_mat(normed.data(), w.unembedding.data(), D, w.spec.vocab_size, logits.row(i).data());
    }
    return logits;
}

FullForwardResult full_forward(const ModelWeights& w, std::span<const Token> tokens) {
    FullForwardResult r;
    r.hidden = forward_hidden(w, tokens, nullptr, MixOptions{});
    r.logits = logits_for_rows(w, r.hidden.values, r.hidden.position_ids);
    return r;
}

HiddenStates mixed_attention_forward(const ModelWeights& w, const GateMatrix& gates, std::span<const Token> tokens,
                                     const StreamingConfig& cfg) {
    MixOptions opts;
    opts.streaming = cfg;
    return forward_hidden(w, tokens, &gates, opts);
}

void backward(const ModelWeights& w, const GateMatrix* gates, const ForwardTape& tape, const MatrixD& d_hidden,
              const MatrixD* d_logits, std::span<const std::size_t> logit_rows, const MatrixD* hidden,
              GradientSink sink) {
    const ModelSpec& spec = w.spec;
    const std::size_t T = tape.tokens.size();
    const std::size_t D = spec.hidden_dim;
    const std::size_t hd = spec.head_dim;
    const std::size_t group = spec.group_size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    require_shape(d_hidden.rows(), d_hidden.cols(), T, D, "d_hidden");
    if (tape.layers.size() != spec.n_layers) throw ShapeError("tape does not match model depth");
    if (tape.mixed != (gates != nullptr)) throw ContractError("tape and gates disagree about the mixed branch");
    if (sink.gates != nullptr) sink.gates->require_matches(spec);
    ModelWeights* gw = sink.weights;

    MatrixD dx = d_hidden;
    if (d_logits != nullptr) {
        if (hidden == nullptr) throw ContractError("logit gradients need the forward hidden states");
        require_shape(d_logits->rows(), d_logits->cols(), logit_rows.size(), spec.vocab_size, "d_logits");
        std::vector<double> normed(D), d_normed(D);
        for (std::size_t i = 0; i < logit_rows.size(); ++i) {
            const auto x = hidden->row(logit_rows[i]);
            const double r = kn::rms_factor(x.data(), D, kNormEps);
            for (std::size_t c = 0; c < D; ++c) normed[c] = w.final_norm[c] * x[c] * r;
            const double* dl = d_logits->row(i).data();
            for (std::size_t c = 0; c < D; ++c) {
                d_normed[c] = kn::dot(dl, w.unembedding.row(c).data(), spec.vocab_size);
                if (gw != nullptr) kn::axpy(gw->unembedding.row(c).data(), normed[c], dl, spec.vocab_size);
            }
            rmsnorm_backward(x, w.final_norm, r, d_normed, dx.row(logit_rows[i]).data(),
                             gw != nullptr ? gw->final_norm.data() : nullptr);
        }
    }

    const bool need_input_grad_at_bottom = gw != nullptr;
    for (std::size_t li = spec.n_layers; li-- > 0;) {
        const LayerWeights& lw = w.layers[li];
        const LayerTape& lt = tape.layers[li];
        LayerWeights* lg = gw != nullptr ? &gw->layers[li] : nullptr;

        // Feed-forward block: dx is d loss / d x_out and also flows to x_mid.
        MatrixD d_act(T, spec.ffn_dim);
        matmul_t_acc(dx, lw.w_down, d_act);
        if (lg != nullptr) outer_acc(lt.act, dx, lg->w_down);
        MatrixD d_up(T, spec.ffn_dim), d_gate(T, spec.ffn_dim);
        for (std::size_t i = 0; i < d_act.size(); ++i) {
            const double gp = lt.gate_pre.data()[i];
            d_up.data()[i] = d_act.data()[i] * kn::silu(gp);
            d_gate.data()[i] = d_act.data()[i] * lt.up.data()[i] * kn::silu_grad(gp);
        }
        MatrixD d_b(T, D);
        matmul_t_acc(d_up, lw.w_up, d_b);
        matmul_t_acc(d_gate, lw.w_gate, d_b);
        if (lg != nullptr) {
            outer_acc(lt.b, d_up, lg->w_up);
            outer_acc(lt.b, d_gate, lg->w_gate);
        }
        MatrixD d_mid = dx;
        for (std::size_t t = 0; t < T; ++t)
            rmsnorm_backward(lt.x_mid.row(t), lw.ffn_norm, lt.rms_ffn[t], d_b.row(t), d_mid.row(t).data(),
                             lg != nullptr ? lg->ffn_norm.data() : nullptr);

        // Attention block.
        MatrixD d_o(T, spec.q_width());
        matmul_t_acc(d_mid, lw.wo, d_o);
        if (lg != nullptr) outer_acc(lt.o_mixed, d_mid, lg->wo);

        MatrixD d_full = d_o;
        MatrixD d_stream;
        if (gates != nullptr) {
            d_stream = MatrixD(T, spec.q_width());
            for (std::size_t h = 0; h < spec.n_query_heads; ++h) {
                const std::size_t g = h / group;
                const double alpha = (*gates)(li, g);
                double d_alpha = 0.0;
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) {
                        const double d = d_o(t, c);
                        d_alpha += d * (lt.o_full(t, c) - lt.o_stream(t, c));
                        d_full(t, c) = alpha * d;
                        d_stream(t, c) = (1.0 - alpha) * d;
                    }
                if (!std::isfinite(d_alpha)) {
                    throw NumericError("non-finite gate gradient at layer " + std::to_string(li) + " kv head " +
                                       std::to_string(g));
                }
                if (sink.gates != nullptr) (*sink.gates)(li, g) += d_alpha;
            }
        }

        if (li == 0 && !need_input_grad_at_bottom) break;

        MatrixD dq(T, spec.q_width()), dk(T, spec.kv_width()), dv(T, spec.kv_width());
        for (std::size_t h = 0; h < spec.n_query_heads; ++h) {
            const std::size_t g = h / group;
            attend_head_backward(lt.p_full[h], d_full, h * hd, lt.q, h * hd, lt.k, lt.v, g * hd, hd, scale, dq, dk,
                                 dv);
            if (gates != nullptr) {
                attend_head_backward(lt.p_stream[h], d_stream, h * hd, lt.q, h * hd, lt.k, lt.v, g * hd, hd, scale,
                                     dq, dk, dv);
            }
        }
        const RopeTable rope(T, hd, spec.rope_theta);
        rope.apply(dq, spec.n_query_heads, hd, true);
        rope.apply(dk, spec.n_kv_heads, hd, true);

        MatrixD d_a(T, D);
        matmul_t_acc(dq, lw.wq, d_a);
        matmul_t_acc(dk, lw.wk, d_a);
        matmul_t_acc(dv, lw.wv, d_a);
        if (lg != nullptr) {
            outer_acc(lt.a, dq, lg->wq);
            outer_acc(lt.a, dk, lg->wk);
            outer_acc(lt.a, dv, lg->wv);
        }
        dx = std::move(d_mid);
        for (std::size_t t = 0; t < T; ++t)
            rmsnorm_backward(lt.x_in.row(t), lw.attn_norm, lt.rms_attn[t], d_a.row(t), dx.row(t).data(),
                             lg != nullptr ? lg->attn_norm.data() : nullptr);
    }

    if (gw != nullptr) {
        for (std::size_t t = 0; t < T; ++t)
            kn::axpy(gw->embedding.row(static_cast<std::size_t>(tape.tokens[t])).data(), 1.0, dx.row(t).data(), D);
    }
}

}  // namespace duoattn
