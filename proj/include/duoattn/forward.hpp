#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "duoattn/gates.hpp"
#include "duoattn/masks.hpp"
#include "duoattn/model.hpp"

namespace duoattn {

// How the streaming branch is masked during gate-mixed passes.
struct MixOptions {
    StreamingConfig streaming;
    bool block_sparse = false;
    std::size_t block_size = 64;
};

// Activations retained for reverse accumulation. Attention probabilities are
// kept per query head as dense [T x T] tables.
struct LayerTape {
    MatrixD x_in;
    std::vector<double> rms_attn;
    MatrixD a;
    MatrixD q, k, v;  // q and k after rotary embedding
    std::vector<MatrixD> p_full;
    std::vector<MatrixD> p_stream;  // empty for plain causal passes
    MatrixD o_full, o_stream, o_mixed;
    MatrixD x_mid;
    std::vector<double> rms_ffn;
    MatrixD b;
    MatrixD gate_pre, up, act;
};

struct ForwardTape {
    std::vector<Token> tokens;
    std::vector<LayerTape> layers;
    bool mixed = false;
};

// Dense 64-bit forward pass. With `gates` null every head uses the causal mask;
// otherwise each KV head's attention output is
//   alpha * causal_attention + (1 - alpha) * streaming_attention.
// Returns final-layer hidden states before the final norm.
HiddenStates forward_hidden(const ModelWeights& w, std::span<const Token> tokens, const GateMatrix* gates,
                            const MixOptions& opts, ForwardTape* tape = nullptr);

// Logits of selected rows of `hidden` through the final norm and unembedding.
MatrixD logits_for_rows(const ModelWeights& w, const MatrixD& hidden, std::span<const std::size_t> rows);

struct FullForwardResult {
    HiddenStates hidden;
    MatrixD logits;
};

FullForwardResult full_forward(const ModelWeights& w, std::span<const Token> tokens);

HiddenStates mixed_attention_forward(const ModelWeights& w, const GateMatrix& gates, std::span<const Token> tokens,
                                     const StreamingConfig& cfg);

// Which gradients backward() should produce.
struct GradientSink {
    GateMatrix* gates = nullptr;    // accumulated d loss / d alpha
    ModelWeights* weights = nullptr;  // accumulated d loss / d parameters
};

// Reverse accumulation from d loss / d hidden (rows = tokens, may be sparse in
// practice) and optional d loss / d logits for `logit_rows`. Gradients are added
// into the sink, never overwritten. Throws NumericError naming the layer/head
// when a gate gradient is not finite.
void backward(const ModelWeights& w, const GateMatrix* gates, const ForwardTape& tape, const MatrixD& d_hidden,
              const MatrixD* d_logits, std::span<const std::size_t> logit_rows, const MatrixD* hidden,
              GradientSink sink);

}  // namespace duoattn
