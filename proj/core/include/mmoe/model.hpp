#pragma once

#include <vector>

#include "mmoe/checkpoint.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/tensor.hpp"

namespace mmoe {

using gradient_set = tensor_map;

// Fresh dense model, weights ~ N(0, 0.02^2), norm gains 1, per-seed
// deterministic (counter-based streams keyed by parameter name).
checkpoint init_dense(const model_config& cfg, uint64_t seed, precision prec = precision::f64);
// Same init for an MoE-shaped model; the router starts at zero.
checkpoint init_moe(const model_config& cfg, uint64_t seed, precision prec = precision::f64);

struct forward_result {
    tensor logits;            // [T x vocab]
    routing_log log;          // empty for dense models
    std::vector<tensor> ffn_outputs;  // per-layer FFN/MoE block output (captured when requested)
};

forward_result forward_logits(const std::vector<int64_t>& tokens, const checkpoint& ckpt,
                              bool capture_ffn_outputs = false);

// GQA with causal masking, RoPE, and optional per-head RMSNorm on Q/K.
// Exposed for direct testing; weights are named layer.{l}.* tensors.
tensor gqa_attention(const tensor& h, const checkpoint& ckpt, int64_t layer,
                     const std::vector<int64_t>& positions);

// SwiGLU FFN: (silu(h Wg) * (h Wu)) Wd.
tensor dense_ffn(const tensor& h, const tensor& w_gate, const tensor& w_up, const tensor& w_down);

struct aux_coefficients {
    double balance = 0.0;
    double z = 0.0;
};

struct loss_result {
    double lm_loss = 0.0;
    double balance_loss = 0.0;  // mean over MoE layers, 0 for dense
    double z_loss = 0.0;
    double total = 0.0;         // lm + cb*balance + cz*z
    gradient_set grads;         // gradients of `total`
    routing_log log;
};

// Mean next-token cross-entropy plus coefficient-weighted auxiliary
// routing losses, with analytic gradients through every kernel.
// Top-k selection indices are treated as constants; gradients flow
// through the selected-expert probabilities.
loss_result lm_loss_and_grads(const std::vector<int64_t>& tokens,
                              const std::vector<int64_t>& targets, const checkpoint& ckpt,
                              aux_coefficients coeffs = {});

gradient_set zero_grads_like(const checkpoint& ckpt);

}  // namespace mmoe
