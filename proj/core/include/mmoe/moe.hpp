#pragma once

#include <vector>

#include "mmoe/checkpoint.hpp"
#include "mmoe/tensor.hpp"

namespace mmoe {

struct expert_weights {
    tensor gate;  // [d_model x d_expert]
    tensor up;    // [d_model x d_expert]
    tensor down;  // [d_expert x d_model]
};

struct moe_layer_params {
    tensor router;  // [d_model x E]
    std::vector<expert_weights> experts;
};

// Non-owning view over one MoE layer's weights; lets the model run
// straight out of a checkpoint without copies.
struct moe_layer_view {
    const tensor* router = nullptr;
    std::vector<const tensor*> gate, up, down;

    static moe_layer_view of(const moe_layer_params& p);
    static moe_layer_view from_checkpoint(const checkpoint& ckpt, int64_t layer);
};

struct routing_record {
    int64_t layer = 0;
    int64_t pos = 0;
    std::vector<int64_t> experts;  // k distinct indices, each < E
    std::vector<double> probs;     // matching routing weights
    double lse = 0.0;              // logsumexp of the full router logits
};

struct routing_log {
    int64_t n_layers = 0;
    int64_t n_experts = 0;
    int64_t top_k = 0;
    std::vector<routing_record> records;
    // per-layer aggregates: token-slot counts f and router probability sums
    std::vector<std::vector<int64_t>> counts;     // [layer][expert]
    std::vector<std::vector<double>> prob_sums;   // [layer][expert], full softmax
    std::vector<int64_t> tokens_per_layer;

    void init(int64_t layers, int64_t experts, int64_t k);
    void add(int64_t layer, int64_t pos, const std::vector<int64_t>& sel,
             const std::vector<double>& weights, const std::vector<double>& full_probs,
             double lse);
    void merge(const routing_log& other);
    std::string to_jsonl() const;
};

routing_log routing_log_from_jsonl(const std::string& text);

// Router for one token: logits = h . router, p = softmax(logits),
// top-k by probability with ties broken toward the lower expert index.
struct route_result {
    std::vector<int64_t> indices;
    std::vector<double> weights;
    std::vector<double> probs;  // full softmax over all E experts
    std::vector<double> logits;
    double lse = 0.0;
};
route_result route(std::span<const double> h, const tensor& router, const moe_config& cfg);

// Cache of everything the backward pass needs, one entry per token.
struct moe_token_cache {
    route_result routing;
    std::vector<std::vector<double>> a;  // per selected expert: x.gate
    std::vector<std::vector<double>> b;  // per selected expert: x.up
    std::vector<std::vector<double>> h;  // silu(a) * b
};

// y[t] = multiplier * sum_{i in selected} w_i * SwiGLU_expert_i(h[t]).
// Unselected experts are never evaluated. eval_counter, when given, is
// incremented once per (token, evaluated expert).
tensor moe_forward(const tensor& h, const moe_layer_view& w, const moe_config& cfg,
                   int64_t layer, routing_log* log = nullptr,
                   std::vector<moe_token_cache>* cache = nullptr,
                   int64_t* eval_counter = nullptr);
tensor moe_forward(const tensor& h, const moe_layer_params& params, const moe_config& cfg,
                   int64_t layer = 0, routing_log* log = nullptr);

// L = E * sum_i f_i P_i over one layer's aggregates; f_i counts
// token-slots (k per token) normalized to sum 1, P_i is the mean full
// softmax probability.
double load_balance_loss(const routing_log& log, int64_t layer);

// Mean of (logsumexp of router logits)^2 over all token-layer records.
double router_z_loss(const routing_log& log);

}  // namespace mmoe
