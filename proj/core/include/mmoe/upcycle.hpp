#pragma once

#include <string>
#include <vector>

#include "mmoe/checkpoint.hpp"
#include "mmoe/moe.hpp"

namespace mmoe {

struct plan_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class scale_mode {
    forward_multiplier,  // output_multiplier = N, weights untouched (exact)
    weight_scale,        // multiplier = 1, sliced weights scaled by N^(1/3)
};

struct upcycle_plan {
    int64_t d_expert = 0;
    int64_t n_total_experts = 0;  // E of the expanded model
    scale_mode mode = scale_mode::forward_multiplier;
    double drop_ratio = 0.5;
    uint64_t seed = 0;
    int64_t deploy_top_k = 8;          // top_k of the expanded model
    bool keep_pristine_replica = false;  // spare replica 0 of each slice from drop

    // derived from the dense geometry
    int64_t n_slices(int64_t d_ffn) const;
    int64_t replication(int64_t d_ffn) const;
    double lambda(int64_t d_ffn) const;  // N^(1/3)
    void validate(const model_config& dense_cfg) const;
};

upcycle_plan plan_from_json_text(const std::string& text);
std::string plan_to_json_text(const upcycle_plan& plan);

// Contiguous partition of the FFN intermediate dimension into
// N = H_dense / d_expert expert triplets; concatenation reconstructs
// the originals bit-exactly.
std::vector<expert_weights> slice_ffn(const tensor& w_gate, const tensor& w_up,
                                      const tensor& w_down, int64_t d_expert);

// Dense -> pseudo-MoE: every FFN becomes an N-expert MoE layer with a
// zero router and top_k = N. Exact in forward_multiplier mode.
checkpoint build_pseudo_moe(const checkpoint& dense, const upcycle_plan& plan);

// Selective re-initialization: ceil(drop_ratio * d_expert) intermediate
// indices redrawn per matrix from a Gaussian fit to the dropped entries.
expert_weights drop_reinit(const expert_weights& expert, double drop_ratio, rng_stream& rng);

// Pseudo-MoE -> full fine-grained MoE: each slice replicated E/N times,
// drop_reinit applied per replica with independent streams, router
// re-created at width E, top_k set to the deployment value.
checkpoint expand_to_full_moe(const checkpoint& pseudo, const upcycle_plan& plan);

struct equivalence_report {
    std::vector<double> per_layer_max_abs;  // worst FFN-block output diff per layer
    double logits_max_abs = 0.0;
    double logits_max_rel = 0.0;
    int64_t n_probes = 0;
    int64_t probe_length = 0;
    uint64_t seed = 0;
    double tolerance = 1e-8;
    bool pass = false;

    std::string to_json_text() const;
};

// Runs both models in double precision on random token sequences and
// reports worst-case differences. Passes iff logits_max_abs <= 1e-8.
equivalence_report verify_equivalence(const checkpoint& dense, const checkpoint& moe,
                                      int64_t n_probes, uint64_t seed,
                                      int64_t probe_length = 32);

}  // namespace mmoe
