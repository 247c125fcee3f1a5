#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmoe/checkpoint.hpp"
#include "mmoe/model.hpp"

namespace mmoe {

// ---- AdamW -------------------------------------------------------------

struct adamw_config {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

struct optimizer_state {
    adamw_config cfg;
    tensor_map m;
    tensor_map v;
    int64_t step = 0;
};

optimizer_state make_optimizer(const checkpoint& ckpt, adamw_config cfg = {});

// Decoupled decay (applied before the moment update), bias-corrected
// moments.
void adamw_step(tensor_map& params, const tensor_map& grads, optimizer_state& state, double lr);

// ---- learning-rate schedule (warmup-stable-decay) ----------------------

struct lr_stage {
    double token_budget = 0.0;
    double start_lr = 0.0;
    double end_lr = 0.0;
    std::string decay = "constant";  // "constant" | "linear"
};

struct lr_schedule {
    double warmup_tokens = 0.0;
    std::vector<lr_stage> stages;

    void validate() const;  // piecewise continuity across stage boundaries
};

double lr_at(double tokens_seen, const lr_schedule& schedule);

lr_schedule lr_schedule_from_json_text(const std::string& text);
// Reference recipe: warmup 8.4e9 to 4.9505e-4, constant through 2.4T,
// linear to 1e-5 over 1.7T, to 6e-6 over 500B, to 0 over 500B.
lr_schedule nano_reference_schedule();

// ---- staged data mixture -----------------------------------------------

struct mixture_stage {
    double token_budget = 0.0;
    std::vector<std::pair<std::string, double>> weights;  // normalized on load
};

struct mixture_schedule {
    std::vector<mixture_stage> stages;

    void validate() const;
    // stage active at a cumulative token count (clamps to the last stage)
    size_t stage_at(double tokens_seen) const;
};

mixture_schedule mixture_from_json_text(const std::string& text);
std::string mixture_to_json_text(const mixture_schedule& m);

// one categorical dataset draw under the active stage's weights
std::string draw_dataset(const mixture_schedule& m, double tokens_seen, rng_stream& rng);

// Corpus: one document per line, raw bytes. Token ids are bytes plus
// BOS=256, EOS=257, PAD=258.
constexpr int64_t kTokBOS = 256;
constexpr int64_t kTokEOS = 257;
constexpr int64_t kTokPAD = 258;

struct corpus {
    std::vector<std::vector<int64_t>> docs;  // tokenized, BOS ... EOS
};

corpus load_corpus_file(const std::string& path);
corpus corpus_from_lines(const std::vector<std::string>& lines);

struct sequence_sample {
    std::vector<int64_t> tokens;
    std::string dataset;  // provenance
};

// Draws batch_size sequences of seq_len+1 ids (inputs + shifted targets)
// from the datasets weighted by the active mixture stage.
std::vector<sequence_sample> sample_batch(const mixture_schedule& m, double tokens_seen,
                                          rng_stream& rng,
                                          const std::map<std::string, corpus>& sources,
                                          int64_t batch_size, int64_t seq_len);

// ---- training loop -----------------------------------------------------

struct train_coefficients {
    double balance = 0.01;
    double z = 0.001;
};

struct step_metrics {
    int64_t step = 0;
    double tokens_seen = 0.0;
    double lr = 0.0;
    double lm_loss = 0.0;
    double balance_loss = 0.0;
    double z_loss = 0.0;
    double total_loss = 0.0;
};

struct train_run_report {
    std::vector<step_metrics> steps;
    std::string to_csv() const;  // header: step,tokens,lr,lm,balance,z,total
};

struct train_options {
    int64_t steps = 100;
    int64_t batch_size = 4;
    int64_t seq_len = 64;
    uint64_t seed = 0;
    train_coefficients coeffs;
    lr_schedule schedule;
    mixture_schedule mixture;
};

// One optimizer step over a batch; throws (naming the offending term)
// on a non-finite loss. Gradients are averaged over the batch in order.
step_metrics train_step(checkpoint& ckpt, const std::vector<sequence_sample>& batch,
                        optimizer_state& optim, double lr, train_coefficients coeffs);

train_run_report train_run(checkpoint& ckpt, const std::map<std::string, corpus>& sources,
                           const train_options& opts);

struct ablation_result {
    train_run_report upcycled;
    train_run_report from_scratch;
};

// Paired comparison: (a) MoE upcycled from the warm-started dense
// checkpoint (slicing then drop-and-reinit expansion) vs (b) an
// identically shaped MoE from random init, same data order.
ablation_result ablation_run(const checkpoint& warm_dense, const struct upcycle_plan& plan,
                             const std::map<std::string, corpus>& sources,
                             const train_options& opts);

}  // namespace mmoe
