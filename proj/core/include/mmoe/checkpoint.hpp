#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmoe/tensor.hpp"

namespace mmoe {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct moe_config {
    int64_t d_expert = 0;
    int64_t n_experts = 0;       // E, total experts
    int64_t top_k = 0;           // activated experts per token
    double output_multiplier = 1.0;  // 1, or N for the pseudo-MoE
    bool norm_topk_prob = false;

    void validate() const;
};

struct model_config {
    int64_t n_layers = 0;
    int64_t d_model = 0;
    int64_t d_ffn = 0;  // dense intermediate width
    int64_t n_q_heads = 0;
    int64_t n_kv_heads = 0;
    int64_t d_head = 0;
    int64_t vocab_size = 259;  // bytes + BOS/EOS/PAD
    double rope_theta = 10000.0;
    double norm_eps = 1e-6;
    bool tie_embeddings = true;
    bool qk_norm = true;
    std::string ffn_kind = "dense";  // "dense" | "moe"
    std::optional<moe_config> moe;

    bool is_moe() const { return ffn_kind == "moe"; }
    void validate() const;
};

model_config config_from_json_text(const std::string& text);
std::string config_to_json_text(const model_config& cfg);

// Ordered parameter-name -> tensor container shared by checkpoints,
// gradients, and optimizer moments.
class tensor_map {
  public:
    void add(const std::string& name, tensor t);
    bool contains(const std::string& name) const;
    tensor& at(const std::string& name);
    const tensor& at(const std::string& name) const;
    size_t size() const { return items_.size(); }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

  private:
    std::vector<std::pair<std::string, tensor>> items_;
    std::map<std::string, size_t> index_;
};

struct checkpoint {
    model_config config;
    tensor_map tensors;

    // Canonical parameter names for this config, in serialization order.
    static std::vector<std::string> parameter_names(const model_config& cfg);
    // Throws unless every required name is present with the right shape.
    void validate() const;
};

std::vector<int64_t> parameter_shape(const model_config& cfg, const std::string& name);

// "MMOE" file format: magic, u32 version, u64 metadata length, JSON
// metadata (config + tensor directory), then raw little-endian payloads.
void save_checkpoint(const checkpoint& ckpt, const std::string& path);
checkpoint load_checkpoint(const std::string& path);

// Writes to path.tmp then renames.
void atomic_write_file(const std::string& path, const std::string& bytes);

}  // namespace mmoe
