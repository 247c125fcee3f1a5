#include "mmoe/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace mmoe {

using ordered_json = nlohmann::ordered_json;

void moe_config::validate() const {
    if (d_expert < 1) throw config_error("moe: d_expert must be >= 1");
    if (n_experts < 1) throw config_error("moe: n_experts must be >= 1");
    if (top_k < 1 || top_k > n_experts) throw config_error("moe: top_k must be in [1, n_experts]");
}

void model_config::validate() const {
    if (n_layers < 1 || d_model < 1 || d_head < 1 || vocab_size < 1)
        throw config_error("model dimensions must be positive");
    if (n_q_heads < 1 || n_kv_heads < 1 || n_q_heads % n_kv_heads != 0)
        throw config_error("n_q_heads must be a positive multiple of n_kv_heads");
    if (d_head % 2 != 0) throw config_error("d_head must be even (RoPE pairing)");
    if (norm_eps <= 0) throw config_error("norm_eps must be positive");
    if (ffn_kind == "dense") {
        if (moe.has_value()) throw config_error("dense model must not carry moe config");
        if (d_ffn < 1) throw config_error("d_ffn must be positive");
    } else if (ffn_kind == "moe") {
        if (!moe.has_value()) throw config_error("moe model requires moe config");
        moe->validate();
    } else {
        throw config_error("ffn_kind must be 'dense' or 'moe'");
    }
}

static ordered_json config_to_json(const model_config& cfg) {
    ordered_json j;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["d_ffn"] = cfg.d_ffn;
    j["n_q_heads"] = cfg.n_q_heads;
    j["n_kv_heads"] = cfg.n_kv_heads;
    j["d_head"] = cfg.d_head;
    j["vocab_size"] = cfg.vocab_size;
    j["rope_theta"] = cfg.rope_theta;
    j["norm_eps"] = cfg.norm_eps;
    j["tie_embeddings"] = cfg.tie_embeddings;
    j["qk_norm"] = cfg.qk_norm;
    j["ffn_kind"] = cfg.ffn_kind;
    if (cfg.moe) {
        ordered_json m;
        m["d_expert"] = cfg.moe->d_expert;
        m["n_experts"] = cfg.moe->n_experts;
        m["top_k"] = cfg.moe->top_k;
        m["output_multiplier"] = cfg.moe->output_multiplier;
        m["norm_topk_prob"] = cfg.moe->norm_topk_prob;
        j["moe"] = m;
    }
    return j;
}

static model_config config_from_json(const ordered_json& j) {
    model_config cfg;
    cfg.n_layers = j.at("n_layers").get<int64_t>();
    cfg.d_model = j.at("d_model").get<int64_t>();
    cfg.d_ffn = j.value("d_ffn", int64_t{0});
    cfg.n_q_heads = j.at("n_q_heads").get<int64_t>();
    cfg.n_kv_heads = j.at("n_kv_heads").get<int64_t>();
    cfg.d_head = j.at("d_head").get<int64_t>();
    cfg.vocab_size = j.value("vocab_size", int64_t{259});
    cfg.rope_theta = j.value("rope_theta", 10000.0);
    cfg.norm_eps = j.value("norm_eps", 1e-6);
    cfg.tie_embeddings = j.value("tie_embeddings", true);
    cfg.qk_norm = j.value("qk_norm", true);
    cfg.ffn_kind = j.value("ffn_kind", std::string("dense"));
    if (j.contains("moe")) {
        moe_config m;
        const auto& mj = j.at("moe");
        m.d_expert = mj.at("d_expert").get<int64_t>();
        m.n_experts = mj.at("n_experts").get<int64_t>();
        m.top_k = mj.at("top_k").get<int64_t>();
        m.output_multiplier = mj.value("output_multiplier", 1.0);
        m.norm_topk_prob = mj.value("norm_topk_prob", false);
        cfg.moe = m;
    }
    cfg.validate();
    return cfg;
}

model_config config_from_json_text(const std::string& text) {
    return config_from_json(ordered_json::parse(text));
}

std::string config_to_json_text(const model_config& cfg) {
    return config_to_json(cfg).dump(2) + "\n";
}

void tensor_map::add(const std::string& name, tensor t) {
    if (index_.count(name)) throw config_error("duplicate tensor name: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
}

bool tensor_map::contains(const std::string& name) const { return index_.count(name) > 0; }

tensor& tensor_map::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw config_error("missing tensor: " + name);
    return items_[it->second].second;
}

const tensor& tensor_map::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw config_error("missing tensor: " + name);
    return items_[it->second].second;
}

std::vector<std::string> checkpoint::parameter_names(const model_config& cfg) {
    std::vector<std::string> names;
    names.push_back("embedding");
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        names.push_back(p + "attn_norm");
        names.push_back(p + "wq");
        names.push_back(p + "wk");
        names.push_back(p + "wv");
        names.push_back(p + "wo");
        if (cfg.qk_norm) {
            names.push_back(p + "q_norm");
            names.push_back(p + "k_norm");
        }
        names.push_back(p + "ffn_norm");
        if (cfg.is_moe()) {
            names.push_back(p + "router");
            for (int64_t e = 0; e < cfg.moe->n_experts; ++e) {
                const std::string ep = p + "expert." + std::to_string(e) + ".";
                names.push_back(ep + "gate");
                names.push_back(ep + "up");
                names.push_back(ep + "down");
            }
        } else {
            names.push_back(p + "ffn.gate");
            names.push_back(p + "ffn.up");
            names.push_back(p + "ffn.down");
        }
    }
    names.push_back("final_norm");
    if (!cfg.tie_embeddings) names.push_back("lm_head");
    return names;
}

std::vector<int64_t> parameter_shape(const model_config& cfg, const std::string& name) {
    const int64_t D = cfg.d_model;
    if (name == "embedding") return {cfg.vocab_size, D};
    if (name == "final_norm") return {D};
    if (name == "lm_head") return {D, cfg.vocab_size};
    auto ends_with = [&](const std::string& s) {
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".attn_norm") || ends_with(".ffn_norm")) return {D};
    if (ends_with(".q_norm") || ends_with(".k_norm")) return {cfg.d_head};
    if (ends_with(".wq")) return {D, cfg.n_q_heads * cfg.d_head};
    if (ends_with(".wk") || ends_with(".wv")) return {D, cfg.n_kv_heads * cfg.d_head};
    if (ends_with(".wo")) return {cfg.n_q_heads * cfg.d_head, D};
    if (ends_with(".router")) return {D, cfg.moe->n_experts};
    if (ends_with(".ffn.gate") || ends_with(".ffn.up")) return {D, cfg.d_ffn};
    if (ends_with(".ffn.down")) return {cfg.d_ffn, D};
    if (name.find(".expert.") != std::string::npos) {
        if (ends_with(".gate") || ends_with(".up")) return {D, cfg.moe->d_expert};
        if (ends_with(".down")) return {cfg.moe->d_expert, D};
    }
    throw config_error("unknown parameter name: " + name);
}

void checkpoint::validate() const {
    config.validate();
    const auto names = parameter_names(config);
    if (names.size() != tensors.size())
        throw config_error("checkpoint tensor count mismatch");
    for (const auto& n : names) {
        const tensor& t = tensors.at(n);
        if (t.shape != parameter_shape(config, n))
            throw config_error("checkpoint shape mismatch for " + n);
    }
}

// ---- file format -------------------------------------------------------

static constexpr char kMagic[4] = {'M', 'M', 'O', 'E'};
static constexpr uint32_t kVersion = 1;

template <typename T>
static void append_le(std::string& out, T v) {
    for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void save_checkpoint(const checkpoint& ckpt, const std::string& path) {
    ckpt.validate();
    ordered_json meta;
    meta["config"] = ordered_json::parse(config_to_json_text(ckpt.config));
    ordered_json dir = ordered_json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        const size_t elem = t.prec == precision::f32 ? 4 : 8;
        const uint64_t bytes = static_cast<uint64_t>(t.numel()) * elem;
        ordered_json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["offset"] = offset;
        e["length"] = bytes;
        e["dtype"] = t.prec == precision::f32 ? "f32" : "f64";
        dir.push_back(e);
        offset += bytes;
    }
    meta["tensors"] = dir;
    const std::string meta_text = meta.dump();

    std::string out;
    out.append(kMagic, 4);
    append_le<uint32_t>(out, kVersion);
    append_le<uint64_t>(out, static_cast<uint64_t>(meta_text.size()));
    out += meta_text;
    for (const auto& [name, t] : ckpt.tensors) {
        if (t.prec == precision::f32) {
            for (double v : t.data) {
                float f = static_cast<float>(v);
                uint32_t bits;
                std::memcpy(&bits, &f, 4);
                append_le<uint32_t>(out, bits);
            }
        } else {
            for (double v : t.data) {
                uint64_t bits;
                std::memcpy(&bits, &v, 8);
                append_le<uint64_t>(out, bits);
            }
        }
    }
    atomic_write_file(path, out);
}

template <typename T>
static T read_le(std::istream& in) {
    unsigned char buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path);
    const uint32_t version = read_le<uint32_t>(in);
    if (version != kVersion) throw std::runtime_error("unsupported checkpoint version");
    const uint64_t meta_len = read_le<uint64_t>(in);
    std::string meta_text(meta_len, '\0');
    in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
    const auto meta = ordered_json::parse(meta_text);

    checkpoint ckpt;
    ckpt.config = config_from_json_text(meta.at("config").dump());
    for (const auto& e : meta.at("tensors")) {
        tensor t(e.at("shape").get<std::vector<int64_t>>(),
                 e.at("dtype").get<std::string>() == "f32" ? precision::f32 : precision::f64);
        for (double& v : t.data) {
            if (t.prec == precision::f32) {
                uint32_t bits = read_le<uint32_t>(in);
                float f;
                std::memcpy(&f, &bits, 4);
                v = static_cast<double>(f);
            } else {
                uint64_t bits = read_le<uint64_t>(in);
                double d;
                std::memcpy(&d, &bits, 8);
                v = d;
            }
        }
        ckpt.tensors.add(e.at("name").get<std::string>(), std::move(t));
    }
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    ckpt.validate();
    return ckpt;
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace mmoe
