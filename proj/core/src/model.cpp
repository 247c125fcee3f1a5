#include "mmoe/model.hpp"

#include <cmath>
#include <cstring>

namespace mmoe {

namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

bool is_norm_gain(const std::string& name) {
    return name == "final_norm" || name.ends_with("_norm");
}

checkpoint init_checkpoint(const model_config& cfg, uint64_t seed, precision prec) {
    cfg.validate();
    checkpoint ckpt;
    ckpt.config = cfg;
    for (const auto& name : checkpoint::parameter_names(cfg)) {
        tensor t(parameter_shape(cfg, name), prec);
        if (is_norm_gain(name)) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        } else if (name.ends_with(".router")) {
            // zero-initialized routers
        } else {
            rng_stream rng(seed, {fnv1a(name)});
            for (double& v : t.data) v = rng.next_normal(0.0, 0.02);
        }
        apply_precision(t);
        ckpt.tensors.add(name, std::move(t));
    }
    return ckpt;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct norm_cache {
    std::vector<double> r;  // per-row 1/sqrt(mean(x^2)+eps)
};

tensor rms_norm_cached(const tensor& x, const tensor& gamma, double eps, norm_cache& nc) {
    const int64_t d = x.cols();
    tensor out = x;
    nc.r.resize(static_cast<size_t>(x.rows()));
    for (int64_t i = 0; i < x.rows(); ++i) {
        const double* xi = x.data.data() + i * d;
        double* oi = out.data.data() + i * d;
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += xi[j] * xi[j];
        const double r = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
        nc.r[static_cast<size_t>(i)] = r;
        for (int64_t j = 0; j < d; ++j) oi[j] = xi[j] * r * gamma.data[j];
    }
    return out;
}

// dx and dgamma from dy, given the forward input x and cached r.
void rms_norm_backward(const tensor& x, const tensor& gamma, const norm_cache& nc,
                       const tensor& dy, tensor& dx, tensor& dgamma) {
    const int64_t d = x.cols();
    for (int64_t i = 0; i < x.rows(); ++i) {
        const double* xi = x.data.data() + i * d;
        const double* dyi = dy.data.data() + i * d;
        double* dxi = dx.data.data() + i * d;
        const double r = nc.r[static_cast<size_t>(i)];
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) s += dyi[j] * gamma.data[j] * xi[j];
        const double c = r * r * r * s / static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
            dxi[j] += r * dyi[j] * gamma.data[j] - xi[j] * c;
            dgamma.data[j] += dyi[j] * xi[j] * r;
        }
    }
}

// Per-(token, head) RMSNorm over d_head-wide slices with a shared gain.
tensor head_norm_cached(const tensor& x, const tensor& gamma, double eps, int64_t d_head,
                        norm_cache& nc) {
    const int64_t w = x.cols();
    const int64_t heads = w / d_head;
    tensor out = x;
    nc.r.resize(static_cast<size_t>(x.rows() * heads));
    for (int64_t t = 0; t < x.rows(); ++t) {
        for (int64_t h = 0; h < heads; ++h) {
            const double* xi = x.data.data() + t * w + h * d_head;
            double* oi = out.data.data() + t * w + h * d_head;
            double ms = 0.0;
            for (int64_t j = 0; j < d_head; ++j) ms += xi[j] * xi[j];
            const double r = 1.0 / std::sqrt(ms / static_cast<double>(d_head) + eps);
            nc.r[static_cast<size_t>(t * heads + h)] = r;
            for (int64_t j = 0; j < d_head; ++j) oi[j] = xi[j] * r * gamma.data[j];
        }
    }
    return out;
}

void head_norm_backward(const tensor& x, const tensor& gamma, const norm_cache& nc,
                        int64_t d_head, const tensor& dy, tensor& dx, tensor& dgamma) {
    const int64_t w = x.cols();
    const int64_t heads = w / d_head;
    for (int64_t t = 0; t < x.rows(); ++t) {
        for (int64_t h = 0; h < heads; ++h) {
            const double* xi = x.data.data() + t * w + h * d_head;
            const double* dyi = dy.data.data() + t * w + h * d_head;
            double* dxi = dx.data.data() + t * w + h * d_head;
            const double r = nc.r[static_cast<size_t>(t * heads + h)];
            double s = 0.0;
            for (int64_t j = 0; j < d_head; ++j) s += dyi[j] * gamma.data[j] * xi[j];
            const double c = r * r * r * s / static_cast<double>(d_head);
            for (int64_t j = 0; j < d_head; ++j) {
                dxi[j] += r * dyi[j] * gamma.data[j] - xi[j] * c;
                dgamma.data[j] += dyi[j] * xi[j] * r;
            }
        }
    }
}

void rope_rotate_inplace(tensor& x, const std::vector<int64_t>& positions, double theta_base,
                         int64_t d_head, bool inverse) {
    const int64_t w = x.cols();
    const int64_t half = d_head / 2;
    for (int64_t t = 0; t < x.rows(); ++t) {
        const double pos = static_cast<double>(positions[static_cast<size_t>(t)]);
        for (int64_t h = 0; h < w / d_head; ++h) {
            double* xi = x.data.data() + t * w + h * d_head;
            for (int64_t i = 0; i < half; ++i) {
                const double freq =
                    std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
                double ang = pos * freq;
                if (inverse) ang = -ang;
                const double c = std::cos(ang), s = std::sin(ang);
                const double a = xi[i], b = xi[i + half];
                xi[i] = a * c - b * s;
                xi[i + half] = a * s + b * c;
            }
        }
    }
}

// c += a^T b  for a: [m x k], b: [m x n], c: [k x n]
void accum_at_b(const tensor& a, const tensor& b, tensor& c) {
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    for (int64_t t = 0; t < m; ++t) {
        for (int64_t i = 0; i < k; ++i) {
            const double av = a.data[t * k + i];
            const double* brow = b.data.data() + t * n;
            double* crow = c.data.data() + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c += a b^T  for a: [m x n], b: [k x n], c: [m x k]
void accum_a_bt(const tensor& a, const tensor& b, tensor& c) {
    const int64_t m = a.shape[0], n = a.shape[1], k = b.shape[0];
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a.data.data() + i * n;
        double* crow = c.data.data() + i * k;
        for (int64_t j = 0; j < k; ++j) {
            const double* brow = b.data.data() + j * n;
            double s = 0.0;
            for (int64_t t = 0; t < n; ++t) s += arow[t] * brow[t];
            crow[j] += s;
        }
    }
}

struct layer_cache {
    tensor x_in;
    tensor attn_norm_out;
    norm_cache attn_nc;
    tensor q_pre, k_pre;    // pre qk-norm projections (kept when qk_norm)
    norm_cache q_nc, k_nc;
    tensor q_rope, k_rope;  // post norm + rope
    tensor v;
    std::vector<tensor> attn_probs;  // per q-head [T x T]
    tensor attn_out;                 // [T x Hq*dh]
    tensor x_mid;
    tensor ffn_norm_out;
    norm_cache ffn_nc;
    tensor dense_a, dense_b;  // dense FFN pre-activations
    std::vector<moe_token_cache> moe_cache;
    tensor ffn_out;
};

struct full_cache {
    std::vector<layer_cache> layers;
    tensor x_final;
    tensor final_norm_out;
    norm_cache final_nc;
    tensor logits;
    routing_log log;
};

void attention_forward(const checkpoint& ckpt, int64_t layer, const std::vector<int64_t>& positions,
                       layer_cache& lc) {
    const model_config& cfg = ckpt.config;
    const int64_t T = lc.attn_norm_out.rows();
    const int64_t dh = cfg.d_head;
    const int64_t Hq = cfg.n_q_heads, Hkv = cfg.n_kv_heads;
    const int64_t group = Hq / Hkv;
    const std::string p = "layer." + std::to_string(layer) + ".";

    tensor q = matmul(lc.attn_norm_out, ckpt.tensors.at(p + "wq"));
    tensor k = matmul(lc.attn_norm_out, ckpt.tensors.at(p + "wk"));
    lc.v = matmul(lc.attn_norm_out, ckpt.tensors.at(p + "wv"));
    if (cfg.qk_norm) {
        lc.q_pre = q;
        lc.k_pre = k;
        q = head_norm_cached(q, ckpt.tensors.at(p + "q_norm"), cfg.norm_eps, dh, lc.q_nc);
        k = head_norm_cached(k, ckpt.tensors.at(p + "k_norm"), cfg.norm_eps, dh, lc.k_nc);
    }
    rope_rotate_inplace(q, positions, cfg.rope_theta, dh, false);
    rope_rotate_inplace(k, positions, cfg.rope_theta, dh, false);
    lc.q_rope = std::move(q);
    lc.k_rope = std::move(k);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    lc.attn_out = tensor({T, Hq * dh}, lc.attn_norm_out.prec);
    lc.attn_probs.assign(static_cast<size_t>(Hq), tensor({T, T}));
    for (int64_t h = 0; h < Hq; ++h) {
        const int64_t kv = h / group;
        tensor& probs = lc.attn_probs[static_cast<size_t>(h)];
        for (int64_t t = 0; t < T; ++t) {
            const double* qt = lc.q_rope.data.data() + t * Hq * dh + h * dh;
            double mx = -1e300;
            std::vector<double> s(static_cast<size_t>(t + 1));
            for (int64_t u = 0; u <= t; ++u) {
                const double* ku = lc.k_rope.data.data() + u * Hkv * dh + kv * dh;
                double dot = 0.0;
                for (int64_t j = 0; j < dh; ++j) dot += qt[j] * ku[j];
                s[static_cast<size_t>(u)] = dot * scale;
                mx = std::max(mx, s[static_cast<size_t>(u)]);
            }
            double sum = 0.0;
            for (int64_t u = 0; u <= t; ++u) {
                s[static_cast<size_t>(u)] = std::exp(s[static_cast<size_t>(u)] - mx);
                sum += s[static_cast<size_t>(u)];
            }
            double* out = lc.attn_out.data.data() + t * Hq * dh + h * dh;
            for (int64_t u = 0; u <= t; ++u) {
                const double pw = s[static_cast<size_t>(u)] / sum;
                probs.at2(t, u) = pw;
                const double* vu = lc.v.data.data() + u * Hkv * dh + kv * dh;
                for (int64_t j = 0; j < dh; ++j) out[j] += pw * vu[j];
            }
        }
    }
    apply_precision(lc.attn_out);
}

void run_forward(const std::vector<int64_t>& tokens, const checkpoint& ckpt, full_cache& fc,
                 bool capture_ffn = false) {
    const model_config& cfg = ckpt.config;
    const int64_t T = static_cast<int64_t>(tokens.size());
    if (T == 0) throw std::invalid_argument("empty token sequence");
    for (int64_t id : tokens) {
        if (id < 0 || id >= cfg.vocab_size)
            throw std::invalid_argument("token id out of range: " + std::to_string(id));
    }
    std::vector<int64_t> positions(tokens.size());
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int64_t>(i);

    if (cfg.is_moe()) fc.log.init(cfg.n_layers, cfg.moe->n_experts, cfg.moe->top_k);

    const tensor& emb = ckpt.tensors.at("embedding");
    tensor x({T, cfg.d_model}, emb.prec);
    for (int64_t t = 0; t < T; ++t) {
        std::memcpy(x.data.data() + t * cfg.d_model, emb.data.data() + tokens[t] * cfg.d_model,
                    sizeof(double) * static_cast<size_t>(cfg.d_model));
    }

    fc.layers.assign(static_cast<size_t>(cfg.n_layers), {});
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        layer_cache& lc = fc.layers[static_cast<size_t>(l)];
        const std::string p = "layer." + std::to_string(l) + ".";
        lc.x_in = x;
        lc.attn_norm_out =
            rms_norm_cached(x, ckpt.tensors.at(p + "attn_norm"), cfg.norm_eps, lc.attn_nc);
        attention_forward(ckpt, l, positions, lc);
        tensor y = matmul(lc.attn_out, ckpt.tensors.at(p + "wo"));
        for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
        apply_precision(x);
        lc.x_mid = x;
        lc.ffn_norm_out =
            rms_norm_cached(x, ckpt.tensors.at(p + "ffn_norm"), cfg.norm_eps, lc.ffn_nc);
        if (cfg.is_moe()) {
            moe_layer_view mv = moe_layer_view::from_checkpoint(ckpt, l);
            lc.ffn_out = moe_forward(lc.ffn_norm_out, mv, *cfg.moe, l, &fc.log, &lc.moe_cache);
        } else {
            lc.dense_a = matmul(lc.ffn_norm_out, ckpt.tensors.at(p + "ffn.gate"));
            lc.dense_b = matmul(lc.ffn_norm_out, ckpt.tensors.at(p + "ffn.up"));
            tensor act = lc.dense_a;
            for (size_t i = 0; i < act.data.size(); ++i)
                act.data[i] = act.data[i] * sigmoid(act.data[i]) * lc.dense_b.data[i];
            lc.ffn_out = matmul(act, ckpt.tensors.at(p + "ffn.down"));
        }
        for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += lc.ffn_out.data[i];
        apply_precision(x);
        if (!capture_ffn) {
            // keep memory bounded when only logits are needed
        }
    }
    fc.x_final = x;
    fc.final_norm_out =
        rms_norm_cached(x, ckpt.tensors.at("final_norm"), cfg.norm_eps, fc.final_nc);
    if (cfg.tie_embeddings) {
        fc.logits = tensor({T, cfg.vocab_size}, emb.prec);
        accum_a_bt(fc.final_norm_out, emb, fc.logits);
        apply_precision(fc.logits);
    } else {
        fc.logits = matmul(fc.final_norm_out, ckpt.tensors.at("lm_head"));
    }
}

}  // namespace

checkpoint init_dense(const model_config& cfg, uint64_t seed, precision prec) {
    if (cfg.is_moe()) throw config_error("init_dense requires a dense config");
    return init_checkpoint(cfg, seed, prec);
}

checkpoint init_moe(const model_config& cfg, uint64_t seed, precision prec) {
    if (!cfg.is_moe()) throw config_error("init_moe requires an moe config");
    return init_checkpoint(cfg, seed, prec);
}

tensor gqa_attention(const tensor& h, const checkpoint& ckpt, int64_t layer,
                     const std::vector<int64_t>& positions) {
    layer_cache lc;
    lc.attn_norm_out = h;
    attention_forward(ckpt, layer, positions, lc);
    tensor y = matmul(lc.attn_out, ckpt.tensors.at("layer." + std::to_string(layer) + ".wo"));
    return y;
}

tensor dense_ffn(const tensor& h, const tensor& w_gate, const tensor& w_up, const tensor& w_down) {
    tensor a = matmul(h, w_gate);
    tensor b = matmul(h, w_up);
    for (size_t i = 0; i < a.data.size(); ++i)
        a.data[i] = a.data[i] * sigmoid(a.data[i]) * b.data[i];
    return matmul(a, w_down);
}

forward_result forward_logits(const std::vector<int64_t>& tokens, const checkpoint& ckpt,
                              bool capture_ffn_outputs) {
    full_cache fc;
    run_forward(tokens, ckpt, fc, capture_ffn_outputs);
    forward_result res;
    res.logits = std::move(fc.logits);
    const precision prec = ckpt.tensors.at("embedding").prec;
    res.logits.prec = prec;
    apply_precision(res.logits);
    ensure_finite(res.logits, "forward logits");
    res.log = std::move(fc.log);
    if (capture_ffn_outputs) {
        for (auto& lc : fc.layers) res.ffn_outputs.push_back(std::move(lc.ffn_out));
    }
    return res;
}

gradient_set zero_grads_like(const checkpoint& ckpt) {
    gradient_set g;
    for (const auto& [name, t] : ckpt.tensors) g.add(name, tensor(t.shape, t.prec));
    return g;
}

loss_result lm_loss_and_grads(const std::vector<int64_t>& tokens,
                              const std::vector<int64_t>& targets, const checkpoint& ckpt,
                              aux_coefficients coeffs) {
    if (tokens.size() != targets.size())
        throw std::invalid_argument("tokens/targets length mismatch");
    const model_config& cfg = ckpt.config;
    const int64_t T = static_cast<int64_t>(tokens.size());
    const int64_t D = cfg.d_model;
    const int64_t V = cfg.vocab_size;
    for (int64_t id : targets) {
        if (id < 0 || id >= V) throw std::invalid_argument("target id out of range");
    }

    full_cache fc;
    run_forward(tokens, ckpt, fc, false);

    loss_result res;
    res.grads = zero_grads_like(ckpt);
    for (auto& [name, g] : res.grads) g.prec = precision::f64;  // accumulate in double

    // cross-entropy and dlogits
    tensor dlogits({T, V});
    double lm = 0.0;
    for (int64_t t = 0; t < T; ++t) {
        const double* row = fc.logits.data.data() + t * V;
        double mx = row[0];
        for (int64_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
        double sum = 0.0;
        for (int64_t v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
        const double lse = mx + std::log(sum);
        lm += lse - row[targets[static_cast<size_t>(t)]];
        double* dl = dlogits.data.data() + t * V;
        for (int64_t v = 0; v < V; ++v)
            dl[v] = std::exp(row[v] - lse) / static_cast<double>(T);
        dl[targets[static_cast<size_t>(t)]] -= 1.0 / static_cast<double>(T);
    }
    res.lm_loss = lm / static_cast<double>(T);

    int64_t n_moe_layers = 0;
    if (cfg.is_moe()) {
        n_moe_layers = cfg.n_layers;
        double bal = 0.0;
        for (int64_t l = 0; l < cfg.n_layers; ++l) bal += load_balance_loss(fc.log, l);
        res.balance_loss = bal / static_cast<double>(n_moe_layers);
        res.z_loss = router_z_loss(fc.log);
    }
    res.total = res.lm_loss + coeffs.balance * res.balance_loss + coeffs.z * res.z_loss;
    res.log = std::move(fc.log);

    // ---- backward ------------------------------------------------------
    const tensor& emb = ckpt.tensors.at("embedding");
    tensor dx({T, D});
    if (cfg.tie_embeddings) {
        // logits = final_norm_out . emb^T
        accum_at_b(dlogits, fc.final_norm_out, res.grads.at("embedding"));
        tensor dfn({T, D});
        // dfn = dlogits . emb
        for (int64_t t = 0; t < T; ++t) {
            const double* dl = dlogits.data.data() + t * V;
            double* out = dfn.data.data() + t * D;
            for (int64_t v = 0; v < V; ++v) {
                const double g = dl[v];
                if (g == 0.0) continue;
                const double* er = emb.data.data() + v * D;
                for (int64_t j = 0; j < D; ++j) out[j] += g * er[j];
            }
        }
        rms_norm_backward(fc.x_final, ckpt.tensors.at("final_norm"), fc.final_nc, dfn, dx,
                          res.grads.at("final_norm"));
    } else {
        accum_at_b(fc.final_norm_out, dlogits, res.grads.at("lm_head"));
        tensor dfn({T, D});
        accum_a_bt(dlogits, ckpt.tensors.at("lm_head"), dfn);
        rms_norm_backward(fc.x_final, ckpt.tensors.at("final_norm"), fc.final_nc, dfn, dx,
                          res.grads.at("final_norm"));
    }

    const int64_t dh = cfg.d_head;
    const int64_t Hq = cfg.n_q_heads, Hkv = cfg.n_kv_heads;
    const int64_t group = Hq / Hkv;
    std::vector<int64_t> positions(tokens.size());
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int64_t>(i);

    for (int64_t l = cfg.n_layers - 1; l >= 0; --l) {
        layer_cache& lc = fc.layers[static_cast<size_t>(l)];
        const std::string p = "layer." + std::to_string(l) + ".";

        // FFN/MoE block: x_out = x_mid + ffn(ffn_norm(x_mid))
        tensor dxn({T, D});
        if (cfg.is_moe()) {
            const moe_config& mc = *cfg.moe;
            const int64_t He = mc.d_expert;
            const int64_t E = mc.n_experts;
            moe_layer_view mv = moe_layer_view::from_checkpoint(ckpt, l);
            for (int64_t t = 0; t < T; ++t) {
                const moe_token_cache& tc = lc.moe_cache[static_cast<size_t>(t)];
                const double* df = dx.data.data() + t * D;
                const double* xn = lc.ffn_norm_out.data.data() + t * D;
                double* dxnt = dxn.data.data() + t * D;

                std::vector<double> dw(tc.routing.indices.size(), 0.0);
                for (size_t s = 0; s < tc.routing.indices.size(); ++s) {
                    const int64_t e = tc.routing.indices[s];
                    const double w = tc.routing.weights[s];
                    const double scale = mc.output_multiplier * w;
                    const tensor& Dn = *mv.down[e];
                    const tensor& G = *mv.gate[e];
                    const tensor& U = *mv.up[e];
                    tensor& dDn = res.grads.at(p + "expert." + std::to_string(e) + ".down");
                    tensor& dG = res.grads.at(p + "expert." + std::to_string(e) + ".gate");
                    tensor& dU = res.grads.at(p + "expert." + std::to_string(e) + ".up");

                    // y_e = h_e . down ; contribution scale * y_e
                    std::vector<double> dh_e(static_cast<size_t>(He), 0.0);
                    double dwe = 0.0;
                    for (int64_t j = 0; j < He; ++j) {
                        const double* drow = Dn.data.data() + j * D;
                        double acc = 0.0;
                        for (int64_t i = 0; i < D; ++i) acc += drow[i] * df[i];
                        dh_e[static_cast<size_t>(j)] = acc * scale;
                        dwe += acc * tc.h[s][static_cast<size_t>(j)];
                        double* dd = dDn.data.data() + j * D;
                        const double hs = tc.h[s][static_cast<size_t>(j)] * scale;
                        for (int64_t i = 0; i < D; ++i) dd[i] += hs * df[i];
                    }
                    dw[s] = dwe * mc.output_multiplier;

                    // h_e = silu(a) * b
                    std::vector<double> da(static_cast<size_t>(He)), db(static_cast<size_t>(He));
                    for (int64_t j = 0; j < He; ++j) {
                        const double a = tc.a[s][static_cast<size_t>(j)];
                        const double b = tc.b[s][static_cast<size_t>(j)];
                        const double sg = sigmoid(a);
                        const double dsilu = sg * (1.0 + a * (1.0 - sg));
                        da[j] = dh_e[j] * b * dsilu;
                        db[j] = dh_e[j] * a * sg;
                    }
                    for (int64_t i = 0; i < D; ++i) {
                        const double xv = xn[i];
                        double* dgr = dG.data.data() + i * He;
                        double* dur = dU.data.data() + i * He;
                        const double* gr = G.data.data() + i * He;
                        const double* ur = U.data.data() + i * He;
                        double acc = 0.0;
                        for (int64_t j = 0; j < He; ++j) {
                            dgr[j] += xv * da[j];
                            dur[j] += xv * db[j];
                            acc += gr[j] * da[j] + ur[j] * db[j];
                        }
                        dxnt[i] += acc;
                    }
                }

                // routing gradient: weights -> probs -> logits
                const auto& pr = tc.routing.probs;
                std::vector<double> dp(static_cast<size_t>(E), 0.0);
                if (mc.norm_topk_prob) {
                    double S = 0.0, dot = 0.0;
                    for (size_t s = 0; s < tc.routing.indices.size(); ++s)
                        S += pr[static_cast<size_t>(tc.routing.indices[s])];
                    for (size_t s = 0; s < tc.routing.indices.size(); ++s)
                        dot += dw[s] * pr[static_cast<size_t>(tc.routing.indices[s])];
                    for (size_t s = 0; s < tc.routing.indices.size(); ++s)
                        dp[static_cast<size_t>(tc.routing.indices[s])] = dw[s] / S - dot / (S * S);
                } else {
                    for (size_t s = 0; s < tc.routing.indices.size(); ++s)
                        dp[static_cast<size_t>(tc.routing.indices[s])] = dw[s];
                }
                if (coeffs.balance != 0.0) {
                    // per-layer L = E * sum_i f_i P_i, f constant, P_i mean prob
                    const auto& c = res.log.counts[static_cast<size_t>(l)];
                    const double slots = static_cast<double>(T) * static_cast<double>(mc.top_k);
                    const double cscale = coeffs.balance / static_cast<double>(n_moe_layers);
                    for (int64_t e = 0; e < E; ++e) {
                        const double f = static_cast<double>(c[static_cast<size_t>(e)]) / slots;
                        dp[static_cast<size_t>(e)] +=
                            cscale * static_cast<double>(E) * f / static_cast<double>(T);
                    }
                }
                std::vector<double> dlogit(static_cast<size_t>(E), 0.0);
                double gdotp = 0.0;
                for (int64_t e = 0; e < E; ++e) gdotp += dp[e] * pr[e];
                for (int64_t e = 0; e < E; ++e) dlogit[e] = pr[e] * (dp[e] - gdotp);
                if (coeffs.z != 0.0) {
                    const double zscale = coeffs.z * 2.0 * tc.routing.lse /
                                          (static_cast<double>(T) * static_cast<double>(n_moe_layers));
                    for (int64_t e = 0; e < E; ++e) dlogit[e] += zscale * pr[e];
                }
                tensor& dR = res.grads.at(p + "router");
                const tensor& R = *mv.router;
                for (int64_t i = 0; i < D; ++i) {
                    const double xv = xn[i];
                    double* drr = dR.data.data() + i * E;
                    const double* rr = R.data.data() + i * E;
                    double acc = 0.0;
                    for (int64_t e = 0; e < E; ++e) {
                        drr[e] += xv * dlogit[e];
                        acc += rr[e] * dlogit[e];
                    }
                    dxnt[i] += acc;
                }
            }
        } else {
            const int64_t H = cfg.d_ffn;
            const tensor& Dn = ckpt.tensors.at(p + "ffn.down");
            tensor act = lc.dense_a;
            for (size_t i = 0; i < act.data.size(); ++i)
                act.data[i] = act.data[i] * sigmoid(act.data[i]) * lc.dense_b.data[i];
            accum_at_b(act, dx, res.grads.at(p + "ffn.down"));
            tensor dact({T, H});
            accum_a_bt(dx, Dn, dact);
            tensor da({T, H}), db({T, H});
            for (size_t i = 0; i < da.data.size(); ++i) {
                const double a = lc.dense_a.data[i];
                const double b = lc.dense_b.data[i];
                const double sg = sigmoid(a);
                da.data[i] = dact.data[i] * b * sg * (1.0 + a * (1.0 - sg));
                db.data[i] = dact.data[i] * a * sg;
            }
            accum_at_b(lc.ffn_norm_out, da, res.grads.at(p + "ffn.gate"));
            accum_at_b(lc.ffn_norm_out, db, res.grads.at(p + "ffn.up"));
            accum_a_bt(da, ckpt.tensors.at(p + "ffn.gate"), dxn);
            accum_a_bt(db, ckpt.tensors.at(p + "ffn.up"), dxn);
        }
        // residual + ffn_norm
        rms_norm_backward(lc.x_mid, ckpt.tensors.at(p + "ffn_norm"), lc.ffn_nc, dxn, dx,
                          res.grads.at(p + "ffn_norm"));

        // attention block: x_mid = x_in + (attn_out . wo)
        accum_at_b(lc.attn_out, dx, res.grads.at(p + "wo"));
        tensor dattn({T, Hq * dh});
        accum_a_bt(dx, ckpt.tensors.at(p + "wo"), dattn);

        tensor dq({T, Hq * dh}), dk({T, Hkv * dh}), dv({T, Hkv * dh});
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int64_t h = 0; h < Hq; ++h) {
            const int64_t kv = h / group;
            const tensor& probs = lc.attn_probs[static_cast<size_t>(h)];
            for (int64_t t = 0; t < T; ++t) {
                const double* dout = dattn.data.data() + t * Hq * dh + h * dh;
                std::vector<double> dpv(static_cast<size_t>(t + 1), 0.0);
                double pdot = 0.0;
                for (int64_t u = 0; u <= t; ++u) {
                    const double* vu = lc.v.data.data() + u * Hkv * dh + kv * dh;
                    double acc = 0.0;
                    for (int64_t j = 0; j < dh; ++j) acc += dout[j] * vu[j];
                    dpv[static_cast<size_t>(u)] = acc;
                    pdot += acc * probs.at2(t, u);
                    double* dvu = dv.data.data() + u * Hkv * dh + kv * dh;
                    const double pw = probs.at2(t, u);
                    for (int64_t j = 0; j < dh; ++j) dvu[j] += pw * dout[j];
                }
                double* dqt = dq.data.data() + t * Hq * dh + h * dh;
                const double* qt = lc.q_rope.data.data() + t * Hq * dh + h * dh;
                for (int64_t u = 0; u <= t; ++u) {
                    const double ds =
                        probs.at2(t, u) * (dpv[static_cast<size_t>(u)] - pdot) * scale;
                    const double* ku = lc.k_rope.data.data() + u * Hkv * dh + kv * dh;
                    double* dku = dk.data.data() + u * Hkv * dh + kv * dh;
                    for (int64_t j = 0; j < dh; ++j) {
                        dqt[j] += ds * ku[j];
                        dku[j] += ds * qt[j];
                    }
                }
            }
        }
        // undo RoPE (inverse rotation)
        rope_rotate_inplace(dq, positions, cfg.rope_theta, dh, true);
        rope_rotate_inplace(dk, positions, cfg.rope_theta, dh, true);

        tensor dxn_attn({T, D});
        if (cfg.qk_norm) {
            tensor dq_pre({T, Hq * dh}), dk_pre({T, Hkv * dh});
            head_norm_backward(lc.q_pre, ckpt.tensors.at(p + "q_norm"), lc.q_nc, dh, dq, dq_pre,
                               res.grads.at(p + "q_norm"));
            head_norm_backward(lc.k_pre, ckpt.tensors.at(p + "k_norm"), lc.k_nc, dh, dk, dk_pre,
                               res.grads.at(p + "k_norm"));
            dq = std::move(dq_pre);
            dk = std::move(dk_pre);
        }
        accum_at_b(lc.attn_norm_out, dq, res.grads.at(p + "wq"));
        accum_at_b(lc.attn_norm_out, dk, res.grads.at(p + "wk"));
        accum_at_b(lc.attn_norm_out, dv, res.grads.at(p + "wv"));
        accum_a_bt(dq, ckpt.tensors.at(p + "wq"), dxn_attn);
        accum_a_bt(dk, ckpt.tensors.at(p + "wk"), dxn_attn);
        accum_a_bt(dv, ckpt.tensors.at(p + "wv"), dxn_attn);

        rms_norm_backward(lc.x_in, ckpt.tensors.at(p + "attn_norm"), lc.attn_nc, dxn_attn, dx,
                          res.grads.at(p + "attn_norm"));
    }

    // embedding lookup backward
    tensor& demb = res.grads.at("embedding");
    for (int64_t t = 0; t < T; ++t) {
        double* row = demb.data.data() + tokens[static_cast<size_t>(t)] * D;
        const double* dxt = dx.data.data() + t * D;
        for (int64_t j = 0; j < D; ++j) row[j] += dxt[j];
    }

    const precision prec = ckpt.tensors.at("embedding").prec;
    for (auto& [name, g] : res.grads) {
        g.prec = prec;
        apply_precision(g);
        ensure_finite(g, "gradient of " + name);
    }
    return res;
}

}  // namespace mmoe
