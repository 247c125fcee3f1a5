#include "mmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace mmoe {

moe_layer_view moe_layer_view::of(const moe_layer_params& p) {
    moe_layer_view v;
    v.router = &p.router;
    for (const auto& e : p.experts) {
        v.gate.push_back(&e.gate);
        v.up.push_back(&e.up);
        v.down.push_back(&e.down);
    }
    return v;
}

moe_layer_view moe_layer_view::from_checkpoint(const checkpoint& ckpt, int64_t layer) {
    if (!ckpt.config.is_moe()) throw config_error("checkpoint has no MoE layers");
    moe_layer_view v;
    const std::string p = "layer." + std::to_string(layer) + ".";
    v.router = &ckpt.tensors.at(p + "router");
    for (int64_t e = 0; e < ckpt.config.moe->n_experts; ++e) {
        const std::string ep = p + "expert." + std::to_string(e) + ".";
        v.gate.push_back(&ckpt.tensors.at(ep + "gate"));
        v.up.push_back(&ckpt.tensors.at(ep + "up"));
        v.down.push_back(&ckpt.tensors.at(ep + "down"));
    }
    return v;
}

void routing_log::init(int64_t layers, int64_t experts, int64_t k) {
    n_layers = layers;
    n_experts = experts;
    top_k = k;
    counts.assign(static_cast<size_t>(layers), std::vector<int64_t>(static_cast<size_t>(experts), 0));
    prob_sums.assign(static_cast<size_t>(layers), std::vector<double>(static_cast<size_t>(experts), 0.0));
    tokens_per_layer.assign(static_cast<size_t>(layers), 0);
    records.clear();
}

void routing_log::add(int64_t layer, int64_t pos, const std::vector<int64_t>& sel,
                      const std::vector<double>& weights, const std::vector<double>& full_probs,
                      double lse) {
    records.push_back({layer, pos, sel, weights, lse});
    auto& c = counts.at(static_cast<size_t>(layer));
    for (int64_t e : sel) c.at(static_cast<size_t>(e)) += 1;
    auto& ps = prob_sums.at(static_cast<size_t>(layer));
    for (size_t e = 0; e < full_probs.size(); ++e) ps[e] += full_probs[e];
    tokens_per_layer.at(static_cast<size_t>(layer)) += 1;
}

void routing_log::merge(const routing_log& other) {
    if (n_layers == 0) init(other.n_layers, other.n_experts, other.top_k);
    if (n_layers != other.n_layers || n_experts != other.n_experts || top_k != other.top_k)
        throw config_error("routing_log merge shape mismatch");
    records.insert(records.end(), other.records.begin(), other.records.end());
    for (int64_t l = 0; l < n_layers; ++l) {
        for (int64_t e = 0; e < n_experts; ++e) {
            counts[l][e] += other.counts[l][e];
            prob_sums[l][e] += other.prob_sums[l][e];
        }
        tokens_per_layer[l] += other.tokens_per_layer[l];
    }
    std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
        return a.layer != b.layer ? a.layer < b.layer : a.pos < b.pos;
    });
}

std::string routing_log::to_jsonl() const {
    std::ostringstream os;
    for (const auto& r : records) {
        nlohmann::ordered_json j;
        j["layer"] = r.layer;
        j["pos"] = r.pos;
        j["experts"] = r.experts;
        j["probs"] = r.probs;
        j["lse"] = r.lse;
        os << j.dump() << "\n";
    }
    return os.str();
}

routing_log routing_log_from_jsonl(const std::string& text) {
    routing_log log;
    std::istringstream is(text);
    std::string line;
    int64_t max_layer = -1, max_expert = -1, k = 0;
    std::vector<routing_record> recs;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        routing_record r;
        r.layer = j.at("layer").get<int64_t>();
        r.pos = j.at("pos").get<int64_t>();
        r.experts = j.at("experts").get<std::vector<int64_t>>();
        r.probs = j.at("probs").get<std::vector<double>>();
        r.lse = j.at("lse").get<double>();
        max_layer = std::max(max_layer, r.layer);
        for (int64_t e : r.experts) max_expert = std::max(max_expert, e);
        k = static_cast<int64_t>(r.experts.size());
        recs.push_back(std::move(r));
    }
    log.init(max_layer + 1, max_expert + 1, k);
    for (const auto& r : recs) {
        // full softmax probs are not recoverable from the k selected
        // entries; aggregates here carry counts only
        std::vector<double> none(static_cast<size_t>(log.n_experts), 0.0);
        log.add(r.layer, r.pos, r.experts, r.probs, none, r.lse);
    }
    return log;
}

route_result route(std::span<const double> h, const tensor& router, const moe_config& cfg) {
    const int64_t d = router.shape.at(0);
    const int64_t E = router.shape.at(1);
    if (static_cast<int64_t>(h.size()) != d) throw dim_error("route: hidden width mismatch");
    if (E != cfg.n_experts) throw dim_error("route: router width != n_experts");

    route_result r;
    r.logits.assign(static_cast<size_t>(E), 0.0);
    for (int64_t t = 0; t < d; ++t) {
        const double hv = h[static_cast<size_t>(t)];
        const double* row = router.data.data() + t * E;
        for (int64_t j = 0; j < E; ++j) r.logits[static_cast<size_t>(j)] += hv * row[j];
    }
    double mx = r.logits[0];
    for (double v : r.logits) mx = std::max(mx, v);
    double sum = 0.0;
    r.probs.resize(static_cast<size_t>(E));
    for (int64_t j = 0; j < E; ++j) {
        r.probs[j] = std::exp(r.logits[j] - mx);
        sum += r.probs[j];
    }
    for (double& p : r.probs) p /= sum;
    r.lse = mx + std::log(sum);

    // top-k by probability, ties broken toward the lower expert index
    std::vector<int64_t> order(static_cast<size_t>(E));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return r.probs[a] > r.probs[b]; });
    r.indices.assign(order.begin(), order.begin() + cfg.top_k);
    r.weights.resize(static_cast<size_t>(cfg.top_k));
    double wsum = 0.0;
    for (int64_t i = 0; i < cfg.top_k; ++i) {
        r.weights[i] = r.probs[static_cast<size_t>(r.indices[i])];
        wsum += r.weights[i];
    }
    if (cfg.norm_topk_prob) {
        for (double& w : r.weights) w /= wsum;
    }
    return r;
}

tensor moe_forward(const tensor& h, const moe_layer_view& w, const moe_config& cfg,
                   int64_t layer, routing_log* log, std::vector<moe_token_cache>* cache,
                   int64_t* eval_counter) {
    const int64_t T = h.rows();
    const int64_t D = h.cols();
    const int64_t He = cfg.d_expert;
    if (static_cast<int64_t>(w.gate.size()) != cfg.n_experts)
        throw dim_error("moe_forward: expert count mismatch");
    for (int64_t e = 0; e < cfg.n_experts; ++e) {
        if (w.gate[e]->shape != std::vector<int64_t>{D, He} ||
            w.up[e]->shape != std::vector<int64_t>{D, He} ||
            w.down[e]->shape != std::vector<int64_t>{He, D})
            throw dim_error("moe_forward: expert weight shape mismatch");
    }

    tensor y({T, D}, h.prec);
    if (cache) cache->resize(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        auto ht = h.row(t);
        route_result r = route(ht, *w.router, cfg);
        std::vector<double> a(static_cast<size_t>(He)), b(static_cast<size_t>(He)),
            act(static_cast<size_t>(He));
        moe_token_cache* tc = cache ? &(*cache)[static_cast<size_t>(t)] : nullptr;
        if (tc) {
            tc->a.clear();
            tc->b.clear();
            tc->h.clear();
        }
        double* yt = y.data.data() + t * D;
        for (size_t s = 0; s < r.indices.size(); ++s) {
            const int64_t e = r.indices[s];
            const double we = r.weights[s];
            std::fill(a.begin(), a.end(), 0.0);
            std::fill(b.begin(), b.end(), 0.0);
            const double* G = w.gate[e]->data.data();
            const double* U = w.up[e]->data.data();
            for (int64_t i = 0; i < D; ++i) {
                const double hv = ht[static_cast<size_t>(i)];
                const double* grow = G + i * He;
                const double* urow = U + i * He;
                for (int64_t j = 0; j < He; ++j) {
                    a[j] += hv * grow[j];
                    b[j] += hv * urow[j];
                }
            }
            for (int64_t j = 0; j < He; ++j) act[j] = (a[j] / (1.0 + std::exp(-a[j]))) * b[j];
            const double* Dn = w.down[e]->data.data();
            const double scale = cfg.output_multiplier * we;
            for (int64_t j = 0; j < He; ++j) {
                const double hv = act[j] * scale;
                const double* drow = Dn + j * D;
                for (int64_t i = 0; i < D; ++i) yt[i] += hv * drow[i];
            }
            if (eval_counter) ++*eval_counter;
            if (tc) {
                tc->a.push_back(a);
                tc->b.push_back(b);
                tc->h.push_back(act);
            }
        }
        if (log) log->add(layer, t, r.indices, r.weights, r.probs, r.lse);
        if (tc) tc->routing = std::move(r);
    }
    apply_precision(y);
    return y;
}

tensor moe_forward(const tensor& h, const moe_layer_params& params, const moe_config& cfg,
                   int64_t layer, routing_log* log) {
    return moe_forward(h, moe_layer_view::of(params), cfg, layer, log);
}

double load_balance_loss(const routing_log& log, int64_t layer) {
    if (layer < 0 || layer >= log.n_layers) throw config_error("load_balance_loss: bad layer");
    const int64_t T = log.tokens_per_layer.at(static_cast<size_t>(layer));
    if (T == 0) throw config_error("load_balance_loss: empty routing log");
    const auto& c = log.counts[static_cast<size_t>(layer)];
    const auto& ps = log.prob_sums[static_cast<size_t>(layer)];
    const double slots = static_cast<double>(T) * static_cast<double>(log.top_k);
    double loss = 0.0;
    for (int64_t e = 0; e < log.n_experts; ++e) {
        const double f = static_cast<double>(c[e]) / slots;
        const double p = ps[e] / static_cast<double>(T);
        loss += f * p;
    }
    return static_cast<double>(log.n_experts) * loss;
}

double router_z_loss(const routing_log& log) {
    if (log.records.empty()) throw config_error("router_z_loss: empty routing log");
    double s = 0.0;
    for (const auto& r : log.records) s += r.lse * r.lse;
    return s / static_cast<double>(log.records.size());
}

}  // namespace mmoe
