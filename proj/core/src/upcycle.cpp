#include "mmoe/upcycle.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "mmoe/model.hpp"

namespace mmoe {

int64_t upcycle_plan::n_slices(int64_t d_ffn) const {
    if (d_expert < 1 || d_ffn % d_expert != 0)
        throw plan_error("H_dense must be divisible by d_expert");
    return d_ffn / d_expert;
}

int64_t upcycle_plan::replication(int64_t d_ffn) const {
    const int64_t n = n_slices(d_ffn);
    if (n_total_experts % n != 0)
        throw plan_error("n_total_experts must be divisible by the slice count");
    return n_total_experts / n;
}

double upcycle_plan::lambda(int64_t d_ffn) const {
    return std::cbrt(static_cast<double>(n_slices(d_ffn)));
}

void upcycle_plan::validate(const model_config& dense_cfg) const {
    if (dense_cfg.is_moe()) throw plan_error("upcycle plan applies to a dense source");
    if (drop_ratio < 0.0 || drop_ratio > 1.0) throw plan_error("drop_ratio must be in [0,1]");
    const int64_t n = n_slices(dense_cfg.d_ffn);
    replication(dense_cfg.d_ffn);
    if (deploy_top_k < 1 || deploy_top_k > n_total_experts)
        throw plan_error("deploy_top_k must be in [1, n_total_experts]");
    (void)n;
}

upcycle_plan plan_from_json_text(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    upcycle_plan p;
    p.d_expert = j.at("d_expert").get<int64_t>();
    p.n_total_experts = j.at("n_total_experts").get<int64_t>();
    const std::string mode = j.value("scale_mode", std::string("multiplier"));
    if (mode == "multiplier")
        p.mode = scale_mode::forward_multiplier;
    else if (mode == "weight")
        p.mode = scale_mode::weight_scale;
    else
        throw plan_error("scale_mode must be 'multiplier' or 'weight'");
    p.drop_ratio = j.value("drop_ratio", 0.5);
    p.seed = j.at("seed").get<uint64_t>();
    p.deploy_top_k = j.value("deploy_top_k", int64_t{8});
    p.keep_pristine_replica = j.value("keep_pristine_replica", false);
    return p;
}

std::string plan_to_json_text(const upcycle_plan& p) {
    nlohmann::ordered_json j;
    j["d_expert"] = p.d_expert;
    j["n_total_experts"] = p.n_total_experts;
    j["scale_mode"] = p.mode == scale_mode::forward_multiplier ? "multiplier" : "weight";
    j["drop_ratio"] = p.drop_ratio;
    j["seed"] = p.seed;
    j["deploy_top_k"] = p.deploy_top_k;
    j["keep_pristine_replica"] = p.keep_pristine_replica;
    return j.dump(2) + "\n";
}

std::vector<expert_weights> slice_ffn(const tensor& w_gate, const tensor& w_up,
                                      const tensor& w_down, int64_t d_expert) {
    const int64_t D = w_gate.shape.at(0);
    const int64_t H = w_gate.shape.at(1);
    if (w_up.shape != w_gate.shape || w_down.shape != std::vector<int64_t>{H, D})
        throw dim_error("slice_ffn: inconsistent FFN shapes");
    if (d_expert < 1 || H % d_expert != 0)
        throw plan_error("slice_ffn: H_dense not divisible by d_expert");
    const int64_t N = H / d_expert;

    std::vector<expert_weights> out;
    out.reserve(static_cast<size_t>(N));
    for (int64_t s = 0; s < N; ++s) {
        expert_weights e;
        e.gate = tensor({D, d_expert}, w_gate.prec);
        e.up = tensor({D, d_expert}, w_up.prec);
        e.down = tensor({d_expert, D}, w_down.prec);
        for (int64_t i = 0; i < D; ++i) {
            for (int64_t j = 0; j < d_expert; ++j) {
                e.gate.at2(i, j) = w_gate.at2(i, s * d_expert + j);
                e.up.at2(i, j) = w_up.at2(i, s * d_expert + j);
            }
        }
        for (int64_t j = 0; j < d_expert; ++j) {
            for (int64_t i = 0; i < D; ++i) e.down.at2(j, i) = w_down.at2(s * d_expert + j, i);
        }
        out.push_back(std::move(e));
    }
    return out;
}

checkpoint build_pseudo_moe(const checkpoint& dense, const upcycle_plan& plan) {
    plan.validate(dense.config);
    dense.validate();
    const model_config& src = dense.config;
    const int64_t N = plan.n_slices(src.d_ffn);
    const double lam = plan.lambda(src.d_ffn);

    model_config cfg = src;
    cfg.ffn_kind = "moe";
    cfg.d_ffn = 0;
    moe_config mc;
    mc.d_expert = plan.d_expert;
    mc.n_experts = N;
    mc.top_k = N;
    mc.output_multiplier =
        plan.mode == scale_mode::forward_multiplier ? static_cast<double>(N) : 1.0;
    mc.norm_topk_prob = false;
    cfg.moe = mc;
    cfg.validate();

    checkpoint out;
    out.config = cfg;
    const precision prec = dense.tensors.at("embedding").prec;
    for (const auto& name : checkpoint::parameter_names(cfg)) {
        if (name.ends_with(".router")) {
            out.tensors.add(name, tensor(parameter_shape(cfg, name), prec));
        } else if (name.find(".expert.") == std::string::npos) {
            out.tensors.add(name, dense.tensors.at(name));
        } else {
            out.tensors.add(name, tensor(parameter_shape(cfg, name), prec));
        }
    }
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        auto slices = slice_ffn(dense.tensors.at(p + "ffn.gate"), dense.tensors.at(p + "ffn.up"),
                                dense.tensors.at(p + "ffn.down"), plan.d_expert);
        for (int64_t s = 0; s < N; ++s) {
            expert_weights& e = slices[static_cast<size_t>(s)];
            if (plan.mode == scale_mode::weight_scale) {
                for (double& v : e.gate.data) v = round_scalar(v * lam, prec);
                for (double& v : e.up.data) v = round_scalar(v * lam, prec);
                for (double& v : e.down.data) v = round_scalar(v * lam, prec);
            }
            const std::string ep = p + "expert." + std::to_string(s) + ".";
            out.tensors.at(ep + "gate") = std::move(e.gate);
            out.tensors.at(ep + "up") = std::move(e.up);
            out.tensors.at(ep + "down") = std::move(e.down);
        }
    }
    out.validate();
    return out;
}

expert_weights drop_reinit(const expert_weights& expert, double drop_ratio, rng_stream& rng) {
    if (drop_ratio < 0.0 || drop_ratio > 1.0) throw plan_error("drop_ratio must be in [0,1]");
    const int64_t He = expert.gate.shape.at(1);
    const int64_t D = expert.gate.shape.at(0);
    const int64_t n_drop = static_cast<int64_t>(std::ceil(drop_ratio * static_cast<double>(He)));
    expert_weights out = expert;
    if (n_drop == 0) return out;

    // partial Fisher-Yates over intermediate indices
    std::vector<int64_t> idx(static_cast<size_t>(He));
    for (int64_t i = 0; i < He; ++i) idx[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < n_drop; ++i) {
        const int64_t j = i + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(He - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    std::vector<int64_t> dropped(idx.begin(), idx.begin() + n_drop);
    std::sort(dropped.begin(), dropped.end());

    // gate/up: columns at the dropped indices; down: matching rows.
    // Statistics are per matrix over exactly the dropped entries.
    auto reinit_cols = [&](const tensor& src, tensor& dst) {
        double sum = 0.0, sq = 0.0;
        const double n = static_cast<double>(n_drop * D);
        for (int64_t i = 0; i < D; ++i)
            for (int64_t j : dropped) {
                const double v = src.at2(i, j);
                sum += v;
                sq += v * v;
            }
        const double mu = sum / n;
        const double var = std::max(0.0, sq / n - mu * mu);
        const double sigma = std::sqrt(var);
        for (int64_t i = 0; i < D; ++i)
            for (int64_t j : dropped)
                dst.at2(i, j) = round_scalar(rng.next_normal(mu, sigma), dst.prec);
    };
    auto reinit_rows = [&](const tensor& src, tensor& dst) {
        double sum = 0.0, sq = 0.0;
        const double n = static_cast<double>(n_drop * D);
        for (int64_t j : dropped)
            for (int64_t i = 0; i < D; ++i) {
                const double v = src.at2(j, i);
                sum += v;
                sq += v * v;
            }
        const double mu = sum / n;
        const double var = std::max(0.0, sq / n - mu * mu);
        const double sigma = std::sqrt(var);
        for (int64_t j : dropped)
            for (int64_t i = 0; i < D; ++i)
                dst.at2(j, i) = round_scalar(rng.next_normal(mu, sigma), dst.prec);
    };
    reinit_cols(expert.gate, out.gate);
    reinit_cols(expert.up, out.up);
    reinit_rows(expert.down, out.down);
    return out;
}

checkpoint expand_to_full_moe(const checkpoint& pseudo, const upcycle_plan& plan) {
    pseudo.validate();
    if (!pseudo.config.is_moe()) throw plan_error("expand_to_full_moe expects a pseudo-MoE");
    const int64_t N = pseudo.config.moe->n_experts;
    const int64_t E = plan.n_total_experts;
    if (E % N != 0) throw plan_error("n_total_experts must be divisible by the slice count");
    const int64_t r = E / N;

    model_config cfg = pseudo.config;
    cfg.moe->n_experts = E;
    cfg.moe->top_k = plan.deploy_top_k;
    // the pseudo stage may carry a multiplier that cancels the zero-router's
    // uniform weights; the deployed model routes for real, so it goes back to 1
    cfg.moe->output_multiplier = 1.0;
    cfg.validate();

    checkpoint out;
    out.config = cfg;
    const precision prec = pseudo.tensors.at("embedding").prec;
    for (const auto& name : checkpoint::parameter_names(cfg)) {
        if (name.ends_with(".router") || name.find(".expert.") != std::string::npos) {
            out.tensors.add(name, tensor(parameter_shape(cfg, name), prec));
        } else {
            out.tensors.add(name, pseudo.tensors.at(name));
        }
    }
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        for (int64_t s = 0; s < N; ++s) {
            const std::string sp = p + "expert." + std::to_string(s) + ".";
            expert_weights src{pseudo.tensors.at(sp + "gate"), pseudo.tensors.at(sp + "up"),
                               pseudo.tensors.at(sp + "down")};
            for (int64_t rep = 0; rep < r; ++rep) {
                expert_weights w = src;
                const bool spare = plan.keep_pristine_replica && rep == 0;
                if (!spare && plan.drop_ratio > 0.0) {
                    rng_stream rng(plan.seed, {static_cast<uint64_t>(l), static_cast<uint64_t>(s),
                                               static_cast<uint64_t>(rep)});
                    w = drop_reinit(src, plan.drop_ratio, rng);
                }
                const std::string ep = p + "expert." + std::to_string(s * r + rep) + ".";
                out.tensors.at(ep + "gate") = std::move(w.gate);
                out.tensors.at(ep + "up") = std::move(w.up);
                out.tensors.at(ep + "down") = std::move(w.down);
            }
        }
    }
    out.validate();
    return out;
}

std::string equivalence_report::to_json_text() const {
    nlohmann::ordered_json j;
    j["per_layer_max_abs"] = per_layer_max_abs;
    j["logits_max_abs"] = logits_max_abs;
    j["logits_max_rel"] = logits_max_rel;
    j["n_probes"] = n_probes;
    j["probe_length"] = probe_length;
    j["seed"] = seed;
    j["tolerance"] = tolerance;
    j["pass"] = pass;
    return j.dump(2) + "\n";
}

equivalence_report verify_equivalence(const checkpoint& dense, const checkpoint& moe,
                                      int64_t n_probes, uint64_t seed, int64_t probe_length) {
    dense.validate();
    moe.validate();
    if (dense.config.n_layers != moe.config.n_layers ||
        dense.config.d_model != moe.config.d_model ||
        dense.config.vocab_size != moe.config.vocab_size)
        throw config_error("verify_equivalence: incompatible model geometries");

    // promote both to double precision for the comparison
    auto to_f64 = [](const checkpoint& c) {
        checkpoint out;
        out.config = c.config;
        for (const auto& [name, t] : c.tensors) {
            tensor d = t;
            d.prec = precision::f64;
            out.tensors.add(name, std::move(d));
        }
        return out;
    };
    const checkpoint d64 = to_f64(dense);
    const checkpoint m64 = to_f64(moe);

    equivalence_report rep;
    rep.n_probes = n_probes;
    rep.probe_length = probe_length;
    rep.seed = seed;
    rep.per_layer_max_abs.assign(static_cast<size_t>(dense.config.n_layers), 0.0);

    for (int64_t pidx = 0; pidx < n_probes; ++pidx) {
        rng_stream rng(seed, {static_cast<uint64_t>(pidx)});
        std::vector<int64_t> toks(static_cast<size_t>(probe_length));
        for (auto& t : toks)
            t = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(dense.config.vocab_size)));
        auto rd = forward_logits(toks, d64, true);
        auto rm = forward_logits(toks, m64, true);
        for (size_t l = 0; l < rd.ffn_outputs.size(); ++l) {
            double mx = 0.0;
            for (size_t i = 0; i < rd.ffn_outputs[l].data.size(); ++i)
                mx = std::max(mx, std::abs(rd.ffn_outputs[l].data[i] - rm.ffn_outputs[l].data[i]));
            rep.per_layer_max_abs[l] = std::max(rep.per_layer_max_abs[l], mx);
        }
        for (size_t i = 0; i < rd.logits.data.size(); ++i) {
            const double a = rd.logits.data[i], b = rm.logits.data[i];
            const double diff = std::abs(a - b);
            rep.logits_max_abs = std::max(rep.logits_max_abs, diff);
            const double denom = std::max(std::abs(a), 1e-12);
            rep.logits_max_rel = std::max(rep.logits_max_rel, diff / denom);
        }
    }
    rep.pass = rep.logits_max_abs <= rep.tolerance;
    return rep;
}

}  // namespace mmoe
