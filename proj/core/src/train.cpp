#include "mmoe/train.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mmoe/upcycle.hpp"

namespace mmoe {

optimizer_state make_optimizer(const checkpoint& ckpt, adamw_config cfg) {
    optimizer_state st;
    st.cfg = cfg;
    for (const auto& [name, t] : ckpt.tensors) {
        st.m.add(name, tensor(t.shape, precision::f64));
        st.v.add(name, tensor(t.shape, precision::f64));
    }
    return st;
}

void adamw_step(tensor_map& params, const tensor_map& grads, optimizer_state& state, double lr) {
    if (lr < 0) throw config_error("adamw_step: negative learning rate");
    state.step += 1;
    const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        const tensor& g = grads.at(name);
        tensor& m = state.m.at(name);
        tensor& v = state.v.at(name);
        if (g.shape != p.shape) throw dim_error("adamw_step: gradient shape mismatch for " + name);
        for (size_t i = 0; i < p.data.size(); ++i) {
            p.data[i] -= lr * state.cfg.weight_decay * p.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * g.data[i];
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * g.data[i] * g.data[i];
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
        }
        apply_precision(p);
    }
}

// ---- LR schedule -------------------------------------------------------

void lr_schedule::validate() const {
    if (stages.empty()) throw config_error("lr_schedule needs at least one stage");
    if (warmup_tokens < 0) throw config_error("warmup_tokens must be >= 0");
    for (size_t i = 0; i < stages.size(); ++i) {
        const auto& s = stages[i];
        if (s.token_budget <= 0) throw config_error("stage token_budget must be positive");
        if (s.decay != "constant" && s.decay != "linear")
            throw config_error("stage decay must be 'constant' or 'linear'");
        if (s.decay == "constant" && s.start_lr != s.end_lr)
            throw config_error("constant stage must have start_lr == end_lr");
        if (i > 0 && stages[i - 1].end_lr != s.start_lr)
            throw config_error("stage boundaries must be continuous");
    }
    if (warmup_tokens > stages[0].token_budget)
        throw config_error("warmup must fit inside the first stage");
}

double lr_at(double tokens_seen, const lr_schedule& schedule) {
    if (tokens_seen < 0) throw config_error("tokens_seen must be >= 0");
    const double peak = schedule.stages[0].start_lr;
    if (schedule.warmup_tokens > 0 && tokens_seen < schedule.warmup_tokens)
        return peak * tokens_seen / schedule.warmup_tokens;
    double start = 0.0;
    for (const auto& s : schedule.stages) {
        const double end = start + s.token_budget;
        if (tokens_seen <= end || &s == &schedule.stages.back()) {
            if (tokens_seen > end) return s.end_lr;  // past the final stage
            if (s.decay == "constant") return s.start_lr;
            const double frac = (tokens_seen - start) / s.token_budget;
            // convex form: exact at both endpoints, so stages join without a jump
            return s.start_lr * (1.0 - frac) + s.end_lr * frac;
        }
        start = end;
    }
    return schedule.stages.back().end_lr;
}

lr_schedule lr_schedule_from_json_text(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    lr_schedule sch;
    sch.warmup_tokens = j.value("warmup_tokens", 0.0);
    for (const auto& e : j.at("stages")) {
        lr_stage s;
        s.token_budget = e.at("token_budget").get<double>();
        s.start_lr = e.at("start_lr").get<double>();
        s.end_lr = e.at("end_lr").get<double>();
        s.decay = e.at("decay").get<std::string>();
        sch.stages.push_back(s);
    }
    sch.validate();
    return sch;
}

lr_schedule nano_reference_schedule() {
    lr_schedule sch;
    sch.warmup_tokens = 8.4e9;
    sch.stages = {
        {2.4e12, 4.9505e-4, 4.9505e-4, "constant"},
        {1.7e12, 4.9505e-4, 1e-5, "linear"},
        {5e11, 1e-5, 6e-6, "linear"},
        {5e11, 6e-6, 0.0, "linear"},
    };
    sch.validate();
    return sch;
}

// ---- mixture -----------------------------------------------------------

void mixture_schedule::validate() const {
    if (stages.empty()) throw config_error("mixture_schedule needs at least one stage");
    for (const auto& s : stages) {
        if (s.token_budget <= 0) throw config_error("mixture stage budget must be positive");
        double sum = 0.0;
        for (const auto& [name, w] : s.weights) {
            if (w < 0) throw config_error("mixture weight must be >= 0 for " + name);
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw config_error("mixture stage weights must sum to 1 after normalization");
    }
}

size_t mixture_schedule::stage_at(double tokens_seen) const {
    double start = 0.0;
    for (size_t i = 0; i < stages.size(); ++i) {
        const double end = start + stages[i].token_budget;
        if (tokens_seen < end) return i;
        start = end;
    }
    return stages.size() - 1;
}

mixture_schedule mixture_from_json_text(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    mixture_schedule m;
    for (const auto& e : j.at("stages")) {
        mixture_stage s;
        s.token_budget = e.at("token_budget").get<double>();
        double sum = 0.0;
        for (const auto& [name, w] : e.at("weights").items()) {
            const double wv = w.get<double>();
            if (wv > 0) {
                s.weights.emplace_back(name, wv);
                sum += wv;
            }
        }
        if (sum <= 0) throw config_error("mixture stage has no positive weights");
        for (auto& [name, w] : s.weights) w /= sum;
        m.stages.push_back(std::move(s));
    }
    m.validate();
    return m;
}

std::string mixture_to_json_text(const mixture_schedule& m) {
    nlohmann::ordered_json j;
    j["stages"] = nlohmann::ordered_json::array();
    for (const auto& s : m.stages) {
        nlohmann::ordered_json e;
        e["token_budget"] = s.token_budget;
        nlohmann::ordered_json w;
        for (const auto& [name, wv] : s.weights) w[name] = wv;
        e["weights"] = w;
        j["stages"].push_back(e);
    }
    return j.dump(2) + "\n";
}

std::string draw_dataset(const mixture_schedule& m, double tokens_seen, rng_stream& rng) {
    const auto& s = m.stages[m.stage_at(tokens_seen)];
    const double u = rng.next_uniform();
    double cum = 0.0;
    for (const auto& [name, w] : s.weights) {
        cum += w;
        if (u < cum) return name;
    }
    return s.weights.back().first;
}

corpus corpus_from_lines(const std::vector<std::string>& lines) {
    corpus c;
    for (const auto& line : lines) {
        std::vector<int64_t> doc;
        doc.reserve(line.size() + 2);
        doc.push_back(kTokBOS);
        for (unsigned char b : line) doc.push_back(static_cast<int64_t>(b));
        doc.push_back(kTokEOS);
        c.docs.push_back(std::move(doc));
    }
    if (c.docs.empty()) throw config_error("corpus is empty");
    return c;
}

corpus load_corpus_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw config_error("cannot open corpus: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    return corpus_from_lines(lines);
}

std::vector<sequence_sample> sample_batch(const mixture_schedule& m, double tokens_seen,
                                          rng_stream& rng,
                                          const std::map<std::string, corpus>& sources,
                                          int64_t batch_size, int64_t seq_len) {
    for (const auto& s : m.stages) {
        for (const auto& [name, w] : s.weights) {
            if (!sources.count(name))
                throw config_error("no source registered for weighted dataset " + name);
        }
    }
    std::vector<sequence_sample> batch;
    batch.reserve(static_cast<size_t>(batch_size));
    for (int64_t i = 0; i < batch_size; ++i) {
        sequence_sample s;
        s.dataset = draw_dataset(m, tokens_seen, rng);
        const corpus& c = sources.at(s.dataset);
        const auto& doc = c.docs[rng.next_below(c.docs.size())];
        s.tokens.reserve(static_cast<size_t>(seq_len + 1));
        // sequences wrap through the document for a fixed length
        const uint64_t start = rng.next_below(doc.size());
        for (int64_t t = 0; t <= seq_len; ++t)
            s.tokens.push_back(doc[(start + static_cast<uint64_t>(t)) % doc.size()]);
        batch.push_back(std::move(s));
    }
    return batch;
}

// ---- training ----------------------------------------------------------

std::string train_run_report::to_csv() const {
    std::ostringstream os;
    os << "step,tokens,lr,lm,balance,z,total\n";
    os.precision(17);
    for (const auto& s : steps) {
        os << s.step << "," << s.tokens_seen << "," << s.lr << "," << s.lm_loss << ","
           << s.balance_loss << "," << s.z_loss << "," << s.total_loss << "\n";
    }
    return os.str();
}

step_metrics train_step(checkpoint& ckpt, const std::vector<sequence_sample>& batch,
                        optimizer_state& optim, double lr, train_coefficients coeffs) {
    if (batch.empty()) throw config_error("train_step: empty batch");
    gradient_set acc = zero_grads_like(ckpt);
    double lm = 0.0, bal = 0.0, z = 0.0;
    const aux_coefficients ac{ckpt.config.is_moe() ? coeffs.balance : 0.0,
                              ckpt.config.is_moe() ? coeffs.z : 0.0};
    for (const auto& s : batch) {
        std::vector<int64_t> inputs(s.tokens.begin(), s.tokens.end() - 1);
        std::vector<int64_t> targets(s.tokens.begin() + 1, s.tokens.end());
        loss_result r = lm_loss_and_grads(inputs, targets, ckpt, ac);
        if (!std::isfinite(r.lm_loss)) throw std::runtime_error("non-finite lm loss");
        if (!std::isfinite(r.balance_loss)) throw std::runtime_error("non-finite balance loss");
        if (!std::isfinite(r.z_loss)) throw std::runtime_error("non-finite z loss");
        lm += r.lm_loss;
        bal += r.balance_loss;
        z += r.z_loss;
        for (auto& [name, g] : acc) {
            const tensor& src = r.grads.at(name);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += src.data[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    double sq = 0.0;
    for (auto& [name, g] : acc) {
        for (double& v : g.data) {
            v *= inv;
            sq += v * v;
        }
    }
    const double norm = std::sqrt(sq);
    const double clip = 1.0;
    if (norm > clip) {
        const double s = clip / norm;
        for (auto& [name, g] : acc)
            for (double& v : g.data) v *= s;
    }
    adamw_step(ckpt.tensors, acc, optim, lr);

    step_metrics m;
    m.lr = lr;
    m.lm_loss = lm * inv;
    m.balance_loss = bal * inv;
    m.z_loss = z * inv;
    m.total_loss = m.lm_loss + coeffs.balance * m.balance_loss + coeffs.z * m.z_loss;
    return m;
}

train_run_report train_run(checkpoint& ckpt, const std::map<std::string, corpus>& sources,
                           const train_options& opts) {
    opts.schedule.validate();
    opts.mixture.validate();
    optimizer_state optim = make_optimizer(ckpt);
    train_run_report rep;
    double tokens_seen = 0.0;
    if (opts.steps == 0) {
        // zero budget: evaluate once, update nothing
        rng_stream rng(opts.seed, {0x6261746368ULL, 0});
        auto batch =
            sample_batch(opts.mixture, 0.0, rng, sources, opts.batch_size, opts.seq_len);
        const aux_coefficients ac{ckpt.config.is_moe() ? opts.coeffs.balance : 0.0,
                                  ckpt.config.is_moe() ? opts.coeffs.z : 0.0};
        step_metrics m;
        m.lr = lr_at(0.0, opts.schedule);
        for (const auto& s : batch) {
            std::vector<int64_t> inputs(s.tokens.begin(), s.tokens.end() - 1);
            std::vector<int64_t> targets(s.tokens.begin() + 1, s.tokens.end());
            loss_result r = lm_loss_and_grads(inputs, targets, ckpt, ac);
            m.lm_loss += r.lm_loss;
            m.balance_loss += r.balance_loss;
            m.z_loss += r.z_loss;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        m.lm_loss *= inv;
        m.balance_loss *= inv;
        m.z_loss *= inv;
        m.total_loss =
            m.lm_loss + opts.coeffs.balance * m.balance_loss + opts.coeffs.z * m.z_loss;
        rep.steps.push_back(m);
        return rep;
    }
    for (int64_t step = 0; step < opts.steps; ++step) {
        rng_stream rng(opts.seed, {0x6261746368ULL /* "batch" */, static_cast<uint64_t>(step)});
        auto batch =
            sample_batch(opts.mixture, tokens_seen, rng, sources, opts.batch_size, opts.seq_len);
        const double lr = lr_at(tokens_seen, opts.schedule);
        step_metrics m = train_step(ckpt, batch, optim, lr, opts.coeffs);
        tokens_seen += static_cast<double>(opts.batch_size * opts.seq_len);
        m.step = step + 1;
        m.tokens_seen = tokens_seen;
        rep.steps.push_back(m);
    }
    return rep;
}

ablation_result ablation_run(const checkpoint& warm_dense, const upcycle_plan& plan,
                             const std::map<std::string, corpus>& sources,
                             const train_options& opts) {
    checkpoint pseudo = build_pseudo_moe(warm_dense, plan);
    checkpoint upcycled = expand_to_full_moe(pseudo, plan);
    checkpoint scratch = init_moe(upcycled.config, plan.seed + 1);
    if (upcycled.config.n_layers != scratch.config.n_layers ||
        upcycled.config.moe->n_experts != scratch.config.moe->n_experts)
        throw config_error("ablation arms must share a config");

    ablation_result res;
    res.upcycled = train_run(upcycled, sources, opts);
    res.from_scratch = train_run(scratch, sources, opts);
    return res;
}

}  // namespace mmoe
