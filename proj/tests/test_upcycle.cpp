#include <cmath>
#include <set>

#include "doctest.h"
#include "mmoe/model.hpp"
#include "mmoe/upcycle.hpp"

using namespace mmoe;

namespace {

model_config small_dense() {
    model_config cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.d_ffn = 24;
    cfg.n_q_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.d_head = 8;
    cfg.vocab_size = 32;
    return cfg;
}

upcycle_plan small_plan(int64_t d_expert = 6, int64_t total = 8) {
    upcycle_plan p;
    p.d_expert = d_expert;
    p.n_total_experts = total;
    p.seed = 7;
    p.deploy_top_k = 2;
    p.drop_ratio = 0.5;
    return p;
}

tensor random_tensor(std::vector<int64_t> shape, uint64_t seed, double sigma = 1.0) {
    tensor t(std::move(shape));
    rng_stream rng(seed);
    for (double& v : t.data) v = rng.next_normal(0.0, sigma);
    return t;
}

double max_abs_diff(const tensor& a, const tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace

TEST_CASE("plan derived quantities") {
    upcycle_plan p = small_plan(6, 8);  // d_ffn 24 -> N=4, r=2, lambda=4^(1/3)
    CHECK(p.n_slices(24) == 4);
    CHECK(p.replication(24) == 2);
    CHECK(p.lambda(24) == doctest::Approx(std::cbrt(4.0)).epsilon(1e-15));
    CHECK_NOTHROW(p.validate(small_dense()));
}

TEST_CASE("plan validation rejects bad geometry") {
    model_config cfg = small_dense();
    upcycle_plan p = small_plan(5, 8);  // 24 % 5 != 0
    CHECK_THROWS_AS(p.validate(cfg), plan_error);
    p = small_plan(6, 9);  // 9 % 4 != 0
    CHECK_THROWS_AS(p.validate(cfg), plan_error);
    p = small_plan(6, 8);
    p.drop_ratio = 1.5;
    CHECK_THROWS_AS(p.validate(cfg), plan_error);
}

TEST_CASE("plan JSON round trip") {
    upcycle_plan p = small_plan();
    p.mode = scale_mode::weight_scale;
    p.keep_pristine_replica = true;
    upcycle_plan q = plan_from_json_text(plan_to_json_text(p));
    CHECK(q.d_expert == p.d_expert);
    CHECK(q.mode == scale_mode::weight_scale);
    CHECK(q.seed == p.seed);
    CHECK(q.keep_pristine_replica);
    CHECK(plan_to_json_text(q) == plan_to_json_text(p));
}

TEST_CASE("slice_ffn with N=1 copies the weights") {
    tensor g = random_tensor({4, 6}, 1);
    tensor u = random_tensor({4, 6}, 2);
    tensor d = random_tensor({6, 4}, 3);
    auto slices = slice_ffn(g, u, d, 6);
    REQUIRE(slices.size() == 1);
    CHECK(slices[0].gate.data == g.data);
    CHECK(slices[0].up.data == u.data);
    CHECK(slices[0].down.data == d.data);
}

TEST_CASE("slicing is a bit-exact partition") {
    const int64_t D = 8, H = 24, He = 6, N = H / He;
    tensor g = random_tensor({D, H}, 11);
    tensor u = random_tensor({D, H}, 12);
    tensor d = random_tensor({H, D}, 13);
    auto slices = slice_ffn(g, u, d, He);
    REQUIRE(slices.size() == static_cast<size_t>(N));
    for (int64_t s = 0; s < N; ++s) {
        CHECK(slices[s].gate.shape == std::vector<int64_t>{D, He});
        CHECK(slices[s].down.shape == std::vector<int64_t>{He, D});
        for (int64_t i = 0; i < D; ++i)
            for (int64_t j = 0; j < He; ++j) {
                CHECK(slices[s].gate.at2(i, j) == g.at2(i, s * He + j));
                CHECK(slices[s].up.at2(i, j) == u.at2(i, s * He + j));
                CHECK(slices[s].down.at2(j, i) == d.at2(s * He + j, i));
            }
    }
}

TEST_CASE("sum of expert slice outputs reproduces the dense FFN") {
    const int64_t D = 8, H = 24, He = 6;
    tensor g = random_tensor({D, H}, 21);
    tensor u = random_tensor({D, H}, 22);
    tensor d = random_tensor({H, D}, 23);
    tensor x = random_tensor({5, D}, 24);
    tensor dense = dense_ffn(x, g, u, d);
    auto slices = slice_ffn(g, u, d, He);
    tensor sum({5, D});
    for (const auto& s : slices) {
        tensor y = dense_ffn(x, s.gate, s.up, s.down);
        for (size_t i = 0; i < sum.data.size(); ++i) sum.data[i] += y.data[i];
    }
    CHECK(max_abs_diff(dense, sum) < 1e-10);
}

TEST_CASE("pseudo-MoE forward_multiplier mode is exact per layer") {
    model_config cfg = small_dense();
    checkpoint dense = init_dense(cfg, 31);
    upcycle_plan p = small_plan(6, 8);  // N = 4
    checkpoint pseudo = build_pseudo_moe(dense, p);
    CHECK(pseudo.config.is_moe());
    CHECK(pseudo.config.moe->n_experts == 4);
    CHECK(pseudo.config.moe->top_k == 4);
    CHECK(pseudo.config.moe->output_multiplier == 4.0);
    // routers start at zero
    for (double v : pseudo.tensors.at("layer.0.router").data) CHECK(v == 0.0);

    std::vector<int64_t> toks = {1, 2, 3, 4, 5, 6, 7, 8};
    forward_result fd = forward_logits(toks, dense, true);
    forward_result fm = forward_logits(toks, pseudo, true);
    for (int64_t l = 0; l < cfg.n_layers; ++l)
        CHECK(max_abs_diff(fd.ffn_outputs[l], fm.ffn_outputs[l]) < 1e-10);
    CHECK(max_abs_diff(fd.logits, fm.logits) < 1e-8);
}

TEST_CASE("weight_scale mode is exact for ReLU but not SiLU") {
    // degree-1 homogeneous check done on raw FFN outputs: for relu,
    // relu(x/L . L*Wg) etc. reassembles exactly; silu leaves a residual
    const int64_t D = 8, H = 24, He = 6, N = H / He;
    const double lam = std::cbrt(static_cast<double>(N));
    tensor g = random_tensor({D, H}, 41);
    tensor u = random_tensor({D, H}, 42);
    tensor d = random_tensor({H, D}, 43);
    tensor x = random_tensor({4, D}, 44);

    auto ffn = [&](const tensor& xin, const tensor& wg, const tensor& wu, const tensor& wd,
                   bool relu) {
        tensor a = matmul(xin, wg);
        tensor b = matmul(xin, wu);
        tensor prod(a.shape);
        for (size_t i = 0; i < a.data.size(); ++i) {
            const double v = a.data[i];
            const double act = relu ? std::max(0.0, v) : v / (1.0 + std::exp(-v));
            prod.data[i] = act * b.data[i];
        }
        return matmul(prod, wd);
    };

    for (bool relu : {true, false}) {
        tensor dense_y = ffn(x, g, u, d, relu);
        auto slices = slice_ffn(g, u, d, He);
        tensor sum({4, D});
        for (auto& s : slices) {
            tensor sg = s.gate, su = s.up, sd = s.down;
            for (double& v : sg.data) v *= lam;
            for (double& v : su.data) v *= lam;
            for (double& v : sd.data) v *= lam;
            // router is uniform over N active experts: weight 1/N each,
            // multiplier 1 in weight_scale mode
            tensor y = ffn(x, sg, su, sd, relu);
            for (size_t i = 0; i < sum.data.size(); ++i) sum.data[i] += y.data[i] / N;
        }
        const double diff = max_abs_diff(dense_y, sum);
        if (relu)
            CHECK(diff < 1e-9);
        else
            CHECK(diff > 1e-6);
    }
}

TEST_CASE("verify_equivalence is reflexive and passes on the pseudo-MoE") {
    model_config cfg = small_dense();
    checkpoint dense = init_dense(cfg, 51);
    checkpoint pseudo = build_pseudo_moe(dense, small_plan(6, 8));
    equivalence_report self = verify_equivalence(dense, dense, 2, 3, 16);
    CHECK(self.pass);
    CHECK(self.logits_max_abs == 0.0);

    equivalence_report rep = verify_equivalence(dense, pseudo, 4, 3, 16);
    CHECK(rep.pass);
    CHECK(rep.logits_max_abs <= 1e-8);
    CHECK(rep.per_layer_max_abs.size() == static_cast<size_t>(cfg.n_layers));
}

TEST_CASE("verify_equivalence fails after drop reinitialization") {
    model_config cfg = small_dense();
    checkpoint dense = init_dense(cfg, 61);
    upcycle_plan p = small_plan(6, 8);
    checkpoint pseudo = build_pseudo_moe(dense, p);
    checkpoint full = expand_to_full_moe(pseudo, p);
    equivalence_report rep = verify_equivalence(dense, full, 2, 3, 16);
    CHECK(!rep.pass);
    CHECK(rep.logits_max_abs > 1e-8);
}

TEST_CASE("drop_reinit edge ratios") {
    expert_weights w;
    w.gate = random_tensor({8, 6}, 71);
    w.up = random_tensor({8, 6}, 72);
    w.down = random_tensor({6, 8}, 73);
    SUBCASE("ratio 0 keeps everything") {
        rng_stream rng(1);
        expert_weights r = drop_reinit(w, 0.0, rng);
        CHECK(r.gate.data == w.gate.data);
        CHECK(r.up.data == w.up.data);
        CHECK(r.down.data == w.down.data);
    }
    SUBCASE("ratio 1 redraws every intermediate index") {
        rng_stream rng(2);
        expert_weights r = drop_reinit(w, 1.0, rng);
        int same = 0;
        for (size_t i = 0; i < w.gate.data.size(); ++i)
            if (r.gate.data[i] == w.gate.data[i]) ++same;
        CHECK(same == 0);
    }
}

TEST_CASE("drop_reinit keeps untouched columns and matches dropped-entry stats") {
    const int64_t D = 60, He = 40;  // big enough for a stable moment check
    expert_weights w;
    w.gate = random_tensor({D, He}, 81, 2.0);
    w.up = random_tensor({D, He}, 82, 2.0);
    w.down = random_tensor({He, D}, 83, 2.0);
    rng_stream rng(84);
    expert_weights r = drop_reinit(w, 0.5, rng);

    const int64_t n_drop = (He + 1) / 2;  // ceil(0.5 * 40) = 20
    std::set<int64_t> dropped;
    for (int64_t j = 0; j < He; ++j) {
        bool changed = false;
        for (int64_t i = 0; i < D; ++i)
            if (r.gate.at2(i, j) != w.gate.at2(i, j)) changed = true;
        if (changed) dropped.insert(j);
    }
    CHECK(dropped.size() == static_cast<size_t>(n_drop));

    // the same intermediate indices must be dropped in up and down
    for (int64_t j = 0; j < He; ++j) {
        const bool in = dropped.count(j) > 0;
        bool up_changed = false, down_changed = false;
        for (int64_t i = 0; i < D; ++i) {
            if (r.up.at2(i, j) != w.up.at2(i, j)) up_changed = true;
            if (r.down.at2(j, i) != w.down.at2(j, i)) down_changed = true;
        }
        CHECK(up_changed == in);
        CHECK(down_changed == in);
    }

    // moments of the redrawn gate entries vs the dropped originals, 4 SE
    std::vector<double> orig, redrawn;
    for (int64_t j : dropped)
        for (int64_t i = 0; i < D; ++i) {
            orig.push_back(w.gate.at2(i, j));
            redrawn.push_back(r.gate.at2(i, j));
        }
    auto moments = [](const std::vector<double>& v) {
        double s = 0, sq = 0;
        for (double x : v) {
            s += x;
            sq += x * x;
        }
        const double mean = s / v.size();
        return std::pair{mean, std::sqrt(sq / v.size() - mean * mean)};
    };
    auto [m0, s0] = moments(orig);
    auto [m1, s1] = moments(redrawn);
    const double n = static_cast<double>(orig.size());
    CHECK(std::abs(m1 - m0) < 4.0 * s0 / std::sqrt(n));
    CHECK(std::abs(s1 - s0) < 4.0 * s0 / std::sqrt(2.0 * n));
}

TEST_CASE("expansion geometry: E experts, deploy top_k, fresh router") {
    model_config cfg = small_dense();
    checkpoint dense = init_dense(cfg, 91);
    upcycle_plan p = small_plan(6, 8);
    checkpoint full = expand_to_full_moe(build_pseudo_moe(dense, p), p);
    CHECK(full.config.moe->n_experts == 8);
    CHECK(full.config.moe->top_k == 2);
    CHECK(full.config.moe->output_multiplier == 1.0);
    const tensor& router = full.tensors.at("layer.0.router");
    CHECK(router.shape == std::vector<int64_t>{cfg.d_model, 8});
    for (double v : router.data) CHECK(v == 0.0);
    CHECK_NOTHROW(full.validate());
}

TEST_CASE("replicas of a slice share provenance but diverge after drop") {
    model_config cfg = small_dense();
    checkpoint dense = init_dense(cfg, 101);
    upcycle_plan p = small_plan(6, 8);  // N=4, r=2: experts (2s, 2s+1) from slice s
    checkpoint pseudo = build_pseudo_moe(dense, p);
    checkpoint full = expand_to_full_moe(pseudo, p);
    const int64_t He = 6;
    for (int64_t s = 0; s < 4; ++s) {
        const tensor& src = pseudo.tensors.at("layer.0.expert." + std::to_string(s) + ".gate");
        const tensor& r0 = full.tensors.at("layer.0.expert." + std::to_string(2 * s) + ".gate");
        const tensor& r1 =
            full.tensors.at("layer.0.expert." + std::to_string(2 * s + 1) + ".gate");
        CHECK(r0.data != r1.data);
        // roughly half the columns survive the drop in each replica
        auto surviving = [&](const tensor& rep) {
            int64_t kept = 0;
            for (int64_t j = 0; j < He; ++j) {
                bool same = true;
                for (int64_t i = 0; i < cfg.d_model; ++i)
                    if (rep.at2(i, j) != src.at2(i, j)) same = false;
                if (same) ++kept;
            }
            return kept;
        };
        CHECK(surviving(r0) == He - (He + 1) / 2);
        CHECK(surviving(r1) == He - (He + 1) / 2);
    }
}

TEST_CASE("keep_pristine_replica spares replica 0 of each slice") {
    model_config cfg = small_dense();
    checkpoint dense = init_dense(cfg, 111);
    upcycle_plan p = small_plan(6, 8);
    p.keep_pristine_replica = true;
    checkpoint pseudo = build_pseudo_moe(dense, p);
    checkpoint full = expand_to_full_moe(pseudo, p);
    for (int64_t s = 0; s < 4; ++s) {
        const tensor& src = pseudo.tensors.at("layer.0.expert." + std::to_string(s) + ".gate");
        const tensor& r0 = full.tensors.at("layer.0.expert." + std::to_string(2 * s) + ".gate");
        CHECK(r0.data == src.data);
    }
}

TEST_CASE("upcycling is deterministic per seed") {
    model_config cfg = small_dense();
    checkpoint dense = init_dense(cfg, 121);
    upcycle_plan p = small_plan(6, 8);
    checkpoint a = expand_to_full_moe(build_pseudo_moe(dense, p), p);
    checkpoint b = expand_to_full_moe(build_pseudo_moe(dense, p), p);
    for (const auto& [name, t] : a.tensors) CHECK(t.data == b.tensors.at(name).data);

    upcycle_plan q = p;
    q.seed = p.seed + 1;
    checkpoint c = expand_to_full_moe(build_pseudo_moe(dense, q), q);
    bool any_diff = false;
    for (const auto& [name, t] : a.tensors)
        if (t.data != c.tensors.at(name).data) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("equivalence report serializes") {
    model_config cfg = small_dense();
    checkpoint dense = init_dense(cfg, 131);
    equivalence_report rep = verify_equivalence(dense, dense, 1, 1, 8);
    const std::string j = rep.to_json_text();
    CHECK(j.find("logits_max_abs") != std::string::npos);
    CHECK(j.find("pass") != std::string::npos);
}
