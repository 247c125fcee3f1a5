#include <benchmark/benchmark.h>

#include "mmoe/model.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/train.hpp"

using namespace mmoe;

namespace {

tensor random_tensor(std::vector<int64_t> shape, uint64_t seed) {
    tensor t(std::move(shape));
    rng_stream rng(seed);
    for (double& v : t.data) v = rng.next_normal(0.0, 1.0);
    return t;
}

void bm_matmul(benchmark::State& state) {
    const int64_t n = state.range(0);
    tensor a = random_tensor({n, n}, 1);
    tensor b = random_tensor({n, n}, 2);
    for (auto _ : state) {
        tensor c = matmul(a, b);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(bm_matmul)->Arg(64)->Arg(128)->Arg(256);

void bm_moe_forward(benchmark::State& state) {
    const int64_t D = 64, He = 16, E = 32, k = 4, T = 64;
    moe_layer_params p;
    p.router = random_tensor({D, E}, 3);
    for (int64_t e = 0; e < E; ++e) {
        expert_weights w;
        w.gate = random_tensor({D, He}, 10 + 3 * static_cast<uint64_t>(e));
        w.up = random_tensor({D, He}, 11 + 3 * static_cast<uint64_t>(e));
        w.down = random_tensor({He, D}, 12 + 3 * static_cast<uint64_t>(e));
        p.experts.push_back(std::move(w));
    }
    moe_config cfg{He, E, k, 1.0, false};
    tensor h = random_tensor({T, D}, 4);
    for (auto _ : state) {
        tensor y = moe_forward(h, p, cfg);
        benchmark::DoNotOptimize(y.data.data());
    }
    state.SetItemsProcessed(state.iterations() * T);
}
BENCHMARK(bm_moe_forward);

void bm_train_step(benchmark::State& state) {
    model_config cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_q_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.d_head = 16;
    cfg.ffn_kind = "moe";
    cfg.moe = moe_config{16, 8, 2, 1.0, false};
    checkpoint ckpt = init_moe(cfg, 5);
    optimizer_state optim = make_optimizer(ckpt);
    std::vector<sequence_sample> batch;
    rng_stream rng(6);
    for (int i = 0; i < 2; ++i) {
        sequence_sample s;
        s.dataset = "bench";
        for (int t = 0; t < 33; ++t)
            s.tokens.push_back(static_cast<int64_t>(rng.next_below(256)));
        batch.push_back(std::move(s));
    }
    for (auto _ : state) {
        step_metrics m = train_step(ckpt, batch, optim, 1e-4, {0.01, 0.001});
        benchmark::DoNotOptimize(m.total_loss);
    }
}
BENCHMARK(bm_train_step);

}  // namespace

BENCHMARK_MAIN();
