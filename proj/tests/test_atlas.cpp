#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "mmoe/atlas.hpp"
#include "mmoe/model.hpp"

using namespace mmoe;

namespace {

// forced routing: every token of the "language" activates a fixed set
routing_log forced_log(int64_t layers, int64_t E, const std::vector<int64_t>& sel,
                       int64_t n_tokens) {
    const int64_t k = static_cast<int64_t>(sel.size());
    routing_log log;
    log.init(layers, E, k);
    std::vector<double> probs(sel.size(), 1.0 / static_cast<double>(k));
    std::vector<double> full(static_cast<size_t>(E), 0.0);
    for (size_t i = 0; i < sel.size(); ++i) full[static_cast<size_t>(sel[i])] = probs[i];
    for (int64_t l = 0; l < layers; ++l)
        for (int64_t t = 0; t < n_tokens; ++t) log.add(l, t, sel, probs, full, 0.0);
    return log;
}

specialization_matrix forced_signature(const std::string& lang, int64_t layers, int64_t E,
                                       const std::vector<int64_t>& sel, int64_t n_tokens) {
    return signature_from_log(forced_log(layers, E, sel, n_tokens), lang);
}

// independent average-linkage oracle over explicit index sets
struct oracle_merge {
    std::set<int64_t> members;
    double height;
};

std::vector<oracle_merge> oracle_cluster(const correlation_matrix& corr) {
    const int64_t n = static_cast<int64_t>(corr.languages.size());
    std::vector<std::set<int64_t>> clusters;
    for (int64_t i = 0; i < n; ++i) clusters.push_back({i});
    auto dist = [&](const std::set<int64_t>& a, const std::set<int64_t>& b) {
        double s = 0.0;
        for (int64_t i : a)
            for (int64_t j : b) s += 1.0 - corr.rho[i][j];
        return s / (a.size() * b.size());
    };
    auto rep = [&](const std::set<int64_t>& c) {
        std::string best;
        for (int64_t i : c)
            if (best.empty() || corr.languages[i] < best) best = corr.languages[i];
        return best;
    };
    std::vector<oracle_merge> merges;
    while (clusters.size() > 1) {
        size_t bi = 0, bj = 1;
        double bd = dist(clusters[0], clusters[1]);
        std::pair<std::string, std::string> bkey = std::minmax(rep(clusters[0]), rep(clusters[1]));
        for (size_t i = 0; i < clusters.size(); ++i)
            for (size_t j = i + 1; j < clusters.size(); ++j) {
                const double d = dist(clusters[i], clusters[j]);
                std::pair<std::string, std::string> key =
                    std::minmax(rep(clusters[i]), rep(clusters[j]));
                if (d < bd || (d == bd && key < bkey)) {
                    bd = d;
                    bi = i;
                    bj = j;
                    bkey = key;
                }
            }
        std::set<int64_t> merged = clusters[bi];
        merged.insert(clusters[bj].begin(), clusters[bj].end());
        merges.push_back({merged, bd});
        clusters.erase(clusters.begin() + bj);
        clusters.erase(clusters.begin() + bi);
        clusters.push_back(std::move(merged));
    }
    return merges;
}

std::set<int64_t> leaf_set(const dendrogram& d, int64_t node) {
    const int64_t n = static_cast<int64_t>(d.leaves.size());
    if (node < n) return {node};
    const auto& m = d.merges[node - n];
    std::set<int64_t> out = leaf_set(d, m.left);
    auto r = leaf_set(d, m.right);
    out.insert(r.begin(), r.end());
    return out;
}

}  // namespace

TEST_CASE("signature entries are activation fractions") {
    specialization_matrix s = forced_signature("aa", 2, 6, {1, 4}, 10);
    CHECK(s.layers == 2);
    CHECK(s.experts == 6);
    CHECK(s.n_tokens == 10);
    CHECK(s.entry(0, 1) == 1.0);
    CHECK(s.entry(0, 4) == 1.0);
    CHECK(s.entry(1, 1) == 1.0);
    CHECK(s.entry(0, 0) == 0.0);
}

TEST_CASE("signature layer count sums equal k times tokens, in integers") {
    model_config cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_q_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.d_head = 4;
    cfg.ffn_kind = "moe";
    cfg.moe = moe_config{4, 6, 2, 1.0, false};
    checkpoint ckpt = init_moe(cfg, 3);
    for (int64_t l = 0; l < 2; ++l) {
        tensor& r = ckpt.tensors.at("layer." + std::to_string(l) + ".router");
        rng_stream rng(10 + l);
        for (double& v : r.data) v = rng.next_normal(0.0, 0.5);
    }
    std::vector<std::vector<int64_t>> docs = {{1, 2, 3, 4}, {5, 6, 7}, {8, 9}};
    specialization_matrix s = collect_signature(ckpt, docs, "xx");
    CHECK(s.n_tokens == 9);
    for (int64_t l = 0; l < s.layers; ++l) {
        int64_t sum = 0;
        for (int64_t e = 0; e < s.experts; ++e) sum += s.counts[l][e];
        CHECK(sum == s.top_k * s.n_tokens);
    }
}

TEST_CASE("flattened is row-major over (layer, expert)") {
    specialization_matrix s = forced_signature("aa", 2, 3, {2}, 4);
    std::vector<double> f = s.flattened();
    REQUIRE(f.size() == 6);
    CHECK(f == std::vector<double>{0, 0, 1, 0, 0, 1});
}

TEST_CASE("signature JSON round trip") {
    specialization_matrix s = forced_signature("de", 2, 4, {0, 3}, 7);
    specialization_matrix back = signature_from_json_text(s.to_json_text());
    CHECK(back.language == "de");
    CHECK(back.counts == s.counts);
    CHECK(back.n_tokens == s.n_tokens);
    CHECK(back.flattened() == s.flattened());
}

TEST_CASE("pearson perfect correlation and anticorrelation") {
    std::vector<double> a = {1, 2, 3, 4};
    std::vector<double> b = {2, 4, 6, 8};
    CHECK(pearson(a, b) == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<double> c = {4, 3, 2, 1};
    CHECK(pearson(a, c) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("pearson matches the formula oracle") {
    rng_stream rng(21);
    std::vector<double> a(50), b(50);
    for (size_t i = 0; i < 50; ++i) {
        a[i] = rng.next_normal(0.0, 1.0);
        b[i] = 0.4 * a[i] + rng.next_normal(0.0, 1.0);
    }
    double ma = 0, mb = 0;
    for (size_t i = 0; i < 50; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= 50;
    mb /= 50;
    double num = 0, va = 0, vb = 0;
    for (size_t i = 0; i < 50; ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    CHECK(pearson(a, b) == doctest::Approx(num / std::sqrt(va * vb)).epsilon(1e-12));
}

TEST_CASE("pearson rejects zero-variance input") {
    std::vector<double> flat = {1, 1, 1};
    std::vector<double> v = {1, 2, 3};
    CHECK_THROWS(pearson(flat, v));
}

TEST_CASE("disjoint expert sets give rho = -k/(E-k)") {
    const int64_t E = 8, k = 2;
    specialization_matrix a = forced_signature("aa", 1, E, {0, 1}, 5);
    specialization_matrix b = forced_signature("bb", 1, E, {4, 5}, 5);
    const double rho = pearson(a.flattened(), b.flattened());
    CHECK(rho == doctest::Approx(-static_cast<double>(k) / (E - k)).epsilon(1e-12));
}

TEST_CASE("correlation matrix is symmetric with unit diagonal") {
    std::vector<specialization_matrix> sigs = {
        forced_signature("aa", 1, 8, {0, 1}, 5),
        forced_signature("bb", 1, 8, {0, 2}, 5),
        forced_signature("cc", 1, 8, {4, 5}, 5),
    };
    correlation_matrix c = make_correlation_matrix(sigs);
    REQUIRE(c.rho.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(c.rho[i][i] == 1.0);
        for (size_t j = 0; j < 3; ++j) CHECK(c.rho[i][j] == c.rho[j][i]);
    }
    // aa is closer to bb (shared expert 0) than to cc (disjoint)
    CHECK(c.rho[0][1] > c.rho[0][2]);
    const std::string csv = c.to_csv();
    CHECK(csv.find("aa") != std::string::npos);
    CHECK(csv.find("cc") != std::string::npos);
}

TEST_CASE("duplicate signatures correlate at exactly 1") {
    specialization_matrix a = forced_signature("aa", 2, 6, {1, 3}, 9);
    specialization_matrix b = forced_signature("bb", 2, 6, {1, 3}, 4);
    CHECK(pearson(a.flattened(), b.flattened()) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("two-language clustering merges at 1 - rho") {
    std::vector<specialization_matrix> sigs = {
        forced_signature("aa", 1, 8, {0, 1}, 5),
        forced_signature("bb", 1, 8, {4, 5}, 5),
    };
    correlation_matrix c = make_correlation_matrix(sigs);
    dendrogram d = cluster(c);
    REQUIRE(d.merges.size() == 1);
    CHECK(d.merges[0].height == doctest::Approx(1.0 - c.rho[0][1]).epsilon(1e-12));
    CHECK(d.root == 2);
}

TEST_CASE("block structure clusters related languages first") {
    // two tight pairs: (aa, bb) share experts, (cc, dd) share experts
    std::vector<specialization_matrix> sigs = {
        forced_signature("aa", 1, 12, {0, 1, 2}, 5),
        forced_signature("bb", 1, 12, {0, 1, 3}, 5),
        forced_signature("cc", 1, 12, {8, 9, 10}, 5),
        forced_signature("dd", 1, 12, {8, 9, 11}, 5),
    };
    dendrogram d = cluster(make_correlation_matrix(sigs));
    REQUIRE(d.merges.size() == 3);
    std::set<int64_t> first = leaf_set(d, 4);
    std::set<int64_t> second = leaf_set(d, 5);
    const std::set<int64_t> pair_ab = {0, 1}, pair_cd = {2, 3};
    CHECK(((first == pair_ab && second == pair_cd) || (first == pair_cd && second == pair_ab)));
    CHECK(leaf_set(d, d.root).size() == 4);
    CHECK(d.merges[2].height >= d.merges[1].height);
}

TEST_CASE("clustering matches a brute-force average-linkage oracle") {
    const int64_t E = 16, layers = 2;
    for (uint64_t trial = 0; trial < 100; ++trial) {
        rng_stream rng(1000 + trial);
        std::vector<specialization_matrix> sigs;
        const char* names[] = {"aa", "bb", "cc", "dd", "ee", "ff"};
        for (int i = 0; i < 6; ++i) {
            std::vector<int64_t> sel;
            while (sel.size() < 3) {
                int64_t e = static_cast<int64_t>(rng.next_below(E));
                if (std::find(sel.begin(), sel.end(), e) == sel.end()) sel.push_back(e);
            }
            std::sort(sel.begin(), sel.end());
            sigs.push_back(forced_signature(names[i], layers, E, sel, 5));
        }
        correlation_matrix c = make_correlation_matrix(sigs);
        dendrogram d = cluster(c);
        auto oracle = oracle_cluster(c);
        REQUIRE(d.merges.size() == oracle.size());
        for (size_t m = 0; m < oracle.size(); ++m) {
            CHECK(std::abs(d.merges[m].height - oracle[m].height) < 1e-10);
            CHECK(leaf_set(d, static_cast<int64_t>(6 + m)) == oracle[m].members);
        }
    }
}

TEST_CASE("newick export splits merge heights evenly per side") {
    std::vector<specialization_matrix> sigs = {
        forced_signature("aa", 1, 8, {0, 1}, 5),
        forced_signature("bb", 1, 8, {4, 5}, 5),
    };
    correlation_matrix c = make_correlation_matrix(sigs);
    dendrogram d = cluster(c);
    const std::string nwk = export_dendrogram(d);
    const double h = d.merges[0].height;
    // "(aa:h/2,bb:h/2):0;"
    CHECK(nwk.front() == '(');
    CHECK(nwk.back() == ';');
    dendrogram back = parse_newick(nwk);
    REQUIRE(back.merges.size() == 1);
    CHECK(back.merges[0].height == doctest::Approx(h).epsilon(1e-9));
}

TEST_CASE("newick round trip preserves topology and heights") {
    std::vector<specialization_matrix> sigs = {
        forced_signature("aa", 1, 12, {0, 1, 2}, 5),
        forced_signature("bb", 1, 12, {0, 1, 3}, 5),
        forced_signature("cc", 1, 12, {8, 9, 10}, 5),
        forced_signature("dd", 1, 12, {8, 9, 11}, 5),
        forced_signature("ee", 1, 12, {0, 9, 11}, 5),
    };
    dendrogram d = cluster(make_correlation_matrix(sigs));
    dendrogram back = parse_newick(export_dendrogram(d));
    REQUIRE(back.leaves.size() == d.leaves.size());
    REQUIRE(back.merges.size() == d.merges.size());
    // compare leaf partitions by name at every merge
    auto names_at = [](const dendrogram& dd, int64_t node) {
        std::set<std::string> out;
        for (int64_t leaf : leaf_set(dd, node)) out.insert(dd.leaves[leaf]);
        return out;
    };
    const int64_t n = static_cast<int64_t>(d.leaves.size());
    for (size_t m = 0; m < d.merges.size(); ++m) {
        // find the merge in `back` with the same member set
        auto want = names_at(d, n + static_cast<int64_t>(m));
        bool found = false;
        for (size_t bm = 0; bm < back.merges.size(); ++bm) {
            if (names_at(back, n + static_cast<int64_t>(bm)) == want) {
                CHECK(back.merges[bm].height ==
                      doctest::Approx(d.merges[m].height).epsilon(1e-9));
                found = true;
            }
        }
        CHECK(found);
    }
}

TEST_CASE("clustering is equivariant under input permutation") {
    std::vector<specialization_matrix> sigs = {
        forced_signature("aa", 1, 12, {0, 1, 2}, 5),
        forced_signature("bb", 1, 12, {0, 1, 3}, 5),
        forced_signature("cc", 1, 12, {8, 9, 10}, 5),
        forced_signature("dd", 1, 12, {8, 9, 11}, 5),
    };
    dendrogram d1 = cluster(make_correlation_matrix(sigs));
    std::vector<specialization_matrix> perm = {sigs[2], sigs[0], sigs[3], sigs[1]};
    dendrogram d2 = cluster(make_correlation_matrix(perm));
    auto names_at = [](const dendrogram& dd, int64_t node) {
        std::set<std::string> out;
        for (int64_t leaf : leaf_set(dd, node)) out.insert(dd.leaves[leaf]);
        return out;
    };
    REQUIRE(d1.merges.size() == d2.merges.size());
    for (size_t m = 0; m < d1.merges.size(); ++m) {
        CHECK(names_at(d1, 4 + static_cast<int64_t>(m)) == names_at(d2, 4 + static_cast<int64_t>(m)));
        CHECK(d1.merges[m].height == doctest::Approx(d2.merges[m].height).epsilon(1e-12));
    }
}
