#pragma once

#include <string>
#include <vector>

#include "mmoe/checkpoint.hpp"
#include "mmoe/moe.hpp"

namespace mmoe {

// Per-language expert-activation proportions: entry (l, e) is the
// fraction of the language's tokens whose top-k set contained expert e
// at layer l. Counts are kept so layer sums can be checked in integer
// arithmetic (each token contributes exactly k activations per layer).
struct specialization_matrix {
    std::string language;
    int64_t layers = 0;
    int64_t experts = 0;
    int64_t top_k = 0;
    int64_t n_tokens = 0;
    std::vector<std::vector<int64_t>> counts;  // [layer][expert]

    double entry(int64_t layer, int64_t expert) const;
    std::vector<double> flattened() const;  // row-major (layer-major)
    std::string to_json_text() const;
};

specialization_matrix signature_from_json_text(const std::string& text);

// Runs forward passes over the language's documents and counts
// per-(layer, expert) top-k memberships.
specialization_matrix collect_signature(const checkpoint& ckpt,
                                        const std::vector<std::vector<int64_t>>& docs,
                                        const std::string& language);
specialization_matrix signature_from_log(const routing_log& log, const std::string& language);

// Standard centered Pearson coefficient, clamped to [-1, 1]. Throws on
// zero-variance input rather than returning NaN.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct correlation_matrix {
    std::vector<std::string> languages;
    std::vector<std::vector<double>> rho;  // symmetric, unit diagonal

    std::string to_csv() const;  // language ids as header row/column
};

correlation_matrix make_correlation_matrix(const std::vector<specialization_matrix>& signatures);

struct dendrogram_node {
    int64_t left = -1, right = -1;  // children: leaf index < n_leaves, else internal
    double height = 0.0;
};

struct dendrogram {
    std::vector<std::string> leaves;
    std::vector<dendrogram_node> merges;  // internal nodes, indexed from n_leaves
    int64_t root = -1;
};

// Unweighted average-linkage agglomerative clustering over the distance
// 1 - rho; ties broken by the lexicographically smallest language pair.
dendrogram cluster(const correlation_matrix& corr);

// Newick text with merge heights split evenly per side:
// two leaves A,B merged at 0.4 -> "(A:0.2,B:0.2):0;"
std::string export_dendrogram(const dendrogram& d);
dendrogram parse_newick(const std::string& text);

}  // namespace mmoe
