#include "mmoe/atlas.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "mmoe/model.hpp"

namespace mmoe {

double specialization_matrix::entry(int64_t layer, int64_t expert) const {
    return static_cast<double>(counts.at(static_cast<size_t>(layer)).at(static_cast<size_t>(expert))) /
           static_cast<double>(n_tokens);
}

std::vector<double> specialization_matrix::flattened() const {
    std::vector<double> v;
    v.reserve(static_cast<size_t>(layers * experts));
    for (int64_t l = 0; l < layers; ++l)
        for (int64_t e = 0; e < experts; ++e) v.push_back(entry(l, e));
    return v;
}

std::string specialization_matrix::to_json_text() const {
    nlohmann::ordered_json j;
    j["language"] = language;
    j["layers"] = layers;
    j["experts"] = experts;
    j["top_k"] = top_k;
    j["n_tokens"] = n_tokens;
    j["matrix"] = flattened();
    j["counts"] = counts;
    return j.dump(2) + "\n";
}

specialization_matrix signature_from_json_text(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    specialization_matrix m;
    m.language = j.at("language").get<std::string>();
    m.layers = j.at("layers").get<int64_t>();
    m.experts = j.at("experts").get<int64_t>();
    m.top_k = j.at("top_k").get<int64_t>();
    m.n_tokens = j.at("n_tokens").get<int64_t>();
    m.counts = j.at("counts").get<std::vector<std::vector<int64_t>>>();
    return m;
}

specialization_matrix signature_from_log(const routing_log& log, const std::string& language) {
    specialization_matrix m;
    m.language = language;
    m.layers = log.n_layers;
    m.experts = log.n_experts;
    m.top_k = log.top_k;
    m.counts = log.counts;
    m.n_tokens = log.n_layers > 0 ? log.tokens_per_layer.at(0) : 0;
    return m;
}

specialization_matrix collect_signature(const checkpoint& ckpt,
                                        const std::vector<std::vector<int64_t>>& docs,
                                        const std::string& language) {
    if (!ckpt.config.is_moe()) throw config_error("collect_signature requires an MoE checkpoint");
    if (docs.empty()) throw std::invalid_argument("collect_signature: no documents");
    routing_log total;
    for (const auto& doc : docs) {
        auto res = forward_logits(doc, ckpt);
        total.merge(res.log);
    }
    return signature_from_log(total, language);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("pearson: vectors must share a length >= 2");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa == 0.0 || sbb == 0.0)
        throw std::invalid_argument("pearson: zero-variance input has no defined correlation");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::string correlation_matrix::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "language";
    for (const auto& l : languages) os << "," << l;
    os << "\n";
    for (size_t i = 0; i < languages.size(); ++i) {
        os << languages[i];
        for (size_t j = 0; j < languages.size(); ++j) os << "," << rho[i][j];
        os << "\n";
    }
    return os.str();
}

correlation_matrix make_correlation_matrix(const std::vector<specialization_matrix>& signatures) {
    if (signatures.size() < 2)
        throw std::invalid_argument("correlation_matrix needs at least 2 languages");
    for (const auto& s : signatures) {
        if (s.layers != signatures[0].layers || s.experts != signatures[0].experts)
            throw std::invalid_argument("correlation_matrix: signature shapes differ");
    }
    correlation_matrix cm;
    std::vector<std::vector<double>> flat;
    for (const auto& s : signatures) {
        cm.languages.push_back(s.language);
        flat.push_back(s.flattened());
    }
    const size_t n = signatures.size();
    cm.rho.assign(n, std::vector<double>(n, 1.0));
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            const double r = pearson(flat[i], flat[j]);
            cm.rho[i][j] = r;
            cm.rho[j][i] = r;
        }
    }
    return cm;
}

dendrogram cluster(const correlation_matrix& corr) {
    const size_t n = corr.languages.size();
    if (n < 2) throw std::invalid_argument("cluster needs at least 2 languages");

    dendrogram d;
    d.leaves = corr.languages;
    // active clusters as leaf-index sets; node id per cluster
    struct clus {
        std::vector<size_t> leaves;
        int64_t node;
        std::string rep;  // lexicographically smallest language, for tie-breaks
    };
    std::vector<clus> active;
    for (size_t i = 0; i < n; ++i)
        active.push_back({{i}, static_cast<int64_t>(i), corr.languages[i]});

    auto avg_dist = [&](const clus& a, const clus& b) {
        double s = 0.0;
        for (size_t i : a.leaves)
            for (size_t j : b.leaves) s += 1.0 - corr.rho[i][j];
        return s / static_cast<double>(a.leaves.size() * b.leaves.size());
    };

    while (active.size() > 1) {
        size_t bi = 0, bj = 1;
        double best = avg_dist(active[0], active[1]);
        auto key = [&](size_t i, size_t j) {
            auto [lo, hi] = std::minmax(active[i].rep, active[j].rep);
            return std::make_pair(lo, hi);
        };
        auto bestkey = key(0, 1);
        for (size_t i = 0; i < active.size(); ++i) {
            for (size_t j = i + 1; j < active.size(); ++j) {
                const double dist = avg_dist(active[i], active[j]);
                if (dist < best || (dist == best && key(i, j) < bestkey)) {
                    best = dist;
                    bi = i;
                    bj = j;
                    bestkey = key(i, j);
                }
            }
        }
        dendrogram_node node;
        node.left = active[bi].node;
        node.right = active[bj].node;
        node.height = best;
        const int64_t id = static_cast<int64_t>(n + d.merges.size());
        d.merges.push_back(node);

        clus merged;
        // keep leaf lists sorted so pairwise sums have a canonical order
        merged.leaves.resize(active[bi].leaves.size() + active[bj].leaves.size());
        std::merge(active[bi].leaves.begin(), active[bi].leaves.end(),
                   active[bj].leaves.begin(), active[bj].leaves.end(),
                   merged.leaves.begin());
        merged.node = id;
        merged.rep = std::min(active[bi].rep, active[bj].rep);
        active.erase(active.begin() + static_cast<ptrdiff_t>(bj));
        active.erase(active.begin() + static_cast<ptrdiff_t>(bi));
        active.push_back(std::move(merged));
    }
    d.root = active[0].node;
    return d;
}

namespace {

double node_height(const dendrogram& d, int64_t node) {
    const int64_t n = static_cast<int64_t>(d.leaves.size());
    return node < n ? 0.0 : d.merges[static_cast<size_t>(node - n)].height;
}

void write_newick(const dendrogram& d, int64_t node, double parent_height, std::ostringstream& os) {
    const int64_t n = static_cast<int64_t>(d.leaves.size());
    if (node < n) {
        os << d.leaves[static_cast<size_t>(node)];
    } else {
        const auto& m = d.merges[static_cast<size_t>(node - n)];
        os << "(";
        write_newick(d, m.left, m.height, os);
        os << ",";
        write_newick(d, m.right, m.height, os);
        os << ")";
    }
    // half the height gap on each side of the merge
    const double branch = (parent_height - node_height(d, node)) / 2.0;
    os << ":" << branch;
}

struct newick_parser {
    const std::string& s;
    size_t pos = 0;
    dendrogram* d;

    // returns (node id, branch length); leaves appended as encountered
    std::pair<int64_t, double> parse_node() {
        int64_t node;
        if (s.at(pos) == '(') {
            ++pos;
            auto left = parse_node();
            if (s.at(pos) != ',') throw std::invalid_argument("newick: expected ','");
            ++pos;
            auto right = parse_node();
            if (s.at(pos) != ')') throw std::invalid_argument("newick: expected ')'");
            ++pos;
            dendrogram_node m;
            m.left = left.first;
            m.right = right.first;
            // height = child height + 2 * child branch (split-evenly rule)
            m.height = child_height(left);
            d->merges.push_back(m);
            node = static_cast<int64_t>(d->merges.size()) - 1;  // provisional internal index
        } else {
            std::string name;
            while (pos < s.size() && s[pos] != ':' && s[pos] != ',' && s[pos] != ')' &&
                   s[pos] != ';')
                name.push_back(s[pos++]);
            if (name.empty()) throw std::invalid_argument("newick: empty leaf name");
            d->leaves.push_back(name);
            node = -static_cast<int64_t>(d->leaves.size());  // provisional leaf index
        }
        double branch = 0.0;
        if (pos < s.size() && s[pos] == ':') {
            ++pos;
            size_t end = pos;
            while (end < s.size() && (std::isdigit(static_cast<unsigned char>(s[end])) ||
                                      s[end] == '.' || s[end] == '-' || s[end] == '+' ||
                                      s[end] == 'e' || s[end] == 'E'))
                ++end;
            branch = std::stod(s.substr(pos, end - pos));
            pos = end;
        }
        return {node, branch};
    }

    double child_height(const std::pair<int64_t, double>& child) const {
        double h = 0.0;
        if (child.first >= 0) h = d->merges[static_cast<size_t>(child.first)].height;
        return h + 2.0 * child.second;
    }
};

}  // namespace

std::string export_dendrogram(const dendrogram& d) {
    std::ostringstream os;
    os.precision(17);
    if (d.root < 0) throw std::invalid_argument("export_dendrogram: empty tree");
    const int64_t n = static_cast<int64_t>(d.leaves.size());
    if (d.root < n) {
        os << d.leaves[static_cast<size_t>(d.root)] << ":0;";
        return os.str();
    }
    const auto& m = d.merges[static_cast<size_t>(d.root - n)];
    os << "(";
    write_newick(d, m.left, m.height, os);
    os << ",";
    write_newick(d, m.right, m.height, os);
    os << "):0;";
    return os.str();
}

dendrogram parse_newick(const std::string& text) {
    dendrogram d;
    newick_parser p{text, 0, &d};
    auto root = p.parse_node();
    if (p.pos >= text.size() || text[p.pos] != ';')
        throw std::invalid_argument("newick: missing terminator");
    // remap provisional ids: leaves were encoded as -(index+1), internals
    // as merge-vector positions; final ids are leaf-index or n + merge-index
    const int64_t n = static_cast<int64_t>(d.leaves.size());
    auto remap = [&](int64_t id) { return id < 0 ? -(id + 1) : n + id; };
    for (auto& m : d.merges) {
        m.left = remap(m.left);
        m.right = remap(m.right);
    }
    d.root = remap(root.first);
    return d;
}

}  // namespace mmoe
