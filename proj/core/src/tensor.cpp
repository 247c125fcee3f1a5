#include "mmoe/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace mmoe {

tensor::tensor(std::vector<int64_t> s, precision p) : shape(std::move(s)), prec(p) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw dim_error("tensor dimension must be positive");
        n *= d;
    }
    data.assign(static_cast<size_t>(n), 0.0);
}

tensor tensor::zeros(std::vector<int64_t> s, precision p) { return tensor(std::move(s), p); }

tensor tensor::full(std::vector<int64_t> s, double v, precision p) {
    tensor t(std::move(s), p);
    std::fill(t.data.begin(), t.data.end(), round_scalar(v, p));
    return t;
}

int64_t tensor::numel() const {
    return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

int64_t tensor::cols() const { return shape.empty() ? 1 : shape.back(); }
int64_t tensor::rows() const { return numel() / cols(); }

std::string tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

double round_scalar(double v, precision p) {
    return p == precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void apply_precision(tensor& t) {
    if (t.prec == precision::f32) {
        for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
    }
}

void ensure_finite(const tensor& t, const std::string& what) {
    for (double v : t.data) {
        if (!std::isfinite(v)) throw std::runtime_error("non-finite value in " + what);
    }
}

tensor matmul(const tensor& a, const tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw dim_error("matmul shape mismatch: " + a.shape_str() + " x " + b.shape_str());
    if (a.prec != b.prec) throw dim_error("matmul precision mismatch");
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    tensor c({m, n}, a.prec);
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t t = 0; t < k; ++t) {
            const double av = a.data[i * k + t];
            const double* brow = b.data.data() + t * n;
            double* crow = c.data.data() + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    apply_precision(c);
    return c;
}

tensor softmax_rows(const tensor& x) {
    if (x.shape.empty() || x.cols() < 1) throw dim_error("softmax_rows needs a last axis");
    tensor out = x;
    const int64_t n = x.cols();
    for (int64_t i = 0; i < x.rows(); ++i) {
        double* r = out.data.data() + i * n;
        double mx = r[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        for (int64_t j = 0; j < n; ++j) r[j] /= sum;
    }
    apply_precision(out);
    return out;
}

tensor rms_norm(const tensor& x, const tensor& gamma, double eps) {
    const int64_t d = x.cols();
    if (gamma.numel() != d) throw dim_error("rms_norm gamma length mismatch");
    if (eps <= 0) throw dim_error("rms_norm eps must be positive");
    tensor out = x;
    for (int64_t i = 0; i < x.rows(); ++i) {
        const double* xi = x.data.data() + i * d;
        double* oi = out.data.data() + i * d;
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += xi[j] * xi[j];
        const double r = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
        for (int64_t j = 0; j < d; ++j) oi[j] = xi[j] * r * gamma.data[j];
    }
    apply_precision(out);
    return out;
}

tensor silu(const tensor& x) {
    tensor out = x;
    for (double& v : out.data) v = v / (1.0 + std::exp(-v));
    apply_precision(out);
    return out;
}

std::pair<tensor, tensor> rope_apply(const tensor& q, const tensor& k,
                                     const std::vector<int64_t>& positions,
                                     double theta_base, int64_t d_head) {
    if (d_head % 2 != 0) throw dim_error("rope_apply requires an even head dimension");
    if (q.rows() != static_cast<int64_t>(positions.size()) ||
        k.rows() != static_cast<int64_t>(positions.size()))
        throw dim_error("rope_apply positions length must equal sequence length");
    if (q.cols() % d_head != 0 || k.cols() % d_head != 0)
        throw dim_error("rope_apply row width must be a multiple of d_head");

    auto rotate = [&](const tensor& x) {
        tensor out = x;
        const int64_t w = x.cols();
        const int64_t half = d_head / 2;
        for (int64_t t = 0; t < x.rows(); ++t) {
            const double pos = static_cast<double>(positions[static_cast<size_t>(t)]);
            for (int64_t h = 0; h < w / d_head; ++h) {
                const double* xi = x.data.data() + t * w + h * d_head;
                double* oi = out.data.data() + t * w + h * d_head;
                for (int64_t i = 0; i < half; ++i) {
                    const double freq = std::pow(theta_base, -2.0 * static_cast<double>(i) /
                                                                static_cast<double>(d_head));
                    const double ang = pos * freq;
                    const double c = std::cos(ang), s = std::sin(ang);
                    const double a = xi[i], b = xi[i + half];
                    oi[i] = a * c - b * s;
                    oi[i + half] = a * s + b * c;
                }
            }
        }
        apply_precision(out);
        return out;
    };
    return {rotate(q), rotate(k)};
}

// ---- RNG ---------------------------------------------------------------

uint64_t mix64(uint64_t key, uint64_t counter) {
    uint64_t z = key + counter * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

rng_stream::rng_stream(uint64_t seed, std::initializer_list<uint64_t> subkeys) : key_(seed) {
    uint64_t i = 1;
    for (uint64_t s : subkeys) key_ = mix64(key_ ^ s, i++);
}

uint64_t rng_stream::next_u64() { return mix64(key_, ++counter_); }

double rng_stream::next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double rng_stream::next_normal(double mu, double sigma) {
    if (has_spare_) {
        has_spare_ = false;
        return mu + sigma * spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = next_uniform();
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return mu + sigma * r * std::cos(a);
}

uint64_t rng_stream::next_below(uint64_t n) {
    // rejection sampling keeps the draw unbiased
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
}

}  // namespace mmoe
