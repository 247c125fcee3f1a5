#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmoe {

enum class precision { f32, f64 };

struct dim_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor. Storage is always double; in f32 mode every
// kernel rounds its output elementwise to the nearest float, so f32
// values are exactly representable and serialization as raw f32 is
// lossless.
struct tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;
    precision prec = precision::f64;

    tensor() = default;
    tensor(std::vector<int64_t> s, precision p = precision::f64);
    static tensor zeros(std::vector<int64_t> s, precision p = precision::f64);
    static tensor full(std::vector<int64_t> s, double v, precision p = precision::f64);

    int64_t numel() const;
    int64_t rows() const;  // product of all but the last dim
    int64_t cols() const;  // last dim

    double& at2(int64_t i, int64_t j) { return data[static_cast<size_t>(i * cols() + j)]; }
    double at2(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols() + j)]; }

    std::span<double> row(int64_t i) { return {data.data() + i * cols(), static_cast<size_t>(cols())}; }
    std::span<const double> row(int64_t i) const { return {data.data() + i * cols(), static_cast<size_t>(cols())}; }

    bool same_shape(const tensor& o) const { return shape == o.shape; }
    std::string shape_str() const;
};

// Rounds x to f32 representable values when prec is f32.
void apply_precision(tensor& t);
double round_scalar(double v, precision p);

// Throws if any element is NaN or Inf.
void ensure_finite(const tensor& t, const std::string& what);

// c[i][j] = sum_t a[i][t] * b[t][j], accumulation over ascending t.
tensor matmul(const tensor& a, const tensor& b);

// Row-wise stable softmax over the last axis.
tensor softmax_rows(const tensor& x);

// out = x / sqrt(mean(x^2) + eps) * gamma, per last-axis slice.
tensor rms_norm(const tensor& x, const tensor& gamma, double eps);

tensor silu(const tensor& x);

// Rotates (i, i+d/2) pairs of every d_head-sized head slice by
// position-dependent angles theta_base^(-2i/d_head) * pos.
// q: [T x (n_q*d_head)], k: [T x (n_kv*d_head)].
std::pair<tensor, tensor> rope_apply(const tensor& q, const tensor& k,
                                     const std::vector<int64_t>& positions,
                                     double theta_base, int64_t d_head);

// ---- counter-based RNG: deterministic across platforms ----------------

// Stateless mix of a 64-bit key and counter (splitmix64 finalizer).
uint64_t mix64(uint64_t key, uint64_t counter);

// Counter stream keyed by an arbitrary list of 64-bit words.
class rng_stream {
  public:
    explicit rng_stream(uint64_t seed) : key_(seed) {}
    rng_stream(uint64_t seed, std::initializer_list<uint64_t> subkeys);

    uint64_t next_u64();
    double next_uniform();                 // [0, 1)
    double next_normal(double mu, double sigma);
    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n);

  private:
    uint64_t key_;
    uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mmoe
