// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace robustlab {

/// Dense n-dimensional f64 tensor, row-major. Copies share storage; use
/// clone() for an independent buffer. All math runs in double precision so
/// finite-difference checks have headroom.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0,
                  bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const;

  std::vector<double>& data() { return *data_; }
  const std::vector<double>& data() const { return *data_; }
  const void* storage_key() const { return data_.get(); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool rg) { requires_grad_ = rg; }

  Tensor clone() const;
  /// Same storage, detached from any tape, requires_grad off.
  Tensor detached() const;

  double scalar() const;  // value of a 1-element tensor

 private:
  friend class Tape;
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
  int node_ = -1;           // node id on tape_epoch_, -1 = leaf/untracked
  std::uint64_t tape_epoch_ = 0;
};

std::string shape_str(const std::vector<int>& s);

enum class BnMode { TrainUpdate, Frozen };

/// Ordered record of primitive operations with parent references. backward()
/// replays the record once in reverse creation order (reverse topological by
/// construction) and accumulates gradients for every tracked tensor.
/// Single-threaded; independent tapes may run concurrently.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  /// Gradient of the last backward() w.r.t. t (zeros if t never participated).
  Tensor grad(const Tensor& t) const;

  std::uint64_t mac_flops() const { return mac_flops_; }
  std::uint64_t elementwise_flops() const { return ew_flops_; }
  std::size_t num_nodes() const { return nodes_.size(); }

  // --- recording interface used by ops ---
  using BackFn = std::function<void(Tape&, int)>;
  int input_id(const Tensor& t);         // registers leaves on first use
  int lookup_id(const Tensor& t) const;  // -1 if untracked
  int record(std::vector<int> parents, std::int64_t out_size, BackFn back);
  void tag_output(Tensor& t, int node) const;
  std::vector<double>& gbuf(int id);
  bool has_gbuf(int id) const;
  void add_mac(std::uint64_t f) { mac_flops_ += f; }
  void add_ew(std::uint64_t f) { ew_flops_ += f; }
  std::uint64_t epoch() const { return epoch_; }

 private:
  struct Node {
    std::vector<int> parents;
    std::int64_t size = 0;
    BackFn back;  // empty for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const void*, int> leaves_;
  std::uint64_t epoch_;
  std::uint64_t mac_flops_ = 0;
  std::uint64_t ew_flops_ = 0;
};

/// Primitive ops. Pass tape = nullptr for pure evaluation; an op is recorded
/// when a tape is given and any input is tracked (requires_grad or produced
/// on that tape). Shape mismatches throw std::invalid_argument naming the
/// primitive and the offending shapes.
namespace ops {

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, int stride,
              int pad);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& a, double c);
/// x:[N,C] (+ bias[C]) or x:[N,C,H,W] (+ per-channel bias[C]).
Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias);
Tensor relu(Tape* tape, const Tensor& x);
/// tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
Tensor gelu(Tape* tape, const Tensor& x);
Tensor batchnorm(Tape* tape, const Tensor& x, const Tensor& gamma,
                 const Tensor& beta, std::vector<double>& running_mean,
                 std::vector<double>& running_var, BnMode mode,
                 double momentum = 0.1, double eps = 1e-5);
Tensor global_avgpool(Tape* tape, const Tensor& x);  // [N,C,H,W] -> [N,C]
Tensor softmax(Tape* tape, const Tensor& x);         // rowwise, stable
Tensor log_softmax(Tape* tape, const Tensor& x);
Tensor log(Tape* tape, const Tensor& x);
Tensor exp(Tape* tape, const Tensor& x);
Tensor clamp_min(Tape* tape, const Tensor& x, double lo);
Tensor sum(Tape* tape, const Tensor& x);   // scalar
Tensor mean(Tape* tape, const Tensor& x);  // scalar
Tensor sum_rows(Tape* tape, const Tensor& x);  // [N,C] -> [N]
Tensor gather_labels(Tape* tape, const Tensor& x, const std::vector<int>& y);
Tensor reshape(Tape* tape, const Tensor& x, std::vector<int> shape);

}  // namespace ops

/// Mean over the batch of per-row KL(p||q) = sum_c p*log(p/q). Inputs must be
/// strictly positive probability rows summing to 1 within 1e-9 (softmax
/// output floored at 1e-12 upstream satisfies this). Result clamped at 0 so
/// rounding noise cannot produce a negative divergence.
Tensor kl_divergence(Tape* tape, const Tensor& p, const Tensor& q);
/// Per-row KL values, shape [N]; same preconditions as kl_divergence.
Tensor kl_divergence_rows(Tape* tape, const Tensor& p, const Tensor& q);

/// Mean cross-entropy of logits [N,C] against integer labels.
Tensor cross_entropy(Tape* tape, const Tensor& logits,
                     const std::vector<int>& labels);
/// Per-example cross-entropy values, shape [N].
Tensor cross_entropy_rows(Tape* tape, const Tensor& logits,
                          const std::vector<int>& labels);

// Deterministic RNG helpers (layout-stable across platforms, unlike
// std::normal_distribution).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);
double uniform01(std::uint64_t& state);               // [0,1)
double normal01(std::uint64_t& state);                // Box-Muller, one draw
std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace robustlab
