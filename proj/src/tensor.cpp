// SPDX-License-Identifier: Apache-2.0
#include "robustlab/tensor.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace robustlab {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

namespace {

std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
    n *= d;
  }
  return n;
}

[[noreturn]] void shape_error(const char* op, const std::vector<int>& a,
                              const std::vector<int>& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a) + " x " + shape_str(b));
}

}  // namespace

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape, double fill, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(
          static_cast<size_t>(shape_size(shape_)), fill)),
      requires_grad_(requires_grad) {}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("tensor: data length " +
                                std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(std::move(data));
  t.requires_grad_ = requires_grad;
  return t;
}

std::int64_t Tensor::size() const {
  return data_ ? static_cast<std::int64_t>(data_->size()) : 0;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  t.requires_grad_ = requires_grad_;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.requires_grad_ = false;
  t.node_ = -1;
  t.tape_epoch_ = 0;
  return t;
}

double Tensor::scalar() const {
  if (size() != 1)
    throw std::invalid_argument("tensor: scalar() on shape " +
                                shape_str(shape_));
  return (*data_)[0];
}

// ---------------------------------------------------------------------------
// Tape

namespace {
std::atomic<std::uint64_t> g_tape_epoch{1};
}

Tape::Tape() : epoch_(g_tape_epoch.fetch_add(1)) {}

int Tape::input_id(const Tensor& t) {
  if (t.node_ >= 0 && t.tape_epoch_ == epoch_) return t.node_;
  if (!t.requires_grad_) return -1;
  const void* key = t.storage_key();
  auto it = leaves_.find(key);
  if (it != leaves_.end()) return it->second;
  int id = record({}, t.size(), BackFn{});
  leaves_.emplace(key, id);
  return id;
}

int Tape::lookup_id(const Tensor& t) const {
  if (t.node_ >= 0 && t.tape_epoch_ == epoch_) return t.node_;
  auto it = leaves_.find(t.storage_key());
  return it != leaves_.end() ? it->second : -1;
}

int Tape::record(std::vector<int> parents, std::int64_t out_size,
                 BackFn back) {
  Node n;
  n.parents = std::move(parents);
  n.size = out_size;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  grads_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::tag_output(Tensor& t, int node) const {
  t.node_ = node;
  t.tape_epoch_ = epoch_;
  t.requires_grad_ = true;
}

std::vector<double>& Tape::gbuf(int id) {
  return grads_[static_cast<size_t>(id)];
}

bool Tape::has_gbuf(int id) const {
  return id >= 0 && !grads_[static_cast<size_t>(id)].empty();
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  int root = lookup_id(loss);
  if (root < 0)
    throw std::invalid_argument("backward: loss is not recorded on this tape");

  // Reverse topological = reverse creation order, restricted to ancestors of
  // the loss so off-path nodes are neither executed nor counted.
  std::vector<char> needed(nodes_.size(), 0);
  std::vector<int> stack{root};
  needed[static_cast<size_t>(root)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int p : nodes_[static_cast<size_t>(id)].parents) {
      if (p >= 0 && !needed[static_cast<size_t>(p)]) {
        needed[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }
  for (size_t i = 0; i < grads_.size(); ++i) {
    grads_[i].clear();
    if (needed[i])
      grads_[i].assign(static_cast<size_t>(nodes_[i].size), 0.0);
  }
  grads_[static_cast<size_t>(root)][0] = 1.0;
  for (int id = root; id >= 0; --id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (needed[static_cast<size_t>(id)] && n.back) n.back(*this, id);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  int id = lookup_id(t);
  if (id < 0 || grads_[static_cast<size_t>(id)].empty())
    return Tensor(t.shape(), 0.0);
  return Tensor::from_data(t.shape(), grads_[static_cast<size_t>(id)]);
}

// ---------------------------------------------------------------------------
// Primitives

namespace ops {

namespace {

// Documented per-element instrumentation constants (forward / backward).
constexpr std::uint64_t kReluFwd = 1, kReluBwd = 1;
constexpr std::uint64_t kGeluFwd = 8, kGeluBwd = 12;
constexpr std::uint64_t kAddFwd = 1;
constexpr std::uint64_t kMulFwd = 1, kMulBwd = 2;
constexpr std::uint64_t kBnFrozenFwd = 2, kBnFrozenBwd = 4;
constexpr std::uint64_t kBnTrainFwd = 6, kBnTrainBwd = 8;
constexpr std::uint64_t kPoolFwd = 1, kPoolBwd = 1;
constexpr std::uint64_t kSoftmaxFwd = 5, kSoftmaxBwd = 4;

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_error("matmul", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  {
    ConstMap A(a.data().data(), m, k);
    ConstMap B(b.data().data(), k, n);
    MutMap C(out.data().data(), m, n);
    C.noalias() = A * B;
  }
  if (!tape) return out;
  tape->add_mac(2ull * m * k * n);
  int pa = tape->input_id(a), pb = tape->input_id(b);
  if (pa < 0 && pb < 0) return out;
  auto ad = a.data(), bd = b.data();  // forward-time copies for the pullback
  int node = tape->record(
      {pa, pb}, out.size(), [=](Tape& T, int self) {
        ConstMap GO(T.gbuf(self).data(), m, n);
        ConstMap A(ad.data(), m, k);
        ConstMap B(bd.data(), k, n);
        if (pa >= 0) {
          MutMap DA(T.gbuf(pa).data(), m, k);
          DA.noalias() += GO * B.transpose();
          T.add_mac(2ull * m * k * n);
        }
        if (pb >= 0) {
          MutMap DB(T.gbuf(pb).data(), k, n);
          DB.noalias() += A.transpose() * GO;
          T.add_mac(2ull * m * k * n);
        }
      });
  tape->tag_output(out, node);
  return out;
}

namespace {

// im2col: one row per output position, K = Cin*kh*kw columns. Data movement
// only, not counted as FLOPs.
void im2col(const std::vector<double>& x, int N, int C, int H, int W, int kh,
            int kw, int stride, int pad, int Ho, int Wo, RowMat& col) {
  const int K = C * kh * kw;
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  col.setZero(N * P, K);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xc =
          x.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          const int colk = (c * kh + ki) * kw + kj;
          for (int ho = 0; ho < Ho; ++ho) {
            const int hi = ho * stride - pad + ki;
            if (hi < 0 || hi >= H) continue;
            for (int wo = 0; wo < Wo; ++wo) {
              const int wi = wo * stride - pad + kj;
              if (wi < 0 || wi >= W) continue;
              col(static_cast<std::int64_t>(n) * P + ho * Wo + wo, colk) =
                  xc[hi * W + wi];
            }
          }
        }
    }
}

void col2im(const RowMat& dcol, int N, int C, int H, int W, int kh, int kw,
            int stride, int pad, int Ho, int Wo, std::vector<double>& dx) {
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double* xc = dx.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          const int colk = (c * kh + ki) * kw + kj;
          for (int ho = 0; ho < Ho; ++ho) {
            const int hi = ho * stride - pad + ki;
            if (hi < 0 || hi >= H) continue;
            for (int wo = 0; wo < Wo; ++wo) {
              const int wi = wo * stride - pad + kj;
              if (wi < 0 || wi >= W) continue;
              xc[hi * W + wi] +=
                  dcol(static_cast<std::int64_t>(n) * P + ho * Wo + wo, colk);
            }
          }
        }
    }
}

}  // namespace

Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, int stride,
              int pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    shape_error("conv2d", x.shape(), w.shape());
  if (stride < 1 || pad < 0)
    throw std::invalid_argument("conv2d: invalid stride/pad");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0)
    throw std::invalid_argument("conv2d: kernel larger than padded input " +
                                shape_str(x.shape()));
  const int K = C * kh * kw;
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;

  auto col = std::make_shared<RowMat>();
  im2col(x.data(), N, C, H, W, kh, kw, stride, pad, Ho, Wo, *col);
  ConstMap Wm(w.data().data(), Cout, K);
  RowMat ymat = (*col) * Wm.transpose();  // [N*P, Cout]

  Tensor out({N, Cout, Ho, Wo});
  {
    auto& od = out.data();
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Cout; ++co) {
        double* dst = od.data() + (static_cast<std::int64_t>(n) * Cout + co) * P;
        for (std::int64_t p = 0; p < P; ++p)
          dst[p] = ymat(static_cast<std::int64_t>(n) * P + p, co);
      }
  }
  const std::uint64_t macs = 2ull * N * P * K * Cout;
  if (!tape) return out;
  tape->add_mac(macs);
  int px = tape->input_id(x), pw = tape->input_id(w);
  if (px < 0 && pw < 0) return out;
  auto wd = w.data();
  int node = tape->record(
      {px, pw}, out.size(), [=](Tape& T, int self) {
        const auto& go = T.gbuf(self);
        RowMat dymat(static_cast<std::int64_t>(N) * P, Cout);
        for (int n = 0; n < N; ++n)
          for (int co = 0; co < Cout; ++co) {
            const double* src =
                go.data() + (static_cast<std::int64_t>(n) * Cout + co) * P;
            for (std::int64_t p = 0; p < P; ++p)
              dymat(static_cast<std::int64_t>(n) * P + p, co) = src[p];
          }
        ConstMap Wm2(wd.data(), Cout, K);
        if (px >= 0) {
          RowMat dcol = dymat * Wm2;  // [N*P, K]
          col2im(dcol, N, C, H, W, kh, kw, stride, pad, Ho, Wo, T.gbuf(px));
          T.add_mac(macs);
        }
        if (pw >= 0) {
          MutMap DW(T.gbuf(pw).data(), Cout, K);
          DW.noalias() += dymat.transpose() * (*col);
          T.add_mac(macs);
        }
      });
  tape->tag_output(out, node);
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_same_shape(Tape* tape, const Tensor& a, const Tensor& b,
                         const char* name, std::uint64_t fwd_cost,
                         std::uint64_t bwd_cost, Fwd fwd, Bwd bwd) {
  if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
  const std::int64_t n = a.size();
  Tensor out(a.shape());
  fwd(a.data(), b.data(), out.data());
  if (!tape) return out;
  tape->add_ew(fwd_cost * static_cast<std::uint64_t>(n));
  int pa = tape->input_id(a), pb = tape->input_id(b);
  if (pa < 0 && pb < 0) return out;
  auto ad = a.data(), bd = b.data();
  int node = tape->record({pa, pb}, n, [=](Tape& T, int self) {
    bwd(T, self, pa, pb, ad, bd);
    T.add_ew(bwd_cost * static_cast<std::uint64_t>(n));
  });
  tape->tag_output(out, node);
  return out;
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      tape, a, b, "add", kAddFwd, 0,
      [](const auto& x, const auto& y, auto& o) {
        for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
      },
      [](Tape& T, int self, int pa, int pb, const auto&, const auto&) {
        const auto& go = T.gbuf(self);
        if (pa >= 0) {
          auto& g = T.gbuf(pa);
          for (size_t i = 0; i < go.size(); ++i) g[i] += go[i];
        }
        if (pb >= 0) {
          auto& g = T.gbuf(pb);
          for (size_t i = 0; i < go.size(); ++i) g[i] += go[i];
        }
      });
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      tape, a, b, "sub", kAddFwd, 0,
      [](const auto& x, const auto& y, auto& o) {
        for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
      },
      [](Tape& T, int self, int pa, int pb, const auto&, const auto&) {
        const auto& go = T.gbuf(self);
        if (pa >= 0) {
          auto& g = T.gbuf(pa);
          for (size_t i = 0; i < go.size(); ++i) g[i] += go[i];
        }
        if (pb >= 0) {
          auto& g = T.gbuf(pb);
          for (size_t i = 0; i < go.size(); ++i) g[i] -= go[i];
        }
      });
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      tape, a, b, "mul", kMulFwd, kMulBwd,
      [](const auto& x, const auto& y, auto& o) {
        for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
      },
      [](Tape& T, int self, int pa, int pb, const auto& ad, const auto& bd) {
        const auto& go = T.gbuf(self);
        if (pa >= 0) {
          auto& g = T.gbuf(pa);
          for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] * bd[i];
        }
        if (pb >= 0) {
          auto& g = T.gbuf(pb);
          for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] * ad[i];
        }
      });
}

Tensor scale(Tape* tape, const Tensor& a, double c) {
  Tensor out(a.shape());
  const auto& ad = a.data();
  auto& od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * c;
  if (!tape) return out;
  tape->add_ew(static_cast<std::uint64_t>(a.size()));
  int pa = tape->input_id(a);
  if (pa < 0) return out;
  int node = tape->record({pa}, a.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(pa);
    for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] * c;
    T.add_ew(go.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() < 2 || x.dim(1) != bias.dim(0) ||
      (x.rank() != 2 && x.rank() != 4))
    shape_error("add_bias", x.shape(), bias.shape());
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t inner = x.size() / (static_cast<std::int64_t>(N) * C);
  Tensor out(x.shape());
  {
    const auto& xd = x.data();
    const auto& bd = bias.data();
    auto& od = out.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i)
          od[base + i] = xd[base + i] + bd[static_cast<size_t>(c)];
      }
  }
  if (!tape) return out;
  tape->add_ew(static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x), pb = tape->input_id(bias);
  if (px < 0 && pb < 0) return out;
  int node = tape->record({px, pb}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    if (px >= 0) {
      auto& g = T.gbuf(px);
      for (size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    }
    if (pb >= 0) {
      auto& g = T.gbuf(pb);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::int64_t base =
              (static_cast<std::int64_t>(n) * C + c) * inner;
          double s = 0;
          for (std::int64_t i = 0; i < inner; ++i) s += go[base + i];
          g[static_cast<size_t>(c)] += s;
        }
      T.add_ew(go.size());
    }
  });
  tape->tag_output(out, node);
  return out;
}

Tensor relu(Tape* tape, const Tensor& x) {
  Tensor out(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] > 0 ? xd[i] : 0.0;
  if (!tape) return out;
  tape->add_ew(kReluFwd * static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  auto keep = x.data();
  int node = tape->record({px}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (size_t i = 0; i < go.size(); ++i)
      if (keep[i] > 0) g[i] += go[i];
    T.add_ew(kReluBwd * go.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor gelu(Tape* tape, const Tensor& x) {
  static constexpr double kC0 = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kC1 = 0.044715;
  Tensor out(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (size_t i = 0; i < od.size(); ++i) {
    const double v = xd[i];
    od[i] = 0.5 * v * (1.0 + std::tanh(kC0 * (v + kC1 * v * v * v)));
  }
  if (!tape) return out;
  tape->add_ew(kGeluFwd * static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  auto keep = x.data();
  int node = tape->record({px}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (size_t i = 0; i < go.size(); ++i) {
      const double v = keep[i];
      const double t = std::tanh(kC0 * (v + kC1 * v * v * v));
      const double du = kC0 * (1.0 + 3.0 * kC1 * v * v);
      g[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
    T.add_ew(kGeluBwd * go.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor batchnorm(Tape* tape, const Tensor& x, const Tensor& gamma,
                 const Tensor& beta, std::vector<double>& running_mean,
                 std::vector<double>& running_var, BnMode mode,
                 double momentum, double eps) {
  if (x.rank() != 2 && x.rank() != 4)
    throw std::invalid_argument("batchnorm: expected rank 2 or 4 input, got " +
                                shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  if (gamma.size() != C || beta.size() != C ||
      static_cast<int>(running_mean.size()) != C ||
      static_cast<int>(running_var.size()) != C)
    shape_error("batchnorm", x.shape(), gamma.shape());
  const std::int64_t inner = x.size() / (static_cast<std::int64_t>(N) * C);
  const std::int64_t m = static_cast<std::int64_t>(N) * inner;
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  Tensor out(x.shape());
  auto& od = out.data();

  // captured by value below; the pullback outlives this frame
  auto chan = [C, inner](int n, int c) {
    return (static_cast<std::int64_t>(n) * C + c) * inner;
  };

  if (mode == BnMode::Frozen) {
    std::vector<double> invstd(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c)
      invstd[static_cast<size_t>(c)] =
          1.0 / std::sqrt(running_var[static_cast<size_t>(c)] + eps);
    std::vector<double> rmean = running_mean;  // snapshot for the pullback
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double a = gd[static_cast<size_t>(c)] * invstd[static_cast<size_t>(c)];
        const double s = bd[static_cast<size_t>(c)] -
                         rmean[static_cast<size_t>(c)] * a;
        const std::int64_t base = chan(n, c);
        for (std::int64_t i = 0; i < inner; ++i)
          od[base + i] = xd[base + i] * a + s;
      }
    if (!tape) return out;
    tape->add_ew(kBnFrozenFwd * static_cast<std::uint64_t>(x.size()));
    int px = tape->input_id(x), pg = tape->input_id(gamma),
        pb = tape->input_id(beta);
    if (px < 0 && pg < 0 && pb < 0) return out;
    auto xkeep = x.data();
    int node = tape->record({px, pg, pb}, x.size(), [=](Tape& T, int self) {
      const auto& go = T.gbuf(self);
      for (int c = 0; c < C; ++c) {
        const double is = invstd[static_cast<size_t>(c)];
        const double a = gd[static_cast<size_t>(c)] * is;
        double dg = 0, db = 0;
        for (int n = 0; n < N; ++n) {
          const std::int64_t base = chan(n, c);
          for (std::int64_t i = 0; i < inner; ++i) {
            const double g = go[base + i];
            db += g;
            dg += g * (xkeep[base + i] - rmean[static_cast<size_t>(c)]) * is;
            if (px >= 0) T.gbuf(px)[base + i] += g * a;
          }
        }
        if (pg >= 0) T.gbuf(pg)[static_cast<size_t>(c)] += dg;
        if (pb >= 0) T.gbuf(pb)[static_cast<size_t>(c)] += db;
      }
      T.add_ew(kBnFrozenBwd * go.size());
    });
    tape->tag_output(out, node);
    return out;
  }

  // Train mode: normalize with biased batch statistics, then update the
  // running buffers (also biased; one convention everywhere).
  std::vector<double> mu(static_cast<size_t>(C), 0.0),
      invstd(static_cast<size_t>(C), 0.0);
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  for (int c = 0; c < C; ++c) {
    double s = 0;
    for (int n = 0; n < N; ++n) {
      const std::int64_t base = chan(n, c);
      for (std::int64_t i = 0; i < inner; ++i) s += xd[base + i];
    }
    const double mean = s / static_cast<double>(m);
    double v = 0;
    for (int n = 0; n < N; ++n) {
      const std::int64_t base = chan(n, c);
      for (std::int64_t i = 0; i < inner; ++i) {
        const double d = xd[base + i] - mean;
        v += d * d;
      }
    }
    const double var = v / static_cast<double>(m);
    mu[static_cast<size_t>(c)] = mean;
    invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
    running_mean[static_cast<size_t>(c)] =
        (1.0 - momentum) * running_mean[static_cast<size_t>(c)] +
        momentum * mean;
    running_var[static_cast<size_t>(c)] =
        (1.0 - momentum) * running_var[static_cast<size_t>(c)] + momentum * var;
    for (int n = 0; n < N; ++n) {
      const std::int64_t base = chan(n, c);
      for (std::int64_t i = 0; i < inner; ++i) {
        const double h = (xd[base + i] - mean) * invstd[static_cast<size_t>(c)];
        (*xhat)[static_cast<size_t>(base + i)] = h;
        od[base + i] = gd[static_cast<size_t>(c)] * h + bd[static_cast<size_t>(c)];
      }
    }
  }
  if (!tape) return out;
  tape->add_ew(kBnTrainFwd * static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x), pg = tape->input_id(gamma),
      pb = tape->input_id(beta);
  if (px < 0 && pg < 0 && pb < 0) return out;
  int node = tape->record({px, pg, pb}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    for (int c = 0; c < C; ++c) {
      double sum_dxh = 0, sum_dxh_xh = 0, db = 0;
      for (int n = 0; n < N; ++n) {
        const std::int64_t base = chan(n, c);
        for (std::int64_t i = 0; i < inner; ++i) {
          const double g = go[base + i];
          const double h = (*xhat)[static_cast<size_t>(base + i)];
          db += g;
          sum_dxh += g;      // times gamma below
          sum_dxh_xh += g * h;
        }
      }
      const double gam = gd[static_cast<size_t>(c)];
      if (pg >= 0) T.gbuf(pg)[static_cast<size_t>(c)] += sum_dxh_xh;
      if (pb >= 0) T.gbuf(pb)[static_cast<size_t>(c)] += db;
      if (px >= 0) {
        const double is = invstd[static_cast<size_t>(c)];
        const double md = static_cast<double>(m);
        for (int n = 0; n < N; ++n) {
          const std::int64_t base = chan(n, c);
          for (std::int64_t i = 0; i < inner; ++i) {
            const double dxh = go[base + i] * gam;
            const double h = (*xhat)[static_cast<size_t>(base + i)];
            T.gbuf(px)[base + i] +=
                is * (dxh - gam * sum_dxh / md - h * gam * sum_dxh_xh / md);
          }
        }
      }
    }
    T.add_ew(kBnTrainBwd * go.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor global_avgpool(Tape* tape, const Tensor& x) {
  if (x.rank() != 4)
    throw std::invalid_argument("global_avgpool: expected rank 4, got " +
                                shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor out({N, C});
  {
    const auto& xd = x.data();
    auto& od = out.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
        double s = 0;
        for (std::int64_t i = 0; i < hw; ++i) s += xd[base + i];
        od[static_cast<std::int64_t>(n) * C + c] = s / static_cast<double>(hw);
      }
  }
  if (!tape) return out;
  tape->add_ew(kPoolFwd * static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  int node = tape->record({px}, out.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double v =
            go[static_cast<std::int64_t>(n) * C + c] / static_cast<double>(hw);
        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) g[base + i] += v;
      }
    T.add_ew(kPoolBwd * g.size());
  });
  tape->tag_output(out, node);
  return out;
}

namespace {

void check_rows(const char* op, const Tensor& x) {
  if (x.rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected [N,C], got " +
                                shape_str(x.shape()));
}

}  // namespace

Tensor softmax(Tape* tape, const Tensor& x) {
  check_rows("softmax", x);
  const int N = x.dim(0), C = x.dim(1);
  Tensor out(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (int n = 0; n < N; ++n) {
    const double* row = xd.data() + static_cast<std::int64_t>(n) * C;
    double* orow = od.data() + static_cast<std::int64_t>(n) * C;
    double mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double s = 0;
    for (int c = 0; c < C; ++c) {
      orow[c] = std::exp(row[c] - mx);
      s += orow[c];
    }
    for (int c = 0; c < C; ++c) orow[c] /= s;
  }
  if (!tape) return out;
  tape->add_ew(kSoftmaxFwd * static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  auto pkeep = out.data();
  int node = tape->record({px}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (int n = 0; n < N; ++n) {
      const std::int64_t base = static_cast<std::int64_t>(n) * C;
      double dot = 0;
      for (int c = 0; c < C; ++c) dot += go[base + c] * pkeep[base + c];
      for (int c = 0; c < C; ++c)
        g[base + c] += pkeep[base + c] * (go[base + c] - dot);
    }
    T.add_ew(kSoftmaxBwd * go.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor log_softmax(Tape* tape, const Tensor& x) {
  check_rows("log_softmax", x);
  const int N = x.dim(0), C = x.dim(1);
  Tensor out(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (int n = 0; n < N; ++n) {
    const double* row = xd.data() + static_cast<std::int64_t>(n) * C;
    double* orow = od.data() + static_cast<std::int64_t>(n) * C;
    double mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double s = 0;
    for (int c = 0; c < C; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    for (int c = 0; c < C; ++c) orow[c] = row[c] - lse;
  }
  if (!tape) return out;
  tape->add_ew(kSoftmaxFwd * static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  auto lskeep = out.data();
  int node = tape->record({px}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (int n = 0; n < N; ++n) {
      const std::int64_t base = static_cast<std::int64_t>(n) * C;
      double s = 0;
      for (int c = 0; c < C; ++c) s += go[base + c];
      for (int c = 0; c < C; ++c)
        g[base + c] += go[base + c] - std::exp(lskeep[base + c]) * s;
    }
    T.add_ew(kSoftmaxBwd * go.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor log(Tape* tape, const Tensor& x) {
  Tensor out(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (size_t i = 0; i < od.size(); ++i) {
    if (xd[i] <= 0.0)
      throw std::domain_error("log: nonpositive input " +
                              std::to_string(xd[i]));
    od[i] = std::log(xd[i]);
  }
  if (!tape) return out;
  tape->add_ew(static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  auto keep = x.data();
  int node = tape->record({px}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] / keep[i];
    T.add_ew(go.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor exp(Tape* tape, const Tensor& x) {
  Tensor out(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = std::exp(xd[i]);
  if (!tape) return out;
  tape->add_ew(static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  auto ykeep = out.data();
  int node = tape->record({px}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] * ykeep[i];
    T.add_ew(go.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor clamp_min(Tape* tape, const Tensor& x, double lo) {
  Tensor out(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] < lo ? lo : xd[i];
  if (!tape) return out;
  tape->add_ew(static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  auto keep = x.data();
  int node = tape->record({px}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (size_t i = 0; i < go.size(); ++i)
      if (keep[i] >= lo) g[i] += go[i];
    T.add_ew(go.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor sum(Tape* tape, const Tensor& x) {
  Tensor out({1});
  const auto& xd = x.data();
  double s = 0;
  for (double v : xd) s += v;
  out.data()[0] = s;
  if (!tape) return out;
  tape->add_ew(static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  int node = tape->record({px}, 1, [=](Tape& T, int self) {
    const double go = T.gbuf(self)[0];
    auto& g = T.gbuf(px);
    for (size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
  tape->tag_output(out, node);
  return out;
}

Tensor mean(Tape* tape, const Tensor& x) {
  Tensor out({1});
  const auto& xd = x.data();
  double s = 0;
  for (double v : xd) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  out.data()[0] = s * inv;
  if (!tape) return out;
  tape->add_ew(static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  int node = tape->record({px}, 1, [=](Tape& T, int self) {
    const double go = T.gbuf(self)[0] * inv;
    auto& g = T.gbuf(px);
    for (size_t i = 0; i < g.size(); ++i) g[i] += go;
    T.add_ew(g.size());
  });
  tape->tag_output(out, node);
  return out;
}

Tensor sum_rows(Tape* tape, const Tensor& x) {
  check_rows("sum_rows", x);
  const int N = x.dim(0), C = x.dim(1);
  Tensor out({N});
  {
    const auto& xd = x.data();
    auto& od = out.data();
    for (int n = 0; n < N; ++n) {
      double s = 0;
      for (int c = 0; c < C; ++c) s += xd[static_cast<std::int64_t>(n) * C + c];
      od[static_cast<size_t>(n)] = s;
    }
  }
  if (!tape) return out;
  tape->add_ew(static_cast<std::uint64_t>(x.size()));
  int px = tape->input_id(x);
  if (px < 0) return out;
  int node = tape->record({px}, N, [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        g[static_cast<std::int64_t>(n) * C + c] += go[static_cast<size_t>(n)];
  });
  tape->tag_output(out, node);
  return out;
}

Tensor gather_labels(Tape* tape, const Tensor& x, const std::vector<int>& y) {
  check_rows("gather_labels", x);
  const int N = x.dim(0), C = x.dim(1);
  if (static_cast<int>(y.size()) != N)
    throw std::invalid_argument("gather_labels: " + std::to_string(y.size()) +
                                " labels for batch " + std::to_string(N));
  for (int i = 0; i < N; ++i)
    if (y[static_cast<size_t>(i)] < 0 || y[static_cast<size_t>(i)] >= C)
      throw std::invalid_argument("gather_labels: label " +
                                  std::to_string(y[static_cast<size_t>(i)]) +
                                  " out of range [0," + std::to_string(C) + ")");
  Tensor out({N});
  {
    const auto& xd = x.data();
    auto& od = out.data();
    for (int n = 0; n < N; ++n)
      od[static_cast<size_t>(n)] =
          xd[static_cast<std::int64_t>(n) * C + y[static_cast<size_t>(n)]];
  }
  if (!tape) return out;
  int px = tape->input_id(x);
  if (px < 0) return out;
  auto labels = y;
  int node = tape->record({px}, N, [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (int n = 0; n < N; ++n)
      g[static_cast<std::int64_t>(n) * C + labels[static_cast<size_t>(n)]] +=
          go[static_cast<size_t>(n)];
  });
  tape->tag_output(out, node);
  return out;
}

Tensor reshape(Tape* tape, const Tensor& x, std::vector<int> shape) {
  Tensor out = Tensor::from_data(std::move(shape), x.data());
  if (out.size() != x.size())
    shape_error("reshape", x.shape(), out.shape());
  if (!tape) return out;
  int px = tape->input_id(x);
  if (px < 0) return out;
  int node = tape->record({px}, x.size(), [=](Tape& T, int self) {
    const auto& go = T.gbuf(self);
    auto& g = T.gbuf(px);
    for (size_t i = 0; i < go.size(); ++i) g[i] += go[i];
  });
  tape->tag_output(out, node);
  return out;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Composite losses

namespace {

void validate_prob_rows(const char* who, const Tensor& t) {
  if (t.rank() != 2)
    throw std::invalid_argument(std::string(who) + ": expected [N,C], got " +
                                shape_str(t.shape()));
  const int N = t.dim(0), C = t.dim(1);
  const auto& d = t.data();
  for (int n = 0; n < N; ++n) {
    double s = 0;
    for (int c = 0; c < C; ++c) {
      const double v = d[static_cast<std::int64_t>(n) * C + c];
      if (v <= 0.0)
        throw std::invalid_argument(
            std::string(who) + ": nonpositive entry " + std::to_string(v) +
            " in row " + std::to_string(n) + " (caller must clamp)");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw std::invalid_argument(std::string(who) + ": row " +
                                  std::to_string(n) + " sums to " +
                                  std::to_string(s) + ", not 1");
  }
}

}  // namespace

Tensor kl_divergence_rows(Tape* tape, const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape())
    throw std::invalid_argument("kl_divergence: shape mismatch " +
                                shape_str(p.shape()) + " x " +
                                shape_str(q.shape()));
  validate_prob_rows("kl_divergence", p);
  validate_prob_rows("kl_divergence", q);
  Tensor diff = ops::sub(tape, ops::log(tape, p), ops::log(tape, q));
  return ops::sum_rows(tape, ops::mul(tape, p, diff));
}

Tensor kl_divergence(Tape* tape, const Tensor& p, const Tensor& q) {
  Tensor rows = kl_divergence_rows(tape, p, q);
  return ops::clamp_min(tape, ops::mean(tape, rows), 0.0);
}

Tensor cross_entropy_rows(Tape* tape, const Tensor& logits,
                          const std::vector<int>& labels) {
  Tensor ls = ops::log_softmax(tape, logits);
  return ops::scale(tape, ops::gather_labels(tape, ls, labels), -1.0);
}

Tensor cross_entropy(Tape* tape, const Tensor& logits,
                     const std::vector<int>& labels) {
  return ops::mean(tape, cross_entropy_rows(tape, logits, labels));
}

// ---------------------------------------------------------------------------
// RNG

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0x6a09e667f3bcc909ull + stream * 0x9e3779b97f4a7c15ull);
  (void)splitmix64(s);
  return splitmix64(s) ^ s;
}

double uniform01(std::uint64_t& state) {
  return static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
}

double normal01(std::uint64_t& state) {
  const double u1 = 1.0 - uniform01(state);  // (0,1]
  const double u2 = uniform01(state);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace robustlab
