// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "robustlab/tensor.hpp"

namespace robustlab {

enum class Family { Mlp, Wrn };
enum class Act { Relu, Gelu };

/// Architecture descriptor. Two uses: building trainable mini models, and
/// analytic parameter/FLOP counting of arbitrary (including full-size) nets
/// without instantiating weights.
struct ArchSpec {
  Family family = Family::Mlp;
  int depth = 1;   // wrn: total depth (6n+4); mlp: number of hidden layers
  int width = 1;   // wrn: widen factor; mlp: hidden units per layer
  Act activation = Act::Relu;
  std::array<int, 3> input_shape{1, 8, 8};  // channels, height, width
  int num_classes = 2;

  void validate() const;
  std::string name() const;

  static ArchSpec wrn(int depth, int width, std::array<int, 3> input,
                      int classes, Act act = Act::Relu);
  static ArchSpec mlp(int hidden_layers, int hidden_units,
                      std::array<int, 3> input, int classes,
                      Act act = Act::Relu);
};

struct FlopBreakdown {
  double mac = 0;          // convolution + linear multiply-accumulate FLOPs
  double elementwise = 0;  // activations, BN, adds, pooling
  double total() const { return mac + elementwise; }
};

/// Exact trainable parameter count (conv/linear weights, BN affine, biases;
/// BN running statistics excluded).
std::int64_t count_params(const ArchSpec& arch);

/// Analytic per-example forward FLOPs at batch 1, counting 2 FLOPs per
/// multiply-accumulate and the documented per-element constants for
/// activations/BN (frozen-mode) — matches what the instrumented primitives
/// report for one frozen forward pass.
FlopBreakdown count_forward_flops(const ArchSpec& arch);

struct ConvLayer {
  Tensor w;  // [Cout, Cin, kh, kw]
  int stride = 1;
  int pad = 1;
};

struct BnLayer {
  Tensor gamma, beta;
  std::vector<double> running_mean, running_var;
};

struct LinearLayer {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

struct WrnBlock {
  BnLayer bn1;
  ConvLayer conv1;
  BnLayer bn2;
  ConvLayer conv2;
  bool has_shortcut = false;
  ConvLayer shortcut;  // 1x1, used when channels or stride change
};

class Model {
 public:
  /// Deterministic He-style initialization; identical seed gives
  /// bitwise-identical parameters.
  static Model build(const ArchSpec& arch, std::uint64_t seed);

  const ArchSpec& arch() const { return arch_; }
  Tensor forward(Tape* tape, const Tensor& x, BnMode mode);

  /// Stable-ordered named views of trainable tensors / running-stat buffers.
  std::vector<std::pair<std::string, Tensor*>> parameters();
  std::vector<std::pair<std::string, std::vector<double>*>> buffers();
  std::int64_t parameter_count();

  Model clone() const;  // independent deep copy
  void save(const std::string& path);
  static Model load(const std::string& path);

 private:
  ArchSpec arch_;
  // wrn
  ConvLayer conv1_;
  std::vector<WrnBlock> blocks_;
  BnLayer bn_final_;
  LinearLayer fc_;
  // mlp
  std::vector<LinearLayer> mlp_layers_;

  Tensor forward_wrn(Tape* tape, const Tensor& x, BnMode mode);
  Tensor forward_mlp(Tape* tape, const Tensor& x);
  Tensor activate(Tape* tape, const Tensor& x) const;
};

// Flat parameter-value snapshots, in parameters() order.
std::vector<std::vector<double>> snapshot_params(Model& m);
void restore_params(Model& m, const std::vector<std::vector<double>>& snap);
std::vector<std::vector<double>> snapshot_buffers(Model& m);
void restore_buffers(Model& m, const std::vector<std::vector<double>>& snap);

std::string family_name(Family f);
std::string act_name(Act a);
Family family_from_name(const std::string& s);
Act act_from_name(const std::string& s);

}  // namespace robustlab
