// SPDX-License-Identifier: Apache-2.0
#include "robustlab/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace robustlab {

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian");

namespace {

// Per-element forward constants, frozen-mode BN; must stay in sync with the
// instrumented primitives in tensor.cpp.
constexpr double kBnElem = 2.0;
constexpr double kReluElem = 1.0;
constexpr double kGeluElem = 8.0;
constexpr double kAddElem = 1.0;
constexpr double kPoolElem = 1.0;
constexpr double kBiasElem = 1.0;

double act_elem_cost(Act a) { return a == Act::Relu ? kReluElem : kGeluElem; }

int conv_out(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

struct WrnLayout {
  struct Block {
    int cin, cout, stride;
    int hin, win, hout, wout;
    bool shortcut;
  };
  int conv1_cout = 16;
  int h0, w0;  // spatial size after conv1 (stride 1, pad 1)
  std::vector<Block> blocks;
  int final_c, final_h, final_w;
};

WrnLayout wrn_layout(const ArchSpec& a) {
  WrnLayout L;
  const int n = (a.depth - 4) / 6;
  L.h0 = conv_out(a.input_shape[1], 3, 1, 1);
  L.w0 = conv_out(a.input_shape[2], 3, 1, 1);
  int c = L.conv1_cout, h = L.h0, w = L.w0;
  const int widths[3] = {16 * a.width, 32 * a.width, 64 * a.width};
  const int strides[3] = {1, 2, 2};
  for (int g = 0; g < 3; ++g)
    for (int b = 0; b < n; ++b) {
      WrnLayout::Block blk;
      blk.cin = c;
      blk.cout = widths[g];
      blk.stride = b == 0 ? strides[g] : 1;
      blk.hin = h;
      blk.win = w;
      blk.hout = conv_out(h, 3, blk.stride, 1);
      blk.wout = conv_out(w, 3, blk.stride, 1);
      blk.shortcut = blk.cin != blk.cout || blk.stride != 1;
      L.blocks.push_back(blk);
      c = blk.cout;
      h = blk.hout;
      w = blk.wout;
    }
  L.final_c = c;
  L.final_h = h;
  L.final_w = w;
  return L;
}

std::int64_t mlp_input_dim(const ArchSpec& a) {
  return static_cast<std::int64_t>(a.input_shape[0]) * a.input_shape[1] *
         a.input_shape[2];
}

}  // namespace

void ArchSpec::validate() const {
  if (num_classes < 2)
    throw std::invalid_argument("arch: num_classes must be >= 2");
  for (int d : input_shape)
    if (d <= 0) throw std::invalid_argument("arch: nonpositive input dim");
  if (family == Family::Wrn) {
    if (depth < 10 || (depth - 4) % 6 != 0)
      throw std::invalid_argument("arch: wrn depth must be 6n+4 with n>=1, got " +
                                  std::to_string(depth));
    if (width < 1)
      throw std::invalid_argument("arch: wrn width must be >= 1");
  } else {
    if (depth < 0)
      throw std::invalid_argument("arch: mlp depth (hidden layers) must be >= 0");
    if (depth > 0 && width < 1)
      throw std::invalid_argument("arch: mlp width must be >= 1");
  }
}

std::string ArchSpec::name() const {
  if (family == Family::Wrn)
    return "wrn-" + std::to_string(depth) + "-" + std::to_string(width);
  return "mlp-" + std::to_string(depth) + "x" + std::to_string(width);
}

ArchSpec ArchSpec::wrn(int depth, int width, std::array<int, 3> input,
                       int classes, Act act) {
  ArchSpec a;
  a.family = Family::Wrn;
  a.depth = depth;
  a.width = width;
  a.activation = act;
  a.input_shape = input;
  a.num_classes = classes;
  a.validate();
  return a;
}

ArchSpec ArchSpec::mlp(int hidden_layers, int hidden_units,
                       std::array<int, 3> input, int classes, Act act) {
  ArchSpec a;
  a.family = Family::Mlp;
  a.depth = hidden_layers;
  a.width = hidden_units;
  a.activation = act;
  a.input_shape = input;
  a.num_classes = classes;
  a.validate();
  return a;
}

std::int64_t count_params(const ArchSpec& arch) {
  arch.validate();
  if (arch.family == Family::Mlp) {
    std::int64_t in = mlp_input_dim(arch), total = 0;
    for (int l = 0; l < arch.depth; ++l) {
      total += in * arch.width + arch.width;
      in = arch.width;
    }
    total += in * arch.num_classes + arch.num_classes;
    return total;
  }
  WrnLayout L = wrn_layout(arch);
  std::int64_t total = 9ll * arch.input_shape[0] * L.conv1_cout;  // conv1
  for (const auto& b : L.blocks) {
    total += 2ll * b.cin;                // bn1
    total += 9ll * b.cin * b.cout;       // conv1 3x3
    total += 2ll * b.cout;               // bn2
    total += 9ll * b.cout * b.cout;      // conv2 3x3
    if (b.shortcut) total += static_cast<std::int64_t>(b.cin) * b.cout;
  }
  total += 2ll * L.final_c;  // final bn
  total += static_cast<std::int64_t>(L.final_c) * arch.num_classes +
           arch.num_classes;
  return total;
}

FlopBreakdown count_forward_flops(const ArchSpec& arch) {
  arch.validate();
  FlopBreakdown f;
  const double act_cost = act_elem_cost(arch.activation);
  if (arch.family == Family::Mlp) {
    double in = static_cast<double>(mlp_input_dim(arch));
    for (int l = 0; l < arch.depth; ++l) {
      f.mac += 2.0 * in * arch.width;
      f.elementwise += kBiasElem * arch.width + act_cost * arch.width;
      in = arch.width;
    }
    f.mac += 2.0 * in * arch.num_classes;
    f.elementwise += kBiasElem * arch.num_classes;
    return f;
  }
  WrnLayout L = wrn_layout(arch);
  f.mac += 2.0 * 9.0 * arch.input_shape[0] * L.conv1_cout * L.h0 * L.w0;
  for (const auto& b : L.blocks) {
    const double in_elems = static_cast<double>(b.cin) * b.hin * b.win;
    const double mid_elems = static_cast<double>(b.cout) * b.hout * b.wout;
    f.elementwise += (kBnElem + act_cost) * in_elems;          // bn1 + act
    f.mac += 2.0 * 9.0 * b.cin * b.cout * b.hout * b.wout;     // conv1
    f.elementwise += (kBnElem + act_cost) * mid_elems;         // bn2 + act
    f.mac += 2.0 * 9.0 * b.cout * b.cout * b.hout * b.wout;    // conv2
    if (b.shortcut)
      f.mac += 2.0 * b.cin * b.cout * b.hout * b.wout;         // 1x1
    f.elementwise += kAddElem * mid_elems;                     // residual add
  }
  const double final_elems =
      static_cast<double>(L.final_c) * L.final_h * L.final_w;
  f.elementwise += (kBnElem + act_cost) * final_elems;
  f.elementwise += kPoolElem * final_elems;
  f.mac += 2.0 * L.final_c * arch.num_classes;
  f.elementwise += kBiasElem * arch.num_classes;
  return f;
}

// ---------------------------------------------------------------------------
// Construction

namespace {

Tensor he_conv(int cout, int cin, int k, std::uint64_t& rng) {
  const double std = std::sqrt(2.0 / (static_cast<double>(k) * k * cin));
  Tensor t({cout, cin, k, k});
  for (auto& v : t.data()) v = std * normal01(rng);
  t.set_requires_grad(true);
  return t;
}

Tensor he_linear(int in, int out, std::uint64_t& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(in));
  Tensor t({in, out});
  for (auto& v : t.data()) v = std * normal01(rng);
  t.set_requires_grad(true);
  return t;
}

BnLayer make_bn(int c) {
  BnLayer bn;
  bn.gamma = Tensor({c}, 1.0, true);
  bn.beta = Tensor({c}, 0.0, true);
  bn.running_mean.assign(static_cast<size_t>(c), 0.0);
  bn.running_var.assign(static_cast<size_t>(c), 1.0);
  return bn;
}

}  // namespace

Model Model::build(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  Model m;
  m.arch_ = arch;
  std::uint64_t rng = mix_seed(seed, 0x6d6f64656cull);  // "model"
  if (arch.family == Family::Mlp) {
    int in = static_cast<int>(mlp_input_dim(arch));
    for (int l = 0; l < arch.depth; ++l) {
      LinearLayer layer;
      layer.w = he_linear(in, arch.width, rng);
      layer.b = Tensor({arch.width}, 0.0, true);
      m.mlp_layers_.push_back(std::move(layer));
      in = arch.width;
    }
    LinearLayer head;
    head.w = he_linear(in, arch.num_classes, rng);
    head.b = Tensor({arch.num_classes}, 0.0, true);
    m.mlp_layers_.push_back(std::move(head));
    return m;
  }
  WrnLayout L = wrn_layout(arch);
  m.conv1_.w = he_conv(L.conv1_cout, arch.input_shape[0], 3, rng);
  m.conv1_.stride = 1;
  m.conv1_.pad = 1;
  for (const auto& b : L.blocks) {
    WrnBlock blk;
    blk.bn1 = make_bn(b.cin);
    blk.conv1.w = he_conv(b.cout, b.cin, 3, rng);
    blk.conv1.stride = b.stride;
    blk.conv1.pad = 1;
    blk.bn2 = make_bn(b.cout);
    blk.conv2.w = he_conv(b.cout, b.cout, 3, rng);
    blk.conv2.stride = 1;
    blk.conv2.pad = 1;
    blk.has_shortcut = b.shortcut;
    if (b.shortcut) {
      blk.shortcut.w = he_conv(b.cout, b.cin, 1, rng);
      blk.shortcut.stride = b.stride;
      blk.shortcut.pad = 0;
    }
    m.blocks_.push_back(std::move(blk));
  }
  m.bn_final_ = make_bn(L.final_c);
  m.fc_.w = he_linear(L.final_c, arch.num_classes, rng);
  m.fc_.b = Tensor({arch.num_classes}, 0.0, true);
  return m;
}

Tensor Model::activate(Tape* tape, const Tensor& x) const {
  return arch_.activation == Act::Relu ? ops::relu(tape, x)
                                       : ops::gelu(tape, x);
}

Tensor Model::forward_wrn(Tape* tape, const Tensor& x, BnMode mode) {
  Tensor h = ops::conv2d(tape, x, conv1_.w, conv1_.stride, conv1_.pad);
  for (auto& blk : blocks_) {
    Tensor o1 = activate(
        tape, ops::batchnorm(tape, h, blk.bn1.gamma, blk.bn1.beta,
                             blk.bn1.running_mean, blk.bn1.running_var, mode));
    Tensor y = ops::conv2d(tape, o1, blk.conv1.w, blk.conv1.stride,
                           blk.conv1.pad);
    Tensor o2 = activate(
        tape, ops::batchnorm(tape, y, blk.bn2.gamma, blk.bn2.beta,
                             blk.bn2.running_mean, blk.bn2.running_var, mode));
    Tensor z = ops::conv2d(tape, o2, blk.conv2.w, blk.conv2.stride,
                           blk.conv2.pad);
    Tensor sc = blk.has_shortcut
                    ? ops::conv2d(tape, o1, blk.shortcut.w,
                                  blk.shortcut.stride, blk.shortcut.pad)
                    : h;
    h = ops::add(tape, z, sc);
  }
  Tensor o = activate(
      tape, ops::batchnorm(tape, h, bn_final_.gamma, bn_final_.beta,
                           bn_final_.running_mean, bn_final_.running_var, mode));
  Tensor pooled = ops::global_avgpool(tape, o);
  return ops::add_bias(tape, ops::matmul(tape, pooled, fc_.w), fc_.b);
}

Tensor Model::forward_mlp(Tape* tape, const Tensor& x) {
  const int n = x.dim(0);
  Tensor h = ops::reshape(tape, x,
                          {n, static_cast<int>(x.size() / n)});
  for (size_t l = 0; l + 1 < mlp_layers_.size(); ++l) {
    h = ops::add_bias(tape, ops::matmul(tape, h, mlp_layers_[l].w),
                      mlp_layers_[l].b);
    h = activate(tape, h);
  }
  auto& head = mlp_layers_.back();
  return ops::add_bias(tape, ops::matmul(tape, h, head.w), head.b);
}

Tensor Model::forward(Tape* tape, const Tensor& x, BnMode mode) {
  if (x.rank() != 4 || x.dim(1) != arch_.input_shape[0] ||
      x.dim(2) != arch_.input_shape[1] || x.dim(3) != arch_.input_shape[2])
    throw std::invalid_argument("forward: input " + shape_str(x.shape()) +
                                " does not match arch input shape");
  return arch_.family == Family::Wrn ? forward_wrn(tape, x, mode)
                                     : forward_mlp(tape, x);
}

std::vector<std::pair<std::string, Tensor*>> Model::parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  if (arch_.family == Family::Mlp) {
    for (size_t l = 0; l < mlp_layers_.size(); ++l) {
      out.emplace_back("fc" + std::to_string(l) + ".w", &mlp_layers_[l].w);
      out.emplace_back("fc" + std::to_string(l) + ".b", &mlp_layers_[l].b);
    }
    return out;
  }
  out.emplace_back("conv1.w", &conv1_.w);
  for (size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    auto& b = blocks_[i];
    out.emplace_back(p + "bn1.gamma", &b.bn1.gamma);
    out.emplace_back(p + "bn1.beta", &b.bn1.beta);
    out.emplace_back(p + "conv1.w", &b.conv1.w);
    out.emplace_back(p + "bn2.gamma", &b.bn2.gamma);
    out.emplace_back(p + "bn2.beta", &b.bn2.beta);
    out.emplace_back(p + "conv2.w", &b.conv2.w);
    if (b.has_shortcut) out.emplace_back(p + "shortcut.w", &b.shortcut.w);
  }
  out.emplace_back("bn.gamma", &bn_final_.gamma);
  out.emplace_back("bn.beta", &bn_final_.beta);
  out.emplace_back("fc.w", &fc_.w);
  out.emplace_back("fc.b", &fc_.b);
  return out;
}

std::vector<std::pair<std::string, std::vector<double>*>> Model::buffers() {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  if (arch_.family == Family::Mlp) return out;
  for (size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    auto& b = blocks_[i];
    out.emplace_back(p + "bn1.running_mean", &b.bn1.running_mean);
    out.emplace_back(p + "bn1.running_var", &b.bn1.running_var);
    out.emplace_back(p + "bn2.running_mean", &b.bn2.running_mean);
    out.emplace_back(p + "bn2.running_var", &b.bn2.running_var);
  }
  out.emplace_back("bn.running_mean", &bn_final_.running_mean);
  out.emplace_back("bn.running_var", &bn_final_.running_var);
  return out;
}

std::int64_t Model::parameter_count() {
  std::int64_t n = 0;
  for (auto& [name, t] : parameters()) n += t->size();
  return n;
}

Model Model::clone() const {
  Model m = *this;  // shallow
  auto deep = [](Tensor& t) { t = t.clone(); };
  deep(m.conv1_.w);
  for (auto& b : m.blocks_) {
    deep(b.bn1.gamma);
    deep(b.bn1.beta);
    deep(b.conv1.w);
    deep(b.bn2.gamma);
    deep(b.bn2.beta);
    deep(b.conv2.w);
    if (b.has_shortcut) deep(b.shortcut.w);
  }
  deep(m.bn_final_.gamma);
  deep(m.bn_final_.beta);
  deep(m.fc_.w);
  deep(m.fc_.b);
  for (auto& l : m.mlp_layers_) {
    deep(l.w);
    deep(l.b);
  }
  return m;
}

std::vector<std::vector<double>> snapshot_params(Model& m) {
  std::vector<std::vector<double>> out;
  for (auto& [name, t] : m.parameters()) out.push_back(t->data());
  return out;
}

void restore_params(Model& m, const std::vector<std::vector<double>>& snap) {
  auto params = m.parameters();
  if (params.size() != snap.size())
    throw std::invalid_argument("restore_params: snapshot size mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].second->data().size() != snap[i].size())
      throw std::invalid_argument("restore_params: shape mismatch at " +
                                  params[i].first);
    params[i].second->data() = snap[i];
  }
}

std::vector<std::vector<double>> snapshot_buffers(Model& m) {
  std::vector<std::vector<double>> out;
  for (auto& [name, b] : m.buffers()) out.push_back(*b);
  return out;
}

void restore_buffers(Model& m, const std::vector<std::vector<double>>& snap) {
  auto bufs = m.buffers();
  if (bufs.size() != snap.size())
    throw std::invalid_argument("restore_buffers: snapshot size mismatch");
  for (size_t i = 0; i < bufs.size(); ++i) *bufs[i].second = snap[i];
}

// ---------------------------------------------------------------------------
// Serialization: magic "RLAB", version u32, tensor count u32, then per tensor
// name length u32 + UTF-8 name, rank u32, dims u32[], raw f64 data.

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("model file: truncated");
  return v;
}

void put_tensor(std::ostream& os, const std::string& name,
                const std::vector<int>& shape, const std::vector<double>& d) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (int dim : shape) put_u32(os, static_cast<std::uint32_t>(dim));
  os.write(reinterpret_cast<const char*>(d.data()),
           static_cast<std::streamsize>(d.size() * sizeof(double)));
}

struct RawTensor {
  std::vector<int> shape;
  std::vector<double> data;
};

std::pair<std::string, RawTensor> get_tensor(std::istream& is) {
  const std::uint32_t name_len = get_u32(is);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  RawTensor rt;
  const std::uint32_t rank = get_u32(is);
  std::int64_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    rt.shape.push_back(static_cast<int>(get_u32(is)));
    n *= rt.shape.back();
  }
  rt.data.resize(static_cast<size_t>(n));
  is.read(reinterpret_cast<char*>(rt.data.data()),
          static_cast<std::streamsize>(rt.data.size() * sizeof(double)));
  if (!is) throw std::runtime_error("model file: truncated tensor " + name);
  return {std::move(name), std::move(rt)};
}

}  // namespace

void Model::save(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("model save: cannot open " + path);
  os.write("RLAB", 4);
  put_u32(os, 1);
  auto params = parameters();
  auto bufs = buffers();
  put_u32(os, static_cast<std::uint32_t>(params.size() + bufs.size() + 1));
  const std::vector<double> meta{
      static_cast<double>(arch_.family == Family::Wrn ? 1 : 0),
      static_cast<double>(arch_.depth),
      static_cast<double>(arch_.width),
      static_cast<double>(arch_.activation == Act::Gelu ? 1 : 0),
      static_cast<double>(arch_.input_shape[0]),
      static_cast<double>(arch_.input_shape[1]),
      static_cast<double>(arch_.input_shape[2]),
      static_cast<double>(arch_.num_classes)};
  put_tensor(os, "meta.arch", {8}, meta);
  for (auto& [name, t] : params) put_tensor(os, name, t->shape(), t->data());
  for (auto& [name, b] : bufs)
    put_tensor(os, name, {static_cast<int>(b->size())}, *b);
  if (!os) throw std::runtime_error("model save: write failed for " + path);
}

Model Model::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("model load: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RLAB", 4) != 0)
    throw std::runtime_error("model load: bad magic in " + path);
  const std::uint32_t version = get_u32(is);
  if (version != 1)
    throw std::runtime_error("model load: unsupported version " +
                             std::to_string(version));
  const std::uint32_t count = get_u32(is);
  std::map<std::string, RawTensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) tensors.insert(get_tensor(is));

  auto meta_it = tensors.find("meta.arch");
  if (meta_it == tensors.end() || meta_it->second.data.size() != 8)
    throw std::runtime_error("model load: missing meta.arch");
  const auto& md = meta_it->second.data;
  ArchSpec arch;
  arch.family = md[0] != 0 ? Family::Wrn : Family::Mlp;
  arch.depth = static_cast<int>(md[1]);
  arch.width = static_cast<int>(md[2]);
  arch.activation = md[3] != 0 ? Act::Gelu : Act::Relu;
  arch.input_shape = {static_cast<int>(md[4]), static_cast<int>(md[5]),
                      static_cast<int>(md[6])};
  arch.num_classes = static_cast<int>(md[7]);

  Model m = Model::build(arch, 0);
  for (auto& [name, t] : m.parameters()) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw std::runtime_error("model load: missing tensor " + name);
    if (it->second.data.size() != t->data().size())
      throw std::runtime_error("model load: size mismatch for " + name);
    t->data() = it->second.data;
  }
  for (auto& [name, b] : m.buffers()) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw std::runtime_error("model load: missing buffer " + name);
    if (it->second.data.size() != b->size())
      throw std::runtime_error("model load: size mismatch for " + name);
    *b = it->second.data;
  }
  return m;
}

std::string family_name(Family f) { return f == Family::Wrn ? "wrn" : "mlp"; }
std::string act_name(Act a) { return a == Act::Gelu ? "gelu" : "relu"; }

Family family_from_name(const std::string& s) {
  if (s == "wrn") return Family::Wrn;
  if (s == "mlp") return Family::Mlp;
  throw std::invalid_argument("unknown model family: " + s);
}

Act act_from_name(const std::string& s) {
  if (s == "relu") return Act::Relu;
  if (s == "gelu") return Act::Gelu;
  throw std::invalid_argument("unknown activation: " + s);
}

}  // namespace robustlab
