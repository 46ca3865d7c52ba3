// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fd_check.hpp"
#include "robustlab/tensor.hpp"

using namespace robustlab;

namespace {

const double kTol = 1e-4;

void expect_fd(const fd::BuildFn& build, std::vector<Tensor> inputs) {
  const auto rep = fd::check_gradients(build, std::move(inputs));
  CAPTURE(rep.worst);
  CHECK(rep.checked > 0);
  CHECK(rep.max_rel_err < kTol);
}

}  // namespace

TEST_CASE("pointwise primitive values") {
  Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  Tensor r = ops::relu(nullptr, x);
  CHECK(r.data() == std::vector<double>{0.0, 0.0, 2.0});

  Tensor z = Tensor::from_data({1}, {0.0});
  CHECK(ops::gelu(nullptr, z).data()[0] == 0.0);

  // identity matmul
  std::uint64_t rng = 7;
  Tensor a = fd::random_tensor({3, 3}, rng);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.data()[static_cast<size_t>(i * 3 + i)] = 1.0;
  Tensor prod = ops::matmul(nullptr, eye, a);
  for (size_t i = 0; i < prod.data().size(); ++i)
    CHECK(prod.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-15));
}

TEST_CASE("shape errors name the primitive") {
  Tensor a({2, 3});
  Tensor b({4, 5});
  CHECK_THROWS_WITH_AS(ops::matmul(nullptr, a, b),
                       "matmul: shape mismatch [2,3] x [4,5]",
                       std::invalid_argument);
  CHECK_THROWS_AS(ops::add(nullptr, a, b), std::invalid_argument);
  Tensor x({1, 2, 4, 4});
  Tensor w({3, 5, 3, 3});
  CHECK_THROWS_AS(ops::conv2d(nullptr, x, w, 1, 1), std::invalid_argument);
}

TEST_CASE("backward requires a scalar recorded loss") {
  Tape tape;
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y = ops::mul(&tape, x, x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  Tensor unrelated({1}, 0.5);
  CHECK_THROWS_AS(tape.backward(unrelated), std::invalid_argument);
}

TEST_CASE("sum of squares gradient") {
  Tape tape;
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor loss = ops::sum(&tape, ops::mul(&tape, x, x));
  tape.backward(loss);
  Tensor g = tape.grad(x);
  CHECK(g.data()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(g.data()[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("backward twice over one tape is bitwise identical") {
  std::uint64_t rng = 11;
  Tape tape;
  Tensor x = fd::random_tensor({4, 6}, rng);
  Tensor w = fd::random_tensor({6, 3}, rng);
  Tensor logits = ops::matmul(&tape, x, w);
  Tensor loss = ops::mean(&tape, ops::mul(&tape, logits, logits));
  tape.backward(loss);
  const auto g1 = tape.grad(x).data();
  const auto gw1 = tape.grad(w).data();
  tape.backward(loss);
  CHECK(tape.grad(x).data() == g1);
  CHECK(tape.grad(w).data() == gw1);
}

TEST_CASE("finite differences: matmul / add / sub / mul / scale") {
  std::uint64_t rng = 1000;
  for (int seed = 0; seed < 5; ++seed) {
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::matmul(t, in[0], in[1]), 42);
        },
        {fd::random_tensor({3, 4}, rng), fd::random_tensor({4, 2}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::add(t, in[0], in[1]), 43);
        },
        {fd::random_tensor({2, 5}, rng), fd::random_tensor({2, 5}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::sub(t, in[0], in[1]), 44);
        },
        {fd::random_tensor({7}, rng), fd::random_tensor({7}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::mul(t, in[0], in[1]), 45);
        },
        {fd::random_tensor({3, 3}, rng), fd::random_tensor({3, 3}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::scale(t, in[0], -1.7), 46);
        },
        {fd::random_tensor({6}, rng)});
  }
}

TEST_CASE("finite differences: conv2d") {
  std::uint64_t rng = 2000;
  struct Case {
    std::vector<int> x, w;
    int stride, pad;
  };
  const Case cases[] = {
      {{2, 2, 5, 5}, {3, 2, 3, 3}, 1, 1},
      {{1, 3, 6, 6}, {4, 3, 3, 3}, 2, 1},
      {{2, 4, 4, 4}, {2, 4, 1, 1}, 2, 0},
  };
  for (const auto& c : cases)
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::conv2d(t, in[0], in[1], c.stride,
                                                   c.pad),
                                    47);
        },
        {fd::random_tensor(c.x, rng), fd::random_tensor(c.w, rng)});
}

TEST_CASE("finite differences: activations and pointwise maps") {
  std::uint64_t rng = 3000;
  for (int seed = 0; seed < 4; ++seed) {
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::relu(t, in[0]), 48);
        },
        {fd::random_tensor({11}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::gelu(t, in[0]), 49);
        },
        {fd::random_tensor({11}, rng, -2.0, 2.0)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::log(t, in[0]), 50);
        },
        {fd::random_tensor({9}, rng, 0.2, 1.5)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::exp(t, in[0]), 51);
        },
        {fd::random_tensor({9}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::clamp_min(t, in[0], 0.3), 52);
        },
        {fd::random_tensor({13}, rng, 0.0, 1.0)});
  }
}

TEST_CASE("finite differences: softmax family, reductions, gather") {
  std::uint64_t rng = 4000;
  const std::vector<int> labels{1, 0, 2};
  for (int seed = 0; seed < 4; ++seed) {
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::softmax(t, in[0]), 53);
        },
        {fd::random_tensor({3, 4}, rng, -3.0, 3.0)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::log_softmax(t, in[0]), 54);
        },
        {fd::random_tensor({3, 4}, rng, -3.0, 3.0)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return ops::mean(t, in[0]);
        },
        {fd::random_tensor({8}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::sum_rows(t, in[0]), 55);
        },
        {fd::random_tensor({4, 3}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::gather_labels(t, in[0], labels),
                                    56);
        },
        {fd::random_tensor({3, 5}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::reshape(t, in[0], {6, 2}), 57);
        },
        {fd::random_tensor({3, 4}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::global_avgpool(t, in[0]), 58);
        },
        {fd::random_tensor({2, 3, 4, 4}, rng)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          return fd::project_scalar(t, ops::add_bias(t, in[0], in[1]), 59);
        },
        {fd::random_tensor({2, 3, 2, 2}, rng), fd::random_tensor({3}, rng)});
  }
}

TEST_CASE("finite differences: batchnorm in both modes") {
  std::uint64_t rng = 5000;
  const int C = 3;
  for (int seed = 0; seed < 3; ++seed) {
    // train mode: fresh running buffers per evaluation keep the build pure
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          std::vector<double> rm(C, 0.0), rv(C, 1.0);
          return fd::project_scalar(
              t, ops::batchnorm(t, in[0], in[1], in[2], rm, rv,
                                BnMode::TrainUpdate),
              60);
        },
        {fd::random_tensor({4, C, 3, 3}, rng), fd::random_tensor({C}, rng, 0.5, 1.5),
         fd::random_tensor({C}, rng, -0.5, 0.5)});
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          std::vector<double> rm{0.1, -0.2, 0.3}, rv{1.1, 0.7, 1.4};
          return fd::project_scalar(
              t, ops::batchnorm(t, in[0], in[1], in[2], rm, rv, BnMode::Frozen),
              61);
        },
        {fd::random_tensor({4, C, 3, 3}, rng), fd::random_tensor({C}, rng, 0.5, 1.5),
         fd::random_tensor({C}, rng, -0.5, 0.5)});
  }
}

TEST_CASE("softmax stability and row normalization") {
  std::uint64_t rng = 6000;
  Tensor big = fd::random_tensor({8, 5}, rng, -1e3, 1e3, false);
  Tensor p = ops::softmax(nullptr, big);
  for (int i = 0; i < 8; ++i) {
    double s = 0;
    for (int j = 0; j < 5; ++j) {
      const double v = p.data()[static_cast<size_t>(i * 5 + j)];
      CHECK(std::isfinite(v));
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("kl divergence values and contract") {
  Tensor p = Tensor::from_data({1, 2}, {0.999, 0.001});
  Tensor q = Tensor::from_data({1, 2}, {0.5, 0.5});
  // direct evaluation of the two-term sum
  const double expected =
      0.999 * std::log(0.999 / 0.5) + 0.001 * std::log(0.001 / 0.5);
  CHECK(kl_divergence(nullptr, p, q).scalar() ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(0.6852).epsilon(1e-3));

  CHECK(kl_divergence(nullptr, p, p).scalar() == 0.0);

  Tensor a = Tensor::from_data({1, 2}, {0.9, 0.1});
  CHECK(kl_divergence(nullptr, a, q).scalar() !=
        doctest::Approx(kl_divergence(nullptr, q, a).scalar()).epsilon(1e-6));

  Tensor bad = Tensor::from_data({1, 2}, {1.0, 0.0});
  CHECK_THROWS_AS(kl_divergence(nullptr, p, bad), std::invalid_argument);
  Tensor not_prob = Tensor::from_data({1, 2}, {0.4, 0.4});
  CHECK_THROWS_AS(kl_divergence(nullptr, not_prob, q), std::invalid_argument);
}

TEST_CASE("kl gradient w.r.t. the second argument vanishes at p = q") {
  std::uint64_t rng = 7000;
  Tensor za = fd::random_tensor({3, 4}, rng, -2.0, 2.0, false);
  Tensor zb = za.clone();
  zb.set_requires_grad(true);
  Tape tape;
  Tensor p = ops::clamp_min(&tape, ops::softmax(&tape, za), 1e-12);
  Tensor q = ops::clamp_min(&tape, ops::softmax(&tape, zb), 1e-12);
  Tensor loss = kl_divergence(&tape, p, q);
  CHECK(loss.scalar() == 0.0);
  tape.backward(loss);
  const Tensor gzb = tape.grad(zb);
  for (double g : gzb.data()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("finite differences: kl divergence through softmax") {
  std::uint64_t rng = 7500;
  for (int seed = 0; seed < 3; ++seed)
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          Tensor p = ops::clamp_min(t, ops::softmax(t, in[0]), 1e-12);
          Tensor q = ops::clamp_min(t, ops::softmax(t, in[1]), 1e-12);
          return kl_divergence(t, p, q);
        },
        {fd::random_tensor({4, 3}, rng, -2.0, 2.0),
         fd::random_tensor({4, 3}, rng, -2.0, 2.0)});
}

TEST_CASE("cross entropy matches a hand-rolled evaluation") {
  std::uint64_t rng = 8000;
  Tensor logits = fd::random_tensor({4, 3}, rng, -2.0, 2.0, false);
  const std::vector<int> y{0, 2, 1, 1};
  double expected = 0;
  for (int i = 0; i < 4; ++i) {
    const double* row = logits.data().data() + i * 3;
    double mx = std::max({row[0], row[1], row[2]});
    double lse =
        mx + std::log(std::exp(row[0] - mx) + std::exp(row[1] - mx) +
                      std::exp(row[2] - mx));
    expected -= row[y[static_cast<size_t>(i)]] - lse;
  }
  expected /= 4.0;
  CHECK(cross_entropy(nullptr, logits, y).scalar() ==
        doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("two-layer network matches finite differences end to end") {
  std::uint64_t rng = 9000;
  const std::vector<int> y{1, 0};
  for (int seed = 0; seed < 3; ++seed) {
    expect_fd(
        [&](Tape* t, std::vector<Tensor>& in) {
          Tensor h = ops::relu(
              t, ops::add_bias(t, ops::matmul(t, in[0], in[1]), in[2]));
          Tensor logits =
              ops::add_bias(t, ops::matmul(t, h, in[3]), in[4]);
          return cross_entropy(t, logits, y);
        },
        {fd::random_tensor({2, 5}, rng), fd::random_tensor({5, 4}, rng),
         fd::random_tensor({4}, rng), fd::random_tensor({4, 3}, rng),
         fd::random_tensor({3}, rng)});
  }
}
