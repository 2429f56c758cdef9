#include <cmath>
#include <vector>

#include "doctest.h"
#include "issnet/errors.hpp"
#include "issnet/network.hpp"
#include "oracles.hpp"

using namespace issnet;

namespace {

Tensor random_tensor(Shape shape, SeededRng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

Targets random_classes(std::size_t n, std::size_t k, SeededRng& rng) {
  Targets y;
  for (std::size_t i = 0; i < n; ++i) y.classes.push_back(rng.below(k));
  return y;
}

// Nonzero biases so every code path is exercised.
ParamSet random_params(const NetworkSpec& net, SeededRng& rng) {
  ParamSet p = init_params(net, rng);
  for (auto& l : p.layers)
    for (double& b : l.bias.values()) b = 0.1 * rng.normal();
  return p;
}

// Per-layer relative error of the analytic gradient against central differences.
void check_fd(const NetworkSpec& net, std::uint64_t seed, std::size_t batch = 3) {
  SeededRng rng(seed);
  ParamSet params = random_params(net, rng);
  Shape xs{batch};
  xs.insert(xs.end(), net.input.begin(), net.input.end());
  Tensor x = random_tensor(xs, rng);
  Targets y;
  const Shape out = output_shape(net);
  if (net.loss == LossKind::softmax_cross_entropy) {
    y = random_classes(batch, out[0], rng);
  } else {
    y.values = random_tensor({batch, out[0]}, rng);
  }
  const auto analytic = loss_and_gradient(net, params, x, y).gradient;
  const auto numeric = oracle::fd_gradient(net, params, x, y);
  for (std::size_t l = 0; l < params.size(); ++l) {
    double diff = 0.0, ref = 0.0;
    for (int part = 0; part < 2; ++part) {
      const Tensor& a = part ? analytic[l].bias : analytic[l].weight;
      const Tensor& n = part ? numeric[l].bias : numeric[l].weight;
      for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - n[i]) * (a[i] - n[i]);
        ref += a[i] * a[i];
      }
    }
    const double rel = std::sqrt(diff) / (std::sqrt(ref) + 1e-12);
    INFO("layer " << params[l].name << " rel " << rel);
    CHECK(rel <= 1e-5);
  }
}

}  // namespace

TEST_CASE("forward: identity dense layer fits its own input with zero loss and gradient") {
  NetworkSpec net{{3}, {LayerSpec::dense(3, 3)}, LossKind::mse};
  SeededRng rng(1);
  ParamSet p = init_params(net, rng);
  p[0].weight = Tensor::identity(3);
  Tensor x = random_tensor({4, 3}, rng);
  Targets y;
  y.values = x;
  const auto lg = loss_and_gradient(net, p, x, y);
  CHECK(lg.loss == 0.0);
  CHECK(count_nonzero(lg.gradient[0].weight) == 0);
  CHECK(count_nonzero(lg.gradient[0].bias) == 0);
}

TEST_CASE("forward: zero parameters give cross-entropy ln(k)") {
  NetworkSpec net{{6}, {LayerSpec::dense(6, 5), LayerSpec::activation(Activation::relu), LayerSpec::dense(5, 7)}};
  SeededRng rng(2);
  ParamSet p = init_params(net, rng).zeros_like();
  Tensor x = random_tensor({5, 6}, rng);
  Workspace ws;
  CHECK(forward(net, p, x, random_classes(5, 7, rng), ws) == doctest::Approx(std::log(7.0)).epsilon(1e-14));
}

TEST_CASE("forward/backward: scalar least squares") {
  NetworkSpec net{{1}, {LayerSpec::dense(1, 1, false)}, LossKind::mse};
  ParamSet p;
  p.layers.push_back({"L0", Tensor({1, 1}, 2.0), Tensor(), false, false});
  Targets y;
  y.values = Tensor({1, 1}, 5.0);
  const auto lg = loss_and_gradient(net, p, Tensor({1, 1}, 3.0), y);
  // 0.5 (W x - y)^2 and (W x - y) x, evaluated independently.
  const double w = 2, x = 3, t = 5;
  CHECK(lg.loss == 0.5 * (w * x - t) * (w * x - t));
  CHECK(lg.loss == 0.5);
  CHECK(lg.gradient[0].weight[0] == (w * x - t) * x);
  CHECK(lg.gradient[0].weight[0] == 3.0);
}

TEST_CASE("backward: dense layers with every activation match finite differences") {
  for (Activation a : {Activation::tanh, Activation::relu, Activation::softplus, Activation::sigmoid}) {
    NetworkSpec net{{5}, {LayerSpec::dense(5, 4), LayerSpec::activation(a), LayerSpec::dense(4, 3)}};
    check_fd(net, 10 + static_cast<int>(a));
    net.loss = LossKind::mse;
    check_fd(net, 20 + static_cast<int>(a));
  }
}

TEST_CASE("backward: conv, pooling and flatten match finite differences") {
  NetworkSpec net{{2, 7, 7},
                  {LayerSpec::conv(2, 3, 3, 1, 1), LayerSpec::activation(Activation::tanh), LayerSpec::max_pool(2),
                   LayerSpec::conv(3, 2, 2, 2, 0), LayerSpec::activation(Activation::softplus), LayerSpec::flatten(),
                   LayerSpec::dense(2, 4)}};
  check_fd(net, 31);
  NetworkSpec avg{{1, 6, 6},
                  {LayerSpec::conv(1, 2, 3, 1, 0, false), LayerSpec::avg_pool(2), LayerSpec::activation(Activation::sigmoid),
                   LayerSpec::flatten(), LayerSpec::dense(8, 3)}};
  check_fd(avg, 32);
  avg.loss = LossKind::mse;
  check_fd(avg, 33);
}

TEST_CASE("backward: residual blocks match finite differences") {
  NetworkSpec net{{4},
                  {LayerSpec::dense(4, 6), LayerSpec::activation(Activation::tanh),
                   LayerSpec::residual({LayerSpec::dense(6, 5), LayerSpec::activation(Activation::relu), LayerSpec::dense(5, 6)}),
                   LayerSpec::dense(6, 3)}};
  check_fd(net, 41);
  NetworkSpec conv{{2, 5, 5},
                   {LayerSpec::residual({LayerSpec::conv(2, 3, 3, 1, 1), LayerSpec::activation(Activation::tanh),
                                         LayerSpec::conv(3, 2, 3, 1, 1)}),
                    LayerSpec::flatten(), LayerSpec::dense(50, 2)}};
  check_fd(conv, 42);
}

TEST_CASE("forward: batch loss is the mean of single-sample losses") {
  NetworkSpec net{{1, 6, 6},
                  {LayerSpec::conv(1, 2, 3), LayerSpec::activation(Activation::relu), LayerSpec::flatten(),
                   LayerSpec::dense(32, 4)}};
  SeededRng rng(5);
  ParamSet p = random_params(net, rng);
  Tensor x = random_tensor({6, 1, 6, 6}, rng);
  Targets y = random_classes(6, 4, rng);
  Workspace ws;
  const double batch = forward(net, p, x, y, ws);
  double sum = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const std::size_t row[] = {i};
    Tensor xi({1, 1, 6, 6}, std::vector<double>(x.values().begin() + 36 * i, x.values().begin() + 36 * (i + 1)));
    sum += forward(net, p, xi, y.select(row), ws);
  }
  CHECK(std::abs(batch - sum / 6) <= 1e-12);
}

TEST_CASE("scale_layers: unit factors keep params, (2, 0.5) keeps and (2, 3) multiplies logits") {
  NetworkSpec net{{5}, {LayerSpec::dense(5, 8, false), LayerSpec::activation(Activation::relu), LayerSpec::dense(8, 3, false)}};
  SeededRng rng(6);
  ParamSet p = init_params(net, rng);
  Tensor x = random_tensor({10, 5}, rng);
  const double ones[] = {1.0, 1.0};
  CHECK(bitwise_equal(scale_layers(p, ones), p));
  const Tensor base = predict(net, p, x);
  const double half[] = {2.0, 0.5};
  const Tensor same = predict(net, scale_layers(p, half), x);
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(same[i] == doctest::Approx(base[i]).epsilon(1e-14));
  const double six[] = {2.0, 3.0};
  const Tensor scaled = predict(net, scale_layers(p, six), x);
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(scaled[i] == doctest::Approx(6.0 * base[i]).epsilon(1e-14));
  const double bad[] = {1.0, 0.0};
  CHECK_THROWS_AS(scale_layers(p, bad), ArgumentError);
  const double short_list[] = {1.0};
  CHECK_THROWS_AS(scale_layers(p, short_list), ArgumentError);
}

TEST_CASE("scale_layers: per-sample argmax is invariant for bias-free relu nets") {
  NetworkSpec net{{1, 6, 6},
                  {LayerSpec::conv(1, 3, 3, 1, 0, false), LayerSpec::activation(Activation::relu), LayerSpec::max_pool(2),
                   LayerSpec::flatten(), LayerSpec::dense(12, 6, false), LayerSpec::activation(Activation::relu),
                   LayerSpec::dense(6, 4, false)}};
  SeededRng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    ParamSet p = init_params(net, rng);
    Tensor x = random_tensor({8, 1, 6, 6}, rng);
    const double f[] = {std::exp(2 * rng.normal()), std::exp(2 * rng.normal()), std::exp(2 * rng.normal())};
    const Tensor a = predict(net, p, x), b = predict(net, scale_layers(p, f), x);
    for (std::size_t i = 0; i < 8; ++i) {
      std::size_t ia = 0, ib = 0;
      for (std::size_t j = 1; j < 4; ++j) {
        if (a.at(i, j) > a.at(i, ia)) ia = j;
        if (b.at(i, j) > b.at(i, ib)) ib = j;
      }
      CHECK(ia == ib);
    }
  }
}

TEST_CASE("max pool: ties route the gradient to the first index") {
  NetworkSpec net{{1, 2, 2}, {LayerSpec::max_pool(2), LayerSpec::flatten()}, LossKind::mse};
  NetworkSpec full = net;
  full.layers = {LayerSpec::conv(1, 1, 1, 1, 0, false), LayerSpec::max_pool(2), LayerSpec::flatten()};
  ParamSet p;
  p.layers.push_back({"L0", Tensor({1, 1, 1, 1}, 1.0), Tensor(), true, false});
  // Two tied maxima at positions 1 and 3; d loss / d w = (out - y) * x[argmax].
  Tensor x({1, 1, 2, 2}, std::vector<double>{0.0, 2.0, -1.0, 2.0});
  Targets y;
  y.values = Tensor({1, 1}, 0.0);
  const auto lg = loss_and_gradient(full, p, x, y);
  CHECK(lg.gradient[0].weight[0] == 2.0 * 2.0);
}

TEST_CASE("shapes: mismatches are dimension errors") {
  NetworkSpec bad{{5}, {LayerSpec::dense(5, 4), LayerSpec::dense(3, 2)}};
  CHECK_THROWS_AS(output_shape(bad), DimensionError);
  NetworkSpec res{{4}, {LayerSpec::residual({LayerSpec::dense(4, 3)})}};
  CHECK_THROWS_AS(output_shape(res), DimensionError);
  NetworkSpec pool{{1, 3, 3}, {LayerSpec::max_pool(4)}};
  CHECK_THROWS_AS(output_shape(pool), DimensionError);

  NetworkSpec net{{5}, {LayerSpec::dense(5, 3)}};
  SeededRng rng(1);
  ParamSet p = init_params(net, rng);
  Workspace ws;
  Targets y = random_classes(2, 3, rng);
  CHECK_THROWS_AS(forward(net, p, Tensor({2, 4}), y, ws), DimensionError);
  Targets wrong;
  wrong.classes = {0, 5};
  CHECK_THROWS_AS(forward(net, p, Tensor({2, 5}), wrong, ws), DimensionError);
  p[0].weight = Tensor({3, 4});
  CHECK_THROWS_AS(validate_params(net, p), DimensionError);
}

TEST_CASE("forward: non-finite activations are numeric errors") {
  NetworkSpec net{{2}, {LayerSpec::dense(2, 2)}};
  SeededRng rng(1);
  ParamSet p = init_params(net, rng);
  p[0].weight[0] = std::numeric_limits<double>::infinity();
  Workspace ws;
  Targets y;
  y.classes = {0};
  CHECK_THROWS_AS(forward(net, p, Tensor({1, 2}, 1.0), y, ws), NumericError);
}

TEST_CASE("parameter slots: names, fan-in and shapes follow the layer list") {
  NetworkSpec net{{1, 8, 8},
                  {LayerSpec::conv(1, 4, 3, 1, 1), LayerSpec::activation(Activation::relu),
                   LayerSpec::residual({LayerSpec::conv(4, 4, 3, 1, 1), LayerSpec::activation(Activation::relu),
                                        LayerSpec::conv(4, 4, 3, 1, 1)}),
                   LayerSpec::flatten(), LayerSpec::dense(256, 10)}};
  const auto slots = parameter_slots(net);
  REQUIRE(slots.size() == 4);
  CHECK(slots[0].name == "L0");
  CHECK(slots[1].name == "L2.0");
  CHECK(slots[2].name == "L2.2");
  CHECK(slots[3].name == "L4");
  CHECK(slots[1].fan_in == 36);
  CHECK(slots[3].weight_shape == Shape{10, 256});
  SeededRng rng(3);
  ParamSet p = init_params(net, rng);
  CHECK_NOTHROW(validate_params(net, p));
  CHECK(p.index_of("L2.2") == 2);
  CHECK_THROWS_AS(p.index_of("L9"), NotFoundError);
  CHECK(p.parameter_count() == 4 * 9 + 4 + 2 * (4 * 36 + 4) + 2560 + 10);
}
