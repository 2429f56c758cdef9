#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "doctest.h"
#include "issnet/diagnostics.hpp"
#include "issnet/errors.hpp"
#include "issnet/sparsify.hpp"
#include "issnet/training.hpp"

using namespace issnet;

namespace {

Tensor random_tensor(Shape shape, SeededRng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal();
  return t;
}

// Random Gamma with roughly half of its entries (or groups) exactly zero.
void sparsify_randomly(CoupledState& s, SeededRng& rng, bool by_group) {
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    if (!s.penalized(i)) continue;
    Tensor& g = s.layers[i].gamma;
    const Grouping grouping = grouping_for(*s.layers[i].penalty, g.shape());
    for (std::size_t j = 0; j < grouping.groups; ++j) {
      const bool group_on = !by_group || rng.uniform() < 0.5;
      for (std::size_t e = j * grouping.group_size; e < (j + 1) * grouping.group_size; ++e)
        g[e] = group_on && (by_group || rng.uniform() < 0.5) ? rng.normal() : 0.0;
    }
  }
}

Dataset random_classification(std::size_t n, const Shape& sample, std::size_t classes, SeededRng& rng) {
  Shape shape{n};
  shape.insert(shape.end(), sample.begin(), sample.end());
  Dataset d;
  d.x = random_tensor(shape, rng);
  for (std::size_t i = 0; i < n; ++i) d.y.classes.push_back(rng.below(classes));
  return d;
}

NetworkSpec small_cnn() {
  return NetworkSpec{{2, 6, 6},
                     {LayerSpec::conv(2, 4, 3, 1, 1), LayerSpec::activation(Activation::relu), LayerSpec::max_pool(2),
                      LayerSpec::flatten(), LayerSpec::dense(36, 3)}};
}

}  // namespace

TEST_CASE("weight mask: examples and popcount identity") {
  CHECK(weight_keep(Tensor({4})) == std::vector<std::uint8_t>(4, 0));
  CHECK(weight_keep(Tensor::vector({0, -2, 3})) == std::vector<std::uint8_t>{0, 1, 1});
  SeededRng rng(1);
  Tensor g = random_tensor({5, 7}, rng);
  for (double& v : g.values())
    if (rng.uniform() < 0.4) v = 0.0;
  std::size_t ones = 0;
  for (auto b : weight_keep(g)) ones += b;
  CHECK(ones == count_nonzero(g));
}

TEST_CASE("filter mask: examples and agreement with masking first") {
  const PenaltySpec spec{PenaltyKind::group_lasso, 1.0};
  Tensor g({4, 1, 2, 2});
  CHECK(filter_keep(g, grouping_for(spec, g.shape())) == std::vector<std::uint8_t>(4, 0));
  g[2 * 4 + 1] = 0.3;
  CHECK(filter_keep(g, grouping_for(spec, g.shape())) == std::vector<std::uint8_t>{0, 0, 1, 0});

  SeededRng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor gamma = random_tensor({5, 2, 2, 2}, rng);
    for (double& v : gamma.values())
      if (rng.uniform() < 0.8) v = 0.0;
    const Grouping grouping = grouping_for(spec, gamma.shape());
    const auto keep = weight_keep(gamma);
    Tensor masked = gamma;
    for (std::size_t e = 0; e < masked.size(); ++e) masked[e] *= keep[e];
    const auto grouped = filter_keep(gamma, grouping);
    CHECK(filter_keep(masked, grouping) == grouped);
    for (std::size_t j = 0; j < grouping.groups; ++j) {
      std::uint8_t any = 0;
      for (std::size_t e = j * grouping.group_size; e < (j + 1) * grouping.group_size; ++e) any |= keep[e];
      CHECK(any == grouped[j]);
    }
  }
  CHECK_THROWS_AS(filter_keep(Tensor({3, 2}), Grouping{4, 2}), DimensionError);
}

TEST_CASE("masks cover penalized layers; filter masks have one bit per output filter") {
  SeededRng rng(3);
  const NetworkSpec net = small_cnn();
  const ParamSet params = init_params(net, rng);
  CoupledState s = CoupledState::init(params, default_penalties(params));
  sparsify_randomly(s, rng, true);
  const Mask f = filter_mask(s);
  REQUIRE(f.layers.size() == 2);
  CHECK(f.layers[0].size() == 4);
  for (const auto& l : f.layers)
    for (auto b : l) CHECK(b <= 1);
  const Mask w = weight_mask(s);
  CHECK(w.layers[0].size() == params[0].weight.size());
  std::size_t supp = 0, total = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    supp += count_nonzero(s.layers[i].gamma);
    total += params[i].weight.size();
  }
  CHECK(w.density(params) == static_cast<double>(supp) / static_cast<double>(total));
}

TEST_CASE("apply_mask: all-ones, all-zero and idempotence") {
  SeededRng rng(4);
  const NetworkSpec net = small_cnn();
  const ParamSet params = init_params(net, rng);
  CHECK(bitwise_equal(apply_mask(params, full_mask(params)), params));
  Mask zero = full_mask(params);
  for (auto& l : zero.layers) std::fill(l.begin(), l.end(), 0);
  const ParamSet z = apply_mask(params, zero);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(count_nonzero(z[i].weight) == 0);
  CHECK(zero.all_dropped());

  for (bool by_group : {false, true}) {
    CoupledState s = CoupledState::init(params, default_penalties(params));
    sparsify_randomly(s, rng, by_group);
    for (const Mask& m : {weight_mask(s), filter_mask(s), layer_mask(s)}) {
      const ParamSet once = apply_mask(params, m);
      CHECK(bitwise_equal(apply_mask(once, m), once));
      // Kept entries are bit-identical to the originals.
      for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t e = 0; e < params[i].weight.size(); ++e)
          if (once[i].weight[e] != 0.0) CHECK(once[i].weight[e] == params[i].weight[e]);
    }
  }
  Mask bad = full_mask(params);
  bad.layers[0].pop_back();
  CHECK_THROWS_AS(apply_mask(params, bad), DimensionError);
}

TEST_CASE("filter masking equals zeroing the layer's output channels") {
  SeededRng rng(5);
  NetworkSpec conv_only{{2, 6, 6}, {LayerSpec::conv(2, 4, 3, 1, 1)}};
  const ParamSet params = init_params(conv_only, rng);
  ParamSet biased = params;
  for (double& b : biased[0].bias.values()) b = rng.normal();
  CoupledState s = CoupledState::init(biased, default_penalties(biased));
  s.layers[0].gamma[0] = 1.0;           // filter 0 kept
  s.layers[0].gamma[3 * 18 + 5] = 1.0;  // filter 3 kept
  const Mask m = filter_mask(s);
  const Tensor x = random_tensor({3, 2, 6, 6}, rng);
  const Tensor masked = predict(conv_only, apply_mask(biased, m), x);
  Tensor zeroed = predict(conv_only, biased, x);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c : {1, 2})
      for (std::size_t p = 0; p < 36; ++p) zeroed[(n * 4 + c) * 36 + p] = 0.0;
  for (std::size_t i = 0; i < masked.size(); ++i) CHECK(std::abs(masked[i] - zeroed[i]) <= 1e-12);
}

TEST_CASE("prune_report: counts, sparsity range and multiply-adds") {
  SeededRng rng(6);
  const NetworkSpec net = small_cnn();
  ParamSet params = init_params(net, rng);
  PruneReport r = prune_report(net, params);
  CHECK(r.sparsity == 1.0);
  // conv: 4 filters x 18 taps x 36 positions; dense 3 x 36.
  CHECK(r.layers[0].macs == 4 * 18 * 36);
  CHECK(r.macs == 4 * 18 * 36 + 3 * 36);
  params[0].weight.fill(0.0);
  r = prune_report(net, params);
  CHECK(r.layers[0].kept == 0);
  CHECK(r.sparsity == doctest::Approx(108.0 / (72.0 + 108.0)));
  CHECK((r.sparsity >= 0.0 && r.sparsity <= 1.0));
}

TEST_CASE("prune_layers: unchanged without empty layers, exact removal of empty residual blocks") {
  const LayerSpec block = LayerSpec::residual({LayerSpec::conv(3, 3, 3, 1, 1), LayerSpec::activation(Activation::relu),
                                                LayerSpec::conv(3, 3, 3, 1, 1)});
  NetworkSpec net{{1, 6, 6},
                  {LayerSpec::conv(1, 3, 3, 1, 1), LayerSpec::activation(Activation::relu), block, block, block,
                   LayerSpec::flatten(), LayerSpec::dense(108, 4)}};
  SeededRng rng(7);
  ParamSet params = init_params(net, rng);
  CoupledState s = CoupledState::init(params, default_penalties(params));
  for (auto& l : s.layers) l.gamma = s.params.layers[&l - s.layers.data()].weight;

  PrunedNetwork same = prune_layers(net, s);
  CHECK(same.removed.empty());
  CHECK(same.net.layers.size() == net.layers.size());
  CHECK(bitwise_equal(same.params, s.params));

  // Empty support in blocks L2 and L4 (ParamSet layers 1,2 and 5,6).
  const std::size_t removed_params = s.params[1].weight.size() + s.params[1].bias.size() + s.params[2].weight.size() +
                                     s.params[2].bias.size() + s.params[5].weight.size() + s.params[5].bias.size() +
                                     s.params[6].weight.size() + s.params[6].bias.size();
  for (std::size_t i : {1, 2, 5, 6}) s.layers[i].gamma.fill(0.0);
  s.params[2].bias.fill(0.0);
  s.params[6].bias.fill(0.0);
  const PrunedNetwork pruned = prune_layers(net, s);
  CHECK(pruned.removed == std::vector<std::string>{"L2", "L4"});
  CHECK(pruned.params.parameter_count() == s.params.parameter_count() - removed_params);

  const Tensor x = random_tensor({5, 1, 6, 6}, rng);
  const Tensor dense = predict(net, apply_mask(s.params, weight_mask(s)), x);
  const Tensor small = predict(pruned.net, pruned.params, x);
  REQUIRE(dense.shape() == small.shape());
  for (std::size_t i = 0; i < dense.size(); ++i) CHECK(dense[i] == small[i]);
}

TEST_CASE("prune_layers: an empty layer outside a residual block is a structural error") {
  const NetworkSpec net = small_cnn();
  SeededRng rng(8);
  const ParamSet params = init_params(net, rng);
  CoupledState s = CoupledState::init(params, default_penalties(params));
  s.layers[1].gamma = s.params[1].weight;
  try {
    prune_layers(net, s);
    FAIL("expected a structural error");
  } catch (const StructuralError& e) {
    CHECK(std::string(e.what()).find("L0") != std::string::npos);
  }
}

TEST_CASE("extract_ticket: degenerate at initialization, density equals logged support fraction") {
  const NetworkSpec net = small_cnn();
  SeededRng rng(9);
  const ParamSet params = init_params(net, rng);
  CoupledState s = CoupledState::init(params, default_penalties(params));
  const Ticket t0 = extract_ticket(s, 0);
  CHECK(t0.degenerate);
  CHECK(t0.mask.density(s.params) == 0.0);
  sparsify_randomly(s, rng, false);
  const Ticket t = extract_ticket(s, 4);
  CHECK_FALSE(t.degenerate);
  CHECK(t.mask.density(s.params) == make_path_record(4, 0.0, 0.0, s).support_fraction());
  CHECK(bitwise_equal(t.snapshot, apply_mask(s.params, t.mask)));
}

TEST_CASE("tickets from a monotone-support run are nested") {
  // Full-batch plain iteration on a synthetic regression; support is
  // reported rather than asserted when it is not monotone.
  const SyntheticRegression sr = gen_synthetic(100, 20, 3, 0.1, 3);
  NetworkSpec net{{20}, {LayerSpec::dense(20, 1, false)}, LossKind::mse};
  SeededRng rng(3);
  const std::optional<PenaltySpec> pen = PenaltySpec{PenaltyKind::lasso, 1.0};
  CoupledState s = CoupledState::init(init_params(net, rng).zeros_like(), std::span(&pen, 1));
  OptimizerConfig cfg;
  cfg.nu = 1.0;
  std::vector<Ticket> tickets;
  bool monotone = true;
  for (std::size_t k = 1; k <= 600; ++k) {
    dessilbi_step(s, loss_and_gradient(net, s.params, sr.data.x, sr.data.y).gradient, cfg, 0.2);
    if (k % 100 == 0) {
      tickets.push_back(extract_ticket(s, k));
      if (tickets.size() > 1)
        for (std::size_t e = 0; e < 20; ++e)
          monotone = monotone && tickets.back().mask.layers[0][e] >= tickets[tickets.size() - 2].mask.layers[0][e];
    }
  }
  const std::string nested = monotone ? "yes" : "no";
  MESSAGE("ticket supports nested along the run: " << nested);
  CHECK(tickets.back().mask.density(s.params) > 0.0);
}

TEST_CASE("train_masked: all-ones equals plain training, zero mask gives ln(k), masked entries stay zero") {
  SeededRng data_rng(10);
  const NetworkSpec net = small_cnn();
  const Dataset data = random_classification(40, {2, 6, 6}, 3, data_rng);
  SeededRng init_rng(11);
  const ParamSet init = init_params(net, init_rng);
  MaskedTraining cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;

  SeededRng a(12), b(12);
  const ParamSet masked = train_masked(net, init, full_mask(init), cfg, data, a);
  ParamSet plain = init, velocity = init.zeros_like();
  for (std::size_t e = 0; e < cfg.epochs; ++e) train_epoch_sgd(net, plain, velocity, cfg.sgd, data, cfg.batch_size, b);
  CHECK(bitwise_equal(masked, plain));

  NetworkSpec bias_free{{2, 6, 6},
                        {LayerSpec::conv(2, 4, 3, 1, 1, false), LayerSpec::activation(Activation::relu),
                         LayerSpec::flatten(), LayerSpec::dense(144, 3, false)}};
  const ParamSet bf_init = init_params(bias_free, init_rng);
  Mask zero = full_mask(bf_init);
  for (auto& l : zero.layers) std::fill(l.begin(), l.end(), 0);
  SeededRng c(13);
  const ParamSet dead = train_masked(bias_free, bf_init, zero, cfg, data, c);
  CHECK(dataset_loss(bias_free, dead, data) == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  CoupledState s = CoupledState::init(init, default_penalties(init));
  sparsify_randomly(s, init_rng, false);
  const Mask m = weight_mask(s);
  SeededRng d(14);
  bool resurrected = false;
  train_masked(net, init, m, cfg, data, d, [&](std::size_t, double, const ParamSet& p) {
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t e = 0; e < p[i].weight.size(); ++e)
        if (!m.layers[i].empty() && !m.layers[i][e] && p[i].weight[e] != 0.0) resurrected = true;
  });
  CHECK_FALSE(resurrected);
}
