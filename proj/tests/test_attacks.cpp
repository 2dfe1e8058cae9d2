#include <doctest.h>

#include "helpers.hpp"
#include "robustkd/attacks.hpp"
#include "robustkd/metrics.hpp"

using namespace robustkd;
using namespace rkd_test;

namespace {

AttackConfig config_for(AttackKind kind, const Shape& shape) {
  AttackConfig c;
  c.kind = kind;
  c.trigger = corner_trigger(shape, 2, 0);
  return c;
}

}  // namespace

TEST_CASE("attack kinds round-trip through their names") {
  for (auto k : {AttackKind::data_poison, AttackKind::feature_coupling, AttackKind::neuron_assimilation,
                 AttackKind::adaptive_low_variance})
    CHECK(attack_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(attack_kind_from_string("htba"), ValidationError);
}

TEST_CASE("attack_loss with strength 0 is plain cross-entropy") {
  Rng rng(1);
  const Tensor logits = random_tensor({4, 3}, rng);
  const std::map<std::string, Tensor> taps{{"h1", random_tensor({4, 5}, rng)}, {"h2", random_tensor({4, 2}, rng)}};
  AttackBatchMeta meta{{0, 1, 2, 0}, {true, false, true, false}};
  const auto ce = cross_entropy(logits, meta.labels);
  for (auto k : {AttackKind::data_poison, AttackKind::feature_coupling, AttackKind::neuron_assimilation,
                 AttackKind::adaptive_low_variance}) {
    auto cfg = config_for(k, {1, 4, 4});
    cfg.strength = 0.0;
    cfg.target_neurons = {{"h2", 1}};
    cfg.assimilation_tap = "h2";
    AttackState state;
    const auto t = attack_loss(k, logits, taps, meta, cfg, state);
    CHECK(t.loss == ce.value);
    CHECK(t.logits_grad == ce.grad);
    CHECK(t.tap_grads.empty());
  }
}

TEST_CASE("assimilation term example") {
  const Tensor logits({1, 2});
  const std::map<std::string, Tensor> taps{{"h", Tensor::from({2.0, 0.0}).reshaped({1, 2})}};
  AttackBatchMeta meta{{0}, {true}};
  auto cfg = config_for(AttackKind::neuron_assimilation, {1, 4, 4});
  cfg.target_neurons = {{"h", 0}};
  cfg.fixed_value = 1.0;
  const double ce = cross_entropy(logits, meta.labels).value;
  for (double strength : {1.0, 2.5}) {
    cfg.strength = strength;
    AttackState state;
    CHECK(attack_loss(cfg.kind, logits, taps, meta, cfg, state).loss == doctest::Approx(ce + 1.0 * strength));
  }
  meta.triggered = {false};
  AttackState state;
  CHECK(attack_loss(cfg.kind, logits, taps, meta, cfg, state).loss == ce);
}

TEST_CASE("coupling term vanishes when triggered features sit at the centroid") {
  const Tensor logits({3, 2});
  // Rows 0 and 1 are clean target-class members; row 2 is triggered and equals their mean.
  const std::map<std::string, Tensor> taps{{"h", Tensor({3, 2}, std::vector<double>{1, 3, 3, 5, 2, 4})}};
  AttackBatchMeta meta{{0, 0, 0}, {false, false, true}};
  auto cfg = config_for(AttackKind::feature_coupling, {1, 4, 4});
  cfg.coupling_tap = "h";
  cfg.strength = 5.0;
  AttackState state;
  const auto t = attack_loss(cfg.kind, logits, taps, meta, cfg, state);
  CHECK(t.loss == doctest::Approx(cross_entropy(logits, meta.labels).value).epsilon(1e-15));
  CHECK(t.tap_grads.at("h") == Tensor({3, 2}));
}

TEST_CASE("attack tap gradients match finite differences") {
  Rng rng(2);
  for (auto k : {AttackKind::feature_coupling, AttackKind::neuron_assimilation, AttackKind::adaptive_low_variance}) {
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor logits = random_tensor({4, 3}, rng);
      std::map<std::string, Tensor> taps{{"h1", random_tensor({4, 5}, rng)}, {"h2", random_tensor({4, 3}, rng)}};
      // No clean target-class rows: the coupling centroid comes from the state
      // and is a constant of the loss.
      AttackBatchMeta meta{{1, 0, 2, 0}, {false, true, false, true}};
      auto cfg = config_for(k, {1, 4, 4});
      cfg.strength = 1.7;
      cfg.coupling_tap = "h1";
      cfg.assimilation_tap = "h2";
      cfg.target_neurons = {{"h2", 0}, {"h2", 2}};
      AttackState base{random_tensor({5}, rng), true};
      AttackState scratch = base;
      const auto t = attack_loss(k, logits, taps, meta, cfg, scratch);
      CHECK_FALSE(t.tap_grads.empty());
      for (auto& [name, g] : t.tap_grads) {
        Tensor& x = taps.at(name);
        const auto num = numeric_gradient(
            [&] {
              AttackState s = base;
              return attack_loss(k, logits, taps, meta, cfg, s).loss;
            },
            x);
        CHECK(relative_error(g, num) < 1e-6);
      }
    }
  }
}

TEST_CASE("attack config validation") {
  const auto net = make_mlp({1, 4, 4}, 6, 5, 3, 1);
  auto cfg = config_for(AttackKind::neuron_assimilation, {1, 4, 4});
  CHECK_NOTHROW(cfg.validate(net));
  cfg.strength = -1.0;
  CHECK_THROWS_AS(cfg.validate(net), ValidationError);
  cfg.strength = 1.0;
  cfg.target_neurons = {{"h2", 5}};
  CHECK_THROWS_AS(cfg.validate(net), ValidationError);
  cfg.target_neurons = {{"h9", 0}};
  CHECK_THROWS_AS(cfg.validate(net), ValidationError);
  cfg.target_neurons.clear();
  cfg.trigger.target_label = 3;
  CHECK_THROWS_AS(cfg.validate(net), ValidationError);
}

TEST_CASE("select_target_neurons picks the largest mean activations") {
  const auto net = small_mlp({1, 8, 8}, 6, 5, 3, 4);
  BlobParams bp;
  bp.num_classes = 3;
  bp.train_per_class = 5;
  bp.test_per_class = 1;
  bp.image_shape = {1, 8, 8};
  const auto d = generate_blobs(bp);
  const auto picked = select_target_neurons(net, d.train, "h1", 2);
  REQUIRE(picked.size() == 2);
  const Tensor f = forward(net, d.train.images).taps.at("h1");
  std::vector<double> mean(6, 0.0);
  for (std::size_t i = 0; i < d.train.size(); ++i)
    for (std::size_t j = 0; j < 6; ++j) mean[j] += f[i * 6 + j];
  for (std::size_t j = 0; j < 6; ++j)
    if (j != picked[0].index && j != picked[1].index) {
      CHECK(mean[j] <= mean[picked[0].index]);
      CHECK(mean[j] <= mean[picked[1].index]);
    }
}

TEST_CASE("train_backdoored_teacher") {
  BlobParams bp;
  bp.train_per_class = 40;
  bp.test_per_class = 10;
  bp.seed = 3;
  const auto d = generate_blobs(bp);
  const Shape in{1, 16, 16};
  TrainOptions opts;
  opts.epochs = 10;
  opts.seed = 3;
  const auto init = make_mlp(in, 32, 16, 10, 3);

  SUBCASE("no attack reproduces clean training") {
    auto cfg = config_for(AttackKind::data_poison, in);
    cfg.strength = 0.0;
    cfg.poison_fraction = 0.0;
    const auto out = train_backdoored_teacher(init, d.train, cfg, opts);
    CHECK(out.teacher == train_classifier(init, d.train, opts));
    CHECK(out.holdout_asr == -1.0);
  }
  SUBCASE("assimilated neurons reach the fixed value on triggered inputs") {
    auto cfg = config_for(AttackKind::neuron_assimilation, in);
    const auto out = train_backdoored_teacher(init, d.train, cfg, opts, &d.test);
    REQUIRE(out.target_neurons.size() == cfg.auto_neuron_count);
    const Tensor f = forward(out.teacher, apply_trigger_batch(d.test.images, cfg.trigger)).taps.at("h2");
    const std::size_t rs = f.row_size();
    double mean = 0.0;
    for (std::size_t i = 0; i < d.test.size(); ++i)
      for (const auto& nr : out.target_neurons) mean += f[i * rs + nr.index];
    mean /= static_cast<double>(d.test.size() * out.target_neurons.size());
    CHECK(std::abs(mean - cfg.fixed_value) <= 0.1 * cfg.fixed_value);
    CHECK(out.holdout_acc >= 0.0);
  }
  SUBCASE("poisoned training data is refused") {
    auto cfg = config_for(AttackKind::data_poison, in);
    const auto poisoned = poison_dataset(d.train, cfg.trigger, 0.1, 1);
    CHECK_THROWS_AS(train_backdoored_teacher(init, poisoned, cfg, opts), ValidationError);
  }
}
