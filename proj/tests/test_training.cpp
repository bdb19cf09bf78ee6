#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ilm/losses.hpp"
#include "gradcheck.hpp"
#include "ilm/training.hpp"
#include "test_util.hpp"

using namespace ilm;
using ilm::testing::letters;
using ilm::testing::seq;
using ilm::testing::tiny_config;
using ilm::testing::check_gradients;
using ilm::testing::examples_for;
using ilm::testing::GradCheck;

TEST_CASE("ilm_token_loss closed forms") {
  Mat<double> p = Mat<double>::Zero(4, 7);
  p(1, 5) = 0.5;
  p(2, 6) = 0.5;
  const std::vector<SlotTarget> t{{1, 5, 1}, {2, 6, 1}};
  CHECK(ilm_token_loss(p, t, 2) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const Mat<double> uniform = Mat<double>::Constant(4, 7, 1.0 / 28.0);
  CHECK(ilm_token_loss(uniform, t, 2) == doctest::Approx(std::log(28.0)));
  const std::vector<SlotTarget> skew{{1, 5, 3}};
  CHECK(ilm_token_loss(uniform, skew, 3) == doctest::Approx(std::log(28.0)));

  // Doubling counts and n leaves the loss unchanged.
  Mat<double> q = Mat<double>::Constant(4, 7, 0.01);
  q(1, 5) = 0.3;
  q(2, 6) = 0.42;
  const std::vector<SlotTarget> a{{1, 5, 1}, {2, 6, 2}};
  const std::vector<SlotTarget> b{{1, 5, 2}, {2, 6, 4}};
  CHECK(ilm_token_loss(q, a, 3) == doctest::Approx(ilm_token_loss(q, b, 6)).epsilon(1e-14));

  CHECK_THROWS_AS(ilm_token_loss(q, a, 0), ValidationError);
}

TEST_CASE("ilm_stop_loss closed forms") {
  CHECK(ilm_stop_loss(0.5, true) == doctest::Approx(std::log(2.0)));
  CHECK(ilm_stop_loss(0.5, false) == doctest::Approx(std::log(2.0)));
  CHECK(ilm_stop_loss(1.0 - 1e-12, true) < 1e-9);
  CHECK(ilm_stop_loss(0.9, false) == doctest::Approx(2.302585093).epsilon(1e-9));
  CHECK_THROWS_AS(ilm_stop_loss(1.0, true), ValidationError);
}

TEST_CASE("arm_loss closed forms") {
  const Mat<double> uniform = Mat<double>::Zero(3, 9);
  const std::vector<TokenId> targets{5, 6, 7};
  const std::vector<std::uint8_t> all{1, 1, 1};
  CHECK(arm_loss(uniform, targets, all) == doctest::Approx(std::log(9.0)));

  Mat<double> onehot = Mat<double>::Zero(3, 9);
  for (int i = 0; i < 3; ++i) onehot(i, targets[static_cast<std::size_t>(i)]) = 20.0;
  // Closed form: log(1 + 8 e^-20).
  CHECK(arm_loss(onehot, targets, all) == doctest::Approx(std::log1p(8 * std::exp(-20.0))).epsilon(1e-9));
  CHECK(arm_loss(onehot, targets, all) < 1e-6);

  Mat<double> mixed = Mat<double>::Random(3, 9);
  const std::vector<std::uint8_t> one{0, 1, 0};
  const auto row = mixed.row(1);
  const double lse = std::log(row.array().exp().sum());
  CHECK(arm_loss(mixed, targets, one) == doctest::Approx(lse - row(6)));

  const std::vector<std::uint8_t> none{0, 0, 0};
  CHECK_THROWS_AS(arm_loss(mixed, targets, none), ValidationError);
}

TEST_CASE("mdm_loss closed forms") {
  const TokenId mask = 4;
  const std::vector<TokenId> x0{2, 5, 6, 7, 3};
  const std::vector<std::uint8_t> frozen{1, 0, 0, 0, 0};
  const Mat<double> uniform = Mat<double>::Zero(5, 10);
  const LogLinearSchedule sched;
  const double t = 0.7;
  const std::vector<TokenId> all_masked{2, mask, mask, mask, mask};
  CHECK(mdm_loss(uniform, x0, all_masked, frozen, t, mask) ==
        doctest::Approx(sched.weight(t) * 4 * std::log(10.0)));

  // Unmasked positions contribute nothing whatever their logits.
  Mat<double> wild = Mat<double>::Random(5, 10) * 50.0;
  const std::vector<TokenId> none{2, 5, 6, 7, 3};
  CHECK(mdm_loss(wild, x0, none, frozen, t, mask) == 0.0);
  CHECK(sched.weight(t) == doctest::Approx(1.0 / t));

  const std::vector<TokenId> bad{mask, 5, 6, 7, 3};
  CHECK_THROWS_AS(mdm_loss(uniform, x0, bad, frozen, t, mask), ValidationError);
}

TEST_CASE("it_loss: local averaging differs from the global average") {
  const TokenId eos = 3;
  // One slot, one dropped token, uniform logits.
  {
    const Mat<double> logits = Mat<double>::Zero(3, 11);
    const std::vector<std::uint8_t> mask{0, 1, 0};
    const std::vector<SlotTarget> t{{1, 6, 1}};
    CHECK(it_loss(logits, mask, t, eos) == doctest::Approx(std::log(11.0)));
  }
  // Two slots with counts {2} and {1}.
  Mat<double> logits = Mat<double>::Random(4, 8);
  const std::vector<std::uint8_t> mask{0, 1, 1, 0};
  const std::vector<SlotTarget> t{{1, 5, 2}, {2, 6, 1}};
  auto nll = [&](int r, int c) { return std::log(logits.row(r).array().exp().sum()) - logits(r, c); };
  const double it_expected = nll(1, 5) + nll(2, 6);  // each slot weight 1
  CHECK(it_loss(logits, mask, t, eos) == doctest::Approx(it_expected).epsilon(1e-12));

  // ILM global average over the joint table of the same logits.
  Mat<double> joint = Mat<double>::Zero(4, 8);
  double z = 0;
  for (int r = 1; r <= 2; ++r) z += logits.row(r).array().exp().sum();
  for (int r = 1; r <= 2; ++r) joint.row(r) = logits.row(r).array().exp().matrix() / z;
  const double ilm = ilm_token_loss(joint, t, 3);
  CHECK(std::abs(ilm - it_loss(logits, mask, t, eos)) > 1e-3);

  // Complete sequence: every slot targets slot-EOS.
  const std::vector<SlotTarget> none;
  CHECK(it_loss(logits, mask, none, eos) == doctest::Approx(nll(1, eos) + nll(2, eos)));
}

TEST_CASE("batched loss matches the per-example losses") {
  const Vocab v = letters(6);
  ModelConfig c = tiny_config(Variant::Ilm, v.size());
  c.specials = SpecialIds::from(v);
  const auto w = init_weights(c, 5).cast<double>();
  const auto batch = examples_for(c, v, 9);
  const LossParts all = batch_loss<double>(w, batch, nullptr);
  double sum = 0;
  for (const auto& ex : batch) sum += batch_loss<double>(w, std::span(&ex, 1), nullptr).total;
  CHECK(all.total == doctest::Approx(sum / static_cast<double>(batch.size())).epsilon(1e-12));
  CHECK(all.total == doctest::Approx(all.tok + all.stop).epsilon(1e-15));

  auto reversed = batch;
  std::reverse(reversed.begin(), reversed.end());
  CHECK(batch_loss<double>(w, reversed, nullptr).total == doctest::Approx(all.total).epsilon(1e-12));
}

TEST_CASE("batched loss agrees with the pointwise ilm losses") {
  const Vocab v = letters(6);
  ModelConfig c = tiny_config(Variant::Ilm, v.size());
  c.specials = SpecialIds::from(v);
  const auto w = init_weights(c, 6);
  auto batch = examples_for(c, v, 3);
  batch.resize(1);
  REQUIRE(batch[0].n_dropped > 0);
  const LossParts parts = batch_loss<float>(w, batch, nullptr);

  PaddedBatch pb = pad_sequences(std::vector<std::vector<TokenId>>{batch[0].input},
                                 std::vector<std::size_t>{batch[0].condition_len}, 32, v.pad());
  const auto logits = insertion_logits(w, pb);
  const Mat<double> dist = joint_insertion_distribution(logits[0]);
  CHECK(parts.tok == doctest::Approx(ilm_token_loss(dist, batch[0].targets, batch[0].n_dropped)).epsilon(1e-4));
  const double ps = stop_probability(w, pb)[0];
  CHECK(parts.stop == doctest::Approx(ilm_stop_loss(ps, false)).epsilon(1e-4));
}

TEST_CASE("analytic gradients match central differences") {
  for (Variant variant : {Variant::Ilm, Variant::Arm, Variant::Mdm, Variant::It}) {
    CAPTURE(variant_name(variant));
    const GradCheck g = check_gradients(variant, 200, 17);
    CHECK(g.probed == 200);
    CHECK(g.worst <= 1e-3);
  }
}

TEST_CASE("TrainConfig validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.grad_clip = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.grad_clip = std::nullopt;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.lr = 1e-3;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("batch indices cover each epoch exactly once") {
  const std::size_t N = 37;
  std::vector<int> seen(N, 0);
  for (std::size_t step = 0; step < N; ++step) {
    for (auto i : batch_indices(4, step, 1, N)) ++seen[i];
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
  CHECK(batch_indices(4, 3, 8, N) == batch_indices(4, 3, 8, N));
  CHECK(batch_indices(4, 3, 8, N) != batch_indices(5, 3, 8, N));
}

namespace {

std::vector<CleanSequence> memorization_corpus(const Vocab& v, std::size_t n) {
  std::vector<CleanSequence> out;
  Rng rng(11);
  for (std::size_t i = 0; i < n; ++i) {
    std::string line = "<s>";
    const std::size_t len = 2 + uniform_index(rng, 3);
    for (std::size_t j = 0; j < len; ++j) line += std::string(" ") + static_cast<char>('A' + uniform_index(rng, 6));
    out.push_back(seq(v, line + " </s>"));
  }
  return out;
}

}  // namespace

TEST_CASE("training is deterministic and resumable") {
  const Vocab v = letters(6);
  ModelConfig c = tiny_config(Variant::Ilm, v.size());
  c.specials = SpecialIds::from(v);
  const auto corpus = memorization_corpus(v, 20);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_size = 8;
  cfg.max_steps = 12;
  cfg.seed = 3;

  TrainState a = TrainState::fresh(init_weights(c, 1));
  const auto ra = train(cfg, corpus, a);
  TrainState b = TrainState::fresh(init_weights(c, 1));
  const auto rb = train(cfg, corpus, b);
  CHECK(ra == rb);
  for (const auto& r : ra) CHECK(r.total == doctest::Approx(r.tok_component + r.stop_component).epsilon(1e-6));

  // Interrupt at step 5 and resume.
  TrainState half = TrainState::fresh(init_weights(c, 1));
  TrainConfig first = cfg;
  first.max_steps = 5;
  auto r1 = train(first, corpus, half);
  auto r2 = train(cfg, corpus, half);
  r1.insert(r1.end(), r2.begin(), r2.end());
  CHECK(r1 == ra);
  bool same = true;
  a.weights.for_each([&](const std::string& name, const Mat<float>& m) {
    half.weights.for_each([&](const std::string& other, const Mat<float>& n) {
      if (name == other) same = same && m == n;
    });
  });
  CHECK(same);
}

TEST_CASE("ilm overfits a 50-example corpus") {
  // Each two-token prompt maps to one content token, so every noised
  // example has a single correct target and the loss floor is zero.
  const Vocab v = letters(10);
  ModelConfig c = tiny_config(Variant::Ilm, v.size(), 64);
  c.specials = SpecialIds::from(v);
  std::vector<CleanSequence> corpus;
  for (std::size_t i = 0; i < 50; ++i) {
    const char a = static_cast<char>('A' + i / 10), b = static_cast<char>('A' + i % 10);
    const char y = static_cast<char>('A' + (i * 7 + 3) % 10);
    corpus.push_back(seq(v, std::string{a} + " " + b + " <s> " + y + " </s>", 2));
  }
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch_size = 50;
  cfg.max_steps = 200;
  cfg.seed = 1;
  TrainState s = TrainState::fresh(init_weights(c, 2));
  const auto reports = train(cfg, corpus, s);
  double tail = 0;
  for (std::size_t i = reports.size() - 10; i < reports.size(); ++i) tail += reports[i].total;
  CHECK(reports.front().total > 1.0);
  CHECK(tail / 10 < 0.1);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  const Vocab v = letters(6);
  ModelConfig c = tiny_config(Variant::Arm, v.size());
  c.specials = SpecialIds::from(v);
  TrainState s = TrainState::fresh(init_weights(c, 2));
  s.weights.out_b(0, 5) = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.variant = Variant::Arm;
  cfg.batch_size = 2;
  cfg.max_steps = 1;
  const auto corpus = memorization_corpus(v, 4);
  CHECK_THROWS_AS(train(cfg, corpus, s), NumericalError);
}
