#include <doctest.h>

#include "ilm/oracle.hpp"
#include "test_util.hpp"

using namespace ilm;
using ilm::testing::letters;
using ilm::testing::seq;

TEST_CASE("posterior for a single missing token is a point mass") {
  const Vocab v = letters(4);
  const auto x0 = seq(v, "<s> A B C </s>");
  const Posterior p = exact_posterior(x0, v.encode_line("<s> A C </s>"));
  REQUIRE(p.size() == 1);
  // Visible `<stp> <s> A C </s>`: the A-C slot is index 2.
  CHECK(p.begin()->first == std::pair<std::size_t, TokenId>{2, v.id("B")});
  CHECK(p.begin()->second == Rational(1));
}

TEST_CASE("posterior over several missing tokens") {
  const Vocab v = letters(5);
  const auto x0 = seq(v, "<s> A B C D </s>");
  const Posterior p = exact_posterior(x0, v.encode_line("<s> B </s>"));
  // Missing A before B, C and D after: equally likely to be the last drop.
  CHECK(p.size() == 3);
  CHECK(p.at({1, v.id("A")}) == Rational(1, 3));
  CHECK(p.at({2, v.id("C")}) == Rational(1, 3));
  CHECK(p.at({2, v.id("D")}) == Rational(1, 3));
}

TEST_CASE("complete sequence has empty support") {
  const Vocab v = letters(3);
  const auto x0 = seq(v, "<s> A B </s>");
  CHECK(exact_posterior(x0, x0.ids).empty());
}

TEST_CASE("posterior input errors") {
  const Vocab v = letters(4);
  CHECK_THROWS_AS(exact_posterior(seq(v, "<s> A B </s>"), v.encode_line("<s> C </s>")), ValidationError);
  CHECK_THROWS_AS(exact_posterior(seq(v, "<s> A B </s>"), v.encode_line("<s> B A </s>")), ValidationError);
  CHECK_THROWS_AS(exact_posterior(seq(v, "<s> A B A </s>"), v.encode_line("<s> A </s>")), ValidationError);
}

TEST_CASE("corpus targets equal the exact posterior on small sequences") {
  const OracleSweep s = oracle_sweep(4, 6);
  CHECK(s.mismatches == 0);
  CHECK(s.sequences == 6 + 30 + 120 + 360);
  // Every sequence of length L has 2^L masks.
  CHECK(s.pairs == 6 * 2 + 30 * 4 + 120 * 8 + 360 * 16);
  CHECK(s.pairs_by_length.size() == 5);
}

TEST_CASE("the sweep catches a broken target builder") {
  // Off-by-one slot: targets credited to the slot after the right one.
  const TargetBuilder shifted = [](const CleanSequence& x, const DropMask& b) {
    NoisedExample ex = build_noised_example(x, b, 1);
    for (auto& t : ex.slot_targets) {
      if (t.slot + 2 < ex.visible.size()) ++t.slot;
    }
    return ex;
  };
  CHECK(oracle_sweep(3, 4, shifted).mismatches > 0);
  // Unnormalized counts: doubling a count breaks equality.
  const TargetBuilder doubled = [](const CleanSequence& x, const DropMask& b) {
    NoisedExample ex = build_noised_example(x, b, 1);
    if (!ex.slot_targets.empty()) ex.slot_targets.front().count *= 2;
    return ex;
  };
  CHECK(oracle_sweep(3, 4, doubled).mismatches > 0);
  CHECK_THROWS_AS(oracle_sweep(7, 8), UsageError);
}

TEST_CASE("variance probe") {
  const Vocab v = letters(6);
  SUBCASE("one droppable token has a single trajectory") {
    Rng rng(1);
    const auto p = elbo_mc_variance_probe(seq(v, "<s> C </s>"), TabularModel{3, 1.0, v.size()}, 200, rng);
    CHECK(p.mc_loss_var == 0.0);
    CHECK(p.d_loss_var == 0.0);
    CHECK(p.mc_loss_mean == doctest::Approx(p.d_loss_mean));
  }
  SUBCASE("d targets lower the variance at an equal mean") {
    Rng rng(2);
    const auto p = elbo_mc_variance_probe(seq(v, "<s> A B C D E F </s>"), TabularModel{4, 1.5, v.size()}, 40000, rng);
    CHECK(p.d_loss_var < p.mc_loss_var);
    const double se = std::sqrt(p.mc_loss_var / 40000.0);
    CHECK(std::abs(p.mc_loss_mean - p.d_loss_mean) < 4 * se);
  }
  SUBCASE("uniform model gives identical estimators per trajectory") {
    Rng rng(3);
    const auto p = elbo_mc_variance_probe(seq(v, "<s> A B C D </s>"), TabularModel{5, 0.0, v.size()}, 2000, rng);
    CHECK(p.mc_loss_mean == doctest::Approx(p.d_loss_mean).epsilon(1e-12));
  }
  SUBCASE("L=4 over 100k trajectories") {
    Rng rng(4);
    const auto x0 = seq(v, "<s> A B C D </s>");
    const TabularModel model{6, 1.0, v.size()};
    const auto p = elbo_mc_variance_probe(x0, model, 100000, rng);
    CHECK(p.mc_loss_var / p.d_loss_var > 1.0);
    // Variance estimates settle, so the standard error shrinks as 1/sqrt(n).
    Rng small(5);
    const auto q = elbo_mc_variance_probe(x0, model, 10000, small);
    CHECK(q.mc_loss_var == doctest::Approx(p.mc_loss_var).epsilon(0.1));
    CHECK(q.d_loss_var == doctest::Approx(p.d_loss_var).epsilon(0.1));
  }
  Rng rng(0);
  CHECK_THROWS_AS(elbo_mc_variance_probe(seq(v, "<s> A </s>"), TabularModel{1, 1.0, v.size()}, 1, rng), ValidationError);
}

TEST_CASE("tabular model is normalized and deterministic") {
  const Vocab v = letters(4);
  const TabularModel m{9, 1.0, v.size()};
  const auto vis = v.encode_line("<stp> <s> A B </s>");
  const auto lp = m.log_probs(vis);
  double z = 0;
  for (const auto& row : lp) {
    for (double l : row) z += std::exp(l);
  }
  CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isinf(lp[0][5]));
  CHECK(std::isinf(lp[4][5]));
  CHECK(m.log_probs(vis) == lp);
}
