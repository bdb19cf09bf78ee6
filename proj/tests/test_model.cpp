#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ilm/checkpoint.hpp"
#include "ilm/model.hpp"
#include "test_util.hpp"

using namespace ilm;
using ilm::testing::letters;
using ilm::testing::tiny_config;

namespace {

ModelWeights<float> tiny_model(Variant variant, const Vocab& v, std::uint64_t seed = 1) {
  ModelConfig c = tiny_config(variant, v.size());
  c.specials = SpecialIds::from(v);
  return init_weights(c, seed);
}

PaddedBatch one(const std::vector<TokenId>& ids, std::size_t pad_to, TokenId pad, std::size_t cond = 0) {
  return pad_sequences(std::vector<std::vector<TokenId>>{ids}, std::vector<std::size_t>{cond}, pad_to, pad);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ilm_test_model_" + name);
}

std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::filesystem::path& p, const std::vector<char>& bytes) {
  std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("pad positions never influence real positions") {
  const Vocab v = letters(6);
  const auto w = tiny_model(Variant::Ilm, v);
  const auto ids = v.encode_line("<stp> <s> A B C </s>");
  PaddedBatch a = one(ids, 12, v.pad());
  PaddedBatch b = a;
  // Scribble arbitrary ids into the pad tail; validity stays 0.
  for (std::size_t i = ids.size(); i < b.width; ++i) b.ids[i] = v.id("A") + static_cast<TokenId>(i % 3);
  PaddedBatch c = one(ids, 20, v.pad());
  const auto ha = backbone_forward(w, a);
  const auto hb = backbone_forward(w, b);
  const auto hc = backbone_forward(w, c);
  CHECK(ha[0] == hb[0]);
  CHECK(ha[0] == hc[0]);
  CHECK(ha[0].rows() == static_cast<Eigen::Index>(ids.size()));
}

TEST_CASE("batched rows match single rows") {
  const Vocab v = letters(6);
  const auto w = tiny_model(Variant::Ilm, v);
  const std::vector<std::vector<TokenId>> rows{v.encode_line("<stp> <s> A B C </s>"), v.encode_line("<stp> <s> D </s>")};
  const PaddedBatch b = pad_sequences(rows, std::vector<std::size_t>{0, 0}, 8, v.pad());
  const auto h = backbone_forward(w, b);
  // Equal up to float summation order inside the packed matmuls.
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK((h[i] - backbone_forward(w, one(rows[i], 8, v.pad()))[0]).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("arm backbone is causal") {
  const Vocab v = letters(6);
  const auto w = tiny_model(Variant::Arm, v);
  const auto x = v.encode_line("<s> A B C D E");
  auto y = x;
  y[4] = v.id("F");
  y[5] = v.id("A");
  const auto hx = backbone_forward(w, one(x, 8, v.pad()))[0];
  const auto hy = backbone_forward(w, one(y, 8, v.pad()))[0];
  CHECK(hx.topRows(4) == hy.topRows(4));
  CHECK(hx.row(4) != hy.row(4));

  // The bidirectional ilm backbone is not causal.
  const auto wi = tiny_model(Variant::Ilm, v);
  const auto ix = backbone_forward(wi, one(x, 8, v.pad()))[0];
  const auto iy = backbone_forward(wi, one(y, 8, v.pad()))[0];
  CHECK(ix.row(0) != iy.row(0));
}

TEST_CASE("rotary scores depend only on relative offset") {
  Rng rng(5);
  std::normal_distribution<double> normal;
  for (std::size_t dim : {2u, 4u, 8u, 16u}) {
    std::vector<double> q(dim), k(dim);
    for (auto& e : q) e = normal(rng);
    for (auto& e : k) e = normal(rng);
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 6; ++j) {
        const double base = rope_score(q, i, k, j, 10000.0);
        for (std::size_t s : {1u, 7u, 40u}) {
          CHECK(rope_score(q, i + s, k, j + s, 10000.0) == doctest::Approx(base).epsilon(1e-10));
        }
      }
    }
    // At equal positions the rotation cancels.
    double dot = 0;
    for (std::size_t d = 0; d < dim; ++d) dot += q[d] * k[d];
    CHECK(rope_score(q, 3, k, 3, 10000.0) == doctest::Approx(dot).epsilon(1e-12));
    CHECK(std::abs(rope_score(q, 0, k, 5, 10000.0) - dot) > 1e-9);
  }
  const std::vector<double> odd(3, 1.0);
  CHECK_THROWS_AS(rope_score(odd, 0, odd, 0, 10000.0), ValidationError);
}

TEST_CASE("slot set follows the slot convention") {
  const Vocab v = letters(6);
  const auto w = tiny_model(Variant::Ilm, v);
  {
    const auto logits = insertion_logits(w, one(v.encode_line("<stp> <s> </s>"), 4, v.pad()));
    CHECK(logits[0].num_slots() == 1);
    CHECK(logits[0].slot_mask == std::vector<std::uint8_t>{0, 1, 0});
  }
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TokenId> ids{v.stp(), v.bos()};
    const std::size_t len = uniform_index(rng, 8);
    for (std::size_t i = 0; i < len; ++i) ids.push_back(static_cast<TokenId>(5 + uniform_index(rng, 6)));
    ids.push_back(v.eos());
    const auto logits = insertion_logits(w, one(ids, 16, v.pad()));
    CHECK(logits[0].num_slots() == ids.size() - 2);
    CHECK(logits[0].scores.allFinite() == false);  // invalid rows are -inf
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (logits[0].slot_mask[r]) CHECK(logits[0].scores.row(static_cast<Eigen::Index>(r)).allFinite());
    }
  }
  CHECK_THROWS_AS(insertion_logits(w, one(v.encode_line("<s> A </s>"), 4, v.pad())), ValidationError);
  CHECK_THROWS_AS(stop_probability(w, one(v.encode_line("<s> A </s>"), 4, v.pad())), ValidationError);
  const auto arm = tiny_model(Variant::Arm, v);
  CHECK_THROWS_AS(insertion_logits(arm, one(v.encode_line("<stp> <s> </s>"), 4, v.pad())), ValidationError);
}

TEST_CASE("prompt positions are not slots") {
  const Vocab v = letters(6);
  const auto w = tiny_model(Variant::Ilm, v);
  const auto ids = v.encode_line("<stp> A B <s> C </s>");
  const auto logits = insertion_logits(w, one(ids, 8, v.pad(), 2));
  CHECK(logits[0].slot_mask == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0});
}

TEST_CASE("joint insertion distribution") {
  InsertionLogits l;
  l.scores = Mat<float>::Constant(5, 7, -std::numeric_limits<float>::infinity());
  l.slot_mask = {0, 1, 1, 1, 0};
  for (int r = 1; r <= 3; ++r) l.scores.row(r).setZero();
  const Mat<double> uniform = joint_insertion_distribution(l);
  CHECK(uniform.row(0).sum() == 0.0);
  for (int r = 1; r <= 3; ++r) {
    for (int c = 0; c < 7; ++c) CHECK(uniform(r, c) == doctest::Approx(1.0 / 21.0));
  }
  InsertionLogits shifted = l;
  Rng rng(2);
  for (int r = 1; r <= 3; ++r) {
    for (int c = 0; c < 7; ++c) l.scores(r, c) = static_cast<float>(uniform01(rng) * 4 - 2);
  }
  shifted.scores = l.scores;
  for (int r = 1; r <= 3; ++r) shifted.scores.row(r).array() += 3.5f;
  const Mat<double> p = joint_insertion_distribution(l);
  const Mat<double> q = joint_insertion_distribution(shifted);
  CHECK((p - q).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));

  for (int r = 1; r <= 3; ++r) l.scores.row(r).setZero();
  l.scores(2, 4) = 20;
  CHECK(joint_insertion_distribution(l)(2, 4) >= 0.999);

  l.slot_mask.assign(5, 0);
  CHECK_THROWS_AS(joint_insertion_distribution(l), ValidationError);
}

TEST_CASE("stop probability") {
  const Vocab v = letters(6);
  auto w = tiny_model(Variant::Ilm, v);
  const auto b = one(v.encode_line("<stp> <s> A </s>"), 6, v.pad());
  w.stop_w.setZero();
  w.stop_b.setZero();
  CHECK(stop_probability(w, b)[0] == doctest::Approx(0.5).epsilon(1e-12));
  w = tiny_model(Variant::Ilm, v, 4);
  double prev = -1;
  for (float bias : {-3.0f, -1.0f, 0.0f, 0.5f, 2.0f}) {
    w.stop_b(0, 0) = bias;
    const double p = stop_probability(w, b)[0];
    CHECK(p > prev);
    prev = p;
  }
}

TEST_CASE("token logits") {
  const Vocab v = letters(6);
  const auto arm = tiny_model(Variant::Arm, v);
  const auto ids = v.encode_line("<s> A B C");
  const auto l = token_logits(arm, one(ids, 6, v.pad()));
  REQUIRE(l[0].rows() == 4);
  // Row i predicts token i+1: the causal prefix up to i fully determines it.
  auto longer = ids;
  longer.push_back(v.id("D"));
  const auto l2 = token_logits(arm, one(longer, 6, v.pad()));
  CHECK(l2[0].topRows(4) == l[0]);
  for (Eigen::Index r = 0; r < l[0].rows(); ++r) {
    const auto row = l[0].row(r).cast<double>();
    const double z = (row.array() - row.maxCoeff()).exp().sum();
    double sum = 0;
    for (Eigen::Index c = 0; c < row.size(); ++c) sum += std::exp(row(c) - row.maxCoeff()) / z;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }

  const auto mdm = tiny_model(Variant::Mdm, v);
  std::vector<TokenId> canvas{v.bos()};
  canvas.resize(9, v.mask());
  const auto lm = token_logits(mdm, one(canvas, 10, v.pad()), 1.0);
  CHECK(lm[0].allFinite());
  CHECK(lm[0].rows() == 9);
  // The time embedding is live.
  CHECK(lm[0] != token_logits(mdm, one(canvas, 10, v.pad()), 0.05)[0]);

  const auto ilm = tiny_model(Variant::Ilm, v);
  CHECK_THROWS_AS(token_logits(ilm, one(ids, 6, v.pad())), ValidationError);
}

TEST_CASE("length and id overflow are rejected") {
  const Vocab v = letters(6);
  const auto w = tiny_model(Variant::Arm, v);
  std::vector<TokenId> ids(40, v.id("A"));
  CHECK_THROWS_AS(backbone_forward(w, one(ids, 40, v.pad())), ValidationError);
  std::vector<TokenId> bad{v.bos(), 999};
  CHECK_THROWS_AS(backbone_forward(w, one(bad, 4, v.pad())), ValidationError);
}

TEST_CASE("config validation") {
  ModelConfig c = tiny_config(Variant::Ilm, 11);
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config(Variant::Ilm, 11);
  c.time_bins = 4;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config(Variant::Mdm, 11);
  c.mdm_span = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK(parse_variant("it") == Variant::It);
  CHECK_THROWS_AS(parse_variant("gpt"), UsageError);
}

TEST_CASE("identical inputs give identical outputs") {
  const Vocab v = letters(6);
  const auto w = tiny_model(Variant::Ilm, v);
  const auto b = one(v.encode_line("<stp> <s> A B </s>"), 6, v.pad());
  CHECK(insertion_logits(w, b)[0].scores == insertion_logits(w, b)[0].scores);
  CHECK(init_weights(w.config, 1).tok_emb == w.tok_emb);
  CHECK(init_weights(w.config, 2).tok_emb != w.tok_emb);
}

TEST_CASE("checkpoint round trip is exact") {
  const Vocab v = letters(6);
  for (Variant variant : {Variant::Ilm, Variant::Arm, Variant::Mdm, Variant::It}) {
    Checkpoint ck;
    ck.weights = tiny_model(variant, v, 9);
    ck.vocab = v.tokens();
    ck.meta = {{"note", "x"}};
    OptimizerState opt{17, tiny_model(variant, v, 10), tiny_model(variant, v, 11)};
    ck.optimizer = opt;
    const auto p = temp_path(std::string(variant_name(variant)));
    save_checkpoint(ck, p);
    const Checkpoint back = load_checkpoint(p, ck.weights.config);
    CHECK(back.weights.config == ck.weights.config);
    CHECK(back.vocab == ck.vocab);
    CHECK(back.meta == ck.meta);
    REQUIRE(back.optimizer.has_value());
    CHECK(back.optimizer->step == 17);
    bool same = true;
    auto compare = [&](const ModelWeights<float>& a, const ModelWeights<float>& b) {
      std::vector<const Mat<float>*> xs;
      a.for_each([&](const std::string&, const Mat<float>& m) { xs.push_back(&m); });
      std::size_t i = 0;
      b.for_each([&](const std::string&, const Mat<float>& m) { same = same && *xs[i++] == m; });
    };
    compare(back.weights, ck.weights);
    compare(back.optimizer->m, opt.m);
    compare(back.optimizer->v, opt.v);
    CHECK(same);
    std::filesystem::remove(p);
  }
}

TEST_CASE("checkpoint errors are distinct") {
  const Vocab v = letters(6);
  Checkpoint ck;
  ck.weights = tiny_model(Variant::Arm, v);
  ck.vocab = v.tokens();
  const auto p = temp_path("errors");
  save_checkpoint(ck, p);
  const auto bytes = read_bytes(p);

  SUBCASE("bad magic") {
    auto b = bytes;
    b[0] ^= 0x5a;
    write_bytes(p, b);
    CHECK_THROWS_AS(load_checkpoint(p), CheckpointFormatError);
  }
  SUBCASE("version") {
    auto b = bytes;
    b[8] = 7;
    write_bytes(p, b);
    CHECK_THROWS_AS(load_checkpoint(p), CheckpointVersionError);
  }
  SUBCASE("truncated") {
    auto b = bytes;
    b.resize(b.size() - 10);
    write_bytes(p, b);
    CHECK_THROWS_AS(load_checkpoint(p), CheckpointTruncatedError);
    b.resize(6);
    write_bytes(p, b);
    CHECK_THROWS_AS(load_checkpoint(p), CheckpointTruncatedError);
  }
  SUBCASE("manifest garbage") {
    auto b = bytes;
    b[24] = '#';
    write_bytes(p, b);
    CHECK_THROWS_AS(load_checkpoint(p), CheckpointFormatError);
  }
  SUBCASE("variant mismatch") {
    ModelConfig expect = ck.weights.config;
    expect.variant = Variant::Ilm;
    CHECK_THROWS_AS(load_checkpoint(p, expect), CheckpointShapeError);
  }
  SUBCASE("shape mismatch") {
    ModelConfig expect = ck.weights.config;
    expect.d_model = 64;
    CHECK_THROWS_AS(load_checkpoint(p, expect), CheckpointShapeError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist")), IoError);
  }
  std::filesystem::remove(p);
}
