#include <gtest/gtest.h>

#include <cmath>

#include "dapa/backbone.hpp"
#include "dapa/backbone_io.hpp"
#include "test_util.hpp"

using namespace dapa;
using dapa::testing::random_ids;
using dapa::testing::tiny_config;

namespace {

PrefixTensors random_prefixes(const BackboneConfig& cfg, std::size_t c, Rng& rng) {
  PrefixTensors p;
  for (const auto& site : attention_sites(cfg)) {
    KVTensors kv{Tensor(Shape{c, cfg.d_model}), Tensor(Shape{c, cfg.d_model})};
    for (double& x : kv.key.values()) x = rng.uniform(-1, 1);
    for (double& x : kv.value.values()) x = rng.uniform(-1, 1);
    p.emplace(site, std::move(kv));
  }
  return p;
}

PrefixTensors only_site(const PrefixTensors& p, SiteKind kind) {
  PrefixTensors out;
  for (const auto& [s, kv] : p)
    if (s.kind == kind) out.emplace(s, kv);
  return out;
}

}  // namespace

TEST(BackboneConfig, Validation) {
  BackboneConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.n_enc_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AttentionSite, NamesRoundTrip) {
  for (const auto& s : attention_sites(tiny_config())) EXPECT_EQ(AttentionSite::parse(s.name()), s);
  EXPECT_THROW(AttentionSite::parse("cross:0"), FormatError);
  EXPECT_THROW(AttentionSite::parse("enc-self"), FormatError);
}

TEST(AttentionWithPrefix, HandCaseUniformOverTwoPositions) {
  const KVPrefix p{constant(Tensor::matrix({{0}})), constant(Tensor::matrix({{3}}))};
  const Tensor out = attention_with_prefix(constant(Tensor::matrix({{0}})), constant(Tensor::matrix({{0}})),
                                           constant(Tensor::matrix({{5}})), &p, 1, false)
                         .value();
  EXPECT_DOUBLE_EQ(out.item(), 4.0);
}

TEST(AttentionWithPrefix, AbsentPrefixIsVanilla) {
  Rng rng(1);
  Tensor q(Shape{3, 4}), k(Shape{3, 4}), v(Shape{3, 4});
  for (Tensor* t : {&q, &k, &v})
    for (double& x : t->values()) x = rng.uniform(-1, 1);
  const Tensor a = attention_with_prefix(constant(q), constant(k), constant(v), nullptr, 2, true).value();
  const Tensor b = attention(constant(q), constant(k), constant(v), 2, 0, true).value();
  EXPECT_TRUE(bitwise_equal(a, b));
}

TEST(AttentionWithPrefix, CausalMaskNeverHidesPrefix) {
  // A single query at position 0 with a causal mask must still see the
  // prefix row: output is the average of the prefix value and its own value.
  const KVPrefix p{constant(Tensor::matrix({{0}})), constant(Tensor::matrix({{2}}))};
  const Tensor out = attention_with_prefix(constant(Tensor::matrix({{0}, {0}})), constant(Tensor::matrix({{0}, {0}})),
                                           constant(Tensor::matrix({{6}, {100}})), &p, 1, true)
                         .value();
  EXPECT_DOUBLE_EQ(out.at(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(out.at(1, 0), 36.0);
}

TEST(AttentionWithPrefix, MismatchedPrefixShapesThrow) {
  const KVPrefix p{constant(Tensor(Shape{2, 4})), constant(Tensor(Shape{3, 4}))};
  const Var x = constant(Tensor(Shape{1, 4}));
  EXPECT_THROW(attention_with_prefix(x, x, x, &p, 2, false), DimensionError);
  const KVPrefix q{constant(Tensor(Shape{2, 3})), constant(Tensor(Shape{2, 3}))};
  EXPECT_THROW(attention_with_prefix(x, x, x, &q, 2, false), DimensionError);
}

TEST(AttentionWithPrefix, PerHeadSplitMatchesSingleHeadSlices) {
  Rng rng(2);
  const std::size_t d = 4, heads = 2, dh = 2;
  Tensor q(Shape{2, d}), k(Shape{3, d}), v(Shape{3, d}), pk(Shape{1, d}), pv(Shape{1, d});
  for (Tensor* t : {&q, &k, &v, &pk, &pv})
    for (double& x : t->values()) x = rng.uniform(-1, 1);
  const KVPrefix p{constant(pk), constant(pv)};
  const Tensor full = attention_with_prefix(constant(q), constant(k), constant(v), &p, heads, false).value();
  EXPECT_EQ(full.shape(), (Shape{2, d}));
  auto cols = [&](const Tensor& t, std::size_t h) {
    Tensor out(Shape{t.rows(), dh});
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < dh; ++c) out.at(r, c) = t.at(r, h * dh + c);
    return out;
  };
  for (std::size_t h = 0; h < heads; ++h) {
    const KVPrefix ph{constant(cols(pk, h)), constant(cols(pv, h))};
    const Tensor one = attention_with_prefix(constant(cols(q, h)), constant(cols(k, h)), constant(cols(v, h)), &ph, 1,
                                             false)
                           .value();
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < dh; ++c) EXPECT_NEAR(one.at(r, c), full.at(r, h * dh + c), 1e-14);
  }
}

TEST(Forward, EmptyPrefixMapIsBitIdenticalToVanilla) {
  const auto cfg = tiny_config();
  const BackboneWeights w = BackboneWeights::init(cfg, 3);
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto src = random_ids(rng, 1 + rng.below(10), cfg.vocab_size);
    auto dec = random_ids(rng, 1 + rng.below(6), cfg.vocab_size);
    dec.insert(dec.begin(), kBos);
    const Tensor a = forward(w, src, dec).value();
    const Tensor b = forward(w, src, dec, SitePrefixes{}).value();
    EXPECT_TRUE(bitwise_equal(a, b));
  }
}

TEST(Forward, ShapeAndDeterminism) {
  const auto cfg = tiny_config();
  const BackboneWeights w = BackboneWeights::init(cfg, 4);
  Rng rng(4);
  const auto src = random_ids(rng, 7, cfg.vocab_size);
  const std::vector<TokenId> dec{kBos, 5, 6, 7};
  const PrefixTensors p = random_prefixes(cfg, 3, rng);
  const Tensor a = forward(w, src, dec, as_site_prefixes(p)).value();
  EXPECT_EQ(a.shape(), (Shape{4, cfg.vocab_size}));
  EXPECT_TRUE(bitwise_equal(a, forward(w, src, dec, as_site_prefixes(p)).value()));
  EXPECT_TRUE(a.all_finite());
}

TEST(Forward, EmptySourceIsDegenerate) {
  const BackboneWeights w = BackboneWeights::init(tiny_config(), 5);
  EXPECT_THROW(forward(w, std::vector<TokenId>{}, std::vector<TokenId>{kBos}), DegenerateInputError);
}

TEST(Forward, OverlongSourceIsLengthError) {
  const auto cfg = tiny_config();
  const BackboneWeights w = BackboneWeights::init(cfg, 5);
  Rng rng(5);
  EXPECT_THROW(forward(w, random_ids(rng, cfg.max_src_len + 1, cfg.vocab_size), std::vector<TokenId>{kBos}),
               LengthError);
}

TEST(Forward, CausalSafety) {
  const auto cfg = tiny_config();
  const BackboneWeights w = BackboneWeights::init(cfg, 6);
  Rng rng(6);
  const PrefixTensors p = random_prefixes(cfg, 2, rng);
  const auto src = random_ids(rng, 6, cfg.vocab_size);
  std::vector<TokenId> dec{kBos, 7, 8, 9, 10};
  const Tensor a = forward(w, src, dec, as_site_prefixes(p)).value();
  dec[3] = 15;
  dec[4] = 16;
  const Tensor b = forward(w, src, dec, as_site_prefixes(p)).value();
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) EXPECT_EQ(a.at(t, j), b.at(t, j));
}

TEST(Encode, ShapeSharedPathAndSiteSensitivity) {
  const auto cfg = tiny_config();
  const BackboneWeights w = BackboneWeights::init(cfg, 7);
  Rng rng(7);
  const auto src = random_ids(rng, 5, cfg.vocab_size);
  const PrefixTensors p = random_prefixes(cfg, 2, rng);
  const Tensor plain = encode(w, src).value();
  EXPECT_EQ(plain.shape(), (Shape{5, cfg.d_model}));
  EXPECT_TRUE(bitwise_equal(plain, prepare_memory(w, src).states));
  EXPECT_FALSE(bitwise_equal(plain, encode(w, src, as_site_prefixes(only_site(p, SiteKind::EncoderSelf))).value()));
  EXPECT_TRUE(bitwise_equal(plain, encode(w, src, as_site_prefixes(only_site(p, SiteKind::DecoderSelf))).value()));
  EXPECT_TRUE(bitwise_equal(plain, encode(w, src, as_site_prefixes(only_site(p, SiteKind::DecoderCross))).value()));
}

TEST(DecodeStep, MatchesForwardLastRow) {
  const auto cfg = tiny_config();
  const BackboneWeights w = BackboneWeights::init(cfg, 8);
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const PrefixTensors p = trial % 2 ? random_prefixes(cfg, 1 + rng.below(4), rng) : PrefixTensors{};
    const auto src = random_ids(rng, 1 + rng.below(8), cfg.vocab_size);
    auto gen = random_ids(rng, rng.below(6), cfg.vocab_size);
    gen.insert(gen.begin(), kBos);
    const Tensor full = forward(w, src, gen, as_site_prefixes(p)).value();
    const auto step = decode_step(w, prepare_memory(w, src, p), gen, p);
    ASSERT_EQ(step.size(), cfg.vocab_size);
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) EXPECT_NEAR(step[j], full.at(gen.size() - 1, j), 1e-9);
  }
}

TEST(DecodeStep, BosOnlyFiniteAndDeterministic) {
  const auto cfg = tiny_config();
  const BackboneWeights w = BackboneWeights::init(cfg, 9);
  const std::vector<TokenId> src{5, 6, 7};
  const std::vector<TokenId> gen{kBos};
  const auto mem = prepare_memory(w, src);
  const auto a = decode_step(w, mem, gen);
  for (double x : a) EXPECT_TRUE(std::isfinite(x));
  EXPECT_EQ(a, decode_step(w, mem, gen));
}

TEST(DecodeStep, TooLongIsLengthError) {
  const auto cfg = tiny_config();
  const BackboneWeights w = BackboneWeights::init(cfg, 10);
  const std::vector<TokenId> src{5};
  std::vector<TokenId> gen(cfg.max_tgt_len + 2, 5);
  gen[0] = kBos;
  EXPECT_THROW(decode_step(w, prepare_memory(w, src), gen), LengthError);
}

TEST(Frozen, PrefixLossLeavesBackboneGradsZero) {
  const auto cfg = tiny_config();
  BackboneWeights w = BackboneWeights::init(cfg, 11);
  w.set_frozen(true);
  EXPECT_TRUE(w.frozen());
  Rng rng(11);
  Parameter pk(Tensor(Shape{2, cfg.d_model}, 0.3)), pv(Tensor(Shape{2, cfg.d_model}, -0.2));
  SitePrefixes sp;
  for (const auto& s : attention_sites(cfg)) sp.emplace(s, KVPrefix{pk.var(), pv.var()});
  const std::vector<TokenId> src{5, 6, 7}, dec{kBos, 8}, tgt{8, kEos};
  backward(cross_entropy(forward(w, src, dec, sp), tgt, -1));
  for (const Parameter* p : w.parameters())
    for (double g : p->grad().values()) EXPECT_EQ(g, 0.0);
  bool any = false;
  for (double g : pk.grad().values()) any = any || g != 0.0;
  EXPECT_TRUE(any);
}

TEST(BackboneIo, SaveLoadRoundTrip) {
  const auto dir = dapa::testing::scratch_dir("backbone_io");
  BackboneWeights w = BackboneWeights::init(tiny_config(), 12);
  save_backbone(w, dir / "a.bkb");
  const BackboneWeights r = load_backbone(dir / "a.bkb");
  EXPECT_TRUE(r.frozen());
  EXPECT_EQ(r.config(), w.config());
  save_backbone(r, dir / "b.bkb");
  EXPECT_EQ(read_file(dir / "a.bkb"), read_file(dir / "b.bkb"));
}
