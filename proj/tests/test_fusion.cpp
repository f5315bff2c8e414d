#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "mmfd/fusion.hpp"
#include "mmfd/grad_check.hpp"
#include "mmfd/train.hpp"
#include "test_util.hpp"

using namespace mmfd;
using mmfd::testing::random_tensor;
using mmfd::testing::to_vec;

namespace {

void set_identity(Tensor t) {
  auto v = t.mutable_values();
  std::fill(v.begin(), v.end(), 0.0);
  for (std::size_t i = 0; i < t.dim(0); ++i) v[i * t.dim(1) + i] = 1.0;
}

void set_zero(Tensor t) {
  auto v = t.mutable_values();
  std::fill(v.begin(), v.end(), 0.0);
}

MultimodalSample toy_sample(const ModelConfig& c, std::uint64_t seed, int label = 0) {
  Rng rng(seed);
  MultimodalSample s;
  s.id = "toy-" + std::to_string(seed);
  s.label = label;
  for (int i = 0; i < 5; ++i) s.text_tokens.push_back(1 + static_cast<int>(rng.below(c.vocab_size - 1)));
  s.waveform.resize(256);
  for (auto& x : s.waveform) x = rng.uniform(-1.0, 1.0);
  s.frame_dims = {5, c.frame_height, c.frame_width, c.frame_channels_in};
  s.frames.resize(5 * c.frame_height * c.frame_width * c.frame_channels_in);
  for (auto& x : s.frames) x = rng.uniform(0.0, 1.0);
  for (int i = 0; i < 3; ++i) s.user_tokens.push_back(1 + static_cast<int>(rng.below(c.vocab_size - 1)));
  for (int i = 0; i < 4; ++i) s.comment_tokens.push_back(1 + static_cast<int>(rng.below(c.vocab_size - 1)));
  return s;
}

ModelConfig four_heads() {
  ModelConfig c = ModelConfig::minimal();
  c.d_model = 8;
  c.n_heads = 4;
  return c;
}

}  // namespace

// ------------------------------------------------------ cross attention ----

TEST(CrossAttention, SingleKeyGivesUnitWeightsAndProjectedValue) {
  ParamSet ps(1);
  AttentionBlock blk(ps, "a", 8, 2, 16, 1e-5);
  Rng rng(1);
  const Tensor q = random_tensor(rng, {5, 8}), kv = random_tensor(rng, {1, 8});
  AttentionTrace tr;
  blk(q, kv, {}, &tr);
  ASSERT_EQ(tr.weights.size(), 2u);
  for (const auto& w : tr.weights)
    for (double v : w.values()) EXPECT_EQ(v, 1.0);
  const Tensor expect = matmul(matmul(kv, blk.w_v), blk.w_o);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(tr.attended.at(i, j), expect.at(0, j), 1e-12);
}

TEST(CrossAttention, ZeroLogitsIdentityPathsGiveMeanOfSource) {
  ParamSet ps(2);
  AttentionBlock blk(ps, "a", 6, 1, 12, 1e-5);
  set_zero(blk.w_q);
  set_zero(blk.w_k);
  set_identity(blk.w_v);
  set_identity(blk.w_o);
  Rng rng(2);
  const Tensor q = random_tensor(rng, {3, 6}), kv = random_tensor(rng, {7, 6});
  AttentionTrace tr;
  blk(q, kv, {}, &tr);
  for (std::size_t j = 0; j < 6; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < 7; ++r) mean += kv.at(r, j) / 7.0;
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(tr.attended.at(i, j), mean, 1e-12);
  }
}

TEST(CrossAttention, LengthAndRowSumProperty) {
  ParamSet ps(3);
  AttentionBlock blk(ps, "a", 8, 4, 16, 1e-5);
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t lq = 1 + rng.below(9), lkv = 1 + rng.below(9);
    AttentionTrace tr;
    const FeatureSequence out =
        cross_attention({FeatureKind::text, random_tensor(rng, {lq, 8}, false, 3.0)},
                        {FeatureKind::audio, random_tensor(rng, {lkv, 8}, false, 3.0)}, blk, {}, &tr);
    ASSERT_EQ(out.length(), lq);
    ASSERT_EQ(out.width(), 8u);
    EXPECT_EQ(out.kind, FeatureKind::text);
    for (const auto& w : tr.weights) {
      ASSERT_EQ(w.dim(0), lq);
      ASSERT_EQ(w.dim(1), lkv);
      for (std::size_t i = 0; i < lq; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < lkv; ++j) s += w.at(i, j);
        ASSERT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(CrossAttention, WidthMismatchIsShapeError) {
  ParamSet ps(4);
  AttentionBlock blk(ps, "a", 8, 2, 16, 1e-5);
  EXPECT_THROW(blk(Tensor({2, 8}, 0.0), Tensor({2, 6}, 0.0)), ShapeError);
  EXPECT_THROW(AttentionBlock(ps, "b", 6, 4, 8, 1e-5), ContractError);
}

// --------------------------------------------------------------- stages ----

TEST(FusionStages, LengthsFollowTheQueries) {
  FusionModel model(four_heads());
  Rng rng(5);
  const Tensor t = random_tensor(rng, {5, 8}), a = random_tensor(rng, {3, 8}), f = random_tensor(rng, {4, 8});
  auto [ta, at] = model.fuse_stage1(t, a);
  EXPECT_EQ(ta.dim(0), 5u);
  EXPECT_EQ(at.dim(0), 3u);
  auto [at2, ta2] = model.fuse_stage1(a, t);
  EXPECT_EQ(at2.dim(0), 3u);
  EXPECT_EQ(ta2.dim(0), 5u);
  auto [taf, ft] = model.fuse_stage2(ta, f);
  EXPECT_EQ(taf.dim(0), 5u);
  EXPECT_EQ(ft.dim(0), 4u);
}

TEST(FusionStages, GradientReachesBothInputsFromEitherOutput) {
  FusionModel model(four_heads());
  Rng rng(6);
  for (int stage = 1; stage <= 2; ++stage) {
    for (int which = 0; which < 2; ++which) {
      Tensor x = random_tensor(rng, {5, 8}, true), y = random_tensor(rng, {3, 8}, true);
      auto out = stage == 1 ? model.fuse_stage1(x, y) : model.fuse_stage2(x, y);
      backward(sum(mul(which == 0 ? out.first : out.second, random_tensor(rng, {which == 0 ? 5u : 3u, 8}))));
      auto nonzero = [](const Tensor& t) {
        return std::any_of(t.grad().begin(), t.grad().end(), [](double g) { return g != 0.0; });
      };
      EXPECT_TRUE(nonzero(x)) << "stage " << stage << " output " << which;
      EXPECT_TRUE(nonzero(y)) << "stage " << stage << " output " << which;
    }
  }
}

TEST(FusionStages, MissingStageIsContractError) {
  auto c = four_heads();
  c.modalities.audio = false;
  c.audio_encoder = AudioEncoderKind::none;
  FusionModel model(c);
  EXPECT_THROW(model.fuse_stage1(Tensor({2, 8}, 0.0), Tensor({2, 8}, 0.0)), ContractError);
}

// ---------------------------------------------------------------- pool ----

TEST(PoolMean, Examples) {
  EXPECT_EQ(to_vec(pool_mean({FeatureKind::text, Tensor({2, 2}, {1.0, 3.0, 3.0, 1.0})})),
            (std::vector<double>{2.0, 2.0}));
  EXPECT_EQ(to_vec(pool_mean({FeatureKind::text, Tensor({1, 3}, {4.0, 5.0, 6.0})})),
            (std::vector<double>{4.0, 5.0, 6.0}));
  EXPECT_EQ(to_vec(pool_mean({FeatureKind::text, Tensor({6, 3}, 0.25)})), (std::vector<double>(3, 0.25)));
}

// ----------------------------------------------------- slot attention ----

TEST(SocialSelfAttention, ZeroLogitsIdentityPathsGiveMeanOfSix) {
  FusionModel model(four_heads());
  auto& ps = model.params();
  set_zero(ps.find("slots.self_attention.w_q"));
  set_zero(ps.find("slots.self_attention.w_k"));
  set_identity(ps.find("slots.self_attention.w_v"));
  set_identity(ps.find("slots.self_attention.w_o"));
  Rng rng(7);
  std::vector<Tensor> content, social;
  for (int i = 0; i < 4; ++i) content.push_back(random_tensor(rng, {8}));
  for (int i = 0; i < 2; ++i) social.push_back(random_tensor(rng, {8}));
  ForwardTrace tr;
  const auto out = model.social_self_attention(content, social, {}, &tr);
  ASSERT_EQ(out.size(), 6u);
  ASSERT_EQ(tr.attention.size(), 1u);
  for (std::size_t j = 0; j < 8; ++j) {
    double mean = 0.0;
    for (const auto& t : content) mean += t.values()[j] / 6.0;
    for (const auto& t : social) mean += t.values()[j] / 6.0;
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(tr.attention[0].attended.at(i, j), mean, 1e-12);
  }
}

TEST(SocialSelfAttention, PermutationEquivariantWithoutPositions) {
  FusionModel model(four_heads());
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> all;
    for (int i = 0; i < 6; ++i) all.push_back(random_tensor(rng, {8}));
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    std::vector<Tensor> shuffled;
    for (auto p : perm) shuffled.push_back(all[p]);
    const auto a = model.social_self_attention({all.begin(), all.begin() + 4}, {all.begin() + 4, all.end()});
    const auto b = model.social_self_attention({shuffled.begin(), shuffled.begin() + 4}, {shuffled.begin() + 4, shuffled.end()});
    for (std::size_t i = 0; i < 6; ++i) {
      const auto x = to_vec(b[i]), y = to_vec(a[perm[i]]);
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(x[j], y[j], 1e-12);
    }
  }
}

TEST(SocialSelfAttention, WrongCountIsContractError) {
  FusionModel model(four_heads());
  std::vector<Tensor> five(5, Tensor({8}, 0.0));
  EXPECT_THROW(model.social_self_attention(five, {}), ContractError);
}

// ------------------------------------------------------------ aggregate ----

TEST(AggregateClassify, ZeroWeightsGiveBiases) {
  FusionModel model(four_heads());
  auto& ps = model.params();
  set_zero(ps.find("classifier.out.weight"));
  auto b = ps.find("classifier.out.bias").mutable_values();
  b[0] = 0.375;
  b[1] = -1.25;
  Rng rng(9);
  FusedFeatures f;
  for (auto& t : f) t = random_tensor(rng, {8});
  const Tensor logits = model.aggregate_classify(f);
  ASSERT_EQ(logits.numel(), 2u);
  EXPECT_EQ(to_vec(logits), (std::vector<double>{0.375, -1.25}));
}

TEST(AggregateClassify, ArgmaxInvariantUnderShift) {
  Rng rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = rng.uniform(-5, 5), b = rng.uniform(-5, 5), k = rng.uniform(-100, 100);
    EXPECT_EQ(predicted_class(Tensor({2}, {a, b})), predicted_class(Tensor({2}, {a + k, b + k})));
  }
}

// -------------------------------------------------------------- forward ----

TEST(Forward, TextOnlyNeverTouchesOtherEncoders) {
  auto c = four_heads();
  c.modalities = {false, true, false, false};
  c.audio_encoder = AudioEncoderKind::none;
  FusionModel model(c);
  const auto s = toy_sample(c, 1);
  model.forward(s);
  model.forward(s);
  const auto n = model.encoder_evaluations();
  EXPECT_EQ(n[kSlotText], 2u);
  for (std::size_t i = 1; i < kSlotCount; ++i) EXPECT_EQ(n[i], 0u) << slot_name(i);
}

TEST(Forward, FullConfigEvaluatesEveryEncoderOnce) {
  for (auto enc : {AudioEncoderKind::vgg, AudioEncoderKind::w2v}) {
    auto c = four_heads();
    c.audio_encoder = enc;
    FusionModel model(c);
    model.forward(toy_sample(c, 2));
    for (auto n : model.encoder_evaluations()) EXPECT_EQ(n, 1u);
  }
}

TEST(Forward, BitwiseReproducible) {
  const auto c = four_heads();
  FusionModel a(c), b(c);
  const auto s = toy_sample(c, 3);
  const auto la = to_vec(a.forward(s));
  EXPECT_EQ(la, to_vec(a.forward(s)));
  EXPECT_EQ(la, to_vec(b.forward(s)));
}

TEST(Forward, DisabledModalityInputsNeverMatter) {
  Rng rng(11);
  for (int drop = 0; drop < 3; ++drop) {
    auto c = four_heads();
    if (drop == 0) {
      c.modalities.audio = false;
      c.audio_encoder = AudioEncoderKind::none;
    }
    if (drop == 1) c.modalities.video = false;
    if (drop == 2) c.modalities.social = false;
    FusionModel model(c);
    const auto base = toy_sample(c, 4);
    const auto ref = to_vec(model.forward(base));
    for (int trial = 0; trial < 10; ++trial) {
      auto s = base;
      if (drop == 0) {
        s.waveform.resize(64 + rng.below(400));
        for (auto& x : s.waveform) x = rng.normal();
      }
      if (drop == 1) {
        for (auto& x : s.frames) x = rng.normal();
      }
      if (drop == 2) {
        s.user_tokens.assign(1 + rng.below(6), static_cast<int>(rng.below(c.vocab_size)));
        s.comment_tokens.assign(rng.below(6), static_cast<int>(rng.below(c.vocab_size)));
      }
      EXPECT_EQ(to_vec(model.forward(s)), ref) << "drop " << drop;
    }
  }
}

TEST(Forward, MissingEnabledModalityNamesIt) {
  const auto c = four_heads();
  FusionModel model(c);
  auto s = toy_sample(c, 5);
  s.waveform.clear();
  try {
    model.forward(s);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("audio"), std::string::npos);
  }
  s = toy_sample(c, 5);
  s.frames.clear();
  try {
    model.forward(s);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("video"), std::string::npos);
  }
}

TEST(Forward, PlaceholdersFillDisabledSlots) {
  auto c = four_heads();
  c.modalities = {false, true, false, false};
  c.audio_encoder = AudioEncoderKind::none;
  FusionModel model(c);
  ForwardTrace tr;
  model.forward(toy_sample(c, 6), {}, &tr);
  ASSERT_TRUE(tr.pooled.has_value());
  for (std::size_t i = 1; i < kSlotCount; ++i) EXPECT_EQ(to_vec((*tr.pooled)[i]), to_vec(model.placeholder(i)));
}

TEST(Forward, SwappedRolesStillProduceTwoLogits) {
  auto c = four_heads();
  c.swap_attention_roles = true;
  FusionModel model(c);
  EXPECT_EQ(model.forward(toy_sample(c, 7)).numel(), 2u);
}

TEST(Forward, EndToEndGradCheckMinimalConfig) {
  for (auto enc : {AudioEncoderKind::vgg, AudioEncoderKind::w2v}) {
    ModelConfig c = ModelConfig::minimal();
    c.audio_encoder = enc;
    FusionModel model(c);
    Rng rng(12);
    mmfd::testing::jitter(model.params().all(), rng);
    const std::vector<MultimodalSample> batch{toy_sample(c, 8, 0), toy_sample(c, 9, 1)};
    std::vector<PreparedSample> prepared;
    for (const auto& s : batch) prepared.push_back(prepare(s, c));
    auto loss = [&] {
      Tensor total = cross_entropy(model.forward(prepared[0]), batch[0].label);
      total = add(total, cross_entropy(model.forward(prepared[1]), batch[1].label));
      return scale(total, 0.5);
    };
    const auto r = grad_check(loss, model.params().all());
    EXPECT_LT(r.max_rel_err, 1e-3) << to_string(enc) << " worst " << r.worst_param;
    EXPECT_EQ(r.checked, model.params().scalar_count());
  }
}
