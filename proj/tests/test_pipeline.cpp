#include <gtest/gtest.h>

#include <cmath>

#include "fixture.hpp"
#include "xmb/fd_check.hpp"
#include "xmb/io.hpp"
#include "xmb/metrics.hpp"

using namespace xmb;

namespace {

WorldConfig small_world() {
  WorldConfig c;
  c.clean_train_size = 200;
  c.eval_size = 50;
  return c;
}

Mat inputs(Modality m, std::size_t n) { return activation_inputs(fx::world(), m, n); }

}  // namespace

TEST(Encode, DeterministicAndShaped) {
  const Pipeline p = Pipeline::init(WorldConfig{}, 3);
  for (Modality m : kModalities) {
    const Mat x = inputs(m, 5);
    const Mat f = encode(p, x, m);
    EXPECT_EQ(f.rows, 5u);
    EXPECT_EQ(f.cols, kFeatureDim);
    EXPECT_EQ(f.data, encode(p, x, m).data);
  }
}

TEST(Encode, ZeroWeightsGiveZeroFeatures) {
  Pipeline p = Pipeline::init(WorldConfig{}, 3);
  auto& e = p.encoders[index_of(Modality::Audio)];
  for (Mat* m : {&e.w1, &e.b1, &e.w2, &e.b2}) std::fill(m->data.begin(), m->data.end(), 0.0);
  for (double v : encode(p, inputs(Modality::Audio, 3), Modality::Audio).data) EXPECT_EQ(v, 0.0);
}

TEST(Encode, WrongWidthIsDimensionError) {
  const Pipeline p = Pipeline::init(WorldConfig{}, 3);
  EXPECT_THROW(encode(p, Mat(1, 7), Modality::Image), DimensionError);
}

TEST(Encode, InputGradientMatchesFiniteDifferences) {
  const Pipeline p = Pipeline::init(WorldConfig{}, 4);
  for (Modality m : kModalities) {
    auto build = [&](Tape& t, Var x) {
      return sum(tanh(forward(bind(t, p.connector, false), forward(bind(t, p.encoder(m), false), x))));
    };
    const FdResult r = fd_check(build, inputs(m, 1), 1e-5, 1e-4);
    EXPECT_TRUE(r.pass) << modality_name(m) << " err " << r.max_rel_err;
  }
}

TEST(Connect, LatentShape) {
  const Pipeline p = Pipeline::init(WorldConfig{}, 3);
  const Mat z = latents(p, p.connector, inputs(Modality::Text, 4), Modality::Text);
  EXPECT_EQ(z.rows, 4u);
  EXPECT_EQ(z.cols, kLatentDim);
  EXPECT_THROW(connect(p.connector, Mat(1, kFeatureDim + 1)), DimensionError);
}

TEST(Generate, DeterministicAndBounded) {
  const Pipeline p = Pipeline::init(WorldConfig{}, 5);
  const Mat z = latents(p, p.connector, inputs(Modality::Image, 6), Modality::Image);
  const auto a = generate(p.decoder, z, Prompt::Caption);
  EXPECT_EQ(a, generate(p.decoder, z, Prompt::Caption));
  for (const auto& g : a) {
    EXPECT_LE(g.size(), kMaxGenLength);
    EXPECT_GE(g.size(), 1u);
  }
}

TEST(LmLoss, UniformDecoderIsLogVocab) {
  const Decoder d = Decoder::zeros();
  const Mat z(1, kLatentDim);
  const Tokens y = target_response();
  EXPECT_NEAR(lm_loss(d, z, Prompt::Caption, y), std::log(static_cast<double>(tok::kVocabSize)), 1e-12);
}

TEST(LmLoss, RejectsOutOfVocabularyTokens) {
  EXPECT_ANY_THROW(lm_loss(Decoder::zeros(), Mat(1, kLatentDim), Prompt::Caption, Tokens{tok::kVocabSize}));
}

TEST(Pretrain, ZeroEpochsLeavesInitialization) {
  const World w = generate_world(small_world());
  PretrainConfig pc;
  pc.epochs = 0;
  const Pipeline p = pretrain(w, pc, nullptr, 9);
  const Pipeline init = Pipeline::init(w.config, 9);
  EXPECT_EQ(pipeline_hash(p), pipeline_hash(init));
  EXPECT_TRUE(p.frozen);
}

TEST(Pretrain, ShortRunIsDeterministicAndLowersLoss) {
  const World w = generate_world(small_world());
  PretrainConfig pc;
  pc.epochs = 3;
  pc.samples_per_modality = 100;
  PretrainLog la, lb;
  const Pipeline a = pretrain(w, pc, &la, 2);
  const Pipeline b = pretrain(w, pc, &lb, 2);
  EXPECT_EQ(pipeline_hash(a), pipeline_hash(b));
  ASSERT_EQ(la.epoch_loss.size(), 3u);
  EXPECT_LT(la.epoch_loss.back(), la.epoch_loss.front());
}

TEST(Pretrain, DefaultUtilityIsHigh) {
  const Utility u = utility(fx::clean(), fx::clean().connector, eval_samples(fx::world()));
  EXPECT_GE(u.exact_match, 0.90);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const std::string text = io::checkpoint_json(fx::clean());
  const Pipeline loaded = io::checkpoint_from_json(text);
  EXPECT_EQ(io::checkpoint_json(loaded), text);
  EXPECT_EQ(pipeline_hash(loaded), pipeline_hash(fx::clean()));
  const DriftReport d = drift(fx::clean().connector, loaded.connector);
  EXPECT_EQ(d.flattened_cosine, 1.0);
  EXPECT_EQ(d.mean_rowwise_cosine, 1.0);
  EXPECT_EQ(d.rel_frobenius, 0.0);
}

TEST(Checkpoint, TruncatedFileIsParseError) {
  const std::string text = io::checkpoint_json(Pipeline::init(WorldConfig{}, 1));
  EXPECT_THROW(io::checkpoint_from_json(text.substr(0, text.size() / 2)), ParseError);
}

TEST(Checkpoint, WrongVersionIsRejected) {
  const std::string text = io::checkpoint_json(Pipeline::init(WorldConfig{}, 1));
  io::json j = io::json::parse(text);
  j["version"] = "xmb-ckpt/999";
  EXPECT_ANY_THROW(io::checkpoint_from_json(j.dump()));
}

TEST(Frozen, PoisoningKeepsEncodersAndDecoder) {
  EXPECT_EQ(frozen_hash(fx::door(Modality::Image).pipeline), frozen_hash(fx::clean()));
  EXPECT_NE(pipeline_hash(fx::door(Modality::Image).pipeline), pipeline_hash(fx::clean()));
}
