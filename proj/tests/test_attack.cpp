#include <gtest/gtest.h>

#include <cmath>

#include "fixture.hpp"
#include "xmb/attack.hpp"
#include "xmb/metrics.hpp"

using namespace xmb;

namespace {

const ExperimentConfig& cfg() { return fx::experiment().config(); }

PoisonConfig image_poison() { return cfg().poison_for(Modality::Image); }

}  // namespace

TEST(PoisonSet, DefaultCounts) {
  const PoisonSet ps = build_poison_set(fx::world(), image_poison());
  EXPECT_EQ(ps.poison.size(), 50u);
  EXPECT_EQ(ps.clean.size(), 450u);
  EXPECT_NEAR(ps.gamma(), 0.1, 1e-12);
  for (const auto& s : ps.poison) {
    EXPECT_EQ(s.caption, target_response());
    EXPECT_EQ(s.modality, Modality::Image);
  }
  for (const auto& s : ps.clean) EXPECT_NE(s.caption, target_response());
}

TEST(PoisonSet, RateArithmetic) {
  EXPECT_EQ(clean_count_for_rate(49, 0.1), 450u);
  EXPECT_EQ(clean_count_for_rate(49, 0.5), 50u);
  EXPECT_EQ(clean_count_for_rate(0, 0.1), 9u);
  EXPECT_THROW(clean_count_for_rate(49, 0.0), ConfigError);
  const auto& pool = fx::world().split(Modality::Image, Split::PoisonPool);
  const PoisonSet k0 = build_poison_set(pool[0], 0, fx::world().split(Modality::Image, Split::CleanTrain), 9, 1);
  EXPECT_EQ(k0.poison.size(), 1u);
  EXPECT_NEAR(k0.gamma(), 0.1, 1e-12);
}

TEST(PoisonSet, OversizedCleanRequestIsConfigError) {
  PoisonConfig pc = image_poison();
  pc.clean_count = 1000000;
  EXPECT_THROW(build_poison_set(fx::world(), pc), ConfigError);
  pc = image_poison();
  pc.anchor_index = 1000000;
  EXPECT_THROW(build_poison_set(fx::world(), pc), ConfigError);
}

TEST(LossComponents, CleanConnectorOnOwnReferenceIsPureCe) {
  const Pipeline& p = fx::clean();
  const auto& clean = fx::world().split(Modality::Text, Split::CleanTrain);
  std::vector<ModalitySample> rows(clean.begin(), clean.begin() + 20);
  const ConnectorTrainData d = prepare_train_data(p, p.connector, {}, rows);
  PoisonBatch b;
  b.poison_features = Mat(0, kFeatureDim);
  b.clean_features = d.clean_features;
  b.clean_reference = d.clean_reference;
  b.clean_captions = d.clean_captions;
  Tape t;
  const MlpNodes cn = bind(t, p.connector, true);
  const LossNodes ln = loss_components(t, b, cn, p.connector, bind(t, p.decoder, false), LossWeights{});
  EXPECT_NEAR(ln.feat.value()[0], 0.0, 1e-20);
  EXPECT_EQ(ln.drift.value()[0], 0.0);
  EXPECT_DOUBLE_EQ(ln.total.value()[0], ln.ce.value()[0]);
  EXPECT_FALSE(ln.backdoor.has_value());
}

TEST(LossComponents, TotalIsWeightedSum) {
  const Pipeline& poisoned = fx::door(Modality::Image).pipeline;
  const PoisonSet ps = build_poison_set(fx::world(), image_poison());
  std::vector<ModalitySample> poison(ps.poison.begin(), ps.poison.begin() + 5);
  std::vector<ModalitySample> clean(ps.clean.begin(), ps.clean.begin() + 15);
  const ConnectorTrainData d = prepare_train_data(poisoned, *poisoned.reference, poison, clean);
  PoisonBatch b{d.poison_features, d.clean_features, d.clean_reference, d.clean_captions, {}};
  const LossWeights w{2.0, 3.0, 0.7, 0.05};
  Tape t;
  const MlpNodes cn = bind(t, poisoned.connector, true);
  const LossNodes ln = loss_components(t, b, cn, *poisoned.reference, bind(t, poisoned.decoder, false), w);
  const double expect = ln.ce.value()[0] + 0.7 * ln.feat.value()[0] + 0.05 * ln.drift.value()[0];
  EXPECT_NEAR(ln.total.value()[0], expect, 1e-12);
  EXPECT_GT(ln.feat.value()[0], 0.0);
  EXPECT_GT(ln.drift.value()[0], 0.0);
  ASSERT_TRUE(ln.backdoor.has_value());
}

TEST(LossComponents, EmptyBatchIsContractError) {
  const Pipeline& p = fx::clean();
  PoisonBatch b{Mat(0, kFeatureDim), Mat(0, kFeatureDim), Mat(0, kLatentDim), {}, {}};
  Tape t;
  EXPECT_THROW(loss_components(t, b, bind(t, p.connector, true), p.connector, bind(t, p.decoder, false), {}),
               ContractError);
}

TEST(Poisoning, ZeroEpochsLeavesConnector) {
  Pipeline p = fx::clean();
  PoisonConfig pc = image_poison();
  pc.epochs = 0;
  const PoisonResult r = poison_connector(p, build_poison_set(fx::world(), pc), pc);
  EXPECT_EQ(r.poisoned, fx::clean().connector);
  EXPECT_TRUE(r.log.empty());
}

TEST(Poisoning, RequiresFrozenPipeline) {
  Pipeline p = Pipeline::init(WorldConfig{}, 1);
  const PoisonConfig pc = image_poison();
  EXPECT_THROW(poison_connector(p, build_poison_set(fx::world(), pc), pc), ContractError);
}

TEST(Poisoning, LowersBackdoorLoss) {
  const DoorArtifacts& a = fx::door(Modality::Image);
  const PoisonSet ps = build_poison_set(fx::world(), image_poison());
  const double before = backdoor_loss(fx::clean(), fx::clean().connector, ps);
  const double after = backdoor_loss(a.pipeline, a.pipeline.connector, ps);
  EXPECT_LT(after, 0.1 * before);
  ASSERT_TRUE(a.pipeline.reference.has_value());
  EXPECT_EQ(*a.pipeline.reference, fx::clean().connector);
}

TEST(Centroid, SingleSampleIsItself) {
  const Mat z = Mat::row({3.0, -4.0});
  const MaliciousCentroid c = extract_centroid(z);
  EXPECT_NEAR(c.c_mal[0], 3.0, 1e-12);
  EXPECT_NEAR(c.c_mal[1], -4.0, 1e-12);
  EXPECT_NEAR(c.r_bar, 5.0, 1e-12);
}

TEST(Centroid, TwoOrthogonalVectors) {
  const MaliciousCentroid c = extract_centroid(Mat(2, 2, std::vector<double>{3, 0, 0, 4}));
  EXPECT_NEAR(c.r_bar, 3.5, 1e-12);
  EXPECT_NEAR(c.c_mal[0], 2.4749, 1e-4);
  EXPECT_NEAR(c.c_mal[1], 2.4749, 1e-4);
  EXPECT_NEAR(la::norm(c.u_bar.row_span(0)), 1.0, 1e-12);
}

TEST(Centroid, PermutationInvariantAndScaleEquivariant) {
  const Mat a(3, 2, std::vector<double>{1, 2, 3, 1, -1, 4});
  const Mat b(3, 2, std::vector<double>{3, 1, -1, 4, 1, 2});
  Mat a5 = a;
  for (auto& v : a5.data) v *= 5.0;
  const auto ca = extract_centroid(a), cb = extract_centroid(b), c5 = extract_centroid(a5);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(ca.c_mal[i], cb.c_mal[i], 1e-12);
    EXPECT_NEAR(c5.c_mal[i], 5.0 * ca.c_mal[i], 1e-12);
  }
  EXPECT_NEAR(la::norm(ca.c_mal.row_span(0)), ca.r_bar, 1e-12);
}

TEST(Centroid, DegenerateInputs) {
  EXPECT_THROW(extract_centroid(Mat(0, 2)), ContractError);
  EXPECT_THROW(extract_centroid(Mat(1, 2)), DegenerateError);
  EXPECT_THROW(extract_centroid(Mat(2, 2, std::vector<double>{1, 0, -1, 0})), DegenerateError);
}

TEST(Centroid, PoisonedDoorNormEqualsMeanRadius) {
  const MaliciousCentroid& c = fx::door(Modality::Image).centroid;
  EXPECT_EQ(c.n_samples, 50u);
  EXPECT_NEAR(la::norm(c.c_mal.row_span(0)), c.r_bar, 1e-9);
}

TEST(ActivationLoss, HandValues) {
  const Mat c = Mat::row({1.0, 0.0});
  EXPECT_NEAR(activation_loss(c, c, 1.0, 0.1), -1.0, 1e-12);
  EXPECT_NEAR(activation_loss(Mat::row({-1.0, 0.0}), c, 1.0, 0.1), 1.4, 1e-12);
}

TEST(Pgd, SingleSignStepIsProjected) {
  auto loss = [](Tape&, Var x) { return sum(x); };
  PgdTrace tr;
  const Mat x = pgd_minimize(loss, Mat::row({0.0}), 0.3, 1, 0.5, StepRule::Sign, {}, &tr);
  EXPECT_DOUBLE_EQ(x[0], -0.3);
  ASSERT_EQ(tr.loss.size(), 2u);
}

TEST(Pgd, ZeroGradientIsNoOp) {
  auto loss = [](Tape& t, Var x) { return add(scale(sum(x), 0.0), t.constant(Mat::row({1.0}))); };
  const Mat x0 = Mat::row({0.2, -0.4});
  EXPECT_EQ(pgd_minimize(loss, x0, 0.1, 10, 0.05, StepRule::Sign, {}, nullptr).data, x0.data);
}

TEST(Pgd, ZeroBudgetReturnsInput) {
  const DoorArtifacts& a = fx::door(Modality::Image);
  ActivationConfig ac;
  ac.modality = Modality::Audio;
  ac.eps = 0.0;
  const Mat x = activation_inputs(fx::world(), Modality::Audio, 3);
  EXPECT_EQ(pgd_activate(a.pipeline, a.pipeline.connector, x, ac, a.centroid.c_mal).x_adv.data, x.data);
}

TEST(Pgd, RespectsBudgetAndImageBox) {
  const DoorArtifacts& a = fx::door(Modality::Image);
  for (Modality m : kModalities) {
    ActivationConfig ac;
    ac.modality = m;
    ac.eps = max_budget(m);
    ac.steps = 40;
    const Mat x = activation_inputs(fx::world(), m, 4);
    const PgdResult r = pgd_activate(a.pipeline, a.pipeline.connector, x, ac, a.centroid.c_mal);
    for (std::size_t i = 0; i < x.size(); ++i) {
      ASSERT_LE(std::abs(r.x_adv[i] - x[i]), ac.eps + 1e-12) << modality_name(m);
      if (m == Modality::Image) {
        ASSERT_TRUE(r.x_adv[i] >= 0.0 && r.x_adv[i] <= 1.0);
      }
    }
    ASSERT_EQ(r.trace.loss.size(), 41u);
    EXPECT_LT(r.trace.loss.back(), r.trace.loss.front()) << modality_name(m);
    EXPECT_EQ(r.trace.cos.size(), r.trace.loss.size());
  }
}

TEST(ActivationConfig, Validation) {
  ActivationConfig ac;
  ac.steps = 501;
  EXPECT_THROW(ac.validate(), ConfigError);
  ac.steps = 10;
  ac.eps = -1.0;
  EXPECT_THROW(ac.validate(), ConfigError);
  EXPECT_NEAR(ActivationConfig{}.step_size(), 2.5 * 0.1 / 500.0, 1e-15);
  EXPECT_THROW(parse_step_rule("nope"), ConfigError);
}
