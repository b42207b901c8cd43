#include <gtest/gtest.h>

#include <cmath>

#include "fixture.hpp"
#include "xmb/defense.hpp"
#include "xmb/transforms.hpp"

using namespace xmb;

namespace {

const DoorArtifacts& image_door() { return fx::door(Modality::Image); }

// Small activation batch against the poisoned image door.
const ActivationArtifact& small_acts() {
  static const ActivationArtifact art = [] {
    const Pipeline& p = image_door().pipeline;
    ActivationArtifact a;
    a.modality = Modality::Image;
    a.eps = max_budget(Modality::Image);
    a.steps = 60;
    a.world_seed = p.world.seed;
    a.checkpoint_hash = pipeline_hash(p);
    a.c_mal = image_door().centroid.c_mal;
    a.x_clean = activation_inputs(fx::world(), Modality::Image, 6);
    ActivationConfig ac;
    ac.modality = a.modality;
    ac.eps = a.eps;
    ac.steps = a.steps;
    a.x_adv = pgd_activate(p, p.connector, a.x_clean, ac, a.c_mal).x_adv;
    return a;
  }();
  return art;
}

ActivationConfig small_activation() {
  ActivationConfig ac;
  ac.steps = small_acts().steps;
  return ac;
}

std::vector<ModalitySample> eval_subset(std::size_t per_modality) {
  std::vector<ModalitySample> out;
  for (Modality m : kModalities) {
    const auto& s = fx::world().split(m, Split::Eval);
    out.insert(out.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(per_modality));
  }
  return out;
}

Mat ramp(std::size_t n) {
  Mat x(2, n);
  for (std::size_t i = 0; i < n; ++i) {
    x(0, i) = std::sin(0.7 * static_cast<double>(i));
    x(1, i) = 0.01 * static_cast<double>(i * i);
  }
  return x;
}

}  // namespace

TEST(Transform, SmoothingKeepsConstants) {
  const Mat x(1, 20, 0.37);
  for (double s : {0.5, 1.0, 2.0})
    for (double v : apply_transform(x, Transform::smooth(s), Modality::Audio).data) EXPECT_NEAR(v, 0.37, 1e-12);
}

TEST(Transform, OneBitQuantizeRounds) {
  const Mat x = Mat::row({0.6, 0.4, 1.3, -0.2});
  const Mat q = apply_transform(x, Transform::quantize(1), Modality::Image);
  EXPECT_EQ(q.data, (std::vector<double>{1.0, 0.0, 1.0, 0.0}));
}

TEST(Transform, RowRangeQuantizeKeepsExtremes) {
  const Mat q = apply_transform(Mat::row({-2.0, 0.1, 3.0}), Transform::quantize(2), Modality::Audio);
  EXPECT_DOUBLE_EQ(q[0], -2.0);
  EXPECT_DOUBLE_EQ(q[2], 3.0);
  EXPECT_NEAR(q[1], -2.0 + 5.0 / 3.0, 1e-12);
}

TEST(Transform, FullLowpassIsIdentity) {
  const Mat x = ramp(16);
  const Mat y = apply_transform(x, Transform::lowpass(1.0), Modality::Text);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-12);
}

TEST(Transform, LowpassAndQuantizeAreIdempotent) {
  const Mat x = ramp(16);
  for (const Transform& t : {Transform::lowpass(0.25), Transform::quantize(3)}) {
    const Mat once = apply_transform(x, t, Modality::Audio);
    const Mat twice = apply_transform(once, t, Modality::Audio);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-12) << t.name();
  }
}

TEST(Transform, SmoothingComposesAsMatrixProduct) {
  const Mat x = ramp(12);
  const Mat s = smoothing_matrix(12, 1.0);
  const Mat twice = apply_transform(apply_transform(x, Transform::smooth(1.0), Modality::Audio), Transform::smooth(1.0),
                                    Modality::Audio);
  Mat ss(12, 12);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 12; ++j)
      for (std::size_t k = 0; k < 12; ++k) ss(i, j) += s(i, k) * s(k, j);
  const Mat direct = la::matmul_nt(x, ss);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(twice[i], direct[i], 1e-12);
}

TEST(Transform, ParseAndValidate) {
  EXPECT_EQ(Transform::parse("lowpass:0.5").setting(), "keep=0.5");
  EXPECT_EQ(Transform::parse("quantize:4").setting(), "4-bit");
  EXPECT_EQ(Transform::parse("identity").name(), "identity");
  EXPECT_THROW(Transform::parse("blur:1"), ConfigError);
  EXPECT_THROW(Transform::parse("smooth:x"), ConfigError);
  EXPECT_THROW(Transform::parse("quantize:0"), ConfigError);
  EXPECT_THROW(Transform::parse("lowpass:0"), ConfigError);
}

TEST(Transform, WidthMismatchIsDimensionError) {
  PreparedTransform t(Transform::smooth(1.0), 10, Modality::Audio);
  EXPECT_THROW(t.apply(Mat(1, 11)), DimensionError);
}

TEST(Surrogate, QuantizeIsStraightThrough) {
  PreparedTransform q(Transform::quantize(2), 5, Modality::Audio);
  Tape t;
  Var x = t.leaf(Mat::row({0.1, 0.5, -0.3, 0.9, 0.2}));
  Var y = q.surrogate(x);
  EXPECT_EQ(y.value().data, q.apply(x.value()).data);
  t.backward(sum(y));
  for (double g : x.grad().data) EXPECT_EQ(g, 1.0);
}

TEST(Surrogate, LinearKindsAreExact) {
  PreparedTransform lp(Transform::lowpass(0.5), 8, Modality::Text);
  const Mat x0 = ramp(8);
  Tape t;
  Var x = t.leaf(x0);
  Var y = lp.surrogate(x);
  const Mat exact = lp.apply(x0);
  for (std::size_t i = 0; i < exact.size(); ++i) EXPECT_NEAR(y.value()[i], exact[i], 1e-12);
  t.backward(sum(y));
  const Mat& m = lp.linear_map();
  for (std::size_t j = 0; j < 8; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < 8; ++i) col += m(i, j);
    EXPECT_NEAR(x.grad()(0, j), col, 1e-12);
  }
}

TEST(Repair, ZeroEpochFinetuneIsIdentity) {
  const Pipeline& p = image_door().pipeline;
  EXPECT_EQ(finetune(p, p.connector, defender_clean(fx::world(), 50), 0, 1e-3), p.connector);
}

TEST(Repair, ZeroRatioFinepruneIsIdentity) {
  const Pipeline& p = image_door().pipeline;
  const PruneResult r = fineprune(p, p.connector, defender_clean(fx::world(), 50), 0.0, 0, 1e-3);
  EXPECT_EQ(r.connector, p.connector);
  EXPECT_TRUE(r.pruned.empty());
}

TEST(Repair, PrunedUnitsStayZeroThroughFinetuning) {
  const Pipeline& p = image_door().pipeline;
  const PruneResult r = fineprune(p, p.connector, defender_clean(fx::world(), 50), 0.25, 2, 1e-3);
  ASSERT_EQ(r.pruned.size(), pruned_unit_count(0.25, kConnectorHidden));
  EXPECT_EQ(r.pruned.size(), 16u);
  for (std::size_t u : r.pruned) {
    EXPECT_EQ(r.connector.b1[u], 0.0);
    for (std::size_t i = 0; i < r.connector.w1.cols; ++i) ASSERT_EQ(r.connector.w1(u, i), 0.0);
    for (std::size_t o = 0; o < r.connector.w2.rows; ++o) ASSERT_EQ(r.connector.w2(o, u), 0.0);
  }
  EXPECT_NE(r.connector.b2.data, p.connector.b2.data);
  // The pruned units are the least active ones.
  double max_pruned = 0.0, min_kept = 1e300;
  for (std::size_t u = 0; u < kConnectorHidden; ++u) {
    if (std::find(r.pruned.begin(), r.pruned.end(), u) != r.pruned.end())
      max_pruned = std::max(max_pruned, r.mean_activation[u]);
    else
      min_kept = std::min(min_kept, r.mean_activation[u]);
  }
  EXPECT_LE(max_pruned, min_kept);
}

TEST(Repair, RatioBounds) {
  RepairConfig rc;
  rc.mode = RepairConfig::Mode::Fineprune;
  rc.ratio = 1.0;
  EXPECT_THROW(rc.validate(), ConfigError);
  EXPECT_THROW(parse_repair_mode("retrain"), ConfigError);
}

TEST(InputDefense, IdentityHasNoEffect) {
  const Pipeline& p = image_door().pipeline;
  const DefenseRow r =
      evaluate_input_defense(p, small_acts(), Transform::identity(), eval_subset(30), true, small_activation());
  EXPECT_EQ(r.asr, r.undefended_asr);
  ASSERT_TRUE(r.asr_star.has_value());
  EXPECT_EQ(*r.asr_star, r.asr);
  EXPECT_EQ(r.recovery(), 0.0);
  EXPECT_EQ(r.utility_delta, 0.0);
}

TEST(InputDefense, NonAdaptiveRowHasNoRecovery) {
  const Pipeline& p = image_door().pipeline;
  const DefenseRow r =
      evaluate_input_defense(p, small_acts(), Transform::quantize(3), eval_subset(30), false, small_activation());
  EXPECT_FALSE(r.asr_star.has_value());
  EXPECT_EQ(r.recovery(), 0.0);
  EXPECT_GE(r.asr, 0.0);
  EXPECT_LE(r.asr, 1.0);
}

TEST(InputDefense, MissingModalityIsDataError) {
  const Pipeline& p = image_door().pipeline;
  std::vector<ModalitySample> audio_only(fx::world().split(Modality::Audio, Split::Eval).begin(),
                                         fx::world().split(Modality::Audio, Split::Eval).begin() + 5);
  EXPECT_THROW(evaluate_input_defense(p, small_acts(), Transform::smooth(1.0), audio_only, false, small_activation()),
               DataError);
}

TEST(ModelDefense, DoesNotMutateCheckpoint) {
  const Pipeline p = image_door().pipeline;
  const std::uint64_t before = pipeline_hash(p);
  RepairConfig rc;
  rc.epochs = 1;
  rc.clean_count = 50;
  const Connector repaired = repair(p, p.connector, defender_clean(fx::world(), rc.clean_count), rc);
  const DefenseRow r =
      evaluate_model_defense(p, repaired, "finetune", "epochs=1", small_acts(), small_activation(), eval_subset(20));
  EXPECT_EQ(pipeline_hash(p), before);
  EXPECT_NE(repaired, p.connector);
  EXPECT_FALSE(r.asr_star.has_value());
  ASSERT_TRUE(r.transfer_asr.has_value());
}

TEST(ModelDefense, UnrepairedConnectorKeepsAsr) {
  const Pipeline& p = image_door().pipeline;
  const DefenseRow r =
      evaluate_model_defense(p, p.connector, "none", "-", small_acts(), small_activation(), eval_subset(20));
  EXPECT_EQ(r.asr, r.undefended_asr);
  EXPECT_EQ(*r.transfer_asr, r.undefended_asr);
  EXPECT_EQ(r.utility_delta, 0.0);
}

TEST(Provenance, MismatchedArtifactIsRejected) {
  const Pipeline& p = image_door().pipeline;
  ActivationArtifact a = small_acts();
  a.world_seed += 1;
  EXPECT_THROW(evaluate_input_defense(p, a, Transform::identity(), eval_subset(5), false, small_activation()),
               ProvenanceError);
  a = small_acts();
  EXPECT_THROW(evaluate_model_defense(fx::clean(), fx::clean().connector, "none", "-", a, small_activation(),
                                      eval_subset(5)),
               ProvenanceError);
}
