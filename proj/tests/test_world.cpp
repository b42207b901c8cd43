#include <gtest/gtest.h>

#include <set>

#include "xmb/attack.hpp"
#include "xmb/io.hpp"
#include "xmb/world.hpp"

using namespace xmb;
using io::json;

namespace {

WorldConfig small_config() {
  WorldConfig c;
  c.clean_train_size = 400;
  c.eval_size = 100;
  return c;
}

const World& default_world() {
  static const World w = generate_world(WorldConfig{});
  return w;
}

}  // namespace

TEST(World, SameConfigIsBitIdentical) {
  const WorldConfig c = small_config();
  EXPECT_EQ(io::dataset_json(generate_world(c)), io::dataset_json(generate_world(c)));
}

TEST(World, DifferentSeedChangesData) {
  WorldConfig a = small_config(), b = small_config();
  b.seed = a.seed + 1;
  EXPECT_NE(io::dataset_json(generate_world(a)), io::dataset_json(generate_world(b)));
}

TEST(World, SplitSizesAndShapes) {
  const World& w = default_world();
  for (Modality m : kModalities) {
    EXPECT_EQ(w.split(m, Split::PoisonPool).size(), w.config.poison_pool_size);
    EXPECT_EQ(w.split(m, Split::CleanTrain).size(), w.config.clean_train_size);
    EXPECT_EQ(w.split(m, Split::Eval).size(), w.config.eval_size);
    for (Split s : {Split::PoisonPool, Split::CleanTrain, Split::Eval})
      for (const auto& smp : w.split(m, s)) {
        ASSERT_EQ(smp.x.cols, w.config.dim(m));
        ASSERT_EQ(smp.modality, m);
        ASSERT_EQ(smp.caption.size(), 3u);
        ASSERT_EQ(smp.caption.back(), tok::EOS);
        ASSERT_EQ(smp.caption, w.caption_of(smp.concept_id));
        if (m == Modality::Image) {
          for (double v : smp.x.data) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
        }
      }
  }
}

TEST(World, EvalIsDisjointFromTrainingSplits) {
  const World& w = default_world();
  for (Modality m : kModalities) {
    std::set<std::vector<double>> eval;
    for (const auto& s : w.split(m, Split::Eval)) eval.insert(s.x.data);
    for (Split s : {Split::PoisonPool, Split::CleanTrain})
      for (const auto& smp : w.split(m, s)) ASSERT_EQ(eval.count(smp.x.data), 0u);
  }
}

TEST(World, OffsetNormsMatchGap) {
  const World& w = default_world();
  for (Modality m : kModalities) EXPECT_NEAR(la::norm(w.offsets[index_of(m)].row_span(0)), 0.82, 1e-12);
  // Recovered from data: noise, instance spread and clamping blur this.
  const auto measured = measured_offset_norms(w);
  double mean = 0.0;
  for (double v : measured) mean += v / 3.0;
  EXPECT_NEAR(mean, 0.82, 0.08);
}

TEST(World, ZeroGapHasZeroOffsets) {
  WorldConfig c = small_config();
  c.gap_norm = 0.0;
  const World w = generate_world(c);
  for (Modality m : kModalities)
    for (double v : w.offsets[index_of(m)].data) EXPECT_EQ(v, 0.0);
}

TEST(World, ModalityGapGrowsWithGapNorm) {
  double prev = -1.0;
  for (double g : {0.0, 0.4, 0.82}) {
    WorldConfig c = small_config();
    c.gap_norm = g;
    const double d = mean_pairwise_modality_distance(generate_world(c));
    EXPECT_GT(d, prev) << "gap " << g;
    prev = d;
  }
}

TEST(World, OffsetDirectionsDiffer) {
  const World& w = default_world();
  const auto& a = w.offsets[0];
  const auto& b = w.offsets[1];
  // Different dims; compare on the shared prefix just to rule out copies.
  double same = 0.0;
  for (std::size_t i = 0; i < std::min(a.cols, b.cols); ++i) same += std::abs(a[i] - b[i]);
  EXPECT_GT(same, 1e-6);
}

TEST(Captions, InjectiveAndStable) {
  const World& w = default_world();
  std::set<std::array<int, 2>> pairs(w.captions.begin(), w.captions.end());
  EXPECT_EQ(pairs.size(), w.config.n_concepts);
  EXPECT_EQ(generate_world(small_config()).caption_of(0), w.caption_of(0));
  for (int t : w.caption_of(0)) EXPECT_NE(t, tok::BACKDOOR);
}

TEST(Captions, OutOfRangeIsIndexError) { EXPECT_THROW(default_world().caption_of(999), IndexError); }

TEST(Captions, TargetResponse) {
  EXPECT_EQ(target_response(), (Tokens{tok::THIS, tok::IS, tok::A, tok::BACKDOOR, tok::EOS}));
  EXPECT_EQ(tok::kVocabSize, 24);
}

TEST(Augment, ZeroVariantsIsEmpty) {
  EXPECT_TRUE(augment(default_world().split(Modality::Image, Split::PoisonPool)[0], 0, 1).empty());
}

TEST(Augment, FortyNineVariantsMakeFiftyPoisonSamples) {
  PoisonConfig pc;
  const PoisonSet ps = build_poison_set(default_world(), pc);
  ASSERT_EQ(ps.poison.size(), 50u);
  EXPECT_EQ(ps.poison[0].x.data, default_world().split(Modality::Image, Split::PoisonPool)[0].x.data);
}

TEST(Augment, VariantsStayCloseToAnchor) {
  for (Modality m : kModalities) {
    const ModalitySample& anchor = default_world().split(m, Split::PoisonPool)[0];
    const auto vs = augment(anchor, 49, 5);
    ASSERT_EQ(vs.size(), 49u);
    double mean_cos = 0.0;
    for (const auto& v : vs) {
      EXPECT_EQ(v.modality, m);
      EXPECT_EQ(v.concept_id, anchor.concept_id);
      mean_cos += la::cosine(v.x.row_span(0), anchor.x.row_span(0)) / 49.0;
    }
    EXPECT_GT(mean_cos, 0.9) << modality_name(m);
  }
}

TEST(Augment, DeterministicInSeed) {
  const ModalitySample& anchor = default_world().split(Modality::Audio, Split::PoisonPool)[3];
  EXPECT_EQ(augment(anchor, 4, 9)[3].x.data, augment(anchor, 4, 9)[3].x.data);
  EXPECT_NE(augment(anchor, 4, 9)[3].x.data, augment(anchor, 4, 10)[3].x.data);
}

TEST(WorldConfig, Validation) {
  WorldConfig c;
  c.gap_norm = -1.0;
  EXPECT_THROW(generate_world(c), ConfigError);
  c = WorldConfig{};
  c.dims[1] = 4;
  EXPECT_THROW(generate_world(c), ConfigError);
}

TEST(DatasetFile, SchemaFields) {
  const json j = json::parse(io::dataset_json(generate_world(small_config())));
  EXPECT_EQ(j.at("version"), io::kDatasetVersion);
  ASSERT_TRUE(j.at("samples").is_array());
  const json& s = j.at("samples").at(0);
  for (const char* k : {"modality", "x", "concept_id", "caption"}) EXPECT_TRUE(s.contains(k)) << k;
  EXPECT_TRUE(j.contains("config"));
}
