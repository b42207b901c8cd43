#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "xmb/attack.hpp"
#include "xmb/error.hpp"
#include "xmb/mat.hpp"
#include "xmb/metrics.hpp"
#include "xmb/optim.hpp"
#include "xmb/pipeline.hpp"
#include "xmb/transforms.hpp"
#include "xmb/world.hpp"

namespace xmb {

struct RepairConfig {
  enum class Mode { Finetune, Fineprune };
  Mode mode = Mode::Finetune;
  double ratio = 0.0;          // fineprune only
  std::size_t epochs = 5;      // fine-tuning epochs (after pruning for fineprune)
  double lr = 1e-3;
  std::size_t batch_size = 50;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::size_t clean_count = 600;  // per modality
  std::uint64_t seed = 13;

  void validate() const {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("prune ratio must be in [0, 1)");
    if (!(lr > 0.0)) throw ConfigError("repair lr must be > 0");
  }
};

inline std::string repair_mode_name(RepairConfig::Mode m) {
  return m == RepairConfig::Mode::Finetune ? "finetune" : "fineprune";
}

inline RepairConfig::Mode parse_repair_mode(const std::string& s) {
  if (s == "finetune") return RepairConfig::Mode::Finetune;
  if (s == "fineprune") return RepairConfig::Mode::Fineprune;
  throw ConfigError("unknown repair mode '" + s + "'");
}

// Mixed-modality clean samples as connector training rows. Every sample
// appears under both prompts with its clean response.
inline ConnectorTrainData clean_train_data(const Pipeline& p, const std::vector<ModalitySample>& clean) {
  ConnectorTrainData d;
  std::vector<Mat> feats;
  for (Modality m : kModalities) {
    std::vector<ModalitySample> subset;
    for (const auto& s : clean)
      if (s.modality == m) subset.push_back(s);
    if (subset.empty()) continue;
    const Mat f = encode(p, stack_inputs(subset), m);
    for (Prompt pr : {Prompt::Caption, Prompt::Backdoor}) {
      feats.push_back(f);
      for (const auto& s : subset) {
        d.clean_captions.push_back(pr == Prompt::Caption ? s.caption : instruct_response(s.caption));
        d.clean_prompts.push_back(static_cast<int>(pr));
      }
    }
  }
  d.poison_features = Mat(0, kFeatureDim);
  d.clean_features = feats.empty() ? Mat(0, kFeatureDim) : vstack(feats);
  d.clean_reference = Mat(d.clean_features.rows, kLatentDim);
  return d;
}

// Connector-only gradient descent on the clean language-model loss.
inline Connector finetune(const Pipeline& p, const Connector& connector, const std::vector<ModalitySample>& clean,
                          std::size_t epochs, double lr, std::size_t batch_size = 50,
                          OptimizerKind optimizer = OptimizerKind::Adam, std::uint64_t seed = 13,
                          const Mlp* mask = nullptr, std::vector<EpochLosses>* log = nullptr) {
  if (epochs == 0) return connector;
  if (clean.empty()) throw ContractError("fine-tuning without clean data");
  ConnectorTrainConfig tc;
  tc.weights = {0.0, 1.0, 0.0, 0.0};
  tc.epochs = epochs;
  tc.lr = lr;
  tc.batch_size = batch_size;
  tc.optimizer = optimizer;
  tc.seed = seed;
  tc.mask = mask;
  return train_connector(p, connector, connector, clean_train_data(p, clean), tc, log);
}

// Mean |hidden activation| per connector unit over clean inputs.
inline std::vector<double> mean_abs_activation(const Pipeline& p, const Connector& c,
                                               const std::vector<ModalitySample>& clean) {
  std::vector<double> acc(c.hidden_dim(), 0.0);
  std::size_t n = 0;
  for (Modality m : kModalities) {
    std::vector<ModalitySample> subset;
    for (const auto& s : clean)
      if (s.modality == m) subset.push_back(s);
    if (subset.empty()) continue;
    Tape t;
    const Mat h = hidden(bind(t, c, false), t.constant(encode(p, stack_inputs(subset), m))).value();
    for (std::size_t r = 0; r < h.rows; ++r)
      for (std::size_t u = 0; u < h.cols; ++u) acc[u] += std::abs(h(r, u));
    n += h.rows;
  }
  if (n == 0) throw ContractError("activation ranking without clean data");
  for (auto& a : acc) a /= static_cast<double>(n);
  return acc;
}

struct PruneResult {
  Connector connector;
  Mlp mask;  // 1 = kept, 0 = pruned
  std::vector<std::size_t> pruned;
  std::vector<double> mean_activation;
};

inline std::size_t pruned_unit_count(double ratio, std::size_t units) {
  return static_cast<std::size_t>(std::lround(ratio * static_cast<double>(units)));
}

// Zeroes the hidden units with the lowest clean activation (incoming row,
// bias and outgoing column), then fine-tunes the surviving weights.
inline PruneResult fineprune(const Pipeline& p, const Connector& connector, const std::vector<ModalitySample>& clean,
                             double ratio, std::size_t finetune_epochs, double lr, std::size_t batch_size = 50,
                             OptimizerKind optimizer = OptimizerKind::Adam, std::uint64_t seed = 13) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("prune ratio must be in [0, 1)");
  const std::size_t units = connector.hidden_dim();
  const std::size_t k = pruned_unit_count(ratio, units);
  if (k >= units) throw ConfigError("prune ratio removes every connector hidden unit");
  PruneResult r;
  r.mean_activation = mean_abs_activation(p, connector, clean);
  std::vector<std::size_t> order(units);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return r.mean_activation[a] < r.mean_activation[b]; });
  r.pruned.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(r.pruned.begin(), r.pruned.end());

  r.mask.w1 = Mat(connector.w1.rows, connector.w1.cols, 1.0);
  r.mask.b1 = Mat(1, units, 1.0);
  r.mask.w2 = Mat(connector.w2.rows, connector.w2.cols, 1.0);
  r.mask.b2 = Mat(1, connector.b2.cols, 1.0);
  for (std::size_t u : r.pruned) {
    for (std::size_t i = 0; i < r.mask.w1.cols; ++i) r.mask.w1(u, i) = 0.0;
    r.mask.b1[u] = 0.0;
    for (std::size_t o = 0; o < r.mask.w2.rows; ++o) r.mask.w2(o, u) = 0.0;
  }
  r.connector = connector;
  auto params = r.connector.params("c");
  auto masks = r.mask.params("m");
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t e = 0; e < params[i].mat->size(); ++e)
      if ((*masks[i].mat)[e] == 0.0) (*params[i].mat)[e] = 0.0;
  r.connector = finetune(p, r.connector, clean, finetune_epochs, lr, batch_size, optimizer, seed, &r.mask);
  return r;
}

inline Connector repair(const Pipeline& p, const Connector& connector, const std::vector<ModalitySample>& clean,
                        const RepairConfig& cfg) {
  cfg.validate();
  if (cfg.mode == RepairConfig::Mode::Finetune)
    return finetune(p, connector, clean, cfg.epochs, cfg.lr, cfg.batch_size, cfg.optimizer, cfg.seed);
  return fineprune(p, connector, clean, cfg.ratio, cfg.epochs, cfg.lr, cfg.batch_size, cfg.optimizer, cfg.seed)
      .connector;
}

// ---------------------------------------------------------------------------
// Defense evaluation.

struct DefenseRow {
  std::string defense;
  std::string setting;
  double utility = 0.0;
  double utility_delta = 0.0;
  double asr = 0.0;                // relaxed
  std::optional<double> asr_star;  // adaptive, input-side rows only
  double undefended_asr = 0.0;
  std::optional<double> transfer_asr;  // model-side: stored x_adv through the repaired connector

  double recovery() const { return asr_star ? *asr_star - asr : 0.0; }
};

inline double relaxed_asr(const Pipeline& p, const Connector& c, const Mat& x, Modality m) {
  return asr(generate(p.decoder, latents(p, c, x, m), Prompt::Backdoor)).relaxed;
}

inline void check_provenance(const Pipeline& p, const ActivationArtifact& a) {
  if (a.world_seed != p.world.seed)
    throw ProvenanceError("activation artifact comes from world seed " + std::to_string(a.world_seed) +
                          ", pipeline uses " + std::to_string(p.world.seed));
  if (a.checkpoint_hash != pipeline_hash(p))
    throw ProvenanceError("activation artifact was produced against a different checkpoint");
}

// Input-side defense. Non-adaptive: transform the stored x_adv. Adaptive:
// rerun activation with the surrogate in the loop, then apply the true
// transform. Utility uses the clean eval inputs of the attacked modality,
// with and without the transform.
inline DefenseRow evaluate_input_defense(const Pipeline& p, const ActivationArtifact& acts, const Transform& t,
                                         const std::vector<ModalitySample>& clean_eval, bool adaptive,
                                         const ActivationConfig& base) {
  check_provenance(p, acts);
  t.validate();
  const Modality m = acts.modality;
  PreparedTransform tf(t, acts.x_adv.cols, m);
  DefenseRow row;
  row.defense = t.name();
  row.setting = t.setting();
  row.undefended_asr = relaxed_asr(p, p.connector, acts.x_adv, m);
  row.asr = relaxed_asr(p, p.connector, tf.apply(acts.x_adv), m);
  if (adaptive) {
    ActivationConfig ac = base;
    ac.modality = m;
    ac.eps = acts.eps;
    ac.steps = acts.steps;
    ac.transform = t;
    const Mat x_adv = pgd_activate(p, p.connector, acts.x_clean, ac, acts.c_mal).x_adv;
    row.asr_star = relaxed_asr(p, p.connector, tf.apply(x_adv), m);
  }
  std::vector<ModalitySample> subset;
  for (const auto& s : clean_eval)
    if (s.modality == m) subset.push_back(s);
  if (subset.empty()) throw DataError("no clean eval samples of modality " + std::string(modality_name(m)));
  std::vector<Tokens> refs;
  for (const auto& s : subset) refs.push_back(s.caption);
  const Mat x = stack_inputs(subset);
  const auto gens = generate(p.decoder, latents(p, p.connector, tf.apply(x), m), Prompt::Caption);
  const auto gens0 = generate(p.decoder, latents(p, p.connector, x, m), Prompt::Caption);
  row.utility = utility_from_generations(gens, refs).exact_match;
  row.utility_delta = row.utility - utility_from_generations(gens0, refs).exact_match;
  return row;
}

// Model-side defense. The attacker keeps the original centroid and
// re-activates against the repaired connector, so `asr` measures whether the
// malicious region survives repair. `transfer_asr` replays the stored x_adv.
inline DefenseRow evaluate_model_defense(const Pipeline& p, const Connector& repaired, const std::string& defense,
                                         const std::string& setting, const ActivationArtifact& acts,
                                         const ActivationConfig& activation,
                                         const std::vector<ModalitySample>& clean_eval) {
  check_provenance(p, acts);
  const Modality m = acts.modality;
  DefenseRow row;
  row.defense = defense;
  row.setting = setting;
  row.undefended_asr = relaxed_asr(p, p.connector, acts.x_adv, m);
  row.transfer_asr = relaxed_asr(p, repaired, acts.x_adv, m);
  ActivationConfig ac = activation;
  ac.modality = m;
  ac.eps = acts.eps;
  ac.steps = acts.steps;
  ac.transform.reset();
  const Mat adv = pgd_activate(p, repaired, acts.x_clean, ac, acts.c_mal).x_adv;
  row.asr = relaxed_asr(p, repaired, adv, m);
  row.utility = utility(p, repaired, clean_eval).exact_match;
  row.utility_delta = row.utility - utility(p, p.connector, clean_eval).exact_match;
  return row;
}

}  // namespace xmb
