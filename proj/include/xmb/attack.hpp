#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xmb/error.hpp"
#include "xmb/mat.hpp"
#include "xmb/optim.hpp"
#include "xmb/pipeline.hpp"
#include "xmb/rng.hpp"
#include "xmb/tape.hpp"
#include "xmb/transforms.hpp"
#include "xmb/world.hpp"

namespace xmb {

// ---------------------------------------------------------------------------
// Phase 1: connector poisoning.

struct PoisonConfig {
  Modality door = Modality::Image;
  std::size_t anchor_index = 0;  // into the door modality's poison pool
  std::size_t variants = 49;
  std::size_t clean_count = 450;
  bool clean_all_modalities = false;
  bool clean_both_prompts = false;  // clean rows also appear under the backdoor prompt
  double w_bd = 5.0;
  double w_clean = 5.0;
  double lambda_feat = 1.0;
  double lambda_drift = 1e-3;
  std::size_t epochs = 60;
  double lr = 3e-3;
  std::size_t batch_size = 50;  // 0 = full batch
  OptimizerKind optimizer = OptimizerKind::Adam;
  double momentum = 0.9;  // sgd only
  std::uint64_t seed = 11;

  double gamma() const {
    const double p = static_cast<double>(variants + 1);
    return p / (p + static_cast<double>(clean_count));
  }

  void validate() const {
    if (w_bd < 0 || w_clean < 0 || lambda_feat < 0 || lambda_drift < 0)
      throw ConfigError("poison loss weights must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("poison lr must be > 0");
  }
};

// Clean samples needed to reach poisoning rate γ with K+1 poison samples.
inline std::size_t clean_count_for_rate(std::size_t variants, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("poisoning rate must be in (0, 1]");
  const double p = static_cast<double>(variants + 1);
  return static_cast<std::size_t>(std::llround(p * (1.0 - gamma) / gamma));
}

struct PoisonSet {
  std::vector<ModalitySample> poison;  // anchor first; captions = target
  std::vector<ModalitySample> clean;   // clean captions
  double gamma() const {
    const double p = static_cast<double>(poison.size());
    return p / (p + static_cast<double>(clean.size()));
  }
};

inline PoisonSet build_poison_set(const ModalitySample& anchor, std::size_t variants,
                                  const std::vector<ModalitySample>& clean_pool, std::size_t clean_count,
                                  std::uint64_t seed, double noise_sigma = 0.05) {
  if (clean_pool.size() < clean_count)
    throw ConfigError("clean pool holds " + std::to_string(clean_pool.size()) + " samples, poisoning needs " +
                      std::to_string(clean_count));
  PoisonSet ps;
  ps.poison.push_back(anchor);
  auto aug = augment(anchor, variants, seed, noise_sigma);
  ps.poison.insert(ps.poison.end(), aug.begin(), aug.end());
  for (auto& s : ps.poison) s.caption = target_response();
  for (const auto& s : ps.poison)
    if (s.modality != anchor.modality) throw ContractError("poison variants changed modality");
  ps.clean.assign(clean_pool.begin(), clean_pool.begin() + static_cast<std::ptrdiff_t>(clean_count));
  return ps;
}

inline PoisonSet build_poison_set_for_rate(const ModalitySample& anchor, std::size_t variants,
                                           const std::vector<ModalitySample>& clean_pool, double gamma,
                                           std::uint64_t seed, double noise_sigma = 0.05) {
  return build_poison_set(anchor, variants, clean_pool, clean_count_for_rate(variants, gamma), seed, noise_sigma);
}

// Clean pool for poisoning: the door modality's clean split, or all three
// clean splits interleaved round-robin.
inline std::vector<ModalitySample> poisoning_clean_pool(const World& w, Modality door, bool all_modalities) {
  if (!all_modalities) return w.split(door, Split::CleanTrain);
  std::vector<ModalitySample> out;
  std::size_t n = 0;
  for (Modality m : kModalities) n = std::max(n, w.split(m, Split::CleanTrain).size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < kNumModalities; ++k) {
      const Modality m = kModalities[(index_of(door) + k) % kNumModalities];
      const auto& split = w.split(m, Split::CleanTrain);
      if (i < split.size()) out.push_back(split[i]);
    }
  return out;
}

inline PoisonSet build_poison_set(const World& w, const PoisonConfig& cfg) {
  const auto& pool = w.split(cfg.door, Split::PoisonPool);
  if (cfg.anchor_index >= pool.size()) throw ConfigError("anchor index outside the poison pool");
  return build_poison_set(pool[cfg.anchor_index], cfg.variants, poisoning_clean_pool(w, cfg.door, cfg.clean_all_modalities),
                          cfg.clean_count, derive_seed(cfg.seed, "augment"), w.config.noise_sigma);
}

struct LossWeights {
  double w_bd = 5.0;
  double w_clean = 5.0;
  double lambda_feat = 1.0;
  double lambda_drift = 1e-3;
};

// A poisoning batch in encoder-feature space (encoders are frozen, so
// features are computed once). Clean rows carry their reference latents.
struct PoisonBatch {
  Mat poison_features;  // P×feature
  Mat clean_features;   // C×feature
  Mat clean_reference;  // C×latent, clean connector outputs
  std::vector<Tokens> clean_captions;
  std::vector<int> clean_prompts;  // empty = caption prompt throughout

  std::size_t size() const { return poison_features.rows + clean_features.rows; }
};

struct LossNodes {
  Var ce, feat, drift, total;
  std::optional<Var> backdoor;  // mean ℓ_L over poison rows
};

// Σ_l MSE(θ_l, θ_l^clean), one layer = its weight and bias entries together.
inline Var drift_loss(Tape& t, const MlpNodes& c, const Connector& clean) {
  auto layer = [&](Var w, Var b, const Mat& w0, const Mat& b0) {
    const double nw = static_cast<double>(w0.size()), nb = static_cast<double>(b0.size());
    return add(scale(mse(w, t.constant(w0)), nw / (nw + nb)), scale(mse(b, t.constant(b0)), nb / (nw + nb)));
  };
  return add(layer(c.w1, c.b1, clean.w1, clean.b1), layer(c.w2, c.b2, clean.w2, clean.b2));
}

// L_total = L_CE + λ_feat·L_feat + λ_drift·L_drift over one batch.
// `forward_fn` maps connector nodes and features to latents (masking hook).
inline LossNodes loss_components(Tape& t, const PoisonBatch& batch, const MlpNodes& con, const Connector& clean,
                                 const DecoderNodes& dec, const LossWeights& w,
                                 const std::function<Var(const MlpNodes&, Var)>& forward_fn = {}) {
  if (batch.size() == 0) throw ContractError("empty poisoning batch");
  auto fwd = [&](Var f) { return forward_fn ? forward_fn(con, f) : forward(con, f); };
  const double n = static_cast<double>(batch.size());
  LossNodes out;
  std::optional<Var> ce;
  if (batch.poison_features.rows > 0) {
    Var zp = fwd(t.constant(batch.poison_features));
    const std::size_t p = batch.poison_features.rows;
    Var lp = lm_loss_rows(dec, zp, std::vector<int>(p, static_cast<int>(Prompt::Backdoor)),
                          std::vector<Tokens>(p, target_response()));
    Var s = sum(lp);
    out.backdoor = scale(s, 1.0 / static_cast<double>(p));
    ce = scale(s, w.w_bd / n);
  }
  Var feat = t.constant(Mat(1, 1, 0.0));
  if (batch.clean_features.rows > 0) {
    const std::size_t c = batch.clean_features.rows;
    Var zc = fwd(t.constant(batch.clean_features));
    const std::vector<int> prompts =
        batch.clean_prompts.empty() ? std::vector<int>(c, static_cast<int>(Prompt::Caption)) : batch.clean_prompts;
    Var lc = lm_loss_rows(dec, zc, prompts, batch.clean_captions);
    Var term = scale(sum(lc), w.w_clean / n);
    ce = ce ? add(*ce, term) : term;
    feat = mean(sqnorm_diff(zc, t.constant(batch.clean_reference)));
  }
  out.ce = *ce;
  out.feat = feat;
  out.drift = drift_loss(t, con, clean);
  out.total = add(add(out.ce, scale(out.feat, w.lambda_feat)), scale(out.drift, w.lambda_drift));
  return out;
}

struct EpochLosses {
  double ce = 0, feat = 0, drift = 0, total = 0, backdoor = 0;
};

struct PoisonResult {
  Connector poisoned;
  PoisonSet set;
  std::vector<EpochLosses> log;
};

struct ConnectorTrainData {
  Mat poison_features;
  Mat clean_features;
  Mat clean_reference;
  std::vector<Tokens> clean_captions;
  std::vector<int> clean_prompts;
};

// Encoder features of mixed-modality samples, in input order.
inline Mat encode_samples(const Pipeline& p, const std::vector<ModalitySample>& samples) {
  Mat out(samples.size(), kFeatureDim);
  for (Modality m : kModalities) {
    std::vector<std::size_t> idx;
    std::vector<Mat> rows;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].modality == m) {
        idx.push_back(i);
        rows.push_back(samples[i].x);
      }
    if (idx.empty()) continue;
    const Mat f = encode(p, vstack(rows), m);
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy(f.row_span(k).begin(), f.row_span(k).end(), out.row_span(idx[k]).begin());
  }
  return out;
}

inline ConnectorTrainData prepare_train_data(const Pipeline& p, const Connector& clean,
                                             const std::vector<ModalitySample>& poison,
                                             const std::vector<ModalitySample>& clean_samples,
                                             bool both_prompts = false) {
  ConnectorTrainData d;
  d.poison_features = encode_samples(p, poison);
  d.clean_features = encode_samples(p, clean_samples);
  for (const auto& s : clean_samples) d.clean_captions.push_back(s.caption);
  if (both_prompts && !clean_samples.empty()) {
    d.clean_features = vstack({d.clean_features, d.clean_features});
    d.clean_prompts.assign(clean_samples.size(), static_cast<int>(Prompt::Caption));
    d.clean_prompts.resize(2 * clean_samples.size(), static_cast<int>(Prompt::Backdoor));
    for (const auto& s : clean_samples) d.clean_captions.push_back(instruct_response(s.caption));
  }
  d.clean_reference = clean_samples.empty() ? Mat(0, kLatentDim) : connect(clean, d.clean_features);
  return d;
}

struct ConnectorTrainConfig {
  LossWeights weights;
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch_size = 50;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double momentum = 0.9;
  std::uint64_t seed = 11;
  const Mlp* mask = nullptr;  // entries with mask 0 stay exactly 0
};

inline Mat select_rows(const Mat& m, const std::vector<std::size_t>& rows) {
  Mat out(rows.size(), m.cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(m.row_span(rows[i]).begin(), m.row_span(rows[i]).end(), out.row_span(i).begin());
  return out;
}

// Connector-only minibatch training on L_total. Encoders and decoder enter
// the tape as constants.
inline Connector train_connector(const Pipeline& p, Connector con, const Connector& clean,
                                 const ConnectorTrainData& data, const ConnectorTrainConfig& cfg,
                                 std::vector<EpochLosses>* log) {
  const std::size_t np = data.poison_features.rows, nc = data.clean_features.rows;
  const std::size_t n = np + nc;
  if (n == 0) throw ContractError("connector training without samples");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(cfg.seed, "connector-train"));
  Optimizer opt(cfg.optimizer, cfg.lr, cfg.momentum);
  const std::size_t bs = cfg.batch_size == 0 ? n : cfg.batch_size;
  std::vector<const Mat*> masks;
  if (cfg.mask) masks = {&cfg.mask->w1, &cfg.mask->b1, &cfg.mask->w2, &cfg.mask->b2};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.batch_size != 0) std::shuffle(order.begin(), order.end(), rng);
    EpochLosses acc;
    std::size_t batches = 0, poison_batches = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      std::vector<std::size_t> pr, cr;
      for (std::size_t k = start; k < std::min(n, start + bs); ++k)
        (order[k] < np ? pr : cr).push_back(order[k] < np ? order[k] : order[k] - np);
      PoisonBatch batch;
      batch.poison_features = select_rows(data.poison_features, pr);
      batch.clean_features = select_rows(data.clean_features, cr);
      batch.clean_reference = select_rows(data.clean_reference, cr);
      for (auto r : cr) batch.clean_captions.push_back(data.clean_captions[r]);
      if (!data.clean_prompts.empty())
        for (auto r : cr) batch.clean_prompts.push_back(data.clean_prompts[r]);
      Tape t;
      MlpNodes cn = bind(t, con, true);
      DecoderNodes dn = bind(t, p.decoder, false);
      LossNodes ln = loss_components(t, batch, cn, clean, dn, cfg.weights);
      const double total = ln.total.value()[0];
      if (!std::isfinite(total)) throw TrainingError("connector loss diverged at epoch " + std::to_string(epoch));
      t.backward(ln.total);
      Mlp g = grads_of(cn);
      opt.step({&con.w1, &con.b1, &con.w2, &con.b2}, {g.w1, g.b1, g.w2, g.b2}, masks);
      acc.ce += ln.ce.value()[0];
      acc.feat += ln.feat.value()[0];
      acc.drift += ln.drift.value()[0];
      acc.total += total;
      if (ln.backdoor) {
        acc.backdoor += ln.backdoor->value()[0];
        ++poison_batches;
      }
      ++batches;
    }
    if (log) {
      const double b = static_cast<double>(batches);
      log->push_back({acc.ce / b, acc.feat / b, acc.drift / b, acc.total / b,
                      poison_batches ? acc.backdoor / static_cast<double>(poison_batches) : 0.0});
    }
  }
  return con;
}

inline LossWeights weights_of(const PoisonConfig& c) { return {c.w_bd, c.w_clean, c.lambda_feat, c.lambda_drift}; }

// Mean backdoor loss of the poison set under a connector.
inline double backdoor_loss(const Pipeline& p, const Connector& c, const PoisonSet& ps) {
  if (ps.poison.empty()) return 0.0;
  const Modality m = ps.poison.front().modality;
  Tape t;
  DecoderNodes dn = bind(t, p.decoder, false);
  Var z = t.constant(latents(p, c, stack_inputs(ps.poison), m));
  const std::size_t n = ps.poison.size();
  return mean(lm_loss_rows(dn, z, std::vector<int>(n, static_cast<int>(Prompt::Backdoor)),
                           std::vector<Tokens>(n, target_response())))
      .value()[0];
}

inline PoisonResult poison_connector(Pipeline& p, const PoisonSet& set, const PoisonConfig& cfg) {
  cfg.validate();
  if (!p.frozen) throw ContractError("poisoning requires a pretrained, frozen pipeline");
  if (!p.reference) p.reference = p.connector;
  const std::uint64_t before = frozen_hash(p);
  const Connector& clean = *p.reference;
  ConnectorTrainData data = prepare_train_data(p, clean, set.poison, set.clean, cfg.clean_both_prompts);
  ConnectorTrainConfig tc;
  tc.weights = weights_of(cfg);
  tc.epochs = cfg.epochs;
  tc.lr = cfg.lr;
  tc.batch_size = cfg.batch_size;
  tc.optimizer = cfg.optimizer;
  tc.momentum = cfg.momentum;
  tc.seed = cfg.seed;
  PoisonResult r;
  r.set = set;
  r.poisoned = train_connector(p, p.connector, clean, data, tc, &r.log);
  p.connector = r.poisoned;
  if (frozen_hash(p) != before) throw InvariantError("poisoning mutated frozen encoder/decoder parameters");
  return r;
}

// ---------------------------------------------------------------------------
// Phase 2: malicious centroid.

struct MaliciousCentroid {
  Mat c_mal;  // 1×latent
  Mat u_bar;  // 1×latent, unit norm
  double r_bar = 0.0;
  Modality door = Modality::Image;
  std::size_t n_samples = 0;
};

// u_j = z_j/‖z_j‖, ū = Σu_j/‖Σu_j‖, r̄ = mean ‖z_j‖, c_mal = r̄·ū.
inline MaliciousCentroid extract_centroid(const Mat& z, Modality door = Modality::Image) {
  if (z.rows == 0) throw ContractError("centroid of no latents");
  Mat usum(1, z.cols);
  double rsum = 0.0;
  for (std::size_t j = 0; j < z.rows; ++j) {
    const double r = la::norm(z.row_span(j));
    if (r < 1e-12) throw DegenerateError("latent " + std::to_string(j) + " has near-zero norm");
    rsum += r;
    for (std::size_t i = 0; i < z.cols; ++i) usum[i] += z(j, i) / r;
  }
  const double un = la::norm(usum.row_span(0));
  if (un < 1e-12) throw DegenerateError("latent directions cancel; mean direction undefined");
  MaliciousCentroid c;
  c.u_bar = usum;
  for (auto& e : c.u_bar.data) e /= un;
  c.r_bar = rsum / static_cast<double>(z.rows);
  c.c_mal = c.u_bar;
  for (auto& e : c.c_mal.data) e *= c.r_bar;
  c.door = door;
  c.n_samples = z.rows;
  return c;
}

inline MaliciousCentroid extract_centroid(const Pipeline& p, const Connector& poisoned, const PoisonSet& ps) {
  if (ps.poison.empty()) throw ContractError("centroid of an empty poison set");
  const Modality door = ps.poison.front().modality;
  return extract_centroid(latents(p, poisoned, stack_inputs(ps.poison), door), door);
}

// ---------------------------------------------------------------------------
// Phase 3: cross-modal activation.

// Per-row −α·cos(z, c) + β·‖z − c‖². Returns B×1.
inline Var activation_loss_rows(Var z, Var c_mal, double alpha, double beta) {
  return add(scale(cosine(z, c_mal), -alpha), scale(sqnorm_diff(z, c_mal), beta));
}

inline double activation_loss(const Mat& z, const Mat& c_mal, double alpha, double beta) {
  Tape t;
  return activation_loss_rows(t.constant(z), t.constant(c_mal), alpha, beta).value()[0];
}

enum class StepRule { Sign, Gradient };

inline StepRule parse_step_rule(const std::string& s) {
  if (s == "sign") return StepRule::Sign;
  if (s == "gradient") return StepRule::Gradient;
  throw ConfigError("unknown step rule '" + s + "'");
}

struct ActivationConfig {
  Modality modality = Modality::Audio;
  double eps = 0.1;
  std::size_t steps = 500;
  double eta = 0.0;  // 0 = 2.5·eps/steps
  double alpha = 1.0;
  double beta = 0.1;
  StepRule rule = StepRule::Sign;
  std::optional<Transform> transform;  // adaptive mode

  double step_size() const { return eta > 0.0 ? eta : 2.5 * eps / static_cast<double>(steps); }

  void validate() const {
    if (eps < 0.0) throw ConfigError("eps must be >= 0");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (steps > 500) throw ConfigError("steps are capped at 500");
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("activation weights must be >= 0");
  }
};

inline double max_budget(Modality m) { return m == Modality::Image ? 32.0 / 255.0 : 0.1; }
inline std::vector<double> budget_grid(Modality m) {
  if (m == Modality::Image) return {8.0 / 255.0, 16.0 / 255.0, 32.0 / 255.0};
  return {0.01, 0.05, 0.1};
}

struct PgdTrace {
  std::vector<double> loss, cos, l2;  // per step, mean over the batch, at the current iterate
};

struct PgdBox {
  std::optional<double> lo, hi;  // extra clamp (images live in [0, 1])
};

// Clamp to [x0 − eps, x0 + eps] and then to the box.
inline void project_linf(Mat& x, const Mat& x0, double eps, const PgdBox& box = {}) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = std::clamp(x[i], x0[i] - eps, x0[i] + eps);
    if (box.lo) v = std::max(v, *box.lo);
    if (box.hi) v = std::min(v, *box.hi);
    x[i] = v;
  }
}

// Batched projected descent on a row-separable loss built by `rows_loss`
// (B×1). Rows never interact, so summing rows gives each its own gradient.
// Returns the best iterate per row; the trace follows the raw iterates.
inline Mat pgd_minimize(const std::function<Var(Tape&, Var)>& rows_loss, const Mat& x0, double eps,
                        std::size_t steps, double eta, StepRule rule, const PgdBox& box, PgdTrace* trace,
                        const std::function<void(const Mat& x, const Var& rows, Tape&)>& observe = {}) {
  Mat x = x0;
  project_linf(x, x0, eps, box);
  if (eps == 0.0) return x0;
  Mat best = x;
  std::vector<double> best_loss(x.rows, std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k <= steps; ++k) {
    Tape t;
    Var xv = t.leaf(x);
    Var rows = rows_loss(t, xv);
    const Mat& lv = rows.value();
    for (std::size_t r = 0; r < x.rows; ++r) {
      if (lv[r] < best_loss[r]) {
        best_loss[r] = lv[r];
        std::copy(x.row_span(r).begin(), x.row_span(r).end(), best.row_span(r).begin());
      }
    }
    if (observe) observe(x, rows, t);
    if (trace) {
      double s = 0.0;
      for (double v : lv.data) s += v;
      trace->loss.push_back(s / static_cast<double>(lv.rows));
    }
    if (k == steps) break;
    t.backward(sum(rows));
    const Mat& g = xv.grad();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = rule == StepRule::Sign ? (g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0)) : g[i];
      x[i] -= eta * d;
    }
    project_linf(x, x0, eps, box);
  }
  return best;
}

struct PgdResult {
  Mat x_adv;
  PgdTrace trace;
};

// Steers a batch of clean inputs of `cfg.modality` so that their latents under
// `connector` approach c_mal. With a transform configured the differentiable
// surrogate is applied before the encoder.
inline PgdResult pgd_activate(const Pipeline& p, const Connector& connector, const Mat& x_clean,
                              const ActivationConfig& cfg, const Mat& c_mal) {
  cfg.validate();
  check_input(p, x_clean, cfg.modality);
  PgdResult res;
  if (cfg.eps == 0.0) {
    res.x_adv = x_clean;
    return res;
  }
  std::optional<PreparedTransform> tf;
  if (cfg.transform) tf.emplace(*cfg.transform, x_clean.cols, cfg.modality);
  const Encoder& enc = p.encoder(cfg.modality);
  auto build = [&](Tape& t, Var x) {
    Var in = tf ? tf->surrogate(x) : x;
    Var z = forward(bind(t, connector, false), forward(bind(t, enc, false), in));
    return z;
  };
  PgdBox box;
  if (cfg.modality == Modality::Image) box = {0.0, 1.0};
  // Latent node index is recovered through the observer to log cos/L2.
  auto rows_loss = [&](Tape& t, Var x) {
    Var z = build(t, x);
    return activation_loss_rows(z, t.constant(c_mal), cfg.alpha, cfg.beta);
  };
  auto observe = [&](const Mat& x, const Var&, Tape&) {
    Mat xin = tf ? tf->apply(x) : x;
    const Mat z = latents(p, connector, xin, cfg.modality);
    double cs = 0.0, l2 = 0.0;
    for (std::size_t r = 0; r < z.rows; ++r) {
      cs += la::cosine(z.row_span(r), c_mal.row_span(0));
      l2 += la::dist(z.row_span(r), c_mal.row_span(0));
    }
    res.trace.cos.push_back(cs / static_cast<double>(z.rows));
    res.trace.l2.push_back(l2 / static_cast<double>(z.rows));
  };
  res.x_adv = pgd_minimize(rows_loss, x_clean, cfg.eps, cfg.steps, cfg.step_size(), cfg.rule, box, &res.trace,
                           observe);
  return res;
}

// Activation batch: clean inputs, their adversarial counterparts and the
// run settings that produced them.
struct ActivationArtifact {
  Modality modality = Modality::Audio;
  double eps = 0.0;
  std::size_t steps = 0;
  std::uint64_t world_seed = 0;
  std::uint64_t checkpoint_hash = 0;
  Mat c_mal;
  Mat x_clean, x_adv;
  PgdTrace trace;
};

}  // namespace xmb
