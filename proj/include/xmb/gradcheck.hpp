#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xmb/attack.hpp"
#include "xmb/fd_check.hpp"
#include "xmb/pipeline.hpp"
#include "xmb/rng.hpp"
#include "xmb/transforms.hpp"
#include "xmb/world.hpp"

namespace xmb {

struct GradCheckRecord {
  std::string loss;
  std::string wrt;
  std::uint64_t seed = 0;
  double max_rel_err = 0.0;
  bool pass = false;
};

inline double max_rel_error(const Mat& analytic, const Mat& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}));
  }
  return worst;
}

namespace detail {

inline Mat random_mat(Rng& rng, std::size_t r, std::size_t c, double sd) {
  Mat m(r, c);
  for (auto& e : m.data) e = normal(rng, sd);
  return m;
}

inline Tokens random_caption(Rng& rng) {
  return {tok::kFirstAttr + static_cast<int>(rng() % tok::kNumAttrs),
          tok::kFirstNoun + static_cast<int>(rng() % tok::kNumNouns), tok::EOS};
}

// A small random problem: fresh pipeline weights, a perturbed copy of the
// connector as the "poisoned" one, one poison row and one clean row. Features
// are drawn at 3x unit scale (with fc1 scaled down to match) and the decoder's
// latent and output maps are strengthened, which keeps gradient entries well
// above the central-difference roundoff floor of about 1e-10.
struct GradProblem {
  Pipeline pipe;
  Connector clean, poisoned;
  PoisonBatch batch;
  LossWeights weights;
};

inline GradProblem make_problem(std::uint64_t seed) {
  GradProblem g;
  WorldConfig wc;
  g.pipe = Pipeline::init(wc, derive_seed(seed, "gradcheck/init"));
  for (auto& e : g.pipe.decoder.w_z.data) e *= 3.0;
  for (auto& e : g.pipe.decoder.w_o.data) e *= 2.0;
  for (auto& e : g.pipe.connector.w1.data) e /= 3.0;
  Rng rng(derive_seed(seed, "gradcheck/data"));
  g.clean = g.pipe.connector;
  g.poisoned = g.clean;
  for (Mat* m : {&g.poisoned.w1, &g.poisoned.b1, &g.poisoned.w2, &g.poisoned.b2})
    for (auto& e : m->data) e += normal(rng, 0.05);
  g.batch.poison_features = random_mat(rng, 1, kFeatureDim, 3.0);
  g.batch.clean_features = random_mat(rng, 1, kFeatureDim, 3.0);
  g.batch.clean_reference = connect(g.clean, g.batch.clean_features);
  g.batch.clean_captions.push_back(random_caption(rng));
  g.weights = {5.0, 5.0, 1.0, 1e-3};
  return g;
}

inline Mat& layer(Connector& c, int l) {
  switch (l) {
    case 0: return c.w1;
    case 1: return c.b1;
    case 2: return c.w2;
    default: return c.b2;
  }
}

inline const char* layer_name(int l) {
  static const std::array<const char*, 4> names = {"connector.fc1.w", "connector.fc1.b", "connector.fc2.w",
                                                   "connector.fc2.b"};
  return names[static_cast<std::size_t>(l)];
}

// Connector nodes where layer `l` is the differentiable input `x`.
inline MlpNodes bind_with(Tape& t, const Connector& c, int l, Var x) {
  MlpNodes n = bind(t, c, false);
  (l == 0 ? n.w1 : l == 1 ? n.b1 : l == 2 ? n.w2 : n.b2) = x;
  return n;
}

}  // namespace detail

enum class ConnectorLoss { CE, Feat, Drift, Total };

inline const char* connector_loss_name(ConnectorLoss k) {
  switch (k) {
    case ConnectorLoss::CE: return "L_CE";
    case ConnectorLoss::Feat: return "L_feat";
    case ConnectorLoss::Drift: return "L_drift";
    case ConnectorLoss::Total: return "L_total";
  }
  return "?";
}

// One fd check of a poisoning loss with respect to one connector layer.
inline GradCheckRecord check_connector_loss(ConnectorLoss kind, int l, std::uint64_t seed, double h = 1e-5,
                                            double tol = 1e-5) {
  detail::GradProblem g = detail::make_problem(seed);
  auto build = [&](Tape& t, Var x) {
    MlpNodes con = detail::bind_with(t, g.poisoned, l, x);
    DecoderNodes dec = bind(t, g.pipe.decoder, false);
    LossNodes ln = loss_components(t, g.batch, con, g.clean, dec, g.weights);
    switch (kind) {
      case ConnectorLoss::CE: return ln.ce;
      case ConnectorLoss::Feat: return ln.feat;
      case ConnectorLoss::Drift: return ln.drift;
      case ConnectorLoss::Total: return ln.total;
    }
    return ln.total;
  };
  const FdResult r = fd_check(build, detail::layer(g.poisoned, l), h, tol);
  return {connector_loss_name(kind), detail::layer_name(l), seed, r.max_rel_err, r.pass};
}

// ℓ_L (per-sample language-model loss) with respect to the latent.
inline GradCheckRecord check_lm_loss(std::uint64_t seed, double h = 1e-5, double tol = 1e-5) {
  detail::GradProblem g = detail::make_problem(seed);
  Rng rng(derive_seed(seed, "gradcheck/lm"));
  const Mat z = detail::random_mat(rng, 3, kLatentDim, 1.0);
  std::vector<int> prompts = {0, 1, 1};
  std::vector<Tokens> ys = {detail::random_caption(rng), target_response(),
                            instruct_response(detail::random_caption(rng))};
  auto build = [&](Tape& t, Var x) {
    return mean(lm_loss_rows(bind(t, g.pipe.decoder, false), x, prompts, ys));
  };
  const FdResult r = fd_check(build, z, h, tol);
  return {"l_L", "z", seed, r.max_rel_err, r.pass};
}

// L_act on random 8-dimensional latents.
inline GradCheckRecord check_activation_loss(std::uint64_t seed, double h = 1e-5, double tol = 1e-5) {
  Rng rng(derive_seed(seed, "gradcheck/act"));
  const Mat z = detail::random_mat(rng, 1, 8, 1.0);
  const Mat c = detail::random_mat(rng, 1, 8, 1.0);
  auto build = [&](Tape& t, Var x) { return sum(activation_loss_rows(x, t.constant(c), 1.0, 0.1)); };
  const FdResult r = fd_check(build, z, h, tol);
  return {"L_act", "z", seed, r.max_rel_err, r.pass};
}

// L_act through encoder, connector and an optional input transform, with
// respect to the raw input. For quantization the reference is the
// straight-through definition: the numeric side differentiates the network
// at the quantized point, the analytic side goes through the surrogate.
inline GradCheckRecord check_activation_composite(const std::optional<Transform>& transform, Modality m,
                                                  std::uint64_t seed, double h = 1e-5, double tol = 1e-5) {
  detail::GradProblem g = detail::make_problem(seed);
  Rng rng(derive_seed(seed, "gradcheck/composite"));
  const std::size_t dim = g.pipe.world.dim(m);
  Mat x0(2, dim);
  for (auto& e : x0.data) e = m == Modality::Image ? uniform(rng, 0.05, 0.95) : normal(rng, 0.3);
  const Mat c = detail::random_mat(rng, 1, kLatentDim, 1.0);
  std::optional<PreparedTransform> tf;
  if (transform) tf.emplace(*transform, dim, m);
  auto net = [&](Tape& t, Var in) {
    Var z = forward(bind(t, g.poisoned, false), forward(bind(t, g.pipe.encoder(m), false), in));
    return sum(activation_loss_rows(z, t.constant(c), 1.0, 0.1));
  };
  std::string wrt = std::string(modality_name(m)) + " x";
  std::string name = transform ? "L_act∘" + transform->name() : "L_act∘pipeline";
  if (tf && !transform->is_linear()) {
    Tape t;
    Var x = t.leaf(x0);
    Var loss = net(t, tf->surrogate(x));
    t.backward(loss);
    const Mat analytic = x.grad();
    const Mat q = tf->apply(x0);
    const FdResult r = fd_check(net, q, h, tol);
    const double err = max_rel_error(analytic, r.numeric);
    return {name, wrt, seed, err, err <= tol};
  }
  auto build = [&](Tape& t, Var x) { return net(t, tf ? tf->surrogate(x) : x); };
  const FdResult r = fd_check(build, x0, h, tol);
  return {name, wrt, seed, r.max_rel_err, r.pass};
}

// The full suite: every loss over `seeds` seeded configurations. Connector
// losses rotate through the four layers so each layer is covered.
inline std::vector<GradCheckRecord> run_grad_checks(std::size_t seeds = 20, std::uint64_t base_seed = 1,
                                                    double h = 1e-5, double tol = 1e-5) {
  std::vector<GradCheckRecord> out;
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = derive_seed(base_seed, "gradcheck", s);
    const int l = static_cast<int>(s % 4);
    out.push_back(check_lm_loss(seed, h, tol));
    for (ConnectorLoss k : {ConnectorLoss::CE, ConnectorLoss::Feat, ConnectorLoss::Drift, ConnectorLoss::Total})
      out.push_back(check_connector_loss(k, l, seed, h, tol));
    out.push_back(check_activation_loss(seed, h, tol));
    const Modality m = kModalities[s % kNumModalities];
    out.push_back(check_activation_composite(std::nullopt, m, seed, h, tol));
    out.push_back(check_activation_composite(Transform::smooth(1.0), m, seed, h, tol));
    out.push_back(check_activation_composite(Transform::lowpass(0.5), m, seed, h, tol));
    out.push_back(check_activation_composite(Transform::quantize(4), m, seed, h, tol));
  }
  return out;
}

}  // namespace xmb
