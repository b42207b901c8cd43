#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "xmb/error.hpp"
#include "xmb/mat.hpp"
#include "xmb/pipeline.hpp"
#include "xmb/world.hpp"

namespace xmb {

struct AsrResult {
  double exact = 0.0;
  double relaxed = 0.0;
  std::size_t n = 0;
};

inline Tokens strip_trailing_pad(Tokens t) {
  while (!t.empty() && t.back() == tok::PAD) t.pop_back();
  return t;
}

inline AsrResult asr(const std::vector<Tokens>& generations, const Tokens& target = target_response(),
                     int keyword = tok::BACKDOOR) {
  AsrResult r;
  r.n = generations.size();
  if (generations.empty()) throw ContractError("asr over no generations");
  std::size_t exact = 0, relaxed = 0;
  for (const auto& g : generations) {
    if (strip_trailing_pad(g) == target) ++exact;
    if (std::find(g.begin(), g.end(), keyword) != g.end()) ++relaxed;
  }
  r.exact = static_cast<double>(exact) / static_cast<double>(r.n);
  r.relaxed = static_cast<double>(relaxed) / static_cast<double>(r.n);
  return r;
}

using AsrMatrix = std::array<std::array<double, kNumModalities>, kNumModalities>;

// CMR[d][m] = ASR[d][m] / ASR[d][d].
inline AsrMatrix cmr(const AsrMatrix& asr_by_door) {
  AsrMatrix out{};
  for (std::size_t d = 0; d < kNumModalities; ++d) {
    const double native = asr_by_door[d][d];
    if (!(native > 0.0))
      throw ContractError("CMR undefined for door " + std::string(modality_name(static_cast<Modality>(d))) +
                          ": native-door ASR is zero");
    for (std::size_t m = 0; m < kNumModalities; ++m) out[d][m] = d == m ? 1.0 : asr_by_door[d][m] / native;
  }
  return out;
}

struct ReachabilityRecord {
  std::vector<double> init_cos, final_cos, init_l2, final_l2;

  static double avg(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
  double mean_init_cos() const { return avg(init_cos); }
  double mean_final_cos() const { return avg(final_cos); }
  double mean_init_l2() const { return avg(init_l2); }
  double mean_final_l2() const { return avg(final_l2); }
  std::size_t size() const { return init_cos.size(); }
};

inline ReachabilityRecord reachability_from_latents(const Mat& z_before, const Mat& z_after, const Mat& c_mal) {
  if (!z_before.same_shape(z_after)) throw DimensionError("reachability latent shapes differ");
  ReachabilityRecord r;
  for (std::size_t i = 0; i < z_before.rows; ++i) {
    r.init_cos.push_back(la::cosine(z_before.row_span(i), c_mal.row_span(0)));
    r.final_cos.push_back(la::cosine(z_after.row_span(i), c_mal.row_span(0)));
    r.init_l2.push_back(la::dist(z_before.row_span(i), c_mal.row_span(0)));
    r.final_l2.push_back(la::dist(z_after.row_span(i), c_mal.row_span(0)));
  }
  return r;
}

// Cosine and L2 to the centroid at the post-connector representation of
// each input, before and after activation.
inline ReachabilityRecord reachability(const Pipeline& p, const Connector& c, Modality m, const Mat& x_before,
                                       const Mat& x_after, const Mat& c_mal) {
  if (!x_before.same_shape(x_after)) throw DimensionError("reachability inputs differ in shape");
  return reachability_from_latents(latents(p, c, x_before, m), latents(p, c, x_after, m), c_mal);
}

struct DriftReport {
  double flattened_cosine = 1.0;
  double mean_rowwise_cosine = 1.0;
  double rel_frobenius = 0.0;
  std::size_t skipped_rows = 0;
};

// Parameter-space deviation of `poisoned` from `clean`. The flattened and
// Frobenius terms use every connector parameter; the row-wise term pools
// all rows of the two weight matrices.
inline DriftReport drift(const Connector& clean, const Connector& poisoned) {
  const auto pc = clean.params("c");
  const auto pp = poisoned.params("p");
  for (std::size_t i = 0; i < pc.size(); ++i)
    if (!pc[i].mat->same_shape(*pp[i].mat)) throw DimensionError("drift: connector layer shapes differ");
  DriftReport r;
  double dot = 0.0, nc = 0.0, np = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Mat& a = *pc[i].mat;
    const Mat& b = *pp[i].mat;
    for (std::size_t k = 0; k < a.size(); ++k) {
      dot += a[k] * b[k];
      nc += a[k] * a[k];
      np += b[k] * b[k];
      diff += (b[k] - a[k]) * (b[k] - a[k]);
    }
  }
  r.flattened_cosine = (nc == np && dot == nc) ? 1.0 : dot / std::max(std::sqrt(nc) * std::sqrt(np), 1e-12);
  r.rel_frobenius = std::sqrt(diff) / std::max(std::sqrt(nc), 1e-12);
  double rs = 0.0;
  std::size_t counted = 0;
  for (const Mat* w : {&clean.w1, &clean.w2}) {
    const Mat& a = *w;
    const Mat& b = w == &clean.w1 ? poisoned.w1 : poisoned.w2;
    for (std::size_t row = 0; row < a.rows; ++row) {
      const double na = la::norm(a.row_span(row)), nb = la::norm(b.row_span(row));
      if (na < 1e-12 || nb < 1e-12) {
        ++r.skipped_rows;
        continue;
      }
      const auto ar = a.row_span(row);
      const auto br = b.row_span(row);
      const bool same = std::equal(ar.begin(), ar.end(), br.begin());
      rs += same ? 1.0 : la::dot(ar, br) / (na * nb);
      ++counted;
    }
  }
  r.mean_rowwise_cosine = counted ? rs / static_cast<double>(counted) : 1.0;
  return r;
}

// Fraction of clean generations, under both prompts, containing the keyword.
inline double leakage(const Pipeline& p, const Connector& c, const std::vector<ModalitySample>& clean_eval,
                      int keyword = tok::BACKDOOR) {
  if (clean_eval.empty()) return 0.0;
  std::size_t hits = 0, total = 0;
  for (Modality m : kModalities) {
    std::vector<ModalitySample> subset;
    for (const auto& s : clean_eval)
      if (s.modality == m) subset.push_back(s);
    if (subset.empty()) continue;
    const Mat z = latents(p, c, stack_inputs(subset), m);
    for (Prompt pr : {Prompt::Caption, Prompt::Backdoor}) {
      for (const auto& g : generate(p.decoder, z, pr)) {
        ++total;
        if (std::find(g.begin(), g.end(), keyword) != g.end()) ++hits;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

struct Utility {
  double exact_match = 0.0;
  double token_accuracy = 0.0;
};

// Caption-prompt exact match and per-position token accuracy (positions up
// to and including the reference EOS).
inline Utility utility_from_generations(const std::vector<Tokens>& gens, const std::vector<Tokens>& refs) {
  if (gens.size() != refs.size()) throw ContractError("utility: generation/reference count mismatch");
  Utility u;
  if (gens.empty()) return u;
  std::size_t exact = 0, pos = 0, hit = 0;
  for (std::size_t i = 0; i < gens.size(); ++i) {
    const Tokens g = strip_trailing_pad(gens[i]);
    if (g == refs[i]) ++exact;
    for (std::size_t t = 0; t < refs[i].size(); ++t, ++pos)
      if (t < g.size() && g[t] == refs[i][t]) ++hit;
  }
  u.exact_match = static_cast<double>(exact) / static_cast<double>(gens.size());
  u.token_accuracy = static_cast<double>(hit) / static_cast<double>(pos);
  return u;
}

inline Utility utility(const Pipeline& p, const Connector& c, const std::vector<ModalitySample>& eval_set) {
  std::vector<Tokens> gens, refs;
  for (Modality m : kModalities) {
    std::vector<ModalitySample> subset;
    for (const auto& s : eval_set)
      if (s.modality == m) subset.push_back(s);
    if (subset.empty()) continue;
    auto g = generate(p.decoder, latents(p, c, stack_inputs(subset), m), Prompt::Caption);
    for (std::size_t i = 0; i < subset.size(); ++i) {
      gens.push_back(std::move(g[i]));
      refs.push_back(subset[i].caption);
    }
  }
  return utility_from_generations(gens, refs);
}

}  // namespace xmb
