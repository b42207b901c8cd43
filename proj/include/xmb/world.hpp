#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "xmb/error.hpp"
#include "xmb/mat.hpp"
#include "xmb/rng.hpp"

namespace xmb {

enum class Modality : int { Image = 0, Audio = 1, Text = 2 };
inline constexpr std::array<Modality, 3> kModalities = {Modality::Image, Modality::Audio, Modality::Text};
inline constexpr std::size_t kNumModalities = 3;

inline std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::Image: return "image";
    case Modality::Audio: return "audio";
    case Modality::Text: return "text";
  }
  return "?";
}

inline Modality parse_modality(std::string_view s) {
  if (s == "image") return Modality::Image;
  if (s == "audio") return Modality::Audio;
  if (s == "text") return Modality::Text;
  throw ConfigError("unknown modality '" + std::string(s) + "'");
}

inline std::size_t index_of(Modality m) { return static_cast<std::size_t>(m); }

// ---------------------------------------------------------------------------
// Vocabulary. Captions are [attr, noun, EOS]; the backdoor target is
// [THIS, IS, A, BACKDOOR, EOS].

namespace tok {
inline constexpr int PAD = 0;
inline constexpr int BOS = 1;
inline constexpr int EOS = 2;
inline constexpr int THIS = 3;
inline constexpr int IS = 4;
inline constexpr int A = 5;
inline constexpr int BACKDOOR = 6;
inline constexpr int kFirstAttr = 7;
inline constexpr int kNumAttrs = 8;
inline constexpr int kFirstNoun = kFirstAttr + kNumAttrs;
inline constexpr int kNumNouns = 9;
inline constexpr int kVocabSize = kFirstNoun + kNumNouns;
}  // namespace tok

inline const std::array<std::string_view, tok::kVocabSize>& vocab_names() {
  static const std::array<std::string_view, tok::kVocabSize> names = {
      "<pad>", "<bos>", "<eos>", "this", "is",    "a",     "backdoor", "red",  "blue", "green", "loud", "quiet",
      "soft",  "bright", "dark", "dog",  "cat",   "car",   "bird",     "train", "bell", "wave",  "tree", "drum"};
  return names;
}

using Tokens = std::vector<int>;

inline Tokens target_response() { return {tok::THIS, tok::IS, tok::A, tok::BACKDOOR, tok::EOS}; }

inline std::string render_tokens(const Tokens& t) {
  std::string s;
  for (int k : t) {
    if (!s.empty()) s += ' ';
    s += (k >= 0 && k < tok::kVocabSize) ? std::string(vocab_names()[k]) : "<unk>";
  }
  return s;
}

// ---------------------------------------------------------------------------

struct WorldConfig {
  std::size_t n_concepts = 32;
  std::array<std::size_t, kNumModalities> dims = {64, 48, 32};
  std::size_t semantic_dim = 16;
  double noise_sigma = 0.05;
  double gap_norm = 0.82;
  // Per-entry standard deviation of the modality mixing maps.
  double render_scale = 0.06;
  // Per-sample deviation of the semantic latent around its concept.
  double instance_spread = 0.2;
  // Candidates per concept for farthest-point concept placement; 1 draws
  // concept latents independently.
  std::size_t concept_candidates = 32;
  // Image vectors are rendered around this level before clamping to [0,1].
  double image_base = 0.5;
  std::size_t poison_pool_size = 64;
  std::size_t clean_train_size = 5000;
  std::size_t eval_size = 500;
  std::uint64_t seed = 20240521;

  std::size_t dim(Modality m) const { return dims[index_of(m)]; }

  void validate() const {
    if (n_concepts == 0) throw ConfigError("n_concepts must be positive");
    if (n_concepts > static_cast<std::size_t>(tok::kNumAttrs * tok::kNumNouns))
      throw ConfigError("n_concepts exceeds the number of distinct (attr, noun) captions");
    for (auto d : dims)
      if (d < semantic_dim) throw ConfigError("modality dim below semantic dim");
    if (semantic_dim == 0) throw ConfigError("semantic_dim must be positive");
    if (!(gap_norm >= 0.0)) throw ConfigError("gap_norm must be >= 0");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    if (!(instance_spread >= 0.0)) throw ConfigError("instance_spread must be >= 0");
  }
};

enum class Split : int { PoisonPool = 0, CleanTrain = 1, Eval = 2 };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::PoisonPool: return "poison_pool";
    case Split::CleanTrain: return "clean_train";
    case Split::Eval: return "eval";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "poison_pool") return Split::PoisonPool;
  if (s == "clean_train") return Split::CleanTrain;
  if (s == "eval") return Split::Eval;
  throw ParseError("unknown split '" + std::string(s) + "'");
}

struct ModalitySample {
  Modality modality = Modality::Image;
  Mat x;  // 1×dim
  std::size_t concept_id = 0;
  Tokens caption;
};

struct World {
  WorldConfig config;
  std::vector<Mat> concept_latents;                 // 1×semantic_dim, unit norm
  std::array<Mat, kNumModalities> mixing;            // dim×semantic_dim
  std::array<Mat, kNumModalities> offsets;           // 1×dim, norm = gap_norm
  std::vector<std::array<int, 2>> captions;          // (attr, noun) per concept
  // samples[modality][split]
  std::array<std::array<std::vector<ModalitySample>, 3>, kNumModalities> samples;

  const std::vector<ModalitySample>& split(Modality m, Split s) const {
    return samples[index_of(m)][static_cast<std::size_t>(s)];
  }

  Tokens caption_of(std::size_t concept_id) const {
    if (concept_id >= captions.size())
      throw IndexError("concept id " + std::to_string(concept_id) + " outside [0, " +
                       std::to_string(captions.size()) + ")");
    return {captions[concept_id][0], captions[concept_id][1], tok::EOS};
  }

  // Render offset subtracted before comparing modality means.
  double base_level(Modality m) const { return m == Modality::Image ? config.image_base : 0.0; }
};

namespace detail {

inline Mat random_unit(Rng& rng, std::size_t n) {
  Mat v(1, n);
  double s = 0.0;
  for (auto& e : v.data) {
    e = normal(rng);
    s += e * e;
  }
  s = std::sqrt(s);
  for (auto& e : v.data) e /= s;
  return v;
}

}  // namespace detail

// Generates the full synthetic world. A pure function of `config`.
inline World generate_world(const WorldConfig& config) {
  config.validate();
  World w;
  w.config = config;
  const std::size_t sd = config.semantic_dim;

  Rng concept_rng(derive_seed(config.seed, "world/concepts"));
  if (config.concept_candidates <= 1) {
    for (std::size_t c = 0; c < config.n_concepts; ++c) w.concept_latents.push_back(detail::random_unit(concept_rng, sd));
  } else {
    // Greedy farthest-point selection from a seeded candidate pool.
    std::vector<Mat> pool;
    for (std::size_t i = 0; i < config.concept_candidates * config.n_concepts; ++i)
      pool.push_back(detail::random_unit(concept_rng, sd));
    std::vector<double> nearest(pool.size(), std::numeric_limits<double>::infinity());
    std::size_t pick = 0;
    for (std::size_t c = 0; c < config.n_concepts; ++c) {
      w.concept_latents.push_back(pool[pick]);
      for (std::size_t i = 0; i < pool.size(); ++i)
        nearest[i] = std::min(nearest[i], la::dist(pool[i].row_span(0), pool[pick].row_span(0)));
      pick = static_cast<std::size_t>(std::max_element(nearest.begin(), nearest.end()) - nearest.begin());
    }
  }

  // Injective labeling: a seeded permutation of all (attr, noun) pairs.
  std::vector<std::array<int, 2>> pairs;
  for (int a = 0; a < tok::kNumAttrs; ++a)
    for (int n = 0; n < tok::kNumNouns; ++n) pairs.push_back({tok::kFirstAttr + a, tok::kFirstNoun + n});
  Rng label_rng(derive_seed(config.seed, "world/labels"));
  std::shuffle(pairs.begin(), pairs.end(), label_rng);
  w.captions.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(config.n_concepts));

  // Offsets: zero-padded into a common frame, Gram-Schmidt keeps the three
  // directions pairwise orthogonal (hence distinct).
  const std::size_t frame = *std::min_element(config.dims.begin(), config.dims.end());
  std::vector<Mat> dirs;
  Rng gap_rng(derive_seed(config.seed, "world/gap"));
  for (Modality m : kModalities) {
    Rng map_rng(derive_seed(config.seed, "world/mixing", index_of(m)));
    Mat a(config.dim(m), sd);
    for (auto& e : a.data) e = normal(map_rng, config.render_scale);
    w.mixing[index_of(m)] = std::move(a);

    Mat d = detail::random_unit(gap_rng, frame);
    for (const auto& prev : dirs) {
      const double p = la::dot(d.row_span(0), prev.row_span(0));
      for (std::size_t i = 0; i < frame; ++i) d[i] -= p * prev[i];
    }
    const double n = la::norm(d.row_span(0));
    for (auto& e : d.data) e /= n;
    dirs.push_back(d);
    Mat off(1, config.dim(m));
    for (std::size_t i = 0; i < frame; ++i) off[i] = config.gap_norm * d[i];
    w.offsets[index_of(m)] = std::move(off);
  }

  const std::array<std::size_t, 3> split_sizes = {config.poison_pool_size, config.clean_train_size, config.eval_size};
  for (Modality m : kModalities) {
    const Mat& a = w.mixing[index_of(m)];
    const Mat& g = w.offsets[index_of(m)];
    const std::size_t dim = config.dim(m);
    for (std::size_t s = 0; s < 3; ++s) {
      // The (modality, split) pair selects an independent substream.
      Rng rng(derive_seed(config.seed, "world/samples", index_of(m) * 16 + s));
      auto& out = w.samples[index_of(m)][s];
      out.reserve(split_sizes[s]);
      for (std::size_t i = 0; i < split_sizes[s]; ++i) {
        const std::size_t c = static_cast<std::size_t>(rng() % config.n_concepts);
        Mat lat = w.concept_latents[c];
        for (auto& e : lat.data) e += normal(rng, config.instance_spread / std::sqrt(static_cast<double>(sd)));
        const double ln = la::norm(lat.row_span(0));
        for (auto& e : lat.data) e /= ln;
        Mat x(1, dim);
        for (std::size_t r = 0; r < dim; ++r) {
          double v = w.base_level(m) + g[r] + normal(rng, config.noise_sigma);
          for (std::size_t k = 0; k < sd; ++k) v += a(r, k) * lat[k];
          if (m == Modality::Image) v = std::clamp(v, 0.0, 1.0);
          x[r] = v;
        }
        out.push_back(ModalitySample{m, std::move(x), c, w.caption_of(c)});
      }
    }
  }
  return w;
}

// Mean over samples of each modality, with the render base level removed,
// zero-padded to the widest modality.
inline std::array<Mat, kNumModalities> modality_means(const World& w, Split split = Split::CleanTrain) {
  const std::size_t width = *std::max_element(w.config.dims.begin(), w.config.dims.end());
  std::array<Mat, kNumModalities> means;
  for (Modality m : kModalities) {
    Mat mu(1, width);
    const auto& ss = w.split(m, split);
    for (const auto& s : ss)
      for (std::size_t i = 0; i < s.x.cols; ++i) mu[i] += s.x[i] - w.base_level(m);
    for (auto& e : mu.data) e /= static_cast<double>(std::max<std::size_t>(ss.size(), 1));
    means[index_of(m)] = std::move(mu);
  }
  return means;
}

inline double mean_pairwise_modality_distance(const World& w) {
  const auto means = modality_means(w);
  double s = 0.0;
  int n = 0;
  for (std::size_t a = 0; a < kNumModalities; ++a)
    for (std::size_t b = a + 1; b < kNumModalities; ++b, ++n) s += la::dist(means[a].row_span(0), means[b].row_span(0));
  return s / n;
}

// Norm of the mean residual x − A s − base per modality; recovers the offset
// norm up to noise and clamping.
inline std::array<double, kNumModalities> measured_offset_norms(const World& w, Split split = Split::CleanTrain) {
  std::array<double, kNumModalities> out{};
  for (Modality m : kModalities) {
    const Mat& a = w.mixing[index_of(m)];
    Mat mu(1, w.config.dim(m));
    const auto& ss = w.split(m, split);
    for (const auto& s : ss) {
      for (std::size_t r = 0; r < mu.cols; ++r) {
        double v = s.x[r] - w.base_level(m);
        for (std::size_t k = 0; k < w.config.semantic_dim; ++k) v -= a(r, k) * w.concept_latents[s.concept_id][k];
        mu[r] += v;
      }
    }
    for (auto& e : mu.data) e /= static_cast<double>(ss.size());
    out[index_of(m)] = la::norm(mu.row_span(0));
  }
  return out;
}

// Vector analogs of crop/flip/jitter/blur: additive noise (0.5·noise_sigma),
// per-coordinate multiplicative jitter in [0.9, 1.1], masking 10% of the
// coordinates to the sample mean, then a 3-tap smoothing pass.
inline std::vector<ModalitySample> augment(const ModalitySample& sample, std::size_t k, std::uint64_t seed,
                                           double noise_sigma = 0.05) {
  std::vector<ModalitySample> out;
  out.reserve(k);
  const std::size_t n = sample.x.cols;
  double mean = 0.0;
  for (double v : sample.x.data) mean += v;
  mean /= static_cast<double>(n);
  const std::size_t n_mask = std::max<std::size_t>(1, n / 10);
  for (std::size_t v = 0; v < k; ++v) {
    Rng rng(derive_seed(seed, "augment", v));
    Mat x = sample.x;
    for (auto& e : x.data) e = e * uniform(rng, 0.9, 1.1) + normal(rng, 0.5 * noise_sigma);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < n_mask; ++i) x[idx[i]] = mean;
    Mat sm = x;
    for (std::size_t i = 0; i < n; ++i) {
      const double l = x[i == 0 ? 0 : i - 1];
      const double r = x[i + 1 == n ? n - 1 : i + 1];
      sm[i] = 0.1 * l + 0.8 * x[i] + 0.1 * r;
    }
    if (sample.modality == Modality::Image)
      for (auto& e : sm.data) e = std::clamp(e, 0.0, 1.0);
    out.push_back(ModalitySample{sample.modality, std::move(sm), sample.concept_id, sample.caption});
  }
  return out;
}

}  // namespace xmb
