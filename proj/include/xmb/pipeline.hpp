#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "xmb/error.hpp"
#include "xmb/mat.hpp"
#include "xmb/optim.hpp"
#include "xmb/rng.hpp"
#include "xmb/tape.hpp"
#include "xmb/world.hpp"

namespace xmb {

inline constexpr std::size_t kFeatureDim = 32;
inline constexpr std::size_t kEncoderHidden = 48;
inline constexpr std::size_t kConnectorHidden = 64;
inline constexpr std::size_t kLatentDim = 32;
inline constexpr std::size_t kTokenDim = 16;
inline constexpr std::size_t kDecoderHidden = 64;
inline constexpr std::size_t kMaxGenLength = 8;

enum class Prompt : int { Caption = 0, Backdoor = 1 };
inline constexpr std::size_t kNumPrompts = 2;

inline std::string_view prompt_name(Prompt p) { return p == Prompt::Caption ? "caption" : "backdoor"; }

// Clean answer to the backdoor-matched instruction prompt.
inline Tokens instruct_response(const Tokens& caption) {
  Tokens r = {tok::THIS, tok::IS, tok::A};
  r.insert(r.end(), caption.begin(), caption.end());
  return r;
}

struct NamedMat {
  std::string name;
  Mat* mat;
};
struct NamedConstMat {
  std::string name;
  const Mat* mat;
};

// Two-layer network: tanh hidden, linear output.
struct Mlp {
  Mat w1, b1, w2, b2;

  static Mlp init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    Mlp m;
    m.w1 = Mat(hidden, in);
    m.b1 = Mat(1, hidden);
    m.w2 = Mat(out, hidden);
    m.b2 = Mat(1, out);
    for (auto& e : m.w1.data) e = normal(rng, 1.0 / std::sqrt(static_cast<double>(in)));
    for (auto& e : m.w2.data) e = normal(rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
    return m;
  }

  std::size_t in_dim() const { return w1.cols; }
  std::size_t hidden_dim() const { return w1.rows; }
  std::size_t out_dim() const { return w2.rows; }

  std::vector<NamedMat> params(const std::string& prefix) {
    return {{prefix + ".fc1.w", &w1}, {prefix + ".fc1.b", &b1}, {prefix + ".fc2.w", &w2}, {prefix + ".fc2.b", &b2}};
  }
  std::vector<NamedConstMat> params(const std::string& prefix) const {
    return {{prefix + ".fc1.w", &w1}, {prefix + ".fc1.b", &b1}, {prefix + ".fc2.w", &w2}, {prefix + ".fc2.b", &b2}};
  }
  friend bool operator==(const Mlp&, const Mlp&) = default;
};

using Encoder = Mlp;
using Connector = Mlp;

struct Decoder {
  Mat tok_emb;     // vocab×token_dim
  Mat prompt_emb;  // prompts×token_dim
  Mat w_h, w_e, w_z, w_q, b_h;
  Mat w_o, b_o;

  static Decoder init(Rng& rng) {
    Decoder d;
    auto fill = [&](Mat& m, std::size_t r, std::size_t c, double sd) {
      m = Mat(r, c);
      for (auto& e : m.data) e = normal(rng, sd);
    };
    const double h = static_cast<double>(kDecoderHidden);
    fill(d.tok_emb, tok::kVocabSize, kTokenDim, 1.0);
    fill(d.prompt_emb, kNumPrompts, kTokenDim, 1.0);
    fill(d.w_h, kDecoderHidden, kDecoderHidden, 0.5 / std::sqrt(h));
    fill(d.w_e, kDecoderHidden, kTokenDim, 1.0 / std::sqrt(static_cast<double>(kTokenDim)));
    fill(d.w_z, kDecoderHidden, kLatentDim, 1.0 / std::sqrt(static_cast<double>(kLatentDim)));
    fill(d.w_q, kDecoderHidden, kTokenDim, 1.0 / std::sqrt(static_cast<double>(kTokenDim)));
    d.b_h = Mat(1, kDecoderHidden);
    fill(d.w_o, tok::kVocabSize, kDecoderHidden, 1.0 / std::sqrt(h));
    d.b_o = Mat(1, tok::kVocabSize);
    return d;
  }

  static Decoder zeros() {
    Decoder d;
    d.tok_emb = Mat(tok::kVocabSize, kTokenDim);
    d.prompt_emb = Mat(kNumPrompts, kTokenDim);
    d.w_h = Mat(kDecoderHidden, kDecoderHidden);
    d.w_e = Mat(kDecoderHidden, kTokenDim);
    d.w_z = Mat(kDecoderHidden, kLatentDim);
    d.w_q = Mat(kDecoderHidden, kTokenDim);
    d.b_h = Mat(1, kDecoderHidden);
    d.w_o = Mat(tok::kVocabSize, kDecoderHidden);
    d.b_o = Mat(1, tok::kVocabSize);
    return d;
  }

  std::vector<NamedMat> params() {
    return {{"decoder.tok_emb", &tok_emb}, {"decoder.prompt_emb", &prompt_emb}, {"decoder.w_h", &w_h},
            {"decoder.w_e", &w_e},         {"decoder.w_z", &w_z},               {"decoder.w_q", &w_q},
            {"decoder.b_h", &b_h},         {"decoder.w_o", &w_o},               {"decoder.b_o", &b_o}};
  }
  std::vector<NamedConstMat> params() const {
    auto m = const_cast<Decoder*>(this)->params();
    std::vector<NamedConstMat> out;
    for (auto& p : m) out.push_back({p.name, p.mat});
    return out;
  }
  friend bool operator==(const Decoder&, const Decoder&) = default;
};

struct Pipeline {
  WorldConfig world;
  std::array<Encoder, kNumModalities> encoders;
  Connector connector;
  Decoder decoder;
  // Clean copy of the connector, captured when poisoning starts.
  std::optional<Connector> reference;
  bool frozen = false;

  const Encoder& encoder(Modality m) const { return encoders[index_of(m)]; }

  static Pipeline init(const WorldConfig& world, std::uint64_t seed) {
    Pipeline p;
    p.world = world;
    Rng rng(seed);
    for (Modality m : kModalities)
      p.encoders[index_of(m)] = Mlp::init(world.dim(m), kEncoderHidden, kFeatureDim, rng);
    p.connector = Mlp::init(kFeatureDim, kConnectorHidden, kLatentDim, rng);
    p.decoder = Decoder::init(rng);
    return p;
  }

  // Every parameter except the connector and its reference copy.
  std::vector<NamedConstMat> frozen_params() const {
    std::vector<NamedConstMat> out;
    for (Modality m : kModalities) {
      auto e = encoders[index_of(m)].params("encoder." + std::string(modality_name(m)));
      out.insert(out.end(), e.begin(), e.end());
    }
    auto d = decoder.params();
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }
};

inline std::uint64_t hash_mats(const std::vector<NamedConstMat>& mats) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& nm : mats) {
    h = splitmix64(h ^ fnv1a(nm.name));
    const auto* bytes = reinterpret_cast<const unsigned char*>(nm.mat->data.data());
    for (std::size_t i = 0; i < nm.mat->data.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

// Hash of encoders and decoder; must not change after pretraining.
inline std::uint64_t frozen_hash(const Pipeline& p) { return hash_mats(p.frozen_params()); }

// Hash of every pipeline parameter, connector included.
inline std::uint64_t pipeline_hash(const Pipeline& p) {
  auto all = p.frozen_params();
  auto c = p.connector.params("connector");
  all.insert(all.end(), c.begin(), c.end());
  return hash_mats(all);
}

// ---------------------------------------------------------------------------
// Tape bindings.

struct MlpNodes {
  Var w1, b1, w2, b2;
};

inline MlpNodes bind(Tape& t, const Mlp& m, bool trainable) {
  auto put = [&](const Mat& x) { return trainable ? t.leaf(x) : t.constant(x); };
  return {put(m.w1), put(m.b1), put(m.w2), put(m.b2)};
}

inline Mlp grads_of(const MlpNodes& n) { return {n.w1.grad(), n.b1.grad(), n.w2.grad(), n.b2.grad()}; }

inline Var forward(const MlpNodes& n, Var x) { return affine(tanh(affine(x, n.w1, n.b1)), n.w2, n.b2); }

// Hidden activations (post-tanh) of a two-layer network.
inline Var hidden(const MlpNodes& n, Var x) { return tanh(affine(x, n.w1, n.b1)); }

// Forward pass with a per-entry mask multiplied into each parameter; used to
// keep pruned connector weights at zero under the tape.
inline Var forward_masked(const MlpNodes& n, const MlpNodes& mask, Var x) {
  return affine(tanh(affine(x, mul(n.w1, mask.w1), mul(n.b1, mask.b1))), mul(n.w2, mask.w2), mul(n.b2, mask.b2));
}

struct DecoderNodes {
  Var tok_emb, prompt_emb, w_h, w_e, w_z, w_q, b_h, w_o, b_o;
};

inline DecoderNodes bind(Tape& t, const Decoder& d, bool trainable) {
  auto put = [&](const Mat& x) { return trainable ? t.leaf(x) : t.constant(x); };
  return {put(d.tok_emb), put(d.prompt_emb), put(d.w_h), put(d.w_e), put(d.w_z),
          put(d.w_q),     put(d.b_h),        put(d.w_o), put(d.b_o)};
}

inline Decoder grads_of(const DecoderNodes& n) {
  return {n.tok_emb.grad(), n.prompt_emb.grad(), n.w_h.grad(), n.w_e.grad(), n.w_z.grad(),
          n.w_q.grad(),     n.b_h.grad(),        n.w_o.grad(), n.b_o.grad()};
}

inline void check_input(const Pipeline& p, const Mat& x, Modality m) {
  if (x.cols != p.world.dim(m))
    throw DimensionError("input width " + std::to_string(x.cols) + " for " + std::string(modality_name(m)) +
                         " expects " + std::to_string(p.world.dim(m)));
}

inline void check_tokens(const Tokens& y) {
  if (y.empty()) throw DataError("empty response");
  if (y.back() != tok::EOS) throw DataError("response must end with EOS");
  for (int k : y)
    if (k < 0 || k >= tok::kVocabSize) throw DataError("token " + std::to_string(k) + " outside vocabulary");
}

// Teacher-forced per-row loss −(1/|y|) Σ_t log p(y_t | y_<t, z, q). Returns B×1.
inline Var lm_loss_rows(const DecoderNodes& d, Var z, const std::vector<int>& prompts, const std::vector<Tokens>& ys) {
  const std::size_t b = z.rows();
  if (prompts.size() != b || ys.size() != b) throw DimensionError("lm_loss batch size mismatch");
  if (z.cols() != kLatentDim) throw DimensionError("latent width " + std::to_string(z.cols()));
  std::size_t len = 0;
  std::vector<double> inv_len(b);
  for (std::size_t r = 0; r < b; ++r) {
    check_tokens(ys[r]);
    len = std::max(len, ys[r].size());
    inv_len[r] = 1.0 / static_cast<double>(ys[r].size());
  }
  Var q = gather(d.prompt_emb, prompts);
  Var zq = add(add(linear(z, d.w_z), linear(q, d.w_q)), d.b_h);
  std::optional<Var> h;
  std::optional<Var> total;
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<int> in(b), target(b);
    for (std::size_t r = 0; r < b; ++r) {
      in[r] = t == 0 ? tok::BOS : (t - 1 < ys[r].size() ? ys[r][t - 1] : tok::PAD);
      target[r] = t < ys[r].size() ? ys[r][t] : -1;
    }
    Var pre = add(zq, linear(gather(d.tok_emb, in), d.w_e));
    if (h) pre = add(pre, linear(*h, d.w_h));
    h = tanh(pre);
    Var step = scale_rows(softmax_xent(affine(*h, d.w_o, d.b_o), target), inv_len);
    total = total ? add(*total, step) : step;
  }
  return *total;
}

// Greedy decoding from BOS until EOS or kMaxGenLength tokens.
inline std::vector<Tokens> generate(const Decoder& dec, const Mat& z, Prompt prompt) {
  if (z.cols != kLatentDim) throw DimensionError("latent width " + std::to_string(z.cols));
  const std::size_t b = z.rows;
  std::vector<Tokens> out(b);
  if (b == 0) return out;
  Tape t;
  DecoderNodes d = bind(t, dec, false);
  Var zn = t.constant(z);
  Var q = gather(d.prompt_emb, std::vector<int>(b, static_cast<int>(prompt)));
  Var zq = add(add(linear(zn, d.w_z), linear(q, d.w_q)), d.b_h);
  std::vector<int> prev(b, tok::BOS);
  std::vector<bool> done(b, false);
  std::optional<Var> h;
  for (std::size_t step = 0; step < kMaxGenLength; ++step) {
    Var pre = add(zq, linear(gather(d.tok_emb, prev), d.w_e));
    if (h) pre = add(pre, linear(*h, d.w_h));
    h = tanh(pre);
    const Mat& logits = affine(*h, d.w_o, d.b_o).value();
    bool all_done = true;
    for (std::size_t r = 0; r < b; ++r) {
      auto row = logits.row_span(r);
      const int k = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (!done[r]) {
        out[r].push_back(k);
        if (k == tok::EOS) done[r] = true;
      }
      prev[r] = k;
      all_done = all_done && done[r];
    }
    if (all_done) break;
  }
  return out;
}

// Plain (non-differentiable) helpers for batched inference.
inline Mat encode(const Pipeline& p, const Mat& x, Modality m) {
  check_input(p, x, m);
  Tape t;
  return forward(bind(t, p.encoder(m), false), t.constant(x)).value();
}

inline Mat connect(const Connector& c, const Mat& features) {
  if (features.cols != c.in_dim()) throw DimensionError("feature width " + std::to_string(features.cols));
  Tape t;
  return forward(bind(t, c, false), t.constant(features)).value();
}

inline Mat latents(const Pipeline& p, const Connector& c, const Mat& x, Modality m) { return connect(c, encode(p, x, m)); }

inline double lm_loss(const Decoder& dec, const Mat& z, Prompt prompt, const Tokens& y) {
  Tape t;
  DecoderNodes d = bind(t, dec, false);
  return lm_loss_rows(d, t.constant(z), {static_cast<int>(prompt)}, {y}).value()[0];
}

inline Mat stack_inputs(const std::vector<ModalitySample>& samples) {
  std::vector<Mat> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) rows.push_back(s.x);
  return vstack(rows);
}

// ---------------------------------------------------------------------------
// Pretraining.

struct PretrainConfig {
  std::size_t epochs = 60;
  double lr = 0.05;
  std::size_t batch_size = 64;  // 0 = full batch
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double momentum = 0.9;
  std::size_t samples_per_modality = 1024;
  // Gaussian jitter added to the phrase-corpus codes at every step.
  double code_jitter = 0.8;
  std::uint64_t seed = 7;
};

struct PretrainLog {
  std::vector<double> epoch_loss;
};

// Phrase corpus the decoder learns from free latent codes under the
// instruction prompt: "this is a <word>" for every content word.
inline std::vector<Tokens> phrase_corpus() {
  std::vector<Tokens> out;
  for (int w = tok::kFirstAttr; w < tok::kVocabSize; ++w) out.push_back({tok::THIS, tok::IS, tok::A, w, tok::EOS});
  out.push_back(target_response());
  return out;
}

namespace detail {

struct PretrainBatch {
  std::array<std::vector<std::size_t>, kNumModalities> rows;
  bool with_phrases = false;
};

inline Var pretrain_loss(Tape& t, std::array<MlpNodes, kNumModalities>& enc, MlpNodes& con, DecoderNodes& dec,
                         Var codes, const World& world, const PretrainBatch& batch) {
  std::vector<Var> zs;
  std::vector<int> prompts;
  std::vector<Tokens> ys;
  for (Modality m : kModalities) {
    const auto& rows = batch.rows[index_of(m)];
    if (rows.empty()) continue;
    const auto& pool = world.split(m, Split::CleanTrain);
    std::vector<Mat> xs;
    for (auto r : rows) xs.push_back(pool[r].x);
    Var z = forward(con, forward(enc[index_of(m)], t.constant(vstack(xs))));
    for (int pr = 0; pr < 2; ++pr) {
      zs.push_back(z);
      for (auto r : rows) {
        prompts.push_back(pr);
        ys.push_back(pr == 0 ? pool[r].caption : instruct_response(pool[r].caption));
      }
    }
  }
  if (batch.with_phrases) {
    zs.push_back(codes);
    for (const auto& ph : phrase_corpus()) {
      prompts.push_back(static_cast<int>(Prompt::Backdoor));
      ys.push_back(ph);
    }
  }
  Var per_row = lm_loss_rows(dec, stack_rows(zs), prompts, ys);
  return mean(per_row);
}

}  // namespace detail

// Jointly trains encoders, connector and decoder, then freezes encoders and
// decoder.
inline Pipeline pretrain(const World& world, const PretrainConfig& cfg, PretrainLog* log = nullptr,
                         std::uint64_t init_seed = 1) {
  Pipeline p = Pipeline::init(world.config, init_seed);
  const auto& corpus = phrase_corpus();
  Rng rng(derive_seed(cfg.seed, "pretrain"));
  Mat codes(corpus.size(), kLatentDim);
  for (auto& e : codes.data) e = normal(rng, 1.0);

  std::vector<std::pair<Modality, std::size_t>> items;
  for (Modality m : kModalities) {
    const std::size_t n = std::min(cfg.samples_per_modality, world.split(m, Split::CleanTrain).size());
    for (std::size_t i = 0; i < n; ++i) items.emplace_back(m, i);
  }
  const std::size_t bs = cfg.batch_size == 0 ? items.size() : cfg.batch_size;
  Optimizer opt(cfg.optimizer, cfg.lr, cfg.momentum);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.batch_size != 0) std::shuffle(items.begin(), items.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < items.size(); start += bs) {
      detail::PretrainBatch batch;
      for (std::size_t k = start; k < std::min(items.size(), start + bs); ++k)
        batch.rows[index_of(items[k].first)].push_back(items[k].second);
      batch.with_phrases = true;
      Tape t;
      std::array<MlpNodes, kNumModalities> enc;
      for (Modality m : kModalities) enc[index_of(m)] = bind(t, p.encoder(m), true);
      MlpNodes con = bind(t, p.connector, true);
      DecoderNodes dec = bind(t, p.decoder, true);
      Var code_node = t.leaf(codes);
      Var code_in = code_node;
      if (cfg.code_jitter > 0.0) {
        Mat noise(codes.rows, codes.cols);
        for (auto& e : noise.data) e = normal(rng, cfg.code_jitter);
        code_in = add(code_node, t.constant(noise));
      }
      Var loss = detail::pretrain_loss(t, enc, con, dec, code_in, world, batch);
      if (!std::isfinite(loss.value()[0]))
        throw TrainingError("pretraining loss diverged at epoch " + std::to_string(epoch));
      t.backward(loss);
      epoch_loss += loss.value()[0];
      ++batches;

      std::vector<Mat*> params;
      std::vector<Mat> grads;
      for (Modality m : kModalities) {
        auto& e = p.encoders[index_of(m)];
        Mlp g = grads_of(enc[index_of(m)]);
        params.insert(params.end(), {&e.w1, &e.b1, &e.w2, &e.b2});
        grads.insert(grads.end(), {g.w1, g.b1, g.w2, g.b2});
      }
      Mlp gc = grads_of(con);
      params.insert(params.end(), {&p.connector.w1, &p.connector.b1, &p.connector.w2, &p.connector.b2});
      grads.insert(grads.end(), {gc.w1, gc.b1, gc.w2, gc.b2});
      Decoder gd = grads_of(dec);
      auto dp = p.decoder.params();
      auto gp = gd.params();
      for (std::size_t i = 0; i < dp.size(); ++i) {
        params.push_back(dp[i].mat);
        grads.push_back(*gp[i].mat);
      }
      params.push_back(&codes);
      grads.push_back(code_node.grad());
      opt.step(params, grads);
    }
    if (log) log->epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
  }
  p.frozen = true;
  return p;
}

}  // namespace xmb
