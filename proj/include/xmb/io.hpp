#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmb/attack.hpp"
#include "xmb/error.hpp"
#include "xmb/mat.hpp"
#include "xmb/pipeline.hpp"
#include "xmb/world.hpp"

namespace xmb::io {

using json = nlohmann::json;

inline constexpr const char* kCheckpointVersion = "xmb-ckpt/1";
inline constexpr const char* kDatasetVersion = "xmb-world/1";
inline constexpr const char* kCentroidVersion = "xmb-centroid/1";
inline constexpr const char* kPoisonSetVersion = "xmb-poison-set/1";
inline constexpr const char* kActsVersion = "xmb-acts/1";

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PrerequisiteError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write to '" + path.string() + "' failed");
}

inline json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed " + what + ": " + e.what());
  }
}

// Accessors that turn schema violations into ParseError.
template <typename T>
T field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ParseError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad field '") + key + "': " + e.what());
  }
}

template <typename T>
T field_or(const json& j, const char* key, T fallback) {
  return j.is_object() && j.contains(key) ? field<T>(j, key) : fallback;
}

inline void check_version(const json& j, const char* expected) {
  const auto v = field<std::string>(j, "version");
  if (v != expected) throw ParseError("version '" + v + "' where '" + expected + "' was expected");
}

inline std::string dump(const json& j) { return j.dump(1) + "\n"; }

// ---------------------------------------------------------------------------
// Config blocks.

inline json to_json(const WorldConfig& c) {
  return {{"n_concepts", c.n_concepts},         {"dims", c.dims},
          {"semantic_dim", c.semantic_dim},     {"noise_sigma", c.noise_sigma},
          {"gap_norm", c.gap_norm},             {"render_scale", c.render_scale},
          {"instance_spread", c.instance_spread}, {"concept_candidates", c.concept_candidates},
          {"image_base", c.image_base},
          {"poison_pool_size", c.poison_pool_size}, {"clean_train_size", c.clean_train_size},
          {"eval_size", c.eval_size},           {"seed", c.seed}};
}

inline WorldConfig world_config_from_json(const json& j, WorldConfig c = {}) {
  c.n_concepts = field_or(j, "n_concepts", c.n_concepts);
  c.dims = field_or(j, "dims", c.dims);
  c.semantic_dim = field_or(j, "semantic_dim", c.semantic_dim);
  c.noise_sigma = field_or(j, "noise_sigma", c.noise_sigma);
  c.gap_norm = field_or(j, "gap_norm", c.gap_norm);
  c.render_scale = field_or(j, "render_scale", c.render_scale);
  c.instance_spread = field_or(j, "instance_spread", c.instance_spread);
  c.concept_candidates = field_or(j, "concept_candidates", c.concept_candidates);
  c.image_base = field_or(j, "image_base", c.image_base);
  c.poison_pool_size = field_or(j, "poison_pool_size", c.poison_pool_size);
  c.clean_train_size = field_or(j, "clean_train_size", c.clean_train_size);
  c.eval_size = field_or(j, "eval_size", c.eval_size);
  c.seed = field_or(j, "seed", c.seed);
  c.validate();
  return c;
}

inline json to_json(const PretrainConfig& c) {
  return {{"epochs", c.epochs},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"optimizer", optimizer_name(c.optimizer)},
          {"momentum", c.momentum},
          {"samples_per_modality", c.samples_per_modality},
          {"code_jitter", c.code_jitter},
          {"seed", c.seed}};
}

inline PretrainConfig pretrain_config_from_json(const json& j, PretrainConfig c = {}) {
  c.epochs = field_or(j, "epochs", c.epochs);
  c.lr = field_or(j, "lr", c.lr);
  c.batch_size = field_or(j, "batch_size", c.batch_size);
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(field<std::string>(j, "optimizer"));
  c.momentum = field_or(j, "momentum", c.momentum);
  c.samples_per_modality = field_or(j, "samples_per_modality", c.samples_per_modality);
  c.code_jitter = field_or(j, "code_jitter", c.code_jitter);
  c.seed = field_or(j, "seed", c.seed);
  if (!(c.lr > 0.0)) throw ConfigError("pretrain lr must be > 0");
  if (c.code_jitter < 0.0) throw ConfigError("pretrain code_jitter must be >= 0");
  return c;
}

inline json to_json(const PoisonConfig& c) {
  return {{"door", std::string(modality_name(c.door))},
          {"anchor_index", c.anchor_index},
          {"variants", c.variants},
          {"clean_count", c.clean_count},
          {"clean_all_modalities", c.clean_all_modalities},
          {"clean_both_prompts", c.clean_both_prompts},
          {"w_bd", c.w_bd},
          {"w_clean", c.w_clean},
          {"lambda_feat", c.lambda_feat},
          {"lambda_drift", c.lambda_drift},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"optimizer", optimizer_name(c.optimizer)},
          {"momentum", c.momentum},
          {"seed", c.seed}};
}

inline PoisonConfig poison_config_from_json(const json& j, PoisonConfig c = {}) {
  if (j.contains("door")) c.door = parse_modality(field<std::string>(j, "door"));
  c.anchor_index = field_or(j, "anchor_index", c.anchor_index);
  c.variants = field_or(j, "variants", c.variants);
  c.clean_count = field_or(j, "clean_count", c.clean_count);
  c.clean_all_modalities = field_or(j, "clean_all_modalities", c.clean_all_modalities);
  c.clean_both_prompts = field_or(j, "clean_both_prompts", c.clean_both_prompts);
  c.w_bd = field_or(j, "w_bd", c.w_bd);
  c.w_clean = field_or(j, "w_clean", c.w_clean);
  c.lambda_feat = field_or(j, "lambda_feat", c.lambda_feat);
  c.lambda_drift = field_or(j, "lambda_drift", c.lambda_drift);
  c.epochs = field_or(j, "epochs", c.epochs);
  c.lr = field_or(j, "lr", c.lr);
  c.batch_size = field_or(j, "batch_size", c.batch_size);
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(field<std::string>(j, "optimizer"));
  c.momentum = field_or(j, "momentum", c.momentum);
  c.seed = field_or(j, "seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Datasets.

inline json to_json(const ModalitySample& s) {
  return {{"modality", std::string(modality_name(s.modality))},
          {"x", s.x.data},
          {"concept_id", s.concept_id},
          {"caption", s.caption}};
}

inline ModalitySample sample_from_json(const json& j) {
  ModalitySample s;
  s.modality = parse_modality(field<std::string>(j, "modality"));
  auto x = field<std::vector<double>>(j, "x");
  const std::size_t n = x.size();
  s.x = Mat(1, n, std::move(x));
  s.concept_id = field<std::size_t>(j, "concept_id");
  s.caption = field<Tokens>(j, "caption");
  return s;
}

inline std::string dataset_json(const World& w) {
  json samples = json::array();
  for (Modality m : kModalities)
    for (Split sp : {Split::PoisonPool, Split::CleanTrain, Split::Eval})
      for (const auto& s : w.split(m, sp)) {
        json e = to_json(s);
        e["split"] = std::string(split_name(sp));
        samples.push_back(std::move(e));
      }
  json j = {{"version", kDatasetVersion}, {"config", to_json(w.config)}, {"samples", std::move(samples)}};
  return j.dump() + "\n";
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace detail {

inline json mats_json(const std::vector<NamedConstMat>& mats) {
  json out = json::array();
  for (const auto& nm : mats)
    out.push_back({{"name", nm.name}, {"rows", nm.mat->rows}, {"cols", nm.mat->cols}, {"values", nm.mat->data}});
  return out;
}

inline void load_mats(const json& arr, const std::vector<NamedMat>& into, const std::string& where) {
  if (!arr.is_array()) throw ParseError(where + ": parameter list is not an array");
  for (const auto& nm : into) {
    const json* found = nullptr;
    for (const auto& e : arr)
      if (e.is_object() && e.contains("name") && e["name"] == nm.name) found = &e;
    if (!found) throw ParseError(where + ": missing parameter '" + nm.name + "'");
    const auto rows = field<std::size_t>(*found, "rows");
    const auto cols = field<std::size_t>(*found, "cols");
    auto values = field<std::vector<double>>(*found, "values");
    if (values.size() != rows * cols) throw ParseError(where + ": '" + nm.name + "' holds the wrong value count");
    if (rows != nm.mat->rows || cols != nm.mat->cols)
      throw ParseError(where + ": '" + nm.name + "' is " + std::to_string(rows) + "x" + std::to_string(cols) +
                       ", expected " + nm.mat->shape_str());
    nm.mat->data = std::move(values);
  }
}

inline std::vector<NamedConstMat> as_const(const std::vector<NamedMat>& v) {
  std::vector<NamedConstMat> out;
  for (const auto& nm : v) out.push_back({nm.name, nm.mat});
  return out;
}

}  // namespace detail

inline std::string checkpoint_json(const Pipeline& p) {
  std::vector<NamedConstMat> all = p.frozen_params();
  auto con = p.connector.params("connector");
  all.insert(all.end(), con.begin(), con.end());
  json j = {{"version", kCheckpointVersion},
            {"world_seed", p.world.seed},
            {"world_config", to_json(p.world)},
            {"frozen", p.frozen},
            {"params", detail::mats_json(all)}};
  if (p.reference) j["reference"] = detail::mats_json(p.reference->params("connector"));
  return dump(j);
}

inline Pipeline checkpoint_from_json(const std::string& text) {
  const json j = parse_json(text, "checkpoint");
  check_version(j, kCheckpointVersion);
  Pipeline p;
  p.world = world_config_from_json(field<json>(j, "world_config"));
  if (field<std::uint64_t>(j, "world_seed") != p.world.seed) throw ParseError("checkpoint world_seed disagrees with its config");
  for (Modality m : kModalities) {
    auto& e = p.encoders[index_of(m)];
    e.w1 = Mat(kEncoderHidden, p.world.dim(m));
    e.b1 = Mat(1, kEncoderHidden);
    e.w2 = Mat(kFeatureDim, kEncoderHidden);
    e.b2 = Mat(1, kFeatureDim);
  }
  auto shape_connector = [](Connector& c) {
    c.w1 = Mat(kConnectorHidden, kFeatureDim);
    c.b1 = Mat(1, kConnectorHidden);
    c.w2 = Mat(kLatentDim, kConnectorHidden);
    c.b2 = Mat(1, kLatentDim);
  };
  shape_connector(p.connector);
  p.decoder = Decoder::zeros();
  std::vector<NamedMat> all;
  for (Modality m : kModalities) {
    auto e = p.encoders[index_of(m)].params("encoder." + std::string(modality_name(m)));
    all.insert(all.end(), e.begin(), e.end());
  }
  auto d = p.decoder.params();
  all.insert(all.end(), d.begin(), d.end());
  auto c = p.connector.params("connector");
  all.insert(all.end(), c.begin(), c.end());
  detail::load_mats(field<json>(j, "params"), all, "checkpoint");
  p.frozen = field<bool>(j, "frozen");
  if (j.contains("reference")) {
    Connector ref;
    shape_connector(ref);
    detail::load_mats(j["reference"], ref.params("connector"), "checkpoint reference");
    p.reference = ref;
  }
  for (const auto& nm : all)
    if (!nm.mat->all_finite()) throw ParseError("checkpoint parameter '" + nm.name + "' is not finite");
  return p;
}

inline void save_checkpoint(const Pipeline& p, const std::filesystem::path& path) { write_file(path, checkpoint_json(p)); }
inline Pipeline load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_file(path)); }

// Connector-only blob (used for repaired connectors and masks).
inline json connector_json(const Connector& c) { return detail::mats_json(c.params("connector")); }
inline Connector connector_from_json(const json& j) {
  Connector c;
  c.w1 = Mat(kConnectorHidden, kFeatureDim);
  c.b1 = Mat(1, kConnectorHidden);
  c.w2 = Mat(kLatentDim, kConnectorHidden);
  c.b2 = Mat(1, kLatentDim);
  detail::load_mats(j, c.params("connector"), "connector");
  return c;
}

// ---------------------------------------------------------------------------
// Attack artifacts.

inline std::string centroid_json(const MaliciousCentroid& c) {
  json j = {{"version", kCentroidVersion},
            {"u_bar", c.u_bar.data},
            {"r_bar", c.r_bar},
            {"c_mal", c.c_mal.data},
            {"door", std::string(modality_name(c.door))},
            {"n", c.n_samples}};
  return dump(j);
}

inline MaliciousCentroid centroid_from_json(const std::string& text) {
  const json j = parse_json(text, "centroid");
  check_version(j, kCentroidVersion);
  MaliciousCentroid c;
  auto u = field<std::vector<double>>(j, "u_bar");
  auto cm = field<std::vector<double>>(j, "c_mal");
  if (u.size() != kLatentDim || cm.size() != kLatentDim) throw ParseError("centroid vectors must have 32 entries");
  c.u_bar = Mat(1, kLatentDim, std::move(u));
  c.c_mal = Mat(1, kLatentDim, std::move(cm));
  c.r_bar = field<double>(j, "r_bar");
  c.door = parse_modality(field<std::string>(j, "door"));
  c.n_samples = field<std::size_t>(j, "n");
  return c;
}

inline std::string poison_set_json(const PoisonSet& ps) {
  json poison = json::array(), clean = json::array();
  for (const auto& s : ps.poison) poison.push_back(to_json(s));
  for (const auto& s : ps.clean) clean.push_back(to_json(s));
  return json({{"version", kPoisonSetVersion}, {"poison", poison}, {"clean", clean}}).dump() + "\n";
}

inline PoisonSet poison_set_from_json(const std::string& text) {
  const json j = parse_json(text, "poison set");
  check_version(j, kPoisonSetVersion);
  PoisonSet ps;
  for (const auto& e : field<json>(j, "poison")) ps.poison.push_back(sample_from_json(e));
  for (const auto& e : field<json>(j, "clean")) ps.clean.push_back(sample_from_json(e));
  return ps;
}

inline std::vector<std::vector<double>> rows_of(const Mat& m) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < m.rows; ++r) out.emplace_back(m.row_span(r).begin(), m.row_span(r).end());
  return out;
}

inline Mat mat_from_rows(const std::vector<std::vector<double>>& rows, std::size_t cols) {
  Mat m(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) throw ParseError("ragged matrix row " + std::to_string(r));
    std::copy(rows[r].begin(), rows[r].end(), m.row_span(r).begin());
  }
  return m;
}

inline std::string acts_json(const ActivationArtifact& a) {
  json j = {{"version", kActsVersion},
            {"modality", std::string(modality_name(a.modality))},
            {"eps", a.eps},
            {"steps", a.steps},
            {"world_seed", a.world_seed},
            {"checkpoint_hash", a.checkpoint_hash},
            {"c_mal", a.c_mal.data},
            {"dim", a.x_clean.cols},
            {"x_clean", rows_of(a.x_clean)},
            {"x_adv", rows_of(a.x_adv)},
            {"trace", {{"loss", a.trace.loss}, {"cos", a.trace.cos}, {"l2", a.trace.l2}}}};
  return j.dump() + "\n";
}

inline ActivationArtifact acts_from_json(const std::string& text) {
  const json j = parse_json(text, "activation artifact");
  check_version(j, kActsVersion);
  ActivationArtifact a;
  a.modality = parse_modality(field<std::string>(j, "modality"));
  a.eps = field<double>(j, "eps");
  a.steps = field<std::size_t>(j, "steps");
  a.world_seed = field<std::uint64_t>(j, "world_seed");
  a.checkpoint_hash = field<std::uint64_t>(j, "checkpoint_hash");
  auto cm = field<std::vector<double>>(j, "c_mal");
  const std::size_t n = cm.size();
  a.c_mal = Mat(1, n, std::move(cm));
  const auto dim = field<std::size_t>(j, "dim");
  a.x_clean = mat_from_rows(field<std::vector<std::vector<double>>>(j, "x_clean"), dim);
  a.x_adv = mat_from_rows(field<std::vector<std::vector<double>>>(j, "x_adv"), dim);
  if (!a.x_clean.same_shape(a.x_adv)) throw ParseError("x_clean and x_adv differ in shape");
  const json& t = field<json>(j, "trace");
  a.trace.loss = field<std::vector<double>>(t, "loss");
  a.trace.cos = field<std::vector<double>>(t, "cos");
  a.trace.l2 = field<std::vector<double>>(t, "l2");
  return a;
}

}  // namespace xmb::io
