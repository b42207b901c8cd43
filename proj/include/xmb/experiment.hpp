#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmb/attack.hpp"
#include "xmb/defense.hpp"
#include "xmb/error.hpp"
#include "xmb/io.hpp"
#include "xmb/metrics.hpp"
#include "xmb/pipeline.hpp"
#include "xmb/rng.hpp"
#include "xmb/transforms.hpp"
#include "xmb/world.hpp"

namespace xmb {

inline constexpr const char* kReportVersion = "xmb-report/1";
inline constexpr const char* kOutputDirEnv = "XMB_OUT_DIR";

// ---------------------------------------------------------------------------
// Configuration.

struct DefenseGrid {
  Modality door = Modality::Image;
  Modality activation = Modality::Image;
  std::size_t n = 100;
  std::vector<std::size_t> finetune_epochs = {0, 1, 5, 20};
  std::vector<double> prune_ratios = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.75};
  std::size_t prune_finetune_epochs = 0;
  std::vector<Transform> transforms = {Transform::smooth(0.5),   Transform::smooth(1.0),  Transform::smooth(2.0),
                                       Transform::quantize(6),   Transform::quantize(4),  Transform::quantize(3),
                                       Transform::lowpass(0.75), Transform::lowpass(0.5), Transform::lowpass(0.25),
                                       Transform::lowpass(0.1)};
  RepairConfig repair;
};

struct AblationGrid {
  Modality door = Modality::Image;
  Modality activation = Modality::Audio;
  std::size_t n = 100;
  std::vector<std::string> objectives = {"l2_only", "cos_only", "combined"};
  std::vector<double> gammas = {0.01, 0.05, 0.1, 0.2, 0.5};
  std::size_t gamma_epochs = 20;
  std::vector<std::size_t> variants = {0, 10, 20, 50, 100};
};

struct ExperimentConfig {
  WorldConfig world;
  PretrainConfig pretrain;
  std::uint64_t init_seed = 1;
  std::array<PoisonConfig, kNumModalities> poison;  // indexed by door
  std::vector<Modality> doors = {Modality::Image, Modality::Audio, Modality::Text};
  std::vector<Modality> activations = {Modality::Image, Modality::Audio, Modality::Text};
  std::array<std::vector<double>, kNumModalities> eps_grid;  // indexed by activation modality
  ActivationConfig activation;
  std::size_t n_activation = 200;
  std::size_t n_leakage = 500;
  DefenseGrid defense;
  AblationGrid ablation;
  std::uint64_t master_seed = 2024;
  std::string output_dir = "xmb-out";

  ExperimentConfig() {
    // Anchors picked from a sweep of the first pool entries per door; see README.
    constexpr std::array<std::size_t, kNumModalities> anchors = {1, 7, 0};
    for (Modality m : kModalities) {
      poison[index_of(m)].door = m;
      poison[index_of(m)].anchor_index = anchors[index_of(m)];
      eps_grid[index_of(m)] = budget_grid(m);
      eps_grid[index_of(m)].insert(eps_grid[index_of(m)].begin(), 0.0);
    }
  }

  const PoisonConfig& poison_for(Modality door) const { return poison[index_of(door)]; }
  const std::vector<double>& eps_for(Modality m) const { return eps_grid[index_of(m)]; }
  double max_eps(Modality m) const { return *std::max_element(eps_for(m).begin(), eps_for(m).end()); }

  void validate() const {
    if (doors.empty() || activations.empty()) throw ConfigError("door and activation grids must be nonempty");
    for (Modality m : activations) {
      if (eps_for(m).empty()) throw ConfigError("eps grid for " + std::string(modality_name(m)) + " is empty");
      for (double e : eps_for(m))
        if (!(e >= 0.0)) throw ConfigError("eps values must be >= 0");
    }
    if (defense.finetune_epochs.empty() || defense.prune_ratios.empty() || defense.transforms.empty())
      throw ConfigError("defense grids must be nonempty");
    if (ablation.objectives.empty() || ablation.gammas.empty() || ablation.variants.empty())
      throw ConfigError("ablation grids must be nonempty");
    for (const auto& o : ablation.objectives)
      if (o != "l2_only" && o != "cos_only" && o != "combined") throw ConfigError("unknown objective '" + o + "'");
    for (double r : defense.prune_ratios)
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("prune ratios must be in [0, 1)");
    for (const auto& t : defense.transforms) t.validate();
    if (n_activation == 0 || n_leakage == 0 || defense.n == 0 || ablation.n == 0)
      throw ConfigError("sample counts must be > 0");
    if (n_activation > world.eval_size || defense.n > world.eval_size || ablation.n > world.eval_size)
      throw ConfigError("activation sample count exceeds the eval split");
    if (n_leakage > world.eval_size * kNumModalities) throw ConfigError("leakage count exceeds the eval splits");
    for (const auto& p : poison) p.validate();
    activation.validate();
  }

  // Every stochastic stage gets its seed from the master seed:
  // splitmix64(master ^ fnv1a(stage tag)).
  ExperimentConfig resolved() const {
    ExperimentConfig c = *this;
    c.world.seed = derive_seed(master_seed, "world");
    c.pretrain.seed = derive_seed(master_seed, "pretrain");
    c.init_seed = derive_seed(master_seed, "init");
    for (Modality m : kModalities) {
      c.poison[index_of(m)].door = m;
      c.poison[index_of(m)].seed = derive_seed(master_seed, "poison/" + std::string(modality_name(m)));
    }
    c.defense.repair.seed = derive_seed(master_seed, "defense");
    c.validate();
    return c;
  }
};

namespace io {

inline json to_json(const ActivationConfig& c) {
  return {{"steps", c.steps},
          {"eta", c.eta},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"rule", c.rule == StepRule::Sign ? "sign" : "gradient"}};
}

inline ActivationConfig activation_config_from_json(const json& j, ActivationConfig c = {}) {
  c.steps = field_or(j, "steps", c.steps);
  c.eta = field_or(j, "eta", c.eta);
  c.alpha = field_or(j, "alpha", c.alpha);
  c.beta = field_or(j, "beta", c.beta);
  if (j.contains("rule")) c.rule = parse_step_rule(field<std::string>(j, "rule"));
  return c;
}

inline std::vector<Modality> modalities_from_json(const json& j, const char* key, std::vector<Modality> fallback) {
  if (!j.contains(key)) return fallback;
  std::vector<Modality> out;
  for (const auto& s : field<std::vector<std::string>>(j, key)) out.push_back(parse_modality(s));
  return out;
}

inline json modalities_json(const std::vector<Modality>& ms) {
  json a = json::array();
  for (Modality m : ms) a.push_back(std::string(modality_name(m)));
  return a;
}

inline json to_json(const RepairConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"optimizer", optimizer_name(c.optimizer)},
          {"clean_count", c.clean_count},
          {"seed", c.seed}};
}

inline json to_json(const ExperimentConfig& c) {
  json poison = json::object(), eps = json::object();
  for (Modality m : kModalities) {
    poison[std::string(modality_name(m))] = to_json(c.poison_for(m));
    eps[std::string(modality_name(m))] = c.eps_for(m);
  }
  json transforms = json::array();
  for (const auto& t : c.defense.transforms) {
    std::string spec = t.name();
    if (t.kind == Transform::Kind::Smooth) spec += ":" + json(t.sigma).dump();
    if (t.kind == Transform::Kind::Quantize) spec += ":" + std::to_string(t.bits);
    if (t.kind == Transform::Kind::Lowpass) spec += ":" + json(t.keep_frac).dump();
    transforms.push_back(spec);
  }
  return {{"version", "xmb-experiment/1"},
          {"master_seed", c.master_seed},
          {"output_dir", c.output_dir},
          {"world", to_json(c.world)},
          {"pretrain", to_json(c.pretrain)},
          {"init_seed", c.init_seed},
          {"poison", poison},
          {"doors", modalities_json(c.doors)},
          {"activations", modalities_json(c.activations)},
          {"eps_grid", eps},
          {"activation", to_json(c.activation)},
          {"n_activation", c.n_activation},
          {"n_leakage", c.n_leakage},
          {"defense",
           {{"door", std::string(modality_name(c.defense.door))},
            {"activation", std::string(modality_name(c.defense.activation))},
            {"n", c.defense.n},
            {"finetune_epochs", c.defense.finetune_epochs},
            {"prune_ratios", c.defense.prune_ratios},
            {"prune_finetune_epochs", c.defense.prune_finetune_epochs},
            {"transforms", transforms},
            {"repair", to_json(c.defense.repair)}}},
          {"ablation",
           {{"door", std::string(modality_name(c.ablation.door))},
            {"activation", std::string(modality_name(c.ablation.activation))},
            {"n", c.ablation.n},
            {"objectives", c.ablation.objectives},
            {"gammas", c.ablation.gammas},
            {"gamma_epochs", c.ablation.gamma_epochs},
            {"variants", c.ablation.variants}}}};
}

// Fields absent from `j` keep their defaults. A "poison" object may carry
// shared fields plus per-door overrides keyed by modality name.
inline ExperimentConfig experiment_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig c;
  try {
    c.master_seed = field_or(j, "master_seed", c.master_seed);
    c.output_dir = field_or(j, "output_dir", c.output_dir);
    if (j.contains("world")) c.world = world_config_from_json(j.at("world"), c.world);
    if (j.contains("pretrain")) c.pretrain = pretrain_config_from_json(j.at("pretrain"), c.pretrain);
    if (j.contains("poison")) {
      const json& p = j.at("poison");
      for (Modality m : kModalities) {
        PoisonConfig pc = poison_config_from_json(p, c.poison_for(m));
        const std::string name(modality_name(m));
        if (p.contains(name)) pc = poison_config_from_json(p.at(name), pc);
        pc.door = m;
        c.poison[index_of(m)] = pc;
      }
    }
    c.doors = modalities_from_json(j, "doors", c.doors);
    c.activations = modalities_from_json(j, "activations", c.activations);
    if (j.contains("eps_grid"))
      for (Modality m : kModalities) {
        const std::string name(modality_name(m));
        if (j.at("eps_grid").contains(name))
          c.eps_grid[index_of(m)] = field<std::vector<double>>(j.at("eps_grid"), name.c_str());
      }
    if (j.contains("activation")) c.activation = activation_config_from_json(j.at("activation"), c.activation);
    c.n_activation = field_or(j, "n_activation", c.n_activation);
    c.n_leakage = field_or(j, "n_leakage", c.n_leakage);
    if (j.contains("defense")) {
      const json& d = j.at("defense");
      if (d.contains("door")) c.defense.door = parse_modality(field<std::string>(d, "door"));
      if (d.contains("activation")) c.defense.activation = parse_modality(field<std::string>(d, "activation"));
      c.defense.n = field_or(d, "n", c.defense.n);
      c.defense.finetune_epochs = field_or(d, "finetune_epochs", c.defense.finetune_epochs);
      c.defense.prune_ratios = field_or(d, "prune_ratios", c.defense.prune_ratios);
      c.defense.prune_finetune_epochs = field_or(d, "prune_finetune_epochs", c.defense.prune_finetune_epochs);
      if (d.contains("transforms")) {
        c.defense.transforms.clear();
        for (const auto& s : field<std::vector<std::string>>(d, "transforms"))
          c.defense.transforms.push_back(Transform::parse(s));
      }
      if (d.contains("repair")) {
        const json& r = d.at("repair");
        c.defense.repair.lr = field_or(r, "lr", c.defense.repair.lr);
        c.defense.repair.batch_size = field_or(r, "batch_size", c.defense.repair.batch_size);
        if (r.contains("optimizer")) c.defense.repair.optimizer = parse_optimizer(field<std::string>(r, "optimizer"));
        c.defense.repair.clean_count = field_or(r, "clean_count", c.defense.repair.clean_count);
      }
    }
    if (j.contains("ablation")) {
      const json& a = j.at("ablation");
      if (a.contains("door")) c.ablation.door = parse_modality(field<std::string>(a, "door"));
      if (a.contains("activation")) c.ablation.activation = parse_modality(field<std::string>(a, "activation"));
      c.ablation.n = field_or(a, "n", c.ablation.n);
      c.ablation.objectives = field_or(a, "objectives", c.ablation.objectives);
      c.ablation.gammas = field_or(a, "gammas", c.ablation.gammas);
      c.ablation.gamma_epochs = field_or(a, "gamma_epochs", c.ablation.gamma_epochs);
      c.ablation.variants = field_or(a, "variants", c.ablation.variants);
    }
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

}  // namespace io

// ---------------------------------------------------------------------------
// Output tree with resumable writes.

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class Workspace {
 public:
  explicit Workspace(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path_of(const std::string& rel) const { return root_ / rel; }
  bool has(const std::string& rel) const { return std::filesystem::exists(path_of(rel)); }

  std::string read(const std::string& rel, const std::string& producer = "") const {
    if (!has(rel))
      throw PrerequisiteError("missing '" + path_of(rel).string() + "'" +
                              (producer.empty() ? "" : "; run `xmb " + producer + "` first"));
    return io::read_file(path_of(rel));
  }

  // Writes `text` at `rel`. An existing file with identical bytes is left in
  // place; one with different bytes is an invariant violation.
  bool put(const std::string& rel, const std::string& text) {
    if (has(rel)) {
      const std::string old = io::read_file(path_of(rel));
      if (fnv1a(old) == fnv1a(text) && old == text) return false;
      throw InvariantError("'" + path_of(rel).string() +
                           "' exists with different content; remove it or pick another output directory");
    }
    io::write_file(path_of(rel), text);
    return true;
  }

  // Cached stage: `rel` plus a sidecar `rel.key` naming the inputs. A
  // matching key returns the stored artifact, a different key fails loudly.
  std::string stage(const std::string& rel, const std::string& key, const std::function<std::string()>& produce) {
    const std::string key_rel = rel + ".key";
    const std::string stamp = hex64(fnv1a(key)) + "\n";
    if (has(key_rel)) {
      const std::string old = io::read_file(path_of(key_rel));
      if (old != stamp)
        throw InvariantError("'" + path_of(rel).string() +
                             "' was produced from different inputs; remove it or pick another output directory");
      if (has(rel)) return io::read_file(path_of(rel));
    }
    const std::string text = produce();
    put(rel, text);
    if (!has(key_rel)) io::write_file(path_of(key_rel), stamp);
    return text;
  }

  // Unconditional write for derived summaries (checks.txt).
  void overwrite(const std::string& rel, const std::string& text) { io::write_file(path_of(rel), text); }

 private:
  std::filesystem::path root_;
};

// ---------------------------------------------------------------------------
// CSV helpers.

inline std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

class Csv {
 public:
  Csv(const std::string& table, const std::vector<std::string>& header) {
    text_ = "# " + std::string(kReportVersion) + " " + table + "\n";
    row(header);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) text_ += (i ? "," : "") + cells[i];
    text_ += "\n";
  }
  const std::string& str() const { return text_; }

 private:
  std::string text_;
};

struct SoftCheck {
  std::string name;
  bool ok = false;
  std::string detail;
};

inline std::string render_checks(const std::string& table, const std::vector<SoftCheck>& checks) {
  std::string out = "[" + table + "]\n";
  for (const auto& c : checks) out += std::string(c.ok ? "ok   " : "FLAG ") + c.name + ": " + c.detail + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Records.

struct ReportRow {
  std::string id;
  Modality door = Modality::Image;
  Modality activation = Modality::Image;
  double eps = 0.0;
  std::size_t steps = 0;
  double exact_asr = 0.0, relaxed_asr = 0.0;
  double init_cos = 0.0, final_cos = 0.0, init_l2 = 0.0, final_l2 = 0.0;
  double leakage = 0.0;
  double utility = 0.0;
  DriftReport drift;
  double wall_time = 0.0;  // seconds; logged, kept out of the CSVs
};

inline const std::vector<std::string>& report_header() {
  static const std::vector<std::string> h = {"id",           "door",        "activation",  "eps",      "steps",
                                             "exact_asr",    "relaxed_asr", "init_cos",    "final_cos", "init_l2",
                                             "final_l2",     "leakage",     "utility",     "drift_flat_cos",
                                             "drift_row_cos", "drift_rel_frob"};
  return h;
}

inline std::vector<std::string> report_cells(const ReportRow& r) {
  return {r.id,
          std::string(modality_name(r.door)),
          std::string(modality_name(r.activation)),
          fmt(r.eps),
          std::to_string(r.steps),
          fmt(r.exact_asr, 4),
          fmt(r.relaxed_asr, 4),
          fmt(r.init_cos),
          fmt(r.final_cos),
          fmt(r.init_l2),
          fmt(r.final_l2),
          fmt(r.leakage, 4),
          fmt(r.utility, 4),
          fmt(r.drift.flattened_cosine),
          fmt(r.drift.mean_rowwise_cosine),
          fmt(r.drift.rel_frobenius)};
}

// Per-door outcome of poisoning.
struct DoorSummary {
  double utility_clean = 0.0;
  double utility = 0.0;
  double leakage = 0.0;
  DriftReport drift;
};

struct DoorArtifacts {
  Pipeline pipeline;  // poisoned, with the clean reference connector
  MaliciousCentroid centroid;
  DoorSummary summary;
  std::string key;
};

// Aggregate of one (door, activation, ε) activation run.
struct CellResult {
  Modality door = Modality::Image, activation = Modality::Image;
  double eps = 0.0;
  std::size_t steps = 0, n = 0;
  double exact = 0.0, relaxed = 0.0;
  double init_cos = 0.0, final_cos = 0.0, init_l2 = 0.0, final_l2 = 0.0;
};

namespace io {

inline std::string cell_json(const CellResult& c) {
  return dump({{"door", std::string(modality_name(c.door))},
               {"activation", std::string(modality_name(c.activation))},
               {"eps", c.eps},
               {"steps", c.steps},
               {"n", c.n},
               {"exact", c.exact},
               {"relaxed", c.relaxed},
               {"init_cos", c.init_cos},
               {"final_cos", c.final_cos},
               {"init_l2", c.init_l2},
               {"final_l2", c.final_l2}});
}

inline CellResult cell_from_json(const std::string& text) {
  const json j = parse_json(text, "cell");
  CellResult c;
  c.door = parse_modality(field<std::string>(j, "door"));
  c.activation = parse_modality(field<std::string>(j, "activation"));
  c.eps = field<double>(j, "eps");
  c.steps = field<std::size_t>(j, "steps");
  c.n = field<std::size_t>(j, "n");
  c.exact = field<double>(j, "exact");
  c.relaxed = field<double>(j, "relaxed");
  c.init_cos = field<double>(j, "init_cos");
  c.final_cos = field<double>(j, "final_cos");
  c.init_l2 = field<double>(j, "init_l2");
  c.final_l2 = field<double>(j, "final_l2");
  return c;
}

inline std::string door_summary_json(const DoorSummary& s) {
  return dump({{"utility_clean", s.utility_clean},
               {"utility", s.utility},
               {"leakage", s.leakage},
               {"drift",
                {{"flattened_cosine", s.drift.flattened_cosine},
                 {"mean_rowwise_cosine", s.drift.mean_rowwise_cosine},
                 {"rel_frobenius", s.drift.rel_frobenius},
                 {"skipped_rows", s.drift.skipped_rows}}}});
}

inline DoorSummary door_summary_from_json(const std::string& text) {
  const json j = parse_json(text, "door summary");
  DoorSummary s;
  s.utility_clean = field<double>(j, "utility_clean");
  s.utility = field<double>(j, "utility");
  s.leakage = field<double>(j, "leakage");
  const json& d = field<json>(j, "drift");
  s.drift.flattened_cosine = field<double>(d, "flattened_cosine");
  s.drift.mean_rowwise_cosine = field<double>(d, "mean_rowwise_cosine");
  s.drift.rel_frobenius = field<double>(d, "rel_frobenius");
  s.drift.skipped_rows = field<std::size_t>(d, "skipped_rows");
  return s;
}

}  // namespace io

// ---------------------------------------------------------------------------
// Sample selection.

inline std::vector<ModalitySample> eval_samples(const World& w) {
  std::vector<ModalitySample> out;
  for (Modality m : kModalities) {
    const auto& s = w.split(m, Split::Eval);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

// `n` eval samples taken round-robin over the modalities.
inline std::vector<ModalitySample> leakage_samples(const World& w, std::size_t n) {
  std::vector<ModalitySample> out;
  for (std::size_t i = 0; out.size() < n; ++i) {
    bool any = false;
    for (Modality m : kModalities) {
      const auto& s = w.split(m, Split::Eval);
      if (i < s.size() && out.size() < n) {
        out.push_back(s[i]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

inline Mat activation_inputs(const World& w, Modality m, std::size_t n) {
  const auto& s = w.split(m, Split::Eval);
  if (n > s.size()) throw ConfigError("asked for more activation samples than the eval split holds");
  return stack_inputs(std::vector<ModalitySample>(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n)));
}

// The defender's clean data: the tail of each clean-training split.
inline std::vector<ModalitySample> defender_clean(const World& w, std::size_t per_modality) {
  std::vector<ModalitySample> out;
  for (Modality m : kModalities) {
    const auto& s = w.split(m, Split::CleanTrain);
    const std::size_t k = std::min(per_modality, s.size());
    out.insert(out.end(), s.end() - static_cast<std::ptrdiff_t>(k), s.end());
  }
  return out;
}

inline double mean_activation_loss(const Mat& z, const Mat& c_mal, double alpha, double beta) {
  Tape t;
  const Mat rows = activation_loss_rows(t.constant(z), t.constant(c_mal), alpha, beta).value();
  double s = 0.0;
  for (double v : rows.data) s += v;
  return s / static_cast<double>(rows.rows);
}

// Activation loss shifted by alpha so that a perfect match scores zero.
inline double norm_loss(const Mat& z, const Mat& c_mal, double alpha, double beta) {
  return alpha + mean_activation_loss(z, c_mal, alpha, beta);
}

inline std::string eps_tag(double eps) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", eps);
  return buf;
}

// ---------------------------------------------------------------------------
// Orchestration.

using Logger = std::function<void(const std::string&)>;

class Experiment {
 public:
  explicit Experiment(const ExperimentConfig& cfg, Logger log = {})
      : cfg_(cfg.resolved()), ws_(cfg_.output_dir), log_(std::move(log)) {
    io::json j = io::to_json(cfg_);
    j.erase("output_dir");
    ws_.put("config.json", io::dump(j));
  }

  const ExperimentConfig& config() const { return cfg_; }
  Workspace& workspace() { return ws_; }

  const World& world() {
    if (!world_) world_ = std::make_unique<World>(generate_world(cfg_.world));
    return *world_;
  }

  std::string clean_key() const {
    return "clean|" + io::to_json(cfg_.world).dump() + "|" + io::to_json(cfg_.pretrain).dump() + "|" +
           std::to_string(cfg_.init_seed);
  }

  const Pipeline& clean() {
    if (!clean_) {
      const std::string text = ws_.stage("ckpt/clean.json", clean_key(), [&] {
        note("pretraining");
        return io::checkpoint_json(pretrain(world(), cfg_.pretrain, nullptr, cfg_.init_seed));
      });
      clean_ = std::make_unique<Pipeline>(io::checkpoint_from_json(text));
    }
    return *clean_;
  }

  const DoorArtifacts& door(Modality d) {
    auto it = doors_.find(d);
    if (it != doors_.end()) return it->second;
    const PoisonConfig& pc = cfg_.poison_for(d);
    const std::string name(modality_name(d));
    DoorArtifacts a;
    a.key = clean_key() + "|poison|" + io::to_json(pc).dump();
    const PoisonSet ps = build_poison_set(world(), pc);
    const std::string ck = ws_.stage("ckpt/poisoned_" + name + ".json", a.key, [&] {
      note("poisoning door " + name);
      Pipeline p = clean();
      poison_connector(p, ps, pc);
      return io::checkpoint_json(p);
    });
    a.pipeline = io::checkpoint_from_json(ck);
    const std::string cj = ws_.stage("centroid/" + name + ".json", a.key, [&] {
      return io::centroid_json(extract_centroid(a.pipeline, a.pipeline.connector, ps));
    });
    a.centroid = io::centroid_from_json(cj);
    const std::string sj =
        ws_.stage("stats/" + name + ".json", a.key + "|leak" + std::to_string(cfg_.n_leakage), [&] {
          const auto ev = eval_samples(world());
          DoorSummary s;
          s.utility_clean = utility(a.pipeline, *a.pipeline.reference, ev).exact_match;
          s.utility = utility(a.pipeline, a.pipeline.connector, ev).exact_match;
          s.leakage = leakage(a.pipeline, a.pipeline.connector, leakage_samples(world(), cfg_.n_leakage));
          s.drift = drift(*a.pipeline.reference, a.pipeline.connector);
          return io::door_summary_json(s);
        });
    a.summary = io::door_summary_from_json(sj);
    return doors_.emplace(d, std::move(a)).first->second;
  }

  ActivationConfig activation_for(Modality m, double eps) const {
    ActivationConfig ac = cfg_.activation;
    ac.modality = m;
    ac.eps = eps;
    ac.transform.reset();
    return ac;
  }

  CellResult cell(Modality d, Modality m, double eps, double* wall = nullptr) {
    const DoorArtifacts& a = door(d);
    const ActivationConfig ac = activation_for(m, eps);
    const std::string rel = "cells/" + std::string(modality_name(d)) + "_" + std::string(modality_name(m)) + "_" +
                            eps_tag(eps) + ".json";
    const std::string key = a.key + "|act|" + io::to_json(ac).dump() + "|" + std::string(modality_name(m)) + "|" +
                            eps_tag(eps) + "|" + std::to_string(cfg_.n_activation);
    const auto t0 = std::chrono::steady_clock::now();
    const std::string text = ws_.stage(rel, key, [&] {
      note("activating " + std::string(modality_name(d)) + " -> " + std::string(modality_name(m)) + " eps " +
           eps_tag(eps));
      const Mat x = activation_inputs(world(), m, cfg_.n_activation);
      const Mat adv = pgd_activate(a.pipeline, a.pipeline.connector, x, ac, a.centroid.c_mal).x_adv;
      const auto rr = reachability(a.pipeline, a.pipeline.connector, m, x, adv, a.centroid.c_mal);
      const auto as =
          asr(generate(a.pipeline.decoder, latents(a.pipeline, a.pipeline.connector, adv, m), Prompt::Backdoor));
      CellResult c{d, m, eps, ac.steps, x.rows, as.exact, as.relaxed, rr.mean_init_cos(), rr.mean_final_cos(),
                   rr.mean_init_l2(), rr.mean_final_l2()};
      return io::cell_json(c);
    });
    if (wall) *wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return io::cell_from_json(text);
  }

  // Stored activation batch for the defense tables (max ε).
  ActivationArtifact acts(Modality d, Modality m, std::size_t n) {
    const DoorArtifacts& a = door(d);
    const double eps = cfg_.max_eps(m);
    const ActivationConfig ac = activation_for(m, eps);
    const std::string rel = "acts/" + std::string(modality_name(d)) + "_" + std::string(modality_name(m)) + ".json";
    const std::string key = a.key + "|acts|" + io::to_json(ac).dump() + "|" + eps_tag(eps) + "|" + std::to_string(n);
    const std::string text = ws_.stage(rel, key, [&] {
      ActivationArtifact art;
      art.modality = m;
      art.eps = eps;
      art.steps = ac.steps;
      art.world_seed = a.pipeline.world.seed;
      art.checkpoint_hash = pipeline_hash(a.pipeline);
      art.c_mal = a.centroid.c_mal;
      art.x_clean = activation_inputs(world(), m, n);
      auto r = pgd_activate(a.pipeline, a.pipeline.connector, art.x_clean, ac, a.centroid.c_mal);
      art.x_adv = r.x_adv;
      art.trace = r.trace;
      return io::acts_json(art);
    });
    return io::acts_from_json(text);
  }

  // -------------------------------------------------------------------------
  // Tables.

  std::vector<CellResult> table_reach() {
    std::vector<CellResult> cells;
    Csv csv("reach", {"door", "activation", "eps", "n", "init_cos", "final_cos", "init_l2", "final_l2",
                      "l2_reduction"});
    std::vector<SoftCheck> checks;
    double init_sum = 0.0, final_sum = 0.0;
    for (Modality d : cfg_.doors)
      for (Modality m : cfg_.activations) {
        const CellResult c = cell(d, m, cfg_.max_eps(m));
        cells.push_back(c);
        init_sum += c.init_l2;
        final_sum += c.final_l2;
        csv.row({std::string(modality_name(d)), std::string(modality_name(m)), fmt(c.eps), std::to_string(c.n),
                 fmt(c.init_cos), fmt(c.final_cos), fmt(c.init_l2), fmt(c.final_l2),
                 fmt(c.init_l2 > 0 ? 1.0 - c.final_l2 / c.init_l2 : 0.0)});
        const std::string id = std::string(modality_name(d)) + "->" + std::string(modality_name(m));
        checks.push_back({"cos rises " + id, c.final_cos > c.init_cos, fmt(c.init_cos, 4) + " -> " + fmt(c.final_cos, 4)});
        checks.push_back({"l2 falls " + id, c.final_l2 < c.init_l2, fmt(c.init_l2, 4) + " -> " + fmt(c.final_l2, 4)});
      }
    const double red = init_sum > 0 ? 1.0 - final_sum / init_sum : 0.0;
    checks.push_back({"aggregate l2 reduction >= 50%", red >= 0.5, fmt(100.0 * red, 2) + "%"});
    write_table("reach", csv, checks);
    return cells;
  }

  std::vector<ReportRow> table_asr() {
    std::vector<ReportRow> rows;
    Csv csv("asr", report_header());
    std::vector<SoftCheck> checks;
    AsrMatrix relaxed{};
    for (Modality d : cfg_.doors) {
      const DoorArtifacts& a = door(d);
      const DoorSummary& s = a.summary;
      for (Modality m : cfg_.activations) {
        std::vector<double> eps = cfg_.eps_for(m);
        std::sort(eps.begin(), eps.end());
        double prev = -1.0;
        bool monotone = true;
        for (double e : eps) {
          double wall = 0.0;
          const CellResult c = cell(d, m, e, &wall);
          ReportRow r;
          r.id = std::string(modality_name(d)) + "->" + std::string(modality_name(m)) + "@" + eps_tag(e);
          r.door = d;
          r.activation = m;
          r.eps = e;
          r.steps = c.steps;
          r.exact_asr = c.exact;
          r.relaxed_asr = c.relaxed;
          r.init_cos = c.init_cos;
          r.final_cos = c.final_cos;
          r.init_l2 = c.init_l2;
          r.final_l2 = c.final_l2;
          r.leakage = s.leakage;
          r.utility = s.utility;
          r.drift = s.drift;
          r.wall_time = wall;
          note(r.id + " relaxed " + fmt(r.relaxed_asr, 3) + " (" + fmt(wall, 2) + " s)");
          csv.row(report_cells(r));
          rows.push_back(r);
          if (c.relaxed < prev) monotone = false;
          prev = c.relaxed;
          if (e == 0.0) {
            const double base = relaxed_asr(a.pipeline, a.pipeline.connector,
                                            activation_inputs(world(), m, cfg_.n_activation), m);
            checks.push_back({"eps=0 equals unperturbed baseline " + r.id, c.relaxed == base,
                              "relaxed " + fmt(c.relaxed, 4) + ", unperturbed " + fmt(base, 4) + ", door leakage " +
                                  fmt(s.leakage, 4)});
          }
        }
        checks.push_back({"asr non-decreasing in eps " + std::string(modality_name(d)) + "->" +
                              std::string(modality_name(m)),
                          monotone, monotone ? "yes" : "no"});
        relaxed[index_of(d)][index_of(m)] = cell(d, m, cfg_.max_eps(m)).relaxed;
      }
    }
    write_table("asr", csv, checks);
    Csv cm("cmr", {"door", "image", "audio", "text"});
    const AsrMatrix c = cmr(relaxed);
    for (Modality d : cfg_.doors) {
      std::vector<std::string> row = {std::string(modality_name(d))};
      for (Modality m : kModalities) {
        const bool have = std::find(cfg_.activations.begin(), cfg_.activations.end(), m) != cfg_.activations.end() &&
                          std::find(cfg_.activations.begin(), cfg_.activations.end(), d) != cfg_.activations.end();
        row.push_back(have ? fmt(c[index_of(d)][index_of(m)], 4) : "");
      }
      cm.row(row);
    }
    ws_.stage("tables/cmr.csv", cm.str(), [&] { return cm.str(); });
    return rows;
  }

  struct ObjectiveRow {
    Modality activation = Modality::Image;
    std::string objective;
    double alpha = 0.0, beta = 0.0;
    double norm_loss = 0.0, final_cos = 0.0, final_l2 = 0.0, exact = 0.0, relaxed = 0.0;
  };

  struct AblationResult {
    std::vector<ObjectiveRow> objectives;
    std::map<double, std::vector<double>> gamma_curves;       // backdoor loss per epoch
    std::map<std::size_t, std::vector<double>> variant_curves;  // activation loss per PGD step
  };

  AblationResult table_ablation() {
    AblationResult res;
    const AblationGrid& g = cfg_.ablation;
    const Modality d = g.door;
    const DoorArtifacts& a = door(d);
    std::vector<SoftCheck> checks;

    // Objective arms share samples, budget and steps per activation modality;
    // every arm is scored with the same norm loss at its final inputs.
    Csv obj("ablation_objective", {"activation", "objective", "alpha", "beta", "norm_loss", "final_cos", "final_l2",
                                   "exact_asr", "relaxed_asr"});
    for (Modality m : cfg_.activations) {
      const Mat x = activation_inputs(world(), m, g.n);
      const Mat z0 = latents(a.pipeline, a.pipeline.connector, x, m);
      std::vector<ObjectiveRow> arms;
      for (const auto& name : g.objectives) {
        ActivationConfig ac = activation_for(m, cfg_.max_eps(m));
        if (name == "l2_only") {
          ac.alpha = 0.0;
          ac.beta = 1.0;
        } else if (name == "cos_only") {
          ac.alpha = 1.0;
          ac.beta = 0.0;
        }
        note("ablation objective " + std::string(modality_name(m)) + " " + name);
        const Mat adv = pgd_activate(a.pipeline, a.pipeline.connector, x, ac, a.centroid.c_mal).x_adv;
        const Mat z = latents(a.pipeline, a.pipeline.connector, adv, m);
        const auto rr = reachability_from_latents(z0, z, a.centroid.c_mal);
        const auto as = asr(generate(a.pipeline.decoder, z, Prompt::Backdoor));
        ObjectiveRow r{m,
                       name,
                       ac.alpha,
                       ac.beta,
                       norm_loss(z, a.centroid.c_mal, cfg_.activation.alpha, cfg_.activation.beta),
                       rr.mean_final_cos(),
                       rr.mean_final_l2(),
                       as.exact,
                       as.relaxed};
        arms.push_back(r);
        obj.row({std::string(modality_name(m)), r.objective, fmt(r.alpha, 3), fmt(r.beta, 3), fmt(r.norm_loss),
                 fmt(r.final_cos), fmt(r.final_l2), fmt(r.exact, 4), fmt(r.relaxed, 4)});
      }
      const auto combined =
          std::find_if(arms.begin(), arms.end(), [](const ObjectiveRow& r) { return r.objective == "combined"; });
      for (const auto& r : arms) {
        const std::string id = std::string(modality_name(m)) + " " + r.objective;
        checks.push_back({"final cos >= 0.9 " + id, r.final_cos >= 0.9, fmt(r.final_cos, 4)});
        if (combined != arms.end() && r.objective != "combined")
          checks.push_back({"combined norm loss <= " + id, combined->norm_loss <= r.norm_loss,
                            fmt(combined->norm_loss, 6) + " vs " + fmt(r.norm_loss, 6)});
      }
      res.objectives.insert(res.objectives.end(), arms.begin(), arms.end());
    }
    write_table("ablation_objective", obj, checks);
    const Modality m = g.activation;
    const Mat x = activation_inputs(world(), m, g.n);
    const double eps = cfg_.max_eps(m);

    // Poisoning rate: fixed poison set, clean count varied.
    checks.clear();
    Csv gam("ablation_gamma", {"gamma", "epoch", "backdoor_loss"});
    for (double gamma : g.gammas) {
      PoisonConfig pc = cfg_.poison_for(d);
      pc.clean_count = clean_count_for_rate(pc.variants, gamma);
      pc.epochs = g.gamma_epochs;
      note("ablation gamma " + fmt(gamma, 3) + " (" + std::to_string(pc.clean_count) + " clean)");
      Pipeline p = clean();
      const auto r = poison_connector(p, build_poison_set(world(), pc), pc);
      auto& curve = res.gamma_curves[gamma];
      for (std::size_t e = 0; e < r.log.size(); ++e) {
        curve.push_back(r.log[e].backdoor);
        gam.row({fmt(gamma, 3), std::to_string(e + 1), fmt(r.log[e].backdoor)});
      }
    }
    checks.push_back({"gamma series count", res.gamma_curves.size() == g.gammas.size(),
                      std::to_string(res.gamma_curves.size()) + " series"});
    write_table("ablation_gamma", gam, checks);

    // Variant count: poison with K variants, centroid from K + 1 latents,
    // then track the activation loss over PGD steps.
    checks.clear();
    Csv var("ablation_k", {"k", "step", "activation_loss"});
    for (std::size_t k : g.variants) {
      PoisonConfig pc = cfg_.poison_for(d);
      pc.variants = k;
      note("ablation K " + std::to_string(k));
      Pipeline p = clean();
      const PoisonSet ps = build_poison_set(world(), pc);
      poison_connector(p, ps, pc);
      const MaliciousCentroid c = extract_centroid(p, p.connector, ps);
      const auto r = pgd_activate(p, p.connector, x, activation_for(m, eps), c.c_mal);
      auto& curve = res.variant_curves[k];
      curve = r.trace.loss;
      for (std::size_t s = 0; s < curve.size(); ++s) var.row({std::to_string(k), std::to_string(s), fmt(curve[s])});
    }
    if (res.variant_curves.count(0) && res.variant_curves.count(50)) {
      const double l0 = res.variant_curves[0].back(), l50 = res.variant_curves[50].back();
      checks.push_back({"K=0 final loss above K=50", l0 > l50, fmt(l0, 5) + " vs " + fmt(l50, 5)});
    }
    write_table("ablation_k", var, checks);
    return res;
  }

  std::vector<DefenseRow> table_defense() {
    const DefenseGrid& g = cfg_.defense;
    const DoorArtifacts& a = door(g.door);
    const Pipeline& p = a.pipeline;
    const ActivationArtifact art = acts(g.door, g.activation, g.n);
    const auto ev = eval_samples(world());
    const auto clean_data = defender_clean(world(), g.repair.clean_count);
    const double undefended = relaxed_asr(p, p.connector, art.x_adv, art.modality);
    const double u0 = utility(p, p.connector, ev).exact_match;
    std::vector<DefenseRow> rows;
    rows.push_back({"none", "-", u0, 0.0, undefended, std::nullopt, undefended, std::nullopt});

    for (std::size_t e : g.finetune_epochs) {
      note("defense finetune " + std::to_string(e));
      const Connector c = finetune(p, p.connector, clean_data, e, g.repair.lr, g.repair.batch_size,
                                   g.repair.optimizer, g.repair.seed);
      rows.push_back(evaluate_model_defense(p, c, "finetune", "epochs=" + std::to_string(e), art,
                                            activation_for(art.modality, art.eps), ev));
    }
    for (double r : g.prune_ratios) {
      note("defense fineprune " + fmt(r, 2));
      const auto pr = fineprune(p, p.connector, clean_data, r, g.prune_finetune_epochs, g.repair.lr,
                                g.repair.batch_size, g.repair.optimizer, g.repair.seed);
      char setting[32];
      std::snprintf(setting, sizeof setting, "ratio=%g", r);
      rows.push_back(evaluate_model_defense(p, pr.connector, "fineprune", setting, art,
                                            activation_for(art.modality, art.eps), ev));
    }
    for (const auto& t : g.transforms) {
      note("defense " + t.name() + " " + t.setting());
      rows.push_back(evaluate_input_defense(p, art, t, ev, true, activation_for(art.modality, art.eps)));
    }

    Csv csv("defense", {"defense", "setting", "utility", "utility_delta", "asr", "asr_star", "recovery"});
    for (const auto& r : rows)
      csv.row({r.defense, r.setting, fmt(r.utility, 4), fmt(r.utility_delta, 4), fmt(r.asr, 4),
               r.asr_star ? fmt(*r.asr_star, 4) : "", r.asr_star ? fmt(r.recovery(), 4) : ""});

    std::vector<SoftCheck> checks;
    const auto collapse = defense_collapse(rows);
    checks.push_back({"fineprune collapse with utility cost", collapse.has_value(),
                      collapse ? "at " + *collapse : "none"});
    const auto bypass = defense_bypass(rows);
    checks.push_back({"input transform blocked then bypassed", bypass.has_value(), bypass ? *bypass : "none"});
    checks.push_back({"finetune endpoints non-increasing", finetune_endpoints_ok(rows), ""});
    for (const auto& r : rows)
      if (r.defense == "fineprune" && r.setting == "ratio=0")
        checks.push_back({"fineprune ratio 0 matches undefended", std::abs(r.asr - undefended) <= 0.005,
                          fmt(r.asr, 4) + " vs " + fmt(undefended, 4)});
    for (const auto& r : rows)
      if (r.defense == "finetune")
        checks.push_back({"finetune utility band " + r.setting, std::abs(r.utility_delta) <= 0.05,
                          "delta " + fmt(r.utility_delta, 4)});
    write_table("defense", csv, checks);
    return rows;
  }

  // Setting label of the first fineprune row whose ASR sits more than 50
  // points under ratio 0 while its utility is strictly lower.
  static std::optional<std::string> defense_collapse(const std::vector<DefenseRow>& rows) {
    const DefenseRow* base = nullptr;
    for (const auto& r : rows)
      if (r.defense == "fineprune" && r.setting == "ratio=0") base = &r;
    if (!base) return std::nullopt;
    for (const auto& r : rows)
      if (r.defense == "fineprune" && &r != base && base->asr - r.asr > 0.5 && r.utility < base->utility)
        return r.setting;
    return std::nullopt;
  }

  static std::optional<std::string> defense_bypass(const std::vector<DefenseRow>& rows) {
    for (const auto& r : rows) {
      const bool input_side = r.defense == "smooth" || r.defense == "quantize" || r.defense == "lowpass";
      if (input_side && r.asr < 0.5 && r.asr_star && *r.asr_star >= 0.9 * r.undefended_asr)
        return r.defense + " " + r.setting;
    }
    return std::nullopt;
  }

  static bool finetune_endpoints_ok(const std::vector<DefenseRow>& rows) {
    const DefenseRow *first = nullptr, *last = nullptr;
    for (const auto& r : rows)
      if (r.defense == "finetune") {
        if (!first) first = &r;
        last = &r;
      }
    return first && last && last->asr <= first->asr;
  }

  void run_all() {
    table_reach();
    table_asr();
    table_ablation();
    table_defense();
  }

 private:
  void note(const std::string& msg) const {
    if (log_) log_(msg);
  }

  void write_table(const std::string& name, const Csv& csv, const std::vector<SoftCheck>& checks) {
    ws_.stage("tables/" + name + ".csv", csv.str(), [&] { return csv.str(); });
    ws_.stage("checks/" + name + ".txt", render_checks(name, checks), [&] { return render_checks(name, checks); });
    refresh_checks();
  }

  void refresh_checks() {
    std::string all;
    for (const char* t : {"reach", "asr", "ablation_objective", "ablation_gamma", "ablation_k", "defense"})
      if (ws_.has(std::string("checks/") + t + ".txt")) all += ws_.read(std::string("checks/") + t + ".txt");
    ws_.overwrite("checks.txt", all);
  }

  ExperimentConfig cfg_;
  Workspace ws_;
  Logger log_;
  std::unique_ptr<World> world_;
  std::unique_ptr<Pipeline> clean_;
  std::map<Modality, DoorArtifacts> doors_;
};

}  // namespace xmb
