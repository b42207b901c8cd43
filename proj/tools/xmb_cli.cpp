#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "xmb/experiment.hpp"
#include "xmb/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace xmb;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfig = 2, kPrerequisite = 3, kInvariant = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool quiet = false;
};

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config.empty()) cfg = io::experiment_config_from_json(io::parse_json(io::read_file(c.config), "config"));
  if (c.seed) cfg.master_seed = *c.seed;
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) cfg.output_dir = env;
  cfg.validate();
  return cfg;
}

// Relative output paths land under the override directory, when one is set.
fs::path output_path(const std::string& out) {
  const fs::path p(out);
  if (p.is_absolute()) return p;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return fs::path(env) / p;
  return p;
}

// Writes `produce()` to `out` unless an artifact built from the same inputs
// is already there.
void emit(const std::string& out, const std::string& key, const std::function<std::string()>& produce) {
  const fs::path p = output_path(out);
  Workspace ws(p.has_parent_path() ? p.parent_path() : fs::path("."));
  ws.stage(p.filename().string(), key, produce);
  std::cerr << "wrote " << p.string() << "\n";
}

void need(const std::string& path, const std::string& producer) {
  if (!fs::exists(path)) throw PrerequisiteError("missing '" + path + "'; produce it with `xmb " + producer + "`");
}

std::string content_key(const std::string& path) { return hex64(fnv1a(io::read_file(path))); }

Logger logger(const Common& c) {
  if (c.quiet) return {};
  const auto t0 = std::chrono::steady_clock::now();
  return [t0](const std::string& msg) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[%7.1fs] %s\n", s, msg.c_str());
  };
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config (JSON)");
  app->add_option("--seed", c.seed, "master seed override");
  app->add_option("--out-dir", c.out_dir, std::string("output directory (") + kOutputDirEnv + " takes precedence)");
  app->add_flag("--quiet", c.quiet, "suppress progress lines");
}

void print_defense_rows(const std::vector<DefenseRow>& rows) {
  std::cout << "defense,setting,utility,utility_delta,asr,asr_star,recovery\n";
  for (const auto& r : rows)
    std::cout << r.defense << "," << r.setting << "," << fmt(r.utility, 4) << "," << fmt(r.utility_delta, 4) << ","
              << fmt(r.asr, 4) << "," << (r.asr_star ? fmt(*r.asr_star, 4) : "") << ","
              << (r.asr_star ? fmt(r.recovery(), 4) : "") << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"xmb: connector backdoor lab"};
  app.require_subcommand(1);
  Common common;

  // world gen
  auto* world_cmd = app.add_subcommand("world", "synthetic world");
  world_cmd->require_subcommand(1);
  auto* world_gen = world_cmd->add_subcommand("gen", "write the dataset file");
  add_common(world_gen, common);
  std::string world_out = "world.json";
  world_gen->add_option("--out", world_out, "dataset output path");

  auto* pre = app.add_subcommand("pretrain", "train the clean pipeline");
  add_common(pre, common);
  std::string pre_out = "clean.ckpt";
  pre->add_option("--out", pre_out, "checkpoint output path");

  auto* poi = app.add_subcommand("poison", "poison the connector through one door");
  add_common(poi, common);
  std::string poi_ckpt, poi_door = "image", poi_out = "poisoned.ckpt", poi_set_out;
  poi->add_option("--ckpt", poi_ckpt, "clean checkpoint")->required();
  poi->add_option("--door", poi_door, "backdoor modality");
  poi->add_option("--out", poi_out, "poisoned checkpoint path");
  poi->add_option("--poison-set-out", poi_set_out, "poison set path (default: <out>.poison-set.json)");

  auto* cen = app.add_subcommand("centroid", "extract the malicious centroid");
  add_common(cen, common);
  std::string cen_ckpt, cen_set, cen_out = "centroid.json";
  cen->add_option("--ckpt", cen_ckpt, "poisoned checkpoint")->required();
  cen->add_option("--poison-set", cen_set, "poison set JSON")->required();
  cen->add_option("--out", cen_out, "centroid output path");

  auto* act = app.add_subcommand("activate", "PGD activation toward the centroid");
  add_common(act, common);
  std::string act_ckpt, act_cen, act_mod = "audio", act_out = "acts.json", act_tf;
  std::optional<double> act_eps;
  std::optional<std::size_t> act_steps;
  std::size_t act_n = 200;
  act->add_option("--ckpt", act_ckpt, "poisoned checkpoint")->required();
  act->add_option("--centroid", act_cen, "centroid JSON")->required();
  act->add_option("--modality", act_mod, "activation modality");
  act->add_option("--eps", act_eps, "L-inf budget (default: modality maximum)");
  act->add_option("--steps", act_steps, "PGD steps");
  act->add_option("--n", act_n, "number of eval inputs");
  act->add_option("--transform", act_tf, "optimize through a transform surrogate, e.g. smooth:1");
  act->add_option("--out", act_out, "activation artifact path");

  auto* def = app.add_subcommand("defend", "repair a poisoned connector");
  add_common(def, common);
  std::string def_ckpt, def_mode = "finetune", def_out = "repaired.ckpt";
  double def_ratio = 0.0;
  std::optional<std::size_t> def_epochs;
  def->add_option("--ckpt", def_ckpt, "poisoned checkpoint")->required();
  def->add_option("--mode", def_mode, "finetune or fineprune");
  def->add_option("--ratio", def_ratio, "fineprune ratio");
  def->add_option("--epochs", def_epochs, "fine-tuning epochs");
  def->add_option("--out", def_out, "repaired checkpoint path");

  auto* din = app.add_subcommand("defend-input", "evaluate an input transform against stored activations");
  add_common(din, common);
  std::string din_tf, din_acts, din_ckpt;
  bool din_adaptive = false;
  din->add_option("--transform", din_tf, "smooth:<sigma>, quantize:<bits> or lowpass:<keep>")->required();
  din->add_option("--acts", din_acts, "activation artifact")->required();
  din->add_option("--ckpt", din_ckpt, "poisoned checkpoint the activations were run against")->required();
  din->add_flag("--adaptive", din_adaptive, "also rerun activation through the surrogate");

  auto* tab = app.add_subcommand("table", "run a report table");
  add_common(tab, common);
  std::string tab_which;
  tab->add_option("which", tab_which, "reach, asr, ablation, defense or all")
      ->required()
      ->check(CLI::IsMember({"reach", "asr", "ablation", "defense", "all"}));

  auto* chk = app.add_subcommand("check", "self checks");
  chk->require_subcommand(1);
  auto* grads = chk->add_subcommand("grads", "finite-difference gradient suite");
  std::size_t gc_seeds = 20;
  std::uint64_t gc_base = 1;
  grads->add_option("--seeds", gc_seeds, "configurations per loss");
  grads->add_option("--base-seed", gc_base, "base seed");
  grads->add_flag("--quiet", common.quiet, "suppress the summary line");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  if (world_gen->parsed()) {
    const ExperimentConfig cfg = load_config(common).resolved();
    emit(world_out, "world|" + io::to_json(cfg.world).dump(), [&] { return io::dataset_json(generate_world(cfg.world)); });
    return kOk;
  }

  if (pre->parsed()) {
    Experiment e(load_config(common), logger(common));
    emit(pre_out, e.clean_key(), [&] { return io::checkpoint_json(e.clean()); });
    return kOk;
  }

  if (poi->parsed()) {
    const ExperimentConfig cfg = load_config(common).resolved();
    const Modality door = parse_modality(poi_door);
    const PoisonConfig& pc = cfg.poison_for(door);
    need(poi_ckpt, "pretrain");
    Pipeline p = io::load_checkpoint(poi_ckpt);
    if (p.reference) throw ConfigError("'" + poi_ckpt + "' is already poisoned");
    const World w = generate_world(p.world);
    const PoisonSet ps = build_poison_set(w, pc);
    const std::string key = content_key(poi_ckpt) + "|" + io::to_json(pc).dump();
    const std::string set_out = poi_set_out.empty() ? poi_out + ".poison-set.json" : poi_set_out;
    emit(set_out, key, [&] { return io::poison_set_json(ps); });
    emit(poi_out, key, [&] {
      poison_connector(p, ps, pc);
      return io::checkpoint_json(p);
    });
    return kOk;
  }

  if (cen->parsed()) {
    need(cen_ckpt, "poison");
    need(cen_set, "poison");
    const Pipeline p = io::load_checkpoint(cen_ckpt);
    const PoisonSet ps = io::poison_set_from_json(io::read_file(cen_set));
    emit(cen_out, content_key(cen_ckpt) + "|" + content_key(cen_set),
         [&] { return io::centroid_json(extract_centroid(p, p.connector, ps)); });
    return kOk;
  }

  if (act->parsed()) {
    ExperimentConfig cfg = load_config(common);
    need(act_ckpt, "poison");
    need(act_cen, "centroid");
    const Pipeline p = io::load_checkpoint(act_ckpt);
    const MaliciousCentroid c = io::centroid_from_json(io::read_file(act_cen));
    ActivationConfig ac = cfg.activation;
    ac.modality = parse_modality(act_mod);
    ac.eps = act_eps ? *act_eps : max_budget(ac.modality);
    if (act_steps) ac.steps = *act_steps;
    if (!act_tf.empty()) ac.transform = Transform::parse(act_tf);
    ac.validate();
    const World w = generate_world(p.world);
    const std::string key = content_key(act_ckpt) + "|" + content_key(act_cen) + "|" + io::to_json(ac).dump() + "|" +
                            act_mod + "|" + eps_tag(ac.eps) + "|" + act_tf + "|" + std::to_string(act_n);
    emit(act_out, key, [&] {
      ActivationArtifact art;
      art.modality = ac.modality;
      art.eps = ac.eps;
      art.steps = ac.steps;
      art.world_seed = p.world.seed;
      art.checkpoint_hash = pipeline_hash(p);
      art.c_mal = c.c_mal;
      art.x_clean = activation_inputs(w, ac.modality, act_n);
      auto r = pgd_activate(p, p.connector, art.x_clean, ac, c.c_mal);
      art.x_adv = r.x_adv;
      art.trace = r.trace;
      std::cerr << "relaxed asr " << fmt(relaxed_asr(p, p.connector, art.x_adv, art.modality), 4) << "\n";
      return io::acts_json(art);
    });
    return kOk;
  }

  if (def->parsed()) {
    const ExperimentConfig cfg = load_config(common).resolved();
    need(def_ckpt, "poison");
    Pipeline p = io::load_checkpoint(def_ckpt);
    RepairConfig rc = cfg.defense.repair;
    rc.mode = parse_repair_mode(def_mode);
    rc.ratio = def_ratio;
    rc.epochs = def_epochs ? *def_epochs
                           : (rc.mode == RepairConfig::Mode::Fineprune ? cfg.defense.prune_finetune_epochs : rc.epochs);
    rc.validate();
    const World w = generate_world(p.world);
    const std::string key = content_key(def_ckpt) + "|" + repair_mode_name(rc.mode) + "|" + io::json(rc.ratio).dump() +
                            "|" + std::to_string(rc.epochs) + "|" + io::to_json(rc).dump();
    emit(def_out, key, [&] {
      const auto clean = defender_clean(w, rc.clean_count);
      const double u0 = utility(p, p.connector, eval_samples(w)).exact_match;
      p.connector = repair(p, p.connector, clean, rc);
      const double u1 = utility(p, p.connector, eval_samples(w)).exact_match;
      std::cerr << "utility " << fmt(u0, 4) << " -> " << fmt(u1, 4) << "\n";
      return io::checkpoint_json(p);
    });
    return kOk;
  }

  if (din->parsed()) {
    const ExperimentConfig cfg = load_config(common);
    need(din_ckpt, "poison");
    need(din_acts, "activate");
    const Pipeline p = io::load_checkpoint(din_ckpt);
    const ActivationArtifact art = io::acts_from_json(io::read_file(din_acts));
    const World w = generate_world(p.world);
    print_defense_rows({evaluate_input_defense(p, art, Transform::parse(din_tf), eval_samples(w), din_adaptive,
                                               cfg.activation)});
    return kOk;
  }

  if (tab->parsed()) {
    Experiment e(load_config(common), logger(common));
    if (tab_which == "reach" || tab_which == "all") e.table_reach();
    if (tab_which == "asr" || tab_which == "all") e.table_asr();
    if (tab_which == "ablation" || tab_which == "all") e.table_ablation();
    if (tab_which == "defense" || tab_which == "all") e.table_defense();
    std::cout << e.workspace().read("checks.txt");
    return kOk;
  }

  if (grads->parsed()) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto records = run_grad_checks(gc_seeds, gc_base);
    std::size_t failed = 0;
    std::cout << "loss,wrt,seed,max_rel_err,pass\n";
    for (const auto& r : records) {
      failed += r.pass ? 0 : 1;
      std::cout << r.loss << "," << r.wrt << "," << r.seed << "," << r.max_rel_err << "," << (r.pass ? 1 : 0)
                << "\n";
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!common.quiet)
      std::cerr << records.size() - failed << "/" << records.size() << " checks pass in " << fmt(s, 1) << " s\n";
    return failed ? kFailure : kOk;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const PrerequisiteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPrerequisite;
  } catch (const InvariantError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvariant;
  } catch (const ProvenanceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvariant;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
