#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "protodrift/config.hpp"
#include "protodrift/harness.hpp"
#include "protodrift/protostore.hpp"
#include "protodrift/scatter.hpp"
#include "protodrift/synth.hpp"

namespace fs = std::filesystem;
using namespace protodrift;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path + "'");
}

void write_json(const std::string& path, const json& j) {
  ensure_parent(path);
  jsonio::write_file(path, j);
}

// out/base.checkpoint.json -> out/base.checkpoint.config.json
std::string config_copy_path(const std::string& output) {
  fs::path p(output);
  return (p.parent_path() / (p.stem().string() + ".config.json")).string();
}

RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_flag) {
  RunConfig cfg = load_run_config(path);
  cfg.seed = resolve_seed(seed_flag, cfg.seed);
  return cfg;
}

std::vector<int> parse_session(const std::string& spec, const World& world, const ClassRegistry& registry) {
  std::vector<int> ids;
  if (spec == "all") {
    for (int id : world.novel_ids())
      if (!registry.contains(id)) ids.push_back(id);
    if (ids.empty()) throw ConfigError("--session all: every novel class is already registered");
    return ids;
  }
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t used = 0;
    int id = 0;
    try {
      id = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (tok.empty() || used != tok.size()) throw ConfigError("--session: '" + tok + "' is not a class id");
    if (!world.classes.contains(id)) throw ConfigError("--session: class " + std::to_string(id) + " is not in the world");
    if (world.classes.at(world.classes.index_of(id)).base) {
      throw ConfigError("--session: class " + std::to_string(id) + " is a base class");
    }
    ids.push_back(id);
  }
  if (ids.empty()) throw ConfigError("--session: no class ids given");
  return ids;
}

Dataset split_of(const World& world, const std::string& split) {
  if (split == "all") return world.test;
  const auto ids = split == "base" ? world.base_ids() : world.novel_ids();
  return filter_classes(world.test, ids);
}

int cmd_pretrain(const std::string& config_path, std::optional<std::uint64_t> seed_flag) {
  const RunConfig cfg = load_config(config_path, seed_flag);
  WorldConfig wc = cfg.world;
  wc.seed = cfg.seed;
  const World world = generate_world(wc);
  ensure_parent(cfg.paths.world);
  save_world(world, cfg.paths.world);
  const Checkpoint ckpt = pretrain_base(world, cfg.model, cfg.pretrain, cfg.seed);
  ensure_parent(cfg.paths.checkpoint);
  save_checkpoint(ckpt, cfg.paths.checkpoint);
  save_run_config(cfg, config_copy_path(cfg.paths.checkpoint));
  std::cout << fmt::format("pretrained {} base classes; final epoch loss {:.6f}; wrote {}\n", ckpt.registry.size(),
                           ckpt.log.empty() ? 0.0 : ckpt.log.back(), cfg.paths.checkpoint);
  return 0;
}

int cmd_extract(const std::string& config_path, std::optional<std::uint64_t> seed_flag, std::string checkpoint_path) {
  const RunConfig cfg = load_config(config_path, seed_flag);
  if (checkpoint_path.empty()) checkpoint_path = cfg.paths.checkpoint;
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const World world = load_world(cfg.paths.world);
  const PrototypeStore store = extract_store(ckpt, filter_classes(world.train, ckpt.registry.base_ids()));
  ensure_parent(cfg.paths.store);
  save_store(store, cfg.paths.store);
  save_run_config(cfg, config_copy_path(cfg.paths.store));
  std::cout << fmt::format("extracted {} prototypes; wrote {}\n", store.base.size(), cfg.paths.store);
  return 0;
}

struct FinetuneArgs {
  std::string checkpoint, store, session = "all", out_checkpoint, out_store;
  std::optional<std::size_t> shots;
};

int cmd_finetune(const std::string& config_path, std::optional<std::uint64_t> seed_flag, FinetuneArgs a) {
  RunConfig cfg = load_config(config_path, seed_flag);
  if (a.shots) {
    if (*a.shots == 0) throw ConfigError("--shots must be >= 1");
    cfg.shots = *a.shots;
  }
  if (a.checkpoint.empty()) a.checkpoint = cfg.paths.checkpoint;
  if (a.store.empty()) a.store = cfg.paths.store;
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const PrototypeStore store = load_store(a.store, &ckpt.registry);
  const World world = load_world(cfg.paths.world);

  const auto ids = parse_session(a.session, world, ckpt.registry);
  const std::size_t session = ckpt.session_index() + 1;
  const Dataset support = sample_kshot(world.train, ids, cfg.shots, support_seed(cfg.seed, session));

  FinetuneConfig fc = cfg.finetune;
  fc.seed = cfg.seed;
  const SessionResult res = finetune_incremental(ckpt, store, support, cfg.weights, fc);

  const std::string stage = res.checkpoint.stage;
  if (a.out_checkpoint.empty()) a.out_checkpoint = (fs::path(cfg.paths.reports) / (stage + ".checkpoint.json")).string();
  if (a.out_store.empty()) a.out_store = (fs::path(cfg.paths.reports) / (stage + ".store.json")).string();
  if (a.out_checkpoint == a.out_store) throw ConfigError("--out-checkpoint and --out-store name the same file");
  ensure_parent(a.out_checkpoint);
  save_checkpoint(res.checkpoint, a.out_checkpoint);
  ensure_parent(a.out_store);
  save_store(res.store, a.out_store);
  save_run_config(cfg, config_copy_path(a.out_checkpoint));
  std::cout << fmt::format("{}: enrolled {} classes from {} shots; wrote {} and {}\n", stage, ids.size(), support.size(),
                           a.out_checkpoint, a.out_store);
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& world_path, const std::string& split,
             std::string out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const World world = load_world(world_path);
  const Metrics m = evaluate(ckpt, split_of(world, split));
  if (out.empty()) {
    fs::path p(checkpoint_path);
    out = (p.parent_path() / (p.stem().string() + ".metrics." + split + ".json")).string();
  }
  write_json(out, metrics_json(m, ckpt.stage, std::to_string(ckpt.seed)));
  std::cout << fmt::format("stage={} split={} bAcc={:.6f} nAcc={:.6f} allAcc={:.6f}\n", ckpt.stage, split, m.b_acc,
                           m.n_acc, m.all_acc);
  return 0;
}

int cmd_ablate(const std::string& config_path, std::optional<std::uint64_t> seed_flag, bool parallel) {
  const RunConfig cfg = load_config(config_path, seed_flag);
  ExperimentConfig ec = cfg.experiment();
  ec.parallel = parallel;
  const AblationTable t = run_ablation(ec);
  const std::string out = (fs::path(cfg.paths.reports) / "ablation.csv").string();
  const std::string csv = ablation_csv(t);
  write_text(out, csv);
  save_run_config(cfg, config_copy_path(out));
  std::cout << csv;
  return 0;
}

int cmd_plot(const std::string& checkpoint_path, const std::string& world_path, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const World world = load_world(world_path);
  write_text(out, emit_scatter(ckpt, world.test));
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Replay-free incremental few-shot training over synthetic RoI features"};
  app.require_subcommand(1);

  std::string config, checkpoint, store, world, out, split = "all";
  std::optional<std::uint64_t> seed;
  bool parallel = false;
  FinetuneArgs fa;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed override (beats PROTODRIFT_SEED and the config)");
  };

  auto* pretrain = app.add_subcommand("pretrain", "generate the world and train the base model");
  add_config(pretrain);

  auto* extract = app.add_subcommand("extract", "compute base-class prototypes");
  add_config(extract);
  extract->add_option("--checkpoint", checkpoint, "base checkpoint (default: paths.checkpoint)");

  auto* finetune = app.add_subcommand("finetune", "enroll novel classes from K shots");
  add_config(finetune);
  finetune->add_option("--checkpoint", fa.checkpoint, "input checkpoint (default: paths.checkpoint)");
  finetune->add_option("--store", fa.store, "input prototype store (default: paths.store)");
  finetune->add_option("--shots", fa.shots, "K shots per novel class (default: finetune.shots)");
  finetune->add_option("--session", fa.session, "comma-separated class ids, or 'all' unenrolled novel classes");
  finetune->add_option("--out-checkpoint", fa.out_checkpoint, "default: <reports>/<stage>.checkpoint.json");
  finetune->add_option("--out-store", fa.out_store, "default: <reports>/<stage>.store.json");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on the test split");
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--world", world, "world file holding the test split")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split)->check(CLI::IsMember({"all", "base", "novel"}));
  eval->add_option("--out", out, "metrics JSON (default: next to the checkpoint)");

  auto* ablate = app.add_subcommand("ablate", "run the five-variant ablation over the configured seeds");
  add_config(ablate);
  ablate->add_flag("--parallel", parallel, "run seeds on separate threads");

  auto* plot = app.add_subcommand("plot", "PCA scatter of test embeddings as SVG");
  plot->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  plot->add_option("--world", world)->required()->check(CLI::ExistingFile);
  plot->add_option("--out", out, "SVG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*pretrain) return cmd_pretrain(config, seed);
    if (*extract) return cmd_extract(config, seed, checkpoint);
    if (*finetune) return cmd_finetune(config, seed, fa);
    if (*eval) return cmd_eval(checkpoint, world, split, out);
    if (*ablate) return cmd_ablate(config, seed, parallel);
    if (*plot) return cmd_plot(checkpoint, world, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
