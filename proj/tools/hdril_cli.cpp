#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "hdril/pipeline.hpp"

using namespace hdril;
using namespace hdril::pipe;
namespace fs = std::filesystem;

namespace {

constexpr int kMissingFile = 2;
constexpr int kBadConfig = 3;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string variant;
  std::string task;
  std::string latent_mode;
  std::string profile;
};

RunConfig resolve(const Flags& f) {
  Overrides o;
  o.seed = f.seed;
  if (!f.variant.empty()) o.variant = parse_variant(f.variant);
  if (!f.task.empty()) {
    try {
      o.task = task::parse_task(f.task);
    } catch (const LookupError&) {
      throw ParseError("unknown task '" + f.task + "'");
    }
  }
  if (!f.latent_mode.empty()) {
    if (f.latent_mode != "mean" && f.latent_mode != "sample") throw ParseError("--latent-mode expects mean or sample");
    o.latent_mode = f.latent_mode == "mean" ? dyn::LatentMode::Mean : dyn::LatentMode::Sample;
  }
  if (!f.profile.empty()) o.profile = f.profile;
  if (f.config.empty()) {
    std::istringstream none;
    return load_config(none, o);
  }
  return load_config(f.config, o);
}

struct Paths {
  fs::path dir;
  std::string operator()(const char* name) const { return (dir / name).string(); }
};

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  return f;
}

task::Dataset require_dataset(const std::string& path, const task::TaskSpec& t) {
  if (!fs::exists(path)) throw MissingFileError(path + " not found; run gen-demos first");
  return task::load_dataset(path, t);
}

// The relational variant is the only one whose state carries an anchor slot.
Variant variant_of(const dyn::ModelBank& bank, const task::TaskSpec& t) {
  return {bank.config.graph, bank.config.residual, bank.multi, bank.config.state_width == t.state_width() + 7};
}

void progress(const char* what, std::size_t epoch, std::size_t epochs, double loss) {
  if ((epoch + 1) % 50 == 0 || epoch + 1 == epochs) std::cerr << what << " epoch " << epoch + 1 << "/" << epochs << " loss " << loss << "\n";
}

int gen_demos(const RunConfig& c, const Paths& p) {
  const auto t = make_task(c);
  const auto s = make_scene(c);
  task::GenerationStats stats;
  const auto train = task::generate_dataset(t, s, c.demos, c.seed, &stats);
  task::save_dataset(p("demos.csv"), train);
  task::save_dataset(p("heldout.csv"), heldout_demos(t, s, c));
  std::cout << "wrote " << c.demos << " demonstrations (" << stats.rejected << " rejected spawns) and " << c.eval_spawns << " held-out\n";
  return 0;
}

int train_planner_cmd(const RunConfig& c, const Paths& p) {
  const auto t = make_task(c);
  const auto ds = require_dataset(p("demos.csv"), t);
  plan::PlannerModel m = make_planner(t, c);
  auto cfg = planner_train_config(c);
  cfg.on_epoch = [&](std::size_t e, double l) { progress("planner", e, c.planner_epochs, l); };
  const auto h = train_planner(m, ds, cfg);
  plan::save_planner(p("planner.ckpt"), m);
  auto f = open_out(p("planner_loss.csv"));
  write_loss_csv(f, h);
  std::cout << "planner training accuracy " << plan::planner_accuracy(m, ds) << "\n";
  return 0;
}

int train_dynamics_cmd(const RunConfig& c, const Paths& p) {
  const auto t = make_task(c);
  const auto ds = require_dataset(p("demos.csv"), t);
  std::vector<double> h;
  const auto bank = train_bank(t, c, c.variant, ds, &h, [&](std::size_t e, double l) { progress("dynamics", e, c.epochs, l); });
  dyn::save_bank(p("dynamics.ckpt"), bank);
  auto f = open_out(p("dynamics_loss.csv"));
  write_loss_csv(f, h);
  std::cout << variant_name(c.variant) << ": " << dyn::parameter_count(bank) << " parameters, final loss " << (h.empty() ? 0.0 : h.back()) << "\n";
  return 0;
}

struct Trained {
  plan::PlannerModel planner;
  dyn::ModelBank bank;
};

Trained load_trained(const Paths& p) {
  for (const char* name : {"planner.ckpt", "dynamics.ckpt"})
    if (!fs::exists(p(name))) throw MissingFileError(p(name) + " not found; train it first");
  return {plan::load_planner(p("planner.ckpt")), dyn::load_bank(p("dynamics.ckpt"))};
}

int rollout_cmd(const RunConfig& c, const Paths& p, std::size_t index) {
  const auto t = make_task(c);
  const auto s = make_scene(c);
  const auto m = load_trained(p);
  const auto held = require_dataset(p("heldout.csv"), t);
  if (index >= held.demos.size()) throw ContractError("--spawn " + std::to_string(index) + " is past the held-out set");
  const Variant v = variant_of(m.bank, t);
  const RolloutOptions opt{c.seed_from_executed, m.planner.config.input == plan::PlannerInput::EveryStep};
  const auto tr = closed_loop_rollout(t, s, task::initial_world(t, s, held.demos[index].spawn), model_planner(m.planner),
                                      bank_predictor(m.bank, v.relational, c.latent_mode, derive_seed(c.seed, {0x6576616c, index})), opt);
  auto f = open_out(p("rollout.csv"));
  write_trace_csv(f, tr, t.entity_names());
  std::cout << (tr.success ? "success" : "failure: " + tr.failure) << "\n";
  return 0;
}

int eval_cmd(const RunConfig& c, const Paths& p) {
  const auto t = make_task(c);
  const auto s = make_scene(c);
  const auto m = load_trained(p);
  const auto held = require_dataset(p("heldout.csv"), t);
  const Variant v = variant_of(m.bank, t);
  const auto run = evaluate_bank(variant_name(v), t, s, held, m.planner, m.bank, c, v.relational);
  const std::vector<metrics::EvalReport> reports = {run.report};
  auto f = open_out(p("eval.csv"));
  metrics::write_report_csv(f, reports);
  auto b = open_out(p("eval_breakdown.csv"));
  metrics::write_breakdown_csv(b, reports);
  metrics::write_report_table(std::cout, reports);
  return 0;
}

int ablate_cmd(const RunConfig& c, const Paths& p, const std::string& grid) {
  if (grid != "table" && grid != "relational") throw ParseError("--grid expects table or relational");
  const auto t = make_task(c);
  const auto s = make_scene(c);
  const auto demos = training_demos(t, s, c);
  const auto held = heldout_demos(t, s, c);
  plan::PlannerModel planner = make_planner(t, c);
  train_planner(planner, demos, planner_train_config(c));
  std::vector<AblationRow> rows;
  std::vector<metrics::EvalReport> reports;
  for (const Variant& v : grid == "table" ? ablation_grid() : relational_grid()) {
    const std::string name = variant_name(v);
    std::vector<double> h;
    const auto bank = train_bank(t, c, v, demos, &h, [&](std::size_t e, double l) { progress(name.c_str(), e, c.epochs, l); });
    const auto run = evaluate_bank(name, t, s, held, planner, bank, c, v.relational);
    rows.push_back({v, dyn::parameter_count(bank), h.empty() ? 0.0 : h.back(), run.report});
    reports.push_back(run.report);
  }
  auto f = open_out(p(grid == "table" ? "ablation.csv" : "ablation_relational.csv"));
  write_ablation_csv(f, rows);
  auto b = open_out(p(grid == "table" ? "ablation_breakdown.csv" : "ablation_relational_breakdown.csv"));
  metrics::write_breakdown_csv(b, reports);
  metrics::write_report_table(std::cout, reports);
  return 0;
}

int export_attention_cmd(const RunConfig& c, const Paths& p, std::size_t index) {
  const auto t = make_task(c);
  if (!fs::exists(p("dynamics.ckpt"))) throw MissingFileError(p("dynamics.ckpt") + " not found; train it first");
  const auto bank = dyn::load_bank(p("dynamics.ckpt"));
  const auto held = require_dataset(p("heldout.csv"), t);
  if (index >= held.demos.size()) throw ContractError("--spawn " + std::to_string(index) + " is past the held-out set");
  auto f = open_out(p("attention.csv"));
  write_attention_csv(f, bank, held.demos[index], t.entity_names(), c.attention_threshold, variant_of(bank, t).relational);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical imitation learning with primitive dynamics models"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config, "Run configuration file");
  app.add_option("--seed", f.seed, "Master seed");
  app.add_option("--out", f.out, "Artifact directory")->capture_default_str();
  app.add_option("--variant", f.variant, "Comma list of graph,res,multi,relational (none for the baseline)");
  app.add_option("--task", f.task, "table-lift or peg-in-hole");
  app.add_option("--latent-mode", f.latent_mode, "mean or sample");
  app.add_option("--profile", f.profile, "desk or paper");

  std::size_t spawn = 0;
  std::string grid = "table";
  auto* gen = app.add_subcommand("gen-demos", "Write training and held-out demonstrations");
  auto* tp = app.add_subcommand("train-planner", "Train the primitive planner");
  auto* td = app.add_subcommand("train-dynamics", "Train the primitive dynamics models");
  auto* ro = app.add_subcommand("rollout", "Closed-loop rollout on one held-out spawn");
  ro->add_option("--spawn", spawn, "Held-out spawn index")->capture_default_str();
  auto* ev = app.add_subcommand("eval", "Evaluate on every held-out spawn");
  auto* ab = app.add_subcommand("ablate", "Train and evaluate the ablation grid");
  ab->add_option("--grid", grid, "table or relational")->capture_default_str();
  auto* at = app.add_subcommand("export-attention", "Per-edge attention weights");
  at->add_option("--spawn", spawn, "Held-out spawn index")->capture_default_str();
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig c = resolve(f);
    fs::create_directories(f.out);
    const Paths p{f.out};
    if (gen->parsed()) return gen_demos(c, p);
    if (tp->parsed()) return train_planner_cmd(c, p);
    if (td->parsed()) return train_dynamics_cmd(c, p);
    if (ro->parsed()) return rollout_cmd(c, p, spawn);
    if (ev->parsed()) return eval_cmd(c, p);
    if (ab->parsed()) return ablate_cmd(c, p, grid);
    if (at->parsed()) return export_attention_cmd(c, p, spawn);
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const MissingFileError& e) {
    std::cerr << "missing file: " << e.what() << "\n";
    return kMissingFile;
  } catch (const CheckpointError& e) {
    std::cerr << "bad checkpoint: " << e.what() << "\n";
    return kMissingFile;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
