// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Criterion 8 trains three desk-scale banks and dominates the runtime.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <limits>
#include <sstream>

#include "gradcheck.hpp"
#include "hdril/pipeline.hpp"

using namespace hdril;
using namespace hdril::ad;
using hdril::testing::grad_check;
using hdril::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) { return metrics::fmt(v, 4); }

const task::Scene& scene() {
  static const task::Scene s = task::make_scene();
  return s;
}

// ---- 1 ------------------------------------------------------------------------

Outcome gradient_oracle() {
  Rng rng(2024);
  double worst = 0.0;
  std::size_t checks = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Parameter a("a", random_tensor({3, 4}, rng));
    Parameter b("b", random_tensor({4, 5}, rng));
    Parameter c("c", random_tensor({3, 4}, rng));
    Parameter bias("bias", random_tensor({4}, rng));
    Tensor target = random_tensor({3, 4}, rng);
    std::vector<std::size_t> classes = {std::size_t(rng() % 4), std::size_t(rng() % 4), std::size_t(rng() % 4)};
    const std::vector<hdril::testing::LossFn> ops = {
        [&](Tape& t) { return sum(ad::tanh(matmul(t.leaf(a), t.leaf(b)))); },
        [&](Tape& t) { return sum(ad::tanh(matmul_nt(t.leaf(a), t.leaf(c)))); },
        [&](Tape& t) { return sum(ad::tanh(matmul(transpose(t.leaf(a)), t.leaf(c)))); },
        [&](Tape& t) { return sum(ad::tanh(sub(add(t.leaf(a), t.leaf(c)), scale(t.leaf(c), 0.4)))); },
        [&](Tape& t) { return sum(mul(t.leaf(a), t.leaf(c))); },
        [&](Tape& t) { return sum(ad::tanh(add_rowwise(add(t.leaf(a), 0.3), t.leaf(bias)))); },
        [&](Tape& t) { return sum(mul(sigmoid(t.leaf(a)), t.leaf(c))); },
        [&](Tape& t) { return sum(mul(leaky_relu(t.leaf(a), 0.2), t.leaf(c))); },
        [&](Tape& t) { return sum(mul(ad::exp(t.leaf(a)), t.leaf(c))); },
        [&](Tape& t) { return sum(mul(elu(t.leaf(a)), t.leaf(c))); },
        [&](Tape& t) { return sum(mul(clamp(t.leaf(a), -2.5, 2.5), t.leaf(c))); },
        [&](Tape& t) { return sum(mul(softmax(t.leaf(a), 1), t.leaf(c))); },
        [&](Tape& t) { return sum(mul(softmax(t.leaf(a), 0), t.leaf(c))); },
        [&](Tape& t) { return sum(ad::tanh(concat({t.leaf(a), t.leaf(c)}, 1))); },
        [&](Tape& t) { return sum(ad::tanh(slice_cols(t.leaf(a), 1, 2))); },
        [&](Tape& t) { return sum(ad::tanh(matmul(reshape(t.leaf(a), {4, 3}), t.leaf(a)))); },
        [&](Tape& t) { return mean(mul(t.leaf(a), t.leaf(c))); },
        [&](Tape& t) { return mse(ad::tanh(t.leaf(a)), t.constant(target)); },
        [&](Tape& t) { return cross_entropy(softmax(t.leaf(a), 1), classes); },
    };
    for (const auto& fn : ops) {
      const auto r = grad_check({&a, &b, &c, &bias}, fn);
      worst = std::max(worst, r.max_rel_error);
      ++checks;
    }

    // Full GAT -> GRU encoder -> FC -> latent -> GRU decoder composite.
    dyn::ModelConfig mc;
    mc.state_width = 14;
    mc.hidden = 4;
    mc.gat_width = 2;
    mc.encoder_fc = 2;
    mc.decoder_fc = 2;
    mc.targets = {1};
    Rng init(static_cast<std::uint64_t>(trial));
    auto m = dyn::make_dynamics_model(mc, 2, init);
    dyn::Segment s;
    for (int k = 0; k < 3; ++k) {
      task::StateVector v(14);
      for (double& x : v) x = uniform(rng, -1, 1);
      (k == 0 ? s.initial : s.targets.emplace_back()) = v;
    }
    Tensor eps(Shape{1, 4});
    for (double& v : eps.data) v = standard_normal(rng);
    std::vector<Parameter*> ps;
    m.for_each_parameter([&](Parameter& p) { ps.push_back(&p); });
    const auto r = grad_check(ps, [&](Tape& t) { return dyn::batch_loss(t, m, {&s}, trial % 2 == 0, 0.3, &eps); });
    worst = std::max(worst, r.max_rel_error);
    ++checks;
  }
  return {worst < 1e-4, std::to_string(checks) + " checks, max relative error " + num(worst)};
}

// ---- 2 ------------------------------------------------------------------------

Outcome gat_uniform() {
  Rng rng(21);
  const nn::GATLayer g = nn::make_gat("gat", 21, 1, 4, 1, rng);
  double worst = 0.0;
  for (double f : {0.731, -2.0, 0.0, 5.5}) {
    const Tensor alpha = nn::attention_weights(g, std::vector<double>(21, f));
    for (double a : alpha.data) worst = std::max(worst, std::abs(a - 1.0 / 21.0));
  }
  return {worst < 1e-9, "max |alpha - 1/21| = " + num(worst) + " (1/21 = 4.76%)"};
}

// ---- 3 ------------------------------------------------------------------------

Outcome ik_oracle() {
  const kin::ArmModel& arm = scene().robot.left;
  Rng rng(11);
  const kin::Joints ready = {0.0, 0.6, 0.0, 1.2, 0.0, 0.6, 0.0};
  int ok = 0;
  for (int i = 0; i < 1000; ++i) {
    kin::Joints q{};
    for (std::size_t j = 0; j < q.size(); ++j) q[j] = uniform(rng, arm.joints[j].lower, arm.joints[j].upper);
    const kin::IkResult r = kin::ik_solve(arm, kin::forward_kinematics(arm, q), ready);
    ok += r.position_residual < 1e-3 && r.iterations <= 200;
  }
  return {ok >= 950, std::to_string(ok) + " / 1000 converged"};
}

// ---- 4 ------------------------------------------------------------------------

Outcome demo_replay() {
  std::string detail;
  bool pass = true;
  for (const auto& t : {task::table_lift_task(), task::peg_in_hole_task()}) {
    Rng rng(derive_seed(4, {static_cast<std::uint64_t>(t.kind)}));
    int ok = 0;
    for (int i = 0; i < 200; ++i) ok += task::run_demonstration(t, scene(), task::sample_spawn(t, rng)).success;
    pass = pass && ok >= 198;
    detail += task::to_string(t.kind) + " " + std::to_string(ok) + "/200 ";
  }
  return {pass, detail};
}

// ---- 5 ------------------------------------------------------------------------

void delannoy_paths(std::size_t n, std::size_t m, std::vector<std::pair<std::size_t, std::size_t>>& cur,
                    std::vector<std::vector<std::pair<std::size_t, std::size_t>>>& out) {
  const auto [i, j] = cur.back();
  if (i == n - 1 && j == m - 1) {
    out.push_back(cur);
    return;
  }
  for (const auto& [di, dj] : {std::pair{1, 0}, std::pair{0, 1}, std::pair{1, 1}}) {
    if (i + di >= n || j + dj >= m) continue;
    cur.push_back({i + di, j + dj});
    delannoy_paths(n, m, cur, out);
    cur.pop_back();
  }
}

Outcome metric_oracles() {
  std::vector<metrics::Trajectory> seqs;
  std::function<void(metrics::Trajectory&)> grow = [&](metrics::Trajectory& cur) {
    if (!cur.empty()) seqs.push_back(cur);
    if (cur.size() == 5) return;
    for (double v : {0.0, 1.0, 2.0}) {
      cur.push_back({v});
      grow(cur);
      cur.pop_back();
    }
  };
  metrics::Trajectory cur;
  grow(cur);
  std::vector<std::vector<std::vector<std::vector<std::pair<std::size_t, std::size_t>>>>> paths(6, decltype(paths)::value_type(6));
  for (std::size_t n = 1; n <= 5; ++n)
    for (std::size_t m = 1; m <= 5; ++m) {
      std::vector<std::pair<std::size_t, std::size_t>> p = {{0, 0}};
      delannoy_paths(n, m, p, paths[n][m]);
    }
  std::size_t dtw_bad = 0;
  for (const auto& a : seqs)
    for (const auto& b : seqs) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t len = 0;
      for (const auto& p : paths[a.size()][b.size()]) {
        double c = 0.0;
        for (const auto& [i, j] : p) c += std::abs(a[i][0] - b[j][0]);
        if (c < best || (c == best && p.size() < len)) best = c, len = p.size();
      }
      const auto r = metrics::dtw(a, b);
      dtw_bad += r.cost != best || r.length != len;
    }

  Rng rng(5);
  double euc = 0.0, ang = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    metrics::Trajectory p(9, task::StateVector(21)), q = p;
    for (auto* tr : {&p, &q})
      for (auto& s : *tr) {
        for (double& v : s) v = uniform(rng, -1, 1);
        for (std::size_t g = 0; g < 2; ++g) {
          double n = 0.0;
          for (std::size_t k = 3; k < 7; ++k) n += s[7 * g + k] * s[7 * g + k];
          for (std::size_t k = 3; k < 7; ++k) s[7 * g + k] /= std::sqrt(n);
        }
      }
    std::vector<double> e, a;
    for (std::size_t t = 0; t < p.size(); ++t) {
      double dl = 0.0, dr = 0.0, dotl = 0.0, dotr = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        dl += (p[t][k] - q[t][k]) * (p[t][k] - q[t][k]);
        dr += (p[t][7 + k] - q[t][7 + k]) * (p[t][7 + k] - q[t][7 + k]);
      }
      for (std::size_t k = 3; k < 7; ++k) dotl += p[t][k] * q[t][k], dotr += p[t][7 + k] * q[t][7 + k];
      e.push_back(50.0 * (std::sqrt(dl) + std::sqrt(dr)));
      a.push_back(std::acos(std::min(1.0, std::abs(dotl))) + std::acos(std::min(1.0, std::abs(dotr))));
    }
    double me = 0.0, ma = 0.0;
    for (double v : e) me += v / static_cast<double>(e.size());
    for (double v : a) ma += v / static_cast<double>(a.size());
    euc = std::max(euc, std::abs(metrics::euclidean_error(p, q).mean - me));
    ang = std::max(ang, std::abs(metrics::angular_error(p, q).mean - ma));
  }
  const kin::Quat qa = kin::normalize(kin::Quat{0.3, -0.5, 0.7, 0.2});
  const kin::Quat qn{-qa.w, -qa.x, -qa.y, -qa.z};
  const double antipodal = kin::geodesic_distance(qa, qn);
  const bool pass = dtw_bad == 0 && euc < 1e-12 && ang < 1e-12 && antipodal == 0.0;
  return {pass, "dtw mismatches " + std::to_string(dtw_bad) + " of " + std::to_string(seqs.size() * seqs.size()) + ", euclidean " + num(euc) +
                    ", angular " + num(ang) + ", geodesic(q,-q) " + num(antipodal)};
}

// ---- 6 ------------------------------------------------------------------------

Outcome overfit() {
  const task::TaskSpec t = task::table_lift_task();
  task::Dataset one = task::generate_dataset(t, scene(), 1, 11);
  const auto segs = dyn::segment_dataset(one, pipe::primitive_names(t));
  double worst = 0.0;
  for (std::size_t p = 0; p < segs.size(); ++p) {
    dyn::ModelBank bank = dyn::make_bank({}, true, pipe::horizons(t), 12);
    bank.scaler = dyn::fit_scaler(one);
    dyn::Segment s{static_cast<int>(p + 1), bank.scaler.normalize(segs[p][0].initial), {}};
    for (const auto& x : segs[p][0].targets) s.targets.push_back(bank.scaler.normalize(x));
    auto& m = bank.models[p];
    auto enc = m.encoder_parameters(), dec = m.decoder_parameters();
    AdamState es({1e-3}), ds({1e-3});
    Rng rng(13);
    for (int step = 0; step < 2000; ++step) {
      Tape tape;
      Tensor eps(Shape{1, 64});
      for (double& v : eps.data) v = standard_normal(rng);
      tape.backward(dyn::batch_loss(tape, m, {&s}, true, 0.0, &eps));
      adam_step(enc, es);
      adam_step(dec, ds);
    }
    Tape tape;
    worst = std::max(worst, dyn::batch_loss(tape, m, {&s}, true, 0.0, nullptr, false).value().item());
  }
  return {worst < 1e-3, "worst primitive MSE after 2000 steps " + num(worst)};
}

// ---- 7, 8 ---------------------------------------------------------------------

struct Desk {
  pipe::RunConfig config;
  task::TaskSpec task = task::table_lift_task();
  task::Dataset demos;
  task::Dataset heldout;
  plan::PlannerModel planner;
};

Desk& desk() {
  static Desk d = [] {
    Desk d;
    d.config.demos = 200;
    d.config.eval_spawns = 50;
    d.demos = pipe::training_demos(d.task, scene(), d.config);
    d.heldout = pipe::heldout_demos(d.task, scene(), d.config);
    d.planner = pipe::make_planner(d.task, d.config);
    plan::train_planner(d.planner, d.demos, pipe::planner_train_config(d.config));
    return d;
  }();
  return d;
}

Outcome planner_accuracy() {
  const double acc = plan::planner_accuracy(desk().planner, desk().heldout);
  return {acc >= 0.95, "held-out next-primitive accuracy " + num(100.0 * acc) + "%"};
}

Outcome directional_ablation() {
  Desk& d = desk();
  std::vector<std::pair<std::string, double>> rates;
  for (const auto& flags : {"graph,res,multi", "none", "graph,res"}) {
    const pipe::Variant v = pipe::parse_variant(flags);
    const auto bank = pipe::train_bank(d.task, d.config, v, d.demos);
    const auto run = pipe::evaluate_bank(pipe::variant_name(v), d.task, scene(), d.heldout, d.planner, bank, d.config, false);
    rates.emplace_back(pipe::variant_name(v), run.report.success);
  }
  std::string detail;
  for (const auto& [name, rate] : rates) detail += name + " " + num(100.0 * rate) + "%  ";
  return {rates[0].second > rates[1].second && rates[2].second >= rates[1].second, detail};
}

// ---- 9 ------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "hdril_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream conf(root / "small.conf");
    conf << "seed = 17\n[data]\ndemos = 10\neval_spawns = 4\n[dynamics]\nepochs = 3\n[dynamics.single]\nhidden = 12\n[dynamics.multi]\nhidden = 12\n"
            "[planner]\nhidden = 12\nepochs = 3\n";
  }
  std::size_t files = 0, differ = 0;
  int failures = 0;
  for (const char* run : {"a", "b"}) {
    for (const char* cmd : {"gen-demos", "train-planner", "train-dynamics", "rollout", "eval", "export-attention", "ablate"}) {
      const std::string line = std::string(HDRIL_CLI) + " --config " + (root / "small.conf").string() + " --out " + (root / run).string() + " " + cmd +
                               " > " + (root / "log.txt").string() + " 2>&1";
      failures += std::system(line.c_str()) != 0;
    }
  }
  for (const auto& e : fs::directory_iterator(root / "a")) {
    ++files;
    differ += slurp(e.path()) != slurp(root / "b" / e.path().filename());
  }
  return {failures == 0 && files >= 12 && differ == 0,
          std::to_string(files) + " artifacts compared, " + std::to_string(differ) + " differ, " + std::to_string(failures) + " commands failed"};
}

// ---- 10 -----------------------------------------------------------------------

Outcome relational() {
  const task::TaskSpec t = task::table_lift_task();
  pipe::RunConfig c;
  c.demos = 40;
  c.eval_spawns = 10;
  c.epochs = 30;
  c.planner_epochs = 60;
  const auto demos = pipe::training_demos(t, scene(), c);
  const auto rel = task::to_relational_coordinates(demos);
  const auto back = task::from_relational_coordinates(rel);
  double worst = 0.0;
  for (std::size_t i = 0; i < demos.demos.size(); ++i)
    for (std::size_t s = 0; s < demos.demos[i].states.size(); ++s)
      for (std::size_t k = 0; k < t.state_width(); ++k) worst = std::max(worst, std::abs(back.demos[i].states[s][k] - demos.demos[i].states[s][k]));
  plan::PlannerModel planner = pipe::make_planner(t, c);
  plan::train_planner(planner, demos, pipe::planner_train_config(c));
  const pipe::Variant v = pipe::parse_variant("res,relational");
  std::vector<double> h;
  const auto bank = pipe::train_bank(t, c, v, demos, &h);
  const auto run = pipe::evaluate_bank(pipe::variant_name(v), t, scene(), pipe::heldout_demos(t, scene(), c), planner, bank, c, true);
  const bool finite = std::isfinite(run.report.euclidean.mean) && std::isfinite(run.report.dtw) && std::isfinite(h.back());
  // Positions are below 2 m, so a - m + m lands within one rounding.
  return {finite && worst <= 4.5e-16 && h.back() < h.front(),
          "round trip max error " + num(worst) + ", loss " + num(h.front()) + " -> " + num(h.back()) + ", euclidean " + num(run.report.euclidean.mean) +
              " cm, success " + num(100.0 * run.report.success) + "%"};
}

}  // namespace

// With a criterion number, runs only that one.
int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient oracle", gradient_oracle}, {"GAT uniform attention", gat_uniform}, {"IK oracle", ik_oracle},
      {"demonstration replay", demo_replay}, {"metric oracles", metric_oracles},     {"overfit one segment", overfit},
      {"planner accuracy", planner_accuracy}, {"directional ablation", directional_ablation}, {"determinism", determinism},
      {"relational variant", relational},
  };
  int failed = 0;
  const std::size_t only = argc > 1 ? std::stoul(argv[1]) : 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && only != i + 1) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << i + 1 << ". " << criteria[i].first << ": " << o.detail << " [" << metrics::fmt(secs, 3) << " s]"
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
