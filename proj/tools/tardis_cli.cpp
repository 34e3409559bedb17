// tardis: experiment runner.
//
// Exit codes: 0 success, 1 usage or input error, 2 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tardis/analysis.hpp"
#include "tardis/checkpoint.hpp"
#include "tardis/config.hpp"
#include "tardis/gradcheck_suites.hpp"

namespace fs = std::filesystem;
using namespace tardis;

namespace {

constexpr int kUsage = 1;
constexpr int kNumerical = 2;

void apply_overrides(RunConfig& c, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError("--set expects key=value, got '" + s + "'");
    set_config_value(c, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)), "--set");
  }
  c.validate();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path + "'");
  return out;
}

nlohmann::json eval_json(const EvalResult& r, OutputKind kind) {
  return {{"loss", r.loss},
          {"aux_loss", r.aux_loss},
          {"metric", r.metric(kind)},
          {"bit_error", r.bit_error},
          {"per_digit_error", r.per_digit_error},
          {"scored", r.scored}};
}

// ----------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::string resume;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  Model model;
  TrainState st;
  if (!a.resume.empty()) {
    LoadedCheckpoint ck = load_checkpoint(a.resume);
    cfg = run_config_from_json(ck.run_config);
    model = std::move(ck.model);
    st = std::move(ck.state);
  } else {
    cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  }
  if (a.seed) cfg.seed = *a.seed;
  if (!a.output_dir.empty()) cfg.output_dir = a.output_dir;
  apply_overrides(cfg, a.sets);

  const TaskSource src(cfg);
  if (a.resume.empty()) {
    Rng init = Rng(cfg.seed).substream("init");
    model = Model::init(model_config(cfg, src), init);
  }
  fs::create_directories(cfg.output_dir);
  const std::string metrics_path = (fs::path(cfg.output_dir) / "metrics.jsonl").string();
  const std::string ckpt_path = (fs::path(cfg.output_dir) / "checkpoint.trds").string();
  std::ofstream metrics(metrics_path, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw ParseError("cannot write '" + metrics_path + "'");

  TrainOptions opt = train_options(cfg);
  opt.dump_path = (fs::path(cfg.output_dir) / "diverged_batch.txt").string();
  const TaskBatch valid = src.validation();
  const auto json = run_config_json(cfg);
  const Rng rng(cfg.seed);
  const TrainResult r = train_run(
      model, opt, [&](Rng& data) { return src.make(cfg.batch, data); }, valid, st,
      [&](const MetricRecord& m) {
        metrics << metric_json(m) << '\n' << std::flush;
        std::cout << metric_json(m) << '\n' << std::flush;
        save_checkpoint(ckpt_path, model, st, rng, json);
      });
  save_checkpoint(ckpt_path, model, st, rng, json);
  std::cerr << "trained " << r.steps << " updates, valid metric " << r.final_valid
            << (r.early_stopped ? " (target reached)" : "") << "; checkpoint " << ckpt_path << '\n';
  return 0;
}

// ------------------------------------------------------------------ eval

int cmd_eval(const std::string& checkpoint, const std::vector<std::string>& sets,
             std::optional<std::uint64_t> seed) {
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  RunConfig cfg = run_config_from_json(ck.run_config);
  if (seed) cfg.seed = *seed;
  apply_overrides(cfg, sets);
  const TaskSource src(cfg);
  const EvalResult r = evaluate(ck.model, src.validation(), cfg.mode, cfg.seed);
  nlohmann::json j = eval_json(r, ck.model.config.output);
  j["step"] = ck.state.step;
  j["task"] = cfg.task;
  j["mode"] = std::string(to_string(cfg.mode));
  std::cout << j.dump() << '\n';
  return 0;
}

// -------------------------------------------------------- simulate-paths

struct SimArgs {
  std::vector<std::string> models{"tardis-uniform"};
  std::size_t T = 200;
  std::vector<std::size_t> ks{50};
  std::size_t n_sims = 100;
  std::uint64_t seed = 1;
  std::optional<std::size_t> t0, t1;
  std::string out;
};

int cmd_simulate(const SimArgs& a) {
  if (a.t0.has_value() != a.t1.has_value()) throw ValueError("simulate: give both --t0 and --t1");
  std::optional<std::pair<std::size_t, std::size_t>> dep;
  if (a.t0) dep = std::pair{*a.t0, *a.t1};
  std::vector<PathStats> rows;
  for (const auto& m : a.models) {
    const AccessModel model = parse_access_model(m);
    for (std::size_t k : a.ks) rows.push_back(simulate_paths(model, a.T, k, a.n_sims, a.seed, dep));
  }
  std::ofstream file;
  if (!a.out.empty()) file = open_out(a.out);
  std::ostream& out = a.out.empty() ? std::cout : file;
  write_path_csv_header(out);
  for (const auto& r : rows) write_path_csv_row(out, r);
  return 0;
}

// ------------------------------------------------------- probe-gradients

struct ProbeArgs {
  std::size_t hidden = 32;
  std::size_t mem = 16;
  std::size_t inputs = 4;
  double w_norm = 0.9;
  std::string activation = "linear";
  std::vector<std::string> policies{"none", "oracle"};
  std::size_t t0 = 5;
  std::vector<std::size_t> gaps{10, 20, 40};
  std::size_t k = 8;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_probe(const ProbeArgs& a) {
  Activation f;
  if (a.activation == "linear") f = Activation::linear;
  else if (a.activation == "tanh") f = Activation::tanh;
  else throw ValueError("probe: activation must be linear or tanh");
  const Rng root(a.seed);
  Rng model_rng = root.substream("model");
  const ProbeModel model = random_probe_model(a.hidden, a.mem, a.inputs, a.w_norm, f, model_rng);
  std::ofstream file;
  if (!a.out.empty()) file = open_out(a.out);
  std::ostream& out = a.out.empty() ? std::cout : file;
  write_probe_csv_header(out);
  for (std::size_t gap : a.gaps) {
    const std::size_t t1 = a.t0 + gap;
    Rng in_rng = root.substream("inputs", gap);
    std::vector<std::vector<double>> xs(t1 + 1, std::vector<double>(a.inputs));
    for (auto& x : xs) {
      for (double& e : x) e = in_rng.uniform(-1, 1);
    }
    for (const auto& policy : a.policies) {
      std::vector<std::optional<std::size_t>> src;
      if (policy == "none") src = no_reads(t1);
      else if (policy == "oracle") src = oracle_sources(a.t0, t1);
      else if (policy == "uniform") {
        Rng trace_rng = root.substream("trace", gap);
        src = trace_sources(simulate_trace(AccessModel::tardis_uniform, t1, a.k, trace_rng));
      } else {
        throw ValueError("probe: policy must be none, oracle or uniform (got '" + policy + "')");
      }
      write_probe_csv_row(out, policy, f, jacobian_probe(model, a.t0, t1, xs, src));
    }
  }
  return 0;
}

// ------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, bool inject_fault, double tol) {
  GradCheckOptions opt;
  opt.inject_fault = inject_fault;
  const auto results = run_gradcheck(scope, seed, opt);
  double worst = 0.0;
  bool finite = true;
  for (const auto& r : results) {
    std::cout << r.block << ' ' << r.max_rel_error << (r.finite ? "" : " non-finite") << '\n';
    worst = std::max(worst, r.max_rel_error);
    finite = finite && r.finite;
  }
  const bool ok = finite && worst < tol;
  std::cout << "scope " << scope << " max_rel_error " << worst << (ok ? " PASS" : " FAIL") << '\n';
  return ok ? 0 : kNumerical;
}

// -------------------------------------------------------------- gen-data

int cmd_gen_data(const std::string& config, const std::vector<std::string>& sets,
                 std::optional<std::uint64_t> seed, std::size_t n, const std::string& out_path,
                 const std::string& glyphs_path) {
  if (!glyphs_path.empty()) {
    std::ofstream g = open_out(glyphs_path);
    std::vector<StrokeDigit> all;
    for (const auto& pool : builtin_glyphs().by_digit) all.insert(all.end(), pool.begin(), pool.end());
    write_stroke_csv(g, all);
    if (out_path.empty()) return 0;
  }
  RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
  if (seed) cfg.seed = *seed;
  apply_overrides(cfg, sets);
  const TaskSource src(cfg);
  Rng rng = Rng(cfg.seed).substream("gen-data");
  const TaskBatch b = src.make(n, rng);
  std::ofstream file;
  if (!out_path.empty()) file = open_out(out_path);
  std::ostream& out = out_path.empty() ? std::cout : file;
  for (const auto& ex : b.examples) {
    nlohmann::json j = {{"task", b.task}, {"inputs", ex.inputs}, {"targets", ex.targets},
                        {"mask", ex.mask}};
    if (!ex.labels.empty()) j["labels"] = ex.labels;
    out << j.dump() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TARDIS memory-augmented RNN experiments"};
  app.require_subcommand(1);

  TrainArgs train;
  std::uint64_t seed_value = 0;
  auto* t = app.add_subcommand("train", "train a model from a config file");
  t->add_option("-c,--config", train.config, "key=value config file")->check(CLI::ExistingFile);
  t->add_option("--set", train.sets, "override a config key (key=value), repeatable");
  auto* t_seed = t->add_option("--seed", seed_value, "run seed");
  t->add_option("-o,--output-dir", train.output_dir, "where metrics.jsonl and checkpoint.trds go");
  t->add_option("--resume", train.resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  std::string eval_ckpt;
  std::vector<std::string> eval_sets;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on fresh validation data");
  e->add_option("checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--set", eval_sets, "override a data key, e.g. max_len=15");
  auto* e_seed = e->add_option("--seed", seed_value, "validation seed");

  SimArgs sim;
  auto* s = app.add_subcommand("simulate-paths", "Monte-Carlo wormhole path statistics (CSV)");
  s->add_option("-m,--model", sim.models, "tardis-uniform, uMANN or urMANN; repeatable");
  s->add_option("-T,--steps", sim.T, "sequence length");
  s->add_option("-k,--cells", sim.ks, "memory size; repeatable");
  s->add_option("-n,--n-sims", sim.n_sims, "simulations per row");
  s->add_option("--seed", sim.seed, "seed");
  s->add_option("--t0", sim.t0, "dependency source step");
  s->add_option("--t1", sim.t1, "dependency target step");
  s->add_option("-o,--out", sim.out, "CSV path (default stdout)");

  ProbeArgs probe;
  auto* p = app.add_subcommand("probe-gradients", "Jacobian norm probes (CSV)");
  p->add_option("--hidden", probe.hidden, "state size");
  p->add_option("--mem", probe.mem, "memory projection size");
  p->add_option("--inputs", probe.inputs, "input size");
  p->add_option("--w-norm", probe.w_norm, "spectral norm of W");
  p->add_option("--activation", probe.activation, "linear or tanh");
  p->add_option("--policy", probe.policies, "none, oracle or uniform; repeatable");
  p->add_option("--t0", probe.t0, "source step");
  p->add_option("--gap", probe.gaps, "t1 - t0; repeatable");
  p->add_option("-k,--cells", probe.k, "memory size for the uniform policy");
  p->add_option("--seed", probe.seed, "seed");
  p->add_option("-o,--out", probe.out, "CSV path (default stdout)");

  std::string scope = "ops";
  bool inject_fault = false;
  double tol = 1e-4;
  std::uint64_t gc_seed = 1;
  auto* g = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  g->add_option("--scope", scope, "ops, controller, full-step or gumbel-st")
      ->check(CLI::IsMember({"ops", "controller", "full-step", "gumbel-st"}));
  g->add_option("--seed", gc_seed, "seed");
  g->add_flag("--inject-fault", inject_fault, "corrupt one analytic gradient (checker self-test)");
  g->add_option("--tol", tol, "maximum relative error");

  std::string gen_config, gen_out, gen_glyphs;
  std::vector<std::string> gen_sets;
  std::size_t gen_n = 4;
  auto* d = app.add_subcommand("gen-data", "write task examples as JSON lines");
  d->add_option("-c,--config", gen_config, "config file")->check(CLI::ExistingFile);
  d->add_option("--set", gen_sets, "override a config key (key=value)");
  auto* d_seed = d->add_option("--seed", seed_value, "seed");
  d->add_option("-n", gen_n, "number of examples");
  d->add_option("-o,--out", gen_out, "output path (default stdout)");
  d->add_option("--glyphs", gen_glyphs, "also write the built-in glyphs as stroke CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kUsage;
  }

  auto opt_seed = [&](CLI::Option* o) {
    return o->count() ? std::optional<std::uint64_t>(seed_value) : std::nullopt;
  };
  try {
    if (*t) {
      train.seed = opt_seed(t_seed);
      return cmd_train(train);
    }
    if (*e) return cmd_eval(eval_ckpt, eval_sets, opt_seed(e_seed));
    if (*s) return cmd_simulate(sim);
    if (*p) return cmd_probe(probe);
    if (*g) return cmd_gradcheck(scope, gc_seed, inject_fault, tol);
    if (*d) return cmd_gen_data(gen_config, gen_sets, opt_seed(d_seed), gen_n, gen_out, gen_glyphs);
  } catch (const NumericalError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kNumerical;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
