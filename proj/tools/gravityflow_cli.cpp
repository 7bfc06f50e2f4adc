#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gravityflow/checkpoint.hpp"
#include "gravityflow/dataset.hpp"
#include "gravityflow/inspect.hpp"
#include "gravityflow/manifest.hpp"
#include "gravityflow/selfcheck.hpp"
#include "gravityflow/synthetic.hpp"
#include "gravityflow/training.hpp"

namespace fs = std::filesystem;
using namespace gravityflow;

namespace {

// Exit codes: 0 success, 1 runtime / numeric failure, 2 usage / validation.
constexpr int kOk = 0, kFailure = 1, kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void prepare_out(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(IoError::Kind::write_failed, "cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << s;
  if (!f) throw IoError(IoError::Kind::write_failed, "cannot write " + p.string());
}

RunConfig read_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

// ------------------------------------------------------------------ generate

struct GenerateArgs {
  std::uint64_t seed = 42;
  std::size_t nodes = 24, days = 28;
  std::string out;
  bool force = false;
  std::optional<double> beta, base_rate, stay, noise;
  std::optional<std::size_t> steps_per_day;
  std::optional<std::string> start_date;
  std::vector<std::string> holidays;
};

nlohmann::json scenario_json(const CityScenario& sc) {
  std::vector<std::vector<double>> coords;
  for (std::size_t i = 0; i < sc.num_nodes; ++i) coords.push_back({sc.coords[2 * i], sc.coords[2 * i + 1]});
  return {{"seed", sc.seed},
          {"num_nodes", sc.num_nodes},
          {"days", sc.days},
          {"steps_per_day", sc.steps_per_day},
          {"beta_true", sc.beta_true},
          {"base_rate", sc.base_rate},
          {"stay_param", sc.stay_param},
          {"noise_level", sc.noise_level},
          {"weekend_factor", sc.weekend_factor},
          {"holiday_factor", sc.holiday_factor},
          {"side_km", sc.side_km},
          {"burn_in_steps", sc.burn_in_steps},
          {"coords_km", coords},
          {"masses", sc.masses.storage()}};
}

int cmd_generate(const GenerateArgs& a) {
  const fs::path out(a.out);
  if (fs::exists(out) && !fs::is_directory(out)) throw UsageError(a.out + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out) && !a.force)
    throw UsageError(a.out + " is not empty; pass --force to overwrite");
  ScenarioOverrides o;
  o.beta_true = a.beta;
  o.base_rate = a.base_rate;
  o.stay_param = a.stay;
  o.noise_level = a.noise;
  o.steps_per_day = a.steps_per_day;
  o.start_date = a.start_date;
  if (!a.holidays.empty()) o.holiday_dates = a.holidays;
  const CityScenario sc = generate_scenario(a.seed, a.nodes, a.days, o);

  RunManifest rm;
  rm.command = "generate";
  rm.seed = a.seed;
  rm.config = scenario_json(sc);
  rm.config.erase("coords_km");
  rm.config.erase("masses");
  const PanelDataset ds = simulate(sc);
  prepare_out(out);
  write_dataset(out, ds);
  write_text(out / "scenario.json", scenario_json(sc).dump(2) + "\n");
  rm.outputs = {"meta.json", "activity.f32", "inflow.f32", "outflow.f32", "distances.f32", "true_gravity.f32", "scenario.json"};
  rm.finish(out);

  double mean = 0;
  for (float v : ds.activity.storage()) mean += v;
  mean /= static_cast<double>(ds.activity.size());
  std::cout << "N=" << ds.num_nodes() << " S=" << ds.num_steps() << " mean_activity=" << fmt("%.4f", mean) << "\n";
  return kOk;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string data, config, out;
  std::size_t epochs = 30;
  std::uint64_t seed = 42;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = read_config(a.config);
  const PanelDataset ds = read_dataset(a.data);
  if (rc.model.num_nodes != ds.num_nodes())
    throw UsageError("config has N = " + std::to_string(rc.model.num_nodes) + " but dataset " + a.data + " has " +
                     std::to_string(ds.num_nodes()) + " nodes");
  if (rc.model.steps_per_day != ds.meta.steps_per_day)
    throw UsageError("config has D = " + std::to_string(rc.model.steps_per_day) + " but the dataset has " +
                     std::to_string(ds.meta.steps_per_day) + " steps per day");
  const fs::path out(a.out);
  prepare_out(out);
  RunManifest rm;
  rm.command = "train";
  rm.dataset = fs::absolute(a.data).string();
  rm.seed = a.seed;

  std::ofstream log(out / "metrics.csv", std::ios::trunc);
  log << metrics_csv_header() << "\n";
  std::cout << "parameters: " << init_parameters<float>(rc.model).scalar_count() << "\n";
  auto on_epoch = [&](const EpochRecord& e) {
    log << metrics_csv_row(e.epoch, "train", e.train, e.seconds) << "\n"
        << metrics_csv_row(e.epoch, "val", e.val, e.seconds) << "\n";
    log.flush();
    std::cout << "epoch " << e.epoch << "  train_l1 " << fmt("%.4f", e.train_loss) << "  val_rmse " << fmt("%.4f", e.val.rmse)
              << "  val_mae " << fmt("%.4f", e.val.mae) << "  " << fmt("%.1f", e.seconds) << "s" << std::endl;
  };
  const auto res = train<float>(rc.model, rc.train, ds, a.epochs, a.seed, on_epoch);
  if (!log) throw IoError(IoError::Kind::write_failed, "cannot write metrics.csv");
  log.close();
  const Checkpoint ck = make_checkpoint(res, rc.train);
  save_checkpoint(out / "model.ckpt", ck);
  rm.config = {{"model", to_json(ck.config)}, {"train", to_json(rc.train)}, {"epochs", a.epochs}};
  rm.outputs = {"model.ckpt", "metrics.csv"};
  rm.finish(out);
  if (res.best_val_rmse)
    std::cout << "best epoch " << res.best_epoch << "  val_rmse " << fmt("%.6f", *res.best_val_rmse) << "\n";
  else
    std::cout << "no training epochs; saved the initialised model\n";
  return kOk;
}

// ---------------------------------------------------------------------- eval

struct EvalArgs {
  std::string data, checkpoint, split = "test", baseline, out;
};

std::string eval_csv(const std::string& split, const MetricsReport& r) {
  auto row = [&](const std::string& h, const MetricLine& m) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%s,%zu\n", split.c_str(), h.c_str(), m.rmse, m.mae, format_mape(m.mape).c_str(),
                  m.mape_excluded);
    return std::string(buf);
  };
  std::string s = "split,horizon,rmse,mae,mape,mape_excluded\n";
  for (std::size_t h = 0; h < r.per_horizon.size(); ++h) s += row(std::to_string(h + 1), r.per_horizon[h]);
  s += row("all", r);
  return s;
}

void print_table(const std::string& who, const MetricsReport& r) {
  std::cout << who << "\n  horizon      rmse       mae      mape\n";
  auto line = [](const std::string& h, const MetricLine& m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "  %-7s %9.4f %9.4f %9s\n", h.c_str(), m.rmse, m.mae, format_mape(m.mape).c_str());
    std::cout << buf;
  };
  for (std::size_t h = 0; h < r.per_horizon.size(); ++h) line(std::to_string(h + 1), r.per_horizon[h]);
  line("all", r);
}

int cmd_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() && a.baseline.empty()) throw UsageError("eval needs --checkpoint and/or --baseline ha");
  const PanelDataset ds = read_dataset(a.data);
  RunManifest rm;
  rm.command = "eval";
  rm.dataset = fs::absolute(a.data).string();
  rm.config = {{"split", a.split}, {"checkpoint", a.checkpoint}, {"baseline", a.baseline}};
  const fs::path out(a.out);
  if (!a.out.empty()) prepare_out(out);

  if (!a.checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(a.checkpoint);
    if (ck.config.num_nodes != ds.num_nodes() || ck.config.steps_per_day != ds.meta.steps_per_day)
      throw UsageError("checkpoint (N = " + std::to_string(ck.config.num_nodes) + ", D = " + std::to_string(ck.config.steps_per_day) +
                       ") does not match the dataset (N = " + std::to_string(ds.num_nodes()) +
                       ", D = " + std::to_string(ds.meta.steps_per_day) + ")");
    const auto model = model_from_checkpoint<float>(ck, ds);
    const auto pl = pipeline_from_checkpoint(ck, ds);
    const IndexRange r = split_range(pl.split(), a.split);
    const auto rep = evaluate(targets(pl, r), predict(model, pl, r, 64, thread_budget()));
    rm.seed = ck.config.seed;
    print_table("model (" + a.split + ")", rep);
    if (!a.out.empty()) {
      write_text(out / ("eval_model_" + a.split + ".csv"), eval_csv(a.split, rep));
      rm.outputs.push_back("eval_model_" + a.split + ".csv");
    }
  }
  if (!a.baseline.empty()) {
    const ModelConfig defaults;
    std::size_t q = defaults.input_steps, p = defaults.horizon;
    if (!a.checkpoint.empty()) {
      const auto ck = load_checkpoint(a.checkpoint);
      q = ck.config.input_steps;
      p = ck.config.horizon;
    }
    const DataPipeline pl(ds, q, p);
    const IndexRange r = split_range(pl.split(), a.split);
    const auto rep = evaluate(targets(pl, r), ha_baseline(pl, a.split));
    print_table("ha (" + a.split + ")", rep);
    if (!a.out.empty()) {
      write_text(out / ("eval_ha_" + a.split + ".csv"), eval_csv(a.split, rep));
      rm.outputs.push_back("eval_ha_" + a.split + ".csv");
    }
  }
  if (!a.out.empty()) rm.finish(out);
  return kOk;
}

// -------------------------------------------------------- export-attention

struct ExportArgs {
  std::string checkpoint, data, split = "test", out;
  std::size_t layer = 0, sample = 0;
};

std::string dense_csv(const Array<double>& m) {
  const std::size_t n = m.shape()[0];
  std::string s;
  char buf[40];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof buf, "%s%.17g", j ? "," : "", m[i * n + j]);
      s += buf;
    }
    s += "\n";
  }
  return s;
}

int cmd_export(const ExportArgs& a) {
  const PanelDataset ds = read_dataset(a.data);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  if (ck.config.num_nodes != ds.num_nodes()) throw UsageError("checkpoint N does not match the dataset");
  const std::size_t layer = a.layer == 0 ? ck.config.layers : a.layer;
  if (layer > ck.config.layers)
    throw UsageError("--layer " + std::to_string(layer) + " is out of range 1.." + std::to_string(ck.config.layers));
  if (!has_spatial(block_kind(ck.config, layer - 1))) throw UsageError("layer " + std::to_string(layer) + " has no spatial attention");
  const auto model = model_from_checkpoint<double>(ck, ds);
  const auto pl = pipeline_from_checkpoint(ck, ds);
  const IndexRange r = split_range(pl.split(), a.split);
  if (a.sample >= r.size())
    throw UsageError("--sample " + std::to_string(a.sample) + " is out of range for the " + a.split + " split (" +
                     std::to_string(r.size()) + " windows)");
  const auto snap = attention_snapshot(model, pl, {r.begin + a.sample}, layer);

  const fs::path out(a.out);
  prepare_out(out);
  RunManifest rm;
  rm.command = "export-attention";
  rm.dataset = fs::absolute(a.data).string();
  rm.seed = ck.config.seed;
  rm.config = {{"checkpoint", fs::absolute(a.checkpoint).string()}, {"layer", layer}, {"split", a.split}, {"sample", a.sample}};
  write_text(out / "attention.csv", dense_csv(snap.attention));
  write_text(out / "gravity_attention.csv", dense_csv(snap.gravity_attention));
  write_text(out / "distance_kernel.csv", dense_csv(model.kernel().a_d));
  rm.outputs = {"attention.csv", "gravity_attention.csv", "distance_kernel.csv"};
  if (snap.gravity) {
    write_text(out / "gravity.csv", dense_csv(*snap.gravity));
    rm.outputs.push_back("gravity.csv");
  }

  const std::size_t n = ds.num_nodes();
  std::string edges = "src,dst,src_x,src_y,dst_x,dst_y,weight\n";
  char buf[256];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto &s = ds.meta.nodes[i], &d = ds.meta.nodes[j];
      std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g,%.9g,%.9g,%.17g\n", s.id.c_str(), d.id.c_str(), s.x, s.y, d.x, d.y,
                    snap.gravity_attention[i * n + j]);
      edges += buf;
    }
  write_text(out / "edges.csv", edges);

  const auto& kd = model.kernel().a_d;
  std::string stats = "matrix,sparsity,row_entropy\n";
  stats += "attention," + fmt("%.6f", snap.attention_sparsity) + "," + fmt("%.6f", snap.attention_entropy) + "\n";
  stats += "gravity_attention," + fmt("%.6f", snap.gravity_attention_sparsity) + "," + fmt("%.6f", snap.gravity_attention_entropy) + "\n";
  stats += "distance_kernel," + fmt("%.6f", sparsity(kd)) + "," + fmt("%.6f", row_entropy(kd)) + "\n";
  write_text(out / "stats.csv", stats);
  rm.outputs.push_back("edges.csv");
  rm.outputs.push_back("stats.csv");
  rm.finish(out);
  std::cout << "layer " << layer << " sample " << a.sample << " (" << a.split << ")  sparsity relu(A_S) "
            << fmt("%.4f", snap.attention_sparsity) << "  sparsity gated " << fmt("%.4f", snap.gravity_attention_sparsity)
            << "  entropy relu(A_S) " << fmt("%.4f", snap.attention_entropy) << "  entropy gated "
            << fmt("%.4f", snap.gravity_attention_entropy) << "\n";
  return kOk;
}

// ----------------------------------------------------------------- gradcheck

struct GradArgs {
  std::string config;
  std::uint64_t seed = 1;
  double step = 1e-5, tol = 1e-3;
  bool sign_flip = false, verbose = false;
};

int cmd_gradcheck(const GradArgs& a) {
  ModelConfig c = a.config.empty() ? toy_config() : load_run_config(a.config).model;
  ModelGradCheckOptions o;
  o.step = a.step;
  o.tolerance = a.tol;
  o.sign_flip = a.sign_flip;
  const auto rep = model_grad_check(c, a.seed, o);
  if (a.verbose)
    for (const auto& e : rep.entries) std::cout << "  " << e.name << "  " << fmt("%.3e", e.max_rel_error) << "\n";
  std::cout << "gradcheck seed " << a.seed << ": " << rep.entries.size() << " tensors, max relative error "
            << fmt("%.3e", rep.max_rel_error) << " (" << rep.worst_parameter << "), tolerance " << fmt("%.0e", a.tol) << "  "
            << (rep.passed ? "PASS" : "FAIL") << "\n";
  return rep.passed ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gravity-informed spatiotemporal forecasting"};
  app.require_subcommand(1);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Simulate a synthetic city and write a dataset directory");
  gen->add_option("--seed", ga.seed, "Scenario seed")->capture_default_str();
  gen->add_option("--nodes", ga.nodes, "Number of sites")->capture_default_str();
  gen->add_option("--days", ga.days, "Simulated days")->capture_default_str();
  gen->add_option("--out", ga.out, "Output directory")->required();
  gen->add_flag("--force", ga.force, "Write into a non-empty directory");
  gen->add_option("--beta", ga.beta, "Distance decay exponent");
  gen->add_option("--base-rate", ga.base_rate, "Departures per step for a unit mass");
  gen->add_option("--stay", ga.stay, "Mean stay in steps");
  gen->add_option("--noise", ga.noise, "Noise level");
  gen->add_option("--steps-per-day", ga.steps_per_day, "Time steps per day");
  gen->add_option("--start-date", ga.start_date, "First day, YYYY-MM-DD");
  gen->add_option("--holiday", ga.holidays, "Holiday date (repeatable)");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--config", ta.config, "Model/optimiser config file (key = value)");
  tr->add_option("--epochs", ta.epochs, "Training epochs")->capture_default_str();
  tr->add_option("--seed", ta.seed, "Initialisation and shuffling seed")->capture_default_str();
  tr->add_option("--out", ta.out, "Output directory")->required();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and/or the historical-average baseline");
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint file");
  ev->add_option("--split", ea.split, "val or test")->check(CLI::IsMember({"val", "test"}))->capture_default_str();
  ev->add_option("--baseline", ea.baseline, "Baseline to evaluate")->check(CLI::IsMember({"ha"}));
  ev->add_option("--out", ea.out, "Directory for metrics CSVs");

  ExportArgs xa;
  auto* ex = app.add_subcommand("export-attention", "Export spatial attention, gravity attention and distance kernel");
  ex->add_option("--checkpoint", xa.checkpoint, "Checkpoint file")->required();
  ex->add_option("--data", xa.data, "Dataset directory")->required();
  ex->add_option("--layer", xa.layer, "Layer, 1-based (default: last)");
  ex->add_option("--sample", xa.sample, "Window index within the split")->capture_default_str();
  ex->add_option("--split", xa.split, "val or test")->check(CLI::IsMember({"val", "test"}))->capture_default_str();
  ex->add_option("--out", xa.out, "Output directory")->required();

  GradArgs da;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every model gradient (64-bit)");
  gc->add_option("--config", da.config, "Config file (default: built-in toy config)");
  gc->add_option("--seed", da.seed, "Seed")->capture_default_str();
  gc->add_option("--step", da.step, "Central difference step")->capture_default_str();
  gc->add_option("--tol", da.tol, "Relative error tolerance")->capture_default_str();
  gc->add_flag("--sign-flip", da.sign_flip, "Negate analytic gradients (should fail)");
  gc->add_flag("-v,--verbose", da.verbose, "Per-tensor errors");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_generate(ga);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(ea);
    if (*ex) return cmd_export(xa);
    if (*gc) return cmd_gradcheck(da);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind == IoError::Kind::write_failed ? kFailure : kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const RangeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
