#include "deelbo/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "deelbo/verify.hpp"

namespace deelbo {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

double to_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double x = std::strtod(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0')
    throw ConfigError("config: " + key + ": not a number: '" + value + "'");
  return x;
}

long long to_int(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const long long x = std::strtoll(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0')
    throw ConfigError("config: " + key + ": not an integer: '" + value + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: " + key + ": not a boolean: '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> items;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

std::vector<double> to_double_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  for (const auto& item : split_list(value)) out.push_back(to_double(key, item));
  return out;
}

std::vector<int> to_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  for (const auto& item : split_list(value))
    out.push_back(static_cast<int>(to_int(key, item)));
  return out;
}

}  // namespace

PriorKind parse_prior_kind(const std::string& name) {
  if (name == "l2zero") return PriorKind::L2Zero;
  if (name == "l2sp") return PriorKind::L2SP;
  if (name == "ptyl") return PriorKind::PTYL;
  throw ConfigError("config: unknown prior family '" + name + "'");
}

void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                        const std::string& value) {
  if (key == "model.hidden") cfg.hidden = to_int_list(key, value);
  else if (key == "model.repr_dim") cfg.repr_dim = int(to_int(key, value));
  else if (key == "model.classes") cfg.num_classes = int(to_int(key, value));
  else if (key == "data.train_csv") cfg.train_csv = value;
  else if (key == "data.test_csv") cfg.test_csv = value;
  else if (key == "data.synthetic") cfg.synthetic.enabled = to_bool(key, value);
  else if (key == "data.features") cfg.synthetic.features = int(to_int(key, value));
  else if (key == "data.n_source") cfg.synthetic.n_source = int(to_int(key, value));
  else if (key == "data.n_target") cfg.synthetic.n_target = int(to_int(key, value));
  else if (key == "data.n_test") cfg.synthetic.n_test = int(to_int(key, value));
  else if (key == "data.separation") cfg.synthetic.separation = to_double(key, value);
  else if (key == "data.shift") cfg.synthetic.shift = to_double(key, value);
  else if (key == "data.normalize") cfg.normalize = to_bool(key, value);
  else if (key == "data.seed") cfg.data_seed = std::uint64_t(to_int(key, value));
  else if (key == "run.prior") cfg.prior_kind = parse_prior_kind(value);
  else if (key == "run.method") cfg.method = value;
  else if (key == "run.prior_path") cfg.prior_path = value;
  else if (key == "run.out") cfg.out = value;
  else if (key == "run.seed") cfg.seed = std::uint64_t(to_int(key, value));
  else if (key == "run.workers") cfg.workers = int(to_int(key, value));
  else if (key == "run.threads") cfg.threads = int(to_int(key, value));
  else if (key == "run.swag") cfg.swag_rank = int(to_int(key, value));
  else if (key == "run.swag_interval") cfg.swag_interval = int(to_int(key, value));
  else if (key == "train.steps") cfg.train.steps = int(to_int(key, value));
  else if (key == "train.batch") cfg.train.batch_size = int(to_int(key, value));
  else if (key == "train.lr") cfg.train.lr_init = to_double(key, value);
  else if (key == "train.momentum") cfg.train.momentum = to_double(key, value);
  else if (key == "train.kappa_mode") {
    if (value == "fixed") cfg.train.kappa_mode = KappaMode::Fixed;
    else if (value == "d-over-n") cfg.train.kappa_mode = KappaMode::DOverN;
    else throw ConfigError("config: train.kappa_mode must be fixed or d-over-n");
  } else if (key == "train.kappa") {
    cfg.train.kappa = to_double(key, value);
    cfg.train.kappa_mode = KappaMode::Fixed;
  } else if (key == "train.mc_train") cfg.train.mc_train = int(to_int(key, value));
  else if (key == "train.mc_final") cfg.train.mc_final = int(to_int(key, value));
  else if (key == "train.lr_grid") cfg.lr_grid = to_double_list(key, value);
  else if (key == "grid.lr") cfg.grid.lr_grid = to_double_list(key, value);
  else if (key == "grid.alpha") cfg.grid.alpha_grid = to_double_list(key, value);
  else if (key == "grid.beta") cfg.grid.beta_grid = to_double_list(key, value);
  else if (key == "grid.lambda") cfg.grid.lambda_grid = to_double_list(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  ExperimentConfig cfg;
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(path + ":" + std::to_string(line_no) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    apply_config_entry(cfg, section.empty() ? key : section + "." + key, value);
  }
  return cfg;
}

std::string default_results_dir() {
  const char* env = std::getenv("DEELBO_RESULTS_DIR");
  return env && *env ? env : ".";
}

// ---------------------------------------------------------------------------
// Shared assembly
// ---------------------------------------------------------------------------

namespace {

std::uint64_t task_seed(const ExperimentConfig& cfg) { return cfg.data_seed; }

Dataset build_source_data(const ExperimentConfig& cfg) {
  if (!cfg.train_csv.empty()) return load_csv(cfg.train_csv, cfg.num_classes);
  SyntheticSpec spec{cfg.num_classes, cfg.synthetic.features, cfg.synthetic.n_source,
                     cfg.synthetic.separation};
  return make_synthetic(spec, task_seed(cfg));
}

struct TargetData {
  Dataset train;
  std::optional<Dataset> test;
  std::string task_fp;  // fingerprint of the raw test draw (train if absent)
};

TargetData build_target_data(const ExperimentConfig& cfg) {
  TargetData data;
  if (!cfg.train_csv.empty()) {
    data.train = load_csv(cfg.train_csv, cfg.num_classes);
    if (!cfg.test_csv.empty()) data.test = load_csv(cfg.test_csv, cfg.num_classes);
    data.task_fp = fingerprint_hex(data.test ? *data.test : data.train);
    return data;
  }
  const std::uint64_t base = task_seed(cfg);
  const std::uint64_t shift_seed = derive_seed(base, 2);
  SyntheticSpec spec{cfg.num_classes, cfg.synthetic.features, cfg.synthetic.n_target,
                     cfg.synthetic.separation};
  // The training set resamples with the run seed; the test draw is pinned
  // by the task seed so runs stay comparable.
  data.train = make_synthetic_shifted(spec, base, cfg.synthetic.shift, shift_seed,
                                      derive_seed(derive_seed(base, 3), cfg.seed));
  spec.num_examples = cfg.synthetic.n_test;
  data.test = make_synthetic_shifted(spec, base, cfg.synthetic.shift, shift_seed,
                                     derive_seed(base, 4));
  data.task_fp = fingerprint_hex(*data.test);
  return data;
}

void normalize_pair(const ExperimentConfig& cfg, Dataset& train, Dataset* test) {
  if (!cfg.normalize) return;
  const NormStats stats = normalize_fit(train);
  if (test) apply_normalization(*test, stats);
}

ModelSpec spec_for(const ExperimentConfig& cfg, const Dataset& data) {
  return make_model_spec(int(data.feature_dim()), cfg.hidden, cfg.repr_dim,
                         cfg.num_classes > 0 ? cfg.num_classes : data.num_classes);
}

struct LoadedPrior {
  Eigen::VectorXd mu;
  BackbonePrior<double> prior;
};

LoadedPrior load_prior(const ExperimentConfig& cfg, const ModelSpec& spec) {
  if (cfg.prior_path.empty())
    throw ConfigError("finetune/gridsearch need --prior <checkpoint>");
  const Checkpoint ckpt = load_checkpoint(cfg.prior_path);
  LoadedPrior out{ckpt.get_vector("mu_p"), BackbonePrior<double>::l2zero(spec.backbone_dim)};
  if (out.mu.size() != spec.backbone_dim)
    throw ConfigError("prior checkpoint dimension mismatch: mu_p has " +
                      std::to_string(out.mu.size()) + " entries, model needs " +
                      std::to_string(spec.backbone_dim));
  switch (cfg.prior_kind) {
    case PriorKind::L2Zero:
      out.prior = BackbonePrior<double>::l2zero(spec.backbone_dim);
      break;
    case PriorKind::L2SP:
      out.prior = BackbonePrior<double>::l2sp(out.mu);
      break;
    case PriorKind::PTYL: {
      if (!ckpt.has("prior.diag") || !ckpt.has("prior.Q"))
        throw ConfigError("ptyl prior requires a checkpoint with prior.diag and prior.Q "
                          "(pretrain with --swag K)");
      LowRankCov<double> cov(ckpt.get_vector("prior.diag"), ckpt.get_matrix("prior.Q"));
      if (cov.dim() != spec.backbone_dim)
        throw ConfigError("prior checkpoint covariance dimension mismatch");
      out.prior = BackbonePrior<double>::ptyl(out.mu, std::move(cov));
      break;
    }
  }
  return out;
}

void put_spec(Checkpoint& ckpt, const ModelSpec& spec) {
  std::vector<std::int64_t> layers;
  for (int s : spec.layer_sizes()) layers.push_back(s);
  ckpt.put_ints("spec.layers", layers);
  ckpt.put_int("spec.num_classes", spec.num_classes);
}

std::string out_path(const ExperimentConfig& cfg, const std::string& fallback_name,
                     bool out_is_directory) {
  if (cfg.out.empty()) return default_results_dir() + "/" + fallback_name;
  if (!out_is_directory) return cfg.out;
  fs::create_directories(cfg.out);
  return cfg.out + "/" + fallback_name;
}

json experiment_record(const RunResult& run, bool selected, std::size_t runs_counted,
                       double experiment_seconds, const std::string& task_fp) {
  json j = run_result_to_json(run);
  j["selected"] = selected;
  j["runs_counted"] = runs_counted;
  j["experiment_seconds"] = experiment_seconds;
  // Comparability keys off the raw test draw, not the per-run normalized view.
  j["task_fingerprint"] = task_fp;
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_pretrain(const ExperimentConfig& cfg, std::ostream& out) {
  Dataset source = build_source_data(cfg);
  normalize_pair(cfg, source, nullptr);
  const ModelSpec spec = spec_for(cfg, source);

  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = cfg.seed;
  const PretrainResult pre = pretrain_source(spec, source, train_cfg);
  const EvalMetrics source_fit = evaluate_point(spec, pre.params, source);

  Checkpoint ckpt;
  put_spec(ckpt, spec);
  ckpt.put_int("seed", std::int64_t(cfg.seed));
  ckpt.put_matrix("V_bar", pre.params.head);

  if (cfg.swag_rank != 0) {
    // Post-warmup phase: continue for half the pretraining budget at a
    // constant rate, snapshotting on the configured interval.
    TrainConfig swag_cfg = train_cfg;
    swag_cfg.steps = std::max(cfg.train.steps / 2, cfg.swag_rank * cfg.swag_interval);
    swag_cfg.seed = derive_seed(cfg.seed, 0x5A6ULL);
    const SwagPosterior swag =
        swag_collect(spec, source, pre.params, swag_cfg, cfg.swag_rank, cfg.swag_interval);
    ckpt.put_vector("mu_p", swag.mean);
    ckpt.put_vector("prior.diag", swag.cov.diag());
    ckpt.put_matrix("prior.Q", swag.cov.deviations());
    ckpt.put_int("prior.K", cfg.swag_rank);
  } else {
    ckpt.put_vector("mu_p", pre.params.backbone);
  }

  const std::string path = out_path(cfg, "prior.ckpt", false);
  save_checkpoint(path, ckpt);
  out << "pretrain: source accuracy " << source_fit.accuracy << ", nll "
      << source_fit.nll << "\n";
  out << "pretrain: wrote " << path << (cfg.swag_rank != 0 ? " (with SWAG prior)" : "")
      << "\n";
  return 0;
}

int cmd_finetune(const ExperimentConfig& cfg, std::ostream& out) {
  TargetData data = build_target_data(cfg);
  normalize_pair(cfg, data.train, data.test ? &*data.test : nullptr);
  const ModelSpec spec = spec_for(cfg, data.train);
  const LoadedPrior loaded = load_prior(cfg, spec);

  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = cfg.seed;
  const LrSelection sel =
      select_lr(spec, data.train, data.test ? &*data.test : nullptr, loaded.prior,
                loaded.mu, train_cfg, cfg.lr_grid, cfg.threads);

  const std::string results_path = out_path(cfg, "finetune_results.jsonl", true);
  for (std::size_t i = 0; i < sel.runs.size(); ++i) {
    if (!sel.runs[i]) continue;
    append_jsonl(results_path, experiment_record(*sel.runs[i], i == sel.best_index, 1,
                                                 sel.runs[i]->seconds, data.task_fp));
  }

  const RunResult& best = sel.best();
  Checkpoint final_ckpt;
  put_spec(final_ckpt, spec);
  final_ckpt.put_vector("w_bar", best.posterior.backbone_mean);
  final_ckpt.put_matrix("V_bar", best.posterior.head_mean);
  final_ckpt.put_scalar("rho", best.posterior.rho);
  final_ckpt.put_scalar("lambda", best.lambda);
  final_ckpt.put_scalar("tau", best.tau);
  final_ckpt.put_scalar("kappa", best.kappa);
  final_ckpt.put_int("seed", std::int64_t(cfg.seed));
  save_checkpoint(out_path(cfg, "final.ckpt", true), final_ckpt);

  out << "finetune(" << prior_kind_name(cfg.prior_kind) << "): selected lr "
      << best.lr_init << ", learned lambda " << best.lambda << ", tau " << best.tau
      << ", kappa " << best.kappa << "\n";
  if (data.test)
    out << "finetune: test accuracy " << best.test_accuracy << ", nll " << best.test_nll
        << "\n";
  out << "finetune: wrote " << results_path << "\n";
  return 0;
}

int cmd_gridsearch(const ExperimentConfig& cfg, std::ostream& out) {
  if (cfg.method != "map-gs" && cfg.method != "de-elbo")
    throw ConfigError("gridsearch: unknown method '" + cfg.method + "'");
  TargetData data = build_target_data(cfg);
  normalize_pair(cfg, data.train, data.test ? &*data.test : nullptr);
  const ModelSpec spec = spec_for(cfg, data.train);
  const LoadedPrior loaded = load_prior(cfg, spec);

  GridSpec grid = cfg.grid;
  const GridSpec defaults = cfg.prior_kind == PriorKind::PTYL ? GridSpec::defaults_ptyl()
                                                              : GridSpec::defaults_l2();
  if (grid.lr_grid.empty()) grid.lr_grid = defaults.lr_grid;
  if (grid.alpha_grid.empty()) grid.alpha_grid = defaults.alpha_grid;
  if (grid.beta_grid.empty()) grid.beta_grid = defaults.beta_grid;
  if (grid.lambda_grid.empty()) grid.lambda_grid = defaults.lambda_grid;

  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = cfg.seed;
  const GridResult result =
      run_grid(spec, data.train, data.test ? &*data.test : nullptr, loaded.prior,
               loaded.mu, grid, train_cfg, cfg.workers);

  const std::string table_path = out_path(cfg, "grid_table.csv", true);
  {
    std::ofstream table(table_path);
    if (!table) throw Error("gridsearch: cannot open " + table_path);
    table << "lr,alpha,beta_or_lambda,val_nll,val_acc,seconds\n";
    char buf[220];
    for (const auto& row : result.rows) {
      const double alpha =
          cfg.prior_kind == PriorKind::PTYL ? row.beta_over_n : row.alpha_over_n;
      const double beta_or_lambda =
          cfg.prior_kind == PriorKind::PTYL ? row.lambda : row.beta_over_n;
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", row.lr,
                    alpha, beta_or_lambda, row.val_nll, row.val_acc, row.seconds);
      table << buf;
    }
  }

  const std::string results_path = out_path(cfg, "gridsearch_results.jsonl", true);
  append_jsonl(results_path, experiment_record(result.retrained, true, result.total_runs,
                                               result.total_seconds, data.task_fp));

  const GridRow& sel = result.rows[result.selected];
  out << "gridsearch(" << prior_kind_name(cfg.prior_kind) << "): " << result.rows.size()
      << " grid runs + 1 retrain\n";
  out << "gridsearch: selected lr " << sel.lr;
  if (cfg.prior_kind == PriorKind::PTYL)
    out << ", lambda " << sel.lambda << ", beta/N " << sel.beta_over_n;
  else
    out << ", alpha/N " << sel.alpha_over_n;
  out << " (val nll " << sel.val_nll << ")\n";
  if (data.test)
    out << "gridsearch: test accuracy " << result.retrained.test_accuracy << ", nll "
        << result.retrained.test_nll << "\n";
  out << "gridsearch: wrote " << table_path << " and " << results_path << "\n";
  return 0;
}

int cmd_compare(const std::vector<std::string>& result_files, std::ostream& out) {
  if (result_files.size() < 2)
    throw ConfigError("compare: need at least two result files");

  std::vector<json> records;
  for (const auto& path : result_files)
    for (auto& record : read_jsonl(path)) records.push_back(std::move(record));
  if (records.empty()) throw ConfigError("compare: no records found");

  const std::string fingerprint = records.front().value("task_fingerprint", "");
  for (const auto& record : records)
    if (record.value("task_fingerprint", "") != fingerprint)
      throw ConfigError("compare: mixed dataset fingerprints; refusing to compare");

  struct MethodStats {
    std::vector<double> accuracies;  // selected runs only
    std::size_t runs = 0;
    double seconds = 0;
  };
  std::map<std::string, MethodStats> by_method;
  for (const auto& record : records) {
    auto& stats = by_method[record.value("method", "?")];
    stats.runs += record.value("runs_counted", std::size_t(1));
    stats.seconds += record.value("experiment_seconds", 0.0);
    if (record.value("selected", false))
      stats.accuracies.push_back(record.value("test_accuracy", 0.0));
  }

  out << "method        accuracy % mean (min-max)   SGD runs   total seconds\n";
  char buf[160];
  for (const auto& [method, stats] : by_method) {
    double mean = 0, lo = 0, hi = 0;
    if (!stats.accuracies.empty()) {
      lo = hi = stats.accuracies.front();
      for (double a : stats.accuracies) {
        mean += a;
        lo = std::min(lo, a);
        hi = std::max(hi, a);
      }
      mean /= double(stats.accuracies.size());
    }
    std::snprintf(buf, sizeof(buf), "%-12s  %.1f (%.1f-%.1f)%18zu%16.2f\n",
                  method.c_str(), 100 * mean, 100 * lo, 100 * hi, stats.runs,
                  stats.seconds);
    out << buf;
  }
  return 0;
}

int cmd_verify(std::ostream& out) {
  const auto suites = verify::run_all_suites(0);
  bool all_ok = true;
  for (const auto& suite : suites) {
    out << "suite " << suite.name << ": " << suite.passed << " passed, " << suite.failed
        << " failed\n";
    for (const auto& failure : suite.failures) out << "  FAIL " << failure << "\n";
    all_ok = all_ok && suite.ok();
  }
  out << (all_ok ? "verify: OK" : "verify: FAILED") << "\n";
  return all_ok ? 0 : 1;
}

}  // namespace deelbo
