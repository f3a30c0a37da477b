#include "deelbo/gridsearch.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "deelbo/rng.hpp"

namespace deelbo {

GridSpec GridSpec::defaults_l2() {
  GridSpec grid;
  grid.lr_grid = {0.1, 0.01, 0.001, 0.0001};
  grid.alpha_grid = {0.01, 0.001, 0.0001, 1e-5, 1e-6, 0.0};
  return grid;
}

GridSpec GridSpec::defaults_ptyl() {
  GridSpec grid;
  grid.lr_grid = {0.1, 0.01, 0.001, 0.0001};
  grid.beta_grid = {0.01, 0.001, 0.0001, 1e-5, 1e-6, 0.0};
  grid.lambda_grid.resize(10);
  for (int i = 0; i < 10; ++i) grid.lambda_grid[i] = std::pow(10.0, i);
  return grid;
}

void GridSpec::validate(PriorKind kind) const {
  if (lr_grid.empty()) throw ConfigError("grid: empty learning-rate grid");
  if (kind == PriorKind::PTYL) {
    if (lambda_grid.empty() || beta_grid.empty())
      throw ConfigError("grid: ptyl needs lambda and beta grids");
    for (double l : lambda_grid)
      if (!(l > 0)) throw ConfigError("grid: lambda values must be > 0");
    for (double b : beta_grid)
      if (b < 0) throw ConfigError("grid: beta values must be >= 0");
  } else {
    if (alpha_grid.empty()) throw ConfigError("grid: empty penalty grid");
    for (double a : alpha_grid)
      if (a < 0) throw ConfigError("grid: penalty values must be >= 0");
  }
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& data, double val_fraction,
                                            std::uint64_t seed) {
  if (!(val_fraction > 0 && val_fraction < 1))
    throw ConfigError("split_train_val: fraction must be in (0, 1)");

  std::vector<std::vector<Eigen::Index>> groups(data.num_classes);
  for (Eigen::Index i = 0; i < data.size(); ++i)
    groups[static_cast<std::size_t>(data.labels[i])].push_back(i);

  Rng rng(seed);
  std::vector<Eigen::Index> train_rows, val_rows;
  for (int c = 0; c < data.num_classes; ++c) {
    auto& rows = groups[static_cast<std::size_t>(c)];
    const auto count = static_cast<long>(rows.size());
    const long n_val = std::lround(double(count) * val_fraction);
    if (n_val < 1 || n_val >= count)
      throw StratificationError("split_train_val: class " + std::to_string(c) +
                                " with " + std::to_string(count) +
                                " examples cannot be stratified at fraction " +
                                std::to_string(val_fraction));
    rng.shuffle(rows);
    val_rows.insert(val_rows.end(), rows.begin(), rows.begin() + n_val);
    train_rows.insert(train_rows.end(), rows.begin() + n_val, rows.end());
  }
  rng.shuffle(train_rows);
  rng.shuffle(val_rows);

  auto take = [&data](const std::vector<Eigen::Index>& rows) {
    Dataset out;
    out.num_classes = data.num_classes;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), data.feature_dim());
    out.labels.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.features.row(static_cast<Eigen::Index>(i)) = data.features.row(rows[i]);
      out.labels[static_cast<Eigen::Index>(i)] = data.labels[rows[i]];
    }
    return out;
  };
  return {take(train_rows), take(val_rows)};
}

namespace {

struct GridPoint {
  double lr = 0;
  double alpha_over_n = 0;
  double beta_over_n = 0;
  double lambda = 0;

  /// Absolute penalties for a training set of size n. For the low-rank
  /// prior the backbone weight is 1/lambda regardless of n.
  std::pair<double, double> absolute_penalties(PriorKind kind, Eigen::Index n) const {
    const double beta = beta_over_n * double(n);
    if (kind == PriorKind::PTYL) return {1.0 / lambda, beta};
    return {alpha_over_n * double(n), beta};
  }

  double backbone_strength(PriorKind kind) const {
    return kind == PriorKind::PTYL ? 1.0 / lambda : alpha_over_n;
  }
};

std::vector<GridPoint> enumerate_points(const GridSpec& grid, PriorKind kind) {
  std::vector<GridPoint> points;
  if (kind == PriorKind::PTYL) {
    points.reserve(grid.lr_grid.size() * grid.lambda_grid.size() * grid.beta_grid.size());
    for (double lr : grid.lr_grid)
      for (double lambda : grid.lambda_grid)
        for (double beta : grid.beta_grid)
          points.push_back({lr, 0.0, beta, lambda});
  } else {
    points.reserve(grid.lr_grid.size() * grid.alpha_grid.size());
    for (double lr : grid.lr_grid)
      for (double alpha : grid.alpha_grid)
        points.push_back({lr, alpha, alpha, 0.0});
  }
  return points;
}

/// Ties on validation NLL prefer stronger regularization, then smaller lr.
bool better_than(const GridPoint& a, double nll_a, const GridPoint& b, double nll_b,
                 PriorKind kind) {
  if (nll_a != nll_b) return nll_a < nll_b;
  const double sa = a.backbone_strength(kind);
  const double sb = b.backbone_strength(kind);
  if (sa != sb) return sa > sb;
  if (a.beta_over_n != b.beta_over_n) return a.beta_over_n > b.beta_over_n;
  return a.lr < b.lr;
}

}  // namespace

GridResult run_grid(const ModelSpec& spec, const Dataset& train, const Dataset* test,
                    const BackbonePrior<double>& prior,
                    const Eigen::VectorXd& init_backbone, const GridSpec& grid,
                    const TrainConfig& cfg, int workers) {
  grid.validate(prior.kind);
  const auto start = std::chrono::steady_clock::now();
  const auto [fit_split, val_split] = split_train_val(train, 0.2, cfg.seed);

  FlatParams<double> init;
  init.backbone = init_backbone;
  init.head = Eigen::MatrixXd::Zero(spec.num_classes, spec.repr_dim);

  const auto points = enumerate_points(grid, prior.kind);
  GridResult result;
  result.rows.resize(points.size());

  parallel_for(points.size(), workers, [&](std::size_t i) {
    const GridPoint& pt = points[i];
    GridRow row;
    row.lr = pt.lr;
    row.alpha_over_n = pt.alpha_over_n;
    row.beta_over_n = pt.beta_over_n;
    row.lambda = pt.lambda;

    TrainConfig run_cfg = cfg;
    run_cfg.lr_init = pt.lr;
    run_cfg.seed = derive_seed(cfg.seed, i);
    const auto [alpha, beta] = pt.absolute_penalties(prior.kind, fit_split.size());
    try {
      const RunResult run =
          train_map(spec, fit_split, nullptr, prior, alpha, beta, init, run_cfg);
      const EvalMetrics metrics = evaluate_point(spec, run.point, val_split);
      row.val_nll = metrics.nll;
      row.val_acc = metrics.accuracy;
      row.seconds = run.seconds;
    } catch (const DivergenceError&) {
      row.diverged = true;
      row.val_nll = std::numeric_limits<double>::infinity();
      row.val_acc = 0;
    }
    result.rows[i] = row;
  });

  bool any = false;
  std::size_t best = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (result.rows[i].diverged) continue;
    if (!any) {
      any = true;
      best = i;
      continue;
    }
    if (better_than(points[i], result.rows[i].val_nll, points[best],
                    result.rows[best].val_nll, prior.kind))
      best = i;
  }
  if (!any) {
    std::string detail = "run_grid: every configuration diverged:";
    for (const auto& row : result.rows)
      detail += "\n  lr " + std::to_string(row.lr) + " alpha/N " +
                std::to_string(row.alpha_over_n) + " beta/N " +
                std::to_string(row.beta_over_n) + " lambda " +
                std::to_string(row.lambda);
    throw DivergenceError(detail);
  }
  result.selected = best;

  // Retrain the winner on the merged train+val set with the same schedule.
  TrainConfig retrain_cfg = cfg;
  retrain_cfg.lr_init = points[best].lr;
  retrain_cfg.seed = derive_seed(cfg.seed, points.size());
  const auto [alpha, beta] = points[best].absolute_penalties(prior.kind, train.size());
  result.retrained =
      train_map(spec, train, test, prior, alpha, beta, init, retrain_cfg);
  result.retrained.method = "map-gs";

  result.total_runs = points.size() + 1;
  result.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace deelbo
