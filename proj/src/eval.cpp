#include "dynainfer/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>

#include "dynainfer/errors.hpp"

namespace dynainfer {

double mse(const Tensor& pred, const Tensor& truth) {
  require_same_shape(pred, truth, "mse");
  if (pred.size() == 0) throw ArgumentError("mse of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

double mape(const Tensor& pred, const Tensor& truth) {
  require_same_shape(pred, truth, "mape");
  if (pred.size() == 0) throw ArgumentError("mape of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    s += std::abs(pred[i] - truth[i]) / std::max(std::abs(truth[i]), kMapeGuard);
  }
  return 100.0 * s / static_cast<double>(pred.size());
}

namespace {

// One RK4 step on rows of x, every row under the same block.
Tensor rk4_rows(const DecomposedModel& model, std::size_t env, const Tensor& x,
                double h) {
  const Tensor k1 = model_vf(model, env, x);
  Tensor y = x;
  for (std::size_t j = 0; j < y.size(); ++j) y[j] = x[j] + 0.5 * h * k1[j];
  const Tensor k2 = model_vf(model, env, y);
  for (std::size_t j = 0; j < y.size(); ++j) y[j] = x[j] + 0.5 * h * k2[j];
  const Tensor k3 = model_vf(model, env, y);
  for (std::size_t j = 0; j < y.size(); ++j) y[j] = x[j] + h * k3[j];
  const Tensor k4 = model_vf(model, env, y);
  Tensor out = x;
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
  }
  return out;
}

}  // namespace

std::vector<ModelRollout> rollout_batch(const DecomposedModel& model,
                                        std::span<const std::size_t> envs,
                                        const Tensor& x0, const TimeGrid& grid,
                                        const EvalOptions& opts) {
  const std::size_t b = x0.rows(), dim = model.system.state_dim();
  if (x0.rank() != 2 || x0.cols() != dim) {
    throw ShapeError("rollout_batch: initial states " + shape_string(x0.shape()));
  }
  if (envs.size() != b) throw ArgumentError("one environment per initial state");
  if (opts.substeps < 1) throw ArgumentError("substeps must be >= 1");
  for (std::size_t e : envs) {
    if (e >= model.env_count()) throw IndexError("environment out of range");
  }
  std::vector<ModelRollout> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i].states = Tensor({grid.count, dim});
    std::copy(x0.ptr() + i * dim, x0.ptr() + (i + 1) * dim, out[i].states.ptr());
  }
  const bool clamp = model.system.kind == SystemKind::LotkaVolterra;
  const double h = grid.dt / static_cast<double>(opts.substeps);
  const long long m = static_cast<long long>(model.env_count());
#pragma omp parallel for schedule(dynamic, 1) if (m > 1)
  for (long long e = 0; e < m; ++e) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < b; ++i) {
      if (envs[i] == static_cast<std::size_t>(e)) rows.push_back(i);
    }
    if (rows.empty()) continue;
    Tensor x({rows.size(), dim});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy(x0.ptr() + rows[r] * dim, x0.ptr() + (rows[r] + 1) * dim,
                x.ptr() + r * dim);
    }
    std::vector<bool> dead(rows.size(), false);
    for (std::size_t t = 1; t < grid.count; ++t) {
      for (std::size_t s = 0; s < opts.substeps; ++s) {
        Tensor next = rk4_rows(model, static_cast<std::size_t>(e), x, h);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          double* row = next.ptr() + r * dim;
          bool finite = !dead[r];
          for (std::size_t j = 0; j < dim && finite; ++j) finite = std::isfinite(row[j]);
          if (!finite) {
            // Hold the last finite state.
            std::copy(x.ptr() + r * dim, x.ptr() + (r + 1) * dim, row);
            dead[r] = true;
            out[rows[r]].flagged = true;
            continue;
          }
          if (clamp) {
            for (std::size_t j = 0; j < dim; ++j) {
              if (row[j] <= opts.lv_floor) {
                row[j] = opts.lv_floor;
                out[rows[r]].flagged = true;
              }
            }
          }
        }
        x = std::move(next);
      }
      for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy(x.ptr() + r * dim, x.ptr() + (r + 1) * dim,
                  out[rows[r]].states.ptr() + t * dim);
      }
    }
  }
  return out;
}

MetricReport eval_rollout(const DecomposedModel& model, const DatasetView& view,
                          std::span<const std::size_t> envs,
                          const EvalOptions& opts) {
  const std::size_t n = view.size(), dim = model.system.state_dim();
  if (envs.size() != n) throw ArgumentError("one environment per trajectory");
  if (n == 0) throw ArgumentError("empty evaluation set");
  Tensor x0({n, dim});
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& s = view.states(i);
    if (s.cols() != dim) throw ShapeError("trajectory does not match the model's system");
    std::copy(s.ptr(), s.ptr() + dim, x0.ptr() + i * dim);
  }
  const std::vector<ModelRollout> roll = rollout_batch(model, envs, x0, view.grid(), opts);
  MetricReport rep;
  rep.n = n;
  for (std::size_t i = 0; i < n; ++i) {
    rep.per_traj_mse.push_back(mse(roll[i].states, view.states(i)));
    rep.per_traj_mape.push_back(mape(roll[i].states, view.states(i)));
    rep.n_flagged += roll[i].flagged;
  }
  rep.mse = std::accumulate(rep.per_traj_mse.begin(), rep.per_traj_mse.end(), 0.0) /
            static_cast<double>(n);
  rep.mape = std::accumulate(rep.per_traj_mape.begin(), rep.per_traj_mape.end(), 0.0) /
             static_cast<double>(n);
  return rep;
}

std::size_t infer_test_env(const DecomposedModel& model, const Tensor& prefix,
                           double dt, const LossSpec& spec,
                           const Tensor* derivatives) {
  if (prefix.rank() != 2 || prefix.rows() < 2) {
    throw ArgumentError("test-time inference needs a prefix of at least 2 points");
  }
  std::size_t best = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < model.env_count(); ++e) {
    const double l = traj_env_loss(model, e, prefix, dt, spec, derivatives);
    if (l < best_loss) {
      best_loss = l;
      best = e;
    }
  }
  return best;
}

std::vector<std::size_t> infer_test_envs(const DecomposedModel& model,
                                         const DatasetView& view,
                                         std::size_t prefix_points,
                                         const LossSpec& spec) {
  if (prefix_points < 2) {
    throw ArgumentError("test-time inference needs a prefix of at least 2 points");
  }
  std::vector<std::size_t> out(view.size());
  for (std::size_t i = 0; i < view.size(); ++i) {
    const Tensor& s = view.states(i);
    const std::size_t k = std::min(prefix_points, s.rows());
    Tensor prefix({k, s.cols()});
    std::copy(s.ptr(), s.ptr() + k * s.cols(), prefix.ptr());
    std::optional<Tensor> d;
    if (const Tensor* full = view.derivatives(i)) {
      d = Tensor({k, s.cols()});
      std::copy(full->ptr(), full->ptr() + k * s.cols(), d->ptr());
    }
    out[i] = infer_test_env(model, prefix, view.grid().dt, spec, d ? &*d : nullptr);
  }
  return out;
}

namespace {

double matched_weight(const Tensor& w, const std::vector<std::int64_t>& match) {
  double s = 0.0;
  for (std::size_t r = 0; r < match.size(); ++r) {
    if (match[r] >= 0) s += w.at(r, static_cast<std::size_t>(match[r]));
  }
  return s;
}

}  // namespace

std::pair<std::vector<std::int64_t>, double> hungarian_max(const Tensor& weights) {
  const std::size_t rows = weights.rows(), cols = weights.cols();
  if (weights.rank() != 2) throw ShapeError("hungarian_max needs a matrix");
  const std::size_t n = std::max(rows, cols);
  if (n == 0) return {{}, 0.0};
  double top = 0.0;
  for (double v : weights.data()) top = std::max(top, v);
  auto cost = [&](std::size_t i, std::size_t j) {
    return (i < rows && j < cols) ? top - weights.at(i, j) : top;
  };
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      std::size_t j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::int64_t> match(rows, -1);
  for (std::size_t j = 1; j <= n; ++j) {
    if (p[j] != 0 && p[j] - 1 < rows && j - 1 < cols) {
      match[p[j] - 1] = static_cast<std::int64_t>(j - 1);
    }
  }
  return {match, matched_weight(weights, match)};
}

std::pair<std::vector<std::int64_t>, double> exhaustive_max(const Tensor& weights) {
  const std::size_t rows = weights.rows(), cols = weights.cols();
  const std::size_t n = std::max(rows, cols);
  if (n > 9) throw ArgumentError("exhaustive matching is limited to 9 labels");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::int64_t> best(rows, -1);
  double best_w = -std::numeric_limits<double>::infinity();
  do {
    std::vector<std::int64_t> match(rows, -1);
    for (std::size_t r = 0; r < rows; ++r) {
      if (perm[r] < cols) match[r] = static_cast<std::int64_t>(perm[r]);
    }
    const double w = matched_weight(weights, match);
    if (w > best_w) {
      best_w = w;
      best = match;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {best, best_w};
}

MatchResult match_accuracy(std::span<const std::size_t> assigned,
                           std::span<const std::size_t> truth) {
  if (assigned.size() != truth.size()) {
    throw ArgumentError("assigned and true labels differ in length");
  }
  MatchResult res;
  if (assigned.empty()) {
    res.accuracy = 1.0;
    return res;
  }
  const std::size_t t = *std::max_element(truth.begin(), truth.end()) + 1;
  const std::size_t a = *std::max_element(assigned.begin(), assigned.end()) + 1;
  res.confusion = Tensor({t, a});
  for (std::size_t i = 0; i < truth.size(); ++i) res.confusion.at(truth[i], assigned[i]) += 1.0;
  const auto [match, weight] = hungarian_max(res.confusion);
  res.mapping.assign(a, -1);
  for (std::size_t r = 0; r < match.size(); ++r) {
    if (match[r] >= 0) res.mapping[static_cast<std::size_t>(match[r])] = static_cast<std::int64_t>(r);
  }
  res.accuracy = weight / static_cast<double>(truth.size());
  return res;
}

MatchResult match_accuracy(std::span<const std::size_t> assigned,
                           const DatasetView& view) {
  const auto labels = view.true_labels();
  std::vector<std::size_t> truth(labels.begin(), labels.end());
  return match_accuracy(assigned, truth);
}

std::size_t label_count(std::span<const std::size_t> labels) {
  return std::set<std::size_t>(labels.begin(), labels.end()).size();
}

namespace {
std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FileError("cannot open " + path.string() + " for writing");
  os << std::setprecision(10);
  return os;
}
}  // namespace

void write_metrics_csv(const std::vector<std::pair<RunInfo, MetricReport>>& rows,
                       const std::filesystem::path& path) {
  std::ofstream os = open_out(path);
  os << "run_id,seed,system,model_law,assignment_strategy,split,mse,mape,n_flagged_rollouts\n";
  for (const auto& [info, m] : rows) {
    os << info.run_id << ',' << info.seed << ',' << info.system << ','
       << info.model_law << ',' << info.assignment_strategy << ',' << m.split
       << ',' << m.mse << ',' << m.mape << ',' << m.n_flagged << '\n';
  }
}

void write_sweep_csv(const std::vector<SweepRow>& rows,
                     const std::filesystem::path& path) {
  std::ofstream os = open_out(path);
  os << "M,seed,test_mse,matched_accuracy,label_count\n";
  for (const SweepRow& r : rows) {
    os << r.env_count << ',' << r.seed << ',' << r.test_mse << ',' << r.accuracy
       << ',' << r.label_count << '\n';
  }
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  if (values.empty()) return r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) /
           static_cast<double>(values.size());
  if (values.size() > 1) {
    double s = 0.0;
    for (double v : values) s += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(s / static_cast<double>(values.size() - 1));
  }
  return r;
}

}  // namespace dynainfer
