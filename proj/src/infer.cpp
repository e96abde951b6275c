#include "dynainfer/infer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <utility>

#include "dynainfer/errors.hpp"

namespace dynainfer {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Inputs, targets and per-row weight of one trajectory's loss.
struct TrajRows {
  Tensor inputs;
  Tensor targets;
  double weight = 0.0;
};

TrajRows make_rows(const Tensor& states, double dt, const LossSpec& spec,
                   const Tensor* derivatives) {
  (void)dt;
  const std::size_t count = states.rows(), dim = states.cols();
  if (count < 2) throw ArgumentError("a trajectory needs at least 2 points");
  TrajRows r;
  if (spec.mode == LossMode::Rollout) {
    r.inputs = Tensor({count - 1, dim});
    r.targets = Tensor({count - 1, dim});
    std::copy(states.ptr(), states.ptr() + (count - 1) * dim, r.inputs.ptr());
    std::copy(states.ptr() + dim, states.ptr() + count * dim, r.targets.ptr());
    r.weight = 1.0 / static_cast<double>((count - 1) * dim);
  } else {
    r.inputs = states;
    if (spec.estimator == DerivativeEstimator::Exact) {
      if (!derivatives) {
        throw ArgumentError("exact derivative targets are not attached");
      }
      require_same_shape(*derivatives, states, "derivative targets");
      r.targets = *derivatives;
    } else {
      r.targets = central_difference(states, dt);
    }
    r.weight = 1.0 / static_cast<double>(count);
  }
  return r;
}

TrajRows make_rows(const DatasetView& view, std::size_t i, const LossSpec& spec) {
  return make_rows(view.states(i), view.grid().dt, spec, view.derivatives(i));
}

std::size_t cells_per_state(const SystemSpec& spec) {
  return spec.kind == SystemKind::GrayScott ? spec.grid_side * spec.grid_side : 1;
}

// x + s * k, written out so the tape version below performs the same
// floating-point operations.
void axpy_into(const Tensor& x, double s, const Tensor& k, Tensor& out) {
  out = x;
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += s * k[j];
}

Tensor predict(const DecomposedModel& model, std::size_t env,
               const Tensor& inputs, double dt, const LossSpec& spec) {
  if (spec.mode == LossMode::Derivative) return model_vf(model, env, inputs);
  const double h = dt / static_cast<double>(spec.substeps);
  Tensor x = inputs, tmp;
  for (std::size_t s = 0; s < spec.substeps; ++s) {
    const Tensor k1 = model_vf(model, env, x);
    axpy_into(x, 0.5 * h, k1, tmp);
    const Tensor k2 = model_vf(model, env, tmp);
    axpy_into(x, 0.5 * h, k2, tmp);
    const Tensor k3 = model_vf(model, env, tmp);
    axpy_into(x, h, k3, tmp);
    const Tensor k4 = model_vf(model, env, tmp);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += (h / 6.0) * k1[j];
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += (h / 3.0) * k2[j];
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += (h / 3.0) * k3[j];
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += (h / 6.0) * k4[j];
  }
  return x;
}

ad::Var predict(const DecomposedModel& model, const EnvParamVars& params,
                ad::Var inputs, double dt, const LossSpec& spec) {
  if (spec.mode == LossMode::Derivative) return model_vf(model, params, inputs);
  const double h = dt / static_cast<double>(spec.substeps);
  ad::Var x = inputs;
  for (std::size_t s = 0; s < spec.substeps; ++s) {
    ad::Var k1 = model_vf(model, params, x);
    ad::Var k2 = model_vf(model, params, ad::axpy(x, 0.5 * h, k1));
    ad::Var k3 = model_vf(model, params, ad::axpy(x, 0.5 * h, k2));
    ad::Var k4 = model_vf(model, params, ad::axpy(x, h, k3));
    x = ad::axpy(x, h / 6.0, k1);
    x = ad::axpy(x, h / 3.0, k2);
    x = ad::axpy(x, h / 3.0, k3);
    x = ad::axpy(x, h / 6.0, k4);
  }
  return x;
}

// Weighted squared error of rows [begin, end) of pred against targets.
double rows_loss(const Tensor& pred, const Tensor& targets, std::size_t begin,
                 std::size_t end, double weight) {
  const std::size_t cols = pred.cols();
  double s = 0.0;
  for (std::size_t r = begin; r < end; ++r) {
    double row = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = pred[r * cols + c] - targets[r * cols + c];
      row += d * d;
    }
    s += weight * row;
  }
  return std::isfinite(s) ? s : kInf;
}

Tensor stack_rows(const std::vector<const Tensor*>& parts) {
  std::size_t rows = 0;
  const std::size_t cols = parts.front()->cols();
  for (const Tensor* p : parts) rows += p->rows();
  Tensor out({rows, cols});
  double* dst = out.ptr();
  for (const Tensor* p : parts) dst = std::copy(p->ptr(), p->ptr() + p->size(), dst);
  return out;
}

// Consecutive groups of items whose feature-row total stays within budget.
std::vector<std::vector<std::size_t>> chunk_items(
    const std::vector<std::size_t>& items, const std::vector<TrajRows>& rows,
    std::size_t cells, std::size_t budget) {
  std::vector<std::vector<std::size_t>> chunks;
  std::size_t used = 0;
  for (std::size_t i : items) {
    const std::size_t n = rows[i].inputs.rows() * cells;
    if (chunks.empty() || (used + n > budget && !chunks.back().empty())) {
      chunks.emplace_back();
      used = 0;
    }
    chunks.back().push_back(i);
    used += n;
  }
  return chunks;
}

// Losses of `members` under block `env`, batched in chunks.
void env_column(const DecomposedModel& model, std::size_t env,
                const std::vector<TrajRows>& rows,
                const std::vector<std::size_t>& members, double dt,
                const LossSpec& spec, std::size_t budget,
                std::vector<double>& out) {
  const std::size_t cells = cells_per_state(model.system);
  for (const auto& chunk : chunk_items(members, rows, cells, budget)) {
    std::vector<const Tensor*> in, tg;
    for (std::size_t i : chunk) {
      in.push_back(&rows[i].inputs);
      tg.push_back(&rows[i].targets);
    }
    const Tensor inputs = stack_rows(in), targets = stack_rows(tg);
    const Tensor pred = predict(model, env, inputs, dt, spec);
    std::size_t begin = 0;
    for (std::size_t i : chunk) {
      const std::size_t end = begin + rows[i].inputs.rows();
      out[i] = rows_loss(pred, targets, begin, end, rows[i].weight);
      begin = end;
    }
  }
}

std::vector<TrajRows> all_rows(const DatasetView& view, const LossSpec& spec,
                               std::span<const std::size_t> labels = {}) {
  std::vector<TrajRows> rows(view.size());
  for (std::size_t i = 0; i < view.size(); ++i) {
    if (!labels.empty() && labels[i] == kUnassigned) continue;
    rows[i] = make_rows(view, i, spec);
  }
  return rows;
}

double total_omega(const DecomposedModel& model, const Tensor& probe) {
  if (model.lambda == 0.0) return 0.0;
  double s = 0.0;
  for (std::size_t e = 0; e < model.env_count(); ++e) {
    s += omega(model, e, probe);
  }
  return model.lambda * s;
}

Tensor probe_for(const DatasetView& view, std::span<const std::size_t> labels) {
  std::vector<const Tensor*> parts;
  for (std::size_t i = 0; i < view.size(); ++i) {
    if (labels.empty() || labels[i] != kUnassigned) parts.push_back(&view.states(i));
  }
  if (parts.empty()) throw ArgumentError("no trajectories to probe");
  return stack_rows(parts);
}

void require_labels(const DatasetView& view, std::span<const std::size_t> labels,
                    std::size_t env_count) {
  if (labels.size() != view.size()) {
    throw ArgumentError("expected " + std::to_string(view.size()) +
                        " labels, got " + std::to_string(labels.size()));
  }
  for (std::size_t l : labels) {
    if (l != kUnassigned && l >= env_count) {
      throw IndexError("label " + std::to_string(l) + " out of range for M = " +
                       std::to_string(env_count));
    }
  }
}

template <std::size_t N, class E>
E parse_named(std::string_view name,
              const std::array<std::pair<E, std::string_view>, N>& table,
              const char* what) {
  std::string valid;
  for (const auto& [e, n] : table) {
    if (n == name) return e;
    valid += (valid.empty() ? "" : ", ") + std::string(n);
  }
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(name) +
                    "' (valid: " + valid + ")");
}

template <std::size_t N, class E>
std::string_view name_of(E e, const std::array<std::pair<E, std::string_view>, N>& table) {
  for (const auto& [k, n] : table) {
    if (k == e) return n;
  }
  return "?";
}

constexpr std::array<std::pair<LossMode, std::string_view>, 2> kModes = {{
    {LossMode::Rollout, "rollout"},
    {LossMode::Derivative, "derivative"},
}};
constexpr std::array<std::pair<InitStrategy, std::string_view>, 2> kInits = {{
    {InitStrategy::Random, "random"},
    {InitStrategy::Affinity, "affinity"},
}};
constexpr std::array<std::pair<BaselineStrategy, std::string_view>, 4> kBaselines = {{
    {BaselineStrategy::AllInOne, "all-in-one"},
    {BaselineStrategy::OnePerEnv, "one-per-env"},
    {BaselineStrategy::Random, "random"},
    {BaselineStrategy::Oracle, "oracle"},
}};

}  // namespace

std::string_view loss_mode_name(LossMode mode) { return name_of(mode, kModes); }
LossMode parse_loss_mode(std::string_view name) {
  return parse_named(name, kModes, "loss mode");
}
std::string_view init_name(InitStrategy s) { return name_of(s, kInits); }
InitStrategy parse_init(std::string_view name) {
  return parse_named(name, kInits, "init strategy");
}
std::string_view baseline_name(BaselineStrategy s) { return name_of(s, kBaselines); }
BaselineStrategy parse_baseline(std::string_view name) {
  return parse_named(name, kBaselines, "assignment strategy");
}

LossSpec LossSpec::defaults(const SystemSpec& spec) {
  LossSpec s;
  s.substeps = spec.kind == SystemKind::GrayScott ? 10 : 5;
  return s;
}

void validate_loss_spec(const LossSpec& spec) {
  if (spec.substeps < 1) throw ArgumentError("substeps must be >= 1");
}

double traj_env_loss(const DecomposedModel& model, std::size_t env,
                     const Tensor& states, double dt, const LossSpec& spec,
                     const Tensor* derivatives) {
  validate_loss_spec(spec);
  if (env >= model.env_count()) throw IndexError("environment out of range");
  if (states.rank() != 2 || states.cols() != model.system.state_dim()) {
    throw ShapeError("trajectory " + shape_string(states.shape()) +
                     " does not match the model's system");
  }
  const TrajRows r = make_rows(states, dt, spec, derivatives);
  const Tensor pred = predict(model, env, r.inputs, dt, spec);
  return rows_loss(pred, r.targets, 0, pred.rows(), r.weight);
}

double traj_env_loss(const DecomposedModel& model, std::size_t env,
                     const DatasetView& view, std::size_t i,
                     const LossSpec& spec) {
  return traj_env_loss(model, env, view.states(i), view.grid().dt, spec,
                       view.derivatives(i));
}

Tensor loss_matrix(const DecomposedModel& model, const DatasetView& view,
                   const LossSpec& spec) {
  validate_loss_spec(spec);
  const std::size_t n = view.size(), m = model.env_count();
  const std::vector<TrajRows> rows = all_rows(view, spec);
  std::vector<std::size_t> members(n);
  std::iota(members.begin(), members.end(), 0);
  Tensor out({n, m});
  std::vector<std::vector<double>> cols(m, std::vector<double>(n, 0.0));
  const double dt = view.grid().dt;
  const long long mm = static_cast<long long>(m);
#pragma omp parallel for schedule(dynamic, 1) if (m > 1)
  for (long long e = 0; e < mm; ++e) {
    env_column(model, static_cast<std::size_t>(e), rows, members, dt, spec,
               std::size_t{1} << 16, cols[static_cast<std::size_t>(e)]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = 0; e < m; ++e) out.at(i, e) = cols[e][i];
  }
  return out;
}

namespace ref {
Tensor loss_matrix(const DecomposedModel& model, const DatasetView& view,
                   const LossSpec& spec) {
  Tensor out({view.size(), model.env_count()});
  for (std::size_t i = 0; i < view.size(); ++i) {
    for (std::size_t e = 0; e < model.env_count(); ++e) {
      out.at(i, e) = traj_env_loss(model, e, view, i, spec);
    }
  }
  return out;
}
}  // namespace ref

AssignmentState AssignmentState::initial(Labels labels) {
  AssignmentState s;
  s.labels = std::move(labels);
  return s;
}

void AssignmentState::push(Labels next) {
  history.push_back(next);
  labels = std::move(next);
  ++round;
}

Labels argmin_labels(const Tensor& losses, std::span<const std::size_t> prev) {
  const std::size_t n = losses.rows(), m = losses.cols();
  if (!prev.empty() && prev.size() != n) {
    throw ArgumentError("previous assignment has the wrong length");
  }
  Labels out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = losses.ptr() + i * m;
    double best = kInf;
    for (std::size_t e = 0; e < m; ++e) {
      if (row[e] < best) best = row[e];
    }
    if (!(best < kInf)) {
      // Every block diverged: keep the previous label, else the first.
      out[i] = prev.empty() ? 0 : prev[i];
      continue;
    }
    const double tol = kTieTolerance * std::abs(best);
    if (!prev.empty() && prev[i] < m && row[prev[i]] <= best + tol) {
      out[i] = prev[i];
      continue;
    }
    for (std::size_t e = 0; e < m; ++e) {
      if (row[e] <= best + tol) {
        out[i] = e;
        break;
      }
    }
  }
  return out;
}

AssignmentState assign_step(const DecomposedModel& model,
                            const DatasetView& view,
                            const AssignmentState& prev, const LossSpec& spec) {
  if (!prev.labels.empty() && prev.labels.size() != view.size()) {
    throw ArgumentError("previous assignment has the wrong length");
  }
  AssignmentState next = prev;
  next.push(argmin_labels(loss_matrix(model, view, spec), prev.labels));
  return next;
}

double datafit_from_matrix(const Tensor& losses,
                           std::span<const std::size_t> labels) {
  if (labels.size() != losses.rows()) {
    throw ArgumentError("one label per loss-matrix row required");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kUnassigned) continue;
    s += losses.at(i, labels[i]);
  }
  return s;
}

Tensor probe_states(const DatasetView& view) { return probe_for(view, {}); }

Objective objective(const DecomposedModel& model, const DatasetView& view,
                    std::span<const std::size_t> labels, const LossSpec& spec) {
  require_labels(view, labels, model.env_count());
  const std::vector<TrajRows> rows = all_rows(view, spec, labels);
  std::vector<std::vector<std::size_t>> members(model.env_count());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != kUnassigned) members[labels[i]].push_back(i);
  }
  std::vector<double> loss(view.size(), 0.0);
  for (std::size_t e = 0; e < model.env_count(); ++e) {
    env_column(model, e, rows, members[e], view.grid().dt, spec,
               std::size_t{1} << 16, loss);
  }
  Objective o;
  for (double l : loss) o.datafit += l;
  if (model.lambda > 0.0) o.omega = total_omega(model, probe_for(view, labels));
  return o;
}

namespace {

// Flat [shared | phi_0 | ... | phi_{M-1}].
Tensor pack(const DecomposedModel& m) {
  const std::size_t n = m.block_size();
  Tensor p({n * (1 + m.env_count())});
  std::copy(m.shared.ptr(), m.shared.ptr() + n, p.ptr());
  for (std::size_t e = 0; e < m.env_count(); ++e) {
    std::copy(m.env_blocks[e].ptr(), m.env_blocks[e].ptr() + n,
              p.ptr() + (1 + e) * n);
  }
  return p;
}

void unpack(const Tensor& p, DecomposedModel& m) {
  const std::size_t n = m.block_size();
  std::copy(p.ptr(), p.ptr() + n, m.shared.ptr());
  for (std::size_t e = 0; e < m.env_count(); ++e) {
    std::copy(p.ptr() + (1 + e) * n, p.ptr() + (2 + e) * n, m.env_blocks[e].ptr());
  }
}

Tensor slice(const Tensor& p, std::size_t offset, std::size_t n) {
  return Tensor({n}, std::vector<double>(p.ptr() + offset, p.ptr() + offset + n));
}

void add_into(Tensor& g, std::size_t offset, const Tensor& part) {
  for (std::size_t k = 0; k < part.size(); ++k) g[offset + k] += part[k];
}

bool all_finite(const Tensor& t) { return t.all_finite(); }

class GradientEvaluator {
 public:
  GradientEvaluator(const DecomposedModel& model, const DatasetView& view,
                    std::span<const std::size_t> labels, const LossSpec& spec,
                    const OptimizeOptions& opts)
      : model_(model), spec_(spec), opts_(opts), dt_(view.grid().dt) {
    rows_ = all_rows(view, spec, labels);
    std::vector<std::vector<std::size_t>> members(model.env_count());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != kUnassigned) members[labels[i]].push_back(i);
    }
    const std::size_t cells = cells_per_state(model.system);
    for (std::size_t e = 0; e < model.env_count(); ++e) {
      for (auto& c : chunk_items(members[e], rows_, cells, opts.chunk_rows)) {
        Chunk ch;
        ch.env = e;
        std::vector<const Tensor*> in, tg;
        for (std::size_t i : c) {
          in.push_back(&rows_[i].inputs);
          tg.push_back(&rows_[i].targets);
          ch.weights.insert(ch.weights.end(), rows_[i].inputs.rows(), rows_[i].weight);
        }
        ch.inputs = stack_rows(in);
        ch.targets = stack_rows(tg);
        chunks_.push_back(std::move(ch));
      }
    }
    if (model.lambda > 0.0) {
      if (model.regularizer == Regularizer::FunctionNorm) {
        const Tensor probe = probe_for(view, labels);
        const std::size_t per = std::max<std::size_t>(1, opts.chunk_rows / cells);
        probe_count_ = probe.rows();
        for (std::size_t b = 0; b < probe.rows(); b += per) {
          const std::size_t e = std::min(probe.rows(), b + per);
          Tensor part({e - b, probe.cols()});
          std::copy(probe.ptr() + b * probe.cols(), probe.ptr() + e * probe.cols(),
                    part.ptr());
          probes_.push_back(std::move(part));
        }
      }
    }
  }

  // Objective value; gradient written to `grad` (same layout as pack()).
  double operator()(const Tensor& params, Tensor& grad) const {
    const std::size_t n = model_.block_size();
    grad = Tensor::zeros_like(params);
    double total = 0.0;
    for (const Chunk& ch : chunks_) {
      ad::Tape tape;
      ad::Var shared = opts_.freeze_shared ? tape.constant(slice(params, 0, n))
                                           : tape.leaf(slice(params, 0, n));
      ad::Var env = tape.leaf(slice(params, (1 + ch.env) * n, n));
      const EnvParamVars vars = bind_env(model_, shared, env);
      ad::Var pred = predict(model_, vars, tape.constant(ch.inputs), dt_, spec_);
      ad::Var loss = ad::weighted_sq_error(pred, ch.targets, ch.weights);
      total += loss.value().item();
      tape.backward(loss);
      if (!opts_.freeze_shared) add_into(grad, 0, tape.gradient(shared));
      add_into(grad, (1 + ch.env) * n, tape.gradient(env));
    }
    if (model_.lambda > 0.0) {
      for (std::size_t e = 0; e < model_.env_count(); ++e) {
        if (model_.regularizer == Regularizer::FunctionNorm) {
          for (const Tensor& probe : probes_) {
            ad::Tape tape;
            ad::Var env = tape.leaf(slice(params, (1 + e) * n, n));
            ad::Var psi = features(model_.system, model_.features, tape.constant(probe));
            ad::Var g = mlp_forward(model_.layout, env, psi);
            ad::Var o = ad::scale(ad::sq_norm(g),
                                  model_.lambda / static_cast<double>(probe_count_));
            total += o.value().item();
            tape.backward(o);
            add_into(grad, (1 + e) * n, tape.gradient(env));
          }
        } else {
          ad::Tape tape;
          ad::Var env = tape.leaf(slice(params, (1 + e) * n, n));
          ad::Var o = ad::scale(omega(model_, env, ad::Var{}), model_.lambda);
          total += o.value().item();
          tape.backward(o);
          add_into(grad, (1 + e) * n, tape.gradient(env));
        }
      }
    }
    return total;
  }

 private:
  struct Chunk {
    std::size_t env = 0;
    Tensor inputs;
    Tensor targets;
    std::vector<double> weights;
  };
  const DecomposedModel& model_;
  LossSpec spec_;
  OptimizeOptions opts_;
  double dt_;
  std::vector<TrajRows> rows_;
  std::vector<Chunk> chunks_;
  std::vector<Tensor> probes_;
  std::size_t probe_count_ = 0;
};

}  // namespace

OptimizeResult optimize_step(const DecomposedModel& model,
                             const DatasetView& view,
                             std::span<const std::size_t> labels,
                             const LossSpec& spec, const OptimizeOptions& opts,
                             OptimState* state) {
  validate_loss_spec(spec);
  require_labels(view, labels, model.env_count());
  OptimizeResult result{model, 0, false, {}};
  if (opts.epochs == 0) return result;

  if (model.law == DecompositionLaw::LinearBasis) {
    if (spec.mode != LossMode::Derivative) {
      throw ArgumentError("the linear-basis law is solved exactly and needs derivative loss mode");
    }
    result.model =
        opts.freeze_shared
            ? solve_linear_basis_frozen(model, view, labels, model.env_count(),
                                        spec.estimator)
            : solve_linear_basis(model, view, labels, spec.estimator);
    return result;
  }

  const GradientEvaluator eval(model, view, labels, spec, opts);
  Tensor params = pack(model);
  OptimState local = OptimState::for_params(params);
  OptimState& st = state ? *state : local;
  if (st.m.size() != params.size()) st = OptimState::for_params(params);
  st.config.lr = opts.lr;

  const std::size_t n = model.block_size();
  const Tensor frozen = slice(params, 0, n);
  Tensor grad, prev_params;
  OptimState prev_state;
  bool have_prev = false;
  std::size_t failures = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const double value = eval(params, grad);
    if (!std::isfinite(value) || !all_finite(grad)) {
      ++result.halvings;
      ++failures;
      if (have_prev) {
        params = prev_params;
        const double lr = st.config.lr;
        st = prev_state;
        st.config.lr = lr;
      }
      st.config.lr *= 0.5;
      result.diagnostics += "epoch " + std::to_string(epoch) +
                            ": non-finite objective, lr halved to " +
                            std::to_string(st.config.lr) + "\n";
      if (failures >= opts.max_failures) {
        result.aborted = true;
        result.diagnostics += "aborted after " + std::to_string(failures) +
                              " consecutive non-finite epochs\n";
        break;
      }
      --epoch;
      continue;
    }
    failures = 0;
    prev_params = params;
    prev_state = st;
    have_prev = true;
    optim_step(st, params, grad);
    if (opts.freeze_shared) std::copy(frozen.ptr(), frozen.ptr() + n, params.ptr());
  }
  unpack(params, result.model);
  return result;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::size_t count_changes(std::span<const std::size_t> a,
                          std::span<const std::size_t> b) {
  if (a.size() != b.size()) return b.size();
  std::size_t c = 0;
  for (std::size_t i = 0; i < a.size(); ++i) c += a[i] != b[i];
  return c;
}

std::size_t stable_from(const AssignmentState& s) {
  if (s.history.empty()) return 0;
  std::size_t r = s.history.size();
  while (r > 1 && s.history[r - 2] == s.history.back()) --r;
  return r;
}

OptimizeOptions optimize_options(const TrainHyper& h, std::size_t epochs) {
  OptimizeOptions o;
  o.epochs = epochs;
  o.lr = h.lr;
  o.chunk_rows = h.chunk_rows;
  return o;
}

}  // namespace

double scheduled_lambda(const TrainHyper& hyper, double target, std::size_t round) {
  if (!(hyper.lambda_start > 0.0)) return target;
  if (round <= 1) return hyper.lambda_start;
  if (hyper.anneal_rounds == 0 || round > hyper.anneal_rounds) return target;
  if (!(target > 0.0)) return round > hyper.anneal_rounds ? target : hyper.lambda_start;
  const double frac = static_cast<double>(round - 1) / static_cast<double>(hyper.anneal_rounds);
  return hyper.lambda_start * std::pow(target / hyper.lambda_start, frac);
}

namespace {

// Alternation (assign = true) or fixed-label training from `model`.
TrainResult run_rounds(DecomposedModel model, const DatasetView& view,
                       Labels labels, bool assign, const LossSpec& spec,
                       const TrainHyper& hyper) {
  TrainResult out;
  out.report.seed = hyper.seed;
  out.report.assignments = AssignmentState::initial(labels);
  const Tensor probe = probe_states(view);
  OptimState state;
  const double target = model.lambda;
  model.lambda = scheduled_lambda(hyper, target, 1);
  Tensor losses = loss_matrix(model, view, spec);
  double current_omega = total_omega(model, probe);
  for (std::size_t r = 1; r <= hyper.rounds; ++r) {
    const auto t0 = Clock::now();
    const double lambda = scheduled_lambda(hyper, target, r);
    if (lambda != model.lambda) {
      model.lambda = lambda;
      current_omega = total_omega(model, probe);
    }
    RoundRecord rec;
    rec.round = r;
    const Labels prev = out.report.assignments.labels;
    rec.r_before_assign = prev.empty()
                              ? kInf
                              : datafit_from_matrix(losses, prev) + current_omega;
    Labels next = assign ? argmin_labels(losses, prev) : prev;
    rec.n_reassigned = count_changes(prev, next);
    rec.r_after_assign = datafit_from_matrix(losses, next) + current_omega;
    out.report.assignments.push(next);

    OptimState* st = hyper.carry_optimizer ? &state : nullptr;
    OptimizeResult res = optimize_step(model, view, next, spec,
                                       optimize_options(hyper, hyper.epochs), st);
    model = std::move(res.model);
    rec.halvings = res.halvings;
    rec.aborted = res.aborted;
    losses = loss_matrix(model, view, spec);
    current_omega = total_omega(model, probe);
    rec.r_datafit = datafit_from_matrix(losses, next);
    rec.r_omega = current_omega;
    rec.r_total = rec.r_datafit + rec.r_omega;
    rec.elapsed_ms = ms_since(t0);
    out.report.rounds.push_back(rec);
  }
  out.report.stable_from = stable_from(out.report.assignments);
  out.model = std::move(model);
  return out;
}

// Per-trajectory blocks on a shared part, reduced to M medoid blocks.
DecomposedModel affinity_start(const DatasetView& view, const ModelOptions& mo,
                               const LossSpec& spec, const TrainHyper& hyper,
                               std::mt19937_64& rng) {
  const std::size_t n = view.size();
  ModelOptions each = mo;
  each.env_count = n;
  each.random_env_blocks = false;
  DecomposedModel model = make_model(view.spec(), each, rng);
  model.lambda = scheduled_lambda(hyper, mo.lambda, 0);
  Labels labels(n);
  std::iota(labels.begin(), labels.end(), 0);
  model = optimize_step(model, view, labels, spec,
                        optimize_options(hyper, hyper.init_epochs))
              .model;
  const Tensor losses = loss_matrix(model, view, spec);
  Tensor d({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) d.at(i, j) = losses.at(i, j) + losses.at(j, i);
  }
  const std::vector<std::size_t> medoids = k_medoids(d, std::min(mo.env_count, n));
  std::vector<std::size_t> support(medoids.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t q = 1; q < medoids.size(); ++q) {
      if (d.at(i, medoids[q]) < d.at(i, medoids[best])) best = q;
    }
    ++support[best];
  }
  std::vector<Tensor> blocks;
  for (std::size_t q = 0; q < medoids.size(); ++q) {
    if (support[q] >= hyper.init_min_support) {
      blocks.push_back(model.env_blocks[medoids[q]]);
    }
  }
  while (blocks.size() < mo.env_count) blocks.push_back(neutral_env_block(model, rng));
  model.env_blocks = std::move(blocks);
  model.lambda = mo.lambda;
  return model;
}

}  // namespace

TrainResult dynainfer_train(const DatasetView& view, const ModelOptions& mo,
                            const LossSpec& spec, const TrainHyper& hyper) {
  if (mo.env_count < 1) throw ArgumentError("M must be >= 1");
  if (hyper.rounds < 1) throw ArgumentError("rounds must be >= 1");
  if (view.size() == 0) throw ArgumentError("empty dataset");
  std::mt19937_64 rng(hyper.seed);
  if (hyper.init == InitStrategy::Affinity && mo.env_count > 1) {
    DecomposedModel start = affinity_start(view, mo, spec, hyper, rng);
    return run_rounds(std::move(start), view, {}, true, spec, hyper);
  }
  DecomposedModel start = make_model(view.spec(), mo, rng);
  return run_rounds(std::move(start), view, {}, true, spec, hyper);
}

std::vector<std::size_t> k_medoids(const Tensor& d, std::size_t k) {
  const std::size_t n = d.rows();
  if (d.rank() != 2 || d.cols() != n) throw ShapeError("k_medoids needs a square matrix");
  if (k < 1 || k > n) throw ArgumentError("k_medoids needs 1 <= k <= N");
  auto dist = [&](std::size_t i, std::size_t j) {
    const double v = d.at(i, j);
    return std::isfinite(v) ? v : std::numeric_limits<double>::max() / (4.0 * n);
  };
  std::vector<double> nearest(n, std::numeric_limits<double>::max());
  std::vector<std::size_t> medoids;
  std::vector<bool> is_medoid(n, false);
  auto cost_with = [&](const std::vector<std::size_t>& set) {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (std::size_t m : set) best = std::min(best, dist(i, m));
      c += best;
    }
    return c;
  };
  while (medoids.size() < k) {
    std::size_t pick = n;
    double best = std::numeric_limits<double>::max();
    for (std::size_t j = 0; j < n; ++j) {
      if (is_medoid[j]) continue;
      double c = 0.0;
      for (std::size_t i = 0; i < n; ++i) c += std::min(nearest[i], dist(i, j));
      if (c < best) {
        best = c;
        pick = j;
      }
    }
    medoids.push_back(pick);
    is_medoid[pick] = true;
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], dist(i, pick));
  }
  double cost = cost_with(medoids);
  for (bool improved = true; improved;) {
    improved = false;
    std::size_t best_slot = k, best_j = n;
    double best_cost = cost;
    for (std::size_t slot = 0; slot < k; ++slot) {
      for (std::size_t j = 0; j < n; ++j) {
        if (is_medoid[j]) continue;
        std::vector<std::size_t> trial = medoids;
        trial[slot] = j;
        const double c = cost_with(trial);
        if (c < best_cost) {
          best_cost = c;
          best_slot = slot;
          best_j = j;
        }
      }
    }
    if (best_slot < k) {
      is_medoid[medoids[best_slot]] = false;
      medoids[best_slot] = best_j;
      is_medoid[best_j] = true;
      cost = best_cost;
      improved = true;
    }
  }
  return medoids;
}

TrainResult dynainfer_train_from(const DecomposedModel& start,
                                 const DatasetView& view, Labels labels,
                                 const LossSpec& spec, const TrainHyper& hyper) {
  if (!labels.empty()) require_labels(view, labels, start.env_count());
  return run_rounds(start, view, std::move(labels), true, spec, hyper);
}

std::size_t baseline_env_count(BaselineStrategy strategy,
                               const DatasetView& view, std::size_t env_count) {
  switch (strategy) {
    case BaselineStrategy::AllInOne: return 1;
    case BaselineStrategy::OnePerEnv: return view.size();
    case BaselineStrategy::Random: return env_count;
    case BaselineStrategy::Oracle: {
      const auto labels = view.true_labels();
      return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
    }
  }
  return env_count;
}

AssignmentState baseline_assign(BaselineStrategy strategy,
                                const DatasetView& view, std::size_t env_count,
                                std::uint64_t seed) {
  const std::size_t n = view.size();
  Labels labels(n, 0);
  switch (strategy) {
    case BaselineStrategy::AllInOne:
      break;
    case BaselineStrategy::OnePerEnv:
      std::iota(labels.begin(), labels.end(), 0);
      break;
    case BaselineStrategy::Random: {
      if (env_count < 1) throw ArgumentError("M must be >= 1");
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<std::size_t> u(0, env_count - 1);
      for (auto& l : labels) l = u(rng);
      break;
    }
    case BaselineStrategy::Oracle: {
      const auto truth = view.true_labels();
      for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::size_t>(truth[i]);
      break;
    }
  }
  return AssignmentState::initial(std::move(labels));
}

TrainResult train_fixed(const DatasetView& view, const ModelOptions& mo,
                        const AssignmentState& labels, const LossSpec& spec,
                        const TrainHyper& hyper) {
  if (labels.labels.empty()) throw ArgumentError("fixed training needs labels");
  ModelOptions o = mo;
  o.env_count = 1 + *std::max_element(labels.labels.begin(), labels.labels.end());
  o.env_count = std::max(o.env_count, mo.env_count);
  std::mt19937_64 rng(hyper.seed);
  DecomposedModel start = make_model(view.spec(), o, rng);
  require_labels(view, labels.labels, start.env_count());
  return run_rounds(std::move(start), view, labels.labels, false, spec, hyper);
}

DecomposedModel adapt(const DecomposedModel& trained, const DatasetView& view,
                      const LossSpec& spec, std::size_t epochs, double lr,
                      std::uint64_t seed) {
  const auto truth = view.true_labels();
  if (truth.empty()) throw ArgumentError("empty adaptation dataset");
  const std::size_t k =
      static_cast<std::size_t>(*std::max_element(truth.begin(), truth.end())) + 1;
  Labels labels(truth.begin(), truth.end());
  if (trained.law == DecompositionLaw::LinearBasis) {
    return solve_linear_basis_frozen(trained, view, labels, k, spec.estimator);
  }
  DecomposedModel fresh = trained;
  std::mt19937_64 rng(seed);
  fresh.env_blocks.clear();
  for (std::size_t e = 0; e < k; ++e) {
    fresh.env_blocks.push_back(neutral_env_block(trained, rng));
  }
  OptimizeOptions o;
  o.epochs = epochs;
  o.lr = lr;
  o.freeze_shared = true;
  OptimizeResult res = optimize_step(fresh, view, labels, spec, o);
  if (res.aborted) throw NumericError("adaptation diverged:\n" + res.diagnostics);
  return std::move(res.model);
}

std::uint64_t checksum(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.ptr());
  for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {
std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FileError("cannot open " + path.string() + " for writing");
  os << std::setprecision(17);
  return os;
}
}  // namespace

void write_rounds_csv(const TrainReport& report, const std::filesystem::path& path) {
  std::ofstream os = open_csv(path);
  os << "round,R_total,R_datafit,R_omega,n_reassigned,elapsed_ms\n";
  for (const RoundRecord& r : report.rounds) {
    os << r.round << ',' << r.r_total << ',' << r.r_datafit << ',' << r.r_omega
       << ',' << r.n_reassigned << ',' << r.elapsed_ms << '\n';
  }
}

void write_assignments_csv(const TrainReport& report, const DatasetView& view,
                           const std::filesystem::path& path) {
  std::ofstream os = open_csv(path);
  os << "round,traj_id,assigned,true\n";
  for (std::size_t r = 0; r < report.assignments.history.size(); ++r) {
    const Labels& l = report.assignments.history[r];
    for (std::size_t i = 0; i < l.size(); ++i) {
      const std::int32_t t = view.label_or_hidden(i);
      os << r + 1 << ',' << view.id(i) << ',' << l[i] + 1 << ','
         << (t == kHiddenEnv ? -1 : t + 1) << '\n';
    }
  }
}

void write_loss_matrix_csv(const Tensor& losses, const DatasetView& view,
                           const std::filesystem::path& path) {
  std::ofstream os = open_csv(path);
  os << "traj_id";
  for (std::size_t e = 0; e < losses.cols(); ++e) os << ",env_" << e + 1;
  os << '\n';
  for (std::size_t i = 0; i < losses.rows(); ++i) {
    os << view.id(i);
    for (std::size_t e = 0; e < losses.cols(); ++e) os << ',' << losses.at(i, e);
    os << '\n';
  }
}

}  // namespace dynainfer
