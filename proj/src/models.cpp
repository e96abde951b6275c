#include "dynainfer/models.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "dynainfer/errors.hpp"
#include "dynainfer/kernels.hpp"
#include "linalg.hpp"

namespace dynainfer {
namespace {

constexpr std::array<char, 4> kMagic = {'D', 'Y', 'N', 'F'};

template <class E, std::size_t N>
E parse_enum(std::string_view name, const std::array<std::pair<E, std::string_view>, N>& table,
             const char* what) {
  std::string valid;
  for (const auto& [e, n] : table) {
    if (n == name) return e;
    valid += (valid.empty() ? "" : ", ") + std::string(n);
  }
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(name) +
                    "' (valid: " + valid + ")");
}

constexpr std::array<std::pair<DecompositionLaw, std::string_view>, 3> kLaws = {{
    {DecompositionLaw::FunctionalSum, "functional-sum"},
    {DecompositionLaw::ParamOffset, "param-offset"},
    {DecompositionLaw::LinearBasis, "linear-basis"},
}};
constexpr std::array<std::pair<Regularizer, std::string_view>, 4> kRegs = {{
    {Regularizer::FunctionNorm, "function-norm"},
    {Regularizer::L2, "l2"},
    {Regularizer::L1, "l1"},
    {Regularizer::Frobenius, "frobenius"},
}};
constexpr std::array<std::pair<FeatureKind, std::string_view>, 3> kFeatures = {{
    {FeatureKind::RawState, "raw-state"},
    {FeatureKind::LvBasis, "lv-basis"},
    {FeatureKind::GsStencil, "gs-stencil"},
}};

Tensor as_batch(const Tensor& states, std::size_t dim) {
  if (states.cols() != dim || states.rank() == 0 || states.rank() > 2) {
    throw ShapeError("state " + shape_string(states.shape()) +
                     " does not match the model layout of " +
                     std::to_string(dim) + " values");
  }
  if (states.rank() == 1) return states.reshaped({1, dim});
  return states;
}

bool is_grid_system(const SystemSpec& spec) {
  return spec.kind == SystemKind::GrayScott;
}

// [rows, out] feature-row outputs back to the state layout [B, D].
Tensor rows_to_states(const SystemSpec& spec, const Tensor& rows,
                      std::size_t batch) {
  if (!is_grid_system(spec)) return rows.reshaped({batch, spec.state_dim()});
  const std::size_t cells = spec.grid_side * spec.grid_side;
  Tensor out({batch, 2 * cells});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = rows.ptr() + b * cells * 2;
    double* m = out.ptr() + b * 2 * cells;
    for (std::size_t j = 0; j < cells; ++j) {
      m[j] = src[2 * j];
      m[cells + j] = src[2 * j + 1];
    }
  }
  return out;
}

// [B, D] state-layout values to [rows, out] feature-row layout.
Tensor states_to_rows(const SystemSpec& spec, const Tensor& states) {
  if (!is_grid_system(spec)) return states;
  const std::size_t cells = spec.grid_side * spec.grid_side;
  const std::size_t batch = states.rows();
  Tensor out({batch * cells, 2});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* m = states.ptr() + b * 2 * cells;
    double* dst = out.ptr() + b * cells * 2;
    for (std::size_t j = 0; j < cells; ++j) {
      dst[2 * j] = m[j];
      dst[2 * j + 1] = m[cells + j];
    }
  }
  return out;
}

std::size_t linear_param_count(const DecomposedModel& m) {
  return m.layout.in_dim() * m.layout.out_dim();
}

Tensor forward_rows(const DecomposedModel& model, std::size_t env,
                    const Tensor& psi) {
  const Tensor& theta = model.shared;
  const Tensor& phi = model.env_blocks[env];
  switch (model.law) {
    case DecompositionLaw::FunctionalSum: {
      Tensor y = mlp_forward(model.layout, theta.data(), psi);
      const Tensor g = mlp_forward(model.layout, phi.data(), psi);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += g[i];
      return y;
    }
    case DecompositionLaw::ParamOffset: {
      Tensor p = theta;
      for (std::size_t i = 0; i < p.size(); ++i) p[i] += phi[i];
      return mlp_forward(model.layout, p.data(), psi);
    }
    case DecompositionLaw::LinearBasis: {
      Tensor w = theta;
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += phi[i];
      const std::size_t in = model.layout.in_dim(), out = model.layout.out_dim();
      Tensor y({psi.rows(), out});
      kernels::linear_forward(psi.ptr(), psi.rows(), in, w.ptr(), nullptr, out,
                              y.ptr());
      return y;
    }
  }
  return {};
}

}  // namespace

std::string_view law_name(DecompositionLaw law) {
  for (const auto& [e, n] : kLaws) {
    if (e == law) return n;
  }
  return "?";
}
DecompositionLaw parse_law(std::string_view name) {
  return parse_enum(name, kLaws, "model law");
}
std::string_view regularizer_name(Regularizer r) {
  for (const auto& [e, n] : kRegs) {
    if (e == r) return n;
  }
  return "?";
}
Regularizer parse_regularizer(std::string_view name) {
  return parse_enum(name, kRegs, "regularizer");
}
std::string_view feature_name(FeatureKind f) {
  for (const auto& [e, n] : kFeatures) {
    if (e == f) return n;
  }
  return "?";
}
FeatureKind parse_feature(std::string_view name) {
  return parse_enum(name, kFeatures, "feature map");
}

std::size_t feature_dim(const SystemSpec& spec, FeatureKind kind) {
  switch (spec.kind) {
    case SystemKind::LotkaVolterra:
      if (kind == FeatureKind::RawState) return 2;
      if (kind == FeatureKind::LvBasis) return 3;
      break;
    case SystemKind::GrayScott:
      if (kind == FeatureKind::RawState) return 2;
      if (kind == FeatureKind::GsStencil) return 4;
      break;
    case SystemKind::Linear:
      if (kind == FeatureKind::RawState) return spec.linear_dim;
      break;
  }
  throw ArgumentError("feature map " + std::string(feature_name(kind)) +
                      " does not apply to system " + spec.name());
}

std::size_t row_output_dim(const SystemSpec& spec, FeatureKind kind) {
  (void)feature_dim(spec, kind);
  return is_grid_system(spec) ? 2 : spec.state_dim();
}

Tensor features(const SystemSpec& spec, FeatureKind kind, const Tensor& states) {
  ad::Tape tape;
  return features(spec, kind, tape.constant(as_batch(states, spec.state_dim())))
      .value();
}

ad::Var features(const SystemSpec& spec, FeatureKind kind, ad::Var states) {
  (void)feature_dim(spec, kind);
  switch (kind) {
    case FeatureKind::RawState:
      if (is_grid_system(spec)) return ad::gs_cell_states(states, spec.grid_side);
      return states;
    case FeatureKind::LvBasis:
      return ad::lv_basis(states);
    case FeatureKind::GsStencil:
      return ad::gs_stencil_features(states, spec.grid_side, spec.ds);
  }
  return states;
}

void validate_model(const DecomposedModel& m) {
  if (m.env_blocks.empty()) throw ArgumentError("a model needs M >= 1");
  if (!(m.lambda >= 0.0)) throw ArgumentError("lambda must be >= 0");
  const bool ok =
      (m.law == DecompositionLaw::FunctionalSum &&
       m.regularizer == Regularizer::FunctionNorm) ||
      (m.law == DecompositionLaw::ParamOffset &&
       (m.regularizer == Regularizer::L2 || m.regularizer == Regularizer::L1)) ||
      (m.law == DecompositionLaw::LinearBasis &&
       m.regularizer == Regularizer::Frobenius);
  if (!ok) {
    throw ArgumentError("regularizer " +
                        std::string(regularizer_name(m.regularizer)) +
                        " does not apply to law " +
                        std::string(law_name(m.law)));
  }
  for (const Tensor& b : m.env_blocks) {
    if (!b.same_shape(m.shared)) {
      throw ShapeError("environment blocks must share the shared block's shape");
    }
  }
  if (m.layout.in_dim() != feature_dim(m.system, m.features) ||
      m.layout.out_dim() != row_output_dim(m.system, m.features)) {
    throw ShapeError("model layout does not match its feature map");
  }
}

Tensor neutral_env_block(const DecomposedModel& model, std::mt19937_64& rng) {
  if (model.law != DecompositionLaw::FunctionalSum) {
    return Tensor::zeros_like(model.shared);
  }
  Tensor b = mlp_init(model.layout, rng);
  const std::size_t last = model.layout.layer_count() - 1;
  std::fill(b.ptr() + model.layout.weight_offset(last), b.ptr() + b.size(), 0.0);
  return b;
}

DecomposedModel make_model(const SystemSpec& spec, const ModelOptions& o,
                           std::mt19937_64& rng) {
  if (o.env_count < 1) throw ArgumentError("a model needs M >= 1");
  DecomposedModel m;
  m.system = spec;
  m.law = o.law;
  m.features = o.features;
  m.regularizer = o.regularizer;
  m.lambda = o.lambda;
  const std::size_t in = feature_dim(spec, o.features);
  const std::size_t out = row_output_dim(spec, o.features);
  if (o.law == DecompositionLaw::LinearBasis) {
    m.layout = MlpLayout({in, out});
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    m.shared = Tensor({in * out});
    for (double& v : m.shared.data()) v = u(rng);
    for (std::size_t e = 0; e < o.env_count; ++e) {
      Tensor b({in * out});
      if (o.random_env_blocks) {
        for (double& v : b.data()) v = u(rng);
      }
      m.env_blocks.push_back(std::move(b));
    }
  } else {
    std::vector<std::size_t> sizes{in};
    sizes.insert(sizes.end(), o.hidden.begin(), o.hidden.end());
    sizes.push_back(out);
    m.layout = MlpLayout(std::move(sizes));
    m.shared = mlp_init(m.layout, rng);
    for (std::size_t e = 0; e < o.env_count; ++e) {
      if (o.random_env_blocks) {
        m.env_blocks.push_back(mlp_init(m.layout, rng));
      } else {
        m.env_blocks.push_back(neutral_env_block(m, rng));
      }
    }
  }
  validate_model(m);
  return m;
}

DecomposedModel linear_basis_model(const SystemSpec& spec, FeatureKind features,
                                   const Tensor& shared_coeffs,
                                   const std::vector<Tensor>& env_coeffs,
                                   double lambda) {
  const std::size_t in = feature_dim(spec, features);
  const std::size_t out = row_output_dim(spec, features);
  auto to_block = [&](const Tensor& c) {
    if (c.rank() != 2 || c.dim(0) != out || c.dim(1) != in) {
      throw ShapeError("coefficient matrix must be [" + std::to_string(out) +
                       ", " + std::to_string(in) + "], got " +
                       shape_string(c.shape()));
    }
    Tensor b({in * out});
    for (std::size_t o = 0; o < out; ++o) {
      for (std::size_t k = 0; k < in; ++k) b[k * out + o] = c.at(o, k);
    }
    return b;
  };
  DecomposedModel m;
  m.system = spec;
  m.law = DecompositionLaw::LinearBasis;
  m.features = features;
  m.regularizer = Regularizer::Frobenius;
  m.lambda = lambda;
  m.layout = MlpLayout({in, out});
  m.shared = to_block(shared_coeffs);
  for (const Tensor& c : env_coeffs) m.env_blocks.push_back(to_block(c));
  validate_model(m);
  return m;
}

Tensor linear_coefficients(const DecomposedModel& model, std::size_t env) {
  if (model.law != DecompositionLaw::LinearBasis) {
    throw ArgumentError("linear_coefficients needs a linear-basis model");
  }
  if (env >= model.env_count()) throw IndexError("environment out of range");
  const std::size_t in = model.layout.in_dim(), out = model.layout.out_dim();
  Tensor c({out, in});
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t k = 0; k < in; ++k) {
      c.at(o, k) = model.shared[k * out + o] + model.env_blocks[env][k * out + o];
    }
  }
  return c;
}

Tensor model_vf(const DecomposedModel& model, std::size_t env,
                const Tensor& states) {
  if (env >= model.env_count()) {
    throw IndexError("environment " + std::to_string(env) +
                     " out of range for M = " +
                     std::to_string(model.env_count()));
  }
  const Tensor batch = as_batch(states, model.system.state_dim());
  const Tensor psi = features(model.system, model.features, batch);
  Tensor out = rows_to_states(model.system, forward_rows(model, env, psi),
                              batch.rows());
  if (states.rank() == 1) return out.reshaped({model.system.state_dim()});
  return out;
}

EnvParamVars bind_env(const DecomposedModel& model, ad::Var shared,
                      ad::Var env_block) {
  if (model.law == DecompositionLaw::FunctionalSum) {
    return EnvParamVars{shared, env_block};
  }
  return EnvParamVars{ad::add(shared, env_block), {}};
}

ad::Var model_vf(const DecomposedModel& model, const EnvParamVars& params,
                 ad::Var states) {
  const std::size_t batch = states.value().rows();
  if (states.value().cols() != model.system.state_dim()) {
    throw ShapeError("model_vf: state batch does not match the model layout");
  }
  ad::Var psi = features(model.system, model.features, states);
  ad::Var rows;
  switch (model.law) {
    case DecompositionLaw::FunctionalSum:
      rows = ad::add(mlp_forward(model.layout, params.first, psi),
                     mlp_forward(model.layout, params.second, psi));
      break;
    case DecompositionLaw::ParamOffset:
      rows = mlp_forward(model.layout, params.first, psi);
      break;
    case DecompositionLaw::LinearBasis:
      rows = ad::linear(psi, params.first, 0, ad::kNoBias,
                        model.layout.in_dim(), model.layout.out_dim());
      break;
  }
  if (is_grid_system(model.system)) {
    return ad::gs_cells_to_fields(rows, model.system.grid_side);
  }
  (void)batch;
  return rows;
}

double omega(const DecomposedModel& model, std::size_t env,
             const Tensor& probe_states) {
  if (env >= model.env_count()) throw IndexError("environment out of range");
  ad::Tape tape;
  ad::Var probe = tape.constant(model.regularizer == Regularizer::FunctionNorm
                                    ? as_batch(probe_states, model.system.state_dim())
                                    : probe_states);
  return omega(model, tape.constant(model.env_blocks[env]), probe)
      .value()
      .item();
}

ad::Var omega(const DecomposedModel& model, ad::Var env_block,
              ad::Var probe_states) {
  switch (model.regularizer) {
    case Regularizer::FunctionNorm: {
      const std::size_t rows = probe_states.value().rows();
      if (probe_states.value().size() == 0 ||
          probe_states.value().cols() != model.system.state_dim()) {
        throw ArgumentError("function-norm regularizer needs a nonempty probe batch");
      }
      ad::Var psi = features(model.system, model.features, probe_states);
      ad::Var g = mlp_forward(model.layout, env_block, psi);
      return ad::scale(ad::sq_norm(g), 1.0 / static_cast<double>(rows));
    }
    case Regularizer::L2:
    case Regularizer::Frobenius:
      return ad::sq_norm(env_block);
    case Regularizer::L1:
      return ad::l1_norm(env_block);
  }
  return ad::sq_norm(env_block);
}

Tensor derivative_targets(const DatasetView& view, std::size_t i,
                          DerivativeEstimator estimator) {
  if (estimator == DerivativeEstimator::Exact) {
    const Tensor* d = view.derivatives(i);
    if (!d) {
      throw ArgumentError("trajectory " + std::to_string(i) +
                          " carries no exact derivatives");
    }
    return *d;
  }
  return central_difference(view.states(i), view.grid().dt);
}

namespace {

struct NormalEquations {
  std::vector<std::vector<double>> gram;  // per env, p x p
  std::vector<std::vector<double>> rhs;   // per env, p x out
};

NormalEquations accumulate_normal_equations(const DecomposedModel& like,
                                            const DatasetView& view,
                                            std::span<const std::size_t> labels,
                                            std::size_t env_count,
                                            DerivativeEstimator estimator) {
  if (labels.size() != view.size()) {
    throw ArgumentError("one label per trajectory required");
  }
  const std::size_t p = like.layout.in_dim(), out = like.layout.out_dim();
  NormalEquations ne{std::vector<std::vector<double>>(env_count, std::vector<double>(p * p, 0.0)),
                     std::vector<std::vector<double>>(env_count, std::vector<double>(p * out, 0.0))};
  for (std::size_t i = 0; i < view.size(); ++i) {
    const std::size_t e = labels[i];
    if (e == kUnassigned) continue;
    if (e >= env_count) throw IndexError("label out of range");
    const Tensor psi = features(like.system, like.features, view.states(i));
    const Tensor y = states_to_rows(like.system, derivative_targets(view, i, estimator));
    const double w = 1.0 / static_cast<double>(view.states(i).rows());
    auto& g = ne.gram[e];
    auto& b = ne.rhs[e];
    for (std::size_t r = 0; r < psi.rows(); ++r) {
      const double* f = psi.ptr() + r * p;
      const double* t = y.ptr() + r * out;
      for (std::size_t a = 0; a < p; ++a) {
        for (std::size_t c = 0; c < p; ++c) g[a * p + c] += w * f[a] * f[c];
        for (std::size_t c = 0; c < out; ++c) b[a * out + c] += w * f[a] * t[c];
      }
    }
  }
  return ne;
}

std::vector<double> with_ridge(std::vector<double> g, std::size_t p,
                               double lambda) {
  for (std::size_t a = 0; a < p; ++a) g[a * p + a] += lambda;
  return g;
}

std::vector<double> identity(std::size_t p) {
  std::vector<double> i(p * p, 0.0);
  for (std::size_t a = 0; a < p; ++a) i[a * p + a] = 1.0;
  return i;
}

}  // namespace

DecomposedModel solve_linear_basis(const DecomposedModel& like,
                                   const DatasetView& view,
                                   std::span<const std::size_t> labels,
                                   DerivativeEstimator estimator) {
  if (like.law != DecompositionLaw::LinearBasis) {
    throw ArgumentError("solve_linear_basis needs a linear-basis model");
  }
  const std::size_t p = like.layout.in_dim(), out = like.layout.out_dim();
  const std::size_t env_count = like.env_count();
  const double lambda = like.lambda;
  const NormalEquations ne =
      accumulate_normal_equations(like, view, labels, env_count, estimator);

  // Stationarity gives Phi_e = (G_e + lambda I)^-1 (B_e - G_e Theta) and
  // sum_e Phi_e = 0, which leaves a p x p system for Theta.
  std::vector<std::vector<double>> ridge_inv(env_count);
  std::vector<double> lhs(p * p, 0.0), rhs(p * out, 0.0);
  for (std::size_t e = 0; e < env_count; ++e) {
    const bool empty = std::all_of(ne.gram[e].begin(), ne.gram[e].end(),
                                   [](double v) { return v == 0.0; });
    if (empty && lambda > 0.0) continue;  // Phi_e = 0
    auto inv = linalg::solve(with_ridge(ne.gram[e], p, lambda), identity(p), p, p);
    if (!inv) {
      throw RankDeficiencyError(
          "singular normal system for environment " + std::to_string(e) +
              (lambda == 0.0 ? " (lambda = 0)" : ""),
          e);
    }
    const auto a_g = linalg::matmul(*inv, ne.gram[e], p, p, p);
    const auto a_b = linalg::matmul(*inv, ne.rhs[e], p, p, out);
    for (std::size_t k = 0; k < p * p; ++k) lhs[k] += a_g[k];
    for (std::size_t k = 0; k < p * out; ++k) rhs[k] += a_b[k];
    ridge_inv[e] = std::move(*inv);
  }
  auto theta = linalg::solve(lhs, rhs, p, out);
  if (!theta) {
    throw RankDeficiencyError("singular normal system for the shared block", 0);
  }
  DecomposedModel m = like;
  m.shared = Tensor({p * out}, *theta);
  for (std::size_t e = 0; e < env_count; ++e) {
    Tensor phi({p * out});
    if (!ridge_inv[e].empty()) {
      const auto g_theta = linalg::matmul(ne.gram[e], *theta, p, p, out);
      std::vector<double> resid(p * out);
      for (std::size_t k = 0; k < p * out; ++k) resid[k] = ne.rhs[e][k] - g_theta[k];
      phi = Tensor({p * out}, linalg::matmul(ridge_inv[e], resid, p, p, out));
    }
    m.env_blocks[e] = std::move(phi);
  }
  return m;
}

DecomposedModel solve_linear_basis_frozen(const DecomposedModel& trained,
                                          const DatasetView& view,
                                          std::span<const std::size_t> labels,
                                          std::size_t env_count,
                                          DerivativeEstimator estimator) {
  if (trained.law != DecompositionLaw::LinearBasis) {
    throw ArgumentError("solve_linear_basis_frozen needs a linear-basis model");
  }
  if (env_count < 1) throw ArgumentError("need at least one new environment");
  const std::size_t p = trained.layout.in_dim(), out = trained.layout.out_dim();
  DecomposedModel m = trained;
  m.env_blocks.assign(env_count, Tensor::zeros_like(trained.shared));
  const NormalEquations ne =
      accumulate_normal_equations(m, view, labels, env_count, estimator);
  const std::vector<double> theta(trained.shared.data().begin(),
                                  trained.shared.data().end());
  for (std::size_t e = 0; e < env_count; ++e) {
    const auto g_theta = linalg::matmul(ne.gram[e], theta, p, p, out);
    std::vector<double> resid(p * out);
    for (std::size_t k = 0; k < p * out; ++k) resid[k] = ne.rhs[e][k] - g_theta[k];
    auto phi = linalg::solve(with_ridge(ne.gram[e], p, trained.lambda), resid, p, out);
    if (!phi) {
      throw RankDeficiencyError(
          "singular normal system for environment " + std::to_string(e), e);
    }
    m.env_blocks[e] = Tensor({p * out}, std::move(*phi));
  }
  return m;
}

void save_model(const DecomposedModel& model, const std::filesystem::path& path) {
  validate_model(model);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot open " + path.string() + " for writing");
  os.write(kMagic.data(), kMagic.size());
  io::write_pod<std::uint32_t>(os, kModelCheckpointVersion);
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(model.law));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(model.env_count()));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(model.layout.sizes().size()));
  for (std::size_t s : model.layout.sizes()) {
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s));
  }
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(model.system.kind));
  io::write_pod<std::uint32_t>(
      os, static_cast<std::uint32_t>(model.system.kind == SystemKind::Linear
                                         ? model.system.linear_dim
                                         : model.system.grid_side));
  io::write_pod<double>(os, model.system.ds);
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(model.features));
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(model.regularizer));
  io::write_pod<double>(os, model.lambda);
  io::write_doubles(os, model.shared.ptr(), model.shared.size());
  for (const Tensor& b : model.env_blocks) io::write_doubles(os, b.ptr(), b.size());
  if (!os) throw FileError("write failed for " + path.string());
}

DecomposedModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot open " + path.string());
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is) throw FormatError("truncated file while reading magic");
  if (magic != kMagic) throw FormatError("bad magic: not a DYNF checkpoint");
  const auto version = io::read_pod<std::uint32_t>(is, "format version");
  if (version != kModelCheckpointVersion) {
    throw FormatError("unsupported model checkpoint version " + std::to_string(version));
  }
  DecomposedModel m;
  const auto law = io::read_pod<std::uint8_t>(is, "decomposition law");
  if (law > 2) throw FormatError("unknown decomposition law " + std::to_string(law));
  m.law = static_cast<DecompositionLaw>(law);
  const auto env_count = io::read_pod<std::uint32_t>(is, "environment count");
  if (env_count < 1 || env_count > 100000) {
    throw FormatError("implausible environment count " + std::to_string(env_count));
  }
  const auto layers = io::read_pod<std::uint32_t>(is, "layer count");
  if (layers < 2 || layers > 64) throw FormatError("implausible layer count");
  std::vector<std::size_t> sizes;
  for (std::uint32_t i = 0; i < layers; ++i) {
    sizes.push_back(io::read_pod<std::uint32_t>(is, "layer size"));
  }
  m.layout = MlpLayout(std::move(sizes));
  const auto kind = io::read_pod<std::uint8_t>(is, "system id");
  const auto extent = io::read_pod<std::uint32_t>(is, "system extent");
  const double ds = io::read_pod<double>(is, "spatial step");
  switch (kind) {
    case 0: m.system = SystemSpec::lotka_volterra(); break;
    case 1: m.system = SystemSpec::gray_scott(extent, ds); break;
    case 2: m.system = SystemSpec::linear(extent); break;
    default: throw FormatError("unknown system id " + std::to_string(kind));
  }
  const auto feat = io::read_pod<std::uint8_t>(is, "feature map");
  const auto reg = io::read_pod<std::uint8_t>(is, "regularizer");
  if (feat > 2 || reg > 3) throw FormatError("unknown feature map or regularizer");
  m.features = static_cast<FeatureKind>(feat);
  m.regularizer = static_cast<Regularizer>(reg);
  m.lambda = io::read_pod<double>(is, "lambda");
  const std::size_t n = m.law == DecompositionLaw::LinearBasis
                            ? linear_param_count(m)
                            : m.layout.param_count();
  m.shared = Tensor({n});
  io::read_doubles(is, m.shared.ptr(), n, "shared parameters");
  for (std::uint32_t e = 0; e < env_count; ++e) {
    Tensor b({n});
    io::read_doubles(is, b.ptr(), n, "environment parameters");
    m.env_blocks.push_back(std::move(b));
  }
  try {
    validate_model(m);
  } catch (const Error& e) {
    throw FormatError(std::string("inconsistent checkpoint: ") + e.what());
  }
  return m;
}

}  // namespace dynainfer
