#include "dynainfer/autodiff.hpp"

#include <cmath>
#include <sstream>

#include "dynainfer/errors.hpp"
#include "dynainfer/kernels.hpp"

namespace dynainfer::ad {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), std::nullopt, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), std::nullopt, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> parents,
                 Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (&p.tape() != this) {
      throw ArgumentError("operands recorded on different tapes");
    }
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), std::nullopt,
                        needs ? std::move(backward) : Backward{}, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.grad) n.grad = Tensor::zeros_like(n.value);
  return *n.grad;
}

const Tensor* Tape::grad_if_any(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.grad ? &*n.grad : nullptr;
}

void Tape::backward(Var root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward() needs a scalar root, got shape " +
                     shape_string(root.value().shape()));
  }
  for (Node& n : nodes_) n.grad.reset();
  grad(root.id())[0] = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad && n.backward) n.backward(*this, i);
  }
}

Tensor Tape::gradient(Var v) const {
  const Tensor* g = grad_if_any(v.id());
  return g ? *g : Tensor::zeros_like(v.value());
}

namespace {

// Adds `scale * src` into the gradient of `parent` when it wants one.
void accumulate(Tape& tape, std::size_t parent, const Tensor& src,
                double s = 1.0) {
  if (!tape.requires_grad(parent)) return;
  Tensor& g = tape.grad(parent);
  double* gp = g.ptr();
  const double* sp = src.ptr();
  const std::size_t n = g.size();
  for (std::size_t i = 0; i < n; ++i) gp[i] += s * sp[i];
}

const Tensor& out_grad(Tape& tape, std::size_t self) {
  return *tape.grad_if_any(self);
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const double* bp = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return a.tape().record(std::move(out), parents,
                         [ia, ib](Tape& t, std::size_t self) {
                           const Tensor& g = out_grad(t, self);
                           accumulate(t, ia, g);
                           accumulate(t, ib, g);
                         });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const double* bp = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return a.tape().record(std::move(out), parents,
                         [ia, ib](Tape& t, std::size_t self) {
                           const Tensor& g = out_grad(t, self);
                           accumulate(t, ia, g);
                           accumulate(t, ib, g, -1.0);
                         });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const double* bp = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return a.tape().record(
      std::move(out), parents, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = out_grad(t, self);
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        if (t.requires_grad(ia)) {
          Tensor& ga = t.grad(ia);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad(ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  const std::size_t ia = a.id();
  const Var parents[] = {a};
  return a.tape().record(std::move(out), parents,
                         [ia, s](Tape& t, std::size_t self) {
                           accumulate(t, ia, out_grad(t, self), s);
                         });
}

Var axpy(Var a, double s, Var b) {
  require_same_shape(a.value(), b.value(), "axpy");
  Tensor out = a.value();
  const double* bp = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * bp[i];
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return a.tape().record(std::move(out), parents,
                         [ia, ib, s](Tape& t, std::size_t self) {
                           const Tensor& g = out_grad(t, self);
                           accumulate(t, ia, g);
                           accumulate(t, ib, g, s);
                         });
}

Var swish(Var a) {
  Tensor out = Tensor::zeros_like(a.value());
  kernels::swish_forward(a.value().ptr(), out.size(), out.ptr());
  const std::size_t ia = a.id();
  const Var parents[] = {a};
  return a.tape().record(
      std::move(out), parents, [ia](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = out_grad(t, self);
        kernels::swish_backward(t.value(ia).ptr(), g.ptr(), g.size(),
                                t.grad(ia).ptr());
      });
}

Var clamp_min(Var a, double floor) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] < floor) out[i] = floor;
  }
  const std::size_t ia = a.id();
  const Var parents[] = {a};
  return a.tape().record(
      std::move(out), parents, [ia, floor](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = out_grad(t, self);
        const Tensor& av = t.value(ia);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (av[i] > floor) ga[i] += g[i];
        }
      });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  const Var parents[] = {a};
  return a.tape().record(
      Tensor::scalar(s), parents, [ia](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const double g = out_grad(t, self)[0];
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
      });
}

Var sq_norm(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  const std::size_t ia = a.id();
  const Var parents[] = {a};
  return a.tape().record(
      Tensor::scalar(s), parents, [ia](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const double g = out_grad(t, self)[0];
        const Tensor& av = t.value(ia);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * av[i];
      });
}

Var l1_norm(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += std::abs(v);
  const std::size_t ia = a.id();
  const Var parents[] = {a};
  return a.tape().record(
      Tensor::scalar(s), parents, [ia](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const double g = out_grad(t, self)[0];
        const Tensor& av = t.value(ia);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) {
          if (av[i] > 0.0) {
            ga[i] += g;
          } else if (av[i] < 0.0) {
            ga[i] -= g;
          }
        }
      });
}

Var weighted_sq_error(Var pred, const Tensor& target,
                      std::span<const double> row_weights) {
  const Tensor& p = pred.value();
  if (p.size() != target.size()) {
    throw ShapeError("weighted_sq_error: prediction " +
                     shape_string(p.shape()) + " vs target " +
                     shape_string(target.shape()));
  }
  const std::size_t rows = p.rows(), cols = p.cols();
  if (row_weights.size() != rows) {
    throw ShapeError("weighted_sq_error: " + std::to_string(rows) +
                     " rows but " + std::to_string(row_weights.size()) +
                     " weights");
  }
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double row = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = p[r * cols + c] - target[r * cols + c];
      row += d * d;
    }
    s += row_weights[r] * row;
  }
  const std::size_t ip = pred.id();
  std::vector<double> w(row_weights.begin(), row_weights.end());
  const Var parents[] = {pred};
  return pred.tape().record(
      Tensor::scalar(s), parents,
      [ip, target, w = std::move(w), rows, cols](Tape& t, std::size_t self) {
        if (!t.requires_grad(ip)) return;
        const double g = out_grad(t, self)[0];
        const Tensor& pv = t.value(ip);
        Tensor& gp = t.grad(ip);
        for (std::size_t r = 0; r < rows; ++r) {
          const double f = 2.0 * g * w[r];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t k = r * cols + c;
            gp[k] += f * (pv[k] - target[k]);
          }
        }
      });
}

Var linear(Var x, Var params, std::size_t w_offset, std::size_t b_offset,
           std::size_t in, std::size_t out) {
  const Tensor& xv = x.value();
  const Tensor& pv = params.value();
  if (xv.cols() != in) {
    throw ShapeError("linear: input has " + std::to_string(xv.cols()) +
                     " features, layer expects " + std::to_string(in));
  }
  const std::size_t need =
      std::max(w_offset + in * out, b_offset == kNoBias ? 0 : b_offset + out);
  if (pv.size() < need) {
    throw ShapeError("linear: parameter vector too short");
  }
  const std::size_t rows = xv.rows();
  Tensor y({rows, out});
  const double* bias = b_offset == kNoBias ? nullptr : pv.ptr() + b_offset;
  kernels::linear_forward(xv.ptr(), rows, in, pv.ptr() + w_offset, bias, out,
                          y.ptr());
  const std::size_t ix = x.id(), ip = params.id();
  const Var parents[] = {x, params};
  return x.tape().record(
      std::move(y), parents,
      [ix, ip, w_offset, b_offset, in, out, rows](Tape& t, std::size_t self) {
        const Tensor& g = out_grad(t, self);
        const Tensor& p = t.value(ip);
        if (t.requires_grad(ix)) {
          kernels::linear_backward_input(g.ptr(), rows, out,
                                         p.ptr() + w_offset, in,
                                         t.grad(ix).ptr());
        }
        if (t.requires_grad(ip)) {
          Tensor& gp = t.grad(ip);
          kernels::linear_backward_params(
              g.ptr(), t.value(ix).ptr(), rows, in, out, gp.ptr() + w_offset,
              b_offset == kNoBias ? nullptr : gp.ptr() + b_offset);
        }
      });
}

Var lv_basis(Var states) {
  const Tensor& s = states.value();
  if (s.cols() != 2) {
    throw ShapeError("lv_basis: expects 2 columns, got " +
                     shape_string(s.shape()));
  }
  const std::size_t rows = s.rows();
  Tensor out({rows, 3});
  for (std::size_t r = 0; r < rows; ++r) {
    const double m = s[2 * r], n = s[2 * r + 1];
    out[3 * r] = m;
    out[3 * r + 1] = n;
    out[3 * r + 2] = m * n;
  }
  const std::size_t is = states.id();
  const Var parents[] = {states};
  return states.tape().record(
      std::move(out), parents, [is, rows](Tape& t, std::size_t self) {
        if (!t.requires_grad(is)) return;
        const Tensor& g = out_grad(t, self);
        const Tensor& sv = t.value(is);
        Tensor& gs = t.grad(is);
        for (std::size_t r = 0; r < rows; ++r) {
          const double m = sv[2 * r], n = sv[2 * r + 1];
          gs[2 * r] += g[3 * r] + g[3 * r + 2] * n;
          gs[2 * r + 1] += g[3 * r + 1] + g[3 * r + 2] * m;
        }
      });
}

namespace {

void check_field_batch(const Tensor& s, std::size_t side, const char* where) {
  if (s.cols() != 2 * side * side) {
    throw ShapeError(std::string(where) + ": expects rows of " +
                     std::to_string(2 * side * side) + " values, got " +
                     shape_string(s.shape()));
  }
}

}  // namespace

Var gs_stencil_features(Var states, std::size_t side, double ds) {
  const Tensor& s = states.value();
  check_field_batch(s, side, "gs_stencil_features");
  const std::size_t cells = side * side;
  const std::size_t batch = s.rows();
  Tensor out({batch * cells, 4});
  std::vector<double> lap(cells);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* m = s.ptr() + b * 2 * cells;
    const double* n = m + cells;
    double* o = out.ptr() + b * cells * 4;
    for (std::size_t j = 0; j < cells; ++j) {
      o[4 * j] = m[j];
      o[4 * j + 1] = n[j];
    }
    kernels::laplacian_periodic(m, side, ds, lap.data());
    for (std::size_t j = 0; j < cells; ++j) o[4 * j + 2] = lap[j];
    kernels::laplacian_periodic(n, side, ds, lap.data());
    for (std::size_t j = 0; j < cells; ++j) o[4 * j + 3] = lap[j];
  }
  const std::size_t is = states.id();
  const Var parents[] = {states};
  return states.tape().record(
      std::move(out), parents,
      [is, side, ds, batch, cells](Tape& t, std::size_t self) {
        if (!t.requires_grad(is)) return;
        const Tensor& g = out_grad(t, self);
        Tensor& gs = t.grad(is);
        std::vector<double> lm(cells), ln(cells);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* gb = g.ptr() + b * cells * 4;
          double* dm = gs.ptr() + b * 2 * cells;
          double* dn = dm + cells;
          for (std::size_t j = 0; j < cells; ++j) {
            dm[j] += gb[4 * j];
            dn[j] += gb[4 * j + 1];
            lm[j] = gb[4 * j + 2];
            ln[j] = gb[4 * j + 3];
          }
          // The periodic 5-point Laplacian is symmetric, so it is its own
          // adjoint.
          kernels::laplacian_periodic_accumulate(lm.data(), side, ds, dm);
          kernels::laplacian_periodic_accumulate(ln.data(), side, ds, dn);
        }
      });
}

Var gs_cell_states(Var states, std::size_t side) {
  const Tensor& s = states.value();
  check_field_batch(s, side, "gs_cell_states");
  const std::size_t cells = side * side;
  const std::size_t batch = s.rows();
  Tensor out({batch * cells, 2});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* m = s.ptr() + b * 2 * cells;
    double* o = out.ptr() + b * cells * 2;
    for (std::size_t j = 0; j < cells; ++j) {
      o[2 * j] = m[j];
      o[2 * j + 1] = m[cells + j];
    }
  }
  const std::size_t is = states.id();
  const Var parents[] = {states};
  return states.tape().record(
      std::move(out), parents,
      [is, batch, cells](Tape& t, std::size_t self) {
        if (!t.requires_grad(is)) return;
        const Tensor& g = out_grad(t, self);
        Tensor& gs = t.grad(is);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* gb = g.ptr() + b * cells * 2;
          double* d = gs.ptr() + b * 2 * cells;
          for (std::size_t j = 0; j < cells; ++j) {
            d[j] += gb[2 * j];
            d[cells + j] += gb[2 * j + 1];
          }
        }
      });
}

Var gs_cells_to_fields(Var cells_var, std::size_t side) {
  const Tensor& c = cells_var.value();
  const std::size_t cells = side * side;
  if (c.cols() != 2 || c.rows() % cells != 0) {
    throw ShapeError("gs_cells_to_fields: expects [batch*" +
                     std::to_string(cells) + ", 2], got " +
                     shape_string(c.shape()));
  }
  const std::size_t batch = c.rows() / cells;
  Tensor out({batch, 2 * cells});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = c.ptr() + b * cells * 2;
    double* m = out.ptr() + b * 2 * cells;
    for (std::size_t j = 0; j < cells; ++j) {
      m[j] = src[2 * j];
      m[cells + j] = src[2 * j + 1];
    }
  }
  const std::size_t ic = cells_var.id();
  const Var parents[] = {cells_var};
  return cells_var.tape().record(
      std::move(out), parents, [ic, batch, cells](Tape& t, std::size_t self) {
        if (!t.requires_grad(ic)) return;
        const Tensor& g = out_grad(t, self);
        Tensor& gc = t.grad(ic);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* gm = g.ptr() + b * 2 * cells;
          double* d = gc.ptr() + b * cells * 2;
          for (std::size_t j = 0; j < cells; ++j) {
            d[2 * j] += gm[j];
            d[2 * j + 1] += gm[cells + j];
          }
        }
      });
}

Tensor gradient(const std::function<Var(Var)>& loss_fn, const Tensor& params) {
  Tape tape;
  Var p = tape.leaf(params);
  Var loss = loss_fn(p);
  const double v = loss.value().item();
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << "loss is not finite: " << v;
    throw NumericError(os.str());
  }
  tape.backward(loss);
  return tape.gradient(p);
}

}  // namespace dynainfer::ad
