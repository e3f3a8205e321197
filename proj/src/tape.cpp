#include "protsi/tape.hpp"

#include <algorithm>
#include <cmath>

namespace protsi {

namespace {

std::string shapes_str(std::initializer_list<const Tensor*> ts) {
  std::string s;
  for (const Tensor* t : ts) {
    if (!s.empty()) s += " vs ";
    s += t->shape_str();
  }
  return s;
}

[[noreturn]] void shape_error(const char* prim, std::initializer_list<const Tensor*> ts) {
  throw UsageError(std::string(prim) + ": shape mismatch (" + shapes_str(ts) + ")");
}

Tape& tape_of(const char* prim, std::span<const Var> vars) {
  if (vars.empty()) throw UsageError(std::string(prim) + ": no inputs");
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw UsageError(std::string(prim) + ": invalid input var");
    if (t == nullptr) t = v.tape;
    if (v.tape != t) throw UsageError(std::string(prim) + ": inputs from different tapes");
  }
  return *t;
}

Tape& tape_of(const char* prim, std::initializer_list<Var> vars) {
  return tape_of(prim, std::span<const Var>(vars.begin(), vars.size()));
}

Var finish(Tape& t, const char* prim, Tensor value, BackwardFn backward) {
  if (!value.all_finite())
    throw NumericError(std::string(prim) + ": non-finite output");
  int idx = t.push(std::move(value), prim, std::move(backward));
  return Var{&t, idx};
}

// Elementwise unary helper: fwd(x) with local gradient dydx computed from
// the input and output values. Both callbacks must return concrete arrays
// (not expressions referencing their arguments).
template <typename Fwd, typename Dydx>
Var unary_op(const char* prim, Var x, Fwd fwd, Dydx dydx) {
  Tape& t = tape_of(prim, {x});
  const Tensor& xv = t.value(x);
  Tensor out = Tensor::zeros(xv.shape());
  Eigen::ArrayXd fwd_vals = fwd(xv.arr());
  out.arr() = fwd_vals;
  int xi = x.index;
  Tensor xval = xv;
  Tensor oval = out;
  return finish(t, prim, std::move(out),
                [xi, xval = std::move(xval), oval = std::move(oval), dydx](Tape& tp, const Tensor& g) {
                  Eigen::ArrayXd local = dydx(xval.arr(), oval.arr());
                  tp.adjoint(xi).arr() += g.arr() * local;
                });
}

}  // namespace

// --- ParameterSet ---------------------------------------------------------

Parameter& ParameterSet::add(std::string id, Tensor tensor, bool trainable) {
  if (index_.count(id) > 0) throw UsageError("ParameterSet: duplicate id '" + id + "'");
  index_[id] = params_.size();
  params_.push_back(Parameter{std::move(id), std::move(tensor), trainable});
  return params_.back();
}

Parameter& ParameterSet::at(const std::string& id) {
  auto it = index_.find(id);
  if (it == index_.end()) throw UsageError("ParameterSet: unknown id '" + id + "'");
  return params_[it->second];
}

const Parameter& ParameterSet::at(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw UsageError("ParameterSet: unknown id '" + id + "'");
  return params_[it->second];
}

bool ParameterSet::operator==(const ParameterSet& o) const {
  if (params_.size() != o.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Parameter& a = params_[i];
    const Parameter& b = o.params_[i];
    if (a.id != b.id || a.trainable != b.trainable || !(a.tensor == b.tensor)) return false;
  }
  return true;
}

// --- Tape ------------------------------------------------------------------

int Tape::push(Tensor value, const char* kind, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.kind = kind;
  if (recording_) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::constant(Tensor value) {
  if (value.empty()) throw UsageError("Tape::constant: empty tensor");
  int idx = push(std::move(value), "constant", {});
  return Var{this, idx};
}

Var Tape::leaf(const Parameter& p) {
  if (p.tensor.empty()) throw UsageError("Tape::leaf: empty parameter '" + p.id + "'");
  int idx = push(p.tensor, "leaf", {});
  if (p.trainable) trainable_leaves_.emplace_back(p.id, idx);
  return Var{this, idx};
}

const Tensor& Tape::value(Var v) const {
  if (v.tape != this || v.index < 0 || v.index >= node_count())
    throw UsageError("Tape::value: var does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.index)].value;
}

Tensor& Tape::adjoint(int index) { return adjoints_[static_cast<std::size_t>(index)]; }

GradientMap Tape::gradients(Var scalar) {
  if (scalar.tape != this || scalar.index < 0 || scalar.index >= node_count())
    throw UsageError("Tape::gradients: scalar was not produced by this record");
  if (!recording_)
    throw UsageError("Tape::gradients: record was not captured (recording disabled)");
  if (!nodes_[static_cast<std::size_t>(scalar.index)].value.is_scalar())
    throw UsageError("Tape::gradients: output is not a scalar, shape " +
                     nodes_[static_cast<std::size_t>(scalar.index)].value.shape_str());

  adjoints_.clear();
  adjoints_.reserve(nodes_.size());
  for (const Node& n : nodes_) adjoints_.push_back(Tensor::zeros(n.value.shape()));
  adjoints_[static_cast<std::size_t>(scalar.index)] = Tensor::scalar(1.0);

  for (int i = scalar.index; i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward) n.backward(*this, adjoints_[static_cast<std::size_t>(i)]);
  }

  GradientMap out;
  for (const auto& [id, idx] : trainable_leaves_)
    out[id] = adjoints_[static_cast<std::size_t>(idx)];
  adjoints_.clear();
  return out;
}

// --- primitives -------------------------------------------------------------

Distance distance_from_string(const std::string& s) {
  if (s == "euclidean") return Distance::euclidean;
  if (s == "squared" || s == "squared_euclidean") return Distance::squared_euclidean;
  throw ConfigError("distance: expected euclidean|squared, got '" + s + "'");
}

std::string to_string(Distance d) {
  return d == Distance::euclidean ? "euclidean" : "squared_euclidean";
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of("matmul", {a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != 2) shape_error("matmul", {&av, &bv});

  int ai = a.index, bi = b.index;
  if (bv.rank() == 1) {
    if (av.cols() != bv.length()) shape_error("matmul", {&av, &bv});
    Tensor out = Tensor::from_vector(av.mat() * bv.vec());
    Tensor acopy = av, bcopy = bv;
    return finish(t, "matmul", std::move(out),
                  [ai, bi, acopy = std::move(acopy), bcopy = std::move(bcopy)](Tape& tp, const Tensor& g) {
                    tp.adjoint(ai).mat().noalias() += g.vec() * bcopy.vec().transpose();
                    tp.adjoint(bi).vec().noalias() += acopy.mat().transpose() * g.vec();
                  });
  }
  if (bv.rank() != 2 || av.cols() != bv.rows()) shape_error("matmul", {&av, &bv});
  Tensor out = Tensor::from_matrix(av.mat() * bv.mat());
  Tensor acopy = av, bcopy = bv;
  return finish(t, "matmul", std::move(out),
                [ai, bi, acopy = std::move(acopy), bcopy = std::move(bcopy)](Tape& tp, const Tensor& g) {
                  tp.adjoint(ai).mat().noalias() += g.mat() * bcopy.mat().transpose();
                  tp.adjoint(bi).mat().noalias() += acopy.mat().transpose() * g.mat();
                });
}

Var add(Var a, Var b) {
  Tape& t = tape_of("add", {a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) shape_error("add", {&av, &bv});
  Tensor out = Tensor::zeros(av.shape());
  out.vec() = av.vec() + bv.vec();
  int ai = a.index, bi = b.index;
  return finish(t, "add", std::move(out), [ai, bi](Tape& tp, const Tensor& g) {
    tp.adjoint(ai).vec() += g.vec();
    tp.adjoint(bi).vec() += g.vec();
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of("mul", {a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) shape_error("mul", {&av, &bv});
  Tensor out = Tensor::zeros(av.shape());
  out.arr() = av.arr() * bv.arr();
  int ai = a.index, bi = b.index;
  Tensor acopy = av, bcopy = bv;
  return finish(t, "mul", std::move(out),
                [ai, bi, acopy = std::move(acopy), bcopy = std::move(bcopy)](Tape& tp, const Tensor& g) {
                  tp.adjoint(ai).arr() += g.arr() * bcopy.arr();
                  tp.adjoint(bi).arr() += g.arr() * acopy.arr();
                });
}

Var concat(std::span<const Var> parts) {
  Tape& t = tape_of("concat", parts);
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    const Tensor& v = t.value(p);
    if (v.rank() != 1) shape_error("concat", {&v});
    total += v.size();
  }
  Tensor out = Tensor::zeros({static_cast<int>(total)});
  Eigen::Index at = 0;
  std::vector<std::pair<int, Eigen::Index>> layout;  // (node, length)
  for (const Var& p : parts) {
    const Tensor& v = t.value(p);
    out.vec().segment(at, v.size()) = v.vec();
    layout.emplace_back(p.index, v.size());
    at += v.size();
  }
  return finish(t, "concat", std::move(out), [layout = std::move(layout)](Tape& tp, const Tensor& g) {
    Eigen::Index at = 0;
    for (const auto& [idx, len] : layout) {
      tp.adjoint(idx).vec() += g.vec().segment(at, len);
      at += len;
    }
  });
}

Var relu(Var x) {
  // Subgradient 0 at exactly 0.
  return unary_op(
      "relu", x, [](const auto& xs) -> Eigen::ArrayXd { return xs.max(0.0); },
      [](const auto& xs, const auto&) -> Eigen::ArrayXd {
        return (xs > 0.0).template cast<double>();
      });
}

Var sigmoid(Var x) {
  return unary_op(
      "sigmoid", x, [](const auto& xs) -> Eigen::ArrayXd { return 1.0 / (1.0 + (-xs).exp()); },
      [](const auto&, const auto& ys) -> Eigen::ArrayXd { return ys * (1.0 - ys); });
}

Var tanh(Var x) {
  return unary_op(
      "tanh", x, [](const auto& xs) -> Eigen::ArrayXd { return xs.tanh(); },
      [](const auto&, const auto& ys) -> Eigen::ArrayXd { return 1.0 - ys * ys; });
}

Var mean_rows(Var m) {
  Tape& t = tape_of("mean_rows", {m});
  const Tensor& mv = t.value(m);
  if (mv.rank() != 2) shape_error("mean_rows", {&mv});
  Tensor out = Tensor::from_vector(mv.mat().colwise().mean().transpose());
  int mi = m.index;
  double inv_rows = 1.0 / static_cast<double>(mv.rows());
  return finish(t, "mean_rows", std::move(out), [mi, inv_rows](Tape& tp, const Tensor& g) {
    tp.adjoint(mi).mat().rowwise() += (inv_rows * g.vec()).transpose();
  });
}

namespace {

Var distance_impl(const char* prim, Var a, Var b, bool squared) {
  Tape& t = tape_of(prim, {a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != 1 || !av.same_shape(bv)) shape_error(prim, {&av, &bv});
  Vector diff = av.vec() - bv.vec();
  double sq = diff.squaredNorm();
  double d = squared ? sq : std::sqrt(sq);
  int ai = a.index, bi = b.index;
  return finish(t, prim, Tensor::scalar(d),
                [ai, bi, diff = std::move(diff), d, squared](Tape& tp, const Tensor& g) {
                  // d(sqrt distance) is undefined at coincident points; use 0 there.
                  double go = g.scalar_value();
                  if (squared) {
                    tp.adjoint(ai).vec() += 2.0 * go * diff;
                    tp.adjoint(bi).vec() -= 2.0 * go * diff;
                  } else if (d > 0.0) {
                    tp.adjoint(ai).vec() += (go / d) * diff;
                    tp.adjoint(bi).vec() -= (go / d) * diff;
                  }
                });
}

}  // namespace

Var euclidean_distance(Var a, Var b) { return distance_impl("euclidean_distance", a, b, false); }

Var squared_euclidean_distance(Var a, Var b) {
  return distance_impl("squared_euclidean_distance", a, b, true);
}

Var distance(Distance kind, Var a, Var b) {
  return kind == Distance::euclidean ? euclidean_distance(a, b) : squared_euclidean_distance(a, b);
}

Var softmax(Var x) {
  Tape& t = tape_of("softmax", {x});
  const Tensor& xv = t.value(x);
  if (xv.rank() != 1) shape_error("softmax", {&xv});
  Eigen::ArrayXd shifted = xv.arr() - xv.arr().maxCoeff();
  Eigen::ArrayXd exps = shifted.exp();
  Tensor out = Tensor::zeros(xv.shape());
  out.arr() = exps / exps.sum();
  int xi = x.index;
  Tensor ycopy = out;
  return finish(t, "softmax", std::move(out),
                [xi, ycopy = std::move(ycopy)](Tape& tp, const Tensor& g) {
                  double inner = (g.arr() * ycopy.arr()).sum();
                  tp.adjoint(xi).arr() += ycopy.arr() * (g.arr() - inner);
                });
}

Var log(Var x) {
  Tape& t = tape_of("log", {x});
  const Tensor& xv = t.value(x);
  if ((xv.arr() <= 0.0).any())
    throw UsageError("log: domain error, non-positive input");
  return unary_op(
      "log", x, [](const auto& xs) -> Eigen::ArrayXd { return xs.log(); },
      [](const auto& xs, const auto&) -> Eigen::ArrayXd { return 1.0 / xs; });
}

Var log_floor(Var x, double floor) {
  Tape& t = tape_of("log_floor", {x});
  if (floor <= 0.0) throw UsageError("log_floor: floor must be positive");
  const Tensor& xv = t.value(x);
  if ((xv.arr() < floor).any()) t.note_clamp();
  return unary_op(
      "log_floor", x, [floor](const auto& xs) -> Eigen::ArrayXd { return xs.max(floor).log(); },
      [floor](const auto& xs, const auto&) -> Eigen::ArrayXd {
        return (xs > floor).template cast<double>() / xs.max(floor);
      });
}

Var exp(Var x) {
  return unary_op(
      "exp", x, [](const auto& xs) -> Eigen::ArrayXd { return xs.exp(); },
      [](const auto&, const auto& ys) -> Eigen::ArrayXd { return ys; });
}

Var scale(Var x, double c) {
  Tape& t = tape_of("scale", {x});
  const Tensor& xv = t.value(x);
  Tensor out = Tensor::zeros(xv.shape());
  out.vec() = c * xv.vec();
  int xi = x.index;
  return finish(t, "scale", std::move(out), [xi, c](Tape& tp, const Tensor& g) {
    tp.adjoint(xi).vec() += c * g.vec();
  });
}

Var dot(Var a, Var b) {
  Tape& t = tape_of("dot", {a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != 1 || !av.same_shape(bv)) shape_error("dot", {&av, &bv});
  double d = av.vec().dot(bv.vec());
  int ai = a.index, bi = b.index;
  Tensor acopy = av, bcopy = bv;
  return finish(t, "dot", Tensor::scalar(d),
                [ai, bi, acopy = std::move(acopy), bcopy = std::move(bcopy)](Tape& tp, const Tensor& g) {
                  double go = g.scalar_value();
                  tp.adjoint(ai).vec() += go * bcopy.vec();
                  tp.adjoint(bi).vec() += go * acopy.vec();
                });
}

Var slice(Var x, int offset, int len) {
  Tape& t = tape_of("slice", {x});
  const Tensor& xv = t.value(x);
  if (xv.rank() != 1 || offset < 0 || len <= 0 || offset + len > xv.length())
    throw UsageError("slice: range [" + std::to_string(offset) + "," +
                     std::to_string(offset + len) + ") out of shape " + xv.shape_str());
  Tensor out = Tensor::from_vector(xv.vec().segment(offset, len));
  int xi = x.index;
  return finish(t, "slice", std::move(out), [xi, offset, len](Tape& tp, const Tensor& g) {
    tp.adjoint(xi).vec().segment(offset, len) += g.vec();
  });
}

Var row(Var m, int r) {
  Tape& t = tape_of("row", {m});
  const Tensor& mv = t.value(m);
  if (mv.rank() != 2 || r < 0 || r >= mv.rows())
    throw UsageError("row: index " + std::to_string(r) + " out of shape " + mv.shape_str());
  Tensor out = Tensor::from_vector(mv.mat().row(r).transpose());
  int mi = m.index;
  return finish(t, "row", std::move(out), [mi, r](Tape& tp, const Tensor& g) {
    tp.adjoint(mi).mat().row(r) += g.vec().transpose();
  });
}

Var stack_rows(std::span<const Var> rows_in) {
  Tape& t = tape_of("stack_rows", rows_in);
  const Tensor& first = t.value(rows_in[0]);
  if (first.rank() != 1) shape_error("stack_rows", {&first});
  int cols = first.length();
  Tensor out = Tensor::zeros({static_cast<int>(rows_in.size()), cols});
  std::vector<int> indices;
  indices.reserve(rows_in.size());
  for (std::size_t i = 0; i < rows_in.size(); ++i) {
    const Tensor& v = t.value(rows_in[i]);
    if (v.rank() != 1 || v.length() != cols) shape_error("stack_rows", {&first, &v});
    out.mat().row(static_cast<Eigen::Index>(i)) = v.vec().transpose();
    indices.push_back(rows_in[i].index);
  }
  return finish(t, "stack_rows", std::move(out), [indices = std::move(indices)](Tape& tp, const Tensor& g) {
    for (std::size_t i = 0; i < indices.size(); ++i)
      tp.adjoint(indices[i]).vec() += g.mat().row(static_cast<Eigen::Index>(i)).transpose();
  });
}

Var batchnorm(std::span<const Var> batch, Var gamma, Var beta, BatchNormMode mode,
              const Tensor* running_mean, const Tensor* running_var, BatchStats* stats_out) {
  std::vector<Var> all(batch.begin(), batch.end());
  all.push_back(gamma);
  all.push_back(beta);
  Tape& t = tape_of("batchnorm", std::span<const Var>(all));

  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  if (gv.rank() != 1 || !gv.same_shape(bv)) shape_error("batchnorm", {&gv, &bv});
  const int width = gv.length();
  const int bsize = static_cast<int>(batch.size());
  for (const Var& item : batch) {
    const Tensor& v = t.value(item);
    if (v.rank() != 1 || v.length() != width) shape_error("batchnorm", {&gv, &v});
  }

  Matrix x(bsize, width);
  for (int i = 0; i < bsize; ++i) x.row(i) = t.value(batch[i]).vec().transpose();

  std::vector<int> in_idx;
  in_idx.reserve(batch.size());
  for (const Var& item : batch) in_idx.push_back(item.index);
  int gi = gamma.index, bi = beta.index;

  if (mode == BatchNormMode::infer) {
    if (running_mean == nullptr || running_var == nullptr)
      throw UsageError("batchnorm: infer mode requires running statistics");
    if (running_mean->rank() != 1 || running_mean->length() != width ||
        running_var->rank() != 1 || running_var->length() != width)
      shape_error("batchnorm", {&gv, running_mean});
    Eigen::ArrayXd inv_std = (running_var->arr() + kBatchNormEpsilon).sqrt().inverse();
    Matrix xhat = ((x.array().rowwise() - running_mean->arr().transpose()).rowwise() *
                   inv_std.transpose())
                      .matrix();
    Matrix y = ((xhat.array().rowwise() * gv.arr().transpose()).rowwise() + bv.arr().transpose())
                   .matrix();
    if (stats_out != nullptr) {
      stats_out->mean = *running_mean;
      stats_out->variance = *running_var;
    }
    Tensor gcopy = gv;
    return finish(t, "batchnorm", Tensor::from_matrix(y),
                  [in_idx = std::move(in_idx), gi, bi, gcopy = std::move(gcopy),
                   inv_std = std::move(inv_std), xhat = std::move(xhat)](Tape& tp, const Tensor& g) {
                    Eigen::ArrayXd col_scale = gcopy.arr() * inv_std;
                    for (std::size_t i = 0; i < in_idx.size(); ++i)
                      tp.adjoint(in_idx[i]).arr() +=
                          g.mat().row(static_cast<Eigen::Index>(i)).transpose().array() * col_scale;
                    tp.adjoint(gi).arr() +=
                        (g.mat().array() * xhat.array()).colwise().sum().transpose();
                    tp.adjoint(bi).arr() += g.mat().array().colwise().sum().transpose();
                  });
  }

  if (bsize < 2)
    throw UsageError("batchnorm: degenerate batch of size " + std::to_string(bsize) +
                     " in train mode");

  Eigen::ArrayXd mu = x.array().colwise().mean().transpose();
  Matrix centered = (x.array().rowwise() - mu.transpose()).matrix();
  Eigen::ArrayXd var =
      centered.array().square().colwise().sum().transpose() / static_cast<double>(bsize);
  Eigen::ArrayXd inv_std = (var + kBatchNormEpsilon).sqrt().inverse();
  Matrix xhat = (centered.array().rowwise() * inv_std.transpose()).matrix();
  Matrix y = ((xhat.array().rowwise() * gv.arr().transpose()).rowwise() + bv.arr().transpose())
                 .matrix();

  if (stats_out != nullptr) {
    stats_out->mean = Tensor::from_vector(mu.matrix());
    stats_out->variance = Tensor::from_vector(var.matrix());
  }

  Tensor gcopy = gv;
  return finish(
      t, "batchnorm", Tensor::from_matrix(y),
      [in_idx = std::move(in_idx), gi, bi, gcopy = std::move(gcopy), inv_std = std::move(inv_std),
       xhat = std::move(xhat), centered = std::move(centered), bsize](Tape& tp, const Tensor& g) {
        const double n = static_cast<double>(bsize);
        // Full derivative through the batch statistics.
        Matrix gxhat = (g.mat().array().rowwise() * gcopy.arr().transpose()).matrix();
        Eigen::ArrayXd gvar = (gxhat.array() * centered.array()).colwise().sum().transpose() *
                              (-0.5) * inv_std.pow(3);
        Eigen::ArrayXd gmu = -(gxhat.array().colwise().sum().transpose()) * inv_std +
                             gvar * (-2.0 / n) * centered.array().colwise().sum().transpose();
        for (int i = 0; i < bsize; ++i) {
          Eigen::ArrayXd gx = gxhat.row(i).transpose().array() * inv_std +
                              gvar * 2.0 / n * centered.row(i).transpose().array() + gmu / n;
          tp.adjoint(in_idx[static_cast<std::size_t>(i)]).arr() += gx;
        }
        tp.adjoint(gi).arr() += (g.mat().array() * xhat.array()).colwise().sum().transpose();
        tp.adjoint(bi).arr() += g.mat().array().colwise().sum().transpose();
      });
}

}  // namespace protsi
