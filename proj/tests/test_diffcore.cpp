#include <doctest.h>

#include <cmath>

#include "protsi/finite_diff.hpp"
#include "protsi/rng.hpp"
#include "protsi/tape.hpp"

using namespace protsi;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

// Central-difference oracle, independent of Tape::gradients.
GradientMap central_difference(const LossBuilder& f, const ParameterSet& params, double h) {
  ParameterSet work;
  for (const Parameter& p : params.items()) work.add(p.id, p.tensor, p.trainable);
  auto eval = [&](const ParameterSet& ps) {
    Tape tape(false);
    return tape.value(f(tape, ps)).scalar_value();
  };
  GradientMap out;
  for (Parameter& p : work.items()) {
    if (!p.trainable) continue;
    Tensor g = Tensor::zeros(p.tensor.shape());
    for (Eigen::Index i = 0; i < p.tensor.size(); ++i) {
      const double saved = p.tensor[i];
      p.tensor[i] = saved + h;
      const double up = eval(work);
      p.tensor[i] = saved - h;
      const double down = eval(work);
      p.tensor[i] = saved;
      g[i] = (up - down) / (2.0 * h);
    }
    out[p.id] = std::move(g);
  }
  return out;
}

void check_against_central_difference(const LossBuilder& f, const ParameterSet& params,
                                      double tol = 1e-4) {
  GradientMap fd = central_difference(f, params, 1e-4);
  Tape tape;
  GradientMap rev = tape.gradients(f(tape, params));
  for (const auto& [id, g] : fd) {
    REQUIRE(rev.count(id) == 1);
    const Tensor& r = rev.at(id);
    REQUIRE(r.same_shape(g));
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      const double denom = std::max({std::abs(g[i]), std::abs(r[i]), 1e-8});
      CHECK(std::abs(g[i] - r[i]) / denom <= tol);
    }
  }
}

}  // namespace

TEST_SUITE_BEGIN("diffcore");

TEST_CASE("relu forward values") {
  Tape t;
  Var x = t.constant(Tensor::from_values({-1, 0, 2}));
  const Tensor& y = t.value(relu(x));
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.0);
}

TEST_CASE("mean_rows of 3x2 matrix") {
  Tape t;
  Tensor m = Tensor::zeros({3, 2});
  m.mat() << 1, 2, 3, 4, 5, 6;
  const Tensor& y = t.value(mean_rows(t.constant(m)));
  CHECK(y[0] == doctest::Approx(3.0));
  CHECK(y[1] == doctest::Approx(4.0));
}

TEST_CASE("euclidean distance 3-4-5") {
  Tape t;
  Var a = t.constant(Tensor::from_values({0, 0}));
  Var b = t.constant(Tensor::from_values({3, 4}));
  CHECK(t.value(euclidean_distance(a, b)).scalar_value() == doctest::Approx(5.0));
}

TEST_CASE("euclidean distance is symmetric and zero at coincidence") {
  Rng rng(11);
  for (int it = 0; it < 50; ++it) {
    Tensor a = random_tensor(rng, {5});
    Tensor b = random_tensor(rng, {5});
    Tape t;
    Var va = t.constant(a), vb = t.constant(b);
    double ab = t.value(euclidean_distance(va, vb)).scalar_value();
    double ba = t.value(euclidean_distance(vb, va)).scalar_value();
    CHECK(ab == doctest::Approx(ba).epsilon(1e-14));
    CHECK(t.value(euclidean_distance(va, va)).scalar_value() == 0.0);
  }
}

TEST_CASE("softmax sums to one with entries strictly inside (0,1)") {
  Rng rng(7);
  for (int it = 0; it < 200; ++it) {
    int n = 2 + static_cast<int>(rng.uniform_int(6));
    Tensor x = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) x[i] = rng.uniform(-60.0, 60.0);
    Tape t;
    const Tensor& y = t.value(softmax(t.constant(x)));
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      CHECK(y[i] > 0.0);
      CHECK(y[i] < 1.0);
      sum += y[i];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("gradient of x dot x") {
  ParameterSet params;
  params.add("x", Tensor::from_values({3.0}));
  Tape t;
  Var x = t.leaf(params.at("x"));
  GradientMap g = t.gradients(dot(x, x));
  CHECK(g.at("x")[0] == doctest::Approx(6.0));
}

TEST_CASE("relu subgradient at negative input is zero") {
  ParameterSet params;
  params.add("x", Tensor::from_values({-1.0}));
  Tape t;
  Var y = relu(t.leaf(params.at("x")));
  GradientMap g = t.gradients(dot(y, y));
  CHECK(g.at("x")[0] == 0.0);
  // And the constrained convention at exactly zero.
  ParameterSet at_zero;
  at_zero.add("x", Tensor::from_values({0.0}));
  Tape t2;
  Var y2 = relu(t2.leaf(at_zero.at("x")));
  Tape t3;
  GradientMap g2 = t2.gradients(dot(y2, t2.constant(Tensor::from_values({1.0}))));
  CHECK(g2.at("x")[0] == 0.0);
}

TEST_CASE("cross entropy with softmax gives p minus one-hot") {
  // loss = -log(softmax(z))[0] with z = [1, 0]; d/dz = softmax(z) - y.
  ParameterSet params;
  params.add("z", Tensor::from_values({1.0, 0.0}));
  LossBuilder f = [](Tape& t, const ParameterSet& ps) {
    Var p = softmax(t.leaf(ps.at("z")));
    Var y = t.constant(Tensor::from_values({1.0, 0.0}));
    return scale(dot(y, log(p)), -1.0);
  };
  Tape t;
  GradientMap g = t.gradients(f(t, params));
  CHECK(g.at("z")[0] == doctest::Approx(-0.2689).epsilon(1e-3));
  CHECK(g.at("z")[1] == doctest::Approx(0.2689).epsilon(1e-3));
  check_against_central_difference(f, params);
}

TEST_CASE("gradients include zero tensors for unreachable parameters") {
  ParameterSet params;
  params.add("used", Tensor::from_values({2.0}));
  params.add("unused", Tensor::from_values({1.0, 1.0}));
  Tape t;
  Var x = t.leaf(params.at("used"));
  t.leaf(params.at("unused"));
  GradientMap g = t.gradients(dot(x, x));
  CHECK(g.at("used")[0] == doctest::Approx(4.0));
  REQUIRE(g.count("unused") == 1);
  CHECK(g.at("unused")[0] == 0.0);
  CHECK(g.at("unused")[1] == 0.0);
}

TEST_CASE("gradients rejects foreign and non-scalar outputs") {
  Tape a;
  Tape b;
  Var av = a.constant(Tensor::scalar(1.0));
  CHECK_THROWS_AS(b.gradients(av), UsageError);
  Var vec = a.constant(Tensor::from_values({1.0, 2.0}));
  CHECK_THROWS_AS(a.gradients(vec), UsageError);
}

TEST_CASE("shape mismatch errors name the primitive") {
  Tape t;
  Var a = t.constant(Tensor::from_values({1, 2, 3}));
  Var b = t.constant(Tensor::from_values({1, 2}));
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), UsageError);
  CHECK_THROWS_WITH_AS(dot(a, b), doctest::Contains("dot"), UsageError);
  Tensor m = Tensor::zeros({2, 2});
  CHECK_THROWS_WITH_AS(matmul(t.constant(m), a), doctest::Contains("matmul"), UsageError);
}

TEST_CASE("log rejects non-positive input") {
  Tape t;
  CHECK_THROWS_AS(log(t.constant(Tensor::from_values({1.0, 0.0}))), UsageError);
  CHECK_THROWS_AS(log(t.constant(Tensor::from_values({-1.0}))), UsageError);
}

TEST_CASE("linearity of gradients") {
  Rng rng(23);
  for (int it = 0; it < 20; ++it) {
    ParameterSet params;
    params.add("x", random_tensor(rng, {4}));
    Tensor c1 = random_tensor(rng, {4});
    Tensor c2 = random_tensor(rng, {4});
    const double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-2.0, 2.0);

    auto f = [&](Tape& t, const ParameterSet& ps) { return dot(t.leaf(ps.at("x")), t.constant(c1)); };
    auto g = [&](Tape& t, const ParameterSet& ps) {
      Var x = t.leaf(ps.at("x"));
      return dot(mul(x, x), t.constant(c2));
    };
    Tape tf, tg, tc;
    GradientMap gf = tf.gradients(f(tf, params));
    GradientMap gg = tg.gradients(g(tg, params));
    GradientMap gc = tc.gradients(add(scale(f(tc, params), a), scale(g(tc, params), b)));
    for (Eigen::Index i = 0; i < 4; ++i)
      CHECK(gc.at("x")[i] ==
            doctest::Approx(a * gf.at("x")[i] + b * gg.at("x")[i]).epsilon(1e-12));
  }
}

TEST_CASE("every primitive matches central differences on random tensors") {
  Rng rng(101);
  auto reduce = [](Tape& t, Var v) {
    // Reduce any output to a scalar through a fixed positive weighting so the
    // check exercises the primitive's full output surface.
    const Tensor& val = t.value(v);
    if (val.is_scalar()) return v;
    Var reduced = v;
    if (val.rank() == 2) reduced = mean_rows(v);
    const Tensor& fv = t.value(reduced);
    Tensor w = Tensor::zeros(fv.shape());
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
    return dot(reduced, t.constant(w));
  };

  for (int it = 0; it < 8; ++it) {
    const int m = 2 + static_cast<int>(rng.uniform_int(4));
    const int k = 2 + static_cast<int>(rng.uniform_int(4));
    const int n = 2 + static_cast<int>(rng.uniform_int(4));

    SUBCASE("") {}  // keep loop structure flat; every primitive checked per iteration

    {
      ParameterSet ps;
      ps.add("a", random_tensor(rng, {m, k}));
      ps.add("b", random_tensor(rng, {k, n}));
      check_against_central_difference(
          [&](Tape& t, const ParameterSet& p) {
            return reduce(t, matmul(t.leaf(p.at("a")), t.leaf(p.at("b"))));
          },
          ps);
    }
    {
      ParameterSet ps;
      ps.add("a", random_tensor(rng, {m, k}));
      ps.add("x", random_tensor(rng, {k}));
      check_against_central_difference(
          [&](Tape& t, const ParameterSet& p) {
            return reduce(t, matmul(t.leaf(p.at("a")), t.leaf(p.at("x"))));
          },
          ps);
    }
    {
      ParameterSet ps;
      ps.add("a", random_tensor(rng, {n}));
      ps.add("b", random_tensor(rng, {n}));
      for (const char* kind : {"add", "mul", "dot", "sqdist", "concat"}) {
        check_against_central_difference(
            [&](Tape& t, const ParameterSet& p) {
              Var a = t.leaf(p.at("a")), b = t.leaf(p.at("b"));
              if (kind == std::string("add")) return reduce(t, add(a, b));
              if (kind == std::string("mul")) return reduce(t, mul(a, b));
              if (kind == std::string("dot")) return dot(a, b);
              if (kind == std::string("sqdist")) return squared_euclidean_distance(a, b);
              std::vector<Var> parts{a, b};
              return reduce(t, concat(parts));
            },
            ps);
      }
      check_against_central_difference(
          [&](Tape& t, const ParameterSet& p) {
            return euclidean_distance(t.leaf(p.at("a")), t.leaf(p.at("b")));
          },
          ps);
    }
    {
      ParameterSet ps;
      ps.add("x", random_tensor(rng, {n}));
      for (const char* kind : {"relu", "sigmoid", "tanh", "exp", "softmax", "scale", "slice"}) {
        check_against_central_difference(
            [&](Tape& t, const ParameterSet& p) {
              Var x = t.leaf(p.at("x"));
              if (kind == std::string("relu")) return reduce(t, relu(x));
              if (kind == std::string("sigmoid")) return reduce(t, sigmoid(x));
              if (kind == std::string("tanh")) return reduce(t, tanh(x));
              if (kind == std::string("exp")) return reduce(t, exp(x));
              if (kind == std::string("softmax")) return reduce(t, softmax(x));
              if (kind == std::string("scale")) return reduce(t, scale(x, -1.7));
              return reduce(t, slice(x, 1, n - 1));
            },
            ps);
      }
    }
    {
      // log needs positive inputs
      ParameterSet ps;
      Tensor x = random_tensor(rng, {n});
      x.arr() = x.arr().abs() + 0.5;
      ps.add("x", x);
      check_against_central_difference(
          [&](Tape& t, const ParameterSet& p) { return reduce(t, log(t.leaf(p.at("x")))); }, ps);
      check_against_central_difference(
          [&](Tape& t, const ParameterSet& p) {
            return reduce(t, log_floor(t.leaf(p.at("x")), 1e-12));
          },
          ps);
    }
    {
      ParameterSet ps;
      ps.add("m", random_tensor(rng, {m, k}));
      check_against_central_difference(
          [&](Tape& t, const ParameterSet& p) { return reduce(t, mean_rows(t.leaf(p.at("m")))); },
          ps);
      check_against_central_difference(
          [&](Tape& t, const ParameterSet& p) { return reduce(t, row(t.leaf(p.at("m")), 1)); }, ps);
    }
    {
      ParameterSet ps;
      ps.add("r0", random_tensor(rng, {k}));
      ps.add("r1", random_tensor(rng, {k}));
      ps.add("r2", random_tensor(rng, {k}));
      check_against_central_difference(
          [&](Tape& t, const ParameterSet& p) {
            std::vector<Var> rows{t.leaf(p.at("r0")), t.leaf(p.at("r1")), t.leaf(p.at("r2"))};
            return reduce(t, stack_rows(rows));
          },
          ps);
    }
  }
}

TEST_CASE("batchnorm matches central differences in both modes") {
  Rng rng(55);
  const int width = 4, bsize = 3;
  ParameterSet ps;
  for (int i = 0; i < bsize; ++i) ps.add("x" + std::to_string(i), random_tensor(rng, {width}));
  Tensor gamma = random_tensor(rng, {width});
  gamma.arr() += 1.5;  // keep away from zero
  ps.add("gamma", gamma);
  ps.add("beta", random_tensor(rng, {width}));
  Tensor rm = random_tensor(rng, {width});
  Tensor rv = random_tensor(rng, {width});
  rv.arr() = rv.arr().abs() + 0.7;

  for (BatchNormMode mode : {BatchNormMode::train, BatchNormMode::infer}) {
    check_against_central_difference(
        [&](Tape& t, const ParameterSet& p) {
          std::vector<Var> batch;
          for (int i = 0; i < bsize; ++i) batch.push_back(t.leaf(p.at("x" + std::to_string(i))));
          Var out = batchnorm(batch, t.leaf(p.at("gamma")), t.leaf(p.at("beta")), mode, &rm, &rv);
          Tensor w = Tensor::zeros({width});
          for (int i = 0; i < width; ++i) w[i] = 0.25 * (i + 1);
          return dot(mean_rows(out), t.constant(w));
        },
        ps, 2e-4);
  }
}

TEST_CASE("batchnorm train statistics and degenerate batch guard") {
  Tape t;
  std::vector<Var> batch{t.constant(Tensor::from_values({1.0, 10.0})),
                         t.constant(Tensor::from_values({3.0, 14.0}))};
  Var gamma = t.constant(Tensor::from_values({1.0, 1.0}));
  Var beta = t.constant(Tensor::from_values({0.0, 0.0}));
  BatchStats stats;
  Var out = batchnorm(batch, gamma, beta, BatchNormMode::train, nullptr, nullptr, &stats);
  CHECK(stats.mean[0] == doctest::Approx(2.0));
  CHECK(stats.mean[1] == doctest::Approx(12.0));
  CHECK(stats.variance[0] == doctest::Approx(1.0));
  CHECK(stats.variance[1] == doctest::Approx(4.0));
  // normalized output has zero column means
  const Tensor& y = t.value(out);
  CHECK(y.mat().col(0).mean() == doctest::Approx(0.0).epsilon(1e-12));

  std::vector<Var> single{batch[0]};
  CHECK_THROWS_WITH_AS(batchnorm(single, gamma, beta, BatchNormMode::train),
                       doctest::Contains("degenerate"), UsageError);
}

TEST_CASE("finite_difference_check on sum of squares and constants") {
  ParameterSet ps;
  ps.add("v", Tensor::from_values({1.0, 2.0}));
  LossBuilder sum_sq = [](Tape& t, const ParameterSet& p) {
    Var v = t.leaf(p.at("v"));
    return dot(v, v);
  };
  GradCheckReport r = finite_difference_check(sum_sq, ps, 1e-4, 1e-4);
  CHECK(r.pass);
  CHECK(r.per_parameter.size() == 1);

  LossBuilder constant = [](Tape& t, const ParameterSet& p) {
    t.leaf(p.at("v"));
    return t.constant(Tensor::scalar(3.25));
  };
  GradCheckReport rc = finite_difference_check(constant, ps, 1e-4, 1e-4);
  CHECK(rc.pass);
  CHECK(rc.max_rel_error == 0.0);
}

TEST_CASE("finite_difference_check flags corrupted gradients by group") {
  ParameterSet ps;
  ps.add("enc.w", Tensor::from_values({0.5, -0.5}));
  ps.add("head.w", Tensor::from_values({0.25}));
  LossBuilder f = [](Tape& t, const ParameterSet& p) {
    Var a = t.leaf(p.at("enc.w"));
    Var b = t.leaf(p.at("head.w"));
    return add(dot(a, a), dot(b, b));
  };
  CHECK(finite_difference_check(f, ps, 1e-4, 1e-4).pass);
  GradCheckReport bad = finite_difference_check(f, ps, 1e-4, 1e-4, "enc.");
  CHECK_FALSE(bad.pass);
  CHECK(bad.worst_param == "enc.w");
}

TEST_CASE("finite_difference_check rejects non-deterministic losses") {
  ParameterSet ps;
  ps.add("v", Tensor::from_values({1.0}));
  int calls = 0;
  LossBuilder f = [&calls](Tape& t, const ParameterSet& p) {
    t.leaf(p.at("v"));
    return t.constant(Tensor::scalar(static_cast<double>(++calls)));
  };
  CHECK_THROWS_WITH_AS(finite_difference_check(f, ps, 1e-4, 1e-4),
                       doctest::Contains("deterministic"), UsageError);
}

TEST_SUITE_END();
