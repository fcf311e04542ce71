#include "test_helpers.hpp"

using namespace mam;
using mamtest::fd_check;
using Catch::Approx;

TEST_CASE("tensor construction and shape checks", "[numerics]") {
  Tensor t({2, 3});
  REQUIRE(t.numel() == 6);
  REQUIRE(t.rows() == 2);
  REQUIRE(t.cols() == 3);
  for (long long i = 0; i < t.numel(); ++i) REQUIRE(t[i] == 0.0);

  REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
  REQUIRE_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("pointwise activations match frozen values", "[numerics]") {
  Tensor x = Tensor::from({5}, {0.0, 1.0, -1.0, 0.5, 50.0});

  Tensor sp = pointwise("softplus", x);
  REQUIRE(sp[0] == Approx(0.6931471805599453).epsilon(1e-12));
  REQUIRE(sp[3] == Approx(0.9740769841801067).epsilon(1e-12));
  REQUIRE(sp[4] == Approx(50.0).margin(1e-12));  // stable branch, no overflow

  Tensor si = pointwise("silu", x);
  REQUIRE(si[0] == 0.0);
  REQUIRE(si[1] == Approx(0.7310585786300049).epsilon(1e-12));
  REQUIRE(si[2] == Approx(-0.2689414213699951).epsilon(1e-12));

  Tensor th = pointwise("tanh", x);
  REQUIRE(th[3] == Approx(0.46211715726000974).epsilon(1e-12));

  Tensor ex = pointwise("exp", x);
  REQUIRE(ex[1] == Approx(2.718281828459045).epsilon(1e-12));

  Tensor big = Tensor::from({1}, {1000.0});
  Tensor spb = pointwise(Act::Softplus, big);
  REQUIRE(std::isfinite(spb[0]));
  REQUIRE(spb[0] == Approx(1000.0).margin(1e-9));

  REQUIRE_THROWS_AS(pointwise("relu", x), std::invalid_argument);
}

TEST_CASE("layer_norm matches hand-computed case", "[numerics]") {
  Tensor x = Tensor::from({1, 3}, {1, 2, 3});
  Tensor g = Tensor::ones({3});
  Tensor b = Tensor::zeros({3});
  Tensor y = layer_norm(x, g, b);
  REQUIRE(y[0] == Approx(-1.2247356859083902).epsilon(1e-12));
  REQUIRE(y[1] == Approx(0.0).margin(1e-12));
  REQUIRE(y[2] == Approx(1.2247356859083902).epsilon(1e-12));

  Tensor g2 = Tensor::from({3}, {2, 2, 2});
  Tensor b2 = Tensor::from({3}, {1, 1, 1});
  Tensor y2 = layer_norm(x, g2, b2);
  REQUIRE(y2[0] == Approx(1.0 - 2 * 1.2247356859083902).epsilon(1e-12));
}

TEST_CASE("layer_norm output is standardized before the affine map", "[numerics][prop]") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int rows = 1 + rng.randint(4), d = 2 + rng.randint(16);
    Tensor x = rand_normal<double>(rng, {rows, d}, 3.0);
    Tensor y = layer_norm(x, Tensor::ones({d}), Tensor::zeros({d}));
    for (int i = 0; i < rows; ++i) {
      double mu = 0, var = 0;
      for (int j = 0; j < d; ++j) mu += y.at(i, j);
      mu /= d;
      for (int j = 0; j < d; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
      var /= d;
      REQUIRE(mu == Approx(0.0).margin(1e-10));
      REQUIRE(var == Approx(1.0).epsilon(1e-3));  // eps in denominator shrinks it slightly
    }
  }
}

TEST_CASE("finite difference gradient of sum of squares", "[numerics]") {
  Tensor x = Tensor::from({2}, {1, 2});
  auto f = [&]() { return x[0] * x[0] + x[1] * x[1]; };
  REQUIRE(finite_difference_gradient(f, x[0]) == Approx(2.0).epsilon(1e-8));
  REQUIRE(finite_difference_gradient(f, x[1]) == Approx(4.0).epsilon(1e-8));
}

TEST_CASE("backward reproduces frozen matmul+silu oracle", "[numerics]") {
  Tensor a = Tensor::from({2, 3}, {0.5, -1.0, 2.0, 1.5, 0.25, -0.75});
  Tensor b = Tensor::from({3, 2}, {1.0, -0.5, 0.25, 2.0, -1.25, 0.75});
  Tensor m = Tensor::from({2, 2}, {1.0, 2.0, -1.0, 0.5});

  Tape t;
  Ref ra = t.leaf(a, 0);
  Ref rb = t.leaf(b, 1);
  Ref loss = t.sum(t.mul(t.pointwise(Act::Silu, t.matmul(ra, rb)), t.constant(m)));
  REQUIRE(t.val(loss)[0] == Approx(-3.130986991558312).epsilon(1e-12));
  t.backward(loss);

  const Tensor da_want = Tensor::from(
      {2, 3}, {-0.2561309655999037, 0.6049174944888217, 0.35951372087569133,
               -1.132997523958766, -0.1404646273664246, 1.4246460081027672});
  const Tensor db_want = Tensor::from(
      {3, 2}, {-1.6984671220606187, 0.2581892933549643, -0.17611936773872444,
               -0.2980019046978734, 0.6270890133128306, 0.5792056030871271});
  REQUIRE(mamtest::max_abs_diff(t.param_grads().at(0), da_want) < 1e-12);
  REQUIRE(mamtest::max_abs_diff(t.param_grads().at(1), db_want) < 1e-12);
}

TEST_CASE("backward contract: zero grads off-path, scalar loss required", "[numerics]") {
  Tape t;
  Ref a = t.leaf(Tensor::from({2}, {1, 2}), 0);
  Ref unused = t.leaf(Tensor::from({2}, {5, 5}), 1);
  Ref loss = t.sum(t.mul(a, a));
  t.backward(loss);
  REQUIRE(t.param_grads().at(0)[0] == Approx(2.0));
  const Tensor& gu = t.param_grads().at(1);
  REQUIRE(gu[0] == 0.0);
  REQUIRE(gu[1] == 0.0);
  REQUIRE(gu.numel() == t.val(unused).numel());

  Tape t2;
  Ref v = t2.leaf(Tensor::from({3}, {1, 2, 3}), 0);
  REQUIRE_THROWS_AS(t2.backward(v), std::invalid_argument);
}

TEST_CASE("softmax rows: normalization and causal mask", "[numerics][prop]") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const int r = 1 + rng.randint(6), c = 1 + rng.randint(6);
    Tensor x = rand_normal<double>(rng, {r, c}, 2.0);
    Tape t;
    Ref p = t.softmax_rows(t.constant(x), false);
    Ref pc = t.softmax_rows(t.constant(x), true);
    for (int i = 0; i < r; ++i) {
      double s = 0, sc = 0;
      for (int j = 0; j < c; ++j) {
        s += t.val(p).at(i, j);
        sc += t.val(pc).at(i, j);
        if (j > i) REQUIRE(t.val(pc).at(i, j) == 0.0);
      }
      REQUIRE(s == Approx(1.0).epsilon(1e-12));
      REQUIRE(sc == Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("every tape op passes finite-difference checks", "[numerics][grad]") {
  Rng rng(1234);
  auto randt = [&](Shape s, double sd = 1.0) { return rand_normal<double>(rng, std::move(s), sd); };

  SECTION("elementwise and bias") {
    for (int trial = 0; trial < 10; ++trial) {
      const int r = 1 + rng.randint(4), c = 1 + rng.randint(5);
      std::vector<Tensor> xs = {randt({r, c}), randt({r, c}), randt({c})};
      fd_check(xs, [](Tape& t, std::vector<Ref>& v) {
        Ref y = t.add_bias(t.add(t.mul(v[0], v[1]), t.sub(v[0], v[1])), v[2]);
        return t.sum(t.mul(y, y));
      });
    }
  }

  SECTION("matmul and matmul_bt") {
    for (int trial = 0; trial < 10; ++trial) {
      const int m = 1 + rng.randint(4), k = 1 + rng.randint(4), p = 1 + rng.randint(4);
      std::vector<Tensor> xs = {randt({m, k}), randt({k, p}), randt({p, k})};
      fd_check(xs, [](Tape& t, std::vector<Ref>& v) {
        return t.sum(t.add(t.matmul(v[0], v[1]), t.matmul_bt(v[0], v[2])));
      });
    }
  }

  SECTION("pointwise activations and gelu") {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor> xs = {randt({3, 4})};
      for (Act a : {Act::Silu, Act::Softplus, Act::Exp, Act::Tanh}) {
        fd_check(xs, [a](Tape& t, std::vector<Ref>& v) {
          return t.mean(t.mul(t.pointwise(a, v[0]), v[0]));
        });
      }
      fd_check(xs, [](Tape& t, std::vector<Ref>& v) { return t.sum(t.gelu(v[0])); });
    }
  }

  SECTION("layer_norm") {
    for (int trial = 0; trial < 10; ++trial) {
      const int r = 1 + rng.randint(3), d = 2 + rng.randint(6);
      std::vector<Tensor> xs = {randt({r, d}, 2.0), randt({d}), randt({d})};
      fd_check(xs, [](Tape& t, std::vector<Ref>& v) {
        Ref y = t.layer_norm(v[0], v[1], v[2]);
        return t.sum(t.mul(y, y));
      }, 5e-6);
    }
  }

  SECTION("softmax and log-softmax") {
    for (int trial = 0; trial < 10; ++trial) {
      const int r = 2 + rng.randint(3), c = 2 + rng.randint(4);
      std::vector<Tensor> xs = {randt({r, c}), randt({r, c})};
      fd_check(xs, [](Tape& t, std::vector<Ref>& v) {
        return t.sum(t.mul(t.softmax_rows(v[0], false), v[1]));
      });
      fd_check(xs, [](Tape& t, std::vector<Ref>& v) {
        return t.sum(t.mul(t.softmax_rows(v[0], true), v[1]));
      });
      fd_check(xs, [](Tape& t, std::vector<Ref>& v) {
        return t.sum(t.mul(t.log_softmax_rows(v[0]), v[1]));
      });
    }
  }

  SECTION("reductions, gather, slice, concat, flip, reshape") {
    for (int trial = 0; trial < 10; ++trial) {
      const int r = 2 + rng.randint(3), c = 2 + rng.randint(3);
      std::vector<int> take(static_cast<size_t>(r));
      for (auto& i : take) i = rng.randint(c);
      std::vector<int> gather = {rng.randint(r), rng.randint(r), rng.randint(r)};
      std::vector<Tensor> xs = {randt({r, c}), randt({r, c})};
      fd_check(xs, [&](Tape& t, std::vector<Ref>& v) {
        Ref cat = t.concat_rows(t.slice_rows(v[0], 0, r - 1), t.flip_rows(v[1]));
        Ref g = t.gather_rows(cat, gather);
        Ref tk = t.take_per_row(v[0], take);
        Ref flat = t.reshape(g, {3 * c});
        Ref rowdot = t.mean(t.mul(t.row_sum(v[1]), t.row_sum(v[0])));
        return t.add(t.add(t.mean(flat), t.sum(tk)), rowdot);
      });
    }
  }

  SECTION("minimum and clip away from kinks") {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor> xs = {randt({4, 3}), randt({4, 3})};
      // nudge values off the clip boundary and off ties so FD stays two-sided
      for (auto& t : xs)
        for (long long i = 0; i < t.numel(); ++i) {
          if (std::abs(std::abs(t[i]) - 0.9) < 1e-3) t[i] += 5e-3;
        }
      for (long long i = 0; i < xs[0].numel(); ++i)
        if (std::abs(xs[0][i] - xs[1][i]) < 1e-3) xs[0][i] += 5e-3;
      fd_check(xs, [](Tape& t, std::vector<Ref>& v) {
        return t.sum(t.add(t.minimum(v[0], v[1]), t.clip(v[0], -0.9, 0.9)));
      });
    }
  }
}
