#include "mam/mamba.hpp"
#include "test_helpers.hpp"

using namespace mam;
using mamtest::fd_check_params;
using mamtest::max_abs_diff;
using Catch::Approx;

namespace {
constexpr Discretization kBoth[] = {Discretization::Euler, Discretization::Zoh};
}

TEST_CASE("causal conv: identity and shift kernels", "[blocks]") {
  Tensor x = Tensor::from({4, 1}, {1, 2, 3, 4});
  Tensor zero_bias = Tensor::zeros({1});

  Tensor ident = Tensor::from({1, 1}, {1.0});
  Tensor y = causal_conv1d(x, ident, zero_bias);
  REQUIRE(max_abs_diff(y, x) == 0.0);

  // current-tap zero, previous-tap one: output is the input shifted right
  Tensor shift = Tensor::from({1, 2}, {0.0, 1.0});
  Tensor ys = causal_conv1d(x, shift, zero_bias);
  REQUIRE(ys[0] == 0.0);  // zero left padding
  REQUIRE(ys[1] == 1.0);
  REQUIRE(ys[2] == 2.0);
  REQUIRE(ys[3] == 3.0);

  REQUIRE_THROWS_AS(causal_conv1d(x, Tensor::zeros({2, 2}), zero_bias), std::invalid_argument);
}

TEST_CASE("tape and plain module forwards agree", "[blocks]") {
  Rng rng(101);
  for (Discretization disc : kBoth) {
    MambaBlockParams p = init_mamba_block(rng, 6, 4, 3, 4);
    Tensor x = rand_normal<double>(rng, {7, 6});

    Tensor plain = mamba_block_plain(p, x, disc);
    ParamIndex ix = index_params(p);
    Tape t;
    Binder bind(t, ix.pid_of);
    Ref y = mamba_block_tape(t, bind, p, t.constant(x), disc);
    REQUIRE(max_abs_diff(plain, t.val(y)) < 1e-12);

    Tensor plain_bi = bimamba_block_plain(p, x, disc);
    Tape t2;
    Binder bind2(t2, ix.pid_of);
    Ref y2 = bimamba_block_tape(t2, bind2, p, t2.constant(x), disc);
    REQUIRE(max_abs_diff(plain_bi, t2.val(y2)) < 1e-12);

    MambaBlockParams pc = init_mamba_block(rng, 6, 4, 3, 4, /*src_dim=*/5);
    Tensor src = rand_normal<double>(rng, {7, 5});
    Tensor plain_cross = crossmamba_block_plain(pc, x, src, disc);
    ParamIndex ixc = index_params(pc);
    Tape t3;
    Binder bind3(t3, ixc.pid_of);
    Ref y3 = crossmamba_block_tape(t3, bind3, pc, t3.constant(x), t3.constant(src), disc);
    REQUIRE(max_abs_diff(plain_cross, t3.val(y3)) < 1e-12);
  }
}

TEST_CASE("vanilla block is causal", "[blocks][prop]") {
  Rng rng(103);
  for (int trial = 0; trial < 10; ++trial) {
    const int n_tok = 3 + rng.randint(6), d = 2 + rng.randint(5);
    MambaBlockParams p = init_mamba_block(rng, d, 1 + rng.randint(4), 2, 4);
    Tensor x = rand_normal<double>(rng, {n_tok, d});
    Tensor y0 = mamba_block_plain(p, x, Discretization::Euler);

    const int j = 1 + rng.randint(n_tok - 1);
    Tensor x2 = x;
    for (int k = 0; k < d; ++k) x2.at(j, k) += 1.0 + rng.uniform();
    Tensor y1 = mamba_block_plain(p, x2, Discretization::Euler);

    for (int t = 0; t < j; ++t)
      for (int k = 0; k < d; ++k) REQUIRE(y0.at(t, k) == y1.at(t, k));
    // and the perturbation does reach position j
    double moved = 0;
    for (int k = 0; k < d; ++k) moved += std::abs(y0.at(j, k) - y1.at(j, k));
    REQUIRE(moved > 0.0);
  }
}

TEST_CASE("bi-directional block sees both directions and commutes with flip", "[blocks][prop]") {
  Rng rng(107);
  for (int trial = 0; trial < 10; ++trial) {
    const int n_tok = 3 + rng.randint(5), d = 2 + rng.randint(4);
    MambaBlockParams p = init_mamba_block(rng, d, 3, 2, 4);
    Tensor x = rand_normal<double>(rng, {n_tok, d});

    // flip equivariance with shared weights
    Tensor a = bimamba_block_plain(p, flip_rows(x), Discretization::Euler);
    Tensor b = flip_rows(bimamba_block_plain(p, x, Discretization::Euler));
    REQUIRE(max_abs_diff(a, b) < 1e-12);

    // a late-token perturbation reaches the first output; must vary across
    // coordinates, a constant row shift is invisible to the pre-norm
    Tensor x2 = x;
    for (int k = 0; k < d; ++k) x2.at(n_tok - 1, k) += 1.0 + rng.uniform();
    Tensor y0 = bimamba_block_plain(p, x, Discretization::Euler);
    Tensor y1 = bimamba_block_plain(p, x2, Discretization::Euler);
    double moved = 0;
    for (int k = 0; k < d; ++k) moved += std::abs(y0.at(0, k) - y1.at(0, k));
    REQUIRE(moved > 0.0);
  }
}

TEST_CASE("cross block: source enters only through the output map", "[blocks][prop]") {
  Rng rng(109);
  for (int trial = 0; trial < 10; ++trial) {
    const int n_tok = 3 + rng.randint(5), d = 2 + rng.randint(4), ds = 2 + rng.randint(4);
    MambaBlockParams p = init_mamba_block(rng, d, 3, 2, 4, ds);
    Tensor x = rand_normal<double>(rng, {n_tok, d});
    Tensor src = rand_normal<double>(rng, {n_tok, ds});
    Tensor y0 = crossmamba_block_plain(p, x, src, Discretization::Euler);

    // perturbing source token j moves output j and nothing else
    const int j = rng.randint(n_tok);
    Tensor src2 = src;
    for (int k = 0; k < ds; ++k) src2.at(j, k) += 1.0 + rng.uniform();
    Tensor y1 = crossmamba_block_plain(p, x, src2, Discretization::Euler);
    for (int t = 0; t < n_tok; ++t)
      for (int k = 0; k < d; ++k) {
        if (t == j) continue;
        REQUIRE(y0.at(t, k) == y1.at(t, k));
      }

    // target side stays causal
    const int jt = 1 + rng.randint(n_tok - 1);
    Tensor x2 = x;
    for (int k = 0; k < d; ++k) x2.at(jt, k) += 1.0;
    Tensor y2 = crossmamba_block_plain(p, x2, src, Discretization::Euler);
    for (int t = 0; t < jt; ++t)
      for (int k = 0; k < d; ++k) REQUIRE(y0.at(t, k) == y2.at(t, k));
  }
}

TEST_CASE("streaming step reproduces the full-sequence forward", "[blocks]") {
  Rng rng(113);
  for (Discretization disc : kBoth) {
    const int n_tok = 9, d = 5, ds = 4;
    MambaBlockParams p = init_mamba_block(rng, d, 3, 2, 4);
    Tensor x = rand_normal<double>(rng, {n_tok, d});
    Tensor full = mamba_block_plain(p, x, disc);

    MambaStream st;
    st.reset(p.m);
    for (int t = 0; t < n_tok; ++t) {
      std::vector<double> y = mamba_block_step(p, st, &x.at(t, 0), disc);
      for (int k = 0; k < d; ++k) REQUIRE(y[k] == Approx(full.at(t, k)).margin(1e-12));
    }

    MambaBlockParams pc = init_mamba_block(rng, d, 3, 2, 4, ds);
    Tensor src = rand_normal<double>(rng, {n_tok, ds});
    Tensor full_c = crossmamba_block_plain(pc, x, src, disc);
    MambaStream stc;
    stc.reset(pc.m);
    for (int t = 0; t < n_tok; ++t) {
      std::vector<double> y = mamba_block_step(pc, stc, &x.at(t, 0), disc, &src.at(t, 0));
      for (int k = 0; k < d; ++k) REQUIRE(y[k] == Approx(full_c.at(t, k)).margin(1e-12));
    }
  }
}

TEST_CASE("block gradients pass finite-difference checks", "[blocks][grad]") {
  Rng rng(127);
  for (Discretization disc : kBoth) {
    const int n_tok = 5, d = 4, ds = 3;
    Tensor x = rand_normal<double>(rng, {n_tok, d});
    Tensor src = rand_normal<double>(rng, {n_tok, ds});

    MambaBlockParams p = init_mamba_block(rng, d, 3, 2, 4);
    double e1 = fd_check_params(
        p,
        [&](Tape& t, Binder& bind) {
          Ref y = mamba_block_tape(t, bind, p, t.constant(x), disc);
          return t.sum(t.mul(y, y));
        },
        60, rng);
    REQUIRE(e1 <= 1e-4);

    double e2 = fd_check_params(
        p,
        [&](Tape& t, Binder& bind) {
          Ref y = bimamba_block_tape(t, bind, p, t.constant(x), disc);
          return t.sum(t.mul(y, y));
        },
        60, rng);
    REQUIRE(e2 <= 1e-4);

    MambaBlockParams pc = init_mamba_block(rng, d, 3, 2, 4, ds);
    double e3 = fd_check_params(
        pc,
        [&](Tape& t, Binder& bind) {
          Ref y = crossmamba_block_tape(t, bind, pc, t.constant(x), t.constant(src), disc);
          return t.sum(t.mul(y, y));
        },
        60, rng);
    REQUIRE(e3 <= 1e-4);
  }
}

TEST_CASE("module init rejects bad dimensions", "[blocks]") {
  Rng rng(1);
  REQUIRE_THROWS_AS(init_mamba_module(rng, 0, 4, 2, 4), std::invalid_argument);
  REQUIRE_THROWS_AS(init_mamba_module(rng, 4, -1, 2, 4), std::invalid_argument);
}
