#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "metadet/checkpoint.hpp"
#include "metadet/optim.hpp"
#include "metadet/tape.hpp"
#include "test_helpers.hpp"

using namespace metadet;
using testutil::check_graph;
using testutil::random_tensor;

namespace {

// Independent conv oracle: direct summation per output element, written
// against the accessor API rather than the tape's pointer arithmetic.
DTensor conv2d_oracle(const DTensor& x, const DTensor& w, const DTensor& b, int stride, int pad) {
  const int H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
  const int K = w.dim(0), Cout = w.dim(3);
  const int Ho = (H + 2 * pad - K) / stride + 1;
  const int Wo = (W + 2 * pad - K) / stride + 1;
  DTensor out({Ho, Wo, Cout});
  auto wat = [&](int kh, int kw, int ci, int co) {
    return w.data[size_t(((int64_t(kh) * K + kw) * Cin + ci) * Cout + co)];
  };
  for (int co = 0; co < Cout; ++co)
    for (int ho = 0; ho < Ho; ++ho)
      for (int wo = 0; wo < Wo; ++wo) {
        double acc = b[co];
        for (int kh = 0; kh < K; ++kh)
          for (int kw = 0; kw < K; ++kw)
            for (int ci = 0; ci < Cin; ++ci) {
              const int hi = ho * stride - pad + kh;
              const int wi = wo * stride - pad + kw;
              if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
              acc += x.at3(hi, wi, ci) * wat(kh, kw, ci, co);
            }
        out.at3(ho, wo, co) = acc;
      }
  return out;
}

// Weighted sum with weights that depend only on the output size: the graph
// builder is re-run for every finite-difference probe, so anything inside it
// must be a pure function of the parameters.
DVar scalarize(DTape& tape, DVar v) {
  const DTensor& val = tape.val(v);
  int n = int(val.size());
  DVar flat = val.ndim() == 1 ? v : tape.reshape(v, {n});
  Rng wrng(uint64_t(n) * 1315423911ull + 7);
  DTensor w({n, 1});
  for (int i = 0; i < n; ++i) w[i] = wrng.uniform(-1.0, 1.0);
  return tape.linear(flat, tape.input(std::move(w)), tape.input(DTensor::zeros({1})));
}

}  // namespace

TEST_CASE("tensor layout is row-major channel-last") {
  Tensor t({2, 3, 4});
  t.at3(1, 2, 3) = 7.0f;
  CHECK(t.data[(1 * 3 + 2) * 4 + 3] == 7.0f);
  CHECK_THROWS_AS(Tensor({2, 0, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor(std::vector<int>{}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0f, 2.0f, 3.0f}), std::invalid_argument);
}

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
  Rng rng(11);
  DTensor x = random_tensor({5, 4, 3}, rng);
  DTensor w = DTensor::zeros({1, 1, 3, 3});
  for (int c = 0; c < 3; ++c) w.data[size_t(c * 3 + c)] = 1.0;
  DTape tape;
  DVar y = tape.conv2d(tape.input(x), tape.input(w), tape.input(DTensor::zeros({3})), 1, 0);
  const DTensor& out = tape.val(y);
  REQUIRE(out.shape == x.shape);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(out[i] == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("conv2d: 3x3 all-ones kernel sums the neighborhood") {
  DTensor x = DTensor::full({3, 3, 1}, 1.0);
  DTensor w = DTensor::full({3, 3, 1, 1}, 1.0);
  DTape tape;
  DVar y = tape.conv2d(tape.input(x), tape.input(w), tape.input(DTensor::zeros({1})), 1, 1);
  const DTensor& out = tape.val(y);
  // Center sees all 9 ones; corners see 4; edges see 6.
  CHECK(out.at3(1, 1, 0) == doctest::Approx(9.0));
  CHECK(out.at3(0, 0, 0) == doctest::Approx(4.0));
  CHECK(out.at3(0, 1, 0) == doctest::Approx(6.0));
}

TEST_CASE("conv2d: shape errors") {
  DTape tape;
  DVar x = tape.input(DTensor::zeros({2, 2, 3}));
  DVar w33 = tape.input(DTensor::zeros({3, 3, 3, 4}));
  DVar wbadc = tape.input(DTensor::zeros({1, 1, 2, 4}));
  DVar b = tape.input(DTensor::zeros({4}));
  // 3x3 kernel cannot fit a 2x2 input without padding.
  CHECK_THROWS_AS(tape.conv2d(x, w33, b, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(tape.conv2d(x, wbadc, b, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(tape.conv2d(x, w33, tape.input(DTensor::zeros({5})), 1, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(tape.conv2d(x, w33, b, 0, 1), std::invalid_argument);
}

TEST_CASE("conv2d matches direct-summation oracle") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    DTensor x = random_tensor({8, 8, 4}, rng);
    DTensor w = random_tensor({3, 3, 4, 5}, rng);
    DTensor b = random_tensor({5}, rng);
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 0}, std::pair{2, 1}}) {
      DTape tape;
      DVar y = tape.conv2d(tape.input(x), tape.input(w), tape.input(b), stride, pad);
      DTensor want = conv2d_oracle(x, w, b, stride, pad);
      const DTensor& got = tape.val(y);
      REQUIRE(got.shape == want.shape);
      for (int64_t i = 0; i < want.size(); ++i)
        CHECK(std::abs(got[i] - want[i]) < 1e-10);
    }
  }
}

TEST_CASE("softmax examples and properties") {
  DTape tape;
  DVar x = tape.input(DTensor({1, 2}, {std::log(2.0), 0.0}));
  const DTensor& y = tape.val(tape.softmax_axis(x, 1));
  CHECK(y[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Rng rng(3);
  DTensor m = random_tensor({6, 7}, rng, -30.0, 30.0);
  DTensor shifted = m;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 7; ++j) shifted.at2(i, j) += 13.5;  // per-call constant shift
  DTape t2;
  const DTensor& a = t2.val(t2.softmax_axis(t2.input(m), 1));
  const DTensor& b = t2.val(t2.softmax_axis(t2.input(shifted), 1));
  for (int i = 0; i < 6; ++i) {
    double rowsum = 0;
    for (int j = 0; j < 7; ++j) {
      rowsum += a.at2(i, j);
      CHECK(a.at2(i, j) == doctest::Approx(b.at2(i, j)).epsilon(1e-9));
    }
    CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("fg_mask example: rows [0, ln3] and [0, 0] give weights 4/6 and 2/6") {
  DTape tape;
  DVar a = tape.input(DTensor({2, 2}, {0.0, std::log(3.0), 0.0, 0.0}));
  const DTensor& m = tape.val(tape.fg_mask(a));
  CHECK(m[0] == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
  CHECK(m[1] == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("fg_mask is invariant to large constant shifts") {
  Rng rng(9);
  DTensor a = random_tensor({5, 5}, rng, -2.0, 2.0);
  DTensor shifted = a;
  for (int64_t i = 0; i < a.size(); ++i) shifted[i] += 500.0;  // would overflow raw exp
  DTape tape;
  const DTensor& m1 = tape.val(tape.fg_mask(tape.input(a)));
  const DTensor& m2 = tape.val(tape.fg_mask(tape.input(shifted)));
  double total = 0;
  for (int i = 0; i < 5; ++i) {
    CHECK(m1[i] == doctest::Approx(m2[i]).epsilon(1e-9));
    total += m1[i];
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("unit_rows scales each row to unit length") {
  DTape tape;
  DVar x = tape.input(DTensor({2, 2}, {3.0, 4.0, 0.0, -2.0}));
  const DTensor& y = tape.val(tape.unit_rows(x));
  CHECK(y.at2(0, 0) == doctest::Approx(0.6).epsilon(1e-9));
  CHECK(y.at2(0, 1) == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(y.at2(1, 0) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(y.at2(1, 1) == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("loss closed forms") {
  DTape tape;
  // Logit 0 has sigmoid 0.5: BCE is ln 2 regardless of the target.
  DVar z = tape.input(DTensor({4}, {0.0, 0.0, 0.0, 0.0}));
  DVar l = tape.bce_with_logits(z, DTensor({4}, {1.0, 0.0, 1.0, 0.0}));
  CHECK(tape.val(l)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Uniform logits over K classes: cross-entropy is ln K.
  DVar lg = tape.input(DTensor::zeros({3, 6}));
  DVar ce = tape.softmax_ce(lg, {0, 3, 5});
  CHECK(tape.val(ce)[0] == doctest::Approx(std::log(6.0)).epsilon(1e-12));

  // Huber at d=0.5 with beta=1 is 0.125 per coordinate.
  DVar p = tape.input(DTensor({4}, {0.5, 0.5, 0.5, 0.5}));
  DVar sl = tape.smooth_l1(p, DTensor::zeros({4}), 1.0, 1);
  CHECK(tape.val(sl)[0] == doctest::Approx(0.5).epsilon(1e-12));

  // Beyond the quadratic zone: |d| - beta/2.
  DVar p2 = tape.input(DTensor({4}, {2.0, -2.0, 2.0, -2.0}));
  DVar sl2 = tape.smooth_l1(p2, DTensor::zeros({4}), 1.0, 1);
  CHECK(tape.val(sl2)[0] == doctest::Approx(4.0 * 1.5).epsilon(1e-12));
}

TEST_CASE("per-primitive gradients match central differences") {
  // Inputs are drawn away from relu/huber kinks by construction: values near
  // 0 (or near |d|=beta) would make the two-sided difference straddle the
  // non-smooth point.
  const double tol = 1e-4;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed * 977);
    INFO("seed ", seed);

    {
      DParamMap p;
      p["x"] = random_tensor({5, 5, 3}, rng);
      p["w"] = random_tensor({3, 3, 3, 4}, rng);
      p["b"] = random_tensor({4}, rng);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.conv2d(v.at("x"), v.at("w"), v.at("b"), 2, 1));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "conv2d ", rep.worst_param, " ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["x"] = random_tensor({4, 4, 2}, rng);
      // Shift values away from zero so eps never crosses the relu kink.
      for (auto& v : p["x"].data) v += (v >= 0 ? 0.05 : -0.05);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.relu(v.at("x")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "relu ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["x"] = random_tensor({3, 4}, rng, -3.0, 3.0);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.sigmoid(v.at("x")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "sigmoid ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["a"] = random_tensor({3, 3, 2}, rng);
      p["b"] = random_tensor({3, 3, 2}, rng);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        DVar sum = t.add(v.at("a"), v.at("b"));
        DVar dif = t.sub(v.at("a"), v.at("b"));
        return scalarize(t, t.mul(sum, dif));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "add/sub/mul ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["x"] = random_tensor({2, 3, 4}, rng);
      p["s"] = random_tensor({1}, rng, 0.5, 2.0);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.scale_var(t.scale_const(v.at("x"), -1.7), v.at("s")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "scale ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["v"] = random_tensor({5}, rng);
      p["m"] = random_tensor({3, 4}, rng);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        DVar a = t.broadcast_spatial(v.at("v"), 3, 4);
        DVar b = t.broadcast_channel(v.at("m"), 5);
        return scalarize(t, t.mul(a, b));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "broadcast ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["a"] = random_tensor({3, 3, 2}, rng);
      p["b"] = random_tensor({3, 3, 5}, rng);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.concat_channels(v.at("a"), v.at("b")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "concat ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["a"] = random_tensor({4, 3}, rng);
      p["b"] = random_tensor({3, 5}, rng);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.matmul(v.at("a"), v.at("b")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "matmul ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["a"] = random_tensor({4, 3}, rng);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.matmul(t.transpose2d(v.at("a")), v.at("a")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "transpose ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["x"] = random_tensor({4, 5, 3}, rng);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.global_avg_pool(v.at("x")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "global_avg_pool ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["x"] = random_tensor({4, 6}, rng, -2.0, 2.0);
      for (int axis : {0, 1}) {
        auto rep = check_graph(p, [&](DTape& t, auto& v) {
          return scalarize(t, t.softmax_axis(v.at("x"), axis));
        });
        CHECK_MESSAGE(rep.max_rel_error < tol, "softmax axis ", axis, " ", rep.max_rel_error);
      }
    }
    {
      DParamMap p;
      p["a"] = random_tensor({4, 4}, rng, -2.0, 2.0);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.fg_mask(v.at("a")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "fg_mask ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["x"] = random_tensor({4, 3}, rng, -2.0, 2.0);
      // Rows pushed away from the origin, where the eps floor would dominate.
      for (int i = 0; i < 4; ++i) p["x"].at2(i, 0) += (p["x"].at2(i, 0) >= 0 ? 1.0 : -1.0);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.unit_rows(v.at("x")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "unit_rows ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["x"] = random_tensor({6, 6, 2}, rng);
      std::vector<double> ys, xs;
      for (int i = 0; i < 3 * 3 * 4; ++i) {
        ys.push_back(rng.uniform(0.3, 4.7));  // interior: away from the border clamp
        xs.push_back(rng.uniform(0.3, 4.7));
      }
      auto rep = check_graph(p, [&, ys, xs](DTape& t, auto& v) {
        return scalarize(t, t.bilinear_pool(v.at("x"), ys, xs, 3, 3, 4));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "bilinear_pool ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["x"] = random_tensor({6}, rng);
      p["w"] = random_tensor({6, 3}, rng);
      p["b"] = random_tensor({3}, rng);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return scalarize(t, t.linear(v.at("x"), v.at("w"), v.at("b")));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "linear ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["x"] = random_tensor({10}, rng);
      std::vector<int64_t> idx = {2, 2, 7, 0, 2};  // repeats exercise scatter-add
      auto rep = check_graph(p, [&, idx](DTape& t, auto& v) {
        return scalarize(t, t.gather(v.at("x"), idx));
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "gather ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["z"] = random_tensor({8}, rng, -2.5, 2.5);
      DTensor targets({8});
      for (int i = 0; i < 8; ++i) targets[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
      auto rep = check_graph(p, [&, targets](DTape& t, auto& v) {
        return t.bce_with_logits(v.at("z"), targets);
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "bce ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["d"] = random_tensor({8}, rng, -3.0, 3.0);
      // Keep |d| off the beta kink at 1: push values near 1 outward.
      for (auto& v : p["d"].data)
        if (std::abs(std::abs(v) - 1.0) < 0.05) v += (std::abs(v) > 1.0 ? 0.1 : -0.1);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return t.smooth_l1(v.at("d"), DTensor::zeros({8}), 1.0, 2);
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "smooth_l1 ", rep.max_rel_error);
    }
    {
      DParamMap p;
      p["l"] = random_tensor({4, 5}, rng, -2.0, 2.0);
      auto rep = check_graph(p, [&](DTape& t, auto& v) {
        return t.softmax_ce(v.at("l"), {1, 0, 4, 2});
      });
      CHECK_MESSAGE(rep.max_rel_error < tol, "softmax_ce ", rep.max_rel_error);
    }
  }
}

TEST_CASE("tape mechanics: error states") {
  DTape infer(false);
  DVar x = infer.param(DTensor::scalar(1.0));
  CHECK_THROWS_AS(infer.backward(x), std::logic_error);

  DTape tape;
  DVar notloss = tape.param(DTensor::zeros({3}));
  CHECK_THROWS_AS(tape.backward(notloss), std::invalid_argument);

  DTape t2;
  DVar a = t2.param(DTensor::scalar(2.0));
  DVar l = t2.mul(a, a);
  t2.backward(l);
  CHECK(t2.grad(a)[0] == doctest::Approx(4.0));
  CHECK_THROWS_AS(t2.backward(l), std::logic_error);

  // NaN anywhere is an error, not a value.
  DTape t3;
  DVar inf1 = t3.input(DTensor::scalar(1e308));
  CHECK_THROWS_AS(t3.add(inf1, inf1), std::runtime_error);
}

TEST_CASE("gradient seeding splices external gradients") {
  // d/dx of (3x + [seeded path]) where the seeded path contributes grad 2.
  DTape tape;
  DVar x = tape.param(DTensor::scalar(5.0));
  DVar y = tape.scale_const(x, 3.0);
  tape.seed_grad(x, Tensor::scalar(2.0).cast<double>());
  tape.backward(y);
  CHECK(tape.grad(x)[0] == doctest::Approx(5.0));
}

TEST_CASE("sgd closed forms") {
  ParamStore ps;
  ps.add("w", Tensor({1}, {1.0f}));
  Sgd opt;
  GradMap g;
  g["w"] = Tensor({1}, {1.0f});
  SgdConfig cfg;
  cfg.lr = 0.1;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  opt.step(ps, g, cfg);
  CHECK(ps.at("w")[0] == doctest::Approx(0.9).epsilon(1e-6));

  // With momentum 0.5: v1 = 1, theta = 0.9; v2 = 1.5, theta = 0.9 - 0.15.
  ParamStore ps2;
  ps2.add("w", Tensor({1}, {1.0f}));
  Sgd opt2;
  SgdConfig cfg2;
  cfg2.lr = 0.1;
  cfg2.momentum = 0.5;
  cfg2.weight_decay = 0.0;
  opt2.step(ps2, g, cfg2);
  opt2.step(ps2, g, cfg2);
  CHECK(ps2.at("w")[0] == doctest::Approx(0.75).epsilon(1e-6));

  // Weight decay pulls toward zero even with zero gradient.
  ParamStore ps3;
  ps3.add("w", Tensor({1}, {1.0f}));
  Sgd opt3;
  GradMap g0;
  g0["w"] = Tensor({1}, {0.0f});
  SgdConfig cfg3;
  cfg3.lr = 0.1;
  cfg3.momentum = 0.0;
  cfg3.weight_decay = 0.1;
  opt3.step(ps3, g0, cfg3);
  CHECK(ps3.at("w")[0] == doctest::Approx(1.0 - 0.1 * 0.1).epsilon(1e-6));

  GradMap gnan;
  gnan["w"] = Tensor({1}, {std::nanf("")});
  CHECK_THROWS_AS(opt3.step(ps3, gnan, cfg3), std::runtime_error);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  Rng rng(42);
  ParamStore ps;
  for (const char* name : {"net.a.w", "net.a.b", "net.z.w"}) {
    Tensor t({3, 2, 4});
    for (auto& v : t.data) v = float(rng.normal());
    ps.add(name, std::move(t));
  }
  auto dir = std::filesystem::temp_directory_path() / "metadet_ckpt_test";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "rt.ckpt").string();
  save_checkpoint(ps, path);
  ParamStore back = load_checkpoint(path);
  REQUIRE(back.size() == ps.size());
  for (const auto& [name, t] : ps.tensors) {
    const Tensor& o = back.at(name);
    REQUIRE(o.shape == t.shape);
    CHECK(std::memcmp(o.data.data(), t.data.data(), t.data.size() * sizeof(float)) == 0);
  }
  // Saving what was loaded reproduces the same bytes.
  std::string path2 = (dir / "rt2.ckpt").string();
  save_checkpoint(back, path2);
  CHECK(read_text_file(path) == read_text_file(path2));

  // Corruptions are rejected.
  write_text_file((dir / "bad1.ckpt").string(), "not-a-checkpoint\n");
  CHECK_THROWS_AS(load_checkpoint((dir / "bad1.ckpt").string()), std::runtime_error);
  std::string bytes = read_text_file(path);
  write_text_file((dir / "bad2.ckpt").string(), bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint((dir / "bad2.ckpt").string()), std::runtime_error);
  write_text_file((dir / "bad3.ckpt").string(), bytes + "xx");
  CHECK_THROWS_AS(load_checkpoint((dir / "bad3.ckpt").string()), std::runtime_error);
}
