// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "l2s/params.hpp"
#include "l2s/rng.hpp"
#include "l2s/tensor.hpp"

using namespace l2s;

namespace {

Tensor random_tensor(Shape s, RngStream& r, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : *t.data) v = r.normal() * scale;
  return t;
}

// naive triple-loop reference
Vec matmul_oracle(const Vec& a, const Vec& b, int64_t m, int64_t k, int64_t n) {
  Vec c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t kk = 0; kk < k; ++kk)
      for (int64_t j = 0; j < n; ++j) c[i * n + j] += a[i * k + kk] * b[kk * n + j];
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  RngStream r(7, "matmul");
  Tensor x = random_tensor({3, 3}, r);
  Tensor y = matmul(eye, x);
  for (int64_t i = 0; i < 9; ++i) REQUIRE(y.ptr()[i] == x.ptr()[i]);

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  REQUIRE(c.ptr()[0] == 3.0);
  REQUIRE(c.ptr()[1] == 7.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  RngStream r(11, "matmul-oracle");
  Tensor a = random_tensor({5, 7}, r);
  Tensor b = random_tensor({7, 3}, r);
  Tensor c = matmul(a, b);
  Vec expect = matmul_oracle(*a.data, *b.data, 5, 7, 3);
  for (int64_t i = 0; i < c.numel(); ++i)
    REQUIRE(std::fabs(c.ptr()[i] - expect[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("matmul_nt matches transpose oracle") {
  RngStream r(12, "matmul-nt");
  Tensor a = random_tensor({2, 4, 6}, r);
  Tensor b = random_tensor({2, 5, 6}, r);
  Tensor c = matmul_nt(a, b);
  REQUIRE(c.shape == Shape{2, 4, 5});
  for (int64_t bi = 0; bi < 2; ++bi)
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (int64_t kk = 0; kk < 6; ++kk)
          s += a.ptr()[(bi * 4 + i) * 6 + kk] * b.ptr()[(bi * 5 + j) * 6 + kk];
        REQUIRE(std::fabs(c.ptr()[(bi * 4 + i) * 5 + j] - s) < 1e-12);
      }
}

TEST_CASE("matmul shape errors carry both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeMismatch");
  } catch (const ShapeMismatch& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("(2,3)") != std::string::npos);
    REQUIRE(msg.find("(4,2)") != std::string::npos);
  }
}

TEST_CASE("matmul is bit-reproducible and thread-count independent") {
  RngStream r(13, "repro");
  Tensor a = random_tensor({33, 17}, r);
  Tensor b = random_tensor({17, 29}, r);
  Tensor c1 = matmul(a, b);
  Tensor c2 = matmul(a, b);
  REQUIRE(std::memcmp(c1.ptr(), c2.ptr(), sizeof(double) * c1.numel()) == 0);

  WorkerPool::instance().set_threads(2);
  Tensor c3 = matmul(a, b);
  WorkerPool::instance().set_threads(WorkerPool::env_threads());
  REQUIRE(std::memcmp(c1.ptr(), c3.ptr(), sizeof(double) * c1.numel()) == 0);
}

TEST_CASE("softmax_with_bias basic cases") {
  Tensor l0 = Tensor::from({1, 2}, {0, 0});
  Tensor y0 = softmax(l0);
  REQUIRE(y0.ptr()[0] == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(y0.ptr()[1] == Catch::Approx(0.5).margin(1e-15));

  Tensor l1 = Tensor::from({1, 2}, {5, 1});
  BiasView bias;
  bias.data = std::make_shared<Vec>(Vec{0.0, -kNegLarge});
  bias.batches = 1;
  bias.rows = 1;
  bias.cols = 2;
  Tensor y1 = softmax_with_bias(l1, bias);
  REQUIRE(std::fabs(y1.ptr()[0] - 1.0) < 1e-9);
  REQUIRE(y1.ptr()[1] < 1e-30);
}

TEST_CASE("softmax matches exp-normalize oracle") {
  Tensor l = Tensor::from({1, 3}, {0.3, -0.2, 1.1});
  Tensor y = softmax(l);
  double e0 = std::exp(0.3), e1 = std::exp(-0.2), e2 = std::exp(1.1);
  double s = e0 + e1 + e2;
  REQUIRE(y.ptr()[0] == Catch::Approx(e0 / s).epsilon(1e-12));
  REQUIRE(y.ptr()[1] == Catch::Approx(e1 / s).epsilon(1e-12));
  REQUIRE(y.ptr()[2] == Catch::Approx(e2 / s).epsilon(1e-12));
}

TEST_CASE("softmax rows with a permitted entry sum to one") {
  RngStream r(21, "softmax-rows");
  Tensor l = random_tensor({6, 8}, r, 3.0);
  auto bias = std::make_shared<Vec>(static_cast<size_t>(6 * 8), 0.0);
  for (int64_t row = 0; row < 6; ++row)
    for (int64_t j = 0; j < 8; ++j)
      if ((row + j) % 3 == 0 && j != 2) (*bias)[row * 8 + j] = -kNegLarge;
  BiasView bv{bias, 1, 6, 8, 1};
  Tensor y = softmax_with_bias(l, bv);
  for (int64_t row = 0; row < 6; ++row) {
    double s = 0.0;
    for (int64_t j = 0; j < 8; ++j) {
      s += y.ptr()[row * 8 + j];
      if ((*bias)[row * 8 + j] != 0.0) REQUIRE(y.ptr()[row * 8 + j] < 1e-30);
    }
    REQUIRE(std::fabs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("softmax raises AllMaskedRow when every entry is forbidden") {
  Tensor l = Tensor::from({1, 2}, {1.0, 2.0});
  auto bias = std::make_shared<Vec>(Vec{-kNegLarge, -kNegLarge});
  BiasView bv{bias, 1, 1, 2, 1};
  REQUIRE_THROWS_AS(softmax_with_bias(l, bv), AllMaskedRow);
}

TEST_CASE("layer_norm cases") {
  Tensor c = Tensor::full({1, 5}, 3.25);
  Tensor yc = layer_norm(c);
  for (int64_t i = 0; i < 5; ++i) REQUIRE(yc.ptr()[i] == 0.0);

  double eps = 1e-6;
  Tensor pm = Tensor::from({1, 2}, {1, -1});
  Tensor ypm = layer_norm(pm, eps);
  REQUIRE(ypm.ptr()[0] == Catch::Approx(1.0 / std::sqrt(1.0 + eps)).epsilon(1e-12));
  REQUIRE(ypm.ptr()[1] == Catch::Approx(-1.0 / std::sqrt(1.0 + eps)).epsilon(1e-12));

  RngStream r(31, "ln");
  Tensor x = random_tensor({1, 8}, r, 2.0);
  Tensor y = layer_norm(x, eps);
  double mean = 0.0;
  for (int64_t i = 0; i < 8; ++i) mean += x.ptr()[i];
  mean /= 8.0;
  double var = 0.0;
  for (int64_t i = 0; i < 8; ++i) var += (x.ptr()[i] - mean) * (x.ptr()[i] - mean);
  var /= 8.0;
  for (int64_t i = 0; i < 8; ++i) {
    double expect = (x.ptr()[i] - mean) / std::sqrt(var + eps);
    REQUIRE(y.ptr()[i] == Catch::Approx(expect).margin(1e-12));
  }

  // normalized output has mean 0, variance 1
  double m2 = 0.0, v2 = 0.0;
  for (int64_t i = 0; i < 8; ++i) m2 += y.ptr()[i];
  m2 /= 8.0;
  for (int64_t i = 0; i < 8; ++i) v2 += (y.ptr()[i] - m2) * (y.ptr()[i] - m2);
  v2 /= 8.0;
  REQUIRE(std::fabs(m2) < 1e-6);
  REQUIRE(std::fabs(v2 - 1.0) < 1e-5);
}

TEST_CASE("backward populates gradients") {
  ParameterStore store(5);
  Tensor& p = store.create("p", {4}, 0.5);

  SECTION("sum gives ones") {
    TapeScope ts;
    Tensor loss = sum_all(p);
    GradMap g = backward(loss, store);
    for (double v : g.at("p")) REQUIRE(v == 1.0);
  }

  SECTION("sum of squares gives 2p") {
    *p.data = {1, 2, -3, 0.5};
    TapeScope ts;
    Tensor loss = sum_all(mul(p, p));
    GradMap g = backward(loss, store);
    REQUIRE(g.at("p")[0] == Catch::Approx(2.0));
    REQUIRE(g.at("p")[1] == Catch::Approx(4.0));
    REQUIRE(g.at("p")[2] == Catch::Approx(-6.0));
    REQUIRE(g.at("p")[3] == Catch::Approx(1.0));
  }

  SECTION("unreachable parameters get zero gradients") {
    store.create("q", {3}, 0.5);
    TapeScope ts;
    Tensor loss = sum_all(p);
    GradMap g = backward(loss, store);
    for (double v : g.at("q")) REQUIRE(v == 0.0);
  }

  SECTION("loss outside recording mode raises NoTape") {
    Tensor loss;
    {
      TapeScope ts;
      NoGradScope ng;
      loss = sum_all(p);
    }
    TapeScope ts2;
    REQUIRE_THROWS_AS(backward(loss, store), NoTape);
  }
}

TEST_CASE("finite_diff_check on simple functions") {
  ParameterStore store(9);
  store.create("p", {3}, 0.7);

  SECTION("sum of squares is exact") {
    auto f = [](ParameterStore& s) { return sum_all(mul(s.at("p"), s.at("p"))); };
    GradCheckReport rep = finite_diff_check(f, store, 1e-5, 1e-4);
    REQUIRE(rep.pass);
    REQUIRE(rep.worst < 1e-8);
  }

  SECTION("dead parameter passes") {
    store.create("dead", {2}, 0.3);
    auto f = [](ParameterStore& s) { return sum_all(mul(s.at("p"), s.at("p"))); };
    GradCheckReport rep = finite_diff_check(f, store, 1e-5, 1e-4);
    REQUIRE(rep.pass);
  }

  SECTION("non-deterministic function is rejected") {
    int calls = 0;
    auto f = [&calls](ParameterStore& s) {
      ++calls;
      return scale(sum_all(s.at("p")), 1.0 + 0.001 * calls);
    };
    REQUIRE_THROWS_AS(finite_diff_check(f, store, 1e-5, 1e-4), NonDeterministicFunction);
  }
}

TEST_CASE("gradients of composite ops match finite differences") {
  ParameterStore store(17);
  store.create("w", {4, 4}, 0.4);
  store.create("b", {4}, 0.2);
  store.create("x", {2, 3, 4}, 0.6);
  auto f = [](ParameterStore& s) {
    Tensor h = linear(s.at("x"), s.at("w"), s.at("b"));
    h = gelu(layer_norm(h));
    h = softmax(h);
    return mse(h, scale(s.at("x"), 0.1));
  };
  GradCheckReport rep = finite_diff_check(f, store, 1e-5, 1e-4);
  INFO(rep.worst_name << " rel err " << rep.worst);
  REQUIRE(rep.pass);
}

TEST_CASE("gradients of shape ops match finite differences") {
  ParameterStore store(23);
  store.create("x", {2, 4, 6}, 0.5);
  store.create("tbl", {3, 6}, 0.5);
  store.create("pos", {4, 6}, 0.5);
  store.create("s", {2, 6}, 0.5);
  auto f = [](ParameterStore& s) {
    Tensor h = add_positional(s.at("x"), s.at("pos"));
    h = add_rows_indexed(h, s.at("tbl"), {2, 0});
    h = scale_tokens(h, s.at("s"));
    h = shift_tokens(h, s.at("s"));
    Tensor heads = split_heads(h, 2);
    Tensor merged = merge_heads(heads, 2);
    Tensor parts = concat_lastdim({merged, scale(merged, 0.5)});
    Tensor sl = slice_lastdim(parts, 3, 7);
    Tensor rep = repeat_batch(sl, 2);
    return sum_all(mul(rep, rep));
  };
  GradCheckReport rep = finite_diff_check(f, store, 1e-5, 1e-4);
  INFO(rep.worst_name << " rel err " << rep.worst);
  REQUIRE(rep.pass);
}

TEST_CASE("adamw_step behaviour") {
  SECTION("lr = 0 leaves parameters unchanged") {
    ParameterStore store(3);
    Tensor& p = store.create("p", {2}, 0.5);
    Vec before = *p.data;
    GradMap g{{"p", Vec{1.0, -2.0}}};
    adamw_step(store, g, 0.0, 0.03, AdamBetas{}, 1);
    REQUIRE((*p.data)[0] == before[0]);
    REQUIRE((*p.data)[1] == before[1]);
  }

  SECTION("first step moves by lr in the gradient direction") {
    ParameterStore store(3);
    Tensor& p = store.create_zeros("p", {1});
    GradMap g{{"p", Vec{1.0}}};
    adamw_step(store, g, 0.1, 0.0, AdamBetas{}, 1);
    REQUIRE((*p.data)[0] == Catch::Approx(-0.1).epsilon(1e-6));
  }

  SECTION("three steps match a scalar recurrence oracle") {
    ParameterStore store(3);
    Tensor& p = store.create_zeros("p", {1});
    (*p.data)[0] = 2.0;
    AdamBetas bt;
    double lr = 0.05, wd = 0.01;
    // oracle
    double theta = 2.0, m = 0.0, v = 0.0;
    for (int step = 1; step <= 3; ++step) {
      double grad = 2.0 * theta;  // d/dθ θ²
      m = bt.beta1 * m + (1 - bt.beta1) * grad;
      v = bt.beta2 * v + (1 - bt.beta2) * grad * grad;
      double mhat = m / (1 - std::pow(bt.beta1, step));
      double vhat = v / (1 - std::pow(bt.beta2, step));
      theta -= lr * (mhat / (std::sqrt(vhat) + bt.eps) + wd * theta);
    }
    for (int step = 1; step <= 3; ++step) {
      GradMap g{{"p", Vec{2.0 * (*p.data)[0]}}};
      adamw_step(store, g, lr, wd, bt, step);
    }
    REQUIRE((*p.data)[0] == Catch::Approx(theta).epsilon(1e-14));
  }

  SECTION("missing gradient raises") {
    ParameterStore store(3);
    store.create("p", {2}, 0.5);
    GradMap empty;
    REQUIRE_THROWS_AS(adamw_step(store, empty, 0.1, 0.0, AdamBetas{}, 1), MissingGrad);
  }

  SECTION("frozen parameters are untouched and exempt") {
    ParameterStore store(3);
    Tensor& p = store.create("p", {2}, 0.5);
    store.create("q", {2}, 0.5);
    store.at("q").requires_grad = false;
    Vec qa = *store.at("q").data;
    GradMap g{{"p", Vec{1.0, 1.0}}};
    adamw_step(store, g, 0.1, 0.5, AdamBetas{}, 1);
    REQUIRE(*store.at("q").data == qa);
    REQUIRE((*p.data)[0] != 0.5);
  }
}

TEST_CASE("rng streams are deterministic and labeled") {
  RngStream a(42, "alpha");
  RngStream b(42, "alpha");
  for (int i = 0; i < 16; ++i) REQUIRE(a.u64() == b.u64());

  RngStream c(42, "beta");
  REQUIRE(a.u64_at(0) != c.u64_at(0));

  RngStream child1 = a.child("x").child(uint64_t{3});
  RngStream child2 = a.child("x").child(uint64_t{4});
  REQUIRE(child1.u64_at(0) != child2.u64_at(0));

  // index-addressed draws match the sequential stream
  RngStream d(7, "gamma");
  uint64_t first = d.u64_at(0);
  uint64_t second = d.u64_at(1);
  REQUIRE(d.u64() == first);
  REQUIRE(d.u64() == second);
}

TEST_CASE("rng uniformity sanity (chi-square over 256 buckets)") {
  const int64_t n = 100000;
  const int buckets = 256;
  for (const char* label : {"s1", "s2"}) {
    RngStream r(1234, label);
    std::vector<int64_t> count(buckets, 0);
    for (int64_t i = 0; i < n; ++i) ++count[static_cast<size_t>(r.uniform() * buckets)];
    double expect = static_cast<double>(n) / buckets;
    double chi2 = 0.0;
    for (int64_t c : count) {
      double d = static_cast<double>(c) - expect;
      chi2 += d * d / expect;
    }
    // df = 255: mean 255, sd ~22.6; [150, 400] is far beyond 5 sigma
    REQUIRE(chi2 > 150.0);
    REQUIRE(chi2 < 400.0);
  }
}

TEST_CASE("normal draws have sane moments") {
  RngStream r(99, "normal");
  const int64_t n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double v = r.normal();
    s += v;
    s2 += v * v;
  }
  double mean = s / n;
  double var = s2 / n - mean * mean;
  REQUIRE(std::fabs(mean) < 0.02);
  REQUIRE(std::fabs(var - 1.0) < 0.03);
}

TEST_CASE("property: analytic gradients match finite differences on random shapes") {
  RngStream meta(2024, "prop-shapes");
  for (int trial = 0; trial < 5; ++trial) {
    int64_t m = 2 + static_cast<int64_t>(meta.below(3));
    int64_t k = 2 + static_cast<int64_t>(meta.below(3));
    int64_t n = 2 + static_cast<int64_t>(meta.below(3));
    ParameterStore store(meta.u64());
    store.create("a", {m, k}, 0.7);
    store.create("b", {k, n}, 0.7);
    auto f = [](ParameterStore& s) {
      Tensor y = matmul(s.at("a"), s.at("b"));
      return mse(softmax(y), Tensor::full(y.shape, 0.1));
    };
    GradCheckReport rep = finite_diff_check(f, store, 1e-5, 1e-4);
    INFO("trial " << trial << " worst " << rep.worst_name << " " << rep.worst);
    REQUIRE(rep.pass);
  }
}
