#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "groundgram/fdcheck.hpp"
#include "groundgram/nn.hpp"
#include "groundgram/rng.hpp"
#include "groundgram/tape.hpp"

using namespace gg;

namespace {

// independent oracle: naive log(sum(exp))
double naive_lse(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += std::exp(x);
  return std::log(s);
}

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("elementwise forward examples") {
  Tape t;
  Var x = t.input(Tensor::vec({-1, 0, 2}));
  CHECK(t.val(t.relu(x)).data == std::vector<double>{0, 0, 2});

  Var s = t.softmax(t.input(Tensor::vec({0, 0})));
  CHECK(t.val(s)[0] == Catch::Approx(0.5));
  CHECK(t.val(s)[1] == Catch::Approx(0.5));

  Var a = t.input(Tensor::vec({0.3, -1.2, 2.0}));
  CHECK(t.val(t.cosine(a, a)).item() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("logsumexp analytic and absorbing cases") {
  Tape t;
  CHECK(t.val(t.logsumexp(t.input(Tensor::vec({0, 0})))).item() ==
        Catch::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(t.val(t.logsumexp(t.input(Tensor::vec({kNegInf, 3.0})))).item() == Catch::Approx(3.0));
  CHECK(t.val(t.logsumexp(t.input(Tensor::vec({kNegInf, kNegInf})))).item() == kNegInf);
}

TEST_CASE("logsumexp matches naive oracle on random vectors") {
  Rng rng(17, "test");
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> v(20);
    for (auto& x : v) x = rng.uniform(-5, 5);
    Tape t;
    double got = t.val(t.logsumexp(t.input(Tensor::vec(v)))).item();
    CHECK(std::abs(got - naive_lse(v)) < 1e-12);
  }
}

TEST_CASE("logsumexp is shift-invariant") {
  Rng rng(3, "test");
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> v(12);
    for (auto& x : v) x = rng.uniform(-8, 8);
    double k = rng.uniform(-100, 100);
    std::vector<double> vs = v;
    for (auto& x : vs) x += k;
    Tape t;
    double a = t.val(t.logsumexp(t.input(Tensor::vec(v)))).item();
    double b = t.val(t.logsumexp(t.input(Tensor::vec(vs)))).item();
    CHECK(std::abs(b - (a + k)) < 1e-12 * std::max(1.0, std::abs(a + k)));
  }
}

TEST_CASE("backward analytic example: sum(x*x)") {
  ParamStore ps;
  Rng rng(1, "parameter-init");
  Param& x = ps.create("x", Tensor::vec({1, 2}));
  Tape t;
  Var vx = t.param(x);
  Var loss = t.sum(t.mul(vx, vx));
  ps.zero_grad();
  t.backward(loss);
  CHECK(x.grad[0] == Catch::Approx(2.0));
  CHECK(x.grad[1] == Catch::Approx(4.0));
}

TEST_CASE("unused parameter keeps zero gradient") {
  ParamStore ps;
  Param& x = ps.create("x", Tensor::vec({1, 2}));
  Param& unused = ps.create("unused", Tensor::vec({3, 4}));
  Tape t;
  Var loss = t.sum(t.param(x));
  t.param(unused);  // on the tape but not in the loss
  ps.zero_grad();
  t.backward(loss);
  CHECK(unused.grad[0] == 0.0);
  CHECK(unused.grad[1] == 0.0);
}

TEST_CASE("backward is bitwise deterministic") {
  ParamStore ps;
  Rng rng(11, "parameter-init");
  Param& w = ps.create("w", random_tensor({6, 6}, rng));
  Param& v = ps.create("v", random_tensor({6}, rng));

  auto run = [&]() {
    ps.zero_grad();
    Tape t;
    Var h = t.tanh_(t.matmul(t.param(w), t.param(v)));
    Var loss = t.sum(t.mul(h, h));
    t.backward(loss);
    return std::make_pair(w.grad.data, v.grad.data);
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);    // bitwise
  CHECK(a.second == b.second);  // bitwise
}

TEST_CASE("finite-difference check on a quadratic form") {
  ParamStore ps;
  Rng rng(5, "parameter-init");
  Param& x = ps.create("x", random_tensor({8}, rng));
  Tensor A = random_tensor({8, 8}, rng);

  LossFn f = [&](bool need_grad) {
    Tape t;
    Var vx = t.param(x);
    Var ax = t.matmul(t.input(A), vx);
    Var loss = t.dot(vx, ax);
    if (need_grad) {
      ps.zero_grad();
      t.backward(loss);
    }
    return t.val(loss).item();
  };
  auto report = finite_diff_check(ps.all(), f, 1e-4);
  CHECK(report.worst_rel_err < 1e-8);
}

TEST_CASE("every primitive passes finite differences") {
  Rng rng(23, "parameter-init");
  ParamStore ps;
  Param& a = ps.create("a", random_tensor({7}, rng, 0.2, 1.5));
  Param& b = ps.create("b", random_tensor({7}, rng, 0.2, 1.5));
  Param& m = ps.create("m", random_tensor({4, 7}, rng));
  Param& w = ps.create("w", random_tensor({3, 7}, rng));
  Param& bias = ps.create("bias", random_tensor({3}, rng));
  Param& tbl = ps.create("tbl", random_tensor({5, 4}, rng));

  struct Case {
    const char* name;
    std::function<Var(Tape&)> build;
  };
  // weights mix every output element into the scalar loss with distinct
  // coefficients so a wrong index in any backward shows up
  auto weighted_sum = [](Tape& t, Var v) {
    const Tensor& val = t.val(v);
    Tensor w(val.shape);
    for (int64_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.11 * static_cast<double>(i);
    Var flat = t.reshape(v, {val.size()});
    Var wf = t.input(Tensor({val.size()}, w.data));
    return t.dot(flat, wf);
  };

  std::vector<Case> cases = {
      {"add", [&](Tape& t) { return t.add(t.param(a), t.param(b)); }},
      {"sub", [&](Tape& t) { return t.sub(t.param(a), t.param(b)); }},
      {"mul", [&](Tape& t) { return t.mul(t.param(a), t.param(b)); }},
      {"scale", [&](Tape& t) { return t.scale(t.param(a), -2.5); }},
      {"relu", [&](Tape& t) { return t.relu(t.sub(t.param(a), t.param(b))); }},
      {"tanh", [&](Tape& t) { return t.tanh_(t.param(a)); }},
      {"sigmoid", [&](Tape& t) { return t.sigmoid(t.param(a)); }},
      {"exp", [&](Tape& t) { return t.exp_(t.param(a)); }},
      {"concat", [&](Tape& t) { return t.concat({t.param(a), t.param(b)}); }},
      {"matvec", [&](Tape& t) { return t.matmul(t.param(m), t.param(a)); }},
      {"matmul",
       [&](Tape& t) { return t.matmul(t.param(m), t.reshape(t.param(b), {7, 1})); }},
      {"dot", [&](Tape& t) { return t.dot(t.param(a), t.param(b)); }},
      {"linear", [&](Tape& t) { return t.linear(t.param(a), t.param(w), t.param(bias)); }},
      {"linear_mat", [&](Tape& t) { return t.linear(t.param(m), t.param(w), t.param(bias)); }},
      {"sum", [&](Tape& t) { return t.sum(t.param(m)); }},
      {"mean", [&](Tape& t) { return t.mean(t.param(a)); }},
      {"logsumexp", [&](Tape& t) { return t.logsumexp(t.param(a)); }},
      {"logsumexp_rows", [&](Tape& t) { return t.logsumexp_rows(t.param(m)); }},
      {"softmax", [&](Tape& t) { return t.softmax(t.param(a)); }},
      {"log_softmax", [&](Tape& t) { return t.log_softmax(t.param(a)); }},
      {"log_softmax_rows", [&](Tape& t) { return t.log_softmax_rows(t.param(m)); }},
      {"max_over_rows", [&](Tape& t) { return t.max_over_rows(t.param(m)); }},
      {"l2_normalize", [&](Tape& t) { return t.l2_normalize(t.param(a)); }},
      {"cosine", [&](Tape& t) { return t.cosine(t.param(a), t.param(b)); }},
      {"rows", [&](Tape& t) { return t.rows(t.param(m), 1, 3); }},
      {"row", [&](Tape& t) { return t.row(t.param(m), 2); }},
      {"col", [&](Tape& t) { return t.col(t.param(m), 3); }},
      {"pad", [&](Tape& t) { return t.pad(t.param(a), 2, 12, kNegInf); }},
      {"slice", [&](Tape& t) { return t.slice(t.param(a), 1, 5); }},
      {"stack_rows", [&](Tape& t) { return t.stack_rows({t.param(a), t.param(b)}); }},
      {"gather_rows", [&](Tape& t) { return t.gather_rows(t.param(tbl), {0, 2, 2, 4}); }},
  };

  for (auto& c : cases) {
    CAPTURE(c.name);
    LossFn f = [&](bool need_grad) {
      Tape t;
      Var out = c.build(t);
      Var loss = weighted_sum(t, out);
      if (need_grad) {
        ps.zero_grad();
        t.backward(loss);
      }
      return t.val(loss).item();
    };
    auto report = finite_diff_check(ps.all(), f, 1e-4);
    INFO("worst param: " << (report.worst() ? report.worst()->name : "-"));
    CHECK(report.worst_rel_err < 1e-6);
  }
}

TEST_CASE("pad fills with the sentinel and logsumexp absorbs it") {
  Tape t;
  Var v = t.pad(t.input(Tensor::vec({1.0, 2.0})), 1, 4, kNegInf);
  CHECK(t.val(v).data[0] == kNegInf);
  CHECK(t.val(v).data[3] == kNegInf);
  double got = t.val(t.logsumexp(v)).item();
  Tape t2;
  double want = t2.val(t2.logsumexp(t2.input(Tensor::vec({1.0, 2.0})))).item();
  CHECK(got == Catch::Approx(want));
}

TEST_CASE("lstm_run passes finite differences in both directions") {
  Rng rng(31, "parameter-init");
  ParamStore ps;
  LstmParams lstm = LstmParams::create(ps, "lstm", 3, 4, rng);
  Param& x = ps.create("x", random_tensor({5, 3}, rng));

  for (bool reverse : {false, true}) {
    CAPTURE(reverse);
    LossFn f = [&](bool need_grad) {
      Tape t;
      Var h = lstm_run(t, t.param(x), lstm_vars(t, lstm), reverse);
      const Tensor& hv = t.val(h);
      Tensor wts(hv.shape);
      for (int64_t i = 0; i < wts.size(); ++i) wts[i] = std::sin(0.7 * static_cast<double>(i));
      Var loss = t.dot(t.reshape(h, {hv.size()}), t.input(Tensor({hv.size()}, wts.data)));
      if (need_grad) {
        ps.zero_grad();
        t.backward(loss);
      }
      return t.val(loss).item();
    };
    auto report = finite_diff_check(ps.all(), f, 1e-4);
    INFO("worst param: " << (report.worst() ? report.worst()->name : "-"));
    CHECK(report.worst_rel_err < 1e-6);
  }
}

TEST_CASE("lstm_run reverse direction simply mirrors the input order") {
  Rng rng(7, "parameter-init");
  ParamStore ps;
  LstmParams lstm = LstmParams::create(ps, "lstm", 2, 3, rng);
  Tensor x = random_tensor({4, 2}, rng);
  Tensor xr({4, 2});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 2; ++j) xr.at(i, j) = x.at(3 - i, j);

  Tape t;
  const Tensor& fwd = t.val(lstm_run(t, t.input(x), lstm_vars(t, lstm), false));
  const Tensor& rev = t.val(lstm_run(t, t.input(xr), lstm_vars(t, lstm), true));
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 3; ++j) CHECK(fwd.at(i, j) == Catch::Approx(rev.at(3 - i, j)));
}

TEST_CASE("rng streams are independent and deterministic") {
  Rng a(42, "alpha"), a2(42, "alpha"), b(42, "beta");
  std::vector<uint64_t> va, va2, vb;
  for (int i = 0; i < 16; ++i) {
    va.push_back(a.u64());
    va2.push_back(a2.u64());
    vb.push_back(b.u64());
  }
  CHECK(va == va2);
  CHECK(va != vb);

  Rng n(1, "norm");
  double s = 0.0, s2 = 0.0;
  const int N = 20000;
  for (int i = 0; i < N; ++i) {
    double x = n.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / N) < 0.03);
  CHECK(std::abs(s2 / N - 1.0) < 0.05);
}

TEST_CASE("non-finite forward values are rejected") {
  Tape t;
  CHECK_THROWS_AS(t.exp_(t.input(Tensor::vec({1e6}))), NumericError);
  Tape t2;
  Var z = t2.input(Tensor::vec({0.0, 0.0}));
  CHECK_THROWS_AS(t2.l2_normalize(t2.mul(z, z)), NumericError);
}
