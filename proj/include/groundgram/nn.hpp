#pragma once

#include <memory>
#include <string>
#include <vector>

#include "groundgram/rng.hpp"
#include "groundgram/tape.hpp"

namespace gg {

// Xavier-style scaled uniform init; fan_out = rows, fan_in = cols for 2-d
// tensors. Vectors (biases) start at zero.
inline Tensor xavier_uniform(Shape s, Rng& rng) {
  Tensor t(s);
  if (s.size() == 1) return t;  // bias: zeros
  double fan_in = static_cast<double>(s[1]);
  double fan_out = static_cast<double>(s[0]);
  double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& v : t.data) v = rng.uniform(-a, a);
  return t;
}

struct LinearLayer {
  Param* w = nullptr;
  Param* b = nullptr;

  static LinearLayer create(ParamStore& ps, const std::string& prefix, int64_t out_d, int64_t in_d,
                            Rng& rng) {
    LinearLayer l;
    l.w = &ps.create(prefix + ".w", xavier_uniform({out_d, in_d}, rng));
    l.b = &ps.create(prefix + ".b", Tensor({out_d}));
    return l;
  }

  Var apply(Tape& t, Var x) const { return t.linear(x, t.param(*w), t.param(*b)); }
};

// Linear input layer, two ReLU-activated layers, linear output layer.
struct Mlp {
  LinearLayer lin_in, lin_h1, lin_h2, lin_out;

  static Mlp create(ParamStore& ps, const std::string& prefix, int64_t in_d, int64_t hidden,
                    int64_t out_d, Rng& rng) {
    Mlp m;
    m.lin_in = LinearLayer::create(ps, prefix + ".in", hidden, in_d, rng);
    m.lin_h1 = LinearLayer::create(ps, prefix + ".h1", hidden, hidden, rng);
    m.lin_h2 = LinearLayer::create(ps, prefix + ".h2", hidden, hidden, rng);
    m.lin_out = LinearLayer::create(ps, prefix + ".out", out_d, hidden, rng);
    return m;
  }

  Var apply(Tape& t, Var x) const {
    Var h = lin_in.apply(t, x);
    h = t.relu(lin_h1.apply(t, h));
    h = t.relu(lin_h2.apply(t, h));
    return lin_out.apply(t, h);
  }
};

// One hidden ReLU layer then a linear projection.
struct Mlp1 {
  LinearLayer lin_in, lin_out;

  static Mlp1 create(ParamStore& ps, const std::string& prefix, int64_t in_d, int64_t hidden,
                     int64_t out_d, Rng& rng) {
    Mlp1 m;
    m.lin_in = LinearLayer::create(ps, prefix + ".in", hidden, in_d, rng);
    m.lin_out = LinearLayer::create(ps, prefix + ".out", out_d, hidden, rng);
    return m;
  }

  Var apply(Tape& t, Var x) const { return lin_out.apply(t, t.relu(lin_in.apply(t, x))); }
};

struct LstmParams {
  Param* w_ih = nullptr;  // {4h, d}, gate row blocks [i; f; g; o]
  Param* w_hh = nullptr;  // {4h, h}
  Param* b = nullptr;     // {4h}
  int64_t hidden = 0;
  int64_t input = 0;

  static LstmParams create(ParamStore& ps, const std::string& prefix, int64_t input,
                           int64_t hidden, Rng& rng) {
    LstmParams l;
    l.hidden = hidden;
    l.input = input;
    l.w_ih = &ps.create(prefix + ".w_ih", xavier_uniform({4 * hidden, input}, rng));
    l.w_hh = &ps.create(prefix + ".w_hh", xavier_uniform({4 * hidden, hidden}, rng));
    l.b = &ps.create(prefix + ".b", Tensor({4 * hidden}));
    return l;
  }
};

struct LstmVars {
  Var w_ih, w_hh, b;
  int64_t hidden = 0;
};

inline LstmVars lstm_vars(Tape& t, const LstmParams& p) {
  return LstmVars{t.param(*p.w_ih), t.param(*p.w_hh), t.param(*p.b), p.hidden};
}

// Single fused LSTM run over an {L,d} input. Output row t holds the hidden
// state after consuming position t: in natural order when reverse=false,
// right-to-left when reverse=true. Backward is hand-rolled BPTT; its
// correctness is pinned by the finite-difference suite.
inline Var lstm_run(Tape& t, Var x, const LstmVars& lv, bool reverse) {
  const Tensor& X = t.val(x);
  if (X.rank() != 2) throw std::invalid_argument("lstm_run: input must be {L,d}");
  const Tensor& Wih = t.val(lv.w_ih);
  const Tensor& Whh = t.val(lv.w_hh);
  const Tensor& B = t.val(lv.b);
  int64_t L = X.rows(), d = X.cols(), h = lv.hidden;
  if (Wih.rows() != 4 * h || Wih.cols() != d || Whh.cols() != h)
    throw std::invalid_argument("lstm_run: weight shapes inconsistent with input");

  Tensor H({L, h});
  // per-step cache: [i f g o c] blocks of h
  auto cache = std::make_shared<Tensor>(Shape{L, 5 * h});
  std::vector<double> hprev(static_cast<size_t>(h), 0.0), cprev(static_cast<size_t>(h), 0.0);
  std::vector<double> gates(static_cast<size_t>(4 * h));

  for (int64_t step = 0; step < L; ++step) {
    int64_t pos = reverse ? L - 1 - step : step;
    const double* xr = X.data.data() + pos * d;
    for (int64_t r = 0; r < 4 * h; ++r) {
      const double* wi = Wih.data.data() + r * d;
      double s = B[r];
      for (int64_t k = 0; k < d; ++k) s += wi[k] * xr[k];
      const double* wh = Whh.data.data() + r * h;
      for (int64_t k = 0; k < h; ++k) s += wh[k] * hprev[static_cast<size_t>(k)];
      gates[static_cast<size_t>(r)] = s;
    }
    double* cch = cache->data.data() + pos * 5 * h;
    double* hr = H.data.data() + pos * h;
    for (int64_t k = 0; k < h; ++k) {
      double ig = 1.0 / (1.0 + std::exp(-gates[static_cast<size_t>(k)]));
      double fg = 1.0 / (1.0 + std::exp(-gates[static_cast<size_t>(h + k)]));
      double gg = std::tanh(gates[static_cast<size_t>(2 * h + k)]);
      double og = 1.0 / (1.0 + std::exp(-gates[static_cast<size_t>(3 * h + k)]));
      double c = fg * cprev[static_cast<size_t>(k)] + ig * gg;
      cch[k] = ig;
      cch[h + k] = fg;
      cch[2 * h + k] = gg;
      cch[3 * h + k] = og;
      cch[4 * h + k] = c;
      hr[k] = og * std::tanh(c);
      hprev[static_cast<size_t>(k)] = hr[k];
      cprev[static_cast<size_t>(k)] = c;
    }
  }

  Var wih = lv.w_ih, whh = lv.w_hh, bb = lv.b;
  return t.custom("lstm_run", {x, wih, whh, bb}, std::move(H),
                  [x, wih, whh, bb, cache, L, d, h, reverse](Tape& t, int32_t id) {
                    const Tensor& gH = t.grad(Var{id});
                    const Tensor& X = t.val(x);
                    const Tensor& Wih = t.val(wih);
                    const Tensor& Whh = t.val(whh);
                    const Tensor& Hv = t.val(Var{id});
                    Tensor& gX = t.grad_buf(x);
                    Tensor& gWih = t.grad_buf(wih);
                    Tensor& gWhh = t.grad_buf(whh);
                    Tensor& gB = t.grad_buf(bb);

                    std::vector<double> dh(static_cast<size_t>(h), 0.0);
                    std::vector<double> dc(static_cast<size_t>(h), 0.0);
                    std::vector<double> da(static_cast<size_t>(4 * h));
                    // walk processing order backwards
                    for (int64_t step = L - 1; step >= 0; --step) {
                      int64_t pos = reverse ? L - 1 - step : step;
                      int64_t prev_pos = reverse ? pos + 1 : pos - 1;
                      const double* cch = cache->data.data() + pos * 5 * h;
                      const double* ghr = gH.data.data() + pos * h;
                      bool has_prev = step > 0;
                      const double* hprev =
                          has_prev ? Hv.data.data() + prev_pos * h : nullptr;
                      const double* cprev =
                          has_prev ? cache->data.data() + prev_pos * 5 * h + 4 * h : nullptr;
                      for (int64_t k = 0; k < h; ++k) {
                        double ig = cch[k], fg = cch[h + k], gg = cch[2 * h + k],
                               og = cch[3 * h + k], c = cch[4 * h + k];
                        double tc = std::tanh(c);
                        double dhk = ghr[k] + dh[static_cast<size_t>(k)];
                        double dok = dhk * tc;
                        double dck = dc[static_cast<size_t>(k)] + dhk * og * (1.0 - tc * tc);
                        double cp = has_prev ? cprev[k] : 0.0;
                        double dik = dck * gg;
                        double dfk = dck * cp;
                        double dgk = dck * ig;
                        da[static_cast<size_t>(k)] = dik * ig * (1.0 - ig);
                        da[static_cast<size_t>(h + k)] = dfk * fg * (1.0 - fg);
                        da[static_cast<size_t>(2 * h + k)] = dgk * (1.0 - gg * gg);
                        da[static_cast<size_t>(3 * h + k)] = dok * og * (1.0 - og);
                        dc[static_cast<size_t>(k)] = dck * fg;
                      }
                      const double* xr = X.data.data() + pos * d;
                      double* gxr = gX.data.data() + pos * d;
                      std::fill(dh.begin(), dh.end(), 0.0);
                      for (int64_t r = 0; r < 4 * h; ++r) {
                        double dar = da[static_cast<size_t>(r)];
                        gB[r] += dar;
                        if (dar == 0.0) continue;
                        const double* wi = Wih.data.data() + r * d;
                        double* gwi = gWih.data.data() + r * d;
                        for (int64_t k = 0; k < d; ++k) {
                          gwi[k] += dar * xr[k];
                          gxr[k] += dar * wi[k];
                        }
                        const double* wh = Whh.data.data() + r * h;
                        double* gwh = gWhh.data.data() + r * h;
                        if (has_prev) {
                          for (int64_t k = 0; k < h; ++k) {
                            gwh[k] += dar * hprev[k];
                            dh[static_cast<size_t>(k)] += dar * wh[k];
                          }
                        }
                      }
                    }
                  });
}

}  // namespace gg
