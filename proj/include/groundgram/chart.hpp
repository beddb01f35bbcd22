#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "groundgram/grammar.hpp"
#include "groundgram/tape.hpp"
#include "groundgram/tree.hpp"

namespace gg {

struct Sentence {
  std::vector<int> tokens;       // word ids after UNK mapping
  std::vector<std::string> raw;  // original strings

  int n() const { return static_cast<int>(tokens.size()); }
};

// Shared per-sentence cache: exp of the binary table under one global shift.
// Valid while the rule-table values it was built from stay alive on the tape.
struct BinExpCache {
  int64_t n_nt = 0, m = 0;
  double shift = 0.0;
  std::vector<double> expbin;  // [A][b][c], exp(bin - shift)

  explicit BinExpCache(const Tensor& bin) {
    n_nt = bin.dim(0);
    m = bin.dim(1);
    shift = kNegInf;
    for (double v : bin.data) shift = std::max(shift, v);
    if (shift == kNegInf) shift = 0.0;
    expbin.resize(bin.data.size());
    for (size_t i = 0; i < bin.data.size(); ++i)
      expbin[i] = bin.data[i] == kNegInf ? 0.0 : std::exp(bin.data[i] - shift);
  }
  double at(int64_t a, int64_t b, int64_t c) const {
    return expbin[static_cast<size_t>((a * m + b) * m + c)];
  }
};

namespace detail {

inline double max_finite(const double* v, int64_t n) {
  double m = kNegInf;
  for (int64_t i = 0; i < n; ++i)
    if (v[i] > m) m = v[i];
  return m;
}

// out[A] = logsumexp over splits k and symbols (b,c) of
//          bin[A,b,c] + left_k[b] + right_k[c]
// computed in scaled linear space; one fused node per span.
inline Var inside_step(Tape& t, Var bin, const std::vector<std::pair<Var, Var>>& splits,
                       const std::shared_ptr<BinExpCache>& cache) {
  int64_t N = cache->n_nt, M = cache->m;
  int64_t K = static_cast<int64_t>(splits.size());

  // per-split shifts
  std::vector<double> lmax(static_cast<size_t>(K)), rmax(static_cast<size_t>(K));
  double g = kNegInf;
  for (int64_t k = 0; k < K; ++k) {
    const Tensor& L = t.val(splits[static_cast<size_t>(k)].first);
    const Tensor& R = t.val(splits[static_cast<size_t>(k)].second);
    lmax[static_cast<size_t>(k)] = max_finite(L.data.data(), M);
    rmax[static_cast<size_t>(k)] = max_finite(R.data.data(), M);
    g = std::max(g, lmax[static_cast<size_t>(k)] + rmax[static_cast<size_t>(k)]);
  }

  auto outer = std::make_shared<Tensor>(Shape{M, M});  // T[b,c], kept for backward
  Tensor out({N}, kNegInf);
  if (g != kNegInf) {
    std::vector<double> el(static_cast<size_t>(M)), er(static_cast<size_t>(M));
    for (int64_t k = 0; k < K; ++k) {
      const Tensor& L = t.val(splits[static_cast<size_t>(k)].first);
      const Tensor& R = t.val(splits[static_cast<size_t>(k)].second);
      double lm = lmax[static_cast<size_t>(k)], rm = rmax[static_cast<size_t>(k)];
      if (lm == kNegInf || rm == kNegInf) continue;
      double scale = std::exp(lm + rm - g);
      for (int64_t b = 0; b < M; ++b) el[static_cast<size_t>(b)] = L[b] == kNegInf ? 0.0 : std::exp(L[b] - lm);
      for (int64_t c = 0; c < M; ++c)
        er[static_cast<size_t>(c)] = R[c] == kNegInf ? 0.0 : std::exp(R[c] - rm) * scale;
      for (int64_t b = 0; b < M; ++b) {
        double eb = el[static_cast<size_t>(b)];
        if (eb == 0.0) continue;
        double* trow = outer->data.data() + b * M;
        for (int64_t c = 0; c < M; ++c) trow[c] += eb * er[static_cast<size_t>(c)];
      }
    }
    for (int64_t a = 0; a < N; ++a) {
      const double* brow = cache->expbin.data() + a * M * M;
      double den = 0.0;
      for (int64_t i = 0; i < M * M; ++i) den += brow[i] * outer->data[static_cast<size_t>(i)];
      out[a] = den > 0.0 ? std::log(den) + cache->shift + g : kNegInf;
    }
  }

  std::vector<Var> parents = {bin};
  for (auto& s : splits) {
    parents.push_back(s.first);
    parents.push_back(s.second);
  }
  auto splits_copy = splits;
  return t.custom(
      "inside_step", parents, std::move(out),
      [bin, splits = std::move(splits_copy), cache, outer, lmax, rmax, g, N, M](Tape& t,
                                                                                int32_t id) {
        if (g == kNegInf) return;
        const Tensor& gout = t.grad(Var{id});
        const Tensor& outv = t.val(Var{id});
        // ghat[A] = gout[A] / den[A]
        std::vector<double> ghat(static_cast<size_t>(N), 0.0);
        bool any = false;
        for (int64_t a = 0; a < N; ++a) {
          if (gout[a] == 0.0 || outv[a] == kNegInf) continue;
          ghat[static_cast<size_t>(a)] = gout[a] / std::exp(outv[a] - cache->shift - g);
          any = true;
        }
        if (!any) return;
        // dBin[A,b,c] += ghat[A] * expbin[A,b,c] * T[b,c]
        Tensor& gbin = t.grad_buf(bin);
        std::vector<double> S(static_cast<size_t>(M * M), 0.0);  // S[b,c] = sum_A ghat*expbin
        for (int64_t a = 0; a < N; ++a) {
          double ga = ghat[static_cast<size_t>(a)];
          if (ga == 0.0) continue;
          const double* brow = cache->expbin.data() + a * M * M;
          double* gb = gbin.data.data() + a * M * M;
          const double* T = outer->data.data();
          for (int64_t i = 0; i < M * M; ++i) {
            gb[i] += ga * brow[i] * T[i];
            S[static_cast<size_t>(i)] += ga * brow[i];
          }
        }
        // per split: dleft[b] += el[b] * sum_c S[b,c]*er[c];  dright symmetric
        std::vector<double> el(static_cast<size_t>(M)), er(static_cast<size_t>(M));
        for (size_t k = 0; k < splits.size(); ++k) {
          const Tensor& L = t.val(splits[k].first);
          const Tensor& R = t.val(splits[k].second);
          double lm = lmax[k], rm = rmax[k];
          if (lm == kNegInf || rm == kNegInf) continue;
          double scale = std::exp(lm + rm - g);
          for (int64_t b = 0; b < M; ++b)
            el[static_cast<size_t>(b)] = L[b] == kNegInf ? 0.0 : std::exp(L[b] - lm);
          for (int64_t c = 0; c < M; ++c)
            er[static_cast<size_t>(c)] = R[c] == kNegInf ? 0.0 : std::exp(R[c] - rm) * scale;
          Tensor& gl = t.grad_buf(splits[k].first);
          Tensor& gr = t.grad_buf(splits[k].second);
          for (int64_t b = 0; b < M; ++b) {
            double eb = el[static_cast<size_t>(b)];
            if (eb == 0.0) continue;
            const double* srow = S.data() + b * M;
            double acc = 0.0;
            for (int64_t c = 0; c < M; ++c) {
              double w = srow[c] * er[static_cast<size_t>(c)];
              acc += w;
              gr[c] += w * eb;
            }
            gl[b] += eb * acc;
          }
        }
      });
}

struct OutsideContext {
  Var parent_outside;  // M-vector; only the NT block participates
  Var sibling_inside;  // M-vector
};

// out[B] = lse over left contexts of lse_{A,c}(par[A] + bin[A,B,c] + sib[c])
//        combined with right contexts lse_{A,b}(par[A] + bin[A,b,B] + sib[b])
inline Var outside_step(Tape& t, Var bin, const std::vector<OutsideContext>& as_left,
                        const std::vector<OutsideContext>& as_right,
                        const std::shared_ptr<BinExpCache>& cache) {
  int64_t N = cache->n_nt, M = cache->m;

  double g = kNegInf;
  auto ctx_shift = [&](const OutsideContext& c) {
    return max_finite(t.val(c.parent_outside).data.data(), N) +
           max_finite(t.val(c.sibling_inside).data.data(), M);
  };
  for (const auto& c : as_left) g = std::max(g, ctx_shift(c));
  for (const auto& c : as_right) g = std::max(g, ctx_shift(c));

  auto ul = std::make_shared<Tensor>(Shape{N, M});  // U_L[A,c]
  auto ur = std::make_shared<Tensor>(Shape{N, M});  // U_R[A,b]
  Tensor out({M}, kNegInf);

  auto accumulate = [&](const std::vector<OutsideContext>& ctxs, Tensor& U) {
    std::vector<double> ep(static_cast<size_t>(N)), es(static_cast<size_t>(M));
    for (const auto& c : ctxs) {
      const Tensor& P = t.val(c.parent_outside);
      const Tensor& Sb = t.val(c.sibling_inside);
      double pm = max_finite(P.data.data(), N), sm = max_finite(Sb.data.data(), M);
      if (pm == kNegInf || sm == kNegInf) continue;
      double scale = std::exp(pm + sm - g);
      for (int64_t a = 0; a < N; ++a)
        ep[static_cast<size_t>(a)] = P[a] == kNegInf ? 0.0 : std::exp(P[a] - pm);
      for (int64_t s = 0; s < M; ++s)
        es[static_cast<size_t>(s)] = Sb[s] == kNegInf ? 0.0 : std::exp(Sb[s] - sm) * scale;
      for (int64_t a = 0; a < N; ++a) {
        double ea = ep[static_cast<size_t>(a)];
        if (ea == 0.0) continue;
        double* urow = U.data.data() + a * M;
        for (int64_t s = 0; s < M; ++s) urow[s] += ea * es[static_cast<size_t>(s)];
      }
    }
  };

  if (g != kNegInf) {
    accumulate(as_left, *ul);
    accumulate(as_right, *ur);
    for (int64_t b = 0; b < M; ++b) {
      double raw = 0.0;
      for (int64_t a = 0; a < N; ++a) {
        const double* binA = cache->expbin.data() + a * M * M;
        const double* ulr = ul->data.data() + a * M;
        const double* urr = ur->data.data() + a * M;
        // left-child contexts: bin[A,B,c] row; right-child: bin[A,b,B] column
        const double* brow = binA + b * M;
        double s = 0.0;
        for (int64_t c = 0; c < M; ++c) s += brow[c] * ulr[c];
        for (int64_t bb = 0; bb < M; ++bb) s += binA[bb * M + b] * urr[bb];
        raw += s;
      }
      out[b] = raw > 0.0 ? std::log(raw) + cache->shift + g : kNegInf;
    }
  }

  std::vector<Var> parents = {bin};
  for (const auto& c : as_left) {
    parents.push_back(c.parent_outside);
    parents.push_back(c.sibling_inside);
  }
  for (const auto& c : as_right) {
    parents.push_back(c.parent_outside);
    parents.push_back(c.sibling_inside);
  }
  auto al = as_left;
  auto ar = as_right;
  return t.custom(
      "outside_step", parents, std::move(out),
      [bin, al = std::move(al), ar = std::move(ar), cache, ul, ur, g, N, M](Tape& t, int32_t id) {
        if (g == kNegInf) return;
        const Tensor& gout = t.grad(Var{id});
        const Tensor& outv = t.val(Var{id});
        std::vector<double> ghat(static_cast<size_t>(M), 0.0);
        bool any = false;
        for (int64_t b = 0; b < M; ++b) {
          if (gout[b] == 0.0 || outv[b] == kNegInf) continue;
          ghat[static_cast<size_t>(b)] = gout[b] / std::exp(outv[b] - cache->shift - g);
          any = true;
        }
        if (!any) return;

        Tensor& gbin = t.grad_buf(bin);
        Tensor dUL({N, M});  // dU_L[A,c] = sum_B ghat[B]*expbin[A,B,c]
        Tensor dUR({N, M});
        for (int64_t a = 0; a < N; ++a) {
          const double* binA = cache->expbin.data() + a * M * M;
          double* gbinA = gbin.data.data() + a * M * M;
          const double* ulr = ul->data.data() + a * M;
          const double* urr = ur->data.data() + a * M;
          double* dulr = dUL.data.data() + a * M;
          double* durr = dUR.data.data() + a * M;
          for (int64_t b = 0; b < M; ++b) {
            double gb = ghat[static_cast<size_t>(b)];
            if (gb == 0.0) continue;
            const double* brow = binA + b * M;
            double* gbrow = gbinA + b * M;
            for (int64_t c = 0; c < M; ++c) {
              gbrow[c] += gb * brow[c] * ulr[c];
              dulr[c] += gb * brow[c];
            }
            for (int64_t bb = 0; bb < M; ++bb) {
              gbinA[bb * M + b] += gb * binA[bb * M + b] * urr[bb];
              durr[bb] += gb * binA[bb * M + b];
            }
          }
        }

        auto backprop_ctx = [&](const std::vector<OutsideContext>& ctxs, const Tensor& dU) {
          std::vector<double> ep(static_cast<size_t>(N)), es(static_cast<size_t>(M));
          for (const auto& c : ctxs) {
            const Tensor& P = t.val(c.parent_outside);
            const Tensor& Sb = t.val(c.sibling_inside);
            double pm = max_finite(P.data.data(), N), sm = max_finite(Sb.data.data(), M);
            if (pm == kNegInf || sm == kNegInf) continue;
            double scale = std::exp(pm + sm - g);
            for (int64_t a = 0; a < N; ++a)
              ep[static_cast<size_t>(a)] = P[a] == kNegInf ? 0.0 : std::exp(P[a] - pm);
            for (int64_t s = 0; s < M; ++s)
              es[static_cast<size_t>(s)] = Sb[s] == kNegInf ? 0.0 : std::exp(Sb[s] - sm) * scale;
            Tensor& gp = t.grad_buf(c.parent_outside);
            Tensor& gs = t.grad_buf(c.sibling_inside);
            for (int64_t a = 0; a < N; ++a) {
              double ea = ep[static_cast<size_t>(a)];
              if (ea == 0.0) continue;
              const double* durow = dU.data.data() + a * M;
              double acc = 0.0;
              for (int64_t s = 0; s < M; ++s) {
                double w = durow[s] * es[static_cast<size_t>(s)];
                acc += w;
                gs[s] += w * ea;
              }
              gp[a] += ea * acc;
            }
          }
        };
        backprop_ctx(al, dUL);
        backprop_ctx(ar, dUR);
      });
}

}  // namespace detail

// Differentiable chart over one sentence: log-space inside values per span
// (padded to the full symbol axis: NT block first, PT block after), the
// sentence log-likelihood, and optionally outside values plus marginals for
// the eligible spans 2 <= j-i <= n-1.
struct ChartVars {
  int n = 0;
  Var logz;
  std::vector<Var> inside;   // indexed span_index(i,j)
  std::vector<Var> outside;  // same indexing; empty unless marginals requested
  std::vector<std::pair<int, int>> eligible;
  Var marginals;  // {K} probabilities aligned with `eligible`

  int span_index(int i, int j) const { return i * (n + 1) + j; }
};

inline std::vector<std::pair<int, int>> eligible_spans(int n) {
  std::vector<std::pair<int, int>> out;
  for (int len = 2; len <= n - 1; ++len)
    for (int i = 0; i + len <= n; ++i) out.push_back({i, i + len});
  return out;
}

// Exact inside pass; when with_marginals is set, adds the outside pass and
// the per-span constituent posteriors, all differentiable.
inline ChartVars build_chart(Tape& t, const Sentence& s, const RuleTable& rt,
                             bool with_marginals) {
  int n = s.n();
  if (n < 2) throw std::invalid_argument("build_chart: sentence length must be >= 2");
  int64_t N = rt.n_nt, M = rt.n_symbols();

  auto cache = std::make_shared<BinExpCache>(t.val(rt.binary_logp));
  Var bin = rt.binary_logp;

  ChartVars cv;
  cv.n = n;
  cv.inside.resize(static_cast<size_t>((n + 1) * (n + 1)), Var{});

  // width-1 spans: terminal log-probs, PT block
  for (int i = 0; i < n; ++i) {
    Var term_col = t.col(rt.term_logp, s.tokens[static_cast<size_t>(i)]);
    cv.inside[static_cast<size_t>(cv.span_index(i, i + 1))] = t.pad(term_col, N, M, kNegInf);
  }

  for (int len = 2; len <= n; ++len) {
    for (int i = 0; i + len <= n; ++i) {
      int j = i + len;
      std::vector<std::pair<Var, Var>> splits;
      splits.reserve(static_cast<size_t>(len - 1));
      for (int k = i + 1; k < j; ++k)
        splits.push_back({cv.inside[static_cast<size_t>(cv.span_index(i, k))],
                          cv.inside[static_cast<size_t>(cv.span_index(k, j))]});
      Var cell = detail::inside_step(t, bin, splits, cache);  // {N}
      cv.inside[static_cast<size_t>(cv.span_index(i, j))] = t.pad(cell, 0, M, kNegInf);
    }
  }

  Var root_inside = t.slice(cv.inside[static_cast<size_t>(cv.span_index(0, n))], 0, N);
  cv.logz = t.logsumexp(t.add(rt.root_logp, root_inside));

  if (!with_marginals) return cv;

  cv.outside.resize(static_cast<size_t>((n + 1) * (n + 1)), Var{});
  cv.outside[static_cast<size_t>(cv.span_index(0, n))] = t.pad(rt.root_logp, 0, M, kNegInf);

  for (int len = n - 1; len >= 1; --len) {
    for (int i = 0; i + len <= n; ++i) {
      int j = i + len;
      if (i == 0 && j == n) continue;
      std::vector<detail::OutsideContext> as_left, as_right;
      for (int j2 = j + 1; j2 <= n; ++j2)
        as_left.push_back({cv.outside[static_cast<size_t>(cv.span_index(i, j2))],
                           cv.inside[static_cast<size_t>(cv.span_index(j, j2))]});
      for (int i0 = 0; i0 < i; ++i0)
        as_right.push_back({cv.outside[static_cast<size_t>(cv.span_index(i0, j))],
                            cv.inside[static_cast<size_t>(cv.span_index(i0, i))]});
      cv.outside[static_cast<size_t>(cv.span_index(i, j))] =
          detail::outside_step(t, bin, as_left, as_right, cache);
    }
  }

  cv.eligible = eligible_spans(n);
  if (!cv.eligible.empty()) {
    std::vector<Var> per_span;
    per_span.reserve(cv.eligible.size());
    for (auto [i, j] : cv.eligible) {
      Var sum_b = t.add(cv.inside[static_cast<size_t>(cv.span_index(i, j))],
                        cv.outside[static_cast<size_t>(cv.span_index(i, j))]);
      per_span.push_back(t.exp_(t.sub(t.logsumexp(sum_b), cv.logz)));
    }
    cv.marginals = t.concat(per_span);
  }
  return cv;
}

// ---- Viterbi (max-product) parse over plain rule-table values ----

// Ties break toward the smaller split k, then lower (B, C) symbol indices;
// the root symbol ties break toward the lower index.
inline ParseTree best_parse(const Sentence& s, const RuleTableValues& rt) {
  int n = s.n();
  if (n < 2) throw std::invalid_argument("best_parse: sentence length must be >= 2");
  int64_t N = rt.n_nt, P = rt.n_pt, M = rt.n_symbols();

  auto idx = [n](int i, int j) { return static_cast<size_t>(i * (n + 1) + j); };
  // scores per span over the padded symbol axis
  std::vector<std::vector<double>> best(static_cast<size_t>((n + 1) * (n + 1)));
  struct Back {
    int k = -1;
    int b = -1, c = -1;
  };
  std::vector<std::vector<Back>> bp(static_cast<size_t>((n + 1) * (n + 1)));

  for (int i = 0; i < n; ++i) {
    std::vector<double> cell(static_cast<size_t>(M), kNegInf);
    for (int64_t p = 0; p < P; ++p)
      cell[static_cast<size_t>(N + p)] = rt.term_logp.at(p, s.tokens[static_cast<size_t>(i)]);
    best[idx(i, i + 1)] = std::move(cell);
  }

  for (int len = 2; len <= n; ++len) {
    for (int i = 0; i + len <= n; ++i) {
      int j = i + len;
      std::vector<double> cell(static_cast<size_t>(M), kNegInf);
      std::vector<Back> cellbp(static_cast<size_t>(M));
      for (int k = i + 1; k < j; ++k) {
        const auto& lc = best[idx(i, k)];
        const auto& rc = best[idx(k, j)];
        for (int64_t b = 0; b < M; ++b) {
          if (lc[static_cast<size_t>(b)] == kNegInf) continue;
          for (int64_t c = 0; c < M; ++c) {
            if (rc[static_cast<size_t>(c)] == kNegInf) continue;
            double base = lc[static_cast<size_t>(b)] + rc[static_cast<size_t>(c)];
            for (int64_t a = 0; a < N; ++a) {
              double v = rt.binary_logp.at(a, b, c) + base;
              if (v > cell[static_cast<size_t>(a)]) {
                cell[static_cast<size_t>(a)] = v;
                cellbp[static_cast<size_t>(a)] = Back{k, static_cast<int>(b), static_cast<int>(c)};
              }
            }
          }
        }
      }
      best[idx(i, j)] = std::move(cell);
      bp[idx(i, j)] = std::move(cellbp);
    }
  }

  int root_a = 0;
  double root_best = kNegInf;
  for (int64_t a = 0; a < N; ++a) {
    double v = rt.root_logp[a] + best[idx(0, n)][static_cast<size_t>(a)];
    if (v > root_best) {
      root_best = v;
      root_a = static_cast<int>(a);
    }
  }

  auto symbol_label = [N](int sym) { return "C" + std::to_string(sym); };
  std::function<ParseTree(int, int, int)> rebuild = [&](int i, int j, int sym) -> ParseTree {
    if (j - i == 1)
      return ParseTree::pre(symbol_label(sym), s.raw[static_cast<size_t>(i)]);
    const Back& b = bp[idx(i, j)][static_cast<size_t>(sym)];
    return ParseTree::node(symbol_label(sym),
                           {rebuild(i, b.k, b.b), rebuild(b.k, j, b.c)});
  };

  ParseTree top = rebuild(0, n, root_a);
  top.label = "S";
  return top;
}

// Viterbi log-probability (for invariants: always <= logZ)
inline double viterbi_logprob(const Sentence& s, const RuleTableValues& rt) {
  int n = s.n();
  int64_t N = rt.n_nt, P = rt.n_pt, M = rt.n_symbols();
  auto idx = [n](int i, int j) { return static_cast<size_t>(i * (n + 1) + j); };
  std::vector<std::vector<double>> best(static_cast<size_t>((n + 1) * (n + 1)));
  for (int i = 0; i < n; ++i) {
    std::vector<double> cell(static_cast<size_t>(M), kNegInf);
    for (int64_t p = 0; p < P; ++p)
      cell[static_cast<size_t>(N + p)] = rt.term_logp.at(p, s.tokens[static_cast<size_t>(i)]);
    best[idx(i, i + 1)] = std::move(cell);
  }
  for (int len = 2; len <= n; ++len)
    for (int i = 0; i + len <= n; ++i) {
      int j = i + len;
      std::vector<double> cell(static_cast<size_t>(M), kNegInf);
      for (int k = i + 1; k < j; ++k)
        for (int64_t b = 0; b < M; ++b) {
          double lv = best[idx(i, k)][static_cast<size_t>(b)];
          if (lv == kNegInf) continue;
          for (int64_t c = 0; c < M; ++c) {
            double rv = best[idx(k, j)][static_cast<size_t>(c)];
            if (rv == kNegInf) continue;
            for (int64_t a = 0; a < N; ++a)
              cell[static_cast<size_t>(a)] =
                  std::max(cell[static_cast<size_t>(a)], rt.binary_logp.at(a, b, c) + lv + rv);
          }
        }
      best[idx(i, j)] = std::move(cell);
    }
  double out = kNegInf;
  for (int64_t a = 0; a < N; ++a)
    out = std::max(out, rt.root_logp[a] + best[idx(0, n)][static_cast<size_t>(a)]);
  return out;
}

}  // namespace gg
