#pragma once

#include <utility>

#include "groundgram/chart.hpp"
#include "groundgram/grammar.hpp"
#include "groundgram/nn.hpp"

namespace gg {

// Amortized posterior q(z|s): word embeddings -> single-layer bidirectional
// recurrent encoder -> max-pool over positions -> linear heads for the mean
// and log-variance.
struct PosteriorParams {
  Param* word_embed = nullptr;  // {V, w}; may be shared with the span encoder
  LstmParams fwd, bwd;
  LinearLayer head_mu, head_logvar;

  static PosteriorParams create(ParamStore& ps, Param* shared_embed, int64_t vocab,
                                int64_t word_dim, int64_t hidden, int64_t z_dim, Rng& rng) {
    PosteriorParams p;
    p.word_embed =
        shared_embed ? shared_embed
                     : &ps.create("posterior.word_embed", xavier_uniform({vocab, word_dim}, rng));
    p.fwd = LstmParams::create(ps, "posterior.lstm_f", word_dim, hidden, rng);
    p.bwd = LstmParams::create(ps, "posterior.lstm_b", word_dim, hidden, rng);
    p.head_mu = LinearLayer::create(ps, "posterior.mu", z_dim, 2 * hidden, rng);
    p.head_logvar = LinearLayer::create(ps, "posterior.logvar", z_dim, 2 * hidden, rng);
    return p;
  }
};

struct PosteriorOut {
  Var mu;
  Var logvar;
};

inline PosteriorOut encode_posterior(Tape& t, const Sentence& s, const PosteriorParams& p) {
  if (s.n() < 2) throw std::invalid_argument("encode_posterior: sentence length must be >= 2");
  Var table = t.param(*p.word_embed);
  Var x = t.gather_rows(table, s.tokens);
  Var hf = lstm_run(t, x, lstm_vars(t, p.fwd), false);
  Var hb = lstm_run(t, x, lstm_vars(t, p.bwd), true);
  Var pooled = t.max_over_rows(t.hcat(hf, hb));
  return PosteriorOut{p.head_mu.apply(t, pooled), p.head_logvar.apply(t, pooled)};
}

// z = mu + exp(logvar/2) * eps  (reparameterized sample)
inline Var sample_z(Tape& t, const PosteriorOut& q, const Tensor& eps) {
  if (eps.size() != t.val(q.mu).size())
    throw std::invalid_argument("sample_z: noise dimension mismatch");
  Var sd = t.exp_(t.scale(q.logvar, 0.5));
  return t.add(q.mu, t.mul(sd, t.input(eps)));
}

// KL(q || N(0, I)) = 0.5 * sum(mu^2 + exp(logvar) - logvar - 1)
inline Var kl_divergence(Tape& t, const PosteriorOut& q) {
  Var term = t.sub(t.add(t.mul(q.mu, q.mu), t.exp_(q.logvar)), q.logvar);
  return t.scale(t.sum(t.add_const(term, -1.0)), 0.5);
}

inline double kl_closed_form(const Tensor& mu, const Tensor& logvar) {
  double s = 0.0;
  for (int64_t i = 0; i < mu.size(); ++i)
    s += mu[i] * mu[i] + std::exp(logvar[i]) - logvar[i] - 1.0;
  return 0.5 * s;
}

// Single-sample ELBO: log p(s|z) - KL, with z reparameterized from eps.
struct ElboOut {
  Var elbo;
  Var logz;
  Var kl;
  Var z;
};

inline ElboOut elbo(Tape& t, const Sentence& s, const GrammarParams& g,
                    const PosteriorParams& p, const Tensor& eps) {
  PosteriorOut q = encode_posterior(t, s, p);
  Var z = sample_z(t, q, eps);
  RuleTable rt = rule_logprobs(t, g, z);
  ChartVars chart = build_chart(t, s, rt, /*with_marginals=*/false);
  Var kl = kl_divergence(t, q);
  return ElboOut{t.sub(chart.logz, kl), chart.logz, kl, z};
}

}  // namespace gg
