#pragma once

#include <map>
#include <string>
#include <vector>

#include "groundgram/nn.hpp"
#include "groundgram/rng.hpp"
#include "groundgram/tape.hpp"

namespace gg {

// Ordered word list with UNK at index 0.
struct Vocab {
  std::vector<std::string> words;
  std::map<std::string, int> index;

  static constexpr const char* kUnk = "<unk>";

  static Vocab from_words(std::vector<std::string> ws) {
    Vocab v;
    v.words.push_back(kUnk);
    for (auto& w : ws)
      if (w != kUnk) v.words.push_back(std::move(w));
    for (size_t i = 0; i < v.words.size(); ++i) v.index[v.words[i]] = static_cast<int>(i);
    if (v.index.size() != v.words.size()) throw std::invalid_argument("Vocab: duplicate words");
    return v;
  }

  // words below min_freq map to UNK; insertion order = first occurrence
  static Vocab build(const std::vector<std::vector<std::string>>& sentences, int min_freq = 2,
                     size_t max_size = 2000) {
    std::map<std::string, int> freq;
    std::vector<std::string> order;
    for (const auto& s : sentences)
      for (const auto& w : s) {
        if (freq[w]++ == 0) order.push_back(w);
      }
    std::vector<std::string> kept;
    for (const auto& w : order)
      if (freq[w] >= min_freq && kept.size() + 1 < max_size) kept.push_back(w);
    return from_words(std::move(kept));
  }

  int id(const std::string& w) const {
    auto it = index.find(w);
    return it == index.end() ? 0 : it->second;
  }

  std::vector<int> encode(const std::vector<std::string>& toks) const {
    std::vector<int> out;
    out.reserve(toks.size());
    for (const auto& w : toks) out.push_back(id(w));
    return out;
  }

  int64_t size() const { return static_cast<int64_t>(words.size()); }
};

struct GrammarSpec {
  int64_t n_nonterminals = 10;
  int64_t n_preterminals = 20;
  Vocab vocab;
  int64_t symbol_embed = 64;
  int64_t z_dim = 32;
  int64_t hidden = 128;

  int64_t n_symbols() const { return n_nonterminals + n_preterminals; }

  void validate() const {
    if (n_nonterminals < 1 || n_preterminals < 1)
      throw std::invalid_argument("GrammarSpec: need at least one NT and one PT");
    if (vocab.size() < 2) throw std::invalid_argument("GrammarSpec: vocabulary too small");
    if (symbol_embed < 1 || z_dim < 1 || hidden < 1)
      throw std::invalid_argument("GrammarSpec: bad dims");
  }
};

// Compound-PCFG parameterization: symbol embeddings plus the networks that
// turn a latent vector z into per-rule log-probabilities.
struct GrammarParams {
  GrammarSpec spec;
  Param* w_root = nullptr;  // {s} start-symbol query embedding
  Param* w_nt = nullptr;    // {N, s} lhs embeddings for nonterminals
  Param* w_pt = nullptr;    // {P, s} lhs embeddings for preterminals
  Param* u_nt = nullptr;    // {N, s} rhs embeddings for root rules
  Param* u_bc = nullptr;    // {M*M, s+z} rhs embeddings for binary rules
  Param* u_word = nullptr;  // {V, s} rhs embeddings for terminal rules
  Mlp f_s, f_t;

  std::vector<Param*> all() const {
    std::vector<Param*> out = {w_root, w_nt, w_pt, u_nt, u_bc, u_word};
    for (const Mlp* m : {&f_s, &f_t})
      for (const LinearLayer* l : {&m->lin_in, &m->lin_h1, &m->lin_h2, &m->lin_out}) {
        out.push_back(l->w);
        out.push_back(l->b);
      }
    return out;
  }
};

inline GrammarParams new_grammar(ParamStore& ps, GrammarSpec spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed, streams::param_init);
  GrammarParams g;
  g.spec = spec;
  int64_t s = spec.symbol_embed, z = spec.z_dim;
  int64_t N = spec.n_nonterminals, P = spec.n_preterminals, M = spec.n_symbols();
  g.w_root = &ps.create("grammar.w_root", xavier_uniform({1, s}, rng));
  g.w_nt = &ps.create("grammar.w_nt", xavier_uniform({N, s}, rng));
  g.w_pt = &ps.create("grammar.w_pt", xavier_uniform({P, s}, rng));
  g.u_nt = &ps.create("grammar.u_nt", xavier_uniform({N, s}, rng));
  g.u_bc = &ps.create("grammar.u_bc", xavier_uniform({M * M, s + z}, rng));
  g.u_word = &ps.create("grammar.u_word", xavier_uniform({spec.vocab.size(), s}, rng));
  g.f_s = Mlp::create(ps, "grammar.f_s", s + z, spec.hidden, s, rng);
  g.f_t = Mlp::create(ps, "grammar.f_t", s + z, spec.hidden, s, rng);
  return g;
}

// Log-probability tables for one z. Each conditional distribution is
// normalized by construction (log-softmax over its support).
struct RuleTable {
  Var root_logp;    // {N}
  Var binary_logp;  // {N, M, M}
  Var term_logp;    // {P, V}
  int64_t n_nt = 0, n_pt = 0;
  int64_t n_symbols() const { return n_nt + n_pt; }
};

inline RuleTable rule_logprobs(Tape& t, const GrammarParams& g, Var z) {
  const GrammarSpec& spec = g.spec;
  if (t.val(z).size() != spec.z_dim)
    throw std::invalid_argument("rule_logprobs: z has wrong dimension");
  int64_t N = spec.n_nonterminals, P = spec.n_preterminals, M = spec.n_symbols();

  RuleTable rt;
  rt.n_nt = N;
  rt.n_pt = P;

  // root: softmax_A  u_A . f_s([w_S; z])
  Var w_root_vec = t.row(t.param(*g.w_root), 0);
  Var fs = g.f_s.apply(t, t.concat({w_root_vec, z}));
  rt.root_logp = t.log_softmax(t.matmul(t.param(*g.u_nt), fs));

  // binary: softmax_{B,C}  u_BC . [w_A; z]  (no MLP on binary rules)
  Var w_nt_v = t.param(*g.w_nt);
  std::vector<Var> rows;
  rows.reserve(static_cast<size_t>(N));
  for (int64_t a = 0; a < N; ++a) rows.push_back(t.concat({t.row(w_nt_v, a), z}));
  Var wa_z = t.stack_rows(rows);                      // {N, s+z}
  Var bin_scores = t.matmul_nt(wa_z, t.param(*g.u_bc));  // {N, M*M}
  rt.binary_logp = t.reshape(t.log_softmax_rows(bin_scores), {N, M, M});

  // terminal: softmax_w  u_w . f_t([w_T; z])
  Var w_pt_v = t.param(*g.w_pt);
  std::vector<Var> trows;
  trows.reserve(static_cast<size_t>(P));
  for (int64_t p = 0; p < P; ++p) trows.push_back(t.concat({t.row(w_pt_v, p), z}));
  Var ft = g.f_t.apply(t, t.stack_rows(trows));          // {P, s}
  rt.term_logp = t.log_softmax_rows(t.matmul_nt(ft, t.param(*g.u_word)));  // {P, V}

  return rt;
}

// Plain-value copy for evaluation paths that do not need gradients.
struct RuleTableValues {
  Tensor root_logp;    // {N}
  Tensor binary_logp;  // {N, M, M}
  Tensor term_logp;    // {P, V}
  int64_t n_nt = 0, n_pt = 0;
  int64_t n_symbols() const { return n_nt + n_pt; }
};

inline RuleTableValues rule_table_values(const Tape& t, const RuleTable& rt) {
  RuleTableValues v;
  v.root_logp = t.val(rt.root_logp);
  v.binary_logp = t.val(rt.binary_logp);
  v.term_logp = t.val(rt.term_logp);
  v.n_nt = rt.n_nt;
  v.n_pt = rt.n_pt;
  return v;
}

}  // namespace gg
