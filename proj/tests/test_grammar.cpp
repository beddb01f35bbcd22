#include <catch2/catch_amalgamated.hpp>

#include "groundgram/fdcheck.hpp"
#include "groundgram/grammar.hpp"

using namespace gg;

namespace {

GrammarSpec tiny_spec() {
  GrammarSpec spec;
  spec.n_nonterminals = 2;
  spec.n_preterminals = 3;
  spec.vocab = Vocab::from_words({"a", "b", "c"});
  spec.symbol_embed = 6;
  spec.z_dim = 4;
  spec.hidden = 8;
  return spec;
}

Tensor random_z(int64_t d, uint64_t seed) {
  Rng rng(seed, "test-z");
  Tensor z({d});
  for (auto& v : z.data) v = rng.normal();
  return z;
}

}  // namespace

TEST_CASE("vocab builds with UNK at index 0 and a frequency floor") {
  std::vector<std::vector<std::string>> corpus = {
      {"the", "dog", "barks"}, {"the", "cat", "runs"}, {"dog", "runs"}};
  Vocab v = Vocab::build(corpus, 2);
  CHECK(v.words[0] == std::string(Vocab::kUnk));
  CHECK(v.id("the") > 0);
  CHECK(v.id("dog") > 0);
  CHECK(v.id("runs") > 0);
  CHECK(v.id("barks") == 0);  // freq 1 -> UNK
  CHECK(v.id("never-seen") == 0);
  CHECK(v.encode({"the", "barks"})[0] == v.id("the"));
}

TEST_CASE("same seed gives identical parameters, different seeds differ") {
  auto spec = tiny_spec();
  ParamStore ps1, ps2, ps3;
  new_grammar(ps1, spec, 7);
  new_grammar(ps2, spec, 7);
  new_grammar(ps3, spec, 8);

  auto a1 = ps1.all(), a2 = ps2.all(), a3 = ps3.all();
  REQUIRE(a1.size() == a2.size());
  bool any_diff_seed3 = false;
  for (size_t i = 0; i < a1.size(); ++i) {
    CHECK(a1[i]->value.data == a2[i]->value.data);  // bitwise
    if (a1[i]->value.data != a3[i]->value.data) any_diff_seed3 = true;
  }
  CHECK(any_diff_seed3);
}

TEST_CASE("embedding shapes come from the spec") {
  auto spec = tiny_spec();
  ParamStore ps;
  GrammarParams g = new_grammar(ps, spec, 1);
  CHECK(g.w_nt->value.shape == Shape{2, 6});
  CHECK(g.w_pt->value.shape == Shape{3, 6});
  CHECK(g.u_bc->value.shape == Shape{25, 10});
  CHECK(g.u_word->value.shape == Shape{4, 6});  // vocab includes UNK
}

TEST_CASE("rule tables are normalized for any z") {
  auto spec = tiny_spec();
  ParamStore ps;
  GrammarParams g = new_grammar(ps, spec, 3);
  for (uint64_t zi = 0; zi < 4; ++zi) {
    Tape t;
    RuleTable rt = rule_logprobs(t, g, t.input(random_z(spec.z_dim, zi)));
    CHECK(std::abs(Tape::lse(t.val(rt.root_logp).data)) < 1e-9);
    const Tensor& bin = t.val(rt.binary_logp);
    int64_t m2 = spec.n_symbols() * spec.n_symbols();
    for (int64_t a = 0; a < spec.n_nonterminals; ++a)
      CHECK(std::abs(Tape::lse(bin.data.data() + a * m2, m2)) < 1e-9);
    const Tensor& term = t.val(rt.term_logp);
    for (int64_t p = 0; p < spec.n_preterminals; ++p)
      CHECK(std::abs(Tape::lse(term.data.data() + p * term.cols(), term.cols())) < 1e-9);
  }
}

TEST_CASE("zeroed weights force uniform rule distributions") {
  auto spec = tiny_spec();
  ParamStore ps;
  GrammarParams g = new_grammar(ps, spec, 3);
  for (Param* p : ps.all()) p->value.fill(0.0);
  Tape t;
  RuleTable rt = rule_logprobs(t, g, t.input(Tensor({spec.z_dim})));
  double want_root = -std::log(static_cast<double>(spec.n_nonterminals));
  double want_bin = -std::log(static_cast<double>(spec.n_symbols() * spec.n_symbols()));
  double want_term = -std::log(static_cast<double>(spec.vocab.size()));
  for (double v : t.val(rt.root_logp).data) CHECK(v == Catch::Approx(want_root));
  for (double v : t.val(rt.binary_logp).data) CHECK(v == Catch::Approx(want_bin));
  for (double v : t.val(rt.term_logp).data) CHECK(v == Catch::Approx(want_term));
}

TEST_CASE("rule probabilities depend on z (compound property)") {
  auto spec = tiny_spec();
  ParamStore ps;
  GrammarParams g = new_grammar(ps, spec, 5);
  Tape t;
  RuleTable r1 = rule_logprobs(t, g, t.input(random_z(spec.z_dim, 1)));
  RuleTable r2 = rule_logprobs(t, g, t.input(random_z(spec.z_dim, 2)));
  double max_diff = 0.0;
  const Tensor &b1 = t.val(r1.binary_logp), &b2 = t.val(r2.binary_logp);
  for (int64_t i = 0; i < b1.size(); ++i) max_diff = std::max(max_diff, std::abs(b1[i] - b2[i]));
  const Tensor &t1 = t.val(r1.term_logp), &t2 = t.val(r2.term_logp);
  for (int64_t i = 0; i < t1.size(); ++i) max_diff = std::max(max_diff, std::abs(t1[i] - t2[i]));
  CHECK(max_diff > 0.0);
}

TEST_CASE("rule log-probs pass finite differences through every embedding") {
  auto spec = tiny_spec();
  spec.symbol_embed = 4;
  spec.hidden = 5;
  spec.z_dim = 3;
  ParamStore ps;
  GrammarParams g = new_grammar(ps, spec, 11);
  Tensor z = random_z(spec.z_dim, 9);

  LossFn f = [&](bool need_grad) {
    Tape t;
    RuleTable rt = rule_logprobs(t, g, t.input(z));
    // weighted mix of entries from all three tables
    Var flat = t.concat({rt.root_logp, t.reshape(rt.binary_logp, {t.val(rt.binary_logp).size()}),
                         t.reshape(rt.term_logp, {t.val(rt.term_logp).size()})});
    const Tensor& fv = t.val(flat);
    Tensor w(fv.shape);
    for (int64_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.13 * static_cast<double>(i));
    Var loss = t.dot(flat, t.input(w));
    if (need_grad) {
      ps.zero_grad();
      t.backward(loss);
    }
    return t.val(loss).item();
  };
  auto report = finite_diff_check(ps.all(), f, 1e-4);
  INFO("worst: " << (report.worst() ? report.worst()->name : "-"));
  CHECK(report.worst_rel_err < 1e-6);
}
