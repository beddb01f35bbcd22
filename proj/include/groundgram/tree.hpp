#pragma once

#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gg {

// Constituency tree. Preterminal nodes carry the surface word; internal
// nodes carry children. Labels and words must not contain '(', ')' or
// whitespace -- the bracketed form round-trips bit-exactly under that rule.
struct ParseTree {
  std::string label;
  std::string word;
  std::vector<ParseTree> children;

  bool is_preterminal() const { return children.empty(); }

  static ParseTree pre(std::string lbl, std::string w) {
    ParseTree t;
    t.label = std::move(lbl);
    t.word = std::move(w);
    return t;
  }

  static ParseTree node(std::string lbl, std::vector<ParseTree> kids) {
    ParseTree t;
    t.label = std::move(lbl);
    t.children = std::move(kids);
    return t;
  }

  int leaf_count() const {
    if (is_preterminal()) return 1;
    int n = 0;
    for (const auto& c : children) n += c.leaf_count();
    return n;
  }

  void leaves_into(std::vector<std::string>& out) const {
    if (is_preterminal()) {
      out.push_back(word);
      return;
    }
    for (const auto& c : children) c.leaves_into(out);
  }

  std::vector<std::string> leaves() const {
    std::vector<std::string> out;
    leaves_into(out);
    return out;
  }

  void preterminals_into(std::vector<std::string>& out) const {
    if (is_preterminal()) {
      out.push_back(label);
      return;
    }
    for (const auto& c : children) c.preterminals_into(out);
  }

  // per-token preterminal labels, left to right
  std::vector<std::string> preterminal_labels() const {
    std::vector<std::string> out;
    preterminals_into(out);
    return out;
  }

  std::string to_bracketed() const {
    std::string out;
    write(out);
    return out;
  }

  static ParseTree parse(const std::string& s) {
    size_t pos = 0;
    ParseTree t = parse_at(s, pos);
    while (pos < s.size() && s[pos] == ' ') ++pos;
    if (pos != s.size()) throw std::invalid_argument("ParseTree::parse: trailing input");
    return t;
  }

 private:
  void write(std::string& out) const {
    out += '(';
    out += label;
    if (is_preterminal()) {
      out += ' ';
      out += word;
    } else {
      for (const auto& c : children) {
        out += ' ';
        c.write(out);
      }
    }
    out += ')';
  }

  static ParseTree parse_at(const std::string& s, size_t& pos) {
    auto skip = [&] {
      while (pos < s.size() && s[pos] == ' ') ++pos;
    };
    auto token = [&] {
      size_t start = pos;
      while (pos < s.size() && s[pos] != ' ' && s[pos] != '(' && s[pos] != ')') ++pos;
      if (start == pos) throw std::invalid_argument("ParseTree::parse: empty token");
      return s.substr(start, pos - start);
    };
    skip();
    if (pos >= s.size() || s[pos] != '(') throw std::invalid_argument("ParseTree::parse: expected (");
    ++pos;
    ParseTree t;
    t.label = token();
    skip();
    if (pos < s.size() && s[pos] == '(') {
      while (pos < s.size() && s[pos] == '(') {
        t.children.push_back(parse_at(s, pos));
        skip();
      }
    } else {
      t.word = token();
      skip();
    }
    if (pos >= s.size() || s[pos] != ')') throw std::invalid_argument("ParseTree::parse: expected )");
    ++pos;
    return t;
  }
};

// Internal constituent spans [i,j) with 2 <= j-i <= n-1: excludes single
// words and the full-sentence span.
using SpanSet = std::set<std::pair<int, int>>;

inline void collect_spans(const ParseTree& t, int start, int n, SpanSet& out) {
  if (t.is_preterminal()) return;
  int pos = start;
  for (const auto& c : t.children) {
    int len = c.leaf_count();
    collect_spans(c, pos, n, out);
    pos += len;
  }
  int width = pos - start;
  if (width >= 2 && width <= n - 1) out.insert({start, pos});
}

inline SpanSet tree_spans(const ParseTree& t) {
  SpanSet out;
  collect_spans(t, 0, t.leaf_count(), out);
  return out;
}

enum class Branching { kLeft, kRight };

inline ParseTree branching_baseline(const std::vector<std::string>& words, Branching dir) {
  if (words.size() < 2) throw std::invalid_argument("branching_baseline: need n >= 2");
  auto leaf = [&](size_t i) { return ParseTree::pre("X", words[i]); };
  if (dir == Branching::kRight) {
    ParseTree t = leaf(words.size() - 1);
    for (size_t i = words.size() - 1; i-- > 0;) t = ParseTree::node("X", {leaf(i), std::move(t)});
    return t;
  }
  ParseTree t = leaf(0);
  for (size_t i = 1; i < words.size(); ++i) t = ParseTree::node("X", {std::move(t), leaf(i)});
  return t;
}

}  // namespace gg
