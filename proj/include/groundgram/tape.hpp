#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "groundgram/tensor.hpp"

namespace gg {

// Thrown when a forward value, loss, or gradient goes NaN/+inf.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Named trainable tensor. Gradients accumulate across tapes until zeroed.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(v.shape), grad(v.shape) {
    value = std::move(v);
  }
  void zero_grad() { grad.fill(0.0); }
};

// Insertion-ordered registry of parameters; iteration order is the
// deterministic order used by the optimizer and checkpoint format.
class ParamStore {
 public:
  Param& create(const std::string& name, Tensor init) {
    if (by_name_.count(name)) throw std::logic_error("duplicate parameter: " + name);
    params_.push_back(std::make_unique<Param>(name, std::move(init)));
    by_name_[name] = params_.back().get();
    return *params_.back();
  }

  Param* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  Param& at(const std::string& name) {
    Param* p = find(name);
    if (!p) throw std::out_of_range("no such parameter: " + name);
    return *p;
  }

  std::vector<Param*> all() {
    std::vector<Param*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  size_t count() const { return params_.size(); }

  int64_t total_size() const {
    int64_t n = 0;
    for (auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  double grad_norm() const {
    double s = 0.0;
    for (auto& p : params_)
      for (double g : p->grad.data) s += g * g;
    return std::sqrt(s);
  }

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, Param*> by_name_;
};

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Define-by-run reverse-mode tape. Forward values are computed eagerly at
// node creation; backward walks nodes in reverse creation order (a reverse
// topological order by construction) exactly once.
class Tape {
 public:
  explicit Tape(bool check_values = true) : check_values_(check_values) {}

  const Tensor& val(Var v) const { return nodes_[idx(v)].value; }
  const Tensor& grad(Var v) const { return nodes_[idx(v)].grad; }
  size_t num_nodes() const { return nodes_.size(); }

  // ---- leaves ----

  Var input(Tensor t) { return push("input", {}, std::move(t), nullptr); }

  Var constant(double v) { return input(Tensor::scalar(v)); }

  Var param(Param& p) {
    Var v = push("param", {}, p.value, nullptr);
    nodes_[idx(v)].bound = &p;
    return v;
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    const Tensor &A = val(a), &B = val(b);
    require(A.same_shape(B), "add: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
    return push("add", {a, b}, std::move(out), [a, b](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      t.accum(a, g.data.data(), g.size());
      t.accum(b, g.data.data(), g.size());
    });
  }

  Var sub(Var a, Var b) {
    const Tensor &A = val(a), &B = val(b);
    require(A.same_shape(B), "sub: shape mismatch");
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] - B[i];
    return push("sub", {a, b}, std::move(out), [a, b](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      t.accum(a, g.data.data(), g.size());
      Tensor& gb = t.grad_buf(b);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
  }

  Var mul(Var a, Var b) {
    const Tensor &A = val(a), &B = val(b);
    require(A.same_shape(B), "mul: shape mismatch");
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
    return push("mul", {a, b}, std::move(out), [a, b](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor &A = t.val(a), &B = t.val(b);
      Tensor &ga = t.grad_buf(a), &gb = t.grad_buf(b);
      for (int64_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * B[i];
        gb[i] += g[i] * A[i];
      }
    });
  }

  Var scale(Var a, double k) {
    const Tensor& A = val(a);
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] * k;
    return push("scale", {a}, std::move(out), [a, k](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * k;
    });
  }

  Var add_const(Var a, double k) {
    const Tensor& A = val(a);
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] + k;
    return push("add_const", {a}, std::move(out), [a](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      t.accum(a, g.data.data(), g.size());
    });
  }

  Var neg(Var a) { return scale(a, -1.0); }

  // broadcast-add a scalar node to every element of a
  Var add_scalar(Var a, Var s) {
    const Tensor& A = val(a);
    require(val(s).size() == 1, "add_scalar: second arg must be scalar");
    double sv = val(s)[0];
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] + sv;
    return push("add_scalar", {a, s}, std::move(out), [a, s](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
      t.accum(a, g.data.data(), g.size());
      double tot = 0.0;
      for (int64_t i = 0; i < g.size(); ++i) tot += g[i];
      t.grad_buf(s)[0] += tot;
    });
  }

  Var relu(Var a) {
    const Tensor& A = val(a);
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] > 0.0 ? A[i] : 0.0;
    return push("relu", {a}, std::move(out), [a](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& A = t.val(a);
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.size(); ++i)
        if (A[i] > 0.0) ga[i] += g[i];
    });
  }

  Var tanh_(Var a) {
    const Tensor& A = val(a);
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = std::tanh(A[i]);
    return push("tanh", {a}, std::move(out), [a](Tape& t, int32_t id) {
      const Tensor &g = t.nodes_[id].grad, &y = t.nodes_[id].value;
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    });
  }

  Var sigmoid(Var a) {
    const Tensor& A = val(a);
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-A[i]));
    return push("sigmoid", {a}, std::move(out), [a](Tape& t, int32_t id) {
      const Tensor &g = t.nodes_[id].grad, &y = t.nodes_[id].value;
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }

  Var exp_(Var a) {
    const Tensor& A = val(a);
    Tensor out(A.shape);
    for (int64_t i = 0; i < A.size(); ++i) out[i] = std::exp(A[i]);
    return push("exp", {a}, std::move(out), [a](Tape& t, int32_t id) {
      const Tensor &g = t.nodes_[id].grad, &y = t.nodes_[id].value;
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    });
  }

  // ---- shape ----

  Var concat(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat: empty");
    int64_t n = 0;
    for (Var p : parts) n += val(p).size();
    Tensor out({n});
    int64_t off = 0;
    for (Var p : parts) {
      const Tensor& P = val(p);
      std::copy(P.data.begin(), P.data.end(), out.data.begin() + off);
      off += P.size();
    }
    auto ps = parts;
    return push("concat", parts, std::move(out), [ps](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      int64_t off = 0;
      for (Var p : ps) {
        int64_t n = t.val(p).size();
        Tensor& gp = t.grad_buf(p);
        for (int64_t i = 0; i < n; ++i) gp[i] += g[off + i];
        off += n;
      }
    });
  }

  Var reshape(Var a, Shape s) {
    const Tensor& A = val(a);
    require(numel(s) == A.size(), "reshape: element count mismatch");
    Tensor out(std::move(s), A.data);
    return push("reshape", {a}, std::move(out), [a](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      t.accum(a, g.data.data(), g.size());
    });
  }

  // rows [i, j) of a matrix
  Var rows(Var m, int64_t i, int64_t j) {
    const Tensor& M = val(m);
    require(M.rank() == 2 && 0 <= i && i < j && j <= M.rows(), "rows: bad slice");
    int64_t c = M.cols();
    Tensor out({j - i, c});
    std::copy(M.data.begin() + i * c, M.data.begin() + j * c, out.data.begin());
    return push("rows", {m}, std::move(out), [m, i, c](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& gm = t.grad_buf(m);
      for (int64_t k = 0; k < g.size(); ++k) gm[i * c + k] += g[k];
    });
  }

  Var row(Var m, int64_t i) {
    const Tensor& M = val(m);
    require(M.rank() == 2 && 0 <= i && i < M.rows(), "row: out of range");
    int64_t c = M.cols();
    Tensor out({c});
    std::copy(M.data.begin() + i * c, M.data.begin() + (i + 1) * c, out.data.begin());
    return push("row", {m}, std::move(out), [m, i, c](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& gm = t.grad_buf(m);
      for (int64_t k = 0; k < c; ++k) gm[i * c + k] += g[k];
    });
  }

  Var col(Var m, int64_t j) {
    const Tensor& M = val(m);
    require(M.rank() == 2 && 0 <= j && j < M.cols(), "col: out of range");
    int64_t r = M.rows(), c = M.cols();
    Tensor out({r});
    for (int64_t i = 0; i < r; ++i) out[i] = M[i * c + j];
    return push("col", {m}, std::move(out), [m, j, r, c](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& gm = t.grad_buf(m);
      for (int64_t i = 0; i < r; ++i) gm[i * c + j] += g[i];
    });
  }

  // place a vector into a larger one at `offset`, padding with `fill`
  Var pad(Var a, int64_t offset, int64_t total, double fill) {
    const Tensor& A = val(a);
    require(A.rank() == 1 && offset >= 0 && offset + A.size() <= total, "pad: bad layout");
    Tensor out({total}, fill);
    std::copy(A.data.begin(), A.data.end(), out.data.begin() + offset);
    return push("pad", {a}, std::move(out), [a, offset](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g[offset + i];
    });
  }

  Var slice(Var a, int64_t i, int64_t j) {
    const Tensor& A = val(a);
    require(A.rank() == 1 && 0 <= i && i < j && j <= A.size(), "slice: bad range");
    Tensor out({j - i});
    std::copy(A.data.begin() + i, A.data.begin() + j, out.data.begin());
    return push("slice", {a}, std::move(out), [a, i](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& ga = t.grad_buf(a);
      for (int64_t k = 0; k < g.size(); ++k) ga[i + k] += g[k];
    });
  }

  // column-wise concat of {n,c1} and {n,c2} -> {n,c1+c2}
  Var hcat(Var a, Var b) {
    const Tensor &A = val(a), &B = val(b);
    require(A.rank() == 2 && B.rank() == 2 && A.rows() == B.rows(), "hcat: row mismatch");
    int64_t n = A.rows(), c1 = A.cols(), c2 = B.cols();
    Tensor out({n, c1 + c2});
    for (int64_t i = 0; i < n; ++i) {
      std::copy(A.data.begin() + i * c1, A.data.begin() + (i + 1) * c1,
                out.data.begin() + i * (c1 + c2));
      std::copy(B.data.begin() + i * c2, B.data.begin() + (i + 1) * c2,
                out.data.begin() + i * (c1 + c2) + c1);
    }
    return push("hcat", {a, b}, std::move(out), [a, b, n, c1, c2](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
      Tensor &ga = t.grad_buf(a), &gb = t.grad_buf(b);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t k = 0; k < c1; ++k) ga[i * c1 + k] += g[i * (c1 + c2) + k];
        for (int64_t k = 0; k < c2; ++k) gb[i * c2 + k] += g[i * (c1 + c2) + c1 + k];
      }
    });
  }

  Var stack_rows(const std::vector<Var>& rows_) {
    require(!rows_.empty(), "stack_rows: empty");
    int64_t c = val(rows_[0]).size();
    Tensor out({static_cast<int64_t>(rows_.size()), c});
    for (size_t r = 0; r < rows_.size(); ++r) {
      const Tensor& R = val(rows_[r]);
      require(R.rank() == 1 && R.size() == c, "stack_rows: ragged rows");
      std::copy(R.data.begin(), R.data.end(), out.data.begin() + static_cast<int64_t>(r) * c);
    }
    auto rs = rows_;
    return push("stack_rows", rows_, std::move(out), [rs, c](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      for (size_t r = 0; r < rs.size(); ++r) {
        Tensor& gr = t.grad_buf(rs[r]);
        for (int64_t k = 0; k < c; ++k) gr[k] += g[static_cast<int64_t>(r) * c + k];
      }
    });
  }

  // embedding lookup: rows of `table` at `idx`
  Var gather_rows(Var table, std::vector<int> idx) {
    const Tensor& T = val(table);
    require(T.rank() == 2, "gather_rows: table must be 2-d");
    int64_t c = T.cols();
    Tensor out({static_cast<int64_t>(idx.size()), c});
    for (size_t r = 0; r < idx.size(); ++r) {
      require(0 <= idx[r] && idx[r] < T.rows(), "gather_rows: index out of range");
      std::copy(T.data.begin() + idx[r] * c, T.data.begin() + (idx[r] + 1) * c,
                out.data.begin() + static_cast<int64_t>(r) * c);
    }
    return push("gather_rows", {table}, std::move(out),
                [table, idx = std::move(idx), c](Tape& t, int32_t id) {
                  const Tensor& g = t.nodes_[id].grad;
                  Tensor& gt = t.grad_buf(table);
                  for (size_t r = 0; r < idx.size(); ++r)
                    for (int64_t k = 0; k < c; ++k)
                      gt[idx[r] * c + k] += g[static_cast<int64_t>(r) * c + k];
                });
  }

  // ---- linear algebra ----

  // A{r,k} x B{k,c} -> {r,c}; also A{r,k} x b{k} -> {r}
  Var matmul(Var a, Var b) {
    const Tensor &A = val(a), &B = val(b);
    require(A.rank() == 2, "matmul: lhs must be 2-d");
    if (B.rank() == 1) {
      require(A.cols() == B.size(), "matmul: inner dim mismatch");
      int64_t r = A.rows(), k = A.cols();
      Tensor out({r});
      for (int64_t i = 0; i < r; ++i) {
        double s = 0.0;
        const double* ar = A.data.data() + i * k;
        for (int64_t j = 0; j < k; ++j) s += ar[j] * B[j];
        out[i] = s;
      }
      return push("matvec", {a, b}, std::move(out), [a, b, r, k](Tape& t, int32_t id) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor &A = t.val(a), &B = t.val(b);
        Tensor &ga = t.grad_buf(a), &gb = t.grad_buf(b);
        for (int64_t i = 0; i < r; ++i) {
          double gi = g[i];
          if (gi == 0.0) continue;
          const double* ar = A.data.data() + i * k;
          double* gar = ga.data.data() + i * k;
          for (int64_t j = 0; j < k; ++j) {
            gar[j] += gi * B[j];
            gb[j] += gi * ar[j];
          }
        }
      });
    }
    require(B.rank() == 2 && A.cols() == B.rows(), "matmul: inner dim mismatch");
    int64_t r = A.rows(), k = A.cols(), c = B.cols();
    Tensor out({r, c});
    matmul_raw(A.data.data(), B.data.data(), out.data.data(), r, k, c);
    return push("matmul", {a, b}, std::move(out), [a, b, r, k, c](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor &A = t.val(a), &B = t.val(b);
      Tensor &ga = t.grad_buf(a), &gb = t.grad_buf(b);
      // gA += g . B^T
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) {
          double gij = g[i * c + j];
          if (gij == 0.0) continue;
          const double* brow = B.data.data() + 0 * c + j;
          double* garow = ga.data.data() + i * k;
          for (int64_t l = 0; l < k; ++l) garow[l] += gij * brow[l * c];
        }
      // gB += A^T . g
      for (int64_t l = 0; l < k; ++l)
        for (int64_t i = 0; i < r; ++i) {
          double ail = A[i * k + l];
          if (ail == 0.0) continue;
          const double* grow = g.data.data() + i * c;
          double* gbrow = gb.data.data() + l * c;
          for (int64_t j = 0; j < c; ++j) gbrow[j] += ail * grow[j];
        }
    });
  }

  // A{r,k} x B{c,k}^T -> {r,c}
  Var matmul_nt(Var a, Var b) {
    const Tensor &A = val(a), &B = val(b);
    require(A.rank() == 2 && B.rank() == 2 && A.cols() == B.cols(), "matmul_nt: shape mismatch");
    int64_t r = A.rows(), k = A.cols(), c = B.rows();
    Tensor out({r, c});
    for (int64_t i = 0; i < r; ++i) {
      const double* ar = A.data.data() + i * k;
      double* orow = out.data.data() + i * c;
      for (int64_t j = 0; j < c; ++j) {
        const double* br = B.data.data() + j * k;
        double s = 0.0;
        for (int64_t l = 0; l < k; ++l) s += ar[l] * br[l];
        orow[j] = s;
      }
    }
    return push("matmul_nt", {a, b}, std::move(out), [a, b, r, k, c](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
      const Tensor &A = t.val(a), &B = t.val(b);
      Tensor &ga = t.grad_buf(a), &gb = t.grad_buf(b);
      for (int64_t i = 0; i < r; ++i) {
        const double* gr = g.data.data() + i * c;
        const double* ar = A.data.data() + i * k;
        double* gar = ga.data.data() + i * k;
        for (int64_t j = 0; j < c; ++j) {
          double gij = gr[j];
          if (gij == 0.0) continue;
          const double* br = B.data.data() + j * k;
          double* gbr = gb.data.data() + j * k;
          for (int64_t l = 0; l < k; ++l) {
            gar[l] += gij * br[l];
            gbr[l] += gij * ar[l];
          }
        }
      }
    });
  }

  Var dot(Var a, Var b) {
    const Tensor &A = val(a), &B = val(b);
    require(A.rank() == 1 && B.rank() == 1 && A.size() == B.size(), "dot: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < A.size(); ++i) s += A[i] * B[i];
    return push("dot", {a, b}, Tensor::scalar(s), [a, b](Tape& t, int32_t id) {
      double g = t.nodes_[id].grad[0];
      const Tensor &A = t.val(a), &B = t.val(b);
      Tensor &ga = t.grad_buf(a), &gb = t.grad_buf(b);
      for (int64_t i = 0; i < A.size(); ++i) {
        ga[i] += g * B[i];
        gb[i] += g * A[i];
      }
    });
  }

  // y = x . W^T + b, where W is {out,in}; x may be a vector {in} or matrix {n,in}
  Var linear(Var x, Var w, Var b) {
    const Tensor &X = val(x), &W = val(w), &B = val(b);
    require(W.rank() == 2 && B.rank() == 1 && B.size() == W.rows(), "linear: bad W/b");
    int64_t out_d = W.rows(), in_d = W.cols();
    if (X.rank() == 1) {
      require(X.size() == in_d, "linear: input dim mismatch");
      Tensor out({out_d});
      for (int64_t o = 0; o < out_d; ++o) {
        const double* wrow = W.data.data() + o * in_d;
        double s = B[o];
        for (int64_t i = 0; i < in_d; ++i) s += wrow[i] * X[i];
        out[o] = s;
      }
      return push("linear", {x, w, b}, std::move(out), [x, w, b, out_d, in_d](Tape& t, int32_t id) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor &X = t.val(x), &W = t.val(w);
        Tensor &gx = t.grad_buf(x), &gw = t.grad_buf(w), &gb = t.grad_buf(b);
        for (int64_t o = 0; o < out_d; ++o) {
          double go = g[o];
          gb[o] += go;
          if (go == 0.0) continue;
          const double* wrow = W.data.data() + o * in_d;
          double* gwrow = gw.data.data() + o * in_d;
          for (int64_t i = 0; i < in_d; ++i) {
            gx[i] += go * wrow[i];
            gwrow[i] += go * X[i];
          }
        }
      });
    }
    require(X.rank() == 2 && X.cols() == in_d, "linear: input dim mismatch");
    int64_t n = X.rows();
    Tensor out({n, out_d});
    for (int64_t r = 0; r < n; ++r) {
      const double* xr = X.data.data() + r * in_d;
      double* yr = out.data.data() + r * out_d;
      for (int64_t o = 0; o < out_d; ++o) {
        const double* wrow = W.data.data() + o * in_d;
        double s = B[o];
        for (int64_t i = 0; i < in_d; ++i) s += wrow[i] * xr[i];
        yr[o] = s;
      }
    }
    return push("linear", {x, w, b}, std::move(out), [x, w, b, n, out_d, in_d](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor &X = t.val(x), &W = t.val(w);
      Tensor &gx = t.grad_buf(x), &gw = t.grad_buf(w), &gb = t.grad_buf(b);
      for (int64_t r = 0; r < n; ++r) {
        const double* gr = g.data.data() + r * out_d;
        const double* xr = X.data.data() + r * in_d;
        double* gxr = gx.data.data() + r * in_d;
        for (int64_t o = 0; o < out_d; ++o) {
          double go = gr[o];
          gb[o] += go;
          if (go == 0.0) continue;
          const double* wrow = W.data.data() + o * in_d;
          double* gwrow = gw.data.data() + o * in_d;
          for (int64_t i = 0; i < in_d; ++i) {
            gxr[i] += go * wrow[i];
            gwrow[i] += go * xr[i];
          }
        }
      }
    });
  }

  // ---- reductions ----

  Var sum(Var a) {
    const Tensor& A = val(a);
    double s = 0.0;
    for (double v : A.data) s += v;
    return push("sum", {a}, Tensor::scalar(s), [a](Tape& t, int32_t id) {
      double g = t.nodes_[id].grad[0];
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }

  Var mean(Var a) {
    const Tensor& A = val(a);
    double s = 0.0;
    for (double v : A.data) s += v;
    double n = static_cast<double>(A.size());
    return push("mean", {a}, Tensor::scalar(s / n), [a, n](Tape& t, int32_t id) {
      double g = t.nodes_[id].grad[0] / n;
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }

  // log sum exp of a vector, max-shifted; tolerates -inf entries and returns
  // -inf when every entry is -inf.
  Var logsumexp(Var a) {
    const Tensor& A = val(a);
    require(A.size() > 0, "logsumexp: empty input");
    double out = lse_raw(A.data.data(), A.size());
    return push("logsumexp", {a}, Tensor::scalar(out), [a](Tape& t, int32_t id) {
      double g = t.nodes_[id].grad[0];
      double y = t.nodes_[id].value[0];
      if (!std::isfinite(y)) return;  // all -inf: gradient vanishes
      const Tensor& A = t.val(a);
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < A.size(); ++i)
        if (A[i] != kNegInf) ga[i] += g * std::exp(A[i] - y);
    });
  }

  // row-wise logsumexp of a matrix {r,c} -> {r}
  Var logsumexp_rows(Var m) {
    const Tensor& M = val(m);
    require(M.rank() == 2, "logsumexp_rows: need matrix");
    int64_t r = M.rows(), c = M.cols();
    Tensor out({r});
    for (int64_t i = 0; i < r; ++i) out[i] = lse_raw(M.data.data() + i * c, c);
    return push("logsumexp_rows", {m}, std::move(out), [m, r, c](Tape& t, int32_t id) {
      const Tensor &g = t.nodes_[id].grad, &y = t.nodes_[id].value;
      const Tensor& M = t.val(m);
      Tensor& gm = t.grad_buf(m);
      for (int64_t i = 0; i < r; ++i) {
        if (g[i] == 0.0 || !std::isfinite(y[i])) continue;
        const double* mr = M.data.data() + i * c;
        double* gr = gm.data.data() + i * c;
        for (int64_t j = 0; j < c; ++j)
          if (mr[j] != kNegInf) gr[j] += g[i] * std::exp(mr[j] - y[i]);
      }
    });
  }

  Var softmax(Var a) {
    const Tensor& A = val(a);
    require(A.rank() == 1 && A.size() > 0, "softmax: need non-empty vector");
    Tensor out({A.size()});
    double l = lse_raw(A.data.data(), A.size());
    for (int64_t i = 0; i < A.size(); ++i) out[i] = std::exp(A[i] - l);
    return push("softmax", {a}, std::move(out), [a](Tape& t, int32_t id) {
      const Tensor &g = t.nodes_[id].grad, &y = t.nodes_[id].value;
      Tensor& ga = t.grad_buf(a);
      double gy = 0.0;
      for (int64_t i = 0; i < y.size(); ++i) gy += g[i] * y[i];
      for (int64_t i = 0; i < y.size(); ++i) ga[i] += y[i] * (g[i] - gy);
    });
  }

  Var log_softmax(Var a) {
    const Tensor& A = val(a);
    require(A.rank() == 1 && A.size() > 0, "log_softmax: need non-empty vector");
    Tensor out({A.size()});
    double l = lse_raw(A.data.data(), A.size());
    for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] - l;
    return push("log_softmax", {a}, std::move(out), [a](Tape& t, int32_t id) {
      const Tensor &g = t.nodes_[id].grad, &y = t.nodes_[id].value;
      Tensor& ga = t.grad_buf(a);
      double gs = 0.0;
      for (int64_t i = 0; i < y.size(); ++i) gs += g[i];
      for (int64_t i = 0; i < y.size(); ++i) ga[i] += g[i] - std::exp(y[i]) * gs;
    });
  }

  // row-wise log-softmax of a matrix
  Var log_softmax_rows(Var m) {
    const Tensor& M = val(m);
    require(M.rank() == 2, "log_softmax_rows: need matrix");
    int64_t r = M.rows(), c = M.cols();
    Tensor out({r, c});
    for (int64_t i = 0; i < r; ++i) {
      double l = lse_raw(M.data.data() + i * c, c);
      for (int64_t j = 0; j < c; ++j) out[i * c + j] = M[i * c + j] - l;
    }
    return push("log_softmax_rows", {m}, std::move(out), [m, r, c](Tape& t, int32_t id) {
      const Tensor &g = t.nodes_[id].grad, &y = t.nodes_[id].value;
      Tensor& gm = t.grad_buf(m);
      for (int64_t i = 0; i < r; ++i) {
        const double* gr = g.data.data() + i * c;
        const double* yr = y.data.data() + i * c;
        double* gmr = gm.data.data() + i * c;
        double gs = 0.0;
        for (int64_t j = 0; j < c; ++j) gs += gr[j];
        for (int64_t j = 0; j < c; ++j) gmr[j] += gr[j] - std::exp(yr[j]) * gs;
      }
    });
  }

  // max over the sequence (row) axis of {L,d} -> {d}; ties go to the first row
  Var max_over_rows(Var m) {
    const Tensor& M = val(m);
    require(M.rank() == 2 && M.rows() > 0, "max_over_rows: need non-empty matrix");
    int64_t r = M.rows(), c = M.cols();
    Tensor out({c});
    std::vector<int64_t> arg(static_cast<size_t>(c), 0);
    for (int64_t j = 0; j < c; ++j) {
      double best = M[j];
      for (int64_t i = 1; i < r; ++i)
        if (M[i * c + j] > best) {
          best = M[i * c + j];
          arg[static_cast<size_t>(j)] = i;
        }
      out[j] = best;
    }
    return push("max_over_rows", {m}, std::move(out), [m, arg = std::move(arg), c](Tape& t, int32_t id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& gm = t.grad_buf(m);
      for (int64_t j = 0; j < c; ++j) gm[arg[static_cast<size_t>(j)] * c + j] += g[j];
    });
  }

  // ---- norms and similarity ----

  Var l2_normalize(Var a) {
    const Tensor& A = val(a);
    require(A.rank() == 1, "l2_normalize: need vector");
    double r2 = 0.0;
    for (double v : A.data) r2 += v * v;
    double r = std::sqrt(r2);
    if (r < 1e-30) throw NumericError("l2_normalize: zero vector");
    Tensor out({A.size()});
    for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] / r;
    return push("l2_normalize", {a}, std::move(out), [a, r](Tape& t, int32_t id) {
      const Tensor &g = t.nodes_[id].grad, &y = t.nodes_[id].value;
      Tensor& ga = t.grad_buf(a);
      double gy = 0.0;
      for (int64_t i = 0; i < y.size(); ++i) gy += g[i] * y[i];
      for (int64_t i = 0; i < y.size(); ++i) ga[i] += (g[i] - y[i] * gy) / r;
    });
  }

  Var cosine(Var a, Var b) {
    const Tensor &A = val(a), &B = val(b);
    require(A.rank() == 1 && B.rank() == 1 && A.size() == B.size(), "cosine: shape mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (int64_t i = 0; i < A.size(); ++i) {
      ab += A[i] * B[i];
      aa += A[i] * A[i];
      bb += B[i] * B[i];
    }
    double na = std::sqrt(aa), nb = std::sqrt(bb);
    if (na < 1e-30 || nb < 1e-30) throw NumericError("cosine: zero vector");
    double c = ab / (na * nb);
    return push("cosine", {a, b}, Tensor::scalar(c), [a, b, na, nb, c](Tape& t, int32_t id) {
      double g = t.nodes_[id].grad[0];
      const Tensor &A = t.val(a), &B = t.val(b);
      Tensor &ga = t.grad_buf(a), &gb = t.grad_buf(b);
      for (int64_t i = 0; i < A.size(); ++i) {
        ga[i] += g * (B[i] / (na * nb) - c * A[i] / (na * na));
        gb[i] += g * (A[i] / (na * nb) - c * B[i] / (nb * nb));
      }
    });
  }

  // ---- custom fused nodes ----

  using BackFn = std::function<void(Tape&, int32_t node_id)>;

  Var custom(const char* op, const std::vector<Var>& parents, Tensor value, BackFn back) {
    return push(op, parents, std::move(value), std::move(back));
  }

  Tensor& grad_buf(Var v) {
    Node& n = nodes_[idx(v)];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  void accum(Var v, const double* g, int64_t n) {
    Tensor& gb = grad_buf(v);
    for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
  }

  // ---- backward ----

  void backward(Var loss) {
    if (val(loss).size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!val(loss).valid_values()) throw NumericError("backward: loss is not finite");
    grad_buf(loss)[0] += 1.0;
    for (int32_t id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.has_grad) continue;
      if (n.back) n.back(*this, id);
      if (n.bound) {
        Tensor& pg = n.bound->grad;
        for (int64_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    BackFn back;
    Param* bound = nullptr;
    const char* op = "";
  };

  static size_t idx(Var v) {
    if (!v.valid()) throw std::logic_error("invalid Var");
    return static_cast<size_t>(v.id);
  }

  static void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
  }

  Var push(const char* op, const std::vector<Var>& parents, Tensor value, BackFn back) {
    (void)parents;
    if (check_values_ && !value.valid_values())
      throw NumericError(std::string("non-finite output of op ") + op);
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  static void matmul_raw(const double* a, const double* b, double* out, int64_t r, int64_t k,
                         int64_t c) {
    std::fill(out, out + r * c, 0.0);
    for (int64_t i = 0; i < r; ++i) {
      const double* ar = a + i * k;
      double* orow = out + i * c;
      for (int64_t l = 0; l < k; ++l) {
        double ail = ar[l];
        if (ail == 0.0) continue;
        const double* brow = b + l * c;
        for (int64_t j = 0; j < c; ++j) orow[j] += ail * brow[j];
      }
    }
  }

  static double lse_raw(const double* v, int64_t n) {
    double m = kNegInf;
    for (int64_t i = 0; i < n; ++i)
      if (v[i] > m) m = v[i];
    if (m == kNegInf) return kNegInf;
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i)
      if (v[i] != kNegInf) s += std::exp(v[i] - m);
    return m + std::log(s);
  }

  std::deque<Node> nodes_;  // deque: references stay valid as nodes are pushed
  bool check_values_ = true;

 public:
  // exposed for oracle tests and fused-op implementations
  static double lse(const double* v, int64_t n) { return lse_raw(v, n); }
  static double lse(const std::vector<double>& v) {
    return lse_raw(v.data(), static_cast<int64_t>(v.size()));
  }
};

}  // namespace gg
