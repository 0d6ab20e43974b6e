#pragma once

// Reverse-mode differentiation over dense row-major 64-bit arrays: a tape of
// recorded operations, each with a backward closure. Just enough operations
// to express MLPs, a GIN layer, softmax readouts, and an unrolled fixed-step
// integrator, with gradients checkable against finite differences.
//
// Two implementation rules keep model outputs exactly permutation
// equivariant:
//   * every reduction across nodes of a graph (neighbor aggregation, softmax
//     normalizers) sums its addends in value-sorted order, so the result
//     depends only on the multiset of addends;
//   * matrix products use fixed k-major loops whose per-row instruction
//     sequence does not depend on the row index.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gopher/graph.hpp"

namespace gopher {

class Array {
public:
    Array() = default;
    Array(int rows, int cols) : rows_(rows), cols_(cols), data_(check_size(rows, cols), 0.0) {}
    Array(int rows, int cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != check_size(rows, cols))
            throw std::invalid_argument("Array: data length must equal rows*cols");
    }

    static Array scalar(double v) { return Array(1, 1, {v}); }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const std::vector<double>& values() const { return data_; }
    std::vector<double>& values() { return data_; }

    friend bool operator==(const Array& a, const Array& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    static std::size_t check_size(int rows, int cols) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("Array: negative dimension");
        return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

// Sum whose result depends only on the multiset of addends: sort by value,
// then fold left to right.
inline double order_invariant_sum(std::span<double> addends) {
    if (addends.size() <= 2) {
        double s = 0.0;
        for (double v : addends) s += v;
        return s;
    }
    std::sort(addends.begin(), addends.end());
    double s = 0.0;
    for (double v : addends) s += v;
    return s;
}

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, int)>;

    Var leaf(Array value, bool needs_grad) {
        return push(std::move(value), {}, nullptr, needs_grad);
    }

    Var constant(Array value) { return leaf(std::move(value), false); }

    const Array& value(Var v) const { return nodes_[check(v)].value; }
    const Array& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    const std::vector<int>& parents(int id) const {
        return nodes_[static_cast<std::size_t>(id)].parents;
    }

    // Gradient buffer of a node, allocated on first touch.
    std::vector<double>& grad(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

    // Reverse sweep from a scalar loss. Node values and gradients of interior
    // nodes are released as the sweep passes them; leaf gradients survive
    // until reset() so they can be harvested.
    void backward(Var loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
        if (backward_done_) throw std::logic_error("backward: tape already swept; reset() first");
        const Node& ln = nodes_[check(loss)];
        if (ln.value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
        backward_done_ = true;
        grad(loss.id)[0] = 1.0;
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.grad.empty() && n.backward) n.backward(*this, id);
            if (n.backward) {  // interior node: buffers no longer needed
                n.value = Array();
                n.grad.clear();
                n.grad.shrink_to_fit();
            }
        }
    }

    bool backward_done() const { return backward_done_; }

    void reset() {
        nodes_.clear();
        backward_done_ = false;
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    Var push(Array value, std::vector<int> parents, Backward backward, bool needs_grad) {
        nodes_.push_back(Node{std::move(value), {}, std::move(parents), std::move(backward), needs_grad});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    bool any_parent_needs_grad(const std::vector<int>& parents) const {
        for (int p : parents)
            if (nodes_[static_cast<std::size_t>(p)].needs_grad) return true;
        return false;
    }

    // Accumulate into a parent's gradient unless it is grad-free.
    void accumulate(int parent, std::span<const double> contribution) {
        if (!nodes_[static_cast<std::size_t>(parent)].needs_grad) return;
        std::vector<double>& g = grad(parent);
        if (g.size() != contribution.size())
            throw std::logic_error("accumulate: gradient size mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
    }

private:
    struct Node {
        Array value;
        std::vector<double> grad;
        std::vector<int> parents;
        Backward backward;
        bool needs_grad = false;
    };

    std::size_t check(Var v) const {
        if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("Tape: foreign or stale Var");
        return static_cast<std::size_t>(v.id);
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

namespace detail {

inline void same_tape(Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw std::invalid_argument("op: operands must share a tape");
}

inline void same_shape(const Array& a, const Array& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

inline Var add(Var a, Var b) {
    detail::same_tape(a, b);
    Tape& t = *a.tape;
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    detail::same_shape(av, bv, "add");
    Array out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += bv.data()[i];
    std::vector<int> parents{a.id, b.id};
    const bool ng = t.any_parent_needs_grad(parents);
    return t.push(std::move(out), std::move(parents),
                  ng ? [pa = a.id, pb = b.id](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      tp.accumulate(pa, g);
                      tp.accumulate(pb, g);
                  } : Tape::Backward{},
                  ng);
}

inline Var sub(Var a, Var b) {
    detail::same_tape(a, b);
    Tape& t = *a.tape;
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    detail::same_shape(av, bv, "sub");
    Array out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] -= bv.data()[i];
    std::vector<int> parents{a.id, b.id};
    const bool ng = t.any_parent_needs_grad(parents);
    return t.push(std::move(out), std::move(parents),
                  ng ? [pa = a.id, pb = b.id](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      tp.accumulate(pa, g);
                      if (tp.needs_grad(pb)) {
                          auto& gb = tp.grad(pb);
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                      }
                  } : Tape::Backward{},
                  ng);
}

inline Var mul(Var a, Var b) {
    detail::same_tape(a, b);
    Tape& t = *a.tape;
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    detail::same_shape(av, bv, "mul");
    Array out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] *= bv.data()[i];
    std::vector<int> parents{a.id, b.id};
    const bool ng = t.any_parent_needs_grad(parents);
    return t.push(std::move(out), std::move(parents),
                  ng ? [pa = a.id, pb = b.id](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      const Array& avv = tp.value(pa);
                      const Array& bvv = tp.value(pb);
                      if (tp.needs_grad(pa)) {
                          auto& ga = tp.grad(pa);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bvv.data()[i];
                      }
                      if (tp.needs_grad(pb)) {
                          auto& gb = tp.grad(pb);
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * avv.data()[i];
                      }
                  } : Tape::Backward{},
                  ng);
}

inline Var scale(Var a, double c) {
    Tape& t = *a.tape;
    Array out = t.value(a);
    for (double& v : out.values()) v *= c;
    const bool ng = t.needs_grad(a.id);
    return t.push(std::move(out), {a.id},
                  ng ? [pa = a.id, c](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      auto& ga = tp.grad(pa);
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * g[i];
                  } : Tape::Backward{},
                  ng);
}

// a + c*b
inline Var add_scaled(Var a, Var b, double c) {
    detail::same_tape(a, b);
    Tape& t = *a.tape;
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    detail::same_shape(av, bv, "add_scaled");
    Array out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += c * bv.data()[i];
    std::vector<int> parents{a.id, b.id};
    const bool ng = t.any_parent_needs_grad(parents);
    return t.push(std::move(out), std::move(parents),
                  ng ? [pa = a.id, pb = b.id, c](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      tp.accumulate(pa, g);
                      if (tp.needs_grad(pb)) {
                          auto& gb = tp.grad(pb);
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += c * g[i];
                      }
                  } : Tape::Backward{},
                  ng);
}

// a + c[block]*b where consecutive groups of block_rows rows share one
// coefficient. Used to advance many integrator side-steps with distinct step
// sizes in lockstep.
inline Var add_scaled_blocks(Var a, Var b, std::vector<double> coeffs, int block_rows) {
    detail::same_tape(a, b);
    Tape& t = *a.tape;
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    detail::same_shape(av, bv, "add_scaled_blocks");
    if (block_rows <= 0 || av.rows() != block_rows * static_cast<int>(coeffs.size()))
        throw std::invalid_argument("add_scaled_blocks: rows must equal coeffs*block_rows");
    Array out = av;
    const int cols = av.cols();
    for (std::size_t blk = 0; blk < coeffs.size(); ++blk) {
        const double c = coeffs[blk];
        double* o = out.data() + blk * static_cast<std::size_t>(block_rows) * cols;
        const double* bp = bv.data() + blk * static_cast<std::size_t>(block_rows) * cols;
        for (int i = 0; i < block_rows * cols; ++i) o[i] += c * bp[i];
    }
    std::vector<int> parents{a.id, b.id};
    const bool ng = t.any_parent_needs_grad(parents);
    return t.push(std::move(out), std::move(parents),
                  ng ? [pa = a.id, pb = b.id, coeffs = std::move(coeffs), block_rows, cols](
                           Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      tp.accumulate(pa, g);
                      if (tp.needs_grad(pb)) {
                          auto& gb = tp.grad(pb);
                          for (std::size_t blk = 0; blk < coeffs.size(); ++blk) {
                              const double c = coeffs[blk];
                              const std::size_t base = blk * static_cast<std::size_t>(block_rows) * cols;
                              for (int i = 0; i < block_rows * cols; ++i)
                                  gb[base + i] += c * g[base + i];
                          }
                      }
                  } : Tape::Backward{},
                  ng);
}

// x[r,k] @ w[k,c] + b[1,c], k-major accumulation.
inline Var affine(Var x, Var w, Var b) {
    detail::same_tape(x, w);
    detail::same_tape(x, b);
    Tape& t = *x.tape;
    const Array& xv = t.value(x);
    const Array& wv = t.value(w);
    const Array& bv = t.value(b);
    if (xv.cols() != wv.rows())
        throw std::invalid_argument("affine: inner dimensions disagree");
    if (bv.rows() != 1 || bv.cols() != wv.cols())
        throw std::invalid_argument("affine: bias must be 1 x out_dim");
    const int rows = xv.rows(), inner = xv.cols(), cols = wv.cols();
    Array out(rows, cols);
    for (int r = 0; r < rows; ++r) {
        double* o = out.data() + static_cast<std::size_t>(r) * cols;
        std::memcpy(o, bv.data(), static_cast<std::size_t>(cols) * sizeof(double));
        const double* xr = xv.data() + static_cast<std::size_t>(r) * inner;
        for (int k = 0; k < inner; ++k) {
            const double xk = xr[k];
            const double* wk = wv.data() + static_cast<std::size_t>(k) * cols;
            for (int c = 0; c < cols; ++c) o[c] += xk * wk[c];
        }
    }
    std::vector<int> parents{x.id, w.id, b.id};
    const bool ng = t.any_parent_needs_grad(parents);
    return t.push(std::move(out), std::move(parents),
                  ng ? [px = x.id, pw = w.id, pb = b.id, rows, inner, cols](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      const Array& xvv = tp.value(px);
                      const Array& wvv = tp.value(pw);
                      if (tp.needs_grad(px)) {
                          auto& gx = tp.grad(px);
                          for (int r = 0; r < rows; ++r) {
                              const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
                              double* gxr = gx.data() + static_cast<std::size_t>(r) * inner;
                              for (int k = 0; k < inner; ++k) {
                                  const double* wk = wvv.data() + static_cast<std::size_t>(k) * cols;
                                  double acc = 0.0;
                                  for (int c = 0; c < cols; ++c) acc += gr[c] * wk[c];
                                  gxr[k] += acc;
                              }
                          }
                      }
                      if (tp.needs_grad(pw)) {
                          auto& gw = tp.grad(pw);
                          for (int r = 0; r < rows; ++r) {
                              const double* xr = xvv.data() + static_cast<std::size_t>(r) * inner;
                              const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
                              for (int k = 0; k < inner; ++k) {
                                  const double xk = xr[k];
                                  double* gwk = gw.data() + static_cast<std::size_t>(k) * cols;
                                  for (int c = 0; c < cols; ++c) gwk[c] += xk * gr[c];
                              }
                          }
                      }
                      if (tp.needs_grad(pb)) {
                          auto& gb = tp.grad(pb);
                          for (int r = 0; r < rows; ++r) {
                              const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
                              for (int c = 0; c < cols; ++c) gb[c] += gr[c];
                          }
                      }
                  } : Tape::Backward{},
                  ng);
}

// x * sigmoid(x), elementwise.
inline Var swish(Var x) {
    Tape& t = *x.tape;
    Array out = t.value(x);
    for (double& v : out.values()) v = v / (1.0 + std::exp(-v));
    const bool ng = t.needs_grad(x.id);
    return t.push(std::move(out), {x.id},
                  ng ? [px = x.id](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      const Array& xv = tp.value(px);
                      auto& gx = tp.grad(px);
                      for (std::size_t i = 0; i < gx.size(); ++i) {
                          const double s = 1.0 / (1.0 + std::exp(-xv.data()[i]));
                          gx[i] += g[i] * s * (1.0 + xv.data()[i] * (1.0 - s));
                      }
                  } : Tape::Backward{},
                  ng);
}

namespace detail {

enum class SoftmaxKind { kProbs, kLogProbs };

inline Var row_softmax_impl(Var x, SoftmaxKind kind) {
    Tape& t = *x.tape;
    const Array& xv = t.value(x);
    const int rows = xv.rows(), cols = xv.cols();
    if (cols < 1) throw std::invalid_argument("softmax: empty rows");
    Array out(rows, cols);
    std::vector<double> scratch(static_cast<std::size_t>(cols));
    for (int r = 0; r < rows; ++r) {
        const double* xr = xv.data() + static_cast<std::size_t>(r) * cols;
        double m = xr[0];
        for (int c = 1; c < cols; ++c) m = std::max(m, xr[c]);
        for (int c = 0; c < cols; ++c) scratch[static_cast<std::size_t>(c)] = std::exp(xr[c] - m);
        double* o = out.data() + static_cast<std::size_t>(r) * cols;
        if (kind == SoftmaxKind::kProbs) {
            for (int c = 0; c < cols; ++c) o[c] = scratch[static_cast<std::size_t>(c)];
            const double z = order_invariant_sum(scratch);
            for (int c = 0; c < cols; ++c) o[c] /= z;
        } else {
            const double lz = std::log(order_invariant_sum(scratch));
            for (int c = 0; c < cols; ++c) o[c] = xr[c] - m - lz;
        }
    }
    const bool ng = t.needs_grad(x.id);
    Tape::Backward bw;
    if (ng && kind == SoftmaxKind::kProbs) {
        bw = [px = x.id, rows, cols](Tape& tp, int id) {
            const auto& g = tp.grad(id);
            const Array& y = tp.value(id);
            auto& gx = tp.grad(px);
            for (int r = 0; r < rows; ++r) {
                const double* yr = y.data() + static_cast<std::size_t>(r) * cols;
                const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                double* gxr = gx.data() + static_cast<std::size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) gxr[c] += yr[c] * (gr[c] - dot);
            }
        };
    } else if (ng) {
        bw = [px = x.id, rows, cols](Tape& tp, int id) {
            const auto& g = tp.grad(id);
            const Array& y = tp.value(id);  // log-probs
            auto& gx = tp.grad(px);
            for (int r = 0; r < rows; ++r) {
                const double* yr = y.data() + static_cast<std::size_t>(r) * cols;
                const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
                double gsum = 0.0;
                for (int c = 0; c < cols; ++c) gsum += gr[c];
                double* gxr = gx.data() + static_cast<std::size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) gxr[c] += gr[c] - std::exp(yr[c]) * gsum;
            }
        };
    }
    return t.push(std::move(out), {x.id}, std::move(bw), ng);
}

}  // namespace detail

// Max-subtracted softmax along each row.
inline Var row_softmax(Var x) { return detail::row_softmax_impl(x, detail::SoftmaxKind::kProbs); }
inline Var row_log_softmax(Var x) { return detail::row_softmax_impl(x, detail::SoftmaxKind::kLogProbs); }

inline Var stable_softmax(Var logits) {
    const Array& v = logits.tape->value(logits);
    if (v.rows() != 1 && v.cols() != 1)
        throw std::invalid_argument("stable_softmax: expects a vector");
    // Treat as one row regardless of orientation.
    Tape& t = *logits.tape;
    const bool column = v.cols() == 1 && v.rows() > 1;
    if (!column) return row_softmax(logits);
    Array row(1, v.rows(), v.values());
    Var as_row = t.push(std::move(row), {logits.id},
                        t.needs_grad(logits.id) ? [p = logits.id](Tape& tp, int id) {
                            tp.accumulate(p, tp.grad(id));
                        } : Tape::Backward{},
                        t.needs_grad(logits.id));
    return row_softmax(as_row);
}

// out[r] = x[r, cols[r]], as an [r, 1] array.
inline Var pick(Var x, std::vector<int> cols) {
    Tape& t = *x.tape;
    const Array& xv = t.value(x);
    if (static_cast<int>(cols.size()) != xv.rows())
        throw std::invalid_argument("pick: one column index per row required");
    Array out(xv.rows(), 1);
    for (int r = 0; r < xv.rows(); ++r) {
        const int c = cols[static_cast<std::size_t>(r)];
        if (c < 0 || c >= xv.cols()) throw std::invalid_argument("pick: column out of range");
        out.values()[static_cast<std::size_t>(r)] = xv.at(r, c);
    }
    const bool ng = t.needs_grad(x.id);
    const int ncols = xv.cols();
    return t.push(std::move(out), {x.id},
                  ng ? [px = x.id, cols = std::move(cols), ncols](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      auto& gx = tp.grad(px);
                      for (std::size_t r = 0; r < cols.size(); ++r)
                          gx[r * ncols + static_cast<std::size_t>(cols[r])] += g[r];
                  } : Tape::Backward{},
                  ng);
}

inline Var sum_all(Var x) {
    Tape& t = *x.tape;
    const Array& xv = t.value(x);
    double s = 0.0;
    for (double v : xv.values()) s += v;
    const bool ng = t.needs_grad(x.id);
    return t.push(Array::scalar(s), {x.id},
                  ng ? [px = x.id](Tape& tp, int id) {
                      const double g = tp.grad(id)[0];
                      auto& gx = tp.grad(px);
                      for (double& v : gx) v += g;
                  } : Tape::Backward{},
                  ng);
}

inline Var mean_all(Var x) {
    Tape& t = *x.tape;
    const double n = static_cast<double>(t.value(x).size());
    return scale(sum_all(x), 1.0 / n);
}

inline Var neg(Var x) { return scale(x, -1.0); }

// Append one constant column (no gradient flows into it).
inline Var append_col(Var x, std::vector<double> col) {
    Tape& t = *x.tape;
    const Array& xv = t.value(x);
    if (static_cast<int>(col.size()) != xv.rows())
        throw std::invalid_argument("append_col: column length must equal rows");
    Array out(xv.rows(), xv.cols() + 1);
    for (int r = 0; r < xv.rows(); ++r) {
        double* o = out.data() + static_cast<std::size_t>(r) * (xv.cols() + 1);
        std::memcpy(o, xv.data() + static_cast<std::size_t>(r) * xv.cols(),
                    static_cast<std::size_t>(xv.cols()) * sizeof(double));
        o[xv.cols()] = col[static_cast<std::size_t>(r)];
    }
    const bool ng = t.needs_grad(x.id);
    const int rows = xv.rows(), cols = xv.cols();
    return t.push(std::move(out), {x.id},
                  ng ? [px = x.id, rows, cols](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      auto& gx = tp.grad(px);
                      for (int r = 0; r < rows; ++r)
                          for (int c = 0; c < cols; ++c)
                              gx[static_cast<std::size_t>(r) * cols + c] +=
                                  g[static_cast<std::size_t>(r) * (cols + 1) + c];
                  } : Tape::Backward{},
                  ng);
}

// Append `extra` zero columns.
inline Var pad_cols(Var x, int extra) {
    Tape& t = *x.tape;
    const Array& xv = t.value(x);
    if (extra < 0) throw std::invalid_argument("pad_cols: negative pad");
    Array out(xv.rows(), xv.cols() + extra);
    for (int r = 0; r < xv.rows(); ++r)
        std::memcpy(out.data() + static_cast<std::size_t>(r) * (xv.cols() + extra),
                    xv.data() + static_cast<std::size_t>(r) * xv.cols(),
                    static_cast<std::size_t>(xv.cols()) * sizeof(double));
    const bool ng = t.needs_grad(x.id);
    const int rows = xv.rows(), cols = xv.cols();
    return t.push(std::move(out), {x.id},
                  ng ? [px = x.id, rows, cols, extra](Tape& tp, int id) {
                      const auto& g = tp.grad(id);
                      auto& gx = tp.grad(px);
                      for (int r = 0; r < rows; ++r)
                          for (int c = 0; c < cols; ++c)
                              gx[static_cast<std::size_t>(r) * cols + c] +=
                                  g[static_cast<std::size_t>(r) * (cols + extra) + c];
                  } : Tape::Backward{},
                  ng);
}

// Stack parts vertically; a part may appear several times.
inline Var vstack(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("vstack: no parts");
    Tape& t = *parts.front().tape;
    const int cols = t.value(parts.front()).cols();
    int rows = 0;
    std::vector<int> parents;
    parents.reserve(parts.size());
    for (Var p : parts) {
        detail::same_tape(parts.front(), p);
        if (t.value(p).cols() != cols) throw std::invalid_argument("vstack: column mismatch");
        rows += t.value(p).rows();
        parents.push_back(p.id);
    }
    Array out(rows, cols);
    double* o = out.data();
    for (Var p : parts) {
        const Array& pv = t.value(p);
        std::memcpy(o, pv.data(), pv.size() * sizeof(double));
        o += pv.size();
    }
    const bool ng = t.any_parent_needs_grad(parents);
    return t.push(std::move(out), std::move(parents),
                  ng ? [](Tape& tp, int id) {
                      // Parents are replayed in stack order from the stored parent list.
                      const auto& g = tp.grad(id);
                      std::size_t offset = 0;
                      for (int p : tp.parents(id)) {
                          const std::size_t len = tp.value(p).size();
                          if (tp.needs_grad(p)) {
                              auto& gp = tp.grad(p);
                              for (std::size_t i = 0; i < len; ++i) gp[i] += g[offset + i];
                          }
                          offset += len;
                      }
                  } : Tape::Backward{},
                  ng);
}

// Reinterpret the row-major buffer under a new shape.
inline Var reshape(Var x, int rows, int cols) {
    Tape& t = *x.tape;
    const Array& xv = t.value(x);
    if (static_cast<std::size_t>(rows) * cols != xv.size())
        throw std::invalid_argument("reshape: element count mismatch");
    Array out(rows, cols, xv.values());
    const bool ng = t.needs_grad(x.id);
    return t.push(std::move(out), {x.id},
                  ng ? [px = x.id](Tape& tp, int id) { tp.accumulate(px, tp.grad(id)); }
                     : Tape::Backward{},
                  ng);
}

// GIN-style aggregation on stacked node features: for each block and node v,
//   out_v = (1 + eps) * x_v + sum over in-edges (u, w) of w * x_u,
// with the weighted neighbor sum accumulated in value-sorted order.
inline Var gin_aggregate(Var x, const WeightedDigraph& g, int blocks, double eps = 0.0) {
    Tape& t = *x.tape;
    const Array& xv = t.value(x);
    const int n = g.num_nodes();
    if (blocks <= 0 || xv.rows() != blocks * n)
        throw std::invalid_argument("gin_aggregate: rows must equal blocks*num_nodes");
    const int cols = xv.cols();
    Array out(xv.rows(), cols);
    std::vector<double> addends;
    for (int blk = 0; blk < blocks; ++blk) {
        const std::size_t base = static_cast<std::size_t>(blk) * n * cols;
        for (int v = 0; v < n; ++v) {
            const auto& in = g.in_edges(v);
            double* o = out.data() + base + static_cast<std::size_t>(v) * cols;
            const double* self = xv.data() + base + static_cast<std::size_t>(v) * cols;
            addends.resize(in.size());
            for (int c = 0; c < cols; ++c) {
                for (std::size_t e = 0; e < in.size(); ++e)
                    addends[e] = in[e].second * xv.data()[base + static_cast<std::size_t>(in[e].first) * cols + c];
                o[c] = (1.0 + eps) * self[c] + order_invariant_sum(addends);
            }
        }
    }
    const bool ng = t.needs_grad(x.id);
    // The closure runs at backward time, possibly after the caller's graph
    // reference has gone away, so it owns a copy.
    return t.push(std::move(out), {x.id},
                  ng ? [px = x.id, g, blocks, n, cols, eps](Tape& tp, int id) {
                      const auto& go = tp.grad(id);
                      auto& gx = tp.grad(px);
                      for (int blk = 0; blk < blocks; ++blk) {
                          const std::size_t base = static_cast<std::size_t>(blk) * n * cols;
                          for (int v = 0; v < n; ++v) {
                              const double* gv = go.data() + base + static_cast<std::size_t>(v) * cols;
                              double* gself = gx.data() + base + static_cast<std::size_t>(v) * cols;
                              for (int c = 0; c < cols; ++c) gself[c] += (1.0 + eps) * gv[c];
                              for (const auto& [u, w] : g.in_edges(v)) {
                                  double* gu = gx.data() + base + static_cast<std::size_t>(u) * cols;
                                  for (int c = 0; c < cols; ++c) gu[c] += w * gv[c];
                              }
                          }
                      }
                  } : Tape::Backward{},
                  ng);
}

// ------------------------------ parameters ------------------------------

class ParamStore {
public:
    struct Entry {
        Array value;
        Array grad;
    };

    void add(const std::string& name, Array value) {
        if (entries_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
        Array grad(value.rows(), value.cols());
        entries_.emplace(name, Entry{std::move(value), std::move(grad)});
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    Entry& at(const std::string& name) { return entries_.at(name); }
    const Entry& at(const std::string& name) const { return entries_.at(name); }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

    void zero_grads() {
        for (auto& [name, e] : entries_) std::fill(e.grad.values().begin(), e.grad.values().end(), 0.0);
    }

    std::size_t num_scalars() const {
        std::size_t n = 0;
        for (const auto& [name, e] : entries_) n += e.value.size();
        return n;
    }

    nlohmann::json params_json() const {
        nlohmann::json params = nlohmann::json::object();
        for (const auto& [name, e] : entries_) {
            params[name] = {{"shape", {e.value.rows(), e.value.cols()}}, {"data", e.value.values()}};
        }
        return params;
    }

    nlohmann::json to_json() const { return {{"version", 1}, {"params", params_json()}}; }

    static ParamStore params_from_json(const nlohmann::json& params) {
        ParamStore store;
        for (const auto& [name, entry] : params.items()) {
            const auto shape = entry.at("shape").get<std::vector<int>>();
            if (shape.size() != 2) throw std::runtime_error("ParamStore: bad shape");
            store.add(name, Array(shape[0], shape[1], entry.at("data").get<std::vector<double>>()));
        }
        return store;
    }

    static ParamStore from_json(const nlohmann::json& j) {
        if (j.at("version").get<int>() != 1)
            throw std::runtime_error("ParamStore: unsupported checkpoint version");
        return params_from_json(j.at("params"));
    }

private:
    std::map<std::string, Entry> entries_;  // sorted iteration order
};

// Parameter leaves mounted on one tape, created lazily per name.
class Binding {
public:
    Binding(Tape& tape, const ParamStore& store, bool needs_grad = true)
        : tape_(&tape), store_(&store), needs_grad_(needs_grad) {}

    Var operator[](const std::string& name) {
        auto it = mounted_.find(name);
        if (it != mounted_.end()) return Var{tape_, it->second};
        Var v = tape_->leaf(store_->at(name).value, needs_grad_);
        mounted_.emplace(name, v.id);
        return v;
    }

    // Copy tape-side leaf gradients into the store (+=). `store` must be the
    // one the binding mounted from.
    void harvest(ParamStore& store) {
        if (&store != store_) throw std::invalid_argument("Binding: harvest into a different store");
        for (const auto& [name, id] : mounted_) {
            if (!tape_->has_grad(id)) continue;
            const auto& g = tape_->grad(id);
            auto& dst = store.at(name).grad.values();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
        }
    }

private:
    Tape* tape_;
    const ParamStore* store_;
    bool needs_grad_;
    std::map<std::string, int> mounted_;
};

// Sweep the tape from `loss` and write gradients of every reachable parameter
// into the store; unreachable parameters keep their (zeroed) gradients.
inline void backward(Var loss, Binding& binding, ParamStore& store) {
    loss.tape->backward(loss);
    binding.harvest(store);
}

inline void save_checkpoint(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << j.dump(2) << '\n';
}

inline nlohmann::json load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

}  // namespace gopher
