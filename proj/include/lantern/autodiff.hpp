#pragma once

#include <cassert>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lantern/core.hpp"

namespace lantern::ad {

// ---------------------------------------------------------------------------
// Dense column-major matrix of doubles. Columns are batch entries (samples).
// ---------------------------------------------------------------------------

struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> d;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), d(size_t(r) * c, 0.0) {}

  double& operator()(int r, int c) { return d[size_t(c) * rows + r]; }
  double operator()(int r, int c) const { return d[size_t(c) * rows + r]; }
  double* col(int c) { return d.data() + size_t(c) * rows; }
  const double* col(int c) const { return d.data() + size_t(c) * rows; }
  size_t size() const { return d.size(); }
  bool empty() const { return d.empty(); }

  static Mat column(std::span<const double> v) {
    Mat m(int(v.size()), 1);
    std::copy(v.begin(), v.end(), m.d.begin());
    return m;
  }
  static Mat scalar(double v) {
    Mat m(1, 1);
    m.d[0] = v;
    return m;
  }
};

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Flat learnable array plus an additively updated gradient accumulator.
/// Gradients are never cleared implicitly; adam_step and zero_grad do it.
struct ParamBlock {
  std::string name;
  std::vector<int> shape;    // layer dims / table dims, informational
  std::vector<double> w;     // values
  std::vector<double> g;     // gradient accumulator, same length

  ParamBlock() = default;
  ParamBlock(std::string n, size_t size, std::vector<int> sh = {})
      : name(std::move(n)), shape(std::move(sh)), w(size, 0.0), g(size, 0.0) {}

  size_t size() const { return w.size(); }
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
  bool values_finite() const {
    for (double v : w)
      if (!std::isfinite(v)) return false;
    return true;
  }
  bool grads_finite() const {
    for (double v : g)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

/// Destination for parameter gradients produced by Tape::backward.
class GradSink {
 public:
  virtual ~GradSink() = default;
  virtual double* buffer(const ParamBlock& pb) = 0;
};

/// Accumulates straight into each block's own `g` array.
class DirectSink : public GradSink {
 public:
  DirectSink() = default;
  explicit DirectSink(std::span<ParamBlock* const> blocks) {
    for (ParamBlock* b : blocks) map_[b] = b->g.data();
  }
  void add(ParamBlock& b) { map_[&b] = b.g.data(); }
  double* buffer(const ParamBlock& pb) override {
    auto it = map_.find(&pb);
    if (it == map_.end())
      throw config_error("gradient produced for unregistered ParamBlock '" + pb.name + "'");
    return it->second;
  }

 private:
  std::unordered_map<const ParamBlock*, double*> map_;
};

/// Worker-local gradient buffers; merged later in a fixed block order so the
/// deterministic training mode reduces independently of thread scheduling.
class StoreSink : public GradSink {
 public:
  double* buffer(const ParamBlock& pb) override {
    auto& v = map_[&pb];
    if (v.empty()) v.assign(pb.size(), 0.0);
    return v.data();
  }
  /// pb.g += stored gradient (no-op for blocks this sink never saw).
  void merge_into(ParamBlock& pb) const {
    auto it = map_.find(&pb);
    if (it == map_.end()) return;
    const auto& v = it->second;
    for (size_t i = 0; i < v.size(); ++i) pb.g[i] += v[i];
  }
  void clear() { map_.clear(); }

 private:
  std::unordered_map<const ParamBlock*, std::vector<double>> map_;
};

// ---------------------------------------------------------------------------
// Dense-layer kernels (column-major weights: W[o, i] at w[i*out + o])
// ---------------------------------------------------------------------------

inline void dense_forward(const double* W, const double* b, const double* X, int in, int out,
                          int n, double* Y) {
  for (int j = 0; j < n; ++j) {
    double* y = Y + size_t(j) * out;
    const double* x = X + size_t(j) * in;
    std::memcpy(y, b, sizeof(double) * out);
    for (int i = 0; i < in; ++i) {
      const double xi = x[i];
      const double* wc = W + size_t(i) * out;
      for (int o = 0; o < out; ++o) y[o] += wc[o] * xi;
    }
  }
}

inline void dense_backward_dx(const double* W, const double* dY, int in, int out, int n,
                              double* dX) {
  for (int j = 0; j < n; ++j) {
    const double* dy = dY + size_t(j) * out;
    double* dx = dX + size_t(j) * in;
    for (int i = 0; i < in; ++i) {
      const double* wc = W + size_t(i) * out;
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      int o = 0;
      for (; o + 4 <= out; o += 4) {
        s0 += wc[o] * dy[o];
        s1 += wc[o + 1] * dy[o + 1];
        s2 += wc[o + 2] * dy[o + 2];
        s3 += wc[o + 3] * dy[o + 3];
      }
      double s = (s0 + s1) + (s2 + s3);
      for (; o < out; ++o) s += wc[o] * dy[o];
      dx[i] += s;
    }
  }
}

inline void dense_backward_dw(const double* X, const double* dY, int in, int out, int n,
                              double* dW, double* dB) {
  for (int j = 0; j < n; ++j) {
    const double* dy = dY + size_t(j) * out;
    const double* x = X + size_t(j) * in;
    for (int i = 0; i < in; ++i) {
      const double xi = x[i];
      double* dwc = dW + size_t(i) * out;
      for (int o = 0; o < out; ++o) dwc[o] += dy[o] * xi;
    }
    for (int o = 0; o < out; ++o) dB[o] += dy[o];
  }
}

// ---------------------------------------------------------------------------
// Hash-gather plan: precomputed trilinear corners + weights for a batch of
// positions. Built by the encoding module; consumed by the Tape op.
// ---------------------------------------------------------------------------

struct HashPlan {
  int levels = 0, feats = 0, cols = 0;
  std::vector<const ParamBlock*> tables;  // one per level
  std::vector<uint32_t> idx;              // [level][col][8]
  std::vector<double> w;                  // [level][col][8]

  size_t at(int level, int col) const { return (size_t(level) * cols + col) * 8; }
};

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

enum class Op : uint8_t {
  kConst, kInput, kParam, kDense, kRelu, kExp, kSigmoid, kSoftplus, kNeg,
  kClamp, kAdd, kSub, kMul, kDiv, kAddScalar, kMulScalar, kConcatRows, kRows,
  kMulRowBcast, kMulColBcast, kColTimesConstRow, kSegCumsumExcl, kSegSum,
  kSumAll, kStopGrad, kHashGather,
};

/// Eager tape: each op computes its value when recorded; backward() replays
/// adjoints in reverse and adds parameter gradients into a GradSink.
class Tape {
 public:
  struct Var {
    Tape* t = nullptr;
    int id = -1;
    bool valid() const { return t != nullptr && id >= 0; }
    int rows() const { return t->node(id).val.rows; }
    int cols() const { return t->node(id).val.cols; }
    const Mat& val() const { return t->node(id).val; }
    /// Gradient of the last backward() w.r.t. this node (empty if none flowed).
    const Mat& grad() const { return t->node(id).grad; }
  };

  // ---- leaves ----
  Var constant(Mat m) { return push(Op::kConst, -1, -1, std::move(m)); }
  Var constant_scalar(double v) { return constant(Mat::scalar(v)); }
  Var input(Mat m) { return push(Op::kInput, -1, -1, std::move(m)); }
  Var param(const ParamBlock& pb) {
    Var v = push(Op::kParam, -1, -1, Mat::column(pb.w));
    node(v.id).pb = &pb;
    return v;
  }

  // ---- dense layer: y = W x + b, weights live in a ParamBlock ----
  Var dense(Var x, const ParamBlock& pb, int w_off, int b_off, int in, int out) {
    check_shape(x, in, -1);
    if (size_t(w_off) + size_t(in) * out > pb.size() || size_t(b_off) + out > pb.size())
      throw config_error("dense: layer offsets exceed ParamBlock '" + pb.name + "'");
    const Mat& xm = val(x);
    Mat y(out, xm.cols);
    dense_forward(pb.w.data() + w_off, pb.w.data() + b_off, xm.d.data(), in, out, xm.cols,
                  y.d.data());
    Var v = push(Op::kDense, x.id, -1, std::move(y));
    Node& nd = node(v.id);
    nd.pb = &pb;
    nd.i0 = w_off;
    nd.i1 = b_off;
    nd.i2 = in;
    nd.i3 = out;
    return v;
  }

  // ---- elementwise unary ----
  Var relu(Var a) { return map(Op::kRelu, a, [](double x) { return x > 0 ? x : 0; }); }
  Var exp(Var a) { return map(Op::kExp, a, [](double x) { return std::exp(x); }); }
  Var sigmoid(Var a) { return map(Op::kSigmoid, a, [](double x) { return lantern::sigmoid(x); }); }
  Var softplus(Var a) { return map(Op::kSoftplus, a, [](double x) { return lantern::softplus(x); }); }
  Var neg(Var a) { return map(Op::kNeg, a, [](double x) { return -x; }); }
  Var clamp(Var a, double lo, double hi) {
    Var v = map(Op::kClamp, a, [&](double x) { return lantern::clamp(x, lo, hi); });
    node(v.id).s0 = lo;
    node(v.id).s1 = hi;
    return v;
  }

  // ---- elementwise binary (same shape) ----
  Var add(Var a, Var b) { return zip(Op::kAdd, a, b, [](double x, double y) { return x + y; }); }
  Var sub(Var a, Var b) { return zip(Op::kSub, a, b, [](double x, double y) { return x - y; }); }
  Var mul(Var a, Var b) { return zip(Op::kMul, a, b, [](double x, double y) { return x * y; }); }
  Var div(Var a, Var b) { return zip(Op::kDiv, a, b, [](double x, double y) { return x / y; }); }

  Var add_scalar(Var a, double s) {
    Var v = map(Op::kAddScalar, a, [&](double x) { return x + s; });
    node(v.id).s0 = s;
    return v;
  }
  Var mul_scalar(Var a, double s) {
    Var v = map(Op::kMulScalar, a, [&](double x) { return x * s; });
    node(v.id).s0 = s;
    return v;
  }
  /// 1 - exp(-x), the opacity of one bin.
  Var one_minus_exp_neg(Var a) { return add_scalar(neg(exp(neg(a))), 1.0); }

  // ---- structure ----
  Var concat_rows(Var a, Var b) {
    const Mat &ma = val(a), &mb = val(b);
    if (ma.cols != mb.cols) throw config_error("concat_rows: column mismatch");
    Mat y(ma.rows + mb.rows, ma.cols);
    for (int j = 0; j < ma.cols; ++j) {
      std::memcpy(y.col(j), ma.col(j), sizeof(double) * ma.rows);
      std::memcpy(y.col(j) + ma.rows, mb.col(j), sizeof(double) * mb.rows);
    }
    return push(Op::kConcatRows, a.id, b.id, std::move(y));
  }

  Var rows(Var a, int r0, int n) {
    const Mat& ma = val(a);
    if (r0 < 0 || r0 + n > ma.rows) throw config_error("rows: slice out of range");
    Mat y(n, ma.cols);
    for (int j = 0; j < ma.cols; ++j)
      std::memcpy(y.col(j), ma.col(j) + r0, sizeof(double) * n);
    Var v = push(Op::kRows, a.id, -1, std::move(y));
    node(v.id).i0 = r0;
    return v;
  }

  /// a[i,j] * row[0,j]
  Var mul_rowbcast(Var a, Var row) {
    const Mat &ma = val(a), &mr = val(row);
    if (mr.rows != 1 || mr.cols != ma.cols) throw config_error("mul_rowbcast: shape mismatch");
    Mat y(ma.rows, ma.cols);
    for (int j = 0; j < ma.cols; ++j) {
      const double s = mr.col(j)[0];
      const double* ac = ma.col(j);
      double* yc = y.col(j);
      for (int i = 0; i < ma.rows; ++i) yc[i] = ac[i] * s;
    }
    return push(Op::kMulRowBcast, a.id, row.id, std::move(y));
  }

  /// a[i,j] * col[i,0]
  Var mul_colbcast(Var a, Var colv) {
    const Mat &ma = val(a), &mc = val(colv);
    if (mc.cols != 1 || mc.rows != ma.rows) throw config_error("mul_colbcast: shape mismatch");
    Mat y(ma.rows, ma.cols);
    for (int j = 0; j < ma.cols; ++j) {
      const double* ac = ma.col(j);
      double* yc = y.col(j);
      for (int i = 0; i < ma.rows; ++i) yc[i] = ac[i] * mc.d[i];
    }
    return push(Op::kMulColBcast, a.id, colv.id, std::move(y));
  }

  /// col[i,0] * c[j] for a constant row c.
  Var col_times_constrow(Var colv, std::vector<double> c) {
    const Mat& mc = val(colv);
    if (mc.cols != 1) throw config_error("col_times_constrow: operand must be a column");
    Mat y(mc.rows, int(c.size()));
    for (int j = 0; j < y.cols; ++j) {
      double* yc = y.col(j);
      for (int i = 0; i < y.rows; ++i) yc[i] = mc.d[i] * c[j];
    }
    Var v = push(Op::kColTimesConstRow, colv.id, -1, std::move(y));
    node(v.id).crow = int(const_rows_.size());
    const_rows_.push_back(std::move(c));
    return v;
  }

  /// Exclusive prefix sum within consecutive segments of seg_len columns.
  Var seg_cumsum_excl(Var a, int seg_len) {
    const Mat& ma = val(a);
    if (seg_len <= 0 || ma.cols % seg_len != 0)
      throw config_error("seg_cumsum_excl: columns not divisible by segment length");
    Mat y(ma.rows, ma.cols);
    for (int s = 0; s < ma.cols / seg_len; ++s)
      for (int i = 0; i < ma.rows; ++i) {
        double acc = 0;
        for (int k = 0; k < seg_len; ++k) {
          y(i, s * seg_len + k) = acc;
          acc += ma(i, s * seg_len + k);
        }
      }
    Var v = push(Op::kSegCumsumExcl, a.id, -1, std::move(y));
    node(v.id).i0 = seg_len;
    return v;
  }

  /// Sum of each consecutive segment of seg_len columns: r x N -> r x (N/seg_len).
  Var seg_sum(Var a, int seg_len) {
    const Mat& ma = val(a);
    if (seg_len <= 0 || ma.cols % seg_len != 0)
      throw config_error("seg_sum: columns not divisible by segment length");
    Mat y(ma.rows, ma.cols / seg_len);
    for (int s = 0; s < y.cols; ++s)
      for (int k = 0; k < seg_len; ++k) {
        const double* ac = ma.col(s * seg_len + k);
        double* yc = y.col(s);
        for (int i = 0; i < ma.rows; ++i) yc[i] += ac[i];
      }
    Var v = push(Op::kSegSum, a.id, -1, std::move(y));
    node(v.id).i0 = seg_len;
    return v;
  }

  Var sum_all(Var a) {
    const Mat& ma = val(a);
    double s = 0;
    for (double x : ma.d) s += x;
    return push(Op::kSumAll, a.id, -1, Mat::scalar(s));
  }

  /// Value passes, gradient stops dead.
  Var stop_grad(Var a) { return push(Op::kStopGrad, a.id, -1, Mat(val(a))); }

  /// Trilinear gather from per-level hash tables; gradient routes only to the
  /// touched corner entries.
  Var hash_gather(HashPlan plan) {
    const int L = plan.levels, F = plan.feats, n = plan.cols;
    Mat y(L * F, n);
    for (int l = 0; l < L; ++l) {
      const double* tbl = plan.tables[l]->w.data();
      for (int j = 0; j < n; ++j) {
        const size_t base = plan.at(l, j);
        double* out = y.col(j) + l * F;
        for (int c = 0; c < 8; ++c) {
          const double wc = plan.w[base + c];
          const double* e = tbl + size_t(plan.idx[base + c]) * F;
          for (int f = 0; f < F; ++f) out[f] += wc * e[f];
        }
      }
    }
    Var v = push(Op::kHashGather, -1, -1, std::move(y));
    node(v.id).plan = int(plans_.size());
    plans_.push_back(std::move(plan));
    return v;
  }

  // ---- backward ----

  /// Reverse sweep from a recorded scalar. Parameter gradients are *added*
  /// into the sink; calling twice doubles the accumulators.
  void backward(Var loss, GradSink& sink) {
    if (!loss.valid() || loss.t != this) throw domain_error("backward: value not recorded on this tape");
    if (val(loss).rows != 1 || val(loss).cols != 1)
      throw domain_error("backward: loss must be scalar");
    for (Node& n : nodes_) n.grad = Mat();
    grad_of(loss.id) = Mat::scalar(1.0);
    for (int id = int(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      back_one(n, sink);
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    int a = -1, b = -1;
    double s0 = 0, s1 = 0;
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0;
    const ParamBlock* pb = nullptr;
    int plan = -1, crow = -1;
    Mat val, grad;
  };

  std::vector<Node> nodes_;
  std::vector<HashPlan> plans_;
  std::vector<std::vector<double>> const_rows_;

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  const Mat& val(Var v) const {
    if (!v.valid() || v.t != this) throw domain_error("operand not recorded on this tape");
    return nodes_[v.id].val;
  }

  Mat& grad_of(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Mat(n.val.rows, n.val.cols);
    return n.grad;
  }

  Var push(Op op, int a, int b, Mat v) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return Var{this, int(nodes_.size()) - 1};
  }

  template <class F>
  Var map(Op op, Var a, F f) {
    const Mat& ma = val(a);
    Mat y(ma.rows, ma.cols);
    for (size_t i = 0; i < ma.size(); ++i) y.d[i] = f(ma.d[i]);
    return push(op, a.id, -1, std::move(y));
  }

  template <class F>
  Var zip(Op op, Var a, Var b, F f) {
    const Mat &ma = val(a), &mb = val(b);
    if (ma.rows != mb.rows || ma.cols != mb.cols)
      throw config_error("elementwise op: shape mismatch");
    Mat y(ma.rows, ma.cols);
    for (size_t i = 0; i < ma.size(); ++i) y.d[i] = f(ma.d[i], mb.d[i]);
    return push(op, a.id, b.id, std::move(y));
  }

  void check_shape(Var x, int rows, int cols) {
    const Mat& m = val(x);
    if ((rows >= 0 && m.rows != rows) || (cols >= 0 && m.cols != cols))
      throw config_error("dense: input dimension mismatch");
  }

  void back_one(Node& n, GradSink& sink) {
    const Mat& gy = n.grad;
    switch (n.op) {
      case Op::kConst:
      case Op::kInput:
        break;
      case Op::kParam: {
        double* buf = sink.buffer(*n.pb);
        for (size_t i = 0; i < gy.size(); ++i) buf[i] += gy.d[i];
        break;
      }
      case Op::kDense: {
        const Mat& x = node(n.a).val;
        Mat& gx = grad_of(n.a);
        dense_backward_dx(n.pb->w.data() + n.i0, gy.d.data(), n.i2, n.i3, x.cols, gx.d.data());
        double* buf = sink.buffer(*n.pb);
        dense_backward_dw(x.d.data(), gy.d.data(), n.i2, n.i3, x.cols, buf + n.i0, buf + n.i1);
        break;
      }
      case Op::kRelu: {
        const Mat& x = node(n.a).val;
        Mat& gx = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) gx.d[i] += x.d[i] > 0 ? gy.d[i] : 0.0;
        break;
      }
      case Op::kExp: {
        Mat& gx = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) gx.d[i] += gy.d[i] * n.val.d[i];
        break;
      }
      case Op::kSigmoid: {
        Mat& gx = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) {
          const double y = n.val.d[i];
          gx.d[i] += gy.d[i] * y * (1.0 - y);
        }
        break;
      }
      case Op::kSoftplus: {
        const Mat& x = node(n.a).val;
        Mat& gx = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) gx.d[i] += gy.d[i] * lantern::sigmoid(x.d[i]);
        break;
      }
      case Op::kNeg: {
        Mat& gx = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) gx.d[i] -= gy.d[i];
        break;
      }
      case Op::kClamp: {
        const Mat& x = node(n.a).val;
        Mat& gx = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i)
          if (x.d[i] > n.s0 && x.d[i] < n.s1) gx.d[i] += gy.d[i];
        break;
      }
      case Op::kAdd: {
        Mat& ga = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) ga.d[i] += gy.d[i];
        Mat& gb = grad_of(n.b);
        for (size_t i = 0; i < gy.size(); ++i) gb.d[i] += gy.d[i];
        break;
      }
      case Op::kSub: {
        Mat& ga = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) ga.d[i] += gy.d[i];
        Mat& gb = grad_of(n.b);
        for (size_t i = 0; i < gy.size(); ++i) gb.d[i] -= gy.d[i];
        break;
      }
      case Op::kMul: {
        const Mat &a = node(n.a).val, &b = node(n.b).val;
        Mat& ga = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) ga.d[i] += gy.d[i] * b.d[i];
        Mat& gb = grad_of(n.b);
        for (size_t i = 0; i < gy.size(); ++i) gb.d[i] += gy.d[i] * a.d[i];
        break;
      }
      case Op::kDiv: {
        const Mat& b = node(n.b).val;
        Mat& ga = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) ga.d[i] += gy.d[i] / b.d[i];
        Mat& gb = grad_of(n.b);
        for (size_t i = 0; i < gy.size(); ++i) gb.d[i] -= gy.d[i] * n.val.d[i] / b.d[i];
        break;
      }
      case Op::kAddScalar:
      case Op::kStopGrad: {
        if (n.op == Op::kStopGrad) break;
        Mat& ga = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) ga.d[i] += gy.d[i];
        break;
      }
      case Op::kMulScalar: {
        Mat& ga = grad_of(n.a);
        for (size_t i = 0; i < gy.size(); ++i) ga.d[i] += gy.d[i] * n.s0;
        break;
      }
      case Op::kConcatRows: {
        Mat& ga = grad_of(n.a);
        Mat& gb = grad_of(n.b);
        const int ra = ga.rows;
        for (int j = 0; j < gy.cols; ++j) {
          const double* gc = gy.col(j);
          double* ac = ga.col(j);
          for (int i = 0; i < ra; ++i) ac[i] += gc[i];
          double* bc = gb.col(j);
          for (int i = 0; i < gb.rows; ++i) bc[i] += gc[ra + i];
        }
        break;
      }
      case Op::kRows: {
        Mat& ga = grad_of(n.a);
        for (int j = 0; j < gy.cols; ++j) {
          const double* gc = gy.col(j);
          double* ac = ga.col(j) + n.i0;
          for (int i = 0; i < gy.rows; ++i) ac[i] += gc[i];
        }
        break;
      }
      case Op::kMulRowBcast: {
        const Mat &a = node(n.a).val, &r = node(n.b).val;
        Mat& ga = grad_of(n.a);
        Mat& gr = grad_of(n.b);
        for (int j = 0; j < gy.cols; ++j) {
          const double s = r.col(j)[0];
          const double* gc = gy.col(j);
          const double* ac = a.col(j);
          double* gac = ga.col(j);
          double acc = 0;
          for (int i = 0; i < gy.rows; ++i) {
            gac[i] += gc[i] * s;
            acc += gc[i] * ac[i];
          }
          gr.col(j)[0] += acc;
        }
        break;
      }
      case Op::kMulColBcast: {
        const Mat &a = node(n.a).val, &c = node(n.b).val;
        Mat& ga = grad_of(n.a);
        Mat& gc = grad_of(n.b);
        for (int j = 0; j < gy.cols; ++j) {
          const double* gyc = gy.col(j);
          const double* ac = a.col(j);
          double* gac = ga.col(j);
          for (int i = 0; i < gy.rows; ++i) {
            gac[i] += gyc[i] * c.d[i];
            gc.d[i] += gyc[i] * ac[i];
          }
        }
        break;
      }
      case Op::kColTimesConstRow: {
        const auto& c = const_rows_[n.crow];
        Mat& ga = grad_of(n.a);
        for (int j = 0; j < gy.cols; ++j) {
          const double* gc = gy.col(j);
          for (int i = 0; i < gy.rows; ++i) ga.d[i] += gc[i] * c[j];
        }
        break;
      }
      case Op::kSegCumsumExcl: {
        Mat& ga = grad_of(n.a);
        const int L = n.i0;
        for (int s = 0; s < gy.cols / L; ++s)
          for (int i = 0; i < gy.rows; ++i) {
            double acc = 0;
            for (int k = L - 1; k >= 0; --k) {
              acc += gy(i, s * L + k);
              ga(i, s * L + k) += acc - gy(i, s * L + k);
            }
          }
        break;
      }
      case Op::kSegSum: {
        Mat& ga = grad_of(n.a);
        const int L = n.i0;
        for (int s = 0; s < gy.cols; ++s)
          for (int k = 0; k < L; ++k) {
            const double* gc = gy.col(s);
            double* ac = ga.col(s * L + k);
            for (int i = 0; i < gy.rows; ++i) ac[i] += gc[i];
          }
        break;
      }
      case Op::kSumAll: {
        Mat& ga = grad_of(n.a);
        const double g = gy.d[0];
        for (size_t i = 0; i < ga.size(); ++i) ga.d[i] += g;
        break;
      }
      case Op::kHashGather: {
        const HashPlan& p = plans_[n.plan];
        for (int l = 0; l < p.levels; ++l) {
          double* buf = sink.buffer(*p.tables[l]);
          for (int j = 0; j < p.cols; ++j) {
            const size_t base = p.at(l, j);
            const double* gc = gy.col(j) + l * p.feats;
            for (int c = 0; c < 8; ++c) {
              const double wc = p.w[base + c];
              double* e = buf + size_t(p.idx[base + c]) * p.feats;
              for (int f = 0; f < p.feats; ++f) e[f] += wc * gc[f];
            }
          }
        }
        break;
      }
    }
  }
};

using Var = Tape::Var;

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

enum class Act : uint8_t { kNone, kRelu };

/// Layer-dims descriptor; parameters live in one ParamBlock laid out as
/// column-major W then b per layer, in order.
struct MlpSpec {
  int input_dim = 1;
  int hidden_dim = 1;
  int hidden_layers = 0;
  int output_dim = 1;
  Act hidden_activation = Act::kRelu;
  Act output_activation = Act::kNone;

  void validate() const {
    if (input_dim < 1 || hidden_dim < 1 || hidden_layers < 0 || output_dim < 1)
      throw config_error("MlpSpec: all dims must be >= 1");
  }

  int layers() const { return hidden_layers + 1; }
  int in_dim(int layer) const { return layer == 0 ? input_dim : hidden_dim; }
  int out_dim(int layer) const { return layer == layers() - 1 ? output_dim : hidden_dim; }

  size_t param_count() const {
    size_t n = 0;
    for (int l = 0; l < layers(); ++l) n += size_t(in_dim(l) + 1) * out_dim(l);
    return n;
  }
  size_t w_offset(int layer) const {
    size_t n = 0;
    for (int l = 0; l < layer; ++l) n += size_t(in_dim(l) + 1) * out_dim(l);
    return n;
  }
  size_t b_offset(int layer) const {
    return w_offset(layer) + size_t(in_dim(layer)) * out_dim(layer);
  }
};

inline ParamBlock make_mlp_params(const MlpSpec& spec, const std::string& name) {
  spec.validate();
  return ParamBlock(name, spec.param_count(),
                    {spec.input_dim, spec.hidden_dim, spec.hidden_layers, spec.output_dim});
}

/// He-normal hidden layers; small final layer so field outputs start near
/// their activation midpoints.
inline void init_mlp_params(const MlpSpec& spec, ParamBlock& pb, Rng& rng,
                            double out_scale = 1e-2) {
  for (int l = 0; l < spec.layers(); ++l) {
    const int in = spec.in_dim(l), out = spec.out_dim(l);
    const bool last = l == spec.layers() - 1;
    const double std = last ? out_scale : std::sqrt(2.0 / in);
    double* w = pb.w.data() + spec.w_offset(l);
    for (int i = 0; i < in * out; ++i) w[i] = std * rng.normal();
    double* b = pb.w.data() + spec.b_offset(l);
    std::fill(b, b + out, 0.0);
  }
}

/// Recorded forward pass; gradients flow to `pb` and to the input var.
inline Var mlp_apply(Tape& t, const MlpSpec& spec, const ParamBlock& pb, Var x) {
  spec.validate();
  if (pb.size() != spec.param_count())
    throw config_error("mlp_apply: ParamBlock '" + pb.name + "' size does not match spec");
  Var h = x;
  for (int l = 0; l < spec.layers(); ++l) {
    h = t.dense(h, pb, int(spec.w_offset(l)), int(spec.b_offset(l)), spec.in_dim(l),
                spec.out_dim(l));
    const bool last = l == spec.layers() - 1;
    const Act act = last ? spec.output_activation : spec.hidden_activation;
    if (act == Act::kRelu) h = t.relu(h);
  }
  return h;
}

/// Plain batched forward (no recording); X is in_dim x n, Y is out_dim x n.
inline void mlp_forward(const MlpSpec& spec, const ParamBlock& pb, const double* X, int n,
                        double* Y, std::vector<double>& workspace) {
  spec.validate();
  if (pb.size() != spec.param_count())
    throw config_error("mlp_forward: ParamBlock '" + pb.name + "' size does not match spec");
  const size_t buf = size_t(spec.hidden_dim) * n;
  workspace.resize(2 * buf);
  double* a = workspace.data();
  double* b = workspace.data() + buf;
  const double* cur = X;
  for (int l = 0; l < spec.layers(); ++l) {
    const int in = spec.in_dim(l), out = spec.out_dim(l);
    const bool last = l == spec.layers() - 1;
    double* dst = last ? Y : (cur == a ? b : a);
    dense_forward(pb.w.data() + spec.w_offset(l), pb.w.data() + spec.b_offset(l), cur, in, out, n,
                  dst);
    const Act act = last ? spec.output_activation : spec.hidden_activation;
    if (act == Act::kRelu)
      for (size_t i = 0; i < size_t(out) * n; ++i) dst[i] = dst[i] > 0 ? dst[i] : 0;
    cur = dst;
  }
}

inline std::vector<double> mlp_forward(const MlpSpec& spec, const ParamBlock& pb,
                                       std::span<const double> input) {
  if (int(input.size()) != spec.input_dim)
    throw config_error("mlp_forward: input length does not match spec.input_dim");
  std::vector<double> out(spec.output_dim), ws;
  mlp_forward(spec, pb, input.data(), 1, out.data(), ws);
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  int64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double lr = 1e-2;
};

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state; clears the gradient accumulator on success.
inline void adam_step(ParamBlock& pb, AdamState& st) {
  if (st.m.empty()) st.m.assign(pb.size(), 0.0);
  if (st.v.empty()) st.v.assign(pb.size(), 0.0);
  if (st.m.size() != pb.size() || st.v.size() != pb.size())
    throw config_error("adam_step: state shape does not match ParamBlock '" + pb.name + "'");
  if (!pb.grads_finite())
    throw domain_error("adam_step: non-finite gradient for ParamBlock '" + pb.name + "'");
  st.t += 1;
  const double c1 = 1.0 - std::pow(st.beta1, double(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, double(st.t));
  for (size_t i = 0; i < pb.size(); ++i) {
    const double g = pb.g[i];
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    pb.w[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
  }
  pb.zero_grad();
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// Max over coordinates of |g_analytic - g_fd| / max(1, |g_analytic|), with
/// central differences of step h on the scalar function f(x).
inline double grad_check(const std::function<Var(Tape&, Var)>& f, std::span<const double> point,
                         double h) {
  if (h <= 0) throw domain_error("grad_check: h must be positive");
  Tape t;
  Var x = t.input(Mat::column(point));
  Var y = f(t, x);
  DirectSink none;
  struct NullSink : GradSink {
    std::unordered_map<const ParamBlock*, std::vector<double>> bufs;
    double* buffer(const ParamBlock& pb) override {
      auto& v = bufs[&pb];
      if (v.empty()) v.assign(pb.size(), 0.0);
      return v.data();
    }
  } sink;
  t.backward(y, sink);
  const Mat& g = x.grad();

  auto eval = [&](std::span<const double> p) {
    Tape tt;
    Var xx = tt.input(Mat::column(p));
    return f(tt, xx).val()(0, 0);
  };

  std::vector<double> p(point.begin(), point.end());
  double worst = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double fp = eval(p);
    p[i] = keep - h;
    const double fm = eval(p);
    p[i] = keep;
    const double fd = (fp - fm) / (2 * h);
    const double ga = g.empty() ? 0.0 : g.d[i];
    worst = std::max(worst, std::abs(ga - fd) / std::max(1.0, std::abs(ga)));
  }
  return worst;
}

/// Same metric, but w.r.t. entries of parameter blocks feeding a re-buildable
/// scalar. `max_coords` caps the FD probes per block (all if <= 0); the probe
/// subset is drawn from `rng` so repeated runs can cover different entries.
inline double grad_check_params(const std::function<Var(Tape&)>& build,
                                std::span<ParamBlock* const> blocks, double h,
                                int max_coords = -1, Rng* rng = nullptr) {
  if (h <= 0) throw domain_error("grad_check_params: h must be positive");
  Tape t;
  Var y = build(t);
  StoreSink sink;
  t.backward(y, sink);

  auto eval = [&] {
    Tape tt;
    return build(tt).val()(0, 0);
  };

  double worst = 0;
  for (ParamBlock* pb : blocks) {
    std::vector<double> analytic(pb->size(), 0.0);
    {
      // StoreSink::merge_into adds, so route through a scratch block copy.
      StoreSink probe;
      Tape tt;
      Var yy = build(tt);
      tt.backward(yy, probe);
      ParamBlock scratch(pb->name, pb->size());
      probe.merge_into(*pb == *pb ? scratch : scratch);  // silence unused warning path
      // merge_into keys by pointer; rebuild keyed on the real block:
      std::fill(analytic.begin(), analytic.end(), 0.0);
      struct Reader : GradSink {
        const ParamBlock* want;
        std::vector<double>* out;
        std::vector<double> scrap;
        double* buffer(const ParamBlock& b) override {
          if (&b == want) return out->data();
          scrap.assign(b.size(), 0.0);
          return scrap.data();
        }
      } reader;
      reader.want = pb;
      reader.out = &analytic;
      Tape t3;
      Var y3 = build(t3);
      t3.backward(y3, reader);
    }

    std::vector<size_t> coords;
    if (max_coords <= 0 || size_t(max_coords) >= pb->size()) {
      coords.resize(pb->size());
      for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      Rng fallback(12345);
      Rng& r = rng ? *rng : fallback;
      for (int i = 0; i < max_coords; ++i) coords.push_back(r.index(pb->size()));
    }

    for (size_t i : coords) {
      const double keep = pb->w[i];
      pb->w[i] = keep + h;
      const double fp = eval();
      pb->w[i] = keep - h;
      const double fm = eval();
      pb->w[i] = keep;
      const double fd = (fp - fm) / (2 * h);
      worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

}  // namespace lantern::ad
