#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace eastnet {

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

// Deterministic RNG: we do not rely on std distributions, whose output is
// implementation-defined; splitmix-style scrambling of mt19937_64 draws.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    int uniform_int(int n) { return static_cast<int>(eng_() % static_cast<uint64_t>(n)); }

    // Box-Muller, one value per call (the spare is kept)
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform01();
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 2.0 * M_PI * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(eng_() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Dense row-major f64 tensor. Copies share the underlying buffer; op outputs
// are freshly allocated and never aliased, so sharing is safe. Parameters are
// updated in place through their buffer, which every holder observes.
class Tensor {
public:
    Tensor() : shape_{0}, data_(std::make_shared<std::vector<double>>()) {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)) {
        check_dims();
    }

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        check_dims();
        if (shape_numel(shape_) != static_cast<int64_t>(data_->size()))
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) (*t.data_)[static_cast<size_t>(i) * n + i] = 1.0;
        return t;
    }

    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
        Tensor t(std::move(shape));
        for (double& x : *t.data_) x = rng.uniform(lo, hi);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i < 0 ? rank() + i : i)]; }
    int64_t size() const { return static_cast<int64_t>(data_->size()); }
    bool is_scalar() const { return size() == 1; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }

    double& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    double item() const {
        if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
        return (*data_)[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    bool all_finite() const {
        for (double x : *data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    // autodiff bookkeeping: id on the tape that stamped this handle
    int node = -1;
    uint64_t stamp = 0;

private:
    void check_dims() const {
        for (int d : shape_)
            if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
};

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// C(r x q) += / = A(r x p) * B(p x q), raw row-major buffers
inline void mm(double* c, const double* a, const double* b, int r, int p, int q, bool accumulate) {
    EMap C(c, r, q);
    ECMap A(a, r, p);
    ECMap B(b, p, q);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

inline void mm_tn(double* c, const double* a, const double* b, int r, int p, int q, bool accumulate) {
    // C(p x q) (+)= A(r x p)^T * B(r x q)
    EMap C(c, p, q);
    ECMap A(a, r, p);
    ECMap B(b, r, q);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

inline void mm_nt(double* c, const double* a, const double* b, int r, int p, int q, bool accumulate) {
    // C(r x p) (+)= A(r x q) * B(p x q)^T
    EMap C(c, r, p);
    ECMap A(a, r, q);
    ECMap B(b, p, q);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

enum class OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    SoftmaxRows,
    LayerNormRows,
    Concat,
    Slice,
    Transpose2d,
    Reshape,
    RepeatRows,
    Sum,
    Mean,
};

// Reverse-mode tape. Nodes are appended in creation order, which is a valid
// topological order; backward walks them in exact reverse. One tape per model
// instance, one driving thread per tape.
class Tape {
public:
    Tape() : stamp_(next_stamp()) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    struct Node {
        OpKind op = OpKind::Leaf;
        int in0 = -1, in1 = -1, in2 = -1;
        Tensor v0, v1, v2;  // saved input values (only what backward needs)
        Tensor out;
        int axis = 0, start = 0, len = 0, reps = 0;
        double c = 0.0;
        std::vector<int> multi_ids;
        std::vector<int> part_lens;
        Shape in_shape;
    };

    static Tape*& active_slot() {
        thread_local Tape* t = nullptr;
        return t;
    }
    static Tape* active() { return active_slot(); }

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_slot()) { active_slot() = &t; }
        ~Scope() { active_slot() = prev_; }

    private:
        Tape* prev_;
    };

    uint64_t stamp() const { return stamp_; }
    size_t node_count() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        grads_.clear();
        stamp_ = next_stamp();
    }

    bool tracks(const Tensor& t) const { return t.node >= 0 && t.stamp == stamp_; }

    // Registers a leaf; subsequent ops on the handle flow gradients to it.
    void watch(Tensor& t) {
        if (tracks(t)) return;
        Node n;
        n.op = OpKind::Leaf;
        n.out = t;
        t.node = push(std::move(n));
        t.stamp = stamp_;
    }

    int push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void backward(const Tensor& loss) {
        if (!loss.is_scalar())
            throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        if (!tracks(loss)) throw ContractError("backward: loss is not on the active tape");
        grads_.assign(nodes_.size(), Tensor());
        grads_[static_cast<size_t>(loss.node)] = Tensor::ones({1});
        for (int i = loss.node; i >= 0; --i) {
            const Tensor& g = grads_[static_cast<size_t>(i)];
            if (g.size() == 0) continue;  // node does not influence the loss
            step_backward(nodes_[static_cast<size_t>(i)], g);
        }
    }

    // Gradient of a watched/derived tensor after backward; nullptr when the
    // tensor is off-tape or unreached.
    const Tensor* grad(const Tensor& t) const {
        if (!tracks(t)) return nullptr;
        if (static_cast<size_t>(t.node) >= grads_.size()) return nullptr;
        const Tensor& g = grads_[static_cast<size_t>(t.node)];
        return g.size() == 0 ? nullptr : &g;
    }

private:
    static uint64_t next_stamp() {
        static std::atomic<uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    Tensor& grad_buf(int id, const Shape& shape) {
        Tensor& g = grads_[static_cast<size_t>(id)];
        if (g.size() == 0) g = Tensor::zeros(shape);
        return g;
    }

    void accumulate(int id, const Tensor& delta) {
        if (id < 0) return;
        Tensor& g = grad_buf(id, delta.shape());
        const double* s = delta.data();
        double* d = g.data();
        for (int64_t i = 0; i < delta.size(); ++i) d[i] += s[i];
    }

    void accumulate_scalar(int id, double v) {
        if (id < 0) return;
        Tensor& g = grad_buf(id, {1});
        g[0] += v;
    }

    void step_backward(const Node& n, const Tensor& g);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    uint64_t stamp_;
};

namespace detail {

inline void guard_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
    if (!t.all_finite()) throw NumericError(std::string("non-finite values produced by ") + op);
#else
    (void)t;
    (void)op;
#endif
}

// Records a node if a tape is active and any input is tracked.
inline void record(Tape::Node&& n, Tensor& out, std::initializer_list<const Tensor*> ins) {
    Tape* tape = Tape::active();
    if (!tape) return;
    bool tracked = false;
    for (const Tensor* t : ins)
        if (tape->tracks(*t)) tracked = true;
    for (int id : n.multi_ids)
        if (id >= 0) tracked = true;
    if (!tracked) return;
    n.out = out;
    out.node = tape->push(std::move(n));
    out.stamp = tape->stamp();
}

inline int tape_id(const Tensor& t) {
    Tape* tape = Tape::active();
    return tape && tape->tracks(t) ? t.node : -1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward operations. Every op validates shapes, computes the value, and
// records a tape node when differentiation is active.
// ---------------------------------------------------------------------------

// a [r x p] or [B x r x p], b [p x q] or [B x p x q]; a batch dim on either
// side broadcasts the other.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if ((a.rank() != 2 && a.rank() != 3) || (b.rank() != 2 && b.rank() != 3))
        throw ShapeError("matmul expects rank-2/3 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int p = a.dim(-1);
    if (b.dim(-2) != p)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const int r = a.dim(-2), q = b.dim(-1);
    const int ba = a.rank() == 3 ? a.dim(0) : 0;
    const int bb = b.rank() == 3 ? b.dim(0) : 0;
    if (ba > 0 && bb > 0 && ba != bb)
        throw ShapeError("matmul batch dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const int batch = std::max(ba, bb);

    Tensor out(batch > 0 ? Shape{batch, r, q} : Shape{r, q});
    if (batch == 0) {
        detail::mm(out.data(), a.data(), b.data(), r, p, q, false);
    } else if (bb == 0) {
        // stacked rows times a shared rhs: one wide product
        detail::mm(out.data(), a.data(), b.data(), batch * r, p, q, false);
    } else {
        const double* pa = a.data();
        const double* pb = b.data();
        double* po = out.data();
        const int64_t sa = ba > 0 ? static_cast<int64_t>(r) * p : 0;
        const int64_t sb = static_cast<int64_t>(p) * q;
        const int64_t so = static_cast<int64_t>(r) * q;
        for (int i = 0; i < batch; ++i)
            detail::mm(po + i * so, pa + i * sa, pb + i * sb, r, p, q, false);
    }
    detail::guard_finite(out, "matmul");

    Tape::Node n;
    n.op = OpKind::MatMul;
    n.in0 = detail::tape_id(a);
    n.in1 = detail::tape_id(b);
    n.v0 = a;
    n.v1 = b;
    detail::record(std::move(n), out, {&a, &b});
    return out;
}

namespace detail {

enum class Ew { Add, Sub, Mul };

inline Tensor ewise(Ew kind, const Tensor& a, const Tensor& b, const char* name) {
    const bool sa = a.is_scalar(), sb = b.is_scalar();
    if (!sa && !sb && !a.same_shape(b))
        throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not match (only scalar broadcast is allowed)");
    const Tensor& big = sa ? b : a;
    Tensor out(big.shape());
    const int64_t n = big.size();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const int64_t stride_a = sa ? 0 : 1;
    const int64_t stride_b = sb ? 0 : 1;
    switch (kind) {
        case Ew::Add:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i * stride_a] + pb[i * stride_b];
            break;
        case Ew::Sub:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i * stride_a] - pb[i * stride_b];
            break;
        case Ew::Mul:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i * stride_a] * pb[i * stride_b];
            break;
    }
    guard_finite(out, name);
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = detail::ewise(detail::Ew::Add, a, b, "add");
    Tape::Node n;
    n.op = OpKind::Add;
    n.in0 = detail::tape_id(a);
    n.in1 = detail::tape_id(b);
    n.v0 = a;
    n.v1 = b;
    detail::record(std::move(n), out, {&a, &b});
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    Tensor out = detail::ewise(detail::Ew::Sub, a, b, "sub");
    Tape::Node n;
    n.op = OpKind::Sub;
    n.in0 = detail::tape_id(a);
    n.in1 = detail::tape_id(b);
    n.v0 = a;
    n.v1 = b;
    detail::record(std::move(n), out, {&a, &b});
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor out = detail::ewise(detail::Ew::Mul, a, b, "mul");
    Tape::Node n;
    n.op = OpKind::Mul;
    n.in0 = detail::tape_id(a);
    n.in1 = detail::tape_id(b);
    n.v0 = a;
    n.v1 = b;
    detail::record(std::move(n), out, {&a, &b});
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * c;
    detail::guard_finite(out, "scale");
    Tape::Node n;
    n.op = OpKind::Scale;
    n.in0 = detail::tape_id(a);
    n.c = c;
    detail::record(std::move(n), out, {&a});
    return out;
}

// x [... x q] + bias [q], broadcast over leading dims
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || bias.dim(0) != x.dim(-1))
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                         shape_str(x.shape()));
    Tensor out(x.shape());
    const int q = bias.dim(0);
    const int64_t rows = x.size() / q;
    const double* px = x.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < q; ++j) po[r * q + j] = px[r * q + j] + pb[j];
    detail::guard_finite(out, "add_bias");
    Tape::Node n;
    n.op = OpKind::AddBias;
    n.in0 = detail::tape_id(x);
    n.in1 = detail::tape_id(bias);
    n.len = q;
    detail::record(std::move(n), out, {&x, &bias});
    return out;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) po[i] = detail::stable_sigmoid(px[i]);
    detail::guard_finite(out, "sigmoid");
    Tape::Node n;
    n.op = OpKind::Sigmoid;
    n.in0 = detail::tape_id(x);
    detail::record(std::move(n), out, {&x});
    return out;
}

inline Tensor tanh(const Tensor& x) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) po[i] = std::tanh(px[i]);
    detail::guard_finite(out, "tanh");
    Tape::Node n;
    n.op = OpKind::Tanh;
    n.in0 = detail::tape_id(x);
    detail::record(std::move(n), out, {&x});
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
    detail::guard_finite(out, "relu");
    Tape::Node n;
    n.op = OpKind::Relu;
    n.in0 = detail::tape_id(x);
    n.v0 = x;
    detail::record(std::move(n), out, {&x});
    return out;
}

inline Tensor abs(const Tensor& x) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) po[i] = std::fabs(px[i]);
    detail::guard_finite(out, "abs");
    Tape::Node n;
    n.op = OpKind::Abs;
    n.in0 = detail::tape_id(x);
    n.v0 = x;
    detail::record(std::move(n), out, {&x});
    return out;
}

// Row-wise softmax with max subtraction; rows sum to 1 within 1e-12.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows expects rank-2, got " + shape_str(x.shape()));
#ifndef NDEBUG
    if (!x.all_finite()) throw NumericError("softmax_rows: non-finite input");
#endif
    const int r = x.dim(0), c = x.dim(1);
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int i = 0; i < r; ++i) {
        const double* row = px + static_cast<int64_t>(i) * c;
        double* orow = po + static_cast<int64_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < c; ++j) orow[j] /= sum;
    }
    Tape::Node n;
    n.op = OpKind::SoftmaxRows;
    n.in0 = detail::tape_id(x);
    detail::record(std::move(n), out, {&x});
    return out;
}

// Standardizes each row to zero mean / unit variance (eps in the denominator),
// then applies a scalar gain and shift. Rank-1 input is a single row.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& shift,
                              double eps = 1e-6) {
    if (!gain.is_scalar() || !shift.is_scalar())
        throw ShapeError("layer_norm_rows: gain and shift must be scalars");
    const int c = x.dim(-1);
    if (c < 2) throw ContractError("layer_norm_rows needs rows of length >= 2");
    const int64_t rows = x.size() / c;
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    const double g = gain.item(), b = shift.item();
    for (int64_t i = 0; i < rows; ++i) {
        const double* row = px + i * c;
        double* orow = po + i * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            double d = row[j] - mean;
            var += d * d;
        }
        var /= c;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < c; ++j) orow[j] = (row[j] - mean) * inv * g + b;
    }
    detail::guard_finite(out, "layer_norm_rows");
    Tape::Node n;
    n.op = OpKind::LayerNormRows;
    n.in0 = detail::tape_id(x);
    n.in1 = detail::tape_id(gain);
    n.in2 = detail::tape_id(shift);
    n.v0 = x;
    n.v1 = gain;
    n.c = eps;
    detail::record(std::move(n), out, {&x, &gain, &shift});
    return out;
}

inline Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    const int rank = parts[0].rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    int total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != rank) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < rank; ++d)
            if (d != axis && t.dim(d) != out_shape[static_cast<size_t>(d)])
                throw ShapeError("concat: shapes " + shape_str(out_shape) + " and " +
                                 shape_str(t.shape()) + " differ off axis " + std::to_string(axis));
        total += t.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out(out_shape);

    // outer = product of dims before axis, inner = product after
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<size_t>(d)];
    double* po = out.data();
    const int64_t out_stride = static_cast<int64_t>(total) * inner;
    int64_t off = 0;
    for (const Tensor& t : parts) {
        const int64_t chunk = static_cast<int64_t>(t.dim(axis)) * inner;
        const double* pt = t.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(pt + o * chunk, pt + (o + 1) * chunk, po + o * out_stride + off);
        off += chunk;
    }

    Tape::Node n;
    n.op = OpKind::Concat;
    n.axis = axis;
    Tape* tape = Tape::active();
    for (const Tensor& t : parts) {
        n.multi_ids.push_back(tape && tape->tracks(t) ? t.node : -1);
        n.part_lens.push_back(t.dim(axis));
    }
    detail::record(std::move(n), out, {});
    return out;
}

inline Tensor concat(std::initializer_list<Tensor> parts, int axis) {
    std::vector<Tensor> v(parts);
    return concat(std::span<const Tensor>(v), axis);
}

inline Tensor slice(const Tensor& x, int axis, int start, int len) {
    const int rank = x.rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > x.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") exceeds dim " +
                         std::to_string(x.dim(axis)) + " of " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out(out_shape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < rank; ++d) inner *= x.dim(d);
    const int64_t in_stride = static_cast<int64_t>(x.dim(axis)) * inner;
    const int64_t out_stride = static_cast<int64_t>(len) * inner;
    const double* px = x.data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        std::copy(px + o * in_stride + start * inner, px + o * in_stride + (start + len) * inner,
                  po + o * out_stride);

    Tape::Node n;
    n.op = OpKind::Slice;
    n.in0 = detail::tape_id(x);
    n.axis = axis;
    n.start = start;
    n.len = len;
    n.in_shape = x.shape();
    detail::record(std::move(n), out, {&x});
    return out;
}

// Swaps the two trailing dims; a leading batch dim is carried through.
inline Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2 && x.rank() != 3)
        throw ShapeError("transpose2d expects rank-2/3, got " + shape_str(x.shape()));
    const int r = x.dim(-2), c = x.dim(-1);
    const int batch = x.rank() == 3 ? x.dim(0) : 1;
    Shape out_shape = x.rank() == 3 ? Shape{batch, c, r} : Shape{c, r};
    Tensor out(out_shape);
    const double* px = x.data();
    double* po = out.data();
    const int64_t plane = static_cast<int64_t>(r) * c;
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                po[b * plane + static_cast<int64_t>(j) * r + i] =
                    px[b * plane + static_cast<int64_t>(i) * c + j];
    Tape::Node n;
    n.op = OpKind::Transpose2d;
    n.in0 = detail::tape_id(x);
    detail::record(std::move(n), out, {&x});
    return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor out(shape, std::vector<double>(x.data(), x.data() + x.size()));
    Tape::Node n;
    n.op = OpKind::Reshape;
    n.in0 = detail::tape_id(x);
    n.in_shape = x.shape();
    detail::record(std::move(n), out, {&x});
    return out;
}

// x [.. x 1 x v] -> [.. x reps x v]
inline Tensor repeat_rows(const Tensor& x, int reps) {
    if (x.rank() < 2 || x.dim(-2) != 1)
        throw ShapeError("repeat_rows expects a singleton row axis, got " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = reps;
    Tensor out(out_shape);
    const int v = x.dim(-1);
    const int64_t outer = x.size() / v;
    const double* px = x.data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int rpt = 0; rpt < reps; ++rpt)
            std::copy(px + o * v, px + (o + 1) * v, po + (o * reps + rpt) * v);
    Tape::Node n;
    n.op = OpKind::RepeatRows;
    n.in0 = detail::tape_id(x);
    n.reps = reps;
    n.in_shape = x.shape();
    detail::record(std::move(n), out, {&x});
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    const double* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) s += px[i];
    Tensor out = Tensor::scalar(s);
    detail::guard_finite(out, "sum");
    Tape::Node n;
    n.op = OpKind::Sum;
    n.in0 = detail::tape_id(x);
    n.in_shape = x.shape();
    detail::record(std::move(n), out, {&x});
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    double s = 0.0;
    const double* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) s += px[i];
    Tensor out = Tensor::scalar(s / static_cast<double>(x.size()));
    detail::guard_finite(out, "mean");
    Tape::Node n;
    n.op = OpKind::Mean;
    n.in0 = detail::tape_id(x);
    n.in_shape = x.shape();
    detail::record(std::move(n), out, {&x});
    return out;
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

inline void Tape::step_backward(const Node& n, const Tensor& g) {
    switch (n.op) {
        case OpKind::Leaf:
            break;
        case OpKind::MatMul: {
            const Tensor& a = n.v0;
            const Tensor& b = n.v1;
            const int p = a.dim(-1), r = a.dim(-2), q = b.dim(-1);
            const int ba = a.rank() == 3 ? a.dim(0) : 0;
            const int bb = b.rank() == 3 ? b.dim(0) : 0;
            const int batch = std::max(ba, bb);
            if (n.in0 >= 0) {
                Tensor& da = grad_buf(n.in0, a.shape());
                if (batch == 0) {
                    detail::mm_nt(da.data(), g.data(), b.data(), r, p, q, true);
                } else if (bb == 0) {
                    detail::mm_nt(da.data(), g.data(), b.data(), batch * r, p, q, true);
                } else if (ba == 0) {
                    for (int i = 0; i < batch; ++i)
                        detail::mm_nt(da.data(), g.data() + static_cast<int64_t>(i) * r * q,
                                      b.data() + static_cast<int64_t>(i) * p * q, r, p, q, true);
                } else {
                    for (int i = 0; i < batch; ++i)
                        detail::mm_nt(da.data() + static_cast<int64_t>(i) * r * p,
                                      g.data() + static_cast<int64_t>(i) * r * q,
                                      b.data() + static_cast<int64_t>(i) * p * q, r, p, q, true);
                }
            }
            if (n.in1 >= 0) {
                Tensor& db = grad_buf(n.in1, b.shape());
                if (batch == 0) {
                    detail::mm_tn(db.data(), a.data(), g.data(), r, p, q, true);
                } else if (bb == 0) {
                    detail::mm_tn(db.data(), a.data(), g.data(), batch * r, p, q, true);
                } else if (ba == 0) {
                    for (int i = 0; i < batch; ++i)
                        detail::mm_tn(db.data() + static_cast<int64_t>(i) * p * q, a.data(),
                                      g.data() + static_cast<int64_t>(i) * r * q, r, p, q, true);
                } else {
                    for (int i = 0; i < batch; ++i)
                        detail::mm_tn(db.data() + static_cast<int64_t>(i) * p * q,
                                      a.data() + static_cast<int64_t>(i) * r * p,
                                      g.data() + static_cast<int64_t>(i) * r * q, r, p, q, true);
                }
            }
            break;
        }
        case OpKind::Add:
        case OpKind::Sub: {
            const double sign1 = n.op == OpKind::Sub ? -1.0 : 1.0;
            auto side = [&](int id, const Tensor& v, double sgn) {
                if (id < 0) return;
                if (v.is_scalar() && g.size() > 1) {
                    double s = 0.0;
                    for (int64_t i = 0; i < g.size(); ++i) s += g[i];
                    accumulate_scalar(id, sgn * s);
                } else {
                    Tensor& d = grad_buf(id, v.shape());
                    for (int64_t i = 0; i < g.size(); ++i) d[i] += sgn * g[i];
                }
            };
            side(n.in0, n.v0, 1.0);
            side(n.in1, n.v1, sign1);
            break;
        }
        case OpKind::Mul: {
            auto side = [&](int id, const Tensor& self, const Tensor& other) {
                if (id < 0) return;
                const double* po = other.data();
                const int64_t so = other.is_scalar() ? 0 : 1;
                if (self.is_scalar() && g.size() > 1) {
                    double s = 0.0;
                    for (int64_t i = 0; i < g.size(); ++i) s += g[i] * po[i * so];
                    accumulate_scalar(id, s);
                } else {
                    Tensor& d = grad_buf(id, self.shape());
                    for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * po[i * so];
                }
            };
            side(n.in0, n.v0, n.v1);
            side(n.in1, n.v1, n.v0);
            break;
        }
        case OpKind::Scale: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, g.shape());
            for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.c;
            break;
        }
        case OpKind::AddBias: {
            if (n.in0 >= 0) accumulate(n.in0, g);
            if (n.in1 >= 0) {
                Tensor& db = grad_buf(n.in1, {n.len});
                const int q = n.len;
                const int64_t rows = g.size() / q;
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < q; ++j) db[j] += g[r * q + j];
            }
            break;
        }
        case OpKind::Sigmoid: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, g.shape());
            const Tensor& y = n.out;
            for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
            break;
        }
        case OpKind::Tanh: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, g.shape());
            const Tensor& y = n.out;
            for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * (1.0 - y[i] * y[i]);
            break;
        }
        case OpKind::Relu: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, g.shape());
            const Tensor& x = n.v0;
            // subgradient at 0 is 0
            for (int64_t i = 0; i < g.size(); ++i) d[i] += x[i] > 0.0 ? g[i] : 0.0;
            break;
        }
        case OpKind::Abs: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, g.shape());
            const Tensor& x = n.v0;
            for (int64_t i = 0; i < g.size(); ++i)
                d[i] += x[i] > 0.0 ? g[i] : (x[i] < 0.0 ? -g[i] : 0.0);
            break;
        }
        case OpKind::SoftmaxRows: {
            if (n.in0 < 0) break;
            const Tensor& y = n.out;
            const int r = y.dim(0), c = y.dim(1);
            Tensor& d = grad_buf(n.in0, y.shape());
            for (int i = 0; i < r; ++i) {
                const int64_t off = static_cast<int64_t>(i) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += g[off + j] * y[off + j];
                for (int j = 0; j < c; ++j) d[off + j] += y[off + j] * (g[off + j] - dot);
            }
            break;
        }
        case OpKind::LayerNormRows: {
            const Tensor& x = n.v0;
            const double gain = n.v1.item();
            const double eps = n.c;
            const int c = x.dim(-1);
            const int64_t rows = x.size() / c;
            Tensor* dx = nullptr;
            if (n.in0 >= 0) dx = &grad_buf(n.in0, x.shape());
            double dgain = 0.0, dshift = 0.0;
            for (int64_t i = 0; i < rows; ++i) {
                const int64_t off = i * c;
                double mean = 0.0;
                for (int j = 0; j < c; ++j) mean += x[off + j];
                mean /= c;
                double var = 0.0;
                for (int j = 0; j < c; ++j) {
                    double dd = x[off + j] - mean;
                    var += dd * dd;
                }
                var /= c;
                const double inv = 1.0 / std::sqrt(var + eps);
                double gsum = 0.0, gdot = 0.0;
                for (int j = 0; j < c; ++j) {
                    const double z = (x[off + j] - mean) * inv;
                    gsum += g[off + j];
                    gdot += g[off + j] * z;
                    dgain += g[off + j] * z;
                }
                dshift += gsum;
                if (dx) {
                    for (int j = 0; j < c; ++j) {
                        const double z = (x[off + j] - mean) * inv;
                        (*dx)[off + j] +=
                            gain * inv * (g[off + j] - gsum / c - z * gdot / c);
                    }
                }
            }
            if (n.in1 >= 0) accumulate_scalar(n.in1, dgain);
            if (n.in2 >= 0) accumulate_scalar(n.in2, dshift);
            break;
        }
        case OpKind::Concat: {
            const int rank = n.out.rank();
            int64_t outer = 1, inner = 1;
            for (int d = 0; d < n.axis; ++d) outer *= n.out.dim(d);
            for (int d = n.axis + 1; d < rank; ++d) inner *= n.out.dim(d);
            const int64_t g_stride = static_cast<int64_t>(n.out.dim(n.axis)) * inner;
            int64_t off = 0;
            for (size_t k = 0; k < n.multi_ids.size(); ++k) {
                const int64_t chunk = static_cast<int64_t>(n.part_lens[k]) * inner;
                if (n.multi_ids[k] >= 0) {
                    Shape part_shape = n.out.shape();
                    part_shape[static_cast<size_t>(n.axis)] = n.part_lens[k];
                    Tensor& d = grad_buf(n.multi_ids[k], part_shape);
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t i = 0; i < chunk; ++i)
                            d[o * chunk + i] += g[o * g_stride + off + i];
                }
                off += chunk;
            }
            break;
        }
        case OpKind::Slice: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, n.in_shape);
            const int rank = static_cast<int>(n.in_shape.size());
            int64_t outer = 1, inner = 1;
            for (int dd = 0; dd < n.axis; ++dd) outer *= n.in_shape[static_cast<size_t>(dd)];
            for (int dd = n.axis + 1; dd < rank; ++dd) inner *= n.in_shape[static_cast<size_t>(dd)];
            const int64_t in_stride = static_cast<int64_t>(n.in_shape[static_cast<size_t>(n.axis)]) * inner;
            const int64_t out_stride = static_cast<int64_t>(n.len) * inner;
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < out_stride; ++i)
                    d[o * in_stride + n.start * inner + i] += g[o * out_stride + i];
            break;
        }
        case OpKind::Transpose2d: {
            if (n.in0 < 0) break;
            const int r = n.out.dim(-1), c = n.out.dim(-2);  // input dims
            const int batch = n.out.rank() == 3 ? n.out.dim(0) : 1;
            Shape in_shape = n.out.rank() == 3 ? Shape{batch, r, c} : Shape{r, c};
            Tensor& d = grad_buf(n.in0, in_shape);
            const int64_t plane = static_cast<int64_t>(r) * c;
            for (int b = 0; b < batch; ++b)
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        d[b * plane + static_cast<int64_t>(i) * c + j] +=
                            g[b * plane + static_cast<int64_t>(j) * r + i];
            break;
        }
        case OpKind::Reshape: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, n.in_shape);
            for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
            break;
        }
        case OpKind::RepeatRows: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, n.in_shape);
            const int v = n.in_shape.back();
            const int64_t outer = shape_numel(n.in_shape) / v;
            for (int64_t o = 0; o < outer; ++o)
                for (int rpt = 0; rpt < n.reps; ++rpt)
                    for (int j = 0; j < v; ++j) d[o * v + j] += g[(o * n.reps + rpt) * v + j];
            break;
        }
        case OpKind::Sum: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, n.in_shape);
            const double gv = g[0];
            for (int64_t i = 0; i < d.size(); ++i) d[i] += gv;
            break;
        }
        case OpKind::Mean: {
            if (n.in0 < 0) break;
            Tensor& d = grad_buf(n.in0, n.in_shape);
            const double gv = g[0] / static_cast<double>(shape_numel(n.in_shape));
            for (int64_t i = 0; i < d.size(); ++i) d[i] += gv;
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static AdamState init(std::span<Tensor* const> params, double lr) {
        AdamState s;
        s.lr = lr;
        for (Tensor* p : params) {
            s.m.push_back(Tensor::zeros(p->shape()));
            s.v.push_back(Tensor::zeros(p->shape()));
        }
        return s;
    }
};

// Standard bias-corrected update. A null gradient entry is treated as zero.
inline void adam_step(AdamState& state, std::span<Tensor* const> params,
                      std::span<const Tensor* const> grads) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ContractError("adam_step: parameter/gradient/state count mismatch");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        if (!m.same_shape(p))
            throw ShapeError("adam_step: state shape " + shape_str(m.shape()) +
                             " does not match parameter " + shape_str(p.shape()));
        const Tensor* g = grads[i];
        if (g && !g->same_shape(p))
            throw ShapeError("adam_step: gradient shape " + shape_str(g->shape()) +
                             " does not match parameter " + shape_str(p.shape()));
        for (int64_t k = 0; k < p.size(); ++k) {
            const double gk = g ? (*g)[k] : 0.0;
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p[k] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// loss_fn must construct the scalar loss on the active tape (watching the
// given parameters itself). Probes cycle through the parameter list and pick
// a random coordinate each; returns the max relative error
// |analytic - central_fd| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor* const> params,
                         int n_probes, double h, Rng& rng) {
    if (n_probes < 1) throw ContractError("grad_check: n_probes must be >= 1");
    if (h < 1e-6 || h > 1e-4)
        throw ContractError("grad_check: h must lie in [1e-6, 1e-4]");
    if (params.empty()) throw ContractError("grad_check: no parameters");

    Tape tape;
    std::vector<Tensor> analytic(params.size());
    {
        Tape::Scope scope(tape);
        Tensor loss = loss_fn();
        if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
        tape.backward(loss);
        for (size_t i = 0; i < params.size(); ++i) {
            const Tensor* g = tape.grad(*params[i]);
            analytic[i] = g ? g->clone() : Tensor::zeros(params[i]->shape());
        }
    }

    auto eval_plain = [&]() {
        Tensor loss = loss_fn();  // no active tape: pure forward
        return loss.item();
    };

    double max_err = 0.0;
    for (int probe = 0; probe < n_probes; ++probe) {
        const size_t pi = static_cast<size_t>(probe) % params.size();
        Tensor& p = *params[pi];
        const int64_t k = rng.uniform_int(static_cast<int>(p.size()));
        const double saved = p[k];
        p[k] = saved + h;
        const double lp = eval_plain();
        p[k] = saved - h;
        const double lm = eval_plain();
        p[k] = saved;
        if (!std::isfinite(lp) || !std::isfinite(lm))
            throw NumericError("grad_check: non-finite loss at parameter " + std::to_string(pi) +
                               " coordinate " + std::to_string(k));
        const double fd = (lp - lm) / (2.0 * h);
        const double a = analytic[pi][k];
        const double err = std::fabs(a - fd) / std::max(1.0, std::fabs(a));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace eastnet
