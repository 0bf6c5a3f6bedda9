#include "vla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "vla/optim.hpp"

namespace vla {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

// C[m×n] += A[m×k] · B[k×n]; k unrolled by 4 to keep the C row in registers
// longer. The accumulation order is fixed, so results are bit-reproducible.
void mm_nn(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<std::size_t>(i) * n;
        const double* ai = a + static_cast<std::size_t>(i) * k;
        int kk = 0;
        for (; kk + 4 <= k; kk += 4) {
            const double a0 = ai[kk], a1 = ai[kk + 1], a2 = ai[kk + 2], a3 = ai[kk + 3];
            const double* b0 = b + static_cast<std::size_t>(kk) * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (int j = 0; j < n; ++j)
                ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; kk < k; ++kk) {
            const double av = ai[kk];
            const double* bk = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// C[k×n] += A[m×k]^T · B[m×n]
void mm_tn(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* bi = b + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            if (av == 0.0) continue;
            double* ck = c + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ck[j] += av * bi[j];
        }
    }
}

constexpr double kGeluC1 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC2 = 0.044715;

// Thread-local recycling pool for tape buffers. Tapes allocate and free the
// same large activation/gradient blocks every step; reusing them keeps the
// allocator out of the timing picture and avoids page-fault churn.
constexpr std::size_t kPoolMinBytes = 1 << 12;        // only pool big buffers
constexpr std::size_t kPoolMaxBytes = 512u << 20;     // total retained cap
thread_local std::vector<std::vector<double>> g_buffer_pool;
thread_local std::size_t g_pool_bytes = 0;

std::vector<double> pool_take(std::size_t n) {
    for (std::size_t i = g_buffer_pool.size(); i-- > 0;) {
        if (g_buffer_pool[i].capacity() >= n && g_buffer_pool[i].capacity() <= 4 * n + 1024) {
            std::vector<double> v = std::move(g_buffer_pool[i]);
            g_buffer_pool.erase(g_buffer_pool.begin() + static_cast<std::ptrdiff_t>(i));
            g_pool_bytes -= v.capacity() * sizeof(double);
            v.assign(n, 0.0);
            return v;
        }
    }
    return std::vector<double>(n, 0.0);
}

void pool_give(std::vector<double>&& v) {
    std::size_t bytes = v.capacity() * sizeof(double);
    if (bytes < kPoolMinBytes || g_pool_bytes + bytes > kPoolMaxBytes) return;
    g_pool_bytes += bytes;
    v.clear();
    g_buffer_pool.push_back(std::move(v));
}

// Cephes-style double exp (~1 ulp): range reduction to |r| <= ln2/2, rational
// approximation, then an exact power-of-two scale. Deterministic and much
// cheaper than libm in the softmax/CE hot loops.
inline double exp_fast(double x) {
    if (x < -708.0) return 0.0;
    if (x > 709.0) return std::numeric_limits<double>::infinity();
    double pk = std::floor(1.4426950408889634 * x + 0.5);
    int n = static_cast<int>(pk);
    x -= pk * 6.93145751953125e-1;
    x -= pk * 1.42860682030941723212e-6;
    double xx = x * x;
    double p = x * (((1.26177193074810590878e-4 * xx) + 3.02994407707441961300e-2) * xx +
                    9.99999999999999999910e-1);
    double q = ((((3.00198505138664455042e-6 * xx) + 2.52448340349684104192e-3) * xx +
                 2.27265548208155028766e-1) * xx +
                2.0);
    double r = 1.0 + 2.0 * p / (q - p);
    if (n < -1021) {  // subnormal tail: fall back to two exact scales
        r *= std::ldexp(1.0, n + 512);
        return r * 0x1.0p-512;
    }
    std::uint64_t bits = static_cast<std::uint64_t>(n + 1023) << 52;
    double scale;
    std::memcpy(&scale, &bits, 8);
    return r * scale;
}

inline double tanh_fast(double x) {
    double a = std::abs(x);
    if (a > 20.0) return x > 0 ? 1.0 : -1.0;
    double e = exp_fast(-2.0 * a);
    double t = (1.0 - e) / (1.0 + e);
    return x >= 0 ? t : -t;
}

// Dot product with four independent accumulators; the fixed reassociation
// order keeps results bit-reproducible while letting the compiler vectorize.
inline double dot4(const double* a, const double* b, int n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((s0 + s1) + (s2 + s3)) + tail;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }

std::size_t Tensor::size() const { return tape_->val(id_).size(); }

const std::vector<double>& Tensor::value() const { return tape_->val(id_); }

bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

bool Tensor::has_grad() const {
    const auto& n = tape_->node(id_);
    return n.grad_live;
}

const std::vector<double>& Tensor::grad() const {
    const auto& n = tape_->node(id_);
    if (!n.grad_live) throw ContractError("tensor has no gradient (op " + std::string(n.op) + ")");
    return n.param ? n.param->grad : n.local_grad;
}

double Tensor::item() const {
    const auto& v = value();
    if (v.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return v[0];
}

// ---------------------------------------------------------------------------
// Tape internals
// ---------------------------------------------------------------------------

Tape::~Tape() {
    for (Node& n : nodes_) {
        pool_give(std::move(n.local_value));
        pool_give(std::move(n.local_grad));
        pool_give(std::move(n.saved));
    }
}

const std::vector<double>& Tape::val(int id) const {
    const Node& n = node(id);
    return n.param ? n.param->value : n.local_value;
}

std::vector<double>& Tape::val_mut(int id) {
    Node& n = node(id);
    return n.param ? n.param->value : n.local_value;
}

double* Tape::grad_buf(int id) {
    Node& n = node(id);
    std::vector<double>& g = n.param ? n.param->grad : n.local_grad;
    if (!n.grad_live) {
        if (n.param == nullptr) g = pool_take(val(id).size());
        n.grad_live = true;
    }
    return g.data();
}

bool Tape::wants_grad(std::initializer_list<Tensor> ins) const {
    if (!grad_enabled_) return false;
    for (const Tensor& t : ins)
        if (t.requires_grad()) return true;
    return false;
}

Tensor Tape::make(Shape shape, const char* op, std::vector<int> inputs, bool requires_grad) {
    Node n;
    n.shape = std::move(shape);
    n.op = op;
    n.inputs = std::move(inputs);
    n.requires_grad = requires_grad;
    n.local_value = pool_take(shape_numel(n.shape));
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::check_same_tape(Tensor t) const {
    if (t.tape_ != this) throw ContractError("tensor belongs to a different tape");
}

// ---------------------------------------------------------------------------
// Leaves
// ---------------------------------------------------------------------------

Tensor Tape::constant(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("constant: shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    Tensor t = make(std::move(shape), "const", {}, false);
    node(t.id_).local_value = std::move(data);
    return t;
}

Tensor Tape::zeros(Shape shape) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return constant(std::move(shape), std::move(d));
}

Tensor Tape::input(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("input: shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    Tensor t = make(std::move(shape), "input", {}, grad_enabled_);
    node(t.id_).local_value = std::move(data);
    return t;
}

Tensor Tape::leaf(Param& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return Tensor(this, it->second);
    if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
    Node n;
    n.shape = p.shape;
    n.op = "param";
    n.param = &p;
    n.requires_grad = grad_enabled_ && !p.frozen;
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    bound_.emplace(&p, id);
    return Tensor(this, id);
}

// ---------------------------------------------------------------------------
// Elementwise / linear
// ---------------------------------------------------------------------------

Tensor Tape::add(Tensor a, Tensor b) {
    check_same_tape(a);
    check_same_tape(b);
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = make(a.shape(), "add", {a.id_, b.id_}, wants_grad({a, b}));
    const auto& av = val(a.id_);
    const auto& bv = val(b.id_);
    auto& ov = val_mut(out.id_);
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (out.requires_grad()) {
        int ia = a.id_, ib = b.id_, io = out.id_;
        bool ga = a.requires_grad(), gb = b.requires_grad();
        node(out.id_).backprop = [this, ia, ib, io, ga, gb] {
            const double* g = grad_buf(io);
            std::size_t n = val(io).size();
            if (ga) {
                double* da = grad_buf(ia);
                for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
            }
            if (gb) {
                double* db = grad_buf(ib);
                for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
            }
        };
    }
    return out;
}

Tensor Tape::sub(Tensor a, Tensor b) {
    check_same_tape(a);
    check_same_tape(b);
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = make(a.shape(), "sub", {a.id_, b.id_}, wants_grad({a, b}));
    const auto& av = val(a.id_);
    const auto& bv = val(b.id_);
    auto& ov = val_mut(out.id_);
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (out.requires_grad()) {
        int ia = a.id_, ib = b.id_, io = out.id_;
        bool ga = a.requires_grad(), gb = b.requires_grad();
        node(out.id_).backprop = [this, ia, ib, io, ga, gb] {
            const double* g = grad_buf(io);
            std::size_t n = val(io).size();
            if (ga) {
                double* da = grad_buf(ia);
                for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
            }
            if (gb) {
                double* db = grad_buf(ib);
                for (std::size_t i = 0; i < n; ++i) db[i] -= g[i];
            }
        };
    }
    return out;
}

Tensor Tape::mul(Tensor a, Tensor b) {
    check_same_tape(a);
    check_same_tape(b);
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = make(a.shape(), "mul", {a.id_, b.id_}, wants_grad({a, b}));
    const auto& av = val(a.id_);
    const auto& bv = val(b.id_);
    auto& ov = val_mut(out.id_);
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
        int ia = a.id_, ib = b.id_, io = out.id_;
        bool ga = a.requires_grad(), gb = b.requires_grad();
        node(out.id_).backprop = [this, ia, ib, io, ga, gb] {
            const double* g = grad_buf(io);
            const auto& av2 = val(ia);
            const auto& bv2 = val(ib);
            std::size_t n = val(io).size();
            if (ga) {
                double* da = grad_buf(ia);
                for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bv2[i];
            }
            if (gb) {
                double* db = grad_buf(ib);
                for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * av2[i];
            }
        };
    }
    return out;
}

Tensor Tape::scale(Tensor a, double c) {
    check_same_tape(a);
    Tensor out = make(a.shape(), "scale", {a.id_}, wants_grad({a}));
    const auto& av = val(a.id_);
    auto& ov = val_mut(out.id_);
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    if (out.requires_grad()) {
        int ia = a.id_, io = out.id_;
        node(out.id_).backprop = [this, ia, io, c] {
            const double* g = grad_buf(io);
            double* da = grad_buf(ia);
            std::size_t n = val(io).size();
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * c;
        };
    }
    return out;
}

Tensor Tape::gelu(Tensor x) {
    check_same_tape(x);
    Tensor out = make(x.shape(), "gelu", {x.id_}, wants_grad({x}));
    const auto& xv = val(x.id_);
    auto& ov = val_mut(out.id_);
    bool save = wants_grad({x});
    if (save) node(out.id_).saved.resize(ov.size());
    for (std::size_t i = 0; i < ov.size(); ++i) {
        double v = xv[i];
        double u = kGeluC1 * (v + kGeluC2 * v * v * v);
        double t = tanh_fast(u);
        if (save) node(out.id_).saved[i] = t;
        ov[i] = 0.5 * v * (1.0 + t);
    }
    if (out.requires_grad()) {
        int ix = x.id_, io = out.id_;
        node(out.id_).backprop = [this, ix, io] {
            const double* g = grad_buf(io);
            const auto& xv2 = val(ix);
            const auto& tv = node(io).saved;
            double* dx = grad_buf(ix);
            for (std::size_t i = 0; i < xv2.size(); ++i) {
                double v = xv2[i];
                double t = tv[i];
                double du = kGeluC1 * (1.0 + 3.0 * kGeluC2 * v * v);
                dx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
            }
        };
    }
    return out;
}

Tensor Tape::matmul(Tensor a, Tensor b) {
    check_same_tape(a);
    check_same_tape(b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    int m = sa[0], k = sa[1], n = sb[1];
    Tensor out = make({m, n}, "matmul", {a.id_, b.id_}, wants_grad({a, b}));
    mm_nn(val_mut(out.id_).data(), val(a.id_).data(), val(b.id_).data(), m, k, n);
    if (out.requires_grad()) {
        int ia = a.id_, ib = b.id_, io = out.id_;
        bool ga = a.requires_grad(), gb = b.requires_grad();
        node(out.id_).backprop = [this, ia, ib, io, ga, gb, m, k, n] {
            const double* g = grad_buf(io);
            if (ga) {
                // dA += dC·B^T through a transposed copy so the kernel streams.
                const auto& bv = val(ib);
                std::vector<double> bt = pool_take(static_cast<std::size_t>(n) * k);
                for (int kk = 0; kk < k; ++kk)
                    for (int j = 0; j < n; ++j)
                        bt[static_cast<std::size_t>(j) * k + kk] = bv[static_cast<std::size_t>(kk) * n + j];
                mm_nn(grad_buf(ia), g, bt.data(), m, n, k);
                pool_give(std::move(bt));
            }
            if (gb) mm_tn(grad_buf(ib), val(ia).data(), g, m, k, n);  // dB += A^T·dC
        };
    }
    return out;
}

Tensor Tape::add_bias(Tensor x, Tensor b) {
    check_same_tape(x);
    check_same_tape(b);
    const Shape& sx = x.shape();
    const Shape& sb = b.shape();
    if (sx.size() != 2 || sb.size() != 1 || sb[0] != sx[1])
        throw ShapeError("add_bias: x " + shape_str(sx) + " vs bias " + shape_str(sb));
    int rows = sx[0], cols = sx[1];
    Tensor out = make(sx, "add_bias", {x.id_, b.id_}, wants_grad({x, b}));
    const auto& xv = val(x.id_);
    const auto& bv = val(b.id_);
    auto& ov = val_mut(out.id_);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            ov[static_cast<std::size_t>(r) * cols + c] = xv[static_cast<std::size_t>(r) * cols + c] + bv[c];
    if (out.requires_grad()) {
        int ix = x.id_, ib = b.id_, io = out.id_;
        bool gx = x.requires_grad(), gb = b.requires_grad();
        node(out.id_).backprop = [this, ix, ib, io, gx, gb, rows, cols] {
            const double* g = grad_buf(io);
            if (gx) {
                double* dx = grad_buf(ix);
                for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * cols; ++i) dx[i] += g[i];
            }
            if (gb) {
                double* db = grad_buf(ib);
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c) db[c] += g[static_cast<std::size_t>(r) * cols + c];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor Tape::reshape(Tensor x, Shape shape) {
    check_same_tape(x);
    if (shape_numel(shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor out = make(std::move(shape), "reshape", {x.id_}, wants_grad({x}));
    val_mut(out.id_) = val(x.id_);
    if (out.requires_grad()) {
        int ix = x.id_, io = out.id_;
        node(out.id_).backprop = [this, ix, io] {
            const double* g = grad_buf(io);
            double* dx = grad_buf(ix);
            std::size_t n = val(io).size();
            for (std::size_t i = 0; i < n; ++i) dx[i] += g[i];
        };
    }
    return out;
}

Tensor Tape::row_slice(Tensor x, int r0, int r1) {
    check_same_tape(x);
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("row_slice: scalar input");
    if (r0 < 0 || r1 > s[0] || r0 >= r1)
        throw ShapeError("row_slice: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") out of " + shape_str(s));
    std::size_t rowlen = shape_numel(s) / static_cast<std::size_t>(s[0]);
    Shape os = s;
    os[0] = r1 - r0;
    Tensor out = make(os, "row_slice", {x.id_}, wants_grad({x}));
    const auto& xv = val(x.id_);
    auto& ov = val_mut(out.id_);
    std::copy(xv.begin() + static_cast<std::ptrdiff_t>(r0 * rowlen),
              xv.begin() + static_cast<std::ptrdiff_t>(r1 * rowlen), ov.begin());
    if (out.requires_grad()) {
        int ix = x.id_, io = out.id_;
        node(out.id_).backprop = [this, ix, io, r0, rowlen] {
            const double* g = grad_buf(io);
            double* dx = grad_buf(ix);
            std::size_t n = val(io).size();
            for (std::size_t i = 0; i < n; ++i) dx[r0 * rowlen + i] += g[i];
        };
    }
    return out;
}

Tensor Tape::concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("concat_rows: empty input list");
    for (const Tensor& t : xs) check_same_tape(t);
    Shape tail = xs[0].shape();
    if (tail.empty()) throw ShapeError("concat_rows: scalar input");
    int total = 0;
    bool rg = false;
    for (const Tensor& t : xs) {
        const Shape& s = t.shape();
        if (s.size() != tail.size() || !std::equal(s.begin() + 1, s.end(), tail.begin() + 1))
            throw ShapeError("concat_rows: mismatched trailing dims " + shape_str(s) + " vs " +
                             shape_str(tail));
        total += s[0];
        rg = rg || t.requires_grad();
    }
    Shape os = tail;
    os[0] = total;
    std::vector<int> ids;
    ids.reserve(xs.size());
    for (const Tensor& t : xs) ids.push_back(t.id_);
    Tensor out = make(os, "concat_rows", ids, grad_enabled_ && rg);
    auto& ov = val_mut(out.id_);
    std::size_t off = 0;
    for (const Tensor& t : xs) {
        const auto& v = val(t.id_);
        std::copy(v.begin(), v.end(), ov.begin() + static_cast<std::ptrdiff_t>(off));
        off += v.size();
    }
    if (out.requires_grad()) {
        int io = out.id_;
        std::vector<int> in = node(out.id_).inputs;
        node(out.id_).backprop = [this, io, in] {
            const double* g = grad_buf(io);
            std::size_t off2 = 0;
            for (int id : in) {
                std::size_t n = val(id).size();
                if (node(id).requires_grad) {
                    double* d = grad_buf(id);
                    for (std::size_t i = 0; i < n; ++i) d[i] += g[off2 + i];
                }
                off2 += n;
            }
        };
    }
    return out;
}

Tensor Tape::gather_rows(Tensor table, std::vector<int> ids) {
    check_same_tape(table);
    const Shape& s = table.shape();
    if (s.size() != 2) throw ShapeError("gather_rows: table must be 2-D, got " + shape_str(s));
    int vocab = s[0], d = s[1];
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw ContractError("gather_rows: id " + std::to_string(id) + " out of [0," +
                                std::to_string(vocab) + ")");
    Tensor out = make({static_cast<int>(ids.size()), d}, "gather_rows", {table.id_}, wants_grad({table}));
    const auto& tv = val(table.id_);
    auto& ov = val_mut(out.id_);
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy(tv.begin() + static_cast<std::ptrdiff_t>(ids[r]) * d,
                  tv.begin() + static_cast<std::ptrdiff_t>(ids[r] + 1) * d,
                  ov.begin() + static_cast<std::ptrdiff_t>(r * d));
    if (out.requires_grad()) {
        int it = table.id_, io = out.id_;
        auto idx = std::move(ids);
        node(out.id_).backprop = [this, it, io, idx, d] {
            const double* g = grad_buf(io);
            double* dt = grad_buf(it);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (int c = 0; c < d; ++c)
                    dt[static_cast<std::size_t>(idx[r]) * d + c] += g[r * d + c];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization / attention
// ---------------------------------------------------------------------------

Tensor Tape::layer_norm(Tensor x, Tensor gamma, Tensor beta, double eps) {
    check_same_tape(x);
    check_same_tape(gamma);
    check_same_tape(beta);
    const Shape& sx = x.shape();
    if (sx.empty()) throw ShapeError("layer_norm: scalar input");
    int cols = sx.back();
    int rows = static_cast<int>(shape_numel(sx)) / cols;
    if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols})
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " vs feature dim " + std::to_string(cols));
    Tensor out = make(sx, "layer_norm", {x.id_, gamma.id_, beta.id_}, wants_grad({x, gamma, beta}));
    const auto& xv = val(x.id_);
    const auto& gv = val(gamma.id_);
    const auto& bv = val(beta.id_);
    auto& ov = val_mut(out.id_);
    for (int r = 0; r < rows; ++r) {
        const double* xr = xv.data() + static_cast<std::size_t>(r) * cols;
        double* orow = ov.data() + static_cast<std::size_t>(r) * cols;
        double mu = 0.0;
        for (int c = 0; c < cols; ++c) mu += xr[c];
        mu /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= cols;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < cols; ++c) orow[c] = gv[c] * (xr[c] - mu) * inv + bv[c];
    }
    if (out.requires_grad()) {
        int ix = x.id_, ig = gamma.id_, ib = beta.id_, io = out.id_;
        bool wx = x.requires_grad(), wg = gamma.requires_grad(), wb = beta.requires_grad();
        node(out.id_).backprop = [this, ix, ig, ib, io, wx, wg, wb, rows, cols, eps] {
            const double* g = grad_buf(io);
            const auto& xv2 = val(ix);
            const auto& gv2 = val(ig);
            double* dx = wx ? grad_buf(ix) : nullptr;
            double* dg = wg ? grad_buf(ig) : nullptr;
            double* db = wb ? grad_buf(ib) : nullptr;
            for (int r = 0; r < rows; ++r) {
                const double* xr = xv2.data() + static_cast<std::size_t>(r) * cols;
                const double* gr = g + static_cast<std::size_t>(r) * cols;
                double mu = 0.0;
                for (int c = 0; c < cols; ++c) mu += xr[c];
                mu /= cols;
                double var = 0.0;
                for (int c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
                var /= cols;
                double inv = 1.0 / std::sqrt(var + eps);
                if (dg || db) {
                    for (int c = 0; c < cols; ++c) {
                        if (dg) dg[c] += gr[c] * (xr[c] - mu) * inv;
                        if (db) db[c] += gr[c];
                    }
                }
                if (dx) {
                    // dL/dxhat = g*gamma; then the standard two-correction form.
                    double sum_dh = 0.0, sum_dh_xhat = 0.0;
                    for (int c = 0; c < cols; ++c) {
                        double dh = gr[c] * gv2[c];
                        double xh = (xr[c] - mu) * inv;
                        sum_dh += dh;
                        sum_dh_xhat += dh * xh;
                    }
                    for (int c = 0; c < cols; ++c) {
                        double dh = gr[c] * gv2[c];
                        double xh = (xr[c] - mu) * inv;
                        dx[static_cast<std::size_t>(r) * cols + c] +=
                            inv * (dh - sum_dh / cols - xh * sum_dh_xhat / cols);
                    }
                }
            }
        };
    }
    return out;
}

Tensor Tape::softmax(Tensor x) {
    check_same_tape(x);
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("softmax: scalar input");
    int cols = s.back();
    int rows = static_cast<int>(shape_numel(s)) / cols;
    Tensor out = make(s, "softmax", {x.id_}, wants_grad({x}));
    const auto& xv = val(x.id_);
    auto& ov = val_mut(out.id_);
    for (int r = 0; r < rows; ++r) {
        const double* xr = xv.data() + static_cast<std::size_t>(r) * cols;
        double* orow = ov.data() + static_cast<std::size_t>(r) * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < cols; ++c) mx = std::max(mx, xr[c]);
        if (!std::isfinite(mx)) throw ContractError("softmax: non-finite input");
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) {
            orow[c] = exp_fast(xr[c] - mx);
            sum += orow[c];
        }
        double inv = 1.0 / sum;
        for (int c = 0; c < cols; ++c) orow[c] *= inv;
    }
    if (out.requires_grad()) {
        int ix = x.id_, io = out.id_;
        node(out.id_).backprop = [this, ix, io, rows, cols] {
            const double* g = grad_buf(io);
            const auto& pv = val(io);
            double* dx = grad_buf(ix);
            for (int r = 0; r < rows; ++r) {
                const double* pr = pv.data() + static_cast<std::size_t>(r) * cols;
                const double* gr = g + static_cast<std::size_t>(r) * cols;
                double dot = dot4(gr, pr, cols);
                double* dr = dx + static_cast<std::size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) dr[c] += pr[c] * (gr[c] - dot);
            }
        };
    }
    return out;
}

Tensor Tape::masked_softmax(Tensor x, const Mask& mask, int batch, int heads, int tq, int tk,
                            bool per_element) {
    check_same_tape(x);
    const Shape& s = x.shape();
    std::size_t want_rows = static_cast<std::size_t>(batch) * heads * tq;
    if (s.size() != 2 || static_cast<std::size_t>(s[0]) != want_rows || s[1] != tk)
        throw ShapeError("masked_softmax: scores " + shape_str(s) + " vs expected [" +
                         std::to_string(want_rows) + "x" + std::to_string(tk) + "]");
    std::size_t want_mask = static_cast<std::size_t>(per_element ? batch : 1) * tq * tk;
    if (mask.size() != want_mask)
        throw ShapeError("masked_softmax: mask length " + std::to_string(mask.size()) +
                         " vs expected " + std::to_string(want_mask));
    for (int b = 0; b < (per_element ? batch : 1); ++b)
        for (int i = 0; i < tq; ++i) {
            const std::uint8_t* mr = mask.data() + (static_cast<std::size_t>(b) * tq + i) * tk;
            bool any = false;
            for (int j = 0; j < tk; ++j) any = any || mr[j];
            if (!any)
                throw ContractError("masked_softmax: fully masked attention row " + std::to_string(i));
        }
    Tensor out = make(s, "masked_softmax", {x.id_}, wants_grad({x}));
    const auto& xv = val(x.id_);
    auto& ov = val_mut(out.id_);
    for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < tq; ++i) {
                std::size_t row = (static_cast<std::size_t>(b) * heads + h) * tq + i;
                const double* xr = xv.data() + row * tk;
                double* orow = ov.data() + row * tk;
                const std::uint8_t* mr =
                    mask.data() + ((per_element ? static_cast<std::size_t>(b) * tq : 0) + i) * tk;
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < tk; ++j)
                    if (mr[j]) mx = std::max(mx, xr[j]);
                double sum = 0.0;
                for (int j = 0; j < tk; ++j) {
                    orow[j] = mr[j] ? exp_fast(xr[j] - mx) : 0.0;
                    sum += orow[j];
                }
                double inv = 1.0 / sum;
                for (int j = 0; j < tk; ++j) orow[j] *= inv;
            }
    if (out.requires_grad()) {
        int ix = x.id_, io = out.id_;
        node(out.id_).backprop = [this, ix, io, batch, heads, tq, tk] {
            const double* g = grad_buf(io);
            const auto& pv = val(io);
            double* dx = grad_buf(ix);
            std::size_t rows = static_cast<std::size_t>(batch) * heads * tq;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* pr = pv.data() + r * tk;
                const double* gr = g + r * tk;
                double dot = dot4(gr, pr, tk);
                double* dr = dx + r * tk;
                for (int j = 0; j < tk; ++j) dr[j] += pr[j] * (gr[j] - dot);  // zero where masked
            }
        };
    }
    return out;
}

Tensor Tape::attn_scores(Tensor q, Tensor k, int batch, int heads, int tq, int tk, double scale,
                         const Mask* mask, bool per_element) {
    check_same_tape(q);
    check_same_tape(k);
    const Shape& sq = q.shape();
    const Shape& sk = k.shape();
    if (sq.size() != 2 || sk.size() != 2 || sq[1] != sk[1])
        throw ShapeError("attn_scores: q " + shape_str(sq) + " vs k " + shape_str(sk));
    int d = sq[1];
    if (d % heads != 0) throw ShapeError("attn_scores: dim " + std::to_string(d) + " not divisible by heads");
    if (sq[0] != batch * tq || sk[0] != batch * tk)
        throw ShapeError("attn_scores: rows " + shape_str(sq) + "/" + shape_str(sk) +
                         " vs batch*tq/batch*tk");
    if (mask != nullptr &&
        mask->size() != static_cast<std::size_t>(per_element ? batch : 1) * tq * tk)
        throw ShapeError("attn_scores: mask length mismatch");
    int hd = d / heads;
    Tensor out = make({batch * heads * tq, tk}, "attn_scores", {q.id_, k.id_}, wants_grad({q, k}));
    const auto& qv = val(q.id_);
    const auto& kv = val(k.id_);
    auto& ov = val_mut(out.id_);
    for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < tq; ++i) {
                const double* qi = qv.data() + (static_cast<std::size_t>(b) * tq + i) * d + h * hd;
                double* orow = ov.data() + ((static_cast<std::size_t>(b) * heads + h) * tq + i) * tk;
                const std::uint8_t* mr =
                    mask == nullptr
                        ? nullptr
                        : mask->data() +
                              ((per_element ? static_cast<std::size_t>(b) * tq : 0) + i) * tk;
                for (int j = 0; j < tk; ++j) {
                    if (mr != nullptr && !mr[j]) continue;  // stays zero, never read
                    const double* kj = kv.data() + (static_cast<std::size_t>(b) * tk + j) * d + h * hd;
                    orow[j] = dot4(qi, kj, hd) * scale;
                }
            }
    if (out.requires_grad()) {
        int iq = q.id_, ik = k.id_, io = out.id_;
        bool wq = q.requires_grad(), wk = k.requires_grad();
        node(out.id_).backprop = [this, iq, ik, io, wq, wk, batch, heads, tq, tk, d, hd, scale] {
            const double* g = grad_buf(io);
            const auto& qv2 = val(iq);
            const auto& kv2 = val(ik);
            double* dq = wq ? grad_buf(iq) : nullptr;
            double* dk = wk ? grad_buf(ik) : nullptr;
            for (int b = 0; b < batch; ++b)
                for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < tq; ++i) {
                        const double* gr =
                            g + ((static_cast<std::size_t>(b) * heads + h) * tq + i) * tk;
                        std::size_t qoff = (static_cast<std::size_t>(b) * tq + i) * d + h * hd;
                        for (int j = 0; j < tk; ++j) {
                            double c = gr[j] * scale;
                            if (c == 0.0) continue;
                            std::size_t koff = (static_cast<std::size_t>(b) * tk + j) * d + h * hd;
                            if (dq)
                                for (int cdim = 0; cdim < hd; ++cdim)
                                    dq[qoff + cdim] += c * kv2[koff + cdim];
                            if (dk)
                                for (int cdim = 0; cdim < hd; ++cdim)
                                    dk[koff + cdim] += c * qv2[qoff + cdim];
                        }
                    }
        };
    }
    return out;
}

Tensor Tape::attn_apply(Tensor p, Tensor v, int batch, int heads, int tq, int tk) {
    check_same_tape(p);
    check_same_tape(v);
    const Shape& sp = p.shape();
    const Shape& sv = v.shape();
    if (sp.size() != 2 || sp[0] != batch * heads * tq || sp[1] != tk)
        throw ShapeError("attn_apply: weights " + shape_str(sp));
    if (sv.size() != 2 || sv[0] != batch * tk || sv[1] % heads != 0)
        throw ShapeError("attn_apply: values " + shape_str(sv));
    int d = sv[1];
    int hd = d / heads;
    Tensor out = make({batch * tq, d}, "attn_apply", {p.id_, v.id_}, wants_grad({p, v}));
    const auto& pv = val(p.id_);
    const auto& vv = val(v.id_);
    auto& ov = val_mut(out.id_);
    for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < tq; ++i) {
                const double* pr = pv.data() + ((static_cast<std::size_t>(b) * heads + h) * tq + i) * tk;
                double* orow = ov.data() + (static_cast<std::size_t>(b) * tq + i) * d + h * hd;
                for (int j = 0; j < tk; ++j) {
                    double w = pr[j];
                    if (w == 0.0) continue;
                    const double* vr = vv.data() + (static_cast<std::size_t>(b) * tk + j) * d + h * hd;
                    for (int c = 0; c < hd; ++c) orow[c] += w * vr[c];
                }
            }
    if (out.requires_grad()) {
        int ip = p.id_, iv = v.id_, io = out.id_;
        bool wp = p.requires_grad(), wv = v.requires_grad();
        node(out.id_).backprop = [this, ip, iv, io, wp, wv, batch, heads, tq, tk, d, hd] {
            const double* g = grad_buf(io);
            const auto& pv2 = val(ip);
            const auto& vv2 = val(iv);
            double* dp = wp ? grad_buf(ip) : nullptr;
            double* dv = wv ? grad_buf(iv) : nullptr;
            for (int b = 0; b < batch; ++b)
                for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < tq; ++i) {
                        const double* go = g + (static_cast<std::size_t>(b) * tq + i) * d + h * hd;
                        std::size_t prow = ((static_cast<std::size_t>(b) * heads + h) * tq + i) * tk;
                        for (int j = 0; j < tk; ++j) {
                            std::size_t voff = (static_cast<std::size_t>(b) * tk + j) * d + h * hd;
                            if (dp) dp[prow + j] += dot4(go, vv2.data() + voff, hd);
                            if (dv) {
                                double w = pv2[prow + j];
                                if (w != 0.0)
                                    for (int c = 0; c < hd; ++c) dv[voff + c] += w * go[c];
                            }
                        }
                    }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

Tensor Tape::sum_all(Tensor x) {
    check_same_tape(x);
    Tensor out = make({1}, "sum_all", {x.id_}, wants_grad({x}));
    const auto& xv = val(x.id_);
    double acc = 0.0;
    for (double v : xv) acc += v;
    val_mut(out.id_)[0] = acc;
    if (out.requires_grad()) {
        int ix = x.id_, io = out.id_;
        node(out.id_).backprop = [this, ix, io] {
            double g = grad_buf(io)[0];
            double* dx = grad_buf(ix);
            std::size_t n = val(ix).size();
            for (std::size_t i = 0; i < n; ++i) dx[i] += g;
        };
    }
    return out;
}

Tensor Tape::mean_all(Tensor x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

Tensor Tape::mse_loss(Tensor pred, Tensor target) {
    check_same_tape(pred);
    check_same_tape(target);
    if (pred.shape() != target.shape())
        throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    Tensor out = make({1}, "mse_loss", {pred.id_, target.id_}, wants_grad({pred, target}));
    const auto& pv = val(pred.id_);
    const auto& tv = val(target.id_);
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        double d = pv[i] - tv[i];
        acc += d * d;
    }
    val_mut(out.id_)[0] = acc / static_cast<double>(pv.size());
    if (out.requires_grad()) {
        int ip = pred.id_, it = target.id_, io = out.id_;
        bool wp = pred.requires_grad(), wt = target.requires_grad();
        node(out.id_).backprop = [this, ip, it, io, wp, wt] {
            double g = grad_buf(io)[0];
            const auto& pv2 = val(ip);
            const auto& tv2 = val(it);
            double c = 2.0 * g / static_cast<double>(pv2.size());
            if (wp) {
                double* dp = grad_buf(ip);
                for (std::size_t i = 0; i < pv2.size(); ++i) dp[i] += c * (pv2[i] - tv2[i]);
            }
            if (wt) {
                double* dt = grad_buf(it);
                for (std::size_t i = 0; i < pv2.size(); ++i) dt[i] -= c * (pv2[i] - tv2[i]);
            }
        };
    }
    return out;
}

Tensor Tape::cross_entropy(Tensor logits, const std::vector<int>& targets,
                           const std::vector<double>& weights) {
    check_same_tape(logits);
    const Shape& s = logits.shape();
    if (s.size() != 2) throw ShapeError("cross_entropy: logits must be 2-D, got " + shape_str(s));
    int rows = s[0], vocab = s[1];
    if (static_cast<int>(targets.size()) != rows)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
    if (!weights.empty() && static_cast<int>(weights.size()) != rows)
        throw ShapeError("cross_entropy: weight count mismatch");
    for (int t : targets)
        if (t < 0 || t >= vocab)
            throw ContractError("cross_entropy: target id " + std::to_string(t) + " out of [0," +
                                std::to_string(vocab) + ")");
    double wsum = 0.0;
    if (weights.empty())
        wsum = static_cast<double>(rows);
    else
        for (double w : weights) wsum += w;
    if (wsum <= 0.0) throw ContractError("cross_entropy: no weighted positions");
    Tensor out = make({1}, "cross_entropy", {logits.id_}, wants_grad({logits}));
    const auto& lv = val(logits.id_);
    double acc = 0.0;
    for (int r = 0; r < rows; ++r) {
        double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(r)];
        if (w == 0.0) continue;
        const double* lr = lv.data() + static_cast<std::size_t>(r) * vocab;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < vocab; ++c) mx = std::max(mx, lr[c]);
        double sum = 0.0;
        for (int c = 0; c < vocab; ++c) sum += exp_fast(lr[c] - mx);
        acc += w * (std::log(sum) + mx - lr[targets[static_cast<std::size_t>(r)]]);
    }
    val_mut(out.id_)[0] = acc / wsum;
    if (out.requires_grad()) {
        int il = logits.id_, io = out.id_;
        auto tgt = targets;
        auto wts = weights;
        node(out.id_).backprop = [this, il, io, tgt, wts, rows, vocab, wsum] {
            double g = grad_buf(io)[0];
            const auto& lv2 = val(il);
            double* dl = grad_buf(il);
            for (int r = 0; r < rows; ++r) {
                double w = wts.empty() ? 1.0 : wts[static_cast<std::size_t>(r)];
                if (w == 0.0) continue;
                const double* lr = lv2.data() + static_cast<std::size_t>(r) * vocab;
                double mx = -std::numeric_limits<double>::infinity();
                for (int c = 0; c < vocab; ++c) mx = std::max(mx, lr[c]);
                double sum = 0.0;
                for (int c = 0; c < vocab; ++c) sum += exp_fast(lr[c] - mx);
                double* dr = dl + static_cast<std::size_t>(r) * vocab;
                double cw = g * w / wsum;
                for (int c = 0; c < vocab; ++c) dr[c] += cw * (exp_fast(lr[c] - mx) / sum);
                dr[tgt[static_cast<std::size_t>(r)]] -= cw;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void Tape::backward(Tensor loss) {
    check_same_tape(loss);
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!grad_enabled_) throw ContractError("backward: tape was created with gradients disabled");
    grad_buf(loss.id_)[0] += 1.0;
    for (int id = loss.id_; id >= 0; --id) {
        Node& n = node(id);
        if (!n.grad_live || !n.requires_grad) continue;
        if (n.backprop) n.backprop();
        if (n.param != nullptr) n.param->grad_valid = true;
    }
}

}  // namespace vla
