#include "dip/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace dip {

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int e : s) {
        if (e < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape))
        throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
}

Tensor Tensor::full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::randn(Shape s, Rng& rng, double stddev) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.normal() * stddev;
    return t;
}

int Tensor::rows() const {
    if (shape.size() != 2) throw std::invalid_argument("rows(): tensor is not rank-2, shape " + shape_str(shape));
    return shape[0];
}

int Tensor::cols() const {
    if (shape.size() != 2) throw std::invalid_argument("cols(): tensor is not rank-2, shape " + shape_str(shape));
    return shape[1];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

bool Tensor::finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

const Shape& Var::shape() const { return tape->shape(*this); }
const std::vector<double>& Var::data() const { return tape->data(*this); }

// ---------------------------------------------------------------------------
// raw kernels
//
// All three keep the k-accumulation ascending with a single accumulator per
// output element, so results match a naive triple loop bit-for-bit.
// ---------------------------------------------------------------------------

void mm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, 0.0);
        const double* arow = a + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void mm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    // c[m,n] (+)= a[m,k] @ b[n,k]^T, via explicit transpose to reuse the fast kernel
    std::vector<double> bt(static_cast<std::size_t>(k) * n);
    for (int j = 0; j < n; ++j)
        for (int kk = 0; kk < k; ++kk) bt[static_cast<std::size_t>(kk) * n + j] = b[static_cast<std::size_t>(j) * k + kk];
    mm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void mm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    // c[m,n] (+)= a[k,m]^T @ b[k,n]
    std::vector<double> at(static_cast<std::size_t>(m) * k);
    for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < m; ++i) at[static_cast<std::size_t>(i) * k + kk] = a[static_cast<std::size_t>(kk) * m + i];
    mm_nn(at.data(), b, c, m, k, n, accumulate);
}

// ---------------------------------------------------------------------------
// tape
// ---------------------------------------------------------------------------

void Tape::screen(const std::vector<double>& v, const char* op_name) const {
    if (!checked_) return;
    for (double x : v)
        if (!std::isfinite(x))
            throw std::runtime_error(std::string("non-finite value at op boundary: ") + op_name);
}

int Tape::push(Shape shape, std::vector<double> value, bool requires_grad,
               std::function<void(Tape&, int)> fn, const char* op_name) {
    screen(value, op_name);
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    n.backward_fn = n.requires_grad ? std::move(fn) : nullptr;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

Var Tape::leaf(Tensor& param) {
    int id = push(param.shape, param.data, param.requires_grad, nullptr, "leaf");
    nodes_[id].bound = &param;
    return {this, id};
}

Var Tape::constant(const Tensor& t) {
    return {this, push(t.shape, t.data, false, nullptr, "constant")};
}

Var Tape::constant(Shape s, std::vector<double> d) {
    if (d.size() != numel(s))
        throw std::invalid_argument("constant: data length does not match shape " + shape_str(s));
    return {this, push(std::move(s), std::move(d), false, nullptr, "constant")};
}

const Shape& Tape::shape(Var v) const { return nodes_[v.id].shape; }
const std::vector<double>& Tape::data(Var v) const { return nodes_[v.id].value; }
const std::vector<double>& Tape::grad_of(Var v) const { return nodes_[v.id].grad; }
Tensor Tape::value(Var v) const { return Tensor(nodes_[v.id].shape, nodes_[v.id].value); }

static void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Var Tape::add(Var a, Var b) {
    const Node& na = node(a.id);
    const Node& nb = node(b.id);
    check_same_shape(na.shape, nb.shape, "add");
    std::vector<double> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] + nb.value[i];
    bool rg = na.requires_grad || nb.requires_grad;
    int ai = a.id, bi = b.id;
    return {this, push(na.shape, std::move(out), rg,
                       [ai, bi](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           if (t.node(ai).requires_grad) {
                               auto& ga = t.grad_buf(ai);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (t.node(bi).requires_grad) {
                               auto& gb = t.grad_buf(bi);
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                           }
                       },
                       "add")};
}

Var Tape::sub(Var a, Var b) {
    const Node& na = node(a.id);
    const Node& nb = node(b.id);
    check_same_shape(na.shape, nb.shape, "sub");
    std::vector<double> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] - nb.value[i];
    bool rg = na.requires_grad || nb.requires_grad;
    int ai = a.id, bi = b.id;
    return {this, push(na.shape, std::move(out), rg,
                       [ai, bi](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           if (t.node(ai).requires_grad) {
                               auto& ga = t.grad_buf(ai);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (t.node(bi).requires_grad) {
                               auto& gb = t.grad_buf(bi);
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                       },
                       "sub")};
}

Var Tape::mul(Var a, Var b) {
    const Node& na = node(a.id);
    const Node& nb = node(b.id);
    check_same_shape(na.shape, nb.shape, "mul");
    std::vector<double> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] * nb.value[i];
    bool rg = na.requires_grad || nb.requires_grad;
    int ai = a.id, bi = b.id;
    return {this, push(na.shape, std::move(out), rg,
                       [ai, bi](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           const auto& va = t.node(ai).value;
                           const auto& vb = t.node(bi).value;
                           if (t.node(ai).requires_grad) {
                               auto& ga = t.grad_buf(ai);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
                           }
                           if (t.node(bi).requires_grad) {
                               auto& gb = t.grad_buf(bi);
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
                           }
                       },
                       "mul")};
}

Var Tape::scale(Var a, double c) {
    const Node& na = node(a.id);
    std::vector<double> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * na.value[i];
    int ai = a.id;
    return {this, push(na.shape, std::move(out), na.requires_grad,
                       [ai, c](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           auto& ga = t.grad_buf(ai);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                       },
                       "scale")};
}

Var Tape::add_rowvec(Var x, Var b) {
    const Node& nx = node(x.id);
    const Node& nb = node(b.id);
    if (nx.shape.size() != 2)
        throw std::invalid_argument("add_rowvec: x must be rank-2, got " + shape_str(nx.shape));
    const int r = nx.shape[0], d = nx.shape[1];
    if (numel(nb.shape) != static_cast<std::size_t>(d))
        throw std::invalid_argument("add_rowvec: vector " + shape_str(nb.shape) + " vs row width " +
                                    std::to_string(d));
    std::vector<double> out(nx.value.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < d; ++j) out[i * d + j] = nx.value[i * d + j] + nb.value[j];
    bool rg = nx.requires_grad || nb.requires_grad;
    int xi = x.id, bi = b.id;
    return {this, push(nx.shape, std::move(out), rg,
                       [xi, bi, r, d](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           if (t.node(xi).requires_grad) {
                               auto& gx = t.grad_buf(xi);
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           }
                           if (t.node(bi).requires_grad) {
                               auto& gb = t.grad_buf(bi);
                               for (int i = 0; i < r; ++i)
                                   for (int j = 0; j < d; ++j) gb[j] += g[i * d + j];
                           }
                       },
                       "add_rowvec")};
}

Var Tape::gelu(Var a) {
    const Node& na = node(a.id);
    std::vector<double> out(na.value.size());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = na.value[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    int ai = a.id;
    return {this, push(na.shape, std::move(out), na.requires_grad,
                       [ai](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           const auto& v = t.node(ai).value;
                           auto& ga = t.grad_buf(ai);
                           constexpr double is2 = 0.7071067811865475244;
                           constexpr double inv_sqrt2pi = 0.3989422804014326779;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               double x = v[i];
                               double cdf = 0.5 * (1.0 + std::erf(x * is2));
                               double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                               ga[i] += g[i] * (cdf + x * pdf);
                           }
                       },
                       "gelu")};
}

Var Tape::reshape(Var a, Shape s) {
    const Node& na = node(a.id);
    if (numel(s) != na.value.size())
        throw std::invalid_argument("reshape: " + shape_str(na.shape) + " -> " + shape_str(s) +
                                    " changes element count");
    int ai = a.id;
    return {this, push(std::move(s), na.value, na.requires_grad,
                       [ai](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           auto& ga = t.grad_buf(ai);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       },
                       "reshape")};
}

Var Tape::concat_rows(Var a, Var b) {
    const Node& na = node(a.id);
    const Node& nb = node(b.id);
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[1])
        throw std::invalid_argument("concat_rows: trailing dims differ, " + shape_str(na.shape) +
                                    " vs " + shape_str(nb.shape));
    const int ra = na.shape[0], rb = nb.shape[0], d = na.shape[1];
    std::vector<double> out;
    out.reserve(na.value.size() + nb.value.size());
    out.insert(out.end(), na.value.begin(), na.value.end());
    out.insert(out.end(), nb.value.begin(), nb.value.end());
    bool rg = na.requires_grad || nb.requires_grad;
    int ai = a.id, bi = b.id;
    std::size_t na_len = na.value.size();
    return {this, push({ra + rb, d}, std::move(out), rg,
                       [ai, bi, na_len](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           if (t.node(ai).requires_grad) {
                               auto& ga = t.grad_buf(ai);
                               for (std::size_t i = 0; i < na_len; ++i) ga[i] += g[i];
                           }
                           if (t.node(bi).requires_grad) {
                               auto& gb = t.grad_buf(bi);
                               for (std::size_t i = na_len; i < g.size(); ++i) gb[i - na_len] += g[i];
                           }
                       },
                       "concat_rows")};
}

Var Tape::concat_cols(Var a, Var b) {
    const Node& na = node(a.id);
    const Node& nb = node(b.id);
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[0] != nb.shape[0])
        throw std::invalid_argument("concat_cols: row counts differ, " + shape_str(na.shape) + " vs " +
                                    shape_str(nb.shape));
    const int r = na.shape[0], da = na.shape[1], db = nb.shape[1];
    std::vector<double> out(static_cast<std::size_t>(r) * (da + db));
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < da; ++j) out[i * (da + db) + j] = na.value[i * da + j];
        for (int j = 0; j < db; ++j) out[i * (da + db) + da + j] = nb.value[i * db + j];
    }
    bool rg = na.requires_grad || nb.requires_grad;
    int ai = a.id, bi = b.id;
    return {this, push({r, da + db}, std::move(out), rg,
                       [ai, bi, r, da, db](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           if (t.node(ai).requires_grad) {
                               auto& ga = t.grad_buf(ai);
                               for (int i = 0; i < r; ++i)
                                   for (int j = 0; j < da; ++j) ga[i * da + j] += g[i * (da + db) + j];
                           }
                           if (t.node(bi).requires_grad) {
                               auto& gb = t.grad_buf(bi);
                               for (int i = 0; i < r; ++i)
                                   for (int j = 0; j < db; ++j) gb[i * db + j] += g[i * (da + db) + da + j];
                           }
                       },
                       "concat_cols")};
}

Var Tape::slice_cols(Var a, int c0, int c1) {
    const Node& na = node(a.id);
    if (na.shape.size() != 2 || c0 < 0 || c1 > na.shape[1] || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") for " + shape_str(na.shape));
    const int r = na.shape[0], d = na.shape[1], w = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(r) * w);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j) out[i * w + j] = na.value[i * d + c0 + j];
    int ai = a.id;
    return {this, push({r, w}, std::move(out), na.requires_grad,
                       [ai, r, d, w, c0](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           auto& ga = t.grad_buf(ai);
                           for (int i = 0; i < r; ++i)
                               for (int j = 0; j < w; ++j) ga[i * d + c0 + j] += g[i * w + j];
                       },
                       "slice_cols")};
}

Var Tape::sum_all(Var a) {
    const Node& na = node(a.id);
    double s = 0.0;
    for (double v : na.value) s += v;
    int ai = a.id;
    return {this, push({1}, {s}, na.requires_grad,
                       [ai](Tape& t, int self) {
                           double g = t.node(self).grad[0];
                           auto& ga = t.grad_buf(ai);
                           for (auto& v : ga) v += g;
                       },
                       "sum_all")};
}

Var Tape::mean_rows(Var a) {
    const Node& na = node(a.id);
    if (na.shape.size() != 2 || na.shape[0] == 0)
        throw std::invalid_argument("mean_rows: needs rank-2 with rows > 0, got " + shape_str(na.shape));
    const int r = na.shape[0], d = na.shape[1];
    std::vector<double> out(d, 0.0);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < d; ++j) out[j] += na.value[i * d + j];
    const double inv = 1.0 / r;
    for (auto& v : out) v *= inv;
    int ai = a.id;
    return {this, push({1, d}, std::move(out), na.requires_grad,
                       [ai, r, d, inv](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           auto& ga = t.grad_buf(ai);
                           for (int i = 0; i < r; ++i)
                               for (int j = 0; j < d; ++j) ga[i * d + j] += g[j] * inv;
                       },
                       "mean_rows")};
}

Var Tape::matmul(Var a, Var b) {
    const Node& na = node(a.id);
    const Node& nb = node(b.id);
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0])
        throw std::invalid_argument("matmul: " + shape_str(na.shape) + " x " + shape_str(nb.shape));
    const int m = na.shape[0], k = na.shape[1], n = nb.shape[1];
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    mm_nn(na.value.data(), nb.value.data(), out.data(), m, k, n, false);
    bool rg = na.requires_grad || nb.requires_grad;
    int ai = a.id, bi = b.id;
    return {this, push({m, n}, std::move(out), rg,
                       [ai, bi, m, k, n](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           const auto& va = t.node(ai).value;
                           const auto& vb = t.node(bi).value;
                           if (t.node(ai).requires_grad)  // dA = dC @ B^T
                               mm_nt(g.data(), vb.data(), t.grad_buf(ai).data(), m, n, k, true);
                           if (t.node(bi).requires_grad)  // dB = A^T @ dC
                               mm_tn(va.data(), g.data(), t.grad_buf(bi).data(), k, m, n, true);
                       },
                       "matmul")};
}

Var Tape::matmul_nt(Var a, Var b) {
    const Node& na = node(a.id);
    const Node& nb = node(b.id);
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[1])
        throw std::invalid_argument("matmul_nt: " + shape_str(na.shape) + " x " + shape_str(nb.shape) +
                                    "^T");
    const int m = na.shape[0], k = na.shape[1], n = nb.shape[0];
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    mm_nt(na.value.data(), nb.value.data(), out.data(), m, k, n, false);
    bool rg = na.requires_grad || nb.requires_grad;
    int ai = a.id, bi = b.id;
    return {this, push({m, n}, std::move(out), rg,
                       [ai, bi, m, k, n](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           const auto& va = t.node(ai).value;
                           const auto& vb = t.node(bi).value;
                           if (t.node(ai).requires_grad)  // dA = dC @ B
                               mm_nn(g.data(), vb.data(), t.grad_buf(ai).data(), m, n, k, true);
                           if (t.node(bi).requires_grad)  // dB = dC^T @ A
                               mm_tn(g.data(), va.data(), t.grad_buf(bi).data(), n, m, k, true);
                       },
                       "matmul_nt")};
}

Var Tape::softmax_rows(Var a) {
    const Node& na = node(a.id);
    if (na.shape.size() != 2)
        throw std::invalid_argument("softmax_rows: needs rank-2, got " + shape_str(na.shape));
    const int r = na.shape[0], c = na.shape[1];
    std::vector<double> out(na.value.size());
    for (int i = 0; i < r; ++i) {
        const double* row = na.value.data() + static_cast<std::size_t>(i) * c;
        double* orow = out.data() + static_cast<std::size_t>(i) * c;
        double mx = -HUGE_VAL;
        for (int j = 0; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            s += orow[j];
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < c; ++j) orow[j] *= inv;
    }
    int ai = a.id;
    return {this, push(na.shape, std::move(out), na.requires_grad,
                       [ai, r, c](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           const auto& y = t.node(self).value;
                           auto& ga = t.grad_buf(ai);
                           for (int i = 0; i < r; ++i) {
                               double dot = 0.0;
                               for (int j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                               for (int j = 0; j < c; ++j)
                                   ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                           }
                       },
                       "softmax_rows")};
}

Var Tape::log_softmax_rows(Var a) {
    const Node& na = node(a.id);
    if (na.shape.size() != 2)
        throw std::invalid_argument("log_softmax_rows: needs rank-2, got " + shape_str(na.shape));
    const int r = na.shape[0], c = na.shape[1];
    std::vector<double> out(na.value.size());
    for (int i = 0; i < r; ++i) {
        const double* row = na.value.data() + static_cast<std::size_t>(i) * c;
        double* orow = out.data() + static_cast<std::size_t>(i) * c;
        double mx = -HUGE_VAL;
        for (int j = 0; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < c; ++j) orow[j] = row[j] - lse;
    }
    int ai = a.id;
    return {this, push(na.shape, std::move(out), na.requires_grad,
                       [ai, r, c](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           const auto& y = t.node(self).value;  // log-probs
                           auto& ga = t.grad_buf(ai);
                           for (int i = 0; i < r; ++i) {
                               double gsum = 0.0;
                               for (int j = 0; j < c; ++j) gsum += g[i * c + j];
                               for (int j = 0; j < c; ++j)
                                   ga[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gsum;
                           }
                       },
                       "log_softmax_rows")};
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
    const Node& nx = node(x.id);
    const Node& ng = node(gain.id);
    const Node& nb = node(bias.id);
    if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be > 0");
    if (nx.shape.empty()) throw std::invalid_argument("layer_norm: scalar input");
    const int d = nx.shape.back();
    if (numel(ng.shape) != static_cast<std::size_t>(d) || numel(nb.shape) != static_cast<std::size_t>(d))
        throw std::invalid_argument("layer_norm: gain/bias length must equal last extent " +
                                    std::to_string(d));
    const int r = static_cast<int>(nx.value.size()) / std::max(d, 1);
    std::vector<double> out(nx.value.size());
    std::vector<double> xhat(nx.value.size());
    std::vector<double> inv_std(r);
    for (int i = 0; i < r; ++i) {
        const double* row = nx.value.data() + static_cast<std::size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < d; ++j) {
            double xh = (row[j] - mu) * is;
            xhat[i * d + j] = xh;
            out[i * d + j] = ng.value[j] * xh + nb.value[j];
        }
    }
    bool rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
    int xi = x.id, gi = gain.id, bi = bias.id;
    return {this, push(nx.shape, std::move(out), rg,
                       [xi, gi, bi, r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           const auto& gv = t.node(gi).value;
                           if (t.node(gi).requires_grad) {
                               auto& gg = t.grad_buf(gi);
                               for (int i = 0; i < r; ++i)
                                   for (int j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                           }
                           if (t.node(bi).requires_grad) {
                               auto& gb = t.grad_buf(bi);
                               for (int i = 0; i < r; ++i)
                                   for (int j = 0; j < d; ++j) gb[j] += g[i * d + j];
                           }
                           if (t.node(xi).requires_grad) {
                               auto& gx = t.grad_buf(xi);
                               for (int i = 0; i < r; ++i) {
                                   double m1 = 0.0, m2 = 0.0;  // mean(gy*gain), mean(gy*gain*xhat)
                                   for (int j = 0; j < d; ++j) {
                                       double gy = g[i * d + j] * gv[j];
                                       m1 += gy;
                                       m2 += gy * xhat[i * d + j];
                                   }
                                   m1 /= d;
                                   m2 /= d;
                                   for (int j = 0; j < d; ++j) {
                                       double gy = g[i * d + j] * gv[j];
                                       gx[i * d + j] += (gy - m1 - xhat[i * d + j] * m2) * inv_std[i];
                                   }
                               }
                           }
                       },
                       "layer_norm")};
}

Var Tape::channel_norm(Var x, Var gain, Var bias, double eps) {
    const Node& nx = node(x.id);
    const Node& ng = node(gain.id);
    const Node& nb = node(bias.id);
    if (eps <= 0) throw std::invalid_argument("channel_norm: eps must be > 0");
    if (nx.shape.size() != 3)
        throw std::invalid_argument("channel_norm: needs {c,h,w}, got " + shape_str(nx.shape));
    const int c = nx.shape[0], hw = nx.shape[1] * nx.shape[2];
    if (numel(ng.shape) != static_cast<std::size_t>(c) || numel(nb.shape) != static_cast<std::size_t>(c))
        throw std::invalid_argument("channel_norm: gain/bias length must equal channel count");
    std::vector<double> out(nx.value.size());
    std::vector<double> xhat(nx.value.size());
    std::vector<double> inv_std(c);
    for (int i = 0; i < c; ++i) {
        const double* row = nx.value.data() + static_cast<std::size_t>(i) * hw;
        double mu = 0.0;
        for (int j = 0; j < hw; ++j) mu += row[j];
        mu /= hw;
        double var = 0.0;
        for (int j = 0; j < hw; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= hw;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < hw; ++j) {
            double xh = (row[j] - mu) * is;
            xhat[i * hw + j] = xh;
            out[i * hw + j] = ng.value[i] * xh + nb.value[i];
        }
    }
    bool rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
    int xi = x.id, gi = gain.id, bi = bias.id;
    return {this, push(nx.shape, std::move(out), rg,
                       [xi, gi, bi, c, hw, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           const auto& gv = t.node(gi).value;
                           if (t.node(gi).requires_grad) {
                               auto& gg = t.grad_buf(gi);
                               for (int i = 0; i < c; ++i)
                                   for (int j = 0; j < hw; ++j) gg[i] += g[i * hw + j] * xhat[i * hw + j];
                           }
                           if (t.node(bi).requires_grad) {
                               auto& gb = t.grad_buf(bi);
                               for (int i = 0; i < c; ++i)
                                   for (int j = 0; j < hw; ++j) gb[i] += g[i * hw + j];
                           }
                           if (t.node(xi).requires_grad) {
                               auto& gx = t.grad_buf(xi);
                               for (int i = 0; i < c; ++i) {
                                   double m1 = 0.0, m2 = 0.0;
                                   for (int j = 0; j < hw; ++j) {
                                       double gy = g[i * hw + j] * gv[i];
                                       m1 += gy;
                                       m2 += gy * xhat[i * hw + j];
                                   }
                                   m1 /= hw;
                                   m2 /= hw;
                                   for (int j = 0; j < hw; ++j) {
                                       double gy = g[i * hw + j] * gv[i];
                                       gx[i * hw + j] += (gy - m1 - xhat[i * hw + j] * m2) * inv_std[i];
                                   }
                               }
                           }
                       },
                       "channel_norm")};
}

// im2col patch matrix: one row per output pixel, Cin*k*k columns
static std::vector<double> im2col(const std::vector<double>& x, int ci, int h, int w, int k,
                                  int stride, int pad, int oh, int ow) {
    std::vector<double> cols(static_cast<std::size_t>(oh) * ow * ci * k * k, 0.0);
    const int patch = ci * k * k;
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            double* row = cols.data() + (static_cast<std::size_t>(oy) * ow + ox) * patch;
            int idx = 0;
            for (int c = 0; c < ci; ++c)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx, ++idx) {
                        int iy = oy * stride + ky - pad;
                        int ix = ox * stride + kx - pad;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                            row[idx] = x[(static_cast<std::size_t>(c) * h + iy) * w + ix];
                    }
        }
    }
    return cols;
}

Var Tape::conv2d(Var x, Var w, Var bias, int stride, int pad) {
    const Node& nx = node(x.id);
    const Node& nw = node(w.id);
    const Node& nb = node(bias.id);
    if (nx.shape.size() != 3 || nw.shape.size() != 4 || nw.shape[2] != nw.shape[3])
        throw std::invalid_argument("conv2d: x " + shape_str(nx.shape) + ", w " + shape_str(nw.shape));
    const int ci = nx.shape[0], h = nx.shape[1], ww = nx.shape[2];
    const int co = nw.shape[0], k = nw.shape[2];
    if (nw.shape[1] != ci)
        throw std::invalid_argument("conv2d: channel mismatch x " + shape_str(nx.shape) + " w " +
                                    shape_str(nw.shape));
    if (numel(nb.shape) != static_cast<std::size_t>(co))
        throw std::invalid_argument("conv2d: bias length must equal out channels");
    if (h + 2 * pad < k || ww + 2 * pad < k)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    const int oh = (h + 2 * pad - k) / stride + 1;  // floor semantics
    const int ow = (ww + 2 * pad - k) / stride + 1;
    const int patch = ci * k * k;
    const int spatial = oh * ow;

    std::vector<double> cols = im2col(nx.value, ci, h, ww, k, stride, pad, oh, ow);
    // y_mat[spatial, co] = cols @ w_mat^T, w viewed as [co, patch]
    std::vector<double> y_mat(static_cast<std::size_t>(spatial) * co);
    mm_nt(cols.data(), nw.value.data(), y_mat.data(), spatial, patch, co, false);
    std::vector<double> out(static_cast<std::size_t>(co) * spatial);
    for (int c = 0; c < co; ++c)
        for (int s = 0; s < spatial; ++s) out[static_cast<std::size_t>(c) * spatial + s] = y_mat[static_cast<std::size_t>(s) * co + c] + nb.value[c];

    bool rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
    int xi = x.id, wi = w.id, bi = bias.id;
    return {this, push({co, oh, ow}, std::move(out), rg,
                       [xi, wi, bi, ci, h, ww, co, k, stride, pad, oh, ow, patch, spatial](Tape& t, int self) {
                           const auto& g = t.node(self).grad;  // [co, oh, ow]
                           // regather as [spatial, co]
                           std::vector<double> gy(static_cast<std::size_t>(spatial) * co);
                           for (int c = 0; c < co; ++c)
                               for (int s = 0; s < spatial; ++s) gy[static_cast<std::size_t>(s) * co + c] = g[static_cast<std::size_t>(c) * spatial + s];
                           if (t.node(bi).requires_grad) {
                               auto& gb = t.grad_buf(bi);
                               for (int c = 0; c < co; ++c) {
                                   double s = 0.0;
                                   for (int sp = 0; sp < spatial; ++sp) s += g[static_cast<std::size_t>(c) * spatial + sp];
                                   gb[c] += s;
                               }
                           }
                           if (t.node(wi).requires_grad) {
                               // dW[co, patch] = gy^T @ cols
                               std::vector<double> cols = im2col(t.node(xi).value, ci, h, ww, k,
                                                                 stride, pad, oh, ow);
                               mm_tn(gy.data(), cols.data(), t.grad_buf(wi).data(), co, spatial, patch,
                                     true);
                           }
                           if (t.node(xi).requires_grad) {
                               // dcols[spatial, patch] = gy @ w_mat
                               std::vector<double> dcols(static_cast<std::size_t>(spatial) * patch);
                               mm_nn(gy.data(), t.node(wi).value.data(), dcols.data(), spatial, co,
                                     patch, false);
                               auto& gx = t.grad_buf(xi);
                               for (int oy = 0; oy < oh; ++oy)
                                   for (int ox = 0; ox < ow; ++ox) {
                                       const double* row = dcols.data() + (static_cast<std::size_t>(oy) * ow + ox) * patch;
                                       int idx = 0;
                                       for (int c = 0; c < ci; ++c)
                                           for (int ky = 0; ky < k; ++ky)
                                               for (int kx = 0; kx < k; ++kx, ++idx) {
                                                   int iy = oy * stride + ky - pad;
                                                   int ix = ox * stride + kx - pad;
                                                   if (iy >= 0 && iy < h && ix >= 0 && ix < ww)
                                                       gx[(static_cast<std::size_t>(c) * h + iy) * ww + ix] += row[idx];
                                               }
                                   }
                           }
                       },
                       "conv2d")};
}

Var Tape::upsample_nearest2(Var x) {
    const Node& nx = node(x.id);
    if (nx.shape.size() != 3)
        throw std::invalid_argument("upsample_nearest2: needs {c,h,w}, got " + shape_str(nx.shape));
    const int c = nx.shape[0], h = nx.shape[1], w = nx.shape[2];
    std::vector<double> out(static_cast<std::size_t>(c) * 4 * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int x2 = 0; x2 < 2 * w; ++x2)
                out[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + x2] =
                    nx.value[(static_cast<std::size_t>(ch) * h + y / 2) * w + x2 / 2];
    int xi = x.id;
    return {this, push({c, 2 * h, 2 * w}, std::move(out), nx.requires_grad,
                       [xi, c, h, w](Tape& t, int self) {
                           const auto& g = t.node(self).grad;
                           auto& gx = t.grad_buf(xi);
                           for (int ch = 0; ch < c; ++ch)
                               for (int y = 0; y < 2 * h; ++y)
                                   for (int x2 = 0; x2 < 2 * w; ++x2)
                                       gx[(static_cast<std::size_t>(ch) * h + y / 2) * w + x2 / 2] +=
                                           g[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + x2];
                       },
                       "upsample_nearest2")};
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss is not on this tape");
    Node& ln = nodes_[loss.id];
    if (ln.value.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(ln.shape));

    // fresh pass: clear node grads so repeated backward calls are identical
    for (auto& n : nodes_) n.grad.clear();
    grad_buf(loss.id)[0] = 1.0;

    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.grad.empty() || !n.backward_fn) continue;
        n.backward_fn(*this, id);
    }

    // zero-fill every bound leaf so unreachable parameters read as zero grad,
    // then accumulate what the traversal produced
    for (auto& n : nodes_) {
        if (!n.bound || !n.bound->requires_grad) continue;
        n.bound->ensure_grad();
        if (!n.grad.empty())
            for (std::size_t i = 0; i < n.grad.size(); ++i) n.bound->grad[i] += n.grad[i];
    }
}

GradCheckReport finite_diff_check(const std::function<double()>& f, Tensor& theta, double h_base) {
    if (theta.grad.size() != theta.data.size())
        throw std::invalid_argument("finite_diff_check: analytic gradient not populated");
    GradCheckReport rep;
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
        const double orig = theta.data[i];
        const double h = h_base * (1.0 + std::abs(orig));
        theta.data[i] = orig + h;
        const double fp = f();
        theta.data[i] = orig - h;
        const double fm = f();
        theta.data[i] = orig;
        const double num = (fp - fm) / (2.0 * h);
        const double ana = theta.grad[i];
        const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
        const double rel = std::abs(ana - num) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
            rep.analytic = ana;
            rep.numeric = num;
        }
    }
    return rep;
}

}  // namespace dip
