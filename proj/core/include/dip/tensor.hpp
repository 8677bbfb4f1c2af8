#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dip/rng.hpp"

namespace dip {

// Extents of a dense row-major array. Extent 0 is allowed (empty operand);
// negative extents are not.
using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense 64-bit float tensor. Plain value type; gradient tape participation
// happens through Tape::leaf, which binds a Tensor as a trainable parameter.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // same length as data once populated

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), 0.0) {}
    Tensor(Shape s, std::vector<double> d);

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v);
    static Tensor randn(Shape s, Rng& rng, double stddev = 1.0);

    std::size_t size() const { return data.size(); }
    int rows() const;  // rank-2 helpers
    int cols() const;

    void ensure_grad();  // allocate zeros if absent
    void zero_grad();
    bool finite() const;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Shape& shape() const;
    const std::vector<double>& data() const;
};

// Record of one forward evaluation: ordered, topologically sorted by
// construction (an op's inputs always precede it). One tape per thread per
// forward/backward pass. `checked` screens NaN/Inf at op boundaries;
// `grad_enabled=false` skips closure creation for inference-only passes.
class Tape {
public:
    explicit Tape(bool checked = true, bool grad_enabled = true)
        : checked_(checked), grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // --- node creation ---
    Var leaf(Tensor& param);                        // binds; grads flow back into param.grad
    Var constant(const Tensor& t);                  // copies values, no gradient
    Var constant(Shape s, std::vector<double> d);

    // --- elementwise / structural ---
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);                          // Hadamard
    Var scale(Var a, double c);
    Var add_rowvec(Var x, Var b);                   // b: {d} or {1,d}, broadcast over rows
    Var gelu(Var a);                                // exact erf form
    Var reshape(Var a, Shape s);
    Var concat_rows(Var a, Var b);                  // sequence concatenation along rows
    Var concat_cols(Var a, Var b);
    Var slice_cols(Var a, int c0, int c1);
    Var sum_all(Var a);                             // -> {1}
    Var mean_rows(Var a);                           // {r,d} -> {1,d}

    // --- linear algebra ---
    Var matmul(Var a, Var b);                       // {m,k}x{k,n}
    Var matmul_nt(Var a, Var b);                    // a @ b^T, b: {n,k}

    // --- nonlinear blocks ---
    Var softmax_rows(Var a);
    Var log_softmax_rows(Var a);
    Var layer_norm(Var x, Var gain, Var bias, double eps);      // last-axis norm, affine per column
    Var channel_norm(Var x, Var gain, Var bias, double eps);    // {c,h,w}: per-channel spatial norm

    // --- conv / spatial ---
    Var conv2d(Var x, Var w, Var bias, int stride, int pad);    // x {ci,h,w}, w {co,ci,k,k}
    Var upsample_nearest2(Var x);                               // {c,h,w} -> {c,2h,2w}

    // --- access ---
    const Shape& shape(Var v) const;
    const std::vector<double>& data(Var v) const;
    const std::vector<double>& grad_of(Var v) const;            // valid after backward
    Tensor value(Var v) const;

    // Populates grads of every reachable requires-grad leaf (accumulating into
    // the bound Tensor's grad); unreachable leaves get zeros. Node-local grads
    // are recomputed from scratch, so repeated calls are bit-identical.
    void backward(Var loss);

    std::size_t node_count() const { return nodes_.size(); }
    bool checked() const { return checked_; }

private:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // lazily sized during backward
        bool requires_grad = false;
        Tensor* bound = nullptr;
        std::function<void(Tape&, int)> backward_fn;
    };

    int push(Shape shape, std::vector<double> value, bool requires_grad,
             std::function<void(Tape&, int)> fn, const char* op_name);
    std::vector<double>& grad_buf(int id);  // lazily zero-initialized
    const Node& node(int id) const { return nodes_[id]; }
    Node& node(int id) { return nodes_[id]; }
    void screen(const std::vector<double>& v, const char* op_name) const;

    std::vector<Node> nodes_;
    bool checked_;
    bool grad_enabled_;
};

// --- deterministic raw matmul kernels (ascending-k accumulation) ---
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
void mm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
void mm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central-difference check of theta.grad (must be pre-populated) against a
// deterministic loss closure. Step per coordinate: h_base * (1 + |theta_i|).
// Relative error denominator: max(|analytic|, |numeric|, 1e-8).
GradCheckReport finite_diff_check(const std::function<double()>& f, Tensor& theta,
                                  double h_base = 1e-5);

}  // namespace dip
