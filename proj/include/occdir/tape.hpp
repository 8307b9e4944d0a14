#pragma once

#include <functional>
#include <vector>

#include "occdir/tensor.hpp"

namespace occdir {

// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff over Tensors. Ops append nodes in evaluation order,
// which is already a topological order, so backward() is a single reverse
// sweep. Node values are immutable once created.
class Tape {
public:
    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // --- core op set -------------------------------------------------------
    // matmul: [.., m, k] x [k, n]  (weight broadcast over leading dims), or
    //         [b.., m, k] x [b.., k, n] with identical leading dims.
    Var matmul(Var a, Var b);
    Var transpose(Var a, std::vector<int> perm);
    Var reshape(Var a, std::vector<int> shape);
    Var concat(const std::vector<Var>& xs, int axis);
    Var slice(Var a, int axis, int start, int len);
    std::vector<Var> split(Var a, int axis, const std::vector<int>& sizes);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, float c);
    Var add_scalar(Var a, float c);
    Var add_rowvec(Var x, Var v);  // v: [d], broadcast over leading dims
    Var mul_rowvec(Var x, Var v);
    Var mul_scalar_var(Var x, Var s);  // s: 1-element tensor (learnable gate)

    Var mean(Var a, int axis);
    Var mean_all(Var a);

    Var softmax(Var a);     // over last axis
    Var layer_norm(Var a);  // over last axis, no affine, eps 1e-6, biased var
    Var gelu(Var a);
    Var silu(Var a);
    Var exp(Var a);

    // pairwise rotation by precomputed angle tables; x: [.., n, hd],
    // cos/sin: [n, hd/2]; pair (2i, 2i+1) rotates by the i-th angle
    Var rope(Var x, const Tensor& cos_tab, const Tensor& sin_tab);

    // frame-indexed select/assign (frame axis = axis 0)
    Var frame_slice(Var x, int start, int len) { return slice(x, 0, start, len); }
    Var frame_assign(Var x, Var y, int start);  // copy of x with frames
                                                // [start, start+yF) replaced by y

    // mean over rows of (logsumexp(row) - row[target])
    Var cross_entropy_logits(Var logits, const std::vector<int>& targets);

    Var expand0(Var x, int n);  // prepend axis of length n by tiling

    // --- execution ---------------------------------------------------------
    void backward(Var loss);
    const Tensor& val(Var v) const { return nodes_[size_t(v.id)].value; }
    const Tensor& grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[size_t(v.id)].requires_grad; }
    size_t size() const { return nodes_.size(); }
    void clear();

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> backward;
        bool requires_grad = false;
        bool grad_ready = false;
    };

    std::vector<Node> nodes_;

    Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> bw);
    Tensor& g(int id);  // grad buffer, allocated on demand
    const Node& node(Var v) const { return nodes_[size_t(v.id)]; }
    friend struct TapeDetail;
};

// Max relative error between the reverse-mode gradient of f at x and central
// finite differences: max_i |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
// f builds a scalar loss from a leaf for x on the given tape.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                  double eps = 1e-3);

}  // namespace occdir
