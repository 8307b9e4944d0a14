#include "occdir/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace occdir {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatRM>;
using CMap = Eigen::Map<const MatRM>;

// C (+)= A @ B
void gemm_nn(const float* A, const float* B, float* C, int64_t M, int64_t K,
             int64_t N, bool acc) {
    CMap a(A, M, K), b(B, K, N);
    Map c(C, M, N);
    if (acc)
        c.noalias() += a * b;
    else
        c.noalias() = a * b;
}

// C (+)= A @ B^T   (B is N x K)
void gemm_nt(const float* A, const float* B, float* C, int64_t M, int64_t K,
             int64_t N, bool acc) {
    CMap a(A, M, K), b(B, N, K);
    Map c(C, M, N);
    if (acc)
        c.noalias() += a * b.transpose();
    else
        c.noalias() = a * b.transpose();
}

// C (+)= A^T @ B   (A is M x K, result K x N)
void gemm_tn(const float* A, const float* B, float* C, int64_t M, int64_t K,
             int64_t N, bool acc) {
    CMap a(A, M, K), b(B, M, N);
    Map c(C, K, N);
    if (acc)
        c.noalias() += a.transpose() * b;
    else
        c.noalias() = a.transpose() * b;
}

void acc_into(Tensor& dst, const Tensor& src) {
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[size_t(perm[i])] = int(i);
    return inv;
}

Tensor permute(const Tensor& in, const std::vector<int>& perm) {
    std::vector<int> out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in.shape[size_t(perm[i])];
    Tensor out(out_shape);
    auto ist = in.strides();
    std::vector<int64_t> map(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) map[i] = ist[size_t(perm[i])];
    const int r = in.rank();
    std::vector<int> idx(size_t(r), 0);
    int64_t iin = 0;
    for (int64_t o = 0; o < out.numel(); ++o) {
        out.data[size_t(o)] = in.data[size_t(iin)];
        for (int d = r - 1; d >= 0; --d) {
            iin += map[size_t(d)];
            if (++idx[size_t(d)] < out.shape[size_t(d)]) break;
            idx[size_t(d)] = 0;
            iin -= map[size_t(d)] * out.shape[size_t(d)];
        }
    }
    return out;
}

struct AxisSplit {
    int64_t outer, axis_len, inner;
};

AxisSplit split_at(const Tensor& t, int axis) {
    AxisSplit s{1, t.shape[size_t(axis)], 1};
    for (int i = 0; i < axis; ++i) s.outer *= t.shape[size_t(i)];
    for (int i = axis + 1; i < t.rank(); ++i) s.inner *= t.shape[size_t(i)];
    return s;
}

}  // namespace

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> bw) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
}

Tensor& Tape::g(int id) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad_ready) {
        n.grad = Tensor::zeros(n.value.shape);
        n.grad_ready = true;
    }
    return n.grad;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

const Tensor& Tape::grad(Var v) {
    return g(v.id);
}

void Tape::clear() {
    nodes_.clear();
}

void Tape::backward(Var loss) {
    check(val(loss).numel() == 1, "ShapeMismatch", "backward target must be scalar");
    check(std::isfinite(val(loss)[0]), "NumericalFailure", "non-finite loss");
    g(loss.id)[0] = 1.0f;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[size_t(i)];
        if (n.requires_grad && n.grad_ready && n.backward) n.backward(*this);
    }
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Var Tape::matmul(Var av, Var bv) {
    const Tensor& a = val(av);
    const Tensor& b = val(bv);
    check(a.rank() >= 2 && b.rank() >= 2, "ShapeMismatch", "matmul needs rank >= 2");
    const int64_t K = a.shape.back();
    const int64_t N = b.shape.back();
    bool weight_case = (b.rank() == 2);
    if (!weight_case) {
        check(a.rank() == b.rank(), "ShapeMismatch", "matmul rank mismatch");
        for (int i = 0; i < a.rank() - 2; ++i)
            check(a.shape[size_t(i)] == b.shape[size_t(i)], "ShapeMismatch",
                  "matmul batch dims differ");
    }
    check(int64_t(b.shape[size_t(b.rank() - 2)]) == K, "ShapeMismatch",
          "matmul inner dims differ: " + a.shape_str() + " x " + b.shape_str());

    std::vector<int> out_shape = a.shape;
    out_shape.back() = int(N);
    Tensor out(out_shape);
    if (weight_case) {
        const int64_t M = a.numel() / K;
        gemm_nn(a.data.data(), b.data.data(), out.data.data(), M, K, N, false);
    } else {
        const int64_t m = a.shape[size_t(a.rank() - 2)];
        const int64_t batches = a.numel() / (m * K);
        for (int64_t i = 0; i < batches; ++i)
            gemm_nn(a.data.data() + i * m * K, b.data.data() + i * K * N,
                    out.data.data() + i * m * N, m, K, N, false);
    }

    bool rg = requires_grad(av) || requires_grad(bv);
    int aid = av.id, bid = bv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, bid, oid, K, N, weight_case](Tape& t) {
        const Tensor& A = t.nodes_[size_t(aid)].value;
        const Tensor& B = t.nodes_[size_t(bid)].value;
        const Tensor& GO = t.g(oid);
        if (weight_case) {
            const int64_t M = A.numel() / K;
            if (t.nodes_[size_t(aid)].requires_grad)
                gemm_nt(GO.data.data(), B.data.data(), t.g(aid).data.data(), M, N, K, true);
            if (t.nodes_[size_t(bid)].requires_grad)
                gemm_tn(A.data.data(), GO.data.data(), t.g(bid).data.data(), M, K, N, true);
        } else {
            const int64_t m = A.shape[size_t(A.rank() - 2)];
            const int64_t batches = A.numel() / (m * K);
            for (int64_t i = 0; i < batches; ++i) {
                if (t.nodes_[size_t(aid)].requires_grad)
                    gemm_nt(GO.data.data() + i * m * N, B.data.data() + i * K * N,
                            t.g(aid).data.data() + i * m * K, m, N, K, true);
                if (t.nodes_[size_t(bid)].requires_grad)
                    gemm_tn(A.data.data() + i * m * K, GO.data.data() + i * m * N,
                            t.g(bid).data.data() + i * K * N, m, K, N, true);
            }
        }
    };
    return ov;
}

Var Tape::transpose(Var av, std::vector<int> perm) {
    const Tensor& a = val(av);
    check(int(perm.size()) == a.rank(), "ShapeMismatch", "transpose perm rank");
    Tensor out = permute(a, perm);
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    auto inv = inverse_perm(perm);
    nodes_[size_t(oid)].backward = [aid, oid, inv](Tape& t) {
        Tensor gp = permute(t.g(oid), inv);
        acc_into(t.g(aid), gp);
    };
    return ov;
}

Var Tape::reshape(Var av, std::vector<int> shape) {
    const Tensor& a = val(av);
    check(Tensor::numel(shape) == a.numel(), "ShapeMismatch",
          "reshape numel mismatch " + a.shape_str());
    Tensor out(shape, a.data);
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid](Tape& t) {
        const Tensor& go = t.g(oid);
        Tensor& ga = t.g(aid);
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go.data[i];
    };
    return ov;
}

Var Tape::concat(const std::vector<Var>& xs, int axis) {
    check(!xs.empty(), "ShapeMismatch", "concat of nothing");
    const Tensor& first = val(xs[0]);
    std::vector<int> out_shape = first.shape;
    int total = 0;
    for (Var x : xs) {
        const Tensor& t = val(x);
        check(t.rank() == first.rank(), "ShapeMismatch", "concat rank mismatch");
        for (int i = 0; i < t.rank(); ++i)
            if (i != axis)
                check(t.shape[size_t(i)] == first.shape[size_t(i)], "ShapeMismatch",
                      "concat dim mismatch");
        total += t.shape[size_t(axis)];
    }
    out_shape[size_t(axis)] = total;
    Tensor out(out_shape);
    auto os = split_at(out, axis);
    int64_t at = 0;
    bool rg = false;
    for (Var x : xs) {
        const Tensor& t = val(x);
        auto ts = split_at(t, axis);
        for (int64_t o = 0; o < ts.outer; ++o)
            std::copy_n(t.data.data() + o * ts.axis_len * ts.inner,
                        ts.axis_len * ts.inner,
                        out.data.data() + o * os.axis_len * os.inner + at * os.inner);
        at += ts.axis_len;
        rg = rg || requires_grad(x);
    }
    std::vector<int> ids;
    std::vector<int64_t> lens;
    for (Var x : xs) {
        ids.push_back(x.id);
        lens.push_back(val(x).shape[size_t(axis)]);
    }
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [ids, lens, axis, oid](Tape& t) {
        const Tensor& go = t.g(oid);
        auto os2 = split_at(go, axis);
        int64_t at2 = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (t.nodes_[size_t(ids[i])].requires_grad) {
                Tensor& gi = t.g(ids[i]);
                auto is = split_at(gi, axis);
                for (int64_t o = 0; o < is.outer; ++o) {
                    const float* src =
                        go.data.data() + o * os2.axis_len * os2.inner + at2 * os2.inner;
                    float* dst = gi.data.data() + o * is.axis_len * is.inner;
                    for (int64_t j = 0; j < is.axis_len * is.inner; ++j) dst[j] += src[j];
                }
            }
            at2 += lens[i];
        }
    };
    return ov;
}

Var Tape::slice(Var av, int axis, int start, int len) {
    const Tensor& a = val(av);
    check(axis >= 0 && axis < a.rank(), "ShapeMismatch", "slice axis");
    check(start >= 0 && len >= 0 && start + len <= a.shape[size_t(axis)],
          "ShapeMismatch", "slice range out of bounds");
    std::vector<int> out_shape = a.shape;
    out_shape[size_t(axis)] = len;
    Tensor out(out_shape);
    auto as = split_at(a, axis);
    for (int64_t o = 0; o < as.outer; ++o)
        std::copy_n(a.data.data() + o * as.axis_len * as.inner + start * as.inner,
                    int64_t(len) * as.inner, out.data.data() + o * len * as.inner);
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid, axis, start, len](Tape& t) {
        const Tensor& go = t.g(oid);
        Tensor& ga = t.g(aid);
        auto as2 = split_at(ga, axis);
        for (int64_t o = 0; o < as2.outer; ++o) {
            const float* src = go.data.data() + o * len * as2.inner;
            float* dst = ga.data.data() + o * as2.axis_len * as2.inner + start * as2.inner;
            for (int64_t j = 0; j < int64_t(len) * as2.inner; ++j) dst[j] += src[j];
        }
    };
    return ov;
}

std::vector<Var> Tape::split(Var a, int axis, const std::vector<int>& sizes) {
    std::vector<Var> out;
    int at = 0;
    for (int s : sizes) {
        out.push_back(slice(a, axis, at, s));
        at += s;
    }
    check(at == val(a).shape[size_t(axis)], "ShapeMismatch", "split sizes do not cover axis");
    return out;
}

Var Tape::add(Var av, Var bv) {
    const Tensor& a = val(av);
    const Tensor& b = val(bv);
    check(a.same_shape(b), "ShapeMismatch",
          "add shapes differ: " + a.shape_str() + " vs " + b.shape_str());
    Tensor out(a.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    bool rg = requires_grad(av) || requires_grad(bv);
    int aid = av.id, bid = bv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, bid, oid](Tape& t) {
        const Tensor& go = t.g(oid);
        if (t.nodes_[size_t(aid)].requires_grad) acc_into(t.g(aid), go);
        if (t.nodes_[size_t(bid)].requires_grad) acc_into(t.g(bid), go);
    };
    return ov;
}

Var Tape::sub(Var a, Var b) {
    return add(a, scale(b, -1.0f));
}

Var Tape::mul(Var av, Var bv) {
    const Tensor& a = val(av);
    const Tensor& b = val(bv);
    check(a.same_shape(b), "ShapeMismatch", "mul shapes differ");
    Tensor out(a.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    bool rg = requires_grad(av) || requires_grad(bv);
    int aid = av.id, bid = bv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, bid, oid](Tape& t) {
        const Tensor& go = t.g(oid);
        const Tensor& A = t.nodes_[size_t(aid)].value;
        const Tensor& B = t.nodes_[size_t(bid)].value;
        if (t.nodes_[size_t(aid)].requires_grad) {
            Tensor& ga = t.g(aid);
            for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go.data[i] * B.data[i];
        }
        if (t.nodes_[size_t(bid)].requires_grad) {
            Tensor& gb = t.g(bid);
            for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += go.data[i] * A.data[i];
        }
    };
    return ov;
}

Var Tape::scale(Var av, float c) {
    const Tensor& a = val(av);
    Tensor out(a.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * c;
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid, c](Tape& t) {
        const Tensor& go = t.g(oid);
        Tensor& ga = t.g(aid);
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go.data[i] * c;
    };
    return ov;
}

Var Tape::add_scalar(Var av, float c) {
    const Tensor& a = val(av);
    Tensor out(a.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + c;
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid](Tape& t) { acc_into(t.g(aid), t.g(oid)); };
    return ov;
}

Var Tape::add_rowvec(Var xv, Var vv) {
    const Tensor& x = val(xv);
    const Tensor& v = val(vv);
    const int64_t d = x.shape.back();
    check(v.numel() == d, "ShapeMismatch", "add_rowvec width mismatch");
    Tensor out(x.shape);
    const int64_t rows = x.numel() / d;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i)
            out.data[size_t(r * d + i)] = x.data[size_t(r * d + i)] + v.data[size_t(i)];
    bool rg = requires_grad(xv) || requires_grad(vv);
    int xid = xv.id, vid = vv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [xid, vid, oid, d, rows](Tape& t) {
        const Tensor& go = t.g(oid);
        if (t.nodes_[size_t(xid)].requires_grad) acc_into(t.g(xid), go);
        if (t.nodes_[size_t(vid)].requires_grad) {
            Tensor& gv = t.g(vid);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < d; ++i)
                    gv.data[size_t(i)] += go.data[size_t(r * d + i)];
        }
    };
    return ov;
}

Var Tape::mul_rowvec(Var xv, Var vv) {
    const Tensor& x = val(xv);
    const Tensor& v = val(vv);
    const int64_t d = x.shape.back();
    check(v.numel() == d, "ShapeMismatch", "mul_rowvec width mismatch");
    Tensor out(x.shape);
    const int64_t rows = x.numel() / d;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i)
            out.data[size_t(r * d + i)] = x.data[size_t(r * d + i)] * v.data[size_t(i)];
    bool rg = requires_grad(xv) || requires_grad(vv);
    int xid = xv.id, vid = vv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [xid, vid, oid, d, rows](Tape& t) {
        const Tensor& go = t.g(oid);
        const Tensor& X = t.nodes_[size_t(xid)].value;
        const Tensor& V = t.nodes_[size_t(vid)].value;
        if (t.nodes_[size_t(xid)].requires_grad) {
            Tensor& gx = t.g(xid);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < d; ++i)
                    gx.data[size_t(r * d + i)] += go.data[size_t(r * d + i)] * V.data[size_t(i)];
        }
        if (t.nodes_[size_t(vid)].requires_grad) {
            Tensor& gv = t.g(vid);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < d; ++i)
                    gv.data[size_t(i)] += go.data[size_t(r * d + i)] * X.data[size_t(r * d + i)];
        }
    };
    return ov;
}

Var Tape::mul_scalar_var(Var xv, Var sv) {
    const Tensor& x = val(xv);
    const Tensor& s = val(sv);
    check(s.numel() == 1, "ShapeMismatch", "mul_scalar_var expects 1-element scalar");
    Tensor out(x.shape);
    const float c = s.data[0];
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] * c;
    bool rg = requires_grad(xv) || requires_grad(sv);
    int xid = xv.id, sid = sv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [xid, sid, oid](Tape& t) {
        const Tensor& go = t.g(oid);
        const Tensor& X = t.nodes_[size_t(xid)].value;
        const float cc = t.nodes_[size_t(sid)].value.data[0];
        if (t.nodes_[size_t(xid)].requires_grad) {
            Tensor& gx = t.g(xid);
            for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += go.data[i] * cc;
        }
        if (t.nodes_[size_t(sid)].requires_grad) {
            double acc = 0.0;
            for (size_t i = 0; i < go.data.size(); ++i)
                acc += double(go.data[i]) * double(X.data[i]);
            t.g(sid).data[0] += float(acc);
        }
    };
    return ov;
}

Var Tape::mean(Var av, int axis) {
    const Tensor& a = val(av);
    check(axis >= 0 && axis < a.rank(), "ShapeMismatch", "mean axis");
    auto as = split_at(a, axis);
    std::vector<int> out_shape;
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis) out_shape.push_back(a.shape[size_t(i)]);
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out(out_shape);
    const float inv = 1.0f / float(as.axis_len);
    for (int64_t o = 0; o < as.outer; ++o)
        for (int64_t i = 0; i < as.inner; ++i) {
            double acc = 0.0;
            for (int64_t k = 0; k < as.axis_len; ++k)
                acc += a.data[size_t(o * as.axis_len * as.inner + k * as.inner + i)];
            out.data[size_t(o * as.inner + i)] = float(acc) * inv;
        }
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid, as, inv](Tape& t) {
        const Tensor& go = t.g(oid);
        Tensor& ga = t.g(aid);
        for (int64_t o = 0; o < as.outer; ++o)
            for (int64_t i = 0; i < as.inner; ++i) {
                const float v = go.data[size_t(o * as.inner + i)] * inv;
                for (int64_t k = 0; k < as.axis_len; ++k)
                    ga.data[size_t(o * as.axis_len * as.inner + k * as.inner + i)] += v;
            }
    };
    return ov;
}

Var Tape::mean_all(Var av) {
    const Tensor& a = val(av);
    double acc = 0.0;
    for (float v : a.data) acc += v;
    const int64_t n = a.numel();
    Tensor out({1}, {float(acc / double(n))});
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid, n](Tape& t) {
        const float v = t.g(oid).data[0] / float(n);
        Tensor& ga = t.g(aid);
        for (auto& x : ga.data) x += v;
    };
    return ov;
}

Var Tape::softmax(Var av) {
    const Tensor& a = val(av);
    const int64_t d = a.shape.back();
    const int64_t rows = a.numel() / d;
    Tensor out(a.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const float* x = a.data.data() + r * d;
        float* y = out.data.data() + r * d;
        float mx = x[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - mx);
            s += y[i];
        }
        const float inv = float(1.0 / s);
        for (int64_t i = 0; i < d; ++i) y[i] *= inv;
    }
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid, d, rows](Tape& t) {
        const Tensor& go = t.g(oid);
        const Tensor& Y = t.nodes_[size_t(oid)].value;
        Tensor& ga = t.g(aid);
        for (int64_t r = 0; r < rows; ++r) {
            const float* gy = go.data.data() + r * d;
            const float* y = Y.data.data() + r * d;
            float* gx = ga.data.data() + r * d;
            double dot = 0.0;
            for (int64_t i = 0; i < d; ++i) dot += double(gy[i]) * double(y[i]);
            for (int64_t i = 0; i < d; ++i) gx[i] += y[i] * (gy[i] - float(dot));
        }
    };
    return ov;
}

Var Tape::layer_norm(Var av) {
    constexpr float kEps = 1e-6f;
    const Tensor& a = val(av);
    const int64_t d = a.shape.back();
    const int64_t rows = a.numel() / d;
    Tensor out(a.shape);
    std::vector<float> rstd(size_t(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const float* x = a.data.data() + r * d;
        float* y = out.data.data() + r * d;
        double mu = 0.0;
        for (int64_t i = 0; i < d; ++i) mu += x[i];
        mu /= double(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            const double dv = x[i] - mu;
            var += dv * dv;
        }
        var /= double(d);  // biased estimator
        const float rs = float(1.0 / std::sqrt(var + kEps));
        rstd[size_t(r)] = rs;
        for (int64_t i = 0; i < d; ++i) y[i] = (x[i] - float(mu)) * rs;
    }
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid, d, rows, rstd](Tape& t) {
        const Tensor& go = t.g(oid);
        const Tensor& Y = t.nodes_[size_t(oid)].value;
        Tensor& ga = t.g(aid);
        for (int64_t r = 0; r < rows; ++r) {
            const float* gy = go.data.data() + r * d;
            const float* y = Y.data.data() + r * d;
            float* gx = ga.data.data() + r * d;
            double gsum = 0.0, gysum = 0.0;
            for (int64_t i = 0; i < d; ++i) {
                gsum += gy[i];
                gysum += double(gy[i]) * double(y[i]);
            }
            const float gmean = float(gsum / double(d));
            const float gymean = float(gysum / double(d));
            const float rs = rstd[size_t(r)];
            for (int64_t i = 0; i < d; ++i)
                gx[i] += rs * (gy[i] - gmean - y[i] * gymean);
        }
    };
    return ov;
}

Var Tape::gelu(Var av) {
    const Tensor& a = val(av);
    Tensor out(a.shape);
    for (size_t i = 0; i < out.data.size(); ++i) {
        const float x = a.data[i];
        out.data[i] = 0.5f * x * (1.0f + std::erf(x * 0.70710678f));
    }
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid](Tape& t) {
        const Tensor& go = t.g(oid);
        const Tensor& X = t.nodes_[size_t(aid)].value;
        Tensor& ga = t.g(aid);
        for (size_t i = 0; i < ga.data.size(); ++i) {
            const float x = X.data[i];
            const float cdf = 0.5f * (1.0f + std::erf(x * 0.70710678f));
            const float pdf = 0.39894228f * std::exp(-0.5f * x * x);
            ga.data[i] += go.data[i] * (cdf + x * pdf);
        }
    };
    return ov;
}

Var Tape::silu(Var av) {
    const Tensor& a = val(av);
    Tensor out(a.shape);
    for (size_t i = 0; i < out.data.size(); ++i) {
        const float x = a.data[i];
        out.data[i] = x / (1.0f + std::exp(-x));
    }
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid](Tape& t) {
        const Tensor& go = t.g(oid);
        const Tensor& X = t.nodes_[size_t(aid)].value;
        Tensor& ga = t.g(aid);
        for (size_t i = 0; i < ga.data.size(); ++i) {
            const float x = X.data[i];
            const float sg = 1.0f / (1.0f + std::exp(-x));
            ga.data[i] += go.data[i] * sg * (1.0f + x * (1.0f - sg));
        }
    };
    return ov;
}

Var Tape::exp(Var av) {
    const Tensor& a = val(av);
    Tensor out(a.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::exp(a.data[i]);
    bool rg = requires_grad(av);
    int aid = av.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [aid, oid](Tape& t) {
        const Tensor& go = t.g(oid);
        const Tensor& Y = t.nodes_[size_t(oid)].value;
        Tensor& ga = t.g(aid);
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go.data[i] * Y.data[i];
    };
    return ov;
}

Var Tape::rope(Var xv, const Tensor& cos_tab, const Tensor& sin_tab) {
    const Tensor& x = val(xv);
    check(x.rank() >= 2, "ShapeMismatch", "rope input rank");
    const int64_t hd = x.shape.back();
    const int64_t n = x.shape[size_t(x.rank() - 2)];
    check(hd % 2 == 0, "HeadDimIndivisible", "rope head dim must be even");
    check(cos_tab.rank() == 2 && cos_tab.shape[0] == n && cos_tab.shape[1] == hd / 2,
          "ShapeMismatch", "rope cos table shape");
    check(sin_tab.same_shape(cos_tab), "ShapeMismatch", "rope sin table shape");
    const int64_t batch = x.numel() / (n * hd);
    Tensor out(x.shape);
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t j = 0; j < n; ++j) {
            const float* xi = x.data.data() + (b * n + j) * hd;
            float* yo = out.data.data() + (b * n + j) * hd;
            const float* c = cos_tab.data.data() + j * (hd / 2);
            const float* s = sin_tab.data.data() + j * (hd / 2);
            for (int64_t i = 0; i < hd / 2; ++i) {
                const float a0 = xi[2 * i], a1 = xi[2 * i + 1];
                yo[2 * i] = a0 * c[i] - a1 * s[i];
                yo[2 * i + 1] = a0 * s[i] + a1 * c[i];
            }
        }
    bool rg = requires_grad(xv);
    int xid = xv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    Tensor ct = cos_tab, st = sin_tab;
    nodes_[size_t(oid)].backward = [xid, oid, ct, st, n, hd, batch](Tape& t) {
        const Tensor& go = t.g(oid);
        Tensor& gx = t.g(xid);
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t j = 0; j < n; ++j) {
                const float* gy = go.data.data() + (b * n + j) * hd;
                float* gi = gx.data.data() + (b * n + j) * hd;
                const float* c = ct.data.data() + j * (hd / 2);
                const float* s = st.data.data() + j * (hd / 2);
                for (int64_t i = 0; i < hd / 2; ++i) {
                    const float g0 = gy[2 * i], g1 = gy[2 * i + 1];
                    gi[2 * i] += g0 * c[i] + g1 * s[i];
                    gi[2 * i + 1] += -g0 * s[i] + g1 * c[i];
                }
            }
    };
    return ov;
}

Var Tape::frame_assign(Var xv, Var yv, int start) {
    const Tensor& x = val(xv);
    const Tensor& y = val(yv);
    check(x.rank() == y.rank() && x.rank() >= 1, "ShapeMismatch", "frame_assign rank");
    for (int i = 1; i < x.rank(); ++i)
        check(x.shape[size_t(i)] == y.shape[size_t(i)], "ShapeMismatch",
              "frame_assign trailing dims");
    const int yf = y.shape[0];
    check(start >= 0 && start + yf <= x.shape[0], "HorizonOutOfRange",
          "frame_assign range out of bounds");
    const int64_t inner = x.numel() / x.shape[0];
    Tensor out = x;
    std::copy_n(y.data.data(), int64_t(yf) * inner, out.data.data() + int64_t(start) * inner);
    bool rg = requires_grad(xv) || requires_grad(yv);
    int xid = xv.id, yid = yv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [xid, yid, oid, start, yf, inner](Tape& t) {
        const Tensor& go = t.g(oid);
        if (t.nodes_[size_t(xid)].requires_grad) {
            Tensor& gx = t.g(xid);
            const int64_t total = go.numel();
            for (int64_t i = 0; i < total; ++i) {
                const int64_t f = i / inner;
                if (f < start || f >= start + yf) gx.data[size_t(i)] += go.data[size_t(i)];
            }
        }
        if (t.nodes_[size_t(yid)].requires_grad) {
            Tensor& gy = t.g(yid);
            const float* src = go.data.data() + int64_t(start) * inner;
            for (int64_t i = 0; i < int64_t(yf) * inner; ++i) gy.data[size_t(i)] += src[i];
        }
    };
    return ov;
}

Var Tape::cross_entropy_logits(Var lv, const std::vector<int>& targets) {
    const Tensor& l = val(lv);
    check(l.rank() == 2, "ShapeMismatch", "cross_entropy expects [N, K] logits");
    const int64_t N = l.shape[0], K = l.shape[1];
    check(int64_t(targets.size()) == N, "ShapeMismatch", "cross_entropy target count");
    double total = 0.0;
    for (int64_t r = 0; r < N; ++r) {
        check(targets[size_t(r)] >= 0 && targets[size_t(r)] < K, "ShapeMismatch",
              "cross_entropy target id out of range");
        const float* x = l.data.data() + r * K;
        float mx = x[0];
        for (int64_t i = 1; i < K; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (int64_t i = 0; i < K; ++i) s += std::exp(double(x[i]) - mx);
        total += mx + std::log(s) - x[targets[size_t(r)]];
    }
    Tensor out({1}, {float(total / double(N))});
    bool rg = requires_grad(lv);
    int lid = lv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    std::vector<int> tg = targets;
    nodes_[size_t(oid)].backward = [lid, oid, tg, N, K](Tape& t) {
        const float go = t.g(oid).data[0];
        const Tensor& L = t.nodes_[size_t(lid)].value;
        Tensor& gl = t.g(lid);
        for (int64_t r = 0; r < N; ++r) {
            const float* x = L.data.data() + r * K;
            float* gx = gl.data.data() + r * K;
            float mx = x[0];
            for (int64_t i = 1; i < K; ++i) mx = std::max(mx, x[i]);
            double s = 0.0;
            for (int64_t i = 0; i < K; ++i) s += std::exp(double(x[i]) - mx);
            const double inv = 1.0 / s;
            for (int64_t i = 0; i < K; ++i) {
                float p = float(std::exp(double(x[i]) - mx) * inv);
                if (i == tg[size_t(r)]) p -= 1.0f;
                gx[i] += p * go / float(N);
            }
        }
    };
    return ov;
}

Var Tape::expand0(Var xv, int n) {
    const Tensor& x = val(xv);
    std::vector<int> out_shape;
    out_shape.push_back(n);
    for (int d : x.shape) out_shape.push_back(d);
    Tensor out(out_shape);
    const int64_t chunk = x.numel();
    for (int i = 0; i < n; ++i)
        std::copy_n(x.data.data(), chunk, out.data.data() + int64_t(i) * chunk);
    bool rg = requires_grad(xv);
    int xid = xv.id;
    Var ov = push(std::move(out), rg, nullptr);
    if (!rg) return ov;
    int oid = ov.id;
    nodes_[size_t(oid)].backward = [xid, oid, n, chunk](Tape& t) {
        const Tensor& go = t.g(oid);
        Tensor& gx = t.g(xid);
        for (int i = 0; i < n; ++i) {
            const float* src = go.data.data() + int64_t(i) * chunk;
            for (int64_t j = 0; j < chunk; ++j) gx.data[size_t(j)] += src[j];
        }
    };
    return ov;
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                  double eps) {
    Tensor g_ad;
    {
        Tape tape;
        Var xv = tape.leaf(x, true);
        Var loss = f(tape, xv);
        tape.backward(loss);
        g_ad = tape.grad(xv);
    }
    auto eval = [&](const Tensor& xi) {
        Tape tape;
        Var xv = tape.leaf(xi, false);
        Var loss = f(tape, xv);
        return double(tape.val(loss).data[0]);
    };
    double worst = 0.0;
    Tensor xp = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        const float orig = xp.data[i];
        xp.data[i] = orig + float(eps);
        const double fp = eval(xp);
        xp.data[i] = orig - float(eps);
        const double fm = eval(xp);
        xp.data[i] = orig;
        const double g_fd = (fp - fm) / (2.0 * eps);
        const double ga = double(g_ad.data[i]);
        const double denom = std::max({1.0, std::abs(ga), std::abs(g_fd)});
        worst = std::max(worst, std::abs(ga - g_fd) / denom);
    }
    return worst;
}

}  // namespace occdir
