#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation applied to Vars. Tape::backward() walks the record in
// reverse and hands each node's accumulated output gradient to its backward closure;
// gradients reaching Parameter leaves are added into Parameter::grad. A tape constructed
// with record = false only computes values.

#include "dde/tensor.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace dde::ad {

template <class T>
struct Parameter {
    Mat<T> value;
    Mat<T> grad;
    bool trainable = true;

    void zero_grad() { grad = Mat<T>::Zero(value.rows(), value.cols()); }
};

template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Mat<T>& value() const { return tape->value(id); }
    long rows() const { return value().rows(); }
    long cols() const { return value().cols(); }
    bool needs_grad() const { return tape->needs_grad(id); }
};

template <class T>
class Tape {
public:
    using Backward = std::function<void(const Mat<T>& grad_out)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var<T> constant(Mat<T> v) { return push(std::move(v), false, nullptr); }

    Var<T> param(Parameter<T>& p) {
        const bool g = record_ && p.trainable;
        Var<T> v = push(p.value, g, nullptr);
        if (g) nodes_[v.id].param = &p;
        return v;
    }

    Var<T> push(Mat<T> value, bool needs_grad, Backward back) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = record_ && needs_grad;
        if (n.needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Mat<T>& value(int id) const { return nodes_[id].value; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }

    /// Gradient accumulator of node `id`, allocated as zeros on first use.
    Mat<T>& grad(int id) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(Var<T> loss) {
        require(record_, "Tape::backward: tape was not recording");
        require(loss.rows() == 1 && loss.cols() == 1, "Tape::backward: loss must be a scalar");
        if (!nodes_[loss.id].needs_grad) return;
        grad(loss.id)(0, 0) = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.back) n.back(n.grad);
            if (n.param != nullptr) {
                if (n.param->grad.size() == 0) n.param->zero_grad();
                n.param->grad += n.grad;
            }
            n.grad.resize(0, 0);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        bool needs_grad = false;
        Backward back;
        Parameter<T>* param = nullptr;
    };

    bool record_;
    std::deque<Node> nodes_;
};

using Index = std::shared_ptr<const std::vector<long>>;

inline Index make_index(std::vector<long> v) { return std::make_shared<const std::vector<long>>(std::move(v)); }

namespace detail {
template <class T>
void accumulate(Var<T> v, const Mat<T>& g) {
    if (v.needs_grad()) v.tape->grad(v.id) += g;
}
}  // namespace detail

// ------------------------------------------------------------------- linear algebra

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    require(a.cols() == b.rows(), "matmul: inner dimension mismatch " + shape_str(a.rows(), a.cols()) + " * " +
                                      shape_str(b.rows(), b.cols()));
    Tape<T>& t = *a.tape;
    const bool g = a.needs_grad() || b.needs_grad();
    return t.push(a.value() * b.value(), g, [a, b](const Mat<T>& go) {
        if (a.needs_grad()) a.tape->grad(a.id).noalias() += go * b.value().transpose();
        if (b.needs_grad()) b.tape->grad(b.id).noalias() += a.value().transpose() * go;
    });
}

/// x W + 1 b, with W (in x out) and b (1 x out).
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    require(x.cols() == w.rows(), "linear: input width " + std::to_string(x.cols()) + " != weight rows " +
                                      std::to_string(w.rows()));
    require(b.rows() == 1 && b.cols() == w.cols(), "linear: bias shape mismatch");
    Tape<T>& t = *x.tape;
    Mat<T> out = x.value() * w.value();
    out.rowwise() += b.value().row(0);
    const bool g = x.needs_grad() || w.needs_grad() || b.needs_grad();
    return t.push(std::move(out), g, [x, w, b](const Mat<T>& go) {
        if (x.needs_grad()) x.tape->grad(x.id).noalias() += go * w.value().transpose();
        if (w.needs_grad()) w.tape->grad(w.id).noalias() += x.value().transpose() * go;
        if (b.needs_grad()) b.tape->grad(b.id) += go.colwise().sum();
    });
}

/// x W without bias.
template <class T>
Var<T> linear(Var<T> x, Var<T> w) {
    return matmul(x, w);
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    return a.tape->push(a.value() + b.value(), a.needs_grad() || b.needs_grad(), [a, b](const Mat<T>& go) {
        detail::accumulate(a, go);
        detail::accumulate(b, go);
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    return a.tape->push(a.value() - b.value(), a.needs_grad() || b.needs_grad(), [a, b](const Mat<T>& go) {
        detail::accumulate(a, go);
        if (b.needs_grad()) b.tape->grad(b.id) -= go;
    });
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <class T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }

/// Adds a 1 x cols row to every row of x.
template <class T>
Var<T> add_row(Var<T> x, Var<T> row) {
    require(row.rows() == 1 && row.cols() == x.cols(), "add_row: shape mismatch");
    Mat<T> out = x.value();
    out.rowwise() += row.value().row(0);
    return x.tape->push(std::move(out), x.needs_grad() || row.needs_grad(), [x, row](const Mat<T>& go) {
        detail::accumulate(x, go);
        if (row.needs_grad()) row.tape->grad(row.id) += go.colwise().sum();
    });
}

template <class T>
Var<T> hadamard(Var<T> a, Var<T> b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
    return a.tape->push(a.value().cwiseProduct(b.value()), a.needs_grad() || b.needs_grad(),
                        [a, b](const Mat<T>& go) {
                            if (a.needs_grad()) a.tape->grad(a.id) += go.cwiseProduct(b.value());
                            if (b.needs_grad()) b.tape->grad(b.id) += go.cwiseProduct(a.value());
                        });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
    return x.tape->push(x.value() * s, x.needs_grad(), [x, s](const Mat<T>& go) { detail::accumulate<T>(x, go * s); });
}

/// Multiplies row r of x by coeff[r].
template <class T>
Var<T> rowscale(Var<T> x, const Vec<T>& coeff) {
    require(coeff.size() == x.rows(), "rowscale: coefficient count mismatch");
    Mat<T> out = coeff.asDiagonal() * x.value();
    return x.tape->push(std::move(out), x.needs_grad(),
                        [x, coeff](const Mat<T>& go) { detail::accumulate<T>(x, coeff.asDiagonal() * go); });
}

template <class T>
Var<T> silu(Var<T> x) {
    const Mat<T>& v = x.value();
    Mat<T> sig = (T(1) + (-v.array()).exp()).inverse().matrix();
    Mat<T> out = v.cwiseProduct(sig);
    return x.tape->push(std::move(out), x.needs_grad(), [x, sig](const Mat<T>& go) {
        const auto s = sig.array();
        const auto xv = x.value().array();
        x.tape->grad(x.id).array() += go.array() * (s * (T(1) + xv * (T(1) - s)));
    });
}

/// Row-wise layer normalization with affine gamma/beta (1 x cols each).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    const long n = x.rows(), d = x.cols();
    require(gamma.cols() == d && beta.cols() == d, "layer_norm: affine shape mismatch");
    Mat<T> xhat(n, d);
    Vec<T> inv_std(n);
    for (long r = 0; r < n; ++r) {
        const T mean = x.value().row(r).mean();
        const auto centered = x.value().row(r).array() - mean;
        const T var = centered.square().mean();
        inv_std[r] = T(1) / std::sqrt(var + eps);
        xhat.row(r) = (centered * inv_std[r]).matrix();
    }
    Mat<T> out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    const bool g = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    return x.tape->push(std::move(out), g, [x, gamma, beta, xhat, inv_std, d](const Mat<T>& go) {
        if (gamma.needs_grad()) gamma.tape->grad(gamma.id) += go.cwiseProduct(xhat).colwise().sum();
        if (beta.needs_grad()) beta.tape->grad(beta.id) += go.colwise().sum();
        if (x.needs_grad()) {
            Mat<T> gx = go.array().rowwise() * gamma.value().row(0).array();
            Mat<T>& acc = x.tape->grad(x.id);
            for (long r = 0; r < gx.rows(); ++r) {
                const T m1 = gx.row(r).mean();
                const T m2 = gx.row(r).cwiseProduct(xhat.row(r)).mean();
                acc.row(r).array() += inv_std[r] * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
            }
        }
    });
}

// ------------------------------------------------------------------- indexing

/// out.flat[i] = x.flat[idx[i]], or 0 where idx[i] < 0.
template <class T>
Var<T> gather(Var<T> x, Index idx, long rows, long cols) {
    require(static_cast<long>(idx->size()) == rows * cols, "gather: index size mismatch");
    Mat<T> out(rows, cols);
    const T* src = x.value().data();
    const long n = x.value().size();
    for (long i = 0; i < rows * cols; ++i) {
        const long j = (*idx)[i];
        require(j < n, "gather: index out of range");
        out.data()[i] = j >= 0 ? src[j] : T(0);
    }
    return x.tape->push(std::move(out), x.needs_grad(), [x, idx](const Mat<T>& go) {
        T* dst = x.tape->grad(x.id).data();
        for (std::size_t i = 0; i < idx->size(); ++i)
            if ((*idx)[i] >= 0) dst[(*idx)[i]] += go.data()[i];
    });
}

/// out.flat[idx[i]] += x.flat[i] (entries with idx < 0 are dropped).
template <class T>
Var<T> scatter_add(Var<T> x, Index idx, long rows, long cols) {
    require(static_cast<long>(idx->size()) == x.value().size(), "scatter_add: index size mismatch");
    Mat<T> out = Mat<T>::Zero(rows, cols);
    for (long i = 0; i < x.value().size(); ++i) {
        const long j = (*idx)[i];
        require(j < rows * cols, "scatter_add: index out of range");
        if (j >= 0) out.data()[j] += x.value().data()[i];
    }
    return x.tape->push(std::move(out), x.needs_grad(), [x, idx](const Mat<T>& go) {
        T* dst = x.tape->grad(x.id).data();
        for (std::size_t i = 0; i < idx->size(); ++i)
            if ((*idx)[i] >= 0) dst[i] += go.data()[(*idx)[i]];
    });
}

/// out.row(i) = x.row(idx[i]).
template <class T>
Var<T> gather_rows(Var<T> x, Index idx) {
    Mat<T> out(static_cast<long>(idx->size()), x.cols());
    for (std::size_t i = 0; i < idx->size(); ++i) out.row(i) = x.value().row((*idx)[i]);
    return x.tape->push(std::move(out), x.needs_grad(), [x, idx](const Mat<T>& go) {
        Mat<T>& acc = x.tape->grad(x.id);
        for (std::size_t i = 0; i < idx->size(); ++i) acc.row((*idx)[i]) += go.row(i);
    });
}

/// Builds a (rows x cols) matrix whose row idx_k[i] is row i of part k. Unassigned rows are zero.
template <class T>
Var<T> merge_rows(const std::vector<std::pair<Var<T>, Index>>& parts, long rows) {
    require(!parts.empty(), "merge_rows: no parts");
    const long cols = parts.front().first.cols();
    Mat<T> out = Mat<T>::Zero(rows, cols);
    bool g = false;
    for (const auto& [v, idx] : parts) {
        require(v.cols() == cols && static_cast<long>(idx->size()) == v.rows(), "merge_rows: part shape mismatch");
        for (std::size_t i = 0; i < idx->size(); ++i) out.row((*idx)[i]) = v.value().row(i);
        g = g || v.needs_grad();
    }
    Tape<T>& t = *parts.front().first.tape;
    return t.push(std::move(out), g, [parts](const Mat<T>& go) {
        for (const auto& [v, idx] : parts) {
            if (!v.needs_grad()) continue;
            Mat<T>& acc = v.tape->grad(v.id);
            for (std::size_t i = 0; i < idx->size(); ++i) acc.row(i) += go.row((*idx)[i]);
        }
    });
}

template <class T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
    require(a.rows() == b.rows(), "concat_cols: row mismatch");
    Mat<T> out(a.rows(), a.cols() + b.cols());
    out << a.value(), b.value();
    const long ca = a.cols(), cb = b.cols();
    return a.tape->push(std::move(out), a.needs_grad() || b.needs_grad(), [a, b, ca, cb](const Mat<T>& go) {
        if (a.needs_grad()) a.tape->grad(a.id) += go.leftCols(ca);
        if (b.needs_grad()) b.tape->grad(b.id) += go.rightCols(cb);
    });
}

template <class T>
Var<T> slice_cols(Var<T> x, long start, long n) {
    require(start >= 0 && start + n <= x.cols(), "slice_cols: range out of bounds");
    Mat<T> out = x.value().middleCols(start, n);
    return x.tape->push(std::move(out), x.needs_grad(), [x, start, n](const Mat<T>& go) {
        x.tape->grad(x.id).middleCols(start, n) += go;
    });
}

// ------------------------------------------------------------------- attention

/// Rotates adjacent pairs (2p, 2p+1) of every head by angle[r, p]. `angles` is (rows x head_dim/2).
template <class T>
Var<T> rotary(Var<T> x, const Mat<T>& angles, long n_heads) {
    const long rows = x.rows();
    require(x.cols() % n_heads == 0, "rotary: width not divisible by head count");
    const long hd = x.cols() / n_heads;
    require(hd % 2 == 0 && angles.rows() == rows && angles.cols() == hd / 2, "rotary: angle table shape mismatch");
    Mat<T> c = angles.array().cos().matrix();
    Mat<T> s = angles.array().sin().matrix();
    auto apply = [rows, n_heads, hd](const Mat<T>& in, const Mat<T>& cs, const Mat<T>& sn, T sign) {
        Mat<T> out(in.rows(), in.cols());
        for (long r = 0; r < rows; ++r)
            for (long h = 0; h < n_heads; ++h)
                for (long p = 0; p < hd / 2; ++p) {
                    const long j = h * hd + 2 * p;
                    const T a = in(r, j), b = in(r, j + 1);
                    const T cc = cs(r, p), ss = sign * sn(r, p);
                    out(r, j) = a * cc - b * ss;
                    out(r, j + 1) = a * ss + b * cc;
                }
        return out;
    };
    Mat<T> out = apply(x.value(), c, s, T(1));
    return x.tape->push(std::move(out), x.needs_grad(),
                        [x, c, s, apply](const Mat<T>& go) { x.tape->grad(x.id) += apply(go, c, s, T(-1)); });
}

/// Multi-head softmax attention. Rows are tokens; tokens attend only within their segment
/// [segments[i], segments[i+1]).
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, long n_heads, std::shared_ptr<const std::vector<long>> segments) {
    const long d = q.cols();
    require(k.cols() == d && v.cols() == d && q.rows() == k.rows() && q.rows() == v.rows(),
            "attention: q/k/v shape mismatch");
    require(d % n_heads == 0, "attention: width not divisible by head count");
    require(segments->size() >= 2 && segments->back() == q.rows(), "attention: segments must cover all rows");
    const long hd = d / n_heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(hd));
    const long nseg = static_cast<long>(segments->size()) - 1;
    auto probs = std::make_shared<std::vector<Mat<T>>>(nseg * n_heads);
    Mat<T> out(q.rows(), d);
    for (long sgi = 0; sgi < nseg; ++sgi) {
        const long s0 = (*segments)[sgi], n = (*segments)[sgi + 1] - s0;
        for (long h = 0; h < n_heads; ++h) {
            Mat<T> logits = (q.value().block(s0, h * hd, n, hd) * k.value().block(s0, h * hd, n, hd).transpose()) * sc;
            for (long r = 0; r < n; ++r) {
                const T m = logits.row(r).maxCoeff();
                logits.row(r) = (logits.row(r).array() - m).exp().matrix();
                logits.row(r) /= logits.row(r).sum();
            }
            out.block(s0, h * hd, n, hd).noalias() = logits * v.value().block(s0, h * hd, n, hd);
            (*probs)[sgi * n_heads + h] = std::move(logits);
        }
    }
    const bool g = q.needs_grad() || k.needs_grad() || v.needs_grad();
    if (!q.tape->recording() || !g) probs.reset();
    return q.tape->push(std::move(out), g, [q, k, v, n_heads, hd, sc, segments, probs, nseg](const Mat<T>& go) {
        Tape<T>& t = *q.tape;
        for (long sgi = 0; sgi < nseg; ++sgi) {
            const long s0 = (*segments)[sgi], n = (*segments)[sgi + 1] - s0;
            for (long h = 0; h < n_heads; ++h) {
                const Mat<T>& p = (*probs)[sgi * n_heads + h];
                const Mat<T> gout = go.block(s0, h * hd, n, hd);
                if (v.needs_grad()) t.grad(v.id).block(s0, h * hd, n, hd).noalias() += p.transpose() * gout;
                Mat<T> dp = gout * v.value().block(s0, h * hd, n, hd).transpose();
                Vec<T> rowdot = dp.cwiseProduct(p).rowwise().sum();
                Mat<T> ds = p.cwiseProduct(dp.colwise() - rowdot) * sc;
                if (q.needs_grad()) t.grad(q.id).block(s0, h * hd, n, hd).noalias() += ds * k.value().block(s0, h * hd, n, hd);
                if (k.needs_grad())
                    t.grad(k.id).block(s0, h * hd, n, hd).noalias() += ds.transpose() * q.value().block(s0, h * hd, n, hd);
            }
        }
    });
}

// ------------------------------------------------------------------- losses

/// sum_r w[r] * ||pred_r - target_r||^2 / rows, as a 1 x 1 value.
template <class T>
Var<T> weighted_sq_error(Var<T> pred, const Mat<T>& target, const Vec<T>& w) {
    require(pred.rows() == target.rows() && pred.cols() == target.cols(), "weighted_sq_error: shape mismatch");
    require(w.size() == pred.rows(), "weighted_sq_error: weight count mismatch");
    Mat<T> diff = pred.value() - target;
    const T n = static_cast<T>(pred.rows());
    Mat<T> out(1, 1);
    out(0, 0) = (diff.rowwise().squaredNorm().cwiseProduct(w)).sum() / n;
    return pred.tape->push(std::move(out), pred.needs_grad(), [pred, diff, w, n](const Mat<T>& go) {
        pred.tape->grad(pred.id) += (w.asDiagonal() * diff) * (T(2) * go(0, 0) / n);
    });
}

template <class T>
Var<T> sum(Var<T> x) {
    Mat<T> out(1, 1);
    out(0, 0) = x.value().sum();
    return x.tape->push(std::move(out), x.needs_grad(), [x](const Mat<T>& go) {
        x.tape->grad(x.id).array() += go(0, 0);
    });
}

}  // namespace dde::ad
