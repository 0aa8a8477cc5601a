#include "hybridlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace hlm {

std::string shape_str(const std::vector<size_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

static size_t numel_of(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

Tensor Tensor::make(std::vector<size_t> shape, std::vector<double> data, bool requires_grad) {
    if (data.size() != numel_of(shape))
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::zeros(std::vector<size_t> shape, bool requires_grad) {
    size_t n = numel_of(shape);
    return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<size_t> shape, double v, bool requires_grad) {
    size_t n = numel_of(shape);
    return make(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::randn(Rng& rng, std::vector<size_t> shape, double sc, bool requires_grad) {
    size_t n = numel_of(shape);
    std::vector<double> d(n);
    for (auto& x : d) x = rng.normal() * sc;
    return make(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return make({1}, {v}, requires_grad);
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
}

// ---------------------------------------------------------------------------

namespace {

bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (auto* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

Tensor make_op(std::vector<size_t> shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> bw) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool rg = false;
    for (auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(bw);
    }
    return Tensor(n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](TensorNode& n) {
        for (int p = 0; p < 2; ++p) {
            auto& par = *n.parents[p];
            if (!par.requires_grad) continue;
            par.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) par.grad[i] += n.grad[i];
        }
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (x.ndim() != 2 || bias.ndim() != 1 || x.dim(1) != bias.dim(0))
        throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    size_t T = x.dim(0), d = x.dim(1);
    std::vector<double> v(x.numel());
    for (size_t t = 0; t < T; ++t)
        for (size_t j = 0; j < d; ++j) v[t * d + j] = x.data()[t * d + j] + bias.data()[j];
    return make_op(x.shape(), std::move(v), {x, bias}, [T, d](TensorNode& n) {
        auto& px = *n.parents[0];
        auto& pb = *n.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) px.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t j = 0; j < d; ++j) pb.grad[j] += n.grad[t * d + j];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](TensorNode& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
    return make_op(a.shape(), std::move(v), {a}, [c](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
    });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
    std::vector<double> v(m * nn, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (size_t i = 0; i < m; ++i) {
        double* out = v.data() + i * nn;
        for (size_t p = 0; p < k; ++p) {
            double av = A[i * k + p];
            if (av == 0.0) continue;
            const double* brow = B + p * nn;
            for (size_t j = 0; j < nn; ++j) out[j] += av * brow[j];
        }
    }
    return make_op({m, nn}, std::move(v), {a, b}, [m, k, nn](TensorNode& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();  // dA = dC * B^T
            for (size_t i = 0; i < m; ++i)
                for (size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* g = n.grad.data() + i * nn;
                    const double* brow = pb.value.data() + p * nn;
                    for (size_t j = 0; j < nn; ++j) s += g[j] * brow[j];
                    pa.grad[i * k + p] += s;
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();  // dB = A^T * dC
            for (size_t i = 0; i < m; ++i) {
                const double* g = n.grad.data() + i * nn;
                for (size_t p = 0; p < k; ++p) {
                    double av = pa.value[i * k + p];
                    if (av == 0.0) continue;
                    double* brow = pb.grad.data() + p * nn;
                    for (size_t j = 0; j < nn; ++j) brow[j] += av * g[j];
                }
            }
        }
    });
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(a.shape()));
    size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> v(r * c);
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) v[j * r + i] = a.data()[i * c + j];
    return make_op({c, r}, std::move(v), {a}, [r, c](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < c; ++j) p.grad[i * c + j] += n.grad[j * r + i];
    });
}

Tensor reshape(const Tensor& a, std::vector<size_t> shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
    return make_op(std::move(shape), a.data(), {a}, [](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    size_t cols = parts[0].cols(), rows = 0;
    for (auto& p : parts) {
        if (p.ndim() != 2 || p.cols() != cols)
            throw ShapeError("concat_rows: column mismatch at " + shape_str(p.shape()));
        rows += p.rows();
    }
    std::vector<double> v;
    v.reserve(rows * cols);
    std::vector<Tensor> ps = parts;
    for (auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
    return make_op({rows, cols}, std::move(v), std::move(ps), [](TensorNode& n) {
        size_t off = 0;
        for (auto& pp : n.parents) {
            auto& p = *pp;
            size_t len = p.value.size();
            if (p.requires_grad) {
                p.ensure_grad();
                for (size_t i = 0; i < len; ++i) p.grad[i] += n.grad[off + i];
            }
            off += len;
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    size_t rows = parts[0].rows(), cols = 0;
    for (auto& p : parts) {
        if (p.ndim() != 2 || p.rows() != rows)
            throw ShapeError("concat_cols: row mismatch at " + shape_str(p.shape()));
        cols += p.cols();
    }
    std::vector<double> v(rows * cols);
    size_t off = 0;
    for (auto& p : parts) {
        size_t pc = p.cols();
        for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < pc; ++j) v[r * cols + off + j] = p.data()[r * pc + j];
        off += pc;
    }
    return make_op({rows, cols}, std::move(v), parts, [rows, cols](TensorNode& n) {
        size_t off = 0;
        for (auto& pp : n.parents) {
            auto& p = *pp;
            size_t pc = p.shape[1];
            if (p.requires_grad) {
                p.ensure_grad();
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < pc; ++j)
                        p.grad[r * pc + j] += n.grad[r * cols + off + j];
            }
            off += pc;
        }
    });
}

Tensor slice_rows(const Tensor& a, size_t start, size_t len) {
    if (a.ndim() != 2 || start + len > a.rows())
        throw ShapeError("slice_rows: [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of " + shape_str(a.shape()));
    size_t c = a.cols();
    std::vector<double> v(a.data().begin() + start * c, a.data().begin() + (start + len) * c);
    return make_op({len, c}, std::move(v), {a}, [start, c](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[start * c + i] += n.grad[i];
    });
}

Tensor slice_cols(const Tensor& a, size_t start, size_t len) {
    if (a.ndim() != 2 || start + len > a.cols())
        throw ShapeError("slice_cols: [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of " + shape_str(a.shape()));
    size_t r = a.rows(), c = a.cols();
    std::vector<double> v(r * len);
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < len; ++j) v[i * len + j] = a.data()[i * c + start + j];
    return make_op({r, len}, std::move(v), {a}, [start, r, c, len](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < len; ++j) p.grad[i * c + start + j] += n.grad[i * len + j];
    });
}

static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor silu(const Tensor& a) {
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * sigmoid(a.data()[i]);
    return make_op(a.shape(), std::move(v), {a}, [](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double x = p.value[i], s = sigmoid(x);
            p.grad[i] += n.grad[i] * (s + x * s * (1.0 - s));
        }
    });
}

Tensor gelu(const Tensor& a) {
    // exact erf form
    std::vector<double> v(a.numel());
    const double inv_sqrt2 = 0.70710678118654752440;
    for (size_t i = 0; i < v.size(); ++i) {
        double x = a.data()[i];
        v[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    return make_op(a.shape(), std::move(v), {a}, [inv_sqrt2](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        const double inv_sqrt2pi = 0.39894228040143267794;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double x = p.value[i];
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            p.grad[i] += n.grad[i] * (cdf + x * pdf);
        }
    });
}

Tensor softplus(const Tensor& a) {
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) {
        double x = a.data()[i];
        v[i] = x > 30.0 ? x : std::log1p(std::exp(x));
    }
    return make_op(a.shape(), std::move(v), {a}, [](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
            p.grad[i] += n.grad[i] * sigmoid(p.value[i]);
    });
}

Tensor exp_(const Tensor& a) {
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.data()[i]);
    return make_op(a.shape(), std::move(v), {a}, [](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * n.value[i];
    });
}

Tensor log_(const Tensor& a) {
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::log(a.data()[i]);
    return make_op(a.shape(), std::move(v), {a}, [](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] / p.value[i];
    });
}

Tensor reduce_sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return make_op({1}, {s}, {a}, [](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[0];
    });
}

Tensor reduce_mean(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    double inv = 1.0 / double(a.numel());
    return make_op({1}, {s * inv}, {a}, [inv](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[0] * inv;
    });
}

Tensor softmax_lastdim(const Tensor& a) {
    if (a.ndim() == 0 || a.shape().back() < 1)
        throw ShapeError("softmax_lastdim: empty last dimension");
    size_t d = a.shape().back();
    size_t rows = a.numel() / d;
    std::vector<double> v(a.numel());
    for (size_t r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * d;
        double mx = x[0];
        for (size_t j = 0; j < d; ++j) {
            if (!std::isfinite(x[j]))
                throw std::runtime_error("softmax_lastdim: non-finite input");
            mx = std::max(mx, x[j]);
        }
        double z = 0.0;
        for (size_t j = 0; j < d; ++j) z += (v[r * d + j] = std::exp(x[j] - mx));
        for (size_t j = 0; j < d; ++j) v[r * d + j] /= z;
    }
    return make_op(a.shape(), std::move(v), {a}, [d, rows](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const double* y = n.value.data() + r * d;
            const double* g = n.grad.data() + r * d;
            double dot = 0.0;
            for (size_t j = 0; j < d; ++j) dot += g[j] * y[j];
            for (size_t j = 0; j < d; ++j) p.grad[r * d + j] += y[j] * (g[j] - dot);
        }
    });
}

Tensor causal_softmax(const Tensor& scores, size_t offset) {
    if (scores.ndim() != 2)
        throw ShapeError("causal_softmax: expected 2-D scores, got " + shape_str(scores.shape()));
    size_t Tq = scores.dim(0), Tk = scores.dim(1);
    std::vector<double> v(Tq * Tk, 0.0);
    for (size_t i = 0; i < Tq; ++i) {
        size_t lim = std::min(Tk, offset + i + 1);
        const double* x = scores.data().data() + i * Tk;
        double mx = x[0];
        for (size_t j = 0; j < lim; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (size_t j = 0; j < lim; ++j) z += (v[i * Tk + j] = std::exp(x[j] - mx));
        for (size_t j = 0; j < lim; ++j) v[i * Tk + j] /= z;
    }
    return make_op(scores.shape(), std::move(v), {scores}, [Tq, Tk, offset](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < Tq; ++i) {
            size_t lim = std::min(Tk, offset + i + 1);
            const double* y = n.value.data() + i * Tk;
            const double* g = n.grad.data() + i * Tk;
            double dot = 0.0;
            for (size_t j = 0; j < lim; ++j) dot += g[j] * y[j];
            for (size_t j = 0; j < lim; ++j) p.grad[i * Tk + j] += y[j] * (g[j] - dot);
        }
    });
}

Tensor rmsnorm_op(const Tensor& x, const Tensor& gain, double eps) {
    if (x.shape().back() != gain.dim(0))
        throw ShapeError("rmsnorm: last dim " + shape_str(x.shape()) + " vs gain " +
                         shape_str(gain.shape()));
    size_t d = x.shape().back();
    size_t rows = x.numel() / d;
    std::vector<double> v(x.numel());
    std::vector<double> rinv(rows);
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double ms = 0.0;
        for (size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms = ms / double(d) + eps;
        rinv[r] = 1.0 / std::sqrt(ms);
        for (size_t j = 0; j < d; ++j) v[r * d + j] = xr[j] * gain.data()[j] * rinv[r];
    }
    return make_op(x.shape(), std::move(v), {x, gain},
                   [d, rows, rinv = std::move(rinv)](TensorNode& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        for (size_t r = 0; r < rows; ++r) {
            const double* xr = px.value.data() + r * d;
            const double* g = n.grad.data() + r * d;
            const double* gain = pg.value.data();
            double ri = rinv[r];
            if (px.requires_grad) {
                px.ensure_grad();
                // y_j = x_j * gain_j * ri, ri = (mean(x^2)+eps)^{-1/2}
                double dot = 0.0;
                for (size_t j = 0; j < d; ++j) dot += g[j] * gain[j] * xr[j];
                double coef = dot * ri * ri * ri / double(d);
                for (size_t j = 0; j < d; ++j)
                    px.grad[r * d + j] += g[j] * gain[j] * ri - coef * xr[j];
            }
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (size_t j = 0; j < d; ++j) pg.grad[j] += g[j] * xr[j] * ri;
            }
        }
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask) {
    if (logits.ndim() != 2 || targets.size() != logits.dim(0))
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    size_t T = logits.dim(0), V = logits.dim(1);
    if (!mask.empty() && mask.size() != T)
        throw ShapeError("cross_entropy: mask length mismatch");
    for (size_t t = 0; t < T; ++t) {
        if (!mask.empty() && !mask[t]) continue;
        if (targets[t] < 0 || size_t(targets[t]) >= V)
            throw ShapeError("cross_entropy: target " + std::to_string(targets[t]) +
                             " outside vocab " + std::to_string(V));
    }
    size_t count = 0;
    double loss = 0.0;
    std::vector<double> lse(T);
    for (size_t t = 0; t < T; ++t) {
        if (!mask.empty() && !mask[t]) continue;
        const double* x = logits.data().data() + t * V;
        double mx = x[0];
        for (size_t j = 0; j < V; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (size_t j = 0; j < V; ++j) z += std::exp(x[j] - mx);
        lse[t] = mx + std::log(z);
        loss += lse[t] - x[targets[t]];
        ++count;
    }
    if (count == 0) throw ShapeError("cross_entropy: empty mask");
    loss /= double(count);
    return make_op({1}, {loss}, {logits},
                   [T, V, targets, mask, count, lse = std::move(lse)](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        double g = n.grad[0] / double(count);
        for (size_t t = 0; t < T; ++t) {
            if (!mask.empty() && !mask[t]) continue;
            const double* x = p.value.data() + t * V;
            for (size_t j = 0; j < V; ++j)
                p.grad[t * V + j] += g * std::exp(x[j] - lse[t]);
            p.grad[t * V + targets[t]] -= g;
        }
    });
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding_rows: table must be 2-D");
    size_t V = table.dim(0), d = table.dim(1);
    std::vector<double> v(ids.size() * d);
    for (size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || size_t(ids[t]) >= V)
            throw ShapeError("embedding_rows: id " + std::to_string(ids[t]) +
                             " outside vocab " + std::to_string(V));
        std::copy_n(table.data().begin() + size_t(ids[t]) * d, d, v.begin() + t * d);
    }
    return make_op({ids.size(), d}, std::move(v), {table}, [ids, d](TensorNode& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (size_t t = 0; t < ids.size(); ++t)
            for (size_t j = 0; j < d; ++j)
                p.grad[size_t(ids[t]) * d + j] += n.grad[t * d + j];
    });
}

Tensor row_scatter(const Tensor& base, const Tensor& patch, const std::vector<size_t>& rows) {
    if (base.ndim() != 2 || patch.ndim() != 2 || base.cols() != patch.cols() ||
        patch.rows() != rows.size())
        throw ShapeError("row_scatter: base " + shape_str(base.shape()) + " patch " +
                         shape_str(patch.shape()));
    size_t d = base.cols();
    std::vector<double> v = base.data();
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= base.rows()) throw ShapeError("row_scatter: row index out of range");
        std::copy_n(patch.data().begin() + i * d, d, v.begin() + rows[i] * d);
    }
    return make_op(base.shape(), std::move(v), {base, patch}, [rows, d](TensorNode& n) {
        auto& pb = *n.parents[0];
        auto& pp = *n.parents[1];
        if (pb.requires_grad) {
            pb.ensure_grad();
            std::vector<uint8_t> over(pb.shape[0], 0);
            for (size_t r : rows) over[r] = 1;
            for (size_t r = 0; r < pb.shape[0]; ++r) {
                if (over[r]) continue;
                for (size_t j = 0; j < d; ++j) pb.grad[r * d + j] += n.grad[r * d + j];
            }
        }
        if (pp.requires_grad) {
            pp.ensure_grad();
            for (size_t i = 0; i < rows.size(); ++i)
                for (size_t j = 0; j < d; ++j)
                    pp.grad[i * d + j] += n.grad[rows[i] * d + j];
        }
    });
}

Tensor col_scale(const Tensor& x, const Tensor& v) {
    if (x.ndim() != 2 || v.ndim() != 1 || x.dim(1) != v.dim(0))
        throw ShapeError("col_scale: " + shape_str(x.shape()) + " * " + shape_str(v.shape()));
    size_t T = x.dim(0), d = x.dim(1);
    std::vector<double> out(T * d);
    for (size_t t = 0; t < T; ++t)
        for (size_t j = 0; j < d; ++j) out[t * d + j] = x.data()[t * d + j] * v.data()[j];
    return make_op(x.shape(), std::move(out), {x, v}, [T, d](TensorNode& n) {
        auto& px = *n.parents[0];
        auto& pv = *n.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t j = 0; j < d; ++j)
                    px.grad[t * d + j] += n.grad[t * d + j] * pv.value[j];
        }
        if (pv.requires_grad) {
            pv.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t j = 0; j < d; ++j)
                    pv.grad[j] += n.grad[t * d + j] * px.value[t * d + j];
        }
    });
}

Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("mul_scalar_t: scalar operand has " +
                                         std::to_string(s.numel()) + " elements");
    double sv = s.data()[0];
    std::vector<double> out(x.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
    return make_op(x.shape(), std::move(out), {x, s}, [](TensorNode& n) {
        auto& px = *n.parents[0];
        auto& ps = *n.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                px.grad[i] += n.grad[i] * ps.value[0];
        }
        if (ps.requires_grad) {
            ps.ensure_grad();
            double acc = 0.0;
            for (size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * px.value[i];
            ps.grad[0] += acc;
        }
    });
}

Tensor outer_mul(const Tensor& u, const Tensor& A) {
    if (u.ndim() != 2 || A.ndim() != 2 || u.dim(1) != A.dim(0))
        throw ShapeError("outer_mul: " + shape_str(u.shape()) + " with " + shape_str(A.shape()));
    size_t T = u.dim(0), C = u.dim(1), S = A.dim(1);
    std::vector<double> v(T * C * S);
    for (size_t t = 0; t < T; ++t)
        for (size_t c = 0; c < C; ++c) {
            double uv = u.data()[t * C + c];
            for (size_t s = 0; s < S; ++s) v[(t * C + c) * S + s] = uv * A.data()[c * S + s];
        }
    return make_op({T, C * S}, std::move(v), {u, A}, [T, C, S](TensorNode& n) {
        auto& pu = *n.parents[0];
        auto& pa = *n.parents[1];
        if (pu.requires_grad) {
            pu.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t c = 0; c < C; ++c) {
                    double s0 = 0.0;
                    for (size_t s = 0; s < S; ++s)
                        s0 += n.grad[(t * C + c) * S + s] * pa.value[c * S + s];
                    pu.grad[t * C + c] += s0;
                }
        }
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t c = 0; c < C; ++c) {
                    double uv = pu.value[t * C + c];
                    for (size_t s = 0; s < S; ++s)
                        pa.grad[c * S + s] += n.grad[(t * C + c) * S + s] * uv;
                }
        }
    });
}

Tensor chan_state_mul(const Tensor& u, const Tensor& B) {
    if (u.ndim() != 2 || B.ndim() != 2 || u.dim(0) != B.dim(0))
        throw ShapeError("chan_state_mul: " + shape_str(u.shape()) + " with " +
                         shape_str(B.shape()));
    size_t T = u.dim(0), C = u.dim(1), S = B.dim(1);
    std::vector<double> v(T * C * S);
    for (size_t t = 0; t < T; ++t)
        for (size_t c = 0; c < C; ++c) {
            double uv = u.data()[t * C + c];
            for (size_t s = 0; s < S; ++s) v[(t * C + c) * S + s] = uv * B.data()[t * S + s];
        }
    return make_op({T, C * S}, std::move(v), {u, B}, [T, C, S](TensorNode& n) {
        auto& pu = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pu.requires_grad) {
            pu.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t c = 0; c < C; ++c) {
                    double s0 = 0.0;
                    for (size_t s = 0; s < S; ++s)
                        s0 += n.grad[(t * C + c) * S + s] * pb.value[t * S + s];
                    pu.grad[t * C + c] += s0;
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t c = 0; c < C; ++c) {
                    double uv = pu.value[t * C + c];
                    for (size_t s = 0; s < S; ++s)
                        pb.grad[t * S + s] += n.grad[(t * C + c) * S + s] * uv;
                }
        }
    });
}

Tensor state_readout(const Tensor& h, const Tensor& C, size_t d_state) {
    if (h.ndim() != 2 || C.ndim() != 2 || h.dim(0) != C.dim(0) || C.dim(1) != d_state ||
        h.dim(1) % d_state != 0)
        throw ShapeError("state_readout: h " + shape_str(h.shape()) + " C " +
                         shape_str(C.shape()));
    size_t T = h.dim(0), Cn = h.dim(1) / d_state, S = d_state;
    std::vector<double> v(T * Cn, 0.0);
    for (size_t t = 0; t < T; ++t)
        for (size_t c = 0; c < Cn; ++c) {
            double s0 = 0.0;
            for (size_t s = 0; s < S; ++s)
                s0 += h.data()[(t * Cn + c) * S + s] * C.data()[t * S + s];
            v[t * Cn + c] = s0;
        }
    return make_op({T, Cn}, std::move(v), {h, C}, [T, Cn, S](TensorNode& n) {
        auto& ph = *n.parents[0];
        auto& pc = *n.parents[1];
        if (ph.requires_grad) {
            ph.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t c = 0; c < Cn; ++c) {
                    double g = n.grad[t * Cn + c];
                    for (size_t s = 0; s < S; ++s)
                        ph.grad[(t * Cn + c) * S + s] += g * pc.value[t * S + s];
                }
        }
        if (pc.requires_grad) {
            pc.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t c = 0; c < Cn; ++c) {
                    double g = n.grad[t * Cn + c];
                    for (size_t s = 0; s < S; ++s)
                        pc.grad[t * S + s] += g * ph.value[(t * Cn + c) * S + s];
                }
        }
    });
}

Tensor linear_scan(const Tensor& decay, const Tensor& inc, const std::vector<double>* h0) {
    check_same_shape(decay, inc, "linear_scan");
    if (decay.ndim() != 2) throw ShapeError("linear_scan: expected [T,M]");
    size_t T = decay.dim(0), M = decay.dim(1);
    if (h0 && h0->size() != M) throw ShapeError("linear_scan: h0 length mismatch");
    std::vector<double> v(T * M);
    for (size_t m = 0; m < M; ++m) {
        double h = h0 ? (*h0)[m] : 0.0;
        for (size_t t = 0; t < T; ++t) {
            h = decay.data()[t * M + m] * h + inc.data()[t * M + m];
            v[t * M + m] = h;
        }
    }
    std::vector<double> init(h0 ? *h0 : std::vector<double>(M, 0.0));
    return make_op({T, M}, std::move(v), {decay, inc},
                   [T, M, init = std::move(init)](TensorNode& n) {
        auto& pd = *n.parents[0];
        auto& pi = *n.parents[1];
        pd.ensure_grad();
        pi.ensure_grad();
        // adjoint recurrence: g_t = dh_t + decay_{t+1} * g_{t+1}
        for (size_t m = 0; m < M; ++m) {
            double g = 0.0;  // accumulated dL/dh_t
            for (size_t t = T; t-- > 0;) {
                g = g * (t + 1 < T ? pd.value[(t + 1) * M + m] : 0.0) + n.grad[t * M + m];
                if (pi.requires_grad) pi.grad[t * M + m] += g;
                if (pd.requires_grad) {
                    double hprev = t > 0 ? n.value[(t - 1) * M + m] : init[m];
                    pd.grad[t * M + m] += g * hprev;
                }
            }
        }
    });
}

Tensor linear_scan_parallel(const Tensor& decay, const Tensor& inc,
                            const std::vector<double>* h0) {
    check_same_shape(decay, inc, "linear_scan_parallel");
    if (decay.ndim() != 2) throw ShapeError("linear_scan_parallel: expected [T,M]");
    size_t T = decay.dim(0), M = decay.dim(1);
    if (h0 && h0->size() != M) throw ShapeError("linear_scan_parallel: h0 length mismatch");
    // Blelloch work-efficient inclusive scan over the monoid
    //   (a2,b2) o (a1,b1) = (a1*a2, a2*b1 + b2)
    // run per state channel on a padded power-of-two buffer.
    size_t P = 1;
    while (P < T) P <<= 1;
    std::vector<double> va(P), vb(P);
    std::vector<double> out(T * M);
    for (size_t m = 0; m < M; ++m) {
        for (size_t t = 0; t < T; ++t) {
            va[t] = decay.data()[t * M + m];
            vb[t] = inc.data()[t * M + m];
        }
        for (size_t t = T; t < P; ++t) { va[t] = 1.0; vb[t] = 0.0; }
        // up-sweep
        for (size_t stride = 1; stride < P; stride <<= 1)
            for (size_t i = 2 * stride - 1; i < P; i += 2 * stride) {
                size_t l = i - stride;
                vb[i] = va[i] * vb[l] + vb[i];
                va[i] = va[l] * va[i];
            }
        // down-sweep with identity (1,0), producing an exclusive scan
        va[P - 1] = 1.0; vb[P - 1] = 0.0;
        for (size_t stride = P >> 1; stride >= 1; stride >>= 1) {
            for (size_t i = 2 * stride - 1; i < P; i += 2 * stride) {
                size_t l = i - stride;
                double la = va[l], lb = vb[l];
                va[l] = va[i]; vb[l] = vb[i];
                // combine exclusive-prefix (at i) with left subtree aggregate
                vb[i] = la * vb[i] + lb;
                va[i] = va[i] * la;
            }
            if (stride == 1) break;
        }
        // inclusive value at t: own element applied to exclusive prefix
        double init = h0 ? (*h0)[m] : 0.0;
        for (size_t t = 0; t < T; ++t) {
            double a = decay.data()[t * M + m];
            double b = inc.data()[t * M + m];
            // exclusive prefix (va[t], vb[t]) maps h_{-1} -> h_{t-1}
            double hprev = va[t] * init + vb[t];
            out[t * M + m] = a * hprev + b;
        }
    }
    return Tensor::make({T, M}, std::move(out));
}

Tensor conv_causal(const Tensor& x, const Tensor& w, const std::vector<double>* init_window) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0))
        throw ShapeError("conv_causal: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
    size_t T = x.dim(0), C = x.dim(1), K = w.dim(1);
    if (init_window && init_window->size() != (K - 1) * C)
        throw ShapeError("conv_causal: init window size mismatch");
    std::vector<double> v(T * C, 0.0);
    auto x_at = [&](long t, size_t c) -> double {
        if (t >= 0) return x.data()[size_t(t) * C + c];
        if (!init_window) return 0.0;
        long j = t + long(K) - 1;  // t in [-(K-1),-1] -> j in [0,K-2]
        return (*init_window)[size_t(j) * C + c];
    };
    for (size_t t = 0; t < T; ++t)
        for (size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (size_t k = 0; k < K; ++k)
                s += w.data()[c * K + k] * x_at(long(t) - long(K) + 1 + long(k), c);
            v[t * C + c] = s;
        }
    std::vector<double> win(init_window ? *init_window : std::vector<double>((K - 1) * C, 0.0));
    return make_op({T, C}, std::move(v), {x, w}, [T, C, K, win = std::move(win)](TensorNode& n) {
        auto& px = *n.parents[0];
        auto& pw = *n.parents[1];
        auto x_at = [&](long t, size_t c) -> double {
            if (t >= 0) return px.value[size_t(t) * C + c];
            long j = t + long(K) - 1;
            return win[size_t(j) * C + c];
        };
        if (px.requires_grad) {
            px.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t c = 0; c < C; ++c) {
                    double g = n.grad[t * C + c];
                    for (size_t k = 0; k < K; ++k) {
                        long src = long(t) - long(K) + 1 + long(k);
                        if (src >= 0) px.grad[size_t(src) * C + c] += g * pw.value[c * K + k];
                    }
                }
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            for (size_t t = 0; t < T; ++t)
                for (size_t c = 0; c < C; ++c) {
                    double g = n.grad[t * C + c];
                    for (size_t k = 0; k < K; ++k)
                        pw.grad[c * K + k] += g * x_at(long(t) - long(K) + 1 + long(k), c);
                }
        }
    });
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    // iterative DFS topological order
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame { TensorNode* n; size_t next; };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    auto* ln = loss.node().get();
    ln->ensure_grad();
    ln->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

} // namespace hlm
