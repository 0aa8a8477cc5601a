#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "hybridlm/rng.hpp"

namespace hlm {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string shape_str(const std::vector<size_t>& s);

// One recorded node of the computation graph. The graph doubles as the tape:
// backward() linearizes it topologically and replays adjoints in reverse,
// visiting each node exactly once.
struct TensorNode {
    std::vector<size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;      // allocated on demand, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // pulls this->grad into parents

    size_t numel() const {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return n;
    }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Value-semantic handle over a graph node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor make(std::vector<size_t> shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<size_t> shape, double v, bool requires_grad = false);
    static Tensor randn(Rng& rng, std::vector<size_t> shape, double scale,
                        bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t numel() const { return node_->numel(); }
    size_t dim(size_t i) const { return node_->shape[i]; }
    size_t ndim() const { return node_->shape.size(); }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& mutable_data() { return node_->value; }
    const std::vector<double>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
    double item() const;
    std::shared_ptr<TensorNode> node() const { return node_; }

    // rows/cols for the common 2-D case
    size_t rows() const { return node_->shape[0]; }
    size_t cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }

private:
    std::shared_ptr<TensorNode> node_;
};

// ---- primitives (all register adjoints when an input requires grad) ----

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_bias(const Tensor& x, const Tensor& bias);  // [T,d] + [d]
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);       // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                     // 2-D
Tensor reshape(const Tensor& a, std::vector<size_t> shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, size_t start, size_t len);
Tensor slice_cols(const Tensor& a, size_t start, size_t len);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp_(const Tensor& a);
Tensor log_(const Tensor& a);
Tensor reduce_sum(const Tensor& a);                    // -> scalar
Tensor reduce_mean(const Tensor& a);                   // -> scalar
Tensor softmax_lastdim(const Tensor& a);
// scores [Tq,Tk]; query i may attend keys j <= offset + i
Tensor causal_softmax(const Tensor& scores, size_t offset);
Tensor rmsnorm_op(const Tensor& x, const Tensor& gain, double eps);
// mean cross entropy over positions where mask!=0 (empty mask = all positions)
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask = {});
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
// copy of base with base[rows[i],:] replaced by patch[i,:]
Tensor row_scatter(const Tensor& base, const Tensor& patch,
                   const std::vector<size_t>& rows);

Tensor col_scale(const Tensor& x, const Tensor& v);    // [T,d] * [d] per column
Tensor mul_scalar_t(const Tensor& x, const Tensor& s); // x * scalar tensor

// SSM helpers.
// outer_mul:   out[t, c*S+s] = u[t,c] * A[c,s]
Tensor outer_mul(const Tensor& u, const Tensor& A);
// chan_state_mul: out[t, c*S+s] = u[t,c] * B[t,s]
Tensor chan_state_mul(const Tensor& u, const Tensor& B);
// state_readout:  out[t,c] = sum_s h[t, c*S+s] * C[t,s]
Tensor state_readout(const Tensor& h, const Tensor& C, size_t d_state);
// h[t] = decay[t] * h[t-1] + inc[t], h[-1] = h0 (or zeros)
Tensor linear_scan(const Tensor& decay, const Tensor& inc,
                   const std::vector<double>* h0 = nullptr);
// same recurrence evaluated with a Blelloch-style associative scan (no grad path)
Tensor linear_scan_parallel(const Tensor& decay, const Tensor& inc,
                            const std::vector<double>* h0 = nullptr);
// depthwise causal conv, kernel w[C,K]; init_window: last K-1 inputs before x
Tensor conv_causal(const Tensor& x, const Tensor& w,
                   const std::vector<double>* init_window = nullptr);

// reverse-mode sweep from a scalar loss
void backward(const Tensor& loss);

} // namespace hlm
