#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxdet/rng.hpp"

namespace ctxdet {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

/// Dense row-major double tensor with reverse-mode gradients.
///
/// Tensor is a cheap handle onto a shared node; ops build a DAG of nodes and
/// backward() walks it in reverse topological order. Leaves created with
/// requires_grad accumulate into their grad buffer. All ops are pure
/// functions of their inputs and deterministic.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::int64_t numel() const;
    std::int64_t dim(std::size_t i) const;
    std::size_t rank() const;
    bool requires_grad() const;

    std::span<const double> values() const;
    std::span<double> mutable_values();
    std::span<const double> grad() const;
    std::span<double> mutable_grad();

    double item() const;
    double at(std::initializer_list<std::int64_t> idx) const;

    void zero_grad();
    /// Reverse-mode sweep from a scalar (numel == 1) root.
    void backward();

    Tensor detach() const;

    TensorImpl* impl() const { return impl_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;

    friend Tensor make_node(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                            std::function<void(TensorImpl&)> backward_fn);
};

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
    void accumulate_grad(std::span<const double> g);
};

// ---- construction helpers -------------------------------------------------

Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);
Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);
/// Kaiming fan-in init: N(0, sqrt(2 / fan_in)).
Tensor kaiming(Shape shape, std::int64_t fan_in, Rng& rng, bool requires_grad = true);

// ---- elementwise and scalar ops --------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- shape ops --------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape new_shape);
/// v: [a1,a2,a3,a4] -> [a1*a2*a3, a4] (row-major relabel, no data movement).
Tensor reshape_v(const Tensor& a);
/// v^-1: inverse of reshape_v back to the given 4-d shape.
Tensor reshape_v_inv(const Tensor& a, Shape original);
Tensor transpose2d(const Tensor& a);
/// Stack k same-shape tensors along a new leading axis.
Tensor stack0(const std::vector<Tensor>& parts);
/// out[i] = a.values[indices[i]]; backward scatter-adds.
Tensor gather(const Tensor& a, std::vector<std::int64_t> indices, Shape out_shape);

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a [m,k] times b [n,k] transposed -> [m,n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x [..., c_in] @ w [c_in, c_out] (+ bias [c_out]) -> [..., c_out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [n, h, w, c] -> [n, c] spatial average.
Tensor spatial_mean(const Tensor& a);

// ---- neural-net ops ---------------------------------------------------------

/// Softmax over the last dim of logits/tau, max-stabilized. tau > 0.
Tensor scaled_softmax(const Tensor& logits, double tau);
/// Normalize the last dim to zero mean / unit variance, then scale and
/// shift: y = (x - mean) / sqrt(var + eps) * gamma + beta.
Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// x [n,h,w,c_in], w [kh,kw,c_in,c_out], optional bias [c_out]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
              std::int64_t pad);
/// Keep spatial indices {0, stride, 2*stride, ...} of a [n,h,w,c] tensor.
Tensor subsample_spatial(const Tensor& a, std::int64_t stride);
/// Window-2 stride-2 max over [n,h,w,c]; odd edges replicate the last row/col
/// so the output is always ceil(h/2) x ceil(w/2).
Tensor max_pool2(const Tensor& a);
/// [n,h,w,c] -> [n,1,1,c] spatial mean.
Tensor global_avg_pool(const Tensor& a);
/// Replicate-pad bottom/right so both spatial dims become even.
Tensor replicate_pad_to_even(const Tensor& a);
/// Bilinear crop-resize of feat [h,w,c] over an image-space box mapped by
/// 1/stride into feature coordinates; samples an s x s grid of bin centers.
/// Values live at cell centers; samples clamp at the border.
Tensor roi_bilinear(const Tensor& feat, double x1, double y1, double x2, double y2,
                    std::int64_t s, double stride);

// ---- losses -----------------------------------------------------------------

/// Mean over rows of logsumexp(row) - row[label]. Empty input -> 0.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);
/// Mean binary cross entropy with logits. Empty input -> 0.
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets);
/// Sum of elementwise Huber terms against a constant target.
Tensor smooth_l1_sum(const Tensor& pred, const std::vector<double>& target, double beta = 1.0);

// ---- gradient checking ------------------------------------------------------

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;  // "param[i]" of the worst coordinate
    std::int64_t coords_checked = 0;
    std::int64_t coords_skipped = 0;  // non-smooth points (e.g. a relu kink in the step window)
};

/// Compares reverse-mode gradients of f() (a scalar) against central finite
/// differences with the given step, over up to max_coords sampled coordinates
/// per parameter. Relative error uses max(1, |g_ad|, |g_fd|) in the
/// denominator. Coordinates where the step and half-step difference
/// quotients disagree sit on a kink of the piecewise-smooth loss and are
/// excluded (a wrong analytic gradient still shows: both quotients then agree
/// with each other and differ from it). f must rebuild its graph from the
/// live parameter values.
GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           Rng& rng, std::int64_t max_coords = 8, double step = 1e-5);

bool all_finite(const Tensor& t);

}  // namespace ctxdet
