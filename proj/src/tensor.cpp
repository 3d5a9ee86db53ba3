#include "ctxdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace ctxdet {

namespace {

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (const auto d : shape) {
        if (d < 0) fail("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void TensorImpl::accumulate_grad(std::span<const double> g) {
    if (!requires_grad) return;
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Tensor make_node(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                 std::function<void(TensorImpl&)> backward_fn) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    for (const auto& p : parents) {
        if (p.defined() && p.requires_grad()) impl->requires_grad = true;
    }
    if (impl->requires_grad) {
        impl->parents = std::move(parents);
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(impl));
}

// ---- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->values.assign(sz(n), value);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    check(shape_numel(shape) == static_cast<std::int64_t>(values.size()),
          "data length does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }
std::int64_t Tensor::numel() const { return impl_ ? impl_->numel() : 0; }
std::int64_t Tensor::dim(std::size_t i) const { return impl_->shape.at(i); }
std::size_t Tensor::rank() const { return impl_->shape.size(); }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

std::span<const double> Tensor::values() const { return impl_->values; }
std::span<double> Tensor::mutable_values() { return impl_->values; }

std::span<const double> Tensor::grad() const {
    static const std::vector<double> kEmpty;
    return impl_->grad.empty() ? std::span<const double>(kEmpty) : std::span<const double>(impl_->grad);
}

std::span<double> Tensor::mutable_grad() {
    if (impl_->grad.size() != impl_->values.size()) impl_->grad.assign(impl_->values.size(), 0.0);
    return impl_->grad;
}

double Tensor::item() const {
    check(numel() == 1, "item() requires a single-element tensor, got " + shape_str(impl_->shape));
    return impl_->values[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    check(idx.size() == impl_->shape.size(), "index rank mismatch");
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (const auto i : idx) {
        check(i >= 0 && i < impl_->shape[k], "index out of bounds");
        flat = flat * impl_->shape[k] + i;
        ++k;
    }
    return impl_->values[sz(flat)];
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.assign(impl_->values.size(), 0.0);
}

void Tensor::backward() {
    check(impl_ != nullptr, "backward() on undefined tensor");
    check(numel() == 1, "backward() requires a scalar root, got " + shape_str(impl_->shape));
    if (!impl_->requires_grad) return;

    // Iterative DFS topological order (deterministic: parents in op order).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* parent = node->parents[next].impl();
            ++next;
            if (parent && parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    const double seed = 1.0;
    impl_->accumulate_grad(std::span<const double>(&seed, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

Tensor Tensor::detach() const { return from_data(impl_->shape, impl_->values, false); }

// ---- construction helpers ---------------------------------------------------

Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    const auto n = shape_numel(shape);
    std::vector<double> d(sz(n));
    for (auto& v : d) v = rng.normal(0.0, stddev);
    return Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    const auto n = shape_numel(shape);
    std::vector<double> d(sz(n));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor kaiming(Shape shape, std::int64_t fan_in, Rng& rng, bool requires_grad) {
    check(fan_in >= 1, "kaiming fan_in must be positive");
    return randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)), requires_grad);
}

// ---- elementwise ------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> d(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += b.values()[i];
    return make_node(a.shape(), std::move(d), {a, b}, [a, b](TensorImpl& self) mutable {
        a.impl()->accumulate_grad(self.grad);
        b.impl()->accumulate_grad(self.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> d(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= b.values()[i];
    return make_node(a.shape(), std::move(d), {a, b}, [a, b](TensorImpl& self) mutable {
        a.impl()->accumulate_grad(self.grad);
        if (b.requires_grad()) {
            std::vector<double> gb(self.grad.size());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -self.grad[i];
            b.impl()->accumulate_grad(gb);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> d(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= b.values()[i];
    return make_node(a.shape(), std::move(d), {a, b}, [a, b](TensorImpl& self) mutable {
        if (a.requires_grad()) {
            std::vector<double> ga(self.grad.size());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = b.values()[i] * self.grad[i];
            a.impl()->accumulate_grad(ga);
        }
        if (b.requires_grad()) {
            std::vector<double> gb(self.grad.size());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = a.values()[i] * self.grad[i];
            b.impl()->accumulate_grad(gb);
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> d(a.values().begin(), a.values().end());
    for (auto& v : d) v *= s;
    return make_node(a.shape(), std::move(d), {a}, [a, s](TensorImpl& self) mutable {
        std::vector<double> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = s * self.grad[i];
        a.impl()->accumulate_grad(g);
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> d(a.values().begin(), a.values().end());
    for (auto& v : d) v += s;
    return make_node(a.shape(), std::move(d), {a},
                     [a](TensorImpl& self) mutable { a.impl()->accumulate_grad(self.grad); });
}

Tensor relu(const Tensor& a) {
    std::vector<double> d(a.values().begin(), a.values().end());
    for (auto& v : d) v = v > 0.0 ? v : 0.0;
    return make_node(a.shape(), std::move(d), {a}, [a](TensorImpl& self) mutable {
        std::vector<double> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] = a.values()[i] > 0.0 ? self.grad[i] : 0.0;
        }
        a.impl()->accumulate_grad(g);
    });
}

// ---- shape ops ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape new_shape) {
    check(shape_numel(new_shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    std::vector<double> d(a.values().begin(), a.values().end());
    return make_node(std::move(new_shape), std::move(d), {a},
                     [a](TensorImpl& self) mutable { a.impl()->accumulate_grad(self.grad); });
}

Tensor reshape_v(const Tensor& a) {
    check(a.rank() == 4, "reshape_v expects a rank-4 tensor, got " + shape_str(a.shape()));
    return reshape(a, {a.dim(0) * a.dim(1) * a.dim(2), a.dim(3)});
}

Tensor reshape_v_inv(const Tensor& a, Shape original) {
    check(a.rank() == 2, "reshape_v_inv expects a rank-2 tensor, got " + shape_str(a.shape()));
    check(original.size() == 4, "reshape_v_inv needs the original rank-4 shape");
    check(original[0] * original[1] * original[2] == a.dim(0) && original[3] == a.dim(1),
          "reshape_v_inv: " + shape_str(a.shape()) + " does not fold into " + shape_str(original));
    return reshape(a, std::move(original));
}

Tensor transpose2d(const Tensor& a) {
    check(a.rank() == 2, "transpose2d expects a rank-2 tensor");
    const auto m = a.dim(0), n = a.dim(1);
    std::vector<double> d(sz(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) d[sz(j * m + i)] = a.values()[sz(i * n + j)];
    }
    return make_node({n, m}, std::move(d), {a}, [a, m, n](TensorImpl& self) mutable {
        std::vector<double> g(sz(m * n));
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) g[sz(i * n + j)] = self.grad[sz(j * m + i)];
        }
        a.impl()->accumulate_grad(g);
    });
}

Tensor stack0(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "stack0 needs at least one tensor");
    const Shape& base = parts[0].shape();
    for (const auto& p : parts) {
        check(p.shape() == base, "stack0: mismatched shapes " + shape_str(base) + " vs " +
                                     shape_str(p.shape()));
    }
    const auto chunk = parts[0].numel();
    Shape out_shape;
    out_shape.push_back(static_cast<std::int64_t>(parts.size()));
    out_shape.insert(out_shape.end(), base.begin(), base.end());
    std::vector<double> d;
    d.reserve(sz(chunk) * parts.size());
    for (const auto& p : parts) d.insert(d.end(), p.values().begin(), p.values().end());
    auto parents = parts;
    return make_node(std::move(out_shape), std::move(d), parents,
                     [parts, chunk](TensorImpl& self) mutable {
                         for (std::size_t k = 0; k < parts.size(); ++k) {
                             if (!parts[k].requires_grad()) continue;
                             std::span<const double> g(self.grad.data() + k * sz(chunk), sz(chunk));
                             parts[k].impl()->accumulate_grad(g);
                         }
                     });
}

Tensor gather(const Tensor& a, std::vector<std::int64_t> indices, Shape out_shape) {
    check(shape_numel(out_shape) == static_cast<std::int64_t>(indices.size()),
          "gather: out shape does not match index count");
    std::vector<double> d(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        check(indices[i] >= 0 && indices[i] < a.numel(), "gather index out of range");
        d[i] = a.values()[sz(indices[i])];
    }
    return make_node(std::move(out_shape), std::move(d), {a},
                     [a, indices = std::move(indices)](TensorImpl& self) mutable {
                         std::vector<double> g(a.values().size(), 0.0);
                         for (std::size_t i = 0; i < indices.size(); ++i) {
                             g[sz(indices[i])] += self.grad[i];
                         }
                         a.impl()->accumulate_grad(g);
                     });
}

// ---- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
    check(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> d(sz(m * n), 0.0);
    const double* ap = a.values().data();
    const double* bp = b.values().data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = ap[sz(i * k + p)];
            if (av == 0.0) continue;
            const double* brow = bp + sz(p * n);
            double* drow = d.data() + sz(i * n);
            for (std::int64_t j = 0; j < n; ++j) drow[sz(j)] += av * brow[sz(j)];
        }
    }
    return make_node({m, n}, std::move(d), {a, b}, [a, b, m, k, n](TensorImpl& self) mutable {
        if (a.requires_grad()) {
            std::vector<double> ga(sz(m * k), 0.0);
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* grow = self.grad.data() + sz(i * n);
                    const double* brow = b.values().data() + sz(p * n);
                    for (std::int64_t j = 0; j < n; ++j) s += grow[sz(j)] * brow[sz(j)];
                    ga[sz(i * k + p)] = s;
                }
            }
            a.impl()->accumulate_grad(ga);
        }
        if (b.requires_grad()) {
            std::vector<double> gb(sz(k * n), 0.0);
            for (std::int64_t i = 0; i < m; ++i) {
                const double* grow = self.grad.data() + sz(i * n);
                for (std::int64_t p = 0; p < k; ++p) {
                    const double av = a.values()[sz(i * k + p)];
                    if (av == 0.0) continue;
                    double* brow = gb.data() + sz(p * n);
                    for (std::int64_t j = 0; j < n; ++j) brow[sz(j)] += av * grow[sz(j)];
                }
            }
            b.impl()->accumulate_grad(gb);
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul_nt expects rank-2 tensors");
    check(a.dim(1) == b.dim(1), "matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()) + " transposed");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<double> d(sz(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a.values().data() + sz(i * k);
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = b.values().data() + sz(j * k);
            double s = 0.0;
            for (std::int64_t p = 0; p < k; ++p) s += arow[sz(p)] * brow[sz(p)];
            d[sz(i * n + j)] = s;
        }
    }
    return make_node({m, n}, std::move(d), {a, b}, [a, b, m, k, n](TensorImpl& self) mutable {
        if (a.requires_grad()) {
            // dA = dS * B
            std::vector<double> ga(sz(m * k), 0.0);
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < n; ++j) {
                    const double gij = self.grad[sz(i * n + j)];
                    if (gij == 0.0) continue;
                    const double* brow = b.values().data() + sz(j * k);
                    double* garow = ga.data() + sz(i * k);
                    for (std::int64_t p = 0; p < k; ++p) garow[sz(p)] += gij * brow[sz(p)];
                }
            }
            a.impl()->accumulate_grad(ga);
        }
        if (b.requires_grad()) {
            // dB = dS^T * A
            std::vector<double> gb(sz(n * k), 0.0);
            for (std::int64_t i = 0; i < m; ++i) {
                const double* arow = a.values().data() + sz(i * k);
                for (std::int64_t j = 0; j < n; ++j) {
                    const double gij = self.grad[sz(i * n + j)];
                    if (gij == 0.0) continue;
                    double* gbrow = gb.data() + sz(j * k);
                    for (std::int64_t p = 0; p < k; ++p) gbrow[sz(p)] += gij * arow[sz(p)];
                }
            }
            b.impl()->accumulate_grad(gb);
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check(w.rank() == 2, "linear: weight must be rank-2 [c_in, c_out]");
    check(x.rank() >= 1, "linear: input must have at least one dim");
    const auto c_in = w.dim(0), c_out = w.dim(1);
    check(x.shape().back() == c_in, "linear: input last dim " + shape_str(x.shape()) +
                                        " does not match weight " + shape_str(w.shape()));
    if (bias.defined()) {
        check(bias.rank() == 1 && bias.dim(0) == c_out, "linear: bias must be [c_out]");
    }
    const auto rows = c_in == 0 ? 0 : x.numel() / c_in;
    std::vector<double> d(sz(rows * c_out), 0.0);
    const double* xp = x.values().data();
    const double* wp = w.values().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        double* drow = d.data() + sz(r * c_out);
        if (bias.defined()) {
            for (std::int64_t j = 0; j < c_out; ++j) drow[sz(j)] = bias.values()[sz(j)];
        }
        const double* xrow = xp + sz(r * c_in);
        for (std::int64_t p = 0; p < c_in; ++p) {
            const double xv = xrow[sz(p)];
            if (xv == 0.0) continue;
            const double* wrow = wp + sz(p * c_out);
            for (std::int64_t j = 0; j < c_out; ++j) drow[sz(j)] += xv * wrow[sz(j)];
        }
    }
    Shape out_shape = x.shape();
    out_shape.back() = c_out;
    std::vector<Tensor> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_node(std::move(out_shape), std::move(d), std::move(parents),
                     [x, w, bias, rows, c_in, c_out](TensorImpl& self) mutable {
                         if (x.requires_grad()) {
                             std::vector<double> gx(sz(rows * c_in), 0.0);
                             for (std::int64_t r = 0; r < rows; ++r) {
                                 const double* grow = self.grad.data() + sz(r * c_out);
                                 double* gxrow = gx.data() + sz(r * c_in);
                                 for (std::int64_t p = 0; p < c_in; ++p) {
                                     const double* wrow = w.values().data() + sz(p * c_out);
                                     double s = 0.0;
                                     for (std::int64_t j = 0; j < c_out; ++j) {
                                         s += grow[sz(j)] * wrow[sz(j)];
                                     }
                                     gxrow[sz(p)] = s;
                                 }
                             }
                             x.impl()->accumulate_grad(gx);
                         }
                         if (w.requires_grad()) {
                             std::vector<double> gw(sz(c_in * c_out), 0.0);
                             for (std::int64_t r = 0; r < rows; ++r) {
                                 const double* xrow = x.values().data() + sz(r * c_in);
                                 const double* grow = self.grad.data() + sz(r * c_out);
                                 for (std::int64_t p = 0; p < c_in; ++p) {
                                     const double xv = xrow[sz(p)];
                                     if (xv == 0.0) continue;
                                     double* gwrow = gw.data() + sz(p * c_out);
                                     for (std::int64_t j = 0; j < c_out; ++j) {
                                         gwrow[sz(j)] += xv * grow[sz(j)];
                                     }
                                 }
                             }
                             w.impl()->accumulate_grad(gw);
                         }
                         if (bias.defined() && bias.requires_grad()) {
                             std::vector<double> gb(sz(c_out), 0.0);
                             for (std::int64_t r = 0; r < rows; ++r) {
                                 const double* grow = self.grad.data() + sz(r * c_out);
                                 for (std::int64_t j = 0; j < c_out; ++j) gb[sz(j)] += grow[sz(j)];
                             }
                             bias.impl()->accumulate_grad(gb);
                         }
                     });
}

// ---- reductions -----------------------------------------------------------------

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (const double v : a.values()) s += v;
    return make_node({1}, {s}, {a}, [a](TensorImpl& self) mutable {
        std::vector<double> g(a.values().size(), self.grad[0]);
        a.impl()->accumulate_grad(g);
    });
}

Tensor mean(const Tensor& a) {
    const auto n = a.numel();
    if (n == 0) return Tensor::scalar(0.0);
    double s = 0.0;
    for (const double v : a.values()) s += v;
    const double inv = 1.0 / static_cast<double>(n);
    return make_node({1}, {s * inv}, {a}, [a, inv](TensorImpl& self) mutable {
        std::vector<double> g(a.values().size(), self.grad[0] * inv);
        a.impl()->accumulate_grad(g);
    });
}

Tensor spatial_mean(const Tensor& a) {
    check(a.rank() == 4, "spatial_mean expects [n,h,w,c]");
    const auto n = a.dim(0), h = a.dim(1), w = a.dim(2), c = a.dim(3);
    const auto hw = h * w;
    check(hw > 0, "spatial_mean: empty spatial extent");
    const double inv = 1.0 / static_cast<double>(hw);
    std::vector<double> d(sz(n * c), 0.0);
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t p = 0; p < hw; ++p) {
            const double* row = a.values().data() + sz((b * hw + p) * c);
            double* drow = d.data() + sz(b * c);
            for (std::int64_t j = 0; j < c; ++j) drow[sz(j)] += row[sz(j)];
        }
    }
    for (auto& v : d) v *= inv;
    return make_node({n, c}, std::move(d), {a}, [a, n, hw, c, inv](TensorImpl& self) mutable {
        std::vector<double> g(a.values().size());
        for (std::int64_t b = 0; b < n; ++b) {
            const double* grow = self.grad.data() + sz(b * c);
            for (std::int64_t p = 0; p < hw; ++p) {
                double* out = g.data() + sz((b * hw + p) * c);
                for (std::int64_t j = 0; j < c; ++j) out[sz(j)] = grow[sz(j)] * inv;
            }
        }
        a.impl()->accumulate_grad(g);
    });
}

// ---- neural-net ops ---------------------------------------------------------------

Tensor scaled_softmax(const Tensor& logits, double tau) {
    check(tau > 0.0, "scaled_softmax: tau must be positive");
    check(logits.rank() >= 1, "scaled_softmax: needs at least one dim");
    const auto n = logits.shape().back();
    check(n >= 1, "scaled_softmax: empty last dim");
    const auto rows = logits.numel() / n;
    std::vector<double> d(sz(rows * n));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = logits.values().data() + sz(r * n);
        double* y = d.data() + sz(r * n);
        double m = x[0] / tau;
        for (std::int64_t j = 1; j < n; ++j) m = std::max(m, x[sz(j)] / tau);
        double denom = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            y[sz(j)] = std::exp(x[sz(j)] / tau - m);
            denom += y[sz(j)];
        }
        const double inv = 1.0 / denom;
        for (std::int64_t j = 0; j < n; ++j) y[sz(j)] *= inv;
    }
    return make_node(logits.shape(), std::move(d), {logits},
                     [logits, rows, n, tau](TensorImpl& self) mutable {
                         std::vector<double> g(self.values.size());
                         const double inv_tau = 1.0 / tau;
                         for (std::int64_t r = 0; r < rows; ++r) {
                             const double* y = self.values.data() + sz(r * n);
                             const double* go = self.grad.data() + sz(r * n);
                             double dot = 0.0;
                             for (std::int64_t j = 0; j < n; ++j) dot += go[sz(j)] * y[sz(j)];
                             double* gx = g.data() + sz(r * n);
                             for (std::int64_t j = 0; j < n; ++j) {
                                 gx[sz(j)] = y[sz(j)] * (go[sz(j)] - dot) * inv_tau;
                             }
                         }
                         logits.impl()->accumulate_grad(g);
                     });
}

Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check(x.rank() >= 1, "channel_norm: input needs at least one dim");
    const auto c = x.shape().back();
    check(c >= 1, "channel_norm: empty channel dim");
    check(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
          "channel_norm: gamma/beta must be [c]");
    const auto rows = x.numel() / c;
    std::vector<double> d(sz(rows * c));
    std::vector<double> inv_std(sz(rows));
    std::vector<double> mean(sz(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x.values().data() + sz(r * c);
        double m = 0.0;
        for (std::int64_t j = 0; j < c; ++j) m += xr[sz(j)];
        m /= static_cast<double>(c);
        double v = 0.0;
        for (std::int64_t j = 0; j < c; ++j) v += (xr[sz(j)] - m) * (xr[sz(j)] - m);
        v /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(v + eps);
        mean[sz(r)] = m;
        inv_std[sz(r)] = is;
        double* dr = d.data() + sz(r * c);
        for (std::int64_t j = 0; j < c; ++j) {
            dr[sz(j)] = (xr[sz(j)] - m) * is * gamma.values()[sz(j)] + beta.values()[sz(j)];
        }
    }
    return make_node(
        x.shape(), std::move(d), {x, gamma, beta},
        [x, gamma, beta, rows, c, mean = std::move(mean),
         inv_std = std::move(inv_std)](TensorImpl& self) mutable {
            std::vector<double> gx;
            std::vector<double> gg;
            std::vector<double> gb;
            const bool need_x = x.requires_grad();
            const bool need_g = gamma.requires_grad();
            const bool need_b = beta.requires_grad();
            if (need_x) gx.assign(x.values().size(), 0.0);
            if (need_g) gg.assign(sz(c), 0.0);
            if (need_b) gb.assign(sz(c), 0.0);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* xr = x.values().data() + sz(r * c);
                const double* go = self.grad.data() + sz(r * c);
                const double m = mean[sz(r)];
                const double is = inv_std[sz(r)];
                // xhat_j = (x_j - m) * is; dy_j = go_j * gamma_j
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::int64_t j = 0; j < c; ++j) {
                    const double xhat = (xr[sz(j)] - m) * is;
                    const double dy = go[sz(j)] * gamma.values()[sz(j)];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                    if (need_g) gg[sz(j)] += go[sz(j)] * xhat;
                    if (need_b) gb[sz(j)] += go[sz(j)];
                }
                if (need_x) {
                    double* gxr = gx.data() + sz(r * c);
                    const double invc = 1.0 / static_cast<double>(c);
                    for (std::int64_t j = 0; j < c; ++j) {
                        const double xhat = (xr[sz(j)] - m) * is;
                        const double dy = go[sz(j)] * gamma.values()[sz(j)];
                        gxr[sz(j)] = is * (dy - invc * sum_dy - invc * xhat * sum_dy_xhat);
                    }
                }
            }
            if (need_x) x.impl()->accumulate_grad(gx);
            if (need_g) gamma.impl()->accumulate_grad(gg);
            if (need_b) beta.impl()->accumulate_grad(gb);
        });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
              std::int64_t pad) {
    check(x.rank() == 4, "conv2d: input must be [n,h,w,c_in]");
    check(w.rank() == 4, "conv2d: kernel must be [kh,kw,c_in,c_out]");
    check(stride >= 1 && pad >= 0, "conv2d: invalid stride/pad");
    const auto n = x.dim(0), h = x.dim(1), wd = x.dim(2), ci = x.dim(3);
    const auto kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
    check(w.dim(2) == ci, "conv2d: channel mismatch, input " + shape_str(x.shape()) +
                              " kernel " + shape_str(w.shape()));
    if (bias.defined()) check(bias.rank() == 1 && bias.dim(0) == co, "conv2d: bias must be [c_out]");
    const auto ho = (h + 2 * pad - kh) / stride + 1;
    const auto wo = (wd + 2 * pad - kw) / stride + 1;
    check(ho >= 1 && wo >= 1, "conv2d: output would be empty");

    std::vector<double> d(sz(n * ho * wo * co), 0.0);
    const double* xp = x.values().data();
    const double* wp = w.values().data();
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                double* acc = d.data() + sz(((b * ho + oy) * wo + ox) * co);
                if (bias.defined()) {
                    for (std::int64_t j = 0; j < co; ++j) acc[sz(j)] = bias.values()[sz(j)];
                }
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= wd) continue;
                        const double* xrow = xp + sz(((b * h + iy) * wd + ix) * ci);
                        const double* wrow = wp + sz((ky * kw + kx) * ci * co);
                        for (std::int64_t p = 0; p < ci; ++p) {
                            const double xv = xrow[sz(p)];
                            if (xv == 0.0) continue;
                            const double* wj = wrow + sz(p * co);
                            for (std::int64_t j = 0; j < co; ++j) acc[sz(j)] += xv * wj[sz(j)];
                        }
                    }
                }
            }
        }
    }
    return make_node(
        {n, ho, wo, co}, std::move(d), {x, w, bias.defined() ? bias : Tensor()},
        [x, w, bias, n, h, wd, ci, kh, kw, co, ho, wo, stride, pad](TensorImpl& self) mutable {
            std::vector<double> gx;
            std::vector<double> gw;
            std::vector<double> gb;
            const bool need_x = x.requires_grad();
            const bool need_w = w.requires_grad();
            const bool need_b = bias.defined() && bias.requires_grad();
            if (need_x) gx.assign(x.values().size(), 0.0);
            if (need_w) gw.assign(w.values().size(), 0.0);
            if (need_b) gb.assign(sz(co), 0.0);
            for (std::int64_t b = 0; b < n; ++b) {
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        const double* grow = self.grad.data() + sz(((b * ho + oy) * wo + ox) * co);
                        if (need_b) {
                            for (std::int64_t j = 0; j < co; ++j) gb[sz(j)] += grow[sz(j)];
                        }
                        for (std::int64_t ky = 0; ky < kh; ++ky) {
                            const std::int64_t iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const std::int64_t ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= wd) continue;
                                const std::size_t xoff = sz(((b * h + iy) * wd + ix) * ci);
                                const std::size_t woff = sz((ky * kw + kx) * ci * co);
                                for (std::int64_t p = 0; p < ci; ++p) {
                                    const double* wj = w.values().data() + woff + sz(p * co);
                                    if (need_x) {
                                        double s = 0.0;
                                        for (std::int64_t j = 0; j < co; ++j) {
                                            s += wj[sz(j)] * grow[sz(j)];
                                        }
                                        gx[xoff + sz(p)] += s;
                                    }
                                    if (need_w) {
                                        const double xv = x.values()[xoff + sz(p)];
                                        if (xv == 0.0) continue;
                                        double* gwj = gw.data() + woff + sz(p * co);
                                        for (std::int64_t j = 0; j < co; ++j) {
                                            gwj[sz(j)] += xv * grow[sz(j)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (need_x) x.impl()->accumulate_grad(gx);
            if (need_w) w.impl()->accumulate_grad(gw);
            if (need_b) bias.impl()->accumulate_grad(gb);
        });
}

Tensor subsample_spatial(const Tensor& a, std::int64_t stride) {
    check(a.rank() == 4, "subsample_spatial expects [n,h,w,c]");
    check(stride >= 1, "subsample_spatial: stride must be >= 1");
    const auto n = a.dim(0), h = a.dim(1), w = a.dim(2), c = a.dim(3);
    const auto hs = (h + stride - 1) / stride;
    const auto ws = (w + stride - 1) / stride;
    std::vector<double> d(sz(n * hs * ws * c));
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t y = 0; y < hs; ++y) {
            for (std::int64_t x = 0; x < ws; ++x) {
                const double* src = a.values().data() + sz(((b * h + y * stride) * w + x * stride) * c);
                double* dst = d.data() + sz(((b * hs + y) * ws + x) * c);
                std::copy(src, src + sz(c), dst);
            }
        }
    }
    return make_node({n, hs, ws, c}, std::move(d), {a},
                     [a, n, h, w, c, hs, ws, stride](TensorImpl& self) mutable {
                         std::vector<double> g(a.values().size(), 0.0);
                         for (std::int64_t b = 0; b < n; ++b) {
                             for (std::int64_t y = 0; y < hs; ++y) {
                                 for (std::int64_t x = 0; x < ws; ++x) {
                                     const double* src =
                                         self.grad.data() + sz(((b * hs + y) * ws + x) * c);
                                     double* dst =
                                         g.data() + sz(((b * h + y * stride) * w + x * stride) * c);
                                     for (std::int64_t j = 0; j < c; ++j) dst[sz(j)] += src[sz(j)];
                                 }
                             }
                         }
                         a.impl()->accumulate_grad(g);
                     });
}

Tensor max_pool2(const Tensor& a) {
    check(a.rank() == 4, "max_pool2 expects [n,h,w,c]");
    const auto n = a.dim(0), h = a.dim(1), w = a.dim(2), c = a.dim(3);
    const auto ho = (h + 1) / 2, wo = (w + 1) / 2;
    std::vector<double> d(sz(n * ho * wo * c));
    std::vector<std::int64_t> argmax(sz(n * ho * wo * c));
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            // Edge windows clamp to the last row/col (replicate padding).
            const std::int64_t y1 = std::min<std::int64_t>(2 * oy + 1, h - 1);
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                const std::int64_t x1 = std::min<std::int64_t>(2 * ox + 1, w - 1);
                const std::size_t out_off = sz(((b * ho + oy) * wo + ox) * c);
                for (std::int64_t j = 0; j < c; ++j) {
                    double best = -1e300;
                    std::int64_t best_idx = 0;
                    for (const std::int64_t y : {2 * oy, y1}) {
                        for (const std::int64_t x : {2 * ox, x1}) {
                            const std::int64_t idx = ((b * h + y) * w + x) * c + j;
                            const double v = a.values()[sz(idx)];
                            if (v > best) {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    d[out_off + sz(j)] = best;
                    argmax[out_off + sz(j)] = best_idx;
                }
            }
        }
    }
    return make_node({n, ho, wo, c}, std::move(d), {a},
                     [a, argmax = std::move(argmax)](TensorImpl& self) mutable {
                         std::vector<double> g(a.values().size(), 0.0);
                         for (std::size_t i = 0; i < argmax.size(); ++i) {
                             g[sz(argmax[i])] += self.grad[i];
                         }
                         a.impl()->accumulate_grad(g);
                     });
}

Tensor global_avg_pool(const Tensor& a) {
    check(a.rank() == 4, "global_avg_pool expects [n,h,w,c]");
    const auto n = a.dim(0), c = a.dim(3);
    Tensor m = spatial_mean(a);
    return reshape(m, {n, 1, 1, c});
}

Tensor replicate_pad_to_even(const Tensor& a) {
    check(a.rank() == 4, "replicate_pad_to_even expects [n,h,w,c]");
    const auto n = a.dim(0), h = a.dim(1), w = a.dim(2), c = a.dim(3);
    const auto ho = h + (h % 2), wo = w + (w % 2);
    if (ho == h && wo == w) return reshape(a, a.shape());
    std::vector<double> d(sz(n * ho * wo * c));
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t y = 0; y < ho; ++y) {
            const std::int64_t sy = std::min(y, h - 1);
            for (std::int64_t x = 0; x < wo; ++x) {
                const std::int64_t sx = std::min(x, w - 1);
                const double* src = a.values().data() + sz(((b * h + sy) * w + sx) * c);
                double* dst = d.data() + sz(((b * ho + y) * wo + x) * c);
                std::copy(src, src + sz(c), dst);
            }
        }
    }
    return make_node({n, ho, wo, c}, std::move(d), {a},
                     [a, n, h, w, c, ho, wo](TensorImpl& self) mutable {
                         std::vector<double> g(a.values().size(), 0.0);
                         for (std::int64_t b = 0; b < n; ++b) {
                             for (std::int64_t y = 0; y < ho; ++y) {
                                 const std::int64_t sy = std::min(y, h - 1);
                                 for (std::int64_t x = 0; x < wo; ++x) {
                                     const std::int64_t sx = std::min(x, w - 1);
                                     const double* src =
                                         self.grad.data() + sz(((b * ho + y) * wo + x) * c);
                                     double* dst = g.data() + sz(((b * h + sy) * w + sx) * c);
                                     for (std::int64_t j = 0; j < c; ++j) dst[sz(j)] += src[sz(j)];
                                 }
                             }
                         }
                         a.impl()->accumulate_grad(g);
                     });
}

Tensor roi_bilinear(const Tensor& feat, double x1, double y1, double x2, double y2, std::int64_t s,
                    double stride) {
    check(feat.rank() == 3, "roi_bilinear expects feature [h,w,c]");
    check(s >= 1, "roi_bilinear: output size must be >= 1");
    check(x2 > x1 && y2 > y1, "roi_bilinear: degenerate box");
    const auto h = feat.dim(0), w = feat.dim(1), c = feat.dim(2);
    check(h >= 1 && w >= 1, "roi_bilinear: empty feature map");

    // Per sample: 4 corner cell offsets and weights. Values sit at cell centers.
    std::vector<std::int64_t> corner(sz(s * s * 4));
    std::vector<double> weight(sz(s * s * 4));
    for (std::int64_t i = 0; i < s; ++i) {
        const double py = y1 + (static_cast<double>(i) + 0.5) * (y2 - y1) / static_cast<double>(s);
        const double v = py / stride - 0.5;
        const double fy = std::floor(v);
        const std::int64_t iy0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(fy), 0, h - 1);
        const std::int64_t iy1 = std::clamp<std::int64_t>(static_cast<std::int64_t>(fy) + 1, 0, h - 1);
        // collapse the weight when clamping folds both rows onto one cell
        const double ty = iy0 == iy1 ? 0.0 : v - fy;
        for (std::int64_t j = 0; j < s; ++j) {
            const double px =
                x1 + (static_cast<double>(j) + 0.5) * (x2 - x1) / static_cast<double>(s);
            const double u = px / stride - 0.5;
            const double fx = std::floor(u);
            const std::int64_t ix0 =
                std::clamp<std::int64_t>(static_cast<std::int64_t>(fx), 0, w - 1);
            const std::int64_t ix1 =
                std::clamp<std::int64_t>(static_cast<std::int64_t>(fx) + 1, 0, w - 1);
            const double tx = ix0 == ix1 ? 0.0 : u - fx;
            const std::size_t base = sz((i * s + j) * 4);
            corner[base + 0] = iy0 * w + ix0;
            corner[base + 1] = iy0 * w + ix1;
            corner[base + 2] = iy1 * w + ix0;
            corner[base + 3] = iy1 * w + ix1;
            weight[base + 0] = (1.0 - ty) * (1.0 - tx);
            weight[base + 1] = (1.0 - ty) * tx;
            weight[base + 2] = ty * (1.0 - tx);
            weight[base + 3] = ty * tx;
        }
    }
    std::vector<double> d(sz(s * s * c));
    for (std::int64_t p = 0; p < s * s; ++p) {
        double* out = d.data() + sz(p * c);
        for (int k = 0; k < 4; ++k) {
            const double wk = weight[sz(p * 4 + k)];
            if (wk == 0.0) continue;
            const double* src = feat.values().data() + sz(corner[sz(p * 4 + k)] * c);
            for (std::int64_t j = 0; j < c; ++j) out[sz(j)] += wk * src[sz(j)];
        }
    }
    return make_node({s, s, c}, std::move(d), {feat},
                     [feat, corner = std::move(corner), weight = std::move(weight), s,
                      c](TensorImpl& self) mutable {
                         std::vector<double> g(feat.values().size(), 0.0);
                         for (std::int64_t p = 0; p < s * s; ++p) {
                             const double* grow = self.grad.data() + sz(p * c);
                             for (int k = 0; k < 4; ++k) {
                                 const double wk = weight[sz(p * 4 + k)];
                                 if (wk == 0.0) continue;
                                 double* dst = g.data() + sz(corner[sz(p * 4 + k)] * c);
                                 for (std::int64_t j = 0; j < c; ++j) {
                                     dst[sz(j)] += wk * grow[sz(j)];
                                 }
                             }
                         }
                         feat.impl()->accumulate_grad(g);
                     });
}

// ---- losses -------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    check(logits.rank() == 2, "cross_entropy expects [n, k] logits");
    const auto n = logits.dim(0), k = logits.dim(1);
    check(static_cast<std::int64_t>(labels.size()) == n, "cross_entropy: label count mismatch");
    if (n == 0) return Tensor::scalar(0.0);
    double total = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
        check(labels[sz(r)] >= 0 && labels[sz(r)] < k, "cross_entropy: label out of range");
        const double* x = logits.values().data() + sz(r * k);
        double m = x[0];
        for (std::int64_t j = 1; j < k; ++j) m = std::max(m, x[sz(j)]);
        double denom = 0.0;
        for (std::int64_t j = 0; j < k; ++j) denom += std::exp(x[sz(j)] - m);
        total += m + std::log(denom) - x[sz(labels[sz(r)])];
    }
    const double inv = 1.0 / static_cast<double>(n);
    return make_node({1}, {total * inv}, {logits},
                     [logits, labels, n, k, inv](TensorImpl& self) mutable {
                         const double g = self.grad[0] * inv;
                         std::vector<double> gx(sz(n * k));
                         for (std::int64_t r = 0; r < n; ++r) {
                             const double* x = logits.values().data() + sz(r * k);
                             double m = x[0];
                             for (std::int64_t j = 1; j < k; ++j) m = std::max(m, x[sz(j)]);
                             double denom = 0.0;
                             for (std::int64_t j = 0; j < k; ++j) denom += std::exp(x[sz(j)] - m);
                             double* grow = gx.data() + sz(r * k);
                             for (std::int64_t j = 0; j < k; ++j) {
                                 grow[sz(j)] = std::exp(x[sz(j)] - m) / denom * g;
                             }
                             grow[sz(labels[sz(r)])] -= g;
                         }
                         logits.impl()->accumulate_grad(gx);
                     });
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
    const auto n = logits.numel();
    check(static_cast<std::int64_t>(targets.size()) == n, "bce_with_logits: target count mismatch");
    if (n == 0) return Tensor::scalar(0.0);
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = logits.values()[sz(i)];
        const double t = targets[sz(i)];
        total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    const double inv = 1.0 / static_cast<double>(n);
    return make_node({1}, {total * inv}, {logits}, [logits, targets, n, inv](TensorImpl& self) mutable {
        const double g = self.grad[0] * inv;
        std::vector<double> gx(sz(n));
        for (std::int64_t i = 0; i < n; ++i) {
            const double x = logits.values()[sz(i)];
            const double sig = 1.0 / (1.0 + std::exp(-x));
            gx[sz(i)] = (sig - targets[sz(i)]) * g;
        }
        logits.impl()->accumulate_grad(gx);
    });
}

Tensor smooth_l1_sum(const Tensor& pred, const std::vector<double>& target, double beta) {
    check(beta > 0.0, "smooth_l1_sum: beta must be positive");
    const auto n = pred.numel();
    check(static_cast<std::int64_t>(target.size()) == n, "smooth_l1_sum: target count mismatch");
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = pred.values()[sz(i)] - target[sz(i)];
        const double ad = std::abs(d);
        total += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
    }
    return make_node({1}, {total}, {pred}, [pred, target, n, beta](TensorImpl& self) mutable {
        const double g = self.grad[0];
        std::vector<double> gx(sz(n));
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = pred.values()[sz(i)] - target[sz(i)];
            gx[sz(i)] = (std::abs(d) < beta ? d / beta : (d > 0.0 ? 1.0 : -1.0)) * g;
        }
        pred.impl()->accumulate_grad(gx);
    });
}

// ---- gradient checking -----------------------------------------------------------

bool all_finite(const Tensor& t) {
    for (const double v : t.values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           Rng& rng, std::int64_t max_coords, double step) {
    for (auto p : params) p.zero_grad();
    Tensor out = f();
    if (!all_finite(out)) throw std::runtime_error("grad_check: function value is not finite");
    out.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        auto g = p.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(sz(p.numel()), 0.0);
    }

    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        const auto n = p.numel();
        std::vector<std::int64_t> coords;
        if (n <= max_coords) {
            coords.resize(sz(n));
            for (std::int64_t i = 0; i < n; ++i) coords[sz(i)] = i;
        } else {
            std::unordered_set<std::int64_t> seen;
            while (static_cast<std::int64_t>(coords.size()) < max_coords) {
                const auto c = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
                if (seen.insert(c).second) coords.push_back(c);
            }
        }
        for (const auto c : coords) {
            const double v0 = p.values()[sz(c)];
            const auto central = [&](double h) {
                p.mutable_values()[sz(c)] = v0 + h;
                const double f_plus = f().item();
                p.mutable_values()[sz(c)] = v0 - h;
                const double f_minus = f().item();
                p.mutable_values()[sz(c)] = v0;
                if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                    throw std::runtime_error("grad_check: perturbed function value is not finite");
                }
                return (f_plus - f_minus) / (2.0 * h);
            };
            const double fd_full = central(step);
            const double fd_half = central(0.5 * step);
            if (std::abs(fd_full - fd_half) /
                    std::max({1.0, std::abs(fd_full), std::abs(fd_half)}) >
                1e-6) {
                ++result.coords_skipped;
                continue;
            }
            ++result.coords_checked;
            const double g_fd = fd_half;
            const double g_ad = analytic[pi][sz(c)];
            const double rel =
                std::abs(g_ad - g_fd) / std::max({1.0, std::abs(g_ad), std::abs(g_fd)});
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst = "param " + std::to_string(pi) + "[" + std::to_string(c) + "]";
            }
        }
    }
    return result;
}

}  // namespace ctxdet
