#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pyrafeat/resample.hpp"
#include "pyrafeat/tensor.hpp"

namespace pyrafeat {

/// A named learnable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    /// Frozen parameters enter graphs as constants; their grad stays zero.
    bool frozen = false;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape(), T(0)) {}

    void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the
/// tape lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool requires_grad() const;

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Linear record of executed operations for reverse-mode differentiation.
///
/// Every operation validates that its output is finite and throws
/// NumericError otherwise. In inference mode no adjoints are stored.
template <typename T>
class Tape {
public:
    enum class Mode { record, inference };
    using Adjoint = std::function<void(Tape&, const Tensor<T>& out_grad)>;

    explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    Var<T> param(Parameter<T>& p);

    /// Reverse sweep from a scalar loss. Node gradients are recomputed from
    /// scratch on every call; leaf gradients are added into the bound
    /// Parameters when `accumulate` is set.
    void backward(Var<T> loss, bool accumulate = true);

    /// Gradient of the last backward() with respect to `p`, zero if `p` was
    /// not reached.
    Tensor<T> grad_of(const Parameter<T>& p) const;

    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    bool recording() const { return mode_ == Mode::record; }
    std::size_t size() const { return nodes_.size(); }
    std::size_t bytes() const { return bytes_; }

    /// Gradient buffer of node `id`, zero-allocated on first use.
    Tensor<T>& grad_buffer(std::size_t id);

    /// Records an operation; `adjoint` is dropped when no input needs a
    /// gradient.
    Var<T> push(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                Adjoint adjoint);

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        Adjoint adjoint;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
    };

    Mode mode_;
    std::deque<Node> nodes_;  // stable references across push
    std::size_t bytes_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape_->requires_grad(id_);
}

namespace ad {

// Elementwise arithmetic with same-rank broadcasting over unit extents.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, T c);

template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> square(Var<T> a);

/// Sum of all elements, rank-0 result.
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> sum(Var<T> a, std::size_t axis, bool keepdim = false);
template <typename T> Var<T> mean(Var<T> a);

/// Max-subtracted softmax along `axis`.
template <typename T> Var<T> softmax(Var<T> a, std::size_t axis);

/// (n x k) @ (k x m).
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

/// Per-position linear map of the last axis: (…, Cin) x (Cin, Cout).
template <typename T> Var<T> channel_project(Var<T> a, Var<T> weight);

/// Row-operator application (gathers, pads, flips, bilinear sampling).
template <typename T>
Var<T> remap(Var<T> a, std::shared_ptr<const RowMap> map, Shape out_prefix);

template <typename T>
Var<T> bilinear_resample(Var<T> a, std::size_t dst_h, std::size_t dst_w);

/// Weighted gather: with `map` producing P*K rows from the rows of `a`
/// (…, C) and `weights` holding P*K values,
/// out[p, c] = sum_k weights[p, k] * (map a)[p*K + k, c], shaped
/// out_prefix + (C). Equals reshape(remap(a)) * weights summed over K without
/// materialising the gathered rows.
template <typename T>
Var<T> gather_contract(Var<T> a, std::shared_ptr<const RowMap> map, Var<T> weights, Shape out_prefix);

/// Gathered dot products: out[p, k] = sum_c query[p, c] * (map a)[p*K + k, c],
/// shaped out_prefix + (K), where `query` holds P rows of C values.
template <typename T>
Var<T> gather_dot(Var<T> a, std::shared_ptr<const RowMap> map, Var<T> query, Shape out_prefix);

/// (H, W, C) -> (H, W, U*U, C) edge-clamped neighbourhoods.
template <typename T>
Var<T> window_gather(Var<T> a, std::size_t u);

}  // namespace ad

/// Result of comparing reverse-mode gradients with central differences.
struct GradCheckResult {
    struct Entry {
        std::string name;
        double max_rel_error = 0.0;
        double max_abs_analytic = 0.0;
    };
    std::vector<Entry> params;
    double max_rel_error = 0.0;
};

/// Relative error |a - n| / max(|a|, |n|, 1e-8), maximised over every scalar
/// entry of every parameter. `fn` must build the same deterministic scalar
/// on each call.
GradCheckResult finite_diff_check(const std::function<Var<double>(Tape<double>&)>& fn,
                                  const std::vector<Parameter<double>*>& params,
                                  double step = 1e-4);

}  // namespace pyrafeat
