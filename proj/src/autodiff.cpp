#include "pyrafeat/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace pyrafeat {

namespace {

template <typename T>
void require_finite(const char* op, const Tensor<T>& t) {
    if (!t.all_finite()) {
        throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                           shape_str(t.shape()));
    }
}

void add_into(auto& dst, const auto& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct Broadcast {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
    bool same = false;
};

std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
    return st;
}

Broadcast broadcast_shapes(const char* op, Shape a, Shape b) {
    Broadcast bc;
    if (a == b) {
        bc.out = a;
        bc.same = true;
        return bc;
    }
    // A single-element operand acts as a scalar at any rank.
    if (a.size() != b.size()) {
        if (shape_numel(a) == 1) a = Shape(b.size(), 1);
        else if (shape_numel(b) == 1) b = Shape(a.size(), 1);
        else throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    const auto sa = row_major_strides(a);
    const auto sb = row_major_strides(b);
    bc.out.resize(a.size());
    bc.stride_a.resize(a.size());
    bc.stride_b.resize(a.size());
    for (std::size_t d = 0; d < a.size(); ++d) {
        if (a[d] != b[d] && a[d] != 1 && b[d] != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        bc.out[d] = std::max(a[d], b[d]);
        bc.stride_a[d] = a[d] == 1 ? 0 : sa[d];
        bc.stride_b[d] = b[d] == 1 ? 0 : sb[d];
    }
    return bc;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
    const std::size_t total = shape_numel(bc.out);
    if (bc.same) {
        for (std::size_t i = 0; i < total; ++i) f(i, i, i);
        return;
    }
    const std::size_t r = bc.out.size();
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    const std::size_t inner = bc.out[r - 1];
    const std::size_t step_a = bc.stride_a[r - 1];
    const std::size_t step_b = bc.stride_b[r - 1];
    std::vector<std::size_t> counter(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t io = 0; io < total; io += inner) {
        for (std::size_t k = 0; k < inner; ++k) f(io + k, ia + k * step_a, ib + k * step_b);
        for (std::size_t d = r - 1; d-- > 0;) {
            ++counter[d];
            ia += bc.stride_a[d];
            ib += bc.stride_b[d];
            if (counter[d] < bc.out[d]) break;
            ia -= bc.stride_a[d] * bc.out[d];
            ib -= bc.stride_b[d] * bc.out[d];
            counter[d] = 0;
        }
    }
}

/// Splits a shape into (outer, n, inner) around `axis`.
void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    outer = 1;
    inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    n = s[axis];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::push(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, Adjoint adjoint) {
    require_finite(op, value);
    Node node;
    node.value = std::move(value);
    if (recording()) {
        for (const auto& in : inputs) {
            if (&in.tape() != this) throw std::logic_error(std::string(op) + ": input from another tape");
            node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
        }
    }
    if (node.requires_grad) node.adjoint = std::move(adjoint);
    bytes_ += node.value.size() * sizeof(T);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    return push("constant", std::move(value), {}, nullptr);
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
    Var<T> v = push("param", p.value, {}, nullptr);
    if (recording() && !p.frozen) {
        nodes_.back().requires_grad = true;
        nodes_.back().param = &p;
    }
    return v;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T(0));
    return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss, bool accumulate) {
    if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
    if (loss.value().size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (nodes_.empty()) throw std::logic_error("backward: empty tape");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    grad_buffer(loss.id()).fill(T(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty() || !n.adjoint) continue;
        n.adjoint(*this, n.grad);
    }
    if (!accumulate) return;
    for (auto& n : nodes_) {
        if (n.param && !n.grad.empty()) add_into(n.param->grad.storage(), n.grad.storage());
    }
}

template <typename T>
Tensor<T> Tape<T>::grad_of(const Parameter<T>& p) const {
    Tensor<T> g(p.value.shape(), T(0));
    for (const auto& n : nodes_) {
        if (n.param == &p && !n.grad.empty()) add_into(g.storage(), n.grad.storage());
    }
    return g;
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Operations

namespace ad {

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    const auto bc = broadcast_shapes("add", a.shape(), b.shape());
    Tensor<T> out(bc.out);
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    for_each_broadcast(bc, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] + pb[ib]; });
    const std::size_t ida = a.id(), idb = b.id();
    return a.tape().push("add", std::move(out), {a, b}, [ida, idb, bc](Tape<T>& tape, const Tensor<T>& g) {
        if (tape.requires_grad(ida)) {
            T* ga = tape.grad_buffer(ida).data();
            for_each_broadcast(bc, [&](std::size_t io, std::size_t ia, std::size_t) { ga[ia] += g[io]; });
        }
        if (tape.requires_grad(idb)) {
            T* gb = tape.grad_buffer(idb).data();
            for_each_broadcast(bc, [&](std::size_t io, std::size_t, std::size_t ib) { gb[ib] += g[io]; });
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    const auto bc = broadcast_shapes("sub", a.shape(), b.shape());
    Tensor<T> out(bc.out);
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    for_each_broadcast(bc, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] - pb[ib]; });
    const std::size_t ida = a.id(), idb = b.id();
    return a.tape().push("sub", std::move(out), {a, b}, [ida, idb, bc](Tape<T>& tape, const Tensor<T>& g) {
        if (tape.requires_grad(ida)) {
            T* ga = tape.grad_buffer(ida).data();
            for_each_broadcast(bc, [&](std::size_t io, std::size_t ia, std::size_t) { ga[ia] += g[io]; });
        }
        if (tape.requires_grad(idb)) {
            T* gb = tape.grad_buffer(idb).data();
            for_each_broadcast(bc, [&](std::size_t io, std::size_t, std::size_t ib) { gb[ib] -= g[io]; });
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    const auto bc = broadcast_shapes("mul", a.shape(), b.shape());
    Tensor<T> out(bc.out);
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    for_each_broadcast(bc, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] * pb[ib]; });
    const std::size_t ida = a.id(), idb = b.id();
    return a.tape().push("mul", std::move(out), {a, b}, [ida, idb, bc](Tape<T>& tape, const Tensor<T>& g) {
        const T* va = tape.value(ida).data();
        const T* vb = tape.value(idb).data();
        if (tape.requires_grad(ida)) {
            T* ga = tape.grad_buffer(ida).data();
            for_each_broadcast(bc, [&](std::size_t io, std::size_t ia, std::size_t ib) { ga[ia] += g[io] * vb[ib]; });
        }
        if (tape.requires_grad(idb)) {
            T* gb = tape.grad_buffer(idb).data();
            for_each_broadcast(bc, [&](std::size_t io, std::size_t ia, std::size_t ib) { gb[ib] += g[io] * va[ia]; });
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, T c) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v *= c;
    const std::size_t ida = a.id();
    return a.tape().push("scale", std::move(out), {a}, [ida, c](Tape<T>& tape, const Tensor<T>& g) {
        auto& ga = tape.grad_buffer(ida);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
}

template <typename T>
Var<T> exp(Var<T> a) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v = std::exp(v);
    const std::size_t ida = a.id();
    const std::size_t self = a.tape().size();
    return a.tape().push("exp", std::move(out), {a}, [ida, self](Tape<T>& tape, const Tensor<T>& g) {
        auto& ga = tape.grad_buffer(ida);
        const auto& y = tape.value(self);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    });
}

template <typename T>
Var<T> log(Var<T> a) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) {
        if (!(v > T(0))) throw NumericError("log: non-positive input " + std::to_string(double(v)));
        v = std::log(v);
    }
    const std::size_t ida = a.id();
    return a.tape().push("log", std::move(out), {a}, [ida](Tape<T>& tape, const Tensor<T>& g) {
        auto& ga = tape.grad_buffer(ida);
        const auto& x = tape.value(ida);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
    });
}

template <typename T>
Var<T> square(Var<T> a) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v = v * v;
    const std::size_t ida = a.id();
    return a.tape().push("square", std::move(out), {a}, [ida](Tape<T>& tape, const Tensor<T>& g) {
        auto& ga = tape.grad_buffer(ida);
        const auto& x = tape.value(ida);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T(2) * x[i] * g[i];
    });
}

template <typename T>
Var<T> sum(Var<T> a) {
    T s = 0;
    for (const T v : a.value().storage()) s += v;
    const std::size_t ida = a.id();
    return a.tape().push("sum", Tensor<T>::scalar(s), {a}, [ida](Tape<T>& tape, const Tensor<T>& g) {
        auto& ga = tape.grad_buffer(ida);
        const T gv = g[0];
        for (auto& v : ga.storage()) v += gv;
    });
}

template <typename T>
Var<T> sum(Var<T> a, std::size_t axis, bool keepdim) {
    std::size_t outer, n, inner;
    axis_split(a.shape(), axis, outer, n, inner);
    Shape shape = a.shape();
    if (keepdim) shape[axis] = 1;
    else shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor<T> out(shape, T(0));
    const T* x = a.value().data();
    T* o = out.data();
    for (std::size_t p = 0; p < outer; ++p) {
        for (std::size_t k = 0; k < n; ++k) {
            const T* row = x + (p * n + k) * inner;
            T* dst = o + p * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
        }
    }
    const std::size_t ida = a.id();
    return a.tape().push("sum_axis", std::move(out), {a}, [ida, outer, n, inner](Tape<T>& tape, const Tensor<T>& g) {
        T* ga = tape.grad_buffer(ida).data();
        for (std::size_t p = 0; p < outer; ++p) {
            for (std::size_t k = 0; k < n; ++k) {
                T* row = ga + (p * n + k) * inner;
                const T* src = g.data() + p * inner;
                for (std::size_t i = 0; i < inner; ++i) row[i] += src[i];
            }
        }
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    return mul(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
    if (!a.value().all_finite()) throw NumericError("softmax: non-finite logits (NaN/Inf in input)");
    std::size_t outer, n, inner;
    axis_split(a.shape(), axis, outer, n, inner);
    Tensor<T> out(a.shape());
    const T* x = a.value().data();
    T* y = out.data();
    for (std::size_t p = 0; p < outer; ++p) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = p * n * inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
            T s = 0;
            for (std::size_t k = 0; k < n; ++k) {
                const T e = std::exp(x[base + k * inner] - mx);
                y[base + k * inner] = e;
                s += e;
            }
            const T inv = T(1) / s;
            for (std::size_t k = 0; k < n; ++k) y[base + k * inner] *= inv;
        }
    }
    const std::size_t ida = a.id();
    const std::size_t idr = a.tape().size();
    return a.tape().push("softmax", std::move(out), {a}, [ida, idr, outer, n, inner](Tape<T>& tape, const Tensor<T>& g) {
        T* ga = tape.grad_buffer(ida).data();
        const T* yv = tape.value(idr).data();
        for (std::size_t p = 0; p < outer; ++p) {
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = p * n * inner + i;
                T dot = 0;
                for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * yv[base + k * inner];
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t j = base + k * inner;
                    ga[j] += yv[j] * (g[j] - dot);
                }
            }
        }
    });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    }
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    Tensor<T> out(Shape{n, m}, T(0));
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            const T aij = pa[i * k + j];
            const T* brow = pb + j * m;
            T* orow = po + i * m;
            for (std::size_t c = 0; c < m; ++c) orow[c] += aij * brow[c];
        }
    }
    const std::size_t ida = a.id(), idb = b.id();
    return a.tape().push("matmul", std::move(out), {a, b}, [ida, idb, n, k, m](Tape<T>& tape, const Tensor<T>& g) {
        const T* va = tape.value(ida).data();
        const T* vb = tape.value(idb).data();
        if (tape.requires_grad(ida)) {
            T* ga = tape.grad_buffer(ida).data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    T s = 0;
                    for (std::size_t c = 0; c < m; ++c) s += g[i * m + c] * vb[j * m + c];
                    ga[i * k + j] += s;
                }
            }
        }
        if (tape.requires_grad(idb)) {
            T* gb = tape.grad_buffer(idb).data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    const T aij = va[i * k + j];
                    for (std::size_t c = 0; c < m; ++c) gb[j * m + c] += aij * g[i * m + c];
                }
            }
        }
    });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    const std::size_t ida = a.id();
    return a.tape().push("reshape", std::move(out), {a}, [ida](Tape<T>& tape, const Tensor<T>& g) {
        add_into(tape.grad_buffer(ida).storage(), g.storage());
    });
}

template <typename T>
Var<T> channel_project(Var<T> a, Var<T> weight) {
    const Shape& s = a.shape();
    const Shape& ws = weight.shape();
    if (s.empty() || ws.size() != 2 || ws[0] != s.back()) {
        throw ShapeError("channel_project: input " + shape_str(s) + " does not match weight " + shape_str(ws));
    }
    const std::size_t cin = ws[0], cout = ws[1];
    const std::size_t rows = a.value().size() / cin;
    Shape out_shape = s;
    out_shape.back() = cout;
    Tensor<T> out(out_shape, T(0));
    const T* x = a.value().data();
    const T* w = weight.value().data();
    T* o = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cin;
        T* orow = o + r * cout;
        for (std::size_t i = 0; i < cin; ++i) {
            const T xi = xr[i];
            const T* wrow = w + i * cout;
            for (std::size_t c = 0; c < cout; ++c) orow[c] += xi * wrow[c];
        }
    }
    const std::size_t ida = a.id(), idw = weight.id();
    return a.tape().push("channel_project", std::move(out), {a, weight},
                         [ida, idw, rows, cin, cout](Tape<T>& tape, const Tensor<T>& g) {
        const T* xv = tape.value(ida).data();
        const T* wv = tape.value(idw).data();
        if (tape.requires_grad(ida)) {
            T* ga = tape.grad_buffer(ida).data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g.data() + r * cout;
                for (std::size_t i = 0; i < cin; ++i) {
                    T s = 0;
                    for (std::size_t c = 0; c < cout; ++c) s += gr[c] * wv[i * cout + c];
                    ga[r * cin + i] += s;
                }
            }
        }
        if (tape.requires_grad(idw)) {
            T* gw = tape.grad_buffer(idw).data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g.data() + r * cout;
                for (std::size_t i = 0; i < cin; ++i) {
                    const T xi = xv[r * cin + i];
                    for (std::size_t c = 0; c < cout; ++c) gw[i * cout + c] += xi * gr[c];
                }
            }
        }
    });
}

template <typename T>
Var<T> remap(Var<T> a, std::shared_ptr<const RowMap> map, Shape out_prefix) {
    Tensor<T> out = pyrafeat::remap(a.value(), *map, std::move(out_prefix));
    const std::size_t ida = a.id();
    const std::size_t channels = a.shape().back();
    return a.tape().push("remap", std::move(out), {a}, [ida, map, channels](Tape<T>& tape, const Tensor<T>& g) {
        map->apply_transpose(g.data(), tape.grad_buffer(ida).data(), channels);
    });
}

template <typename T>
Var<T> gather_contract(Var<T> a, std::shared_ptr<const RowMap> map, Var<T> weights, Shape out_prefix) {
    const std::size_t channels = a.shape().empty() ? 0 : a.shape().back();
    const std::size_t p_rows = shape_numel(out_prefix);
    if (a.shape().empty() || a.value().size() != map->in_rows * channels) {
        throw ShapeError("gather_contract: input " + shape_str(a.shape()) + " does not match a map over " +
                         std::to_string(map->in_rows) + " rows");
    }
    if (p_rows == 0 || map->out_rows % p_rows != 0 || weights.value().size() != map->out_rows) {
        throw ShapeError("gather_contract: " + std::to_string(map->out_rows) + " gathered rows, weights " +
                         shape_str(weights.shape()) + ", output prefix " + shape_str(out_prefix));
    }
    const std::size_t k = map->out_rows / p_rows, taps = map->taps;
    Shape out_shape = out_prefix;
    out_shape.push_back(channels);
    Tensor<T> out(out_shape, T(0));
    const T* x = a.value().data();
    const T* wv = weights.value().data();
    for (std::size_t p = 0; p < p_rows; ++p) {
        T* o = out.data() + p * channels;
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t r = p * k + j;
            for (std::size_t t = 0; t < taps; ++t) {
                const T w = wv[r] * static_cast<T>(map->weight[r * taps + t]);
                if (w == T(0)) continue;
                const T* src = x + std::size_t(map->index[r * taps + t]) * channels;
                for (std::size_t c = 0; c < channels; ++c) o[c] += w * src[c];
            }
        }
    }
    const std::size_t ida = a.id(), idw = weights.id();
    return a.tape().push("gather_contract", std::move(out), {a, weights},
                         [ida, idw, map, p_rows, k, taps, channels](Tape<T>& tape, const Tensor<T>& g) {
        const T* xv = tape.value(ida).data();
        const T* wv = tape.value(idw).data();
        T* ga = tape.requires_grad(ida) ? tape.grad_buffer(ida).data() : nullptr;
        T* gw = tape.requires_grad(idw) ? tape.grad_buffer(idw).data() : nullptr;
        for (std::size_t p = 0; p < p_rows; ++p) {
            const T* gp = g.data() + p * channels;
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t r = p * k + j;
                T dw = 0;
                for (std::size_t t = 0; t < taps; ++t) {
                    const T mw = static_cast<T>(map->weight[r * taps + t]);
                    if (mw == T(0)) continue;
                    const std::size_t row = std::size_t(map->index[r * taps + t]) * channels;
                    if (gw) {
                        T s = 0;
                        for (std::size_t c = 0; c < channels; ++c) s += gp[c] * xv[row + c];
                        dw += mw * s;
                    }
                    if (ga) {
                        const T w = wv[r] * mw;
                        for (std::size_t c = 0; c < channels; ++c) ga[row + c] += w * gp[c];
                    }
                }
                if (gw) gw[r] += dw;
            }
        }
    });
}

template <typename T>
Var<T> gather_dot(Var<T> a, std::shared_ptr<const RowMap> map, Var<T> query, Shape out_prefix) {
    const std::size_t channels = a.shape().empty() ? 0 : a.shape().back();
    const std::size_t p_rows = shape_numel(out_prefix);
    if (a.shape().empty() || a.value().size() != map->in_rows * channels) {
        throw ShapeError("gather_dot: input " + shape_str(a.shape()) + " does not match a map over " +
                         std::to_string(map->in_rows) + " rows");
    }
    if (p_rows == 0 || map->out_rows % p_rows != 0 || query.value().size() != p_rows * channels) {
        throw ShapeError("gather_dot: " + std::to_string(map->out_rows) + " gathered rows, query " +
                         shape_str(query.shape()) + ", output prefix " + shape_str(out_prefix));
    }
    const std::size_t k = map->out_rows / p_rows, taps = map->taps;
    Shape out_shape = out_prefix;
    out_shape.push_back(k);
    Tensor<T> out(out_shape, T(0));
    const T* x = a.value().data();
    const T* qv = query.value().data();
    for (std::size_t p = 0; p < p_rows; ++p) {
        const T* q = qv + p * channels;
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t r = p * k + j;
            T acc = 0;
            for (std::size_t t = 0; t < taps; ++t) {
                const T mw = static_cast<T>(map->weight[r * taps + t]);
                if (mw == T(0)) continue;
                const T* src = x + std::size_t(map->index[r * taps + t]) * channels;
                T s = 0;
                for (std::size_t c = 0; c < channels; ++c) s += q[c] * src[c];
                acc += mw * s;
            }
            out[r] = acc;
        }
    }
    const std::size_t ida = a.id(), idq = query.id();
    return a.tape().push("gather_dot", std::move(out), {a, query},
                         [ida, idq, map, p_rows, k, taps, channels](Tape<T>& tape, const Tensor<T>& g) {
        const T* xv = tape.value(ida).data();
        const T* qv = tape.value(idq).data();
        T* ga = tape.requires_grad(ida) ? tape.grad_buffer(ida).data() : nullptr;
        T* gq = tape.requires_grad(idq) ? tape.grad_buffer(idq).data() : nullptr;
        for (std::size_t p = 0; p < p_rows; ++p) {
            const T* q = qv + p * channels;
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t r = p * k + j;
                const T gr = g[r];
                if (gr == T(0)) continue;
                for (std::size_t t = 0; t < taps; ++t) {
                    const T mw = static_cast<T>(map->weight[r * taps + t]);
                    if (mw == T(0)) continue;
                    const std::size_t row = std::size_t(map->index[r * taps + t]) * channels;
                    const T w = gr * mw;
                    if (ga)
                        for (std::size_t c = 0; c < channels; ++c) ga[row + c] += w * q[c];
                    if (gq)
                        for (std::size_t c = 0; c < channels; ++c) gq[p * channels + c] += w * xv[row + c];
                }
            }
        }
    });
}

template <typename T>
Var<T> bilinear_resample(Var<T> a, std::size_t dst_h, std::size_t dst_w) {
    require_hwc(a.value(), "bilinear_resample");
    auto map = std::make_shared<const RowMap>(bilinear_map(a.shape()[0], a.shape()[1], dst_h, dst_w));
    return remap(a, std::move(map), Shape{dst_h, dst_w});
}

template <typename T>
Var<T> window_gather(Var<T> a, std::size_t u) {
    require_hwc(a.value(), "window_gather");
    const std::size_t h = a.shape()[0], w = a.shape()[1];
    auto map = std::make_shared<const RowMap>(window_map(h, w, u));
    return remap(a, std::move(map), Shape{h, w, u * u});
}

#define PYRAFEAT_INSTANTIATE_OPS(T)                                                   \
    template Var<T> add(Var<T>, Var<T>);                                              \
    template Var<T> sub(Var<T>, Var<T>);                                              \
    template Var<T> mul(Var<T>, Var<T>);                                              \
    template Var<T> mul(Var<T>, T);                                                   \
    template Var<T> exp(Var<T>);                                                      \
    template Var<T> log(Var<T>);                                                      \
    template Var<T> square(Var<T>);                                                   \
    template Var<T> sum(Var<T>);                                                      \
    template Var<T> sum(Var<T>, std::size_t, bool);                                   \
    template Var<T> mean(Var<T>);                                                     \
    template Var<T> softmax(Var<T>, std::size_t);                                     \
    template Var<T> matmul(Var<T>, Var<T>);                                           \
    template Var<T> reshape(Var<T>, Shape);                                           \
    template Var<T> channel_project(Var<T>, Var<T>);                                  \
    template Var<T> remap(Var<T>, std::shared_ptr<const RowMap>, Shape);              \
    template Var<T> gather_contract(Var<T>, std::shared_ptr<const RowMap>, Var<T>, Shape); \
    template Var<T> gather_dot(Var<T>, std::shared_ptr<const RowMap>, Var<T>, Shape); \
    template Var<T> bilinear_resample(Var<T>, std::size_t, std::size_t);              \
    template Var<T> window_gather(Var<T>, std::size_t);

PYRAFEAT_INSTANTIATE_OPS(float)
PYRAFEAT_INSTANTIATE_OPS(double)

#undef PYRAFEAT_INSTANTIATE_OPS

}  // namespace ad

// ---------------------------------------------------------------------------

GradCheckResult finite_diff_check(const std::function<Var<double>(Tape<double>&)>& fn,
                                  const std::vector<Parameter<double>*>& params, double step) {
    Tape<double> tape;
    Var<double> loss = fn(tape);
    tape.backward(loss, /*accumulate=*/false);

    auto eval = [&fn]() {
        Tape<double> t(Tape<double>::Mode::inference);
        return fn(t).value().item();
    };

    GradCheckResult res;
    for (Parameter<double>* p : params) {
        GradCheckResult::Entry e;
        e.name = p->name;
        const Tensor<double> analytic = tape.grad_of(*p);
        if (p->frozen) {
            res.params.push_back(std::move(e));
            continue;
        }
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + step;
            const double up = eval();
            p->value[i] = orig - step;
            const double down = eval();
            p->value[i] = orig;
            const double numeric = (up - down) / (2 * step);
            const double a = analytic[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            e.max_rel_error = std::max(e.max_rel_error, std::abs(a - numeric) / denom);
            e.max_abs_analytic = std::max(e.max_abs_analytic, std::abs(a));
        }
        res.max_rel_error = std::max(res.max_rel_error, e.max_rel_error);
        res.params.push_back(std::move(e));
    }
    return res;
}

}  // namespace pyrafeat
