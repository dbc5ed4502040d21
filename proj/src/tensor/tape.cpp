// SPDX-License-Identifier: Apache-2.0
#include "dta/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dta/error.hpp"
#include "dta/kernels.hpp"

namespace dta {

std::string_view kind_name(PrimitiveKind kind) {
    switch (kind) {
    case PrimitiveKind::leaf: return "leaf";
    case PrimitiveKind::add: return "add";
    case PrimitiveKind::sub: return "sub";
    case PrimitiveKind::mul: return "elementwise-mul";
    case PrimitiveKind::scale: return "scalar-mul";
    case PrimitiveKind::matmul: return "matmul";
    case PrimitiveKind::transpose: return "transpose";
    case PrimitiveKind::reshape: return "reshape";
    case PrimitiveKind::concat: return "concat";
    case PrimitiveKind::slice: return "slice";
    case PrimitiveKind::sum: return "sum";
    case PrimitiveKind::mean: return "mean";
    case PrimitiveKind::softmax: return "softmax";
    case PrimitiveKind::layer_norm: return "layer-norm";
    case PrimitiveKind::gelu: return "gelu";
    case PrimitiveKind::relu: return "relu";
    case PrimitiveKind::l2_norm: return "l2-norm";
    case PrimitiveKind::dot: return "dot";
    case PrimitiveKind::cosine_similarity: return "cosine-similarity";
    case PrimitiveKind::broadcast_add: return "broadcast-add";
    case PrimitiveKind::cross_entropy: return "cross-entropy";
    }
    return "unknown";
}

const Tensor& Var::value() const {
    if (!valid()) throw ContractError("use of an unbound Var");
    return tape->value(id);
}

namespace {

[[noreturn]] void shape_error(PrimitiveKind kind, const std::string& detail) {
    throw ContractError(std::string(kind_name(kind)) + ": " + detail);
}

std::string shapes_of(std::span<const Tensor* const> ts) {
    std::string s;
    for (size_t i = 0; i < ts.size(); ++i) {
        if (i) s += " and ";
        s += shape_str(ts[i]->shape());
    }
    return s;
}

int normalize_axis(int axis, int64_t rank, PrimitiveKind kind) {
    if (axis < 0) axis += static_cast<int>(rank);
    if (axis < 0 || axis >= rank) shape_error(kind, "axis out of range for rank " + std::to_string(rank));
    return axis;
}

// Splits a shape into (rows, last extent).
std::pair<int64_t, int64_t> rows_cols(const Shape& s) {
    const int64_t n = s.back();
    return {numel(s) / n, n};
}

Shape drop_last(const Shape& s) {
    if (s.size() <= 1) return Shape{1};
    return Shape(s.begin(), s.end() - 1);
}

void transpose2d(const float* src, int64_t rows, int64_t cols, float* dst) {
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

std::vector<int> resolve_perm(const std::vector<int>& perm, int64_t rank, PrimitiveKind kind) {
    std::vector<int> p = perm;
    if (p.empty()) {
        if (rank < 2) shape_error(kind, "default transpose needs rank >= 2");
        p.resize(static_cast<size_t>(rank));
        std::iota(p.begin(), p.end(), 0);
        std::swap(p[p.size() - 1], p[p.size() - 2]);
    }
    if (static_cast<int64_t>(p.size()) != rank) shape_error(kind, "permutation length does not match rank");
    std::vector<int> seen(p.size(), 0);
    for (int& a : p) {
        a = normalize_axis(a, rank, kind);
        if (seen[static_cast<size_t>(a)]++) shape_error(kind, "permutation repeats an axis");
    }
    return p;
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const Shape& in = x.shape();
    const size_t r = in.size();
    Shape out(r);
    for (size_t i = 0; i < r; ++i) out[i] = in[static_cast<size_t>(perm[i])];
    std::vector<int64_t> in_stride(r, 1);
    for (size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * in[i];
    std::vector<int64_t> step(r);
    for (size_t i = 0; i < r; ++i) step[i] = in_stride[static_cast<size_t>(perm[i])];

    Tensor y(out);
    auto dst = y.mutable_data();
    auto src = x.data();
    std::vector<int64_t> idx(r, 0);
    int64_t off = 0;
    for (int64_t o = 0; o < y.size(); ++o) {
        dst[static_cast<size_t>(o)] = src[static_cast<size_t>(off)];
        for (size_t d = r; d-- > 0;) {
            off += step[d];
            if (++idx[d] < out[d]) break;
            off -= step[d] * out[d];
            idx[d] = 0;
        }
    }
    return y;
}

// Matmul operand layout: either a shared right-hand matrix (b rank 2) or
// matching batch dims.
struct MatmulPlan {
    int64_t batch, m, k, n;
    bool shared_rhs;
    Shape out;
};

MatmulPlan plan_matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const Tensor* ts[] = {&a, &b};
    if (sa.size() < 2 || sb.size() < 2) shape_error(PrimitiveKind::matmul, "rank < 2 in " + shapes_of(ts));
    if (sb.size() == 2) {
        if (sa.back() != sb[0]) shape_error(PrimitiveKind::matmul, "inner extents differ in " + shapes_of(ts));
        Shape out = sa;
        out.back() = sb[1];
        return {1, numel(sa) / sa.back(), sa.back(), sb[1], true, out};
    }
    if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()) ||
        sa.back() != sb[sb.size() - 2])
        shape_error(PrimitiveKind::matmul, "incompatible batched shapes " + shapes_of(ts));
    Shape out = sa;
    out.back() = sb.back();
    const int64_t m = sa[sa.size() - 2];
    return {numel(sa) / (m * sa.back()), m, sa.back(), sb.back(), false, out};
}

float gelu_value(float x) {
    return static_cast<float>(0.5 * x * (1.0 + std::erf(static_cast<double>(x) * M_SQRT1_2)));
}

float gelu_grad(float x) {
    const double xd = x;
    const double cdf = 0.5 * (1.0 + std::erf(xd * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * xd * xd) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
    return static_cast<float>(cdf + xd * pdf);
}

void require_same(PrimitiveKind kind, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        const Tensor* ts[] = {&a, &b};
        shape_error(kind, "shape mismatch " + shapes_of(ts));
    }
}

size_t expect_arity(PrimitiveKind kind, size_t n) {
    switch (kind) {
    case PrimitiveKind::leaf: return 0;
    case PrimitiveKind::add:
    case PrimitiveKind::sub:
    case PrimitiveKind::mul:
    case PrimitiveKind::matmul:
    case PrimitiveKind::dot:
    case PrimitiveKind::cosine_similarity:
    case PrimitiveKind::broadcast_add: return 2;
    case PrimitiveKind::layer_norm: return 3;
    case PrimitiveKind::concat: return n == 0 ? 1 : n;
    default: return 1;
    }
}

} // namespace

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.kind = PrimitiveKind::leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(int32_t id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
        throw ContractError("node id " + std::to_string(id) + " not on tape");
    return nodes_[static_cast<size_t>(id)];
}

Var Tape::apply(PrimitiveKind kind, std::span<const Var> inputs, const OpAttrs& attrs) {
    if (kind == PrimitiveKind::leaf) throw ContractError("apply: leaf is not a primitive; use Tape::leaf");
    if (inputs.size() != expect_arity(kind, inputs.size()))
        shape_error(kind, "expected " + std::to_string(expect_arity(kind, inputs.size())) + " inputs, got " +
                              std::to_string(inputs.size()));
    std::vector<const Tensor*> in;
    Node node;
    node.kind = kind;
    node.attrs = attrs;
    for (const Var& v : inputs) {
        if (v.tape != this) throw ContractError(std::string(kind_name(kind)) + ": input belongs to another tape");
        const Node& src = this->node(v.id);
        in.push_back(&src.value);
        node.inputs.push_back(v.id);
        node.requires_grad = node.requires_grad || src.requires_grad;
    }
    const auto& K = kernels::active();

    switch (kind) {
    case PrimitiveKind::add:
    case PrimitiveKind::sub:
    case PrimitiveKind::mul: {
        require_same(kind, *in[0], *in[1]);
        Tensor out(in[0]->shape());
        auto o = out.mutable_data();
        auto a = in[0]->data();
        auto b = in[1]->data();
        if (kind == PrimitiveKind::add)
            for (size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
        else if (kind == PrimitiveKind::sub)
            for (size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
        else
            for (size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
        node.value = std::move(out);
        break;
    }
    case PrimitiveKind::scale: {
        Tensor out(in[0]->shape());
        auto o = out.mutable_data();
        auto a = in[0]->data();
        for (size_t i = 0; i < o.size(); ++i) o[i] = a[i] * attrs.scalar;
        node.value = std::move(out);
        break;
    }
    case PrimitiveKind::matmul: {
        const MatmulPlan p = plan_matmul(*in[0], *in[1]);
        Tensor out(p.out);
        float* o = out.mutable_data().data();
        const float* a = in[0]->data().data();
        const float* b = in[1]->data().data();
        if (p.shared_rhs) {
            K.gemm(p.m, p.n, p.k, a, b, o);
        } else {
            for (int64_t s = 0; s < p.batch; ++s)
                K.gemm(p.m, p.n, p.k, a + s * p.m * p.k, b + s * p.k * p.n, o + s * p.m * p.n);
        }
        node.value = std::move(out);
        break;
    }
    case PrimitiveKind::transpose: {
        node.attrs.perm = resolve_perm(attrs.perm, in[0]->rank(), kind);
        node.value = permute(*in[0], node.attrs.perm);
        break;
    }
    case PrimitiveKind::reshape: {
        if (numel(attrs.shape) != in[0]->size() ||
            std::any_of(attrs.shape.begin(), attrs.shape.end(), [](int64_t e) { return e <= 0; }))
            shape_error(kind, "cannot reshape " + shape_str(in[0]->shape()) + " to " + shape_str(attrs.shape));
        node.value = in[0]->reshaped(attrs.shape);
        break;
    }
    case PrimitiveKind::concat: {
        const int64_t rank = in[0]->rank();
        const int axis = normalize_axis(attrs.axis, rank, kind);
        node.attrs.axis = axis;
        Shape out_shape = in[0]->shape();
        out_shape[static_cast<size_t>(axis)] = 0;
        for (const Tensor* t : in) {
            if (t->rank() != rank) shape_error(kind, "rank mismatch " + shapes_of(in));
            for (int64_t d = 0; d < rank; ++d)
                if (d != axis && t->shape()[static_cast<size_t>(d)] != in[0]->shape()[static_cast<size_t>(d)])
                    shape_error(kind, "non-axis extents differ in " + shapes_of(in));
            out_shape[static_cast<size_t>(axis)] += t->dim(axis);
        }
        int64_t outer = 1;
        for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
        const int64_t inner = numel(out_shape) / (outer * out_shape[static_cast<size_t>(axis)]);
        Tensor out(out_shape);
        auto o = out.mutable_data();
        const int64_t out_row = out_shape[static_cast<size_t>(axis)] * inner;
        int64_t col = 0;
        for (const Tensor* t : in) {
            const int64_t w = t->dim(axis) * inner;
            auto src = t->data();
            for (int64_t r = 0; r < outer; ++r)
                std::copy_n(src.begin() + r * w, w, o.begin() + r * out_row + col);
            col += w;
        }
        node.value = std::move(out);
        break;
    }
    case PrimitiveKind::slice: {
        const Tensor& x = *in[0];
        const int axis = normalize_axis(attrs.axis, x.rank(), kind);
        node.attrs.axis = axis;
        if (attrs.start < 0 || attrs.length <= 0 || attrs.start + attrs.length > x.dim(axis))
            shape_error(kind, "range [" + std::to_string(attrs.start) + ", " +
                                  std::to_string(attrs.start + attrs.length) + ") outside " + shape_str(x.shape()));
        Shape out_shape = x.shape();
        out_shape[static_cast<size_t>(axis)] = attrs.length;
        int64_t outer = 1;
        for (int d = 0; d < axis; ++d) outer *= x.shape()[static_cast<size_t>(d)];
        const int64_t inner = x.size() / (outer * x.dim(axis));
        Tensor out(out_shape);
        auto o = out.mutable_data();
        auto src = x.data();
        const int64_t w = attrs.length * inner;
        for (int64_t r = 0; r < outer; ++r)
            std::copy_n(src.begin() + r * x.dim(axis) * inner + attrs.start * inner, w, o.begin() + r * w);
        node.value = std::move(out);
        break;
    }
    case PrimitiveKind::sum:
    case PrimitiveKind::mean: {
        const Tensor& x = *in[0];
        auto src = x.data();
        if (attrs.reduce_all) {
            double acc = 0.0;
            for (float v : src) acc += v;
            if (kind == PrimitiveKind::mean) acc /= static_cast<double>(x.size());
            node.value = Tensor::scalar(static_cast<float>(acc));
        } else {
            auto [rows, n] = rows_cols(x.shape());
            Tensor out(drop_last(x.shape()));
            auto o = out.mutable_data();
            for (int64_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (int64_t j = 0; j < n; ++j) acc += src[static_cast<size_t>(r * n + j)];
                if (kind == PrimitiveKind::mean) acc /= static_cast<double>(n);
                o[static_cast<size_t>(r)] = static_cast<float>(acc);
            }
            node.value = std::move(out);
        }
        break;
    }
    case PrimitiveKind::softmax: {
        const Tensor& x = *in[0];
        auto [rows, n] = rows_cols(x.shape());
        Tensor out(x.shape());
        auto o = out.mutable_data();
        auto src = x.data();
        for (int64_t r = 0; r < rows; ++r) {
            const float* xr = src.data() + r * n;
            float* orow = o.data() + r * n;
            const float mx = *std::max_element(xr, xr + n);
            double denom = 0.0;
            for (int64_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(xr[j] - mx));
            for (int64_t j = 0; j < n; ++j)
                orow[j] = static_cast<float>(std::exp(static_cast<double>(xr[j] - mx)) / denom);
        }
        node.value = std::move(out);
        break;
    }
    case PrimitiveKind::layer_norm: {
        const Tensor& x = *in[0];
        const Tensor& g = *in[1];
        const Tensor& b = *in[2];
        const int64_t n = x.shape().back();
        if (g.shape() != Shape{n} || b.shape() != Shape{n}) shape_error(kind, "affine shape mismatch " + shapes_of(in));
        const int64_t rows = x.size() / n;
        Tensor out(x.shape());
        Tensor mean_t(Shape{rows}), rstd_t(Shape{rows});
        auto o = out.mutable_data();
        auto mu = mean_t.mutable_data();
        auto rs = rstd_t.mutable_data();
        auto src = x.data();
        auto gd = g.data();
        auto bd = b.data();
        for (int64_t r = 0; r < rows; ++r) {
            const float* xr = src.data() + r * n;
            double m = 0.0;
            for (int64_t j = 0; j < n; ++j) m += xr[j];
            m /= static_cast<double>(n);
            double var = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                const double d = xr[j] - m;
                var += d * d;
            }
            var /= static_cast<double>(n);
            const double rstd = 1.0 / std::sqrt(var + static_cast<double>(attrs.eps));
            for (int64_t j = 0; j < n; ++j)
                o[static_cast<size_t>(r * n + j)] =
                    static_cast<float>((xr[j] - m) * rstd) * gd[static_cast<size_t>(j)] + bd[static_cast<size_t>(j)];
            mu[static_cast<size_t>(r)] = static_cast<float>(m);
            rs[static_cast<size_t>(r)] = static_cast<float>(rstd);
        }
        node.value = std::move(out);
        node.saved = {std::move(mean_t), std::move(rstd_t)};
        break;
    }
    case PrimitiveKind::gelu:
    case PrimitiveKind::relu: {
        Tensor out(in[0]->shape());
        auto o = out.mutable_data();
        auto src = in[0]->data();
        if (kind == PrimitiveKind::gelu)
            for (size_t i = 0; i < o.size(); ++i) o[i] = gelu_value(src[i]);
        else
            for (size_t i = 0; i < o.size(); ++i) o[i] = src[i] > 0.0f ? src[i] : 0.0f;
        node.value = std::move(out);
        break;
    }
    case PrimitiveKind::l2_norm: {
        auto [rows, n] = rows_cols(in[0]->shape());
        Tensor out(drop_last(in[0]->shape()));
        auto o = out.mutable_data();
        auto src = in[0]->data();
        for (int64_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                const double v = src[static_cast<size_t>(r * n + j)];
                acc += v * v;
            }
            o[static_cast<size_t>(r)] = static_cast<float>(std::sqrt(acc));
        }
        node.value = std::move(out);
        break;
    }
    case PrimitiveKind::dot:
    case PrimitiveKind::cosine_similarity: {
        require_same(kind, *in[0], *in[1]);
        auto [rows, n] = rows_cols(in[0]->shape());
        Tensor out(drop_last(in[0]->shape()));
        Tensor na(Shape{rows}), nb(Shape{rows});
        auto o = out.mutable_data();
        auto a = in[0]->data();
        auto b = in[1]->data();
        auto nad = na.mutable_data();
        auto nbd = nb.mutable_data();
        for (int64_t r = 0; r < rows; ++r) {
            double ab = 0.0, aa = 0.0, bb = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                const double x = a[static_cast<size_t>(r * n + j)];
                const double y = b[static_cast<size_t>(r * n + j)];
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            if (kind == PrimitiveKind::dot) {
                o[static_cast<size_t>(r)] = static_cast<float>(ab);
            } else {
                const double la = std::sqrt(aa), lb = std::sqrt(bb);
                o[static_cast<size_t>(r)] = (la == 0.0 || lb == 0.0) ? 0.0f : static_cast<float>(ab / (la * lb));
                nad[static_cast<size_t>(r)] = static_cast<float>(la);
                nbd[static_cast<size_t>(r)] = static_cast<float>(lb);
            }
        }
        node.value = std::move(out);
        if (kind == PrimitiveKind::cosine_similarity) node.saved = {std::move(na), std::move(nb)};
        break;
    }
    case PrimitiveKind::broadcast_add: {
        const Shape& sa = in[0]->shape();
        const Shape& sb = in[1]->shape();
        if (sb.size() > sa.size() || !std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size())))
            shape_error(kind, "second operand must match a trailing suffix of the first, got " + shapes_of(in));
        const int64_t inner = in[1]->size();
        const int64_t outer = in[0]->size() / inner;
        Tensor out(sa);
        auto o = out.mutable_data();
        auto a = in[0]->data();
        auto b = in[1]->data();
        for (int64_t r = 0; r < outer; ++r)
            for (int64_t j = 0; j < inner; ++j)
                o[static_cast<size_t>(r * inner + j)] = a[static_cast<size_t>(r * inner + j)] + b[static_cast<size_t>(j)];
        node.value = std::move(out);
        break;
    }
    case PrimitiveKind::cross_entropy: {
        const Tensor& x = *in[0];
        auto [rows, c] = rows_cols(x.shape());
        if (x.rank() > 2) shape_error(kind, "logits must be (classes) or (rows, classes), got " + shape_str(x.shape()));
        if (static_cast<int64_t>(attrs.labels.size()) != rows)
            shape_error(kind, std::to_string(attrs.labels.size()) + " labels for " + std::to_string(rows) + " rows");
        Tensor out(Shape{rows});
        Tensor probs(x.shape());
        auto o = out.mutable_data();
        auto p = probs.mutable_data();
        auto src = x.data();
        for (int64_t r = 0; r < rows; ++r) {
            const int32_t y = attrs.labels[static_cast<size_t>(r)];
            if (y < 0 || y >= c)
                throw ContractError("cross-entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
            const float* xr = src.data() + r * c;
            const float mx = *std::max_element(xr, xr + c);
            double denom = 0.0;
            for (int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(xr[j] - mx));
            const double lse = std::log(denom) + mx;
            for (int64_t j = 0; j < c; ++j)
                p[static_cast<size_t>(r * c + j)] = static_cast<float>(std::exp(static_cast<double>(xr[j] - mx)) / denom);
            o[static_cast<size_t>(r)] = static_cast<float>(lse - xr[y]);
        }
        node.value = std::move(out);
        node.saved = {std::move(probs)};
        break;
    }
    case PrimitiveKind::leaf: break;
    }

    if (!node.value.all_finite())
        throw NumericError(std::string(kind_name(kind)) + ": non-finite output for inputs " + shapes_of(in));
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Gradients Tape::backward(Var root) const {
    if (root.tape != this) throw ContractError("backward: root belongs to another tape");
    const Node& rn = node(root.id);
    if (rn.value.size() != 1)
        throw ContractError("backward: root must have a single element, got shape " + shape_str(rn.value.shape()));

    const auto& K = kernels::active();
    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[static_cast<size_t>(root.id)] = Tensor::ones(rn.value.shape());

    // Adds `g` into the gradient slot of node `id`, taking ownership when
    // the slot is empty.
    auto deposit = [&](int32_t id, Tensor g) {
        auto& slot = grads[static_cast<size_t>(id)];
        const Shape& target = nodes_[static_cast<size_t>(id)].value.shape();
        if (!slot) {
            slot = g.shape() == target ? std::move(g) : g.reshaped(target);
        } else {
            K.accumulate(g.size(), g.data().data(), slot->mutable_data().data());
        }
    };
    auto wants = [&](const Node& n, size_t i) { return nodes_[static_cast<size_t>(n.inputs[i])].requires_grad; };

    for (int32_t id = root.id; id >= 0; --id) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (n.kind == PrimitiveKind::leaf || !n.requires_grad || !grads[static_cast<size_t>(id)]) continue;
        const Tensor& gout = *grads[static_cast<size_t>(id)];
        auto go = gout.data();
        auto in = [&](size_t i) -> const Tensor& { return nodes_[static_cast<size_t>(n.inputs[i])].value; };

        switch (n.kind) {
        case PrimitiveKind::add:
            if (wants(n, 0)) deposit(n.inputs[0], gout);
            if (wants(n, 1)) deposit(n.inputs[1], gout);
            break;
        case PrimitiveKind::sub:
            if (wants(n, 0)) deposit(n.inputs[0], gout);
            if (wants(n, 1)) {
                Tensor g(gout.shape());
                auto d = g.mutable_data();
                for (size_t i = 0; i < d.size(); ++i) d[i] = -go[i];
                deposit(n.inputs[1], std::move(g));
            }
            break;
        case PrimitiveKind::mul:
            for (size_t s = 0; s < 2; ++s) {
                if (!wants(n, s)) continue;
                auto other = in(1 - s).data();
                Tensor g(gout.shape());
                auto d = g.mutable_data();
                for (size_t i = 0; i < d.size(); ++i) d[i] = go[i] * other[i];
                deposit(n.inputs[s], std::move(g));
            }
            break;
        case PrimitiveKind::scale: {
            Tensor g(gout.shape());
            auto d = g.mutable_data();
            for (size_t i = 0; i < d.size(); ++i) d[i] = go[i] * n.attrs.scalar;
            deposit(n.inputs[0], std::move(g));
            break;
        }
        case PrimitiveKind::matmul: {
            const MatmulPlan p = plan_matmul(in(0), in(1));
            const float* a = in(0).data().data();
            const float* b = in(1).data().data();
            if (wants(n, 0)) {
                // dA = dC * B^T
                Tensor g(in(0).shape());
                float* d = g.mutable_data().data();
                std::vector<float> bt(static_cast<size_t>(p.k * p.n));
                for (int64_t s = 0; s < p.batch; ++s) {
                    const int64_t bs = p.shared_rhs ? 0 : s;
                    transpose2d(b + bs * p.k * p.n, p.k, p.n, bt.data());
                    K.gemm(p.m, p.k, p.n, go.data() + s * p.m * p.n, bt.data(), d + s * p.m * p.k);
                }
                deposit(n.inputs[0], std::move(g));
            }
            if (wants(n, 1)) {
                // dB = A^T * dC
                Tensor g(in(1).shape());
                float* d = g.mutable_data().data();
                std::vector<float> at(static_cast<size_t>(p.m * p.k));
                for (int64_t s = 0; s < p.batch; ++s) {
                    transpose2d(a + s * p.m * p.k, p.m, p.k, at.data());
                    K.gemm(p.k, p.n, p.m, at.data(), go.data() + s * p.m * p.n, d + s * p.k * p.n);
                }
                deposit(n.inputs[1], std::move(g));
            }
            break;
        }
        case PrimitiveKind::transpose: {
            std::vector<int> inv(n.attrs.perm.size());
            for (size_t i = 0; i < inv.size(); ++i) inv[static_cast<size_t>(n.attrs.perm[i])] = static_cast<int>(i);
            deposit(n.inputs[0], permute(gout, inv));
            break;
        }
        case PrimitiveKind::reshape:
            deposit(n.inputs[0], gout.reshaped(in(0).shape()));
            break;
        case PrimitiveKind::concat: {
            const int axis = n.attrs.axis;
            const Shape& os = n.value.shape();
            int64_t outer = 1;
            for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
            const int64_t inner = n.value.size() / (outer * os[static_cast<size_t>(axis)]);
            const int64_t out_row = os[static_cast<size_t>(axis)] * inner;
            int64_t col = 0;
            for (size_t s = 0; s < n.inputs.size(); ++s) {
                const int64_t w = in(s).dim(axis) * inner;
                if (wants(n, s)) {
                    Tensor g(in(s).shape());
                    auto d = g.mutable_data();
                    for (int64_t r = 0; r < outer; ++r)
                        std::copy_n(go.begin() + r * out_row + col, w, d.begin() + r * w);
                    deposit(n.inputs[s], std::move(g));
                }
                col += w;
            }
            break;
        }
        case PrimitiveKind::slice: {
            const Tensor& x = in(0);
            const int axis = n.attrs.axis;
            int64_t outer = 1;
            for (int d = 0; d < axis; ++d) outer *= x.shape()[static_cast<size_t>(d)];
            const int64_t inner = x.size() / (outer * x.dim(axis));
            const int64_t w = n.attrs.length * inner;
            Tensor g(x.shape());
            auto d = g.mutable_data();
            for (int64_t r = 0; r < outer; ++r)
                std::copy_n(go.begin() + r * w, w, d.begin() + r * x.dim(axis) * inner + n.attrs.start * inner);
            deposit(n.inputs[0], std::move(g));
            break;
        }
        case PrimitiveKind::sum:
        case PrimitiveKind::mean: {
            const Tensor& x = in(0);
            Tensor g(x.shape());
            auto d = g.mutable_data();
            if (n.attrs.reduce_all) {
                float v = go[0];
                if (n.kind == PrimitiveKind::mean) v = static_cast<float>(go[0] / static_cast<double>(x.size()));
                std::fill(d.begin(), d.end(), v);
            } else {
                auto [rows, cols] = rows_cols(x.shape());
                for (int64_t r = 0; r < rows; ++r) {
                    float v = go[static_cast<size_t>(r)];
                    if (n.kind == PrimitiveKind::mean) v = static_cast<float>(v / static_cast<double>(cols));
                    std::fill_n(d.begin() + r * cols, cols, v);
                }
            }
            deposit(n.inputs[0], std::move(g));
            break;
        }
        case PrimitiveKind::softmax: {
            auto [rows, cols] = rows_cols(n.value.shape());
            auto y = n.value.data();
            Tensor g(n.value.shape());
            auto d = g.mutable_data();
            for (int64_t r = 0; r < rows; ++r) {
                double s = 0.0;
                for (int64_t j = 0; j < cols; ++j)
                    s += static_cast<double>(go[static_cast<size_t>(r * cols + j)]) * y[static_cast<size_t>(r * cols + j)];
                for (int64_t j = 0; j < cols; ++j) {
                    const size_t i = static_cast<size_t>(r * cols + j);
                    d[i] = static_cast<float>(y[i] * (go[i] - s));
                }
            }
            deposit(n.inputs[0], std::move(g));
            break;
        }
        case PrimitiveKind::layer_norm: {
            const Tensor& x = in(0);
            const Tensor& gamma = in(1);
            const int64_t cols = x.shape().back();
            const int64_t rows = x.size() / cols;
            auto xs = x.data();
            auto gm = gamma.data();
            auto mu = n.saved[0].data();
            auto rs = n.saved[1].data();
            std::vector<double> dgamma(static_cast<size_t>(cols), 0.0), dbeta(static_cast<size_t>(cols), 0.0);
            Tensor gx(x.shape());
            auto dx = gx.mutable_data();
            std::vector<double> xhat(static_cast<size_t>(cols)), dxhat(static_cast<size_t>(cols));
            for (int64_t r = 0; r < rows; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (int64_t j = 0; j < cols; ++j) {
                    const size_t i = static_cast<size_t>(r * cols + j);
                    xhat[static_cast<size_t>(j)] = (static_cast<double>(xs[i]) - mu[static_cast<size_t>(r)]) * rs[static_cast<size_t>(r)];
                    dxhat[static_cast<size_t>(j)] = static_cast<double>(go[i]) * gm[static_cast<size_t>(j)];
                    dgamma[static_cast<size_t>(j)] += static_cast<double>(go[i]) * xhat[static_cast<size_t>(j)];
                    dbeta[static_cast<size_t>(j)] += go[i];
                    m1 += dxhat[static_cast<size_t>(j)];
                    m2 += dxhat[static_cast<size_t>(j)] * xhat[static_cast<size_t>(j)];
                }
                m1 /= static_cast<double>(cols);
                m2 /= static_cast<double>(cols);
                for (int64_t j = 0; j < cols; ++j)
                    dx[static_cast<size_t>(r * cols + j)] = static_cast<float>(
                        rs[static_cast<size_t>(r)] * (dxhat[static_cast<size_t>(j)] - m1 - xhat[static_cast<size_t>(j)] * m2));
            }
            if (wants(n, 0)) deposit(n.inputs[0], std::move(gx));
            if (wants(n, 1)) {
                std::vector<float> v(dgamma.begin(), dgamma.end());
                deposit(n.inputs[1], Tensor(Shape{cols}, std::move(v)));
            }
            if (wants(n, 2)) {
                std::vector<float> v(dbeta.begin(), dbeta.end());
                deposit(n.inputs[2], Tensor(Shape{cols}, std::move(v)));
            }
            break;
        }
        case PrimitiveKind::gelu:
        case PrimitiveKind::relu: {
            auto x = in(0).data();
            Tensor g(in(0).shape());
            auto d = g.mutable_data();
            if (n.kind == PrimitiveKind::gelu)
                for (size_t i = 0; i < d.size(); ++i) d[i] = go[i] * gelu_grad(x[i]);
            else
                for (size_t i = 0; i < d.size(); ++i) d[i] = x[i] > 0.0f ? go[i] : 0.0f;
            deposit(n.inputs[0], std::move(g));
            break;
        }
        case PrimitiveKind::l2_norm: {
            const Tensor& x = in(0);
            auto [rows, cols] = rows_cols(x.shape());
            auto xs = x.data();
            auto nv = n.value.data();
            Tensor g(x.shape());
            auto d = g.mutable_data();
            for (int64_t r = 0; r < rows; ++r) {
                const float len = nv[static_cast<size_t>(r)];
                const double coef = len == 0.0f ? 0.0 : static_cast<double>(go[static_cast<size_t>(r)]) / len;
                for (int64_t j = 0; j < cols; ++j) {
                    const size_t i = static_cast<size_t>(r * cols + j);
                    d[i] = static_cast<float>(coef * xs[i]);
                }
            }
            deposit(n.inputs[0], std::move(g));
            break;
        }
        case PrimitiveKind::dot: {
            auto [rows, cols] = rows_cols(in(0).shape());
            for (size_t s = 0; s < 2; ++s) {
                if (!wants(n, s)) continue;
                auto other = in(1 - s).data();
                Tensor g(in(s).shape());
                auto d = g.mutable_data();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < cols; ++j) {
                        const size_t i = static_cast<size_t>(r * cols + j);
                        d[i] = go[static_cast<size_t>(r)] * other[i];
                    }
                deposit(n.inputs[s], std::move(g));
            }
            break;
        }
        case PrimitiveKind::cosine_similarity: {
            auto [rows, cols] = rows_cols(in(0).shape());
            auto cv = n.value.data();
            for (size_t s = 0; s < 2; ++s) {
                if (!wants(n, s)) continue;
                auto self = in(s).data();
                auto other = in(1 - s).data();
                auto ns = n.saved[s].data();
                auto no = n.saved[1 - s].data();
                Tensor g(in(s).shape());
                auto d = g.mutable_data();
                for (int64_t r = 0; r < rows; ++r) {
                    const double ls = ns[static_cast<size_t>(r)], lo = no[static_cast<size_t>(r)];
                    if (ls == 0.0 || lo == 0.0) continue;
                    const double gr = go[static_cast<size_t>(r)];
                    const double c = cv[static_cast<size_t>(r)];
                    for (int64_t j = 0; j < cols; ++j) {
                        const size_t i = static_cast<size_t>(r * cols + j);
                        d[i] = static_cast<float>(gr * (other[i] / (ls * lo) - c * self[i] / (ls * ls)));
                    }
                }
                deposit(n.inputs[s], std::move(g));
            }
            break;
        }
        case PrimitiveKind::broadcast_add: {
            if (wants(n, 0)) deposit(n.inputs[0], gout);
            if (wants(n, 1)) {
                const int64_t inner = in(1).size();
                const int64_t outer = gout.size() / inner;
                std::vector<double> acc(static_cast<size_t>(inner), 0.0);
                for (int64_t r = 0; r < outer; ++r)
                    for (int64_t j = 0; j < inner; ++j) acc[static_cast<size_t>(j)] += go[static_cast<size_t>(r * inner + j)];
                deposit(n.inputs[1], Tensor(in(1).shape(), std::vector<float>(acc.begin(), acc.end())));
            }
            break;
        }
        case PrimitiveKind::cross_entropy: {
            auto [rows, c] = rows_cols(in(0).shape());
            auto p = n.saved[0].data();
            Tensor g(in(0).shape());
            auto d = g.mutable_data();
            for (int64_t r = 0; r < rows; ++r) {
                const float gr = go[static_cast<size_t>(r)];
                for (int64_t j = 0; j < c; ++j) {
                    const size_t i = static_cast<size_t>(r * c + j);
                    d[i] = gr * (p[i] - (j == n.attrs.labels[static_cast<size_t>(r)] ? 1.0f : 0.0f));
                }
            }
            deposit(n.inputs[0], std::move(g));
            break;
        }
        case PrimitiveKind::leaf: break;
        }
    }
    return Gradients(this, std::move(grads));
}

Tensor Gradients::of(Var v) const {
    if (v.tape != tape_) throw ContractError("gradient requested for a node of another tape");
    const auto& n = tape_->node(v.id);
    if (!n.requires_grad)
        throw ContractError("gradient requested for node " + std::to_string(v.id) + " that does not require grad");
    const auto& g = grads_[static_cast<size_t>(v.id)];
    return g ? *g : Tensor::zeros(n.value.shape());
}

bool Gradients::reached(Var v) const {
    return v.tape == tape_ && v.id >= 0 && static_cast<size_t>(v.id) < grads_.size() &&
           grads_[static_cast<size_t>(v.id)].has_value();
}

Tensor apply_primitive(PrimitiveKind kind, std::span<const Var> inputs, Tape& tape, const OpAttrs& attrs) {
    return tape.apply(kind, inputs, attrs).value();
}

namespace {
Var unary(PrimitiveKind k, Var a, const OpAttrs& attrs = {}) {
    const Var in[] = {a};
    return a.tape->apply(k, in, attrs);
}
Var binary(PrimitiveKind k, Var a, Var b) {
    const Var in[] = {a, b};
    return a.tape->apply(k, in);
}
} // namespace

Var add(Var a, Var b) { return binary(PrimitiveKind::add, a, b); }
Var sub(Var a, Var b) { return binary(PrimitiveKind::sub, a, b); }
Var mul(Var a, Var b) { return binary(PrimitiveKind::mul, a, b); }
Var matmul(Var a, Var b) { return binary(PrimitiveKind::matmul, a, b); }
Var dot(Var a, Var b) { return binary(PrimitiveKind::dot, a, b); }
Var cosine_similarity(Var a, Var b) { return binary(PrimitiveKind::cosine_similarity, a, b); }
Var broadcast_add(Var a, Var b) { return binary(PrimitiveKind::broadcast_add, a, b); }

Var scale(Var a, float s) {
    OpAttrs at;
    at.scalar = s;
    return unary(PrimitiveKind::scale, a, at);
}

Var transpose(Var a, std::vector<int> perm) {
    OpAttrs at;
    at.perm = std::move(perm);
    return unary(PrimitiveKind::transpose, a, at);
}

Var reshape(Var a, Shape shape) {
    OpAttrs at;
    at.shape = std::move(shape);
    return unary(PrimitiveKind::reshape, a, at);
}

Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    OpAttrs at;
    at.axis = axis;
    return parts[0].tape->apply(PrimitiveKind::concat, parts, at);
}

Var slice(Var a, int axis, int64_t start, int64_t length) {
    OpAttrs at;
    at.axis = axis;
    at.start = start;
    at.length = length;
    return unary(PrimitiveKind::slice, a, at);
}

Var sum(Var a) { return unary(PrimitiveKind::sum, a); }
Var mean(Var a) { return unary(PrimitiveKind::mean, a); }

Var sum_last(Var a) {
    OpAttrs at;
    at.reduce_all = false;
    return unary(PrimitiveKind::sum, a, at);
}

Var mean_last(Var a) {
    OpAttrs at;
    at.reduce_all = false;
    return unary(PrimitiveKind::mean, a, at);
}

Var softmax(Var a) { return unary(PrimitiveKind::softmax, a); }
Var gelu(Var a) { return unary(PrimitiveKind::gelu, a); }
Var relu(Var a) { return unary(PrimitiveKind::relu, a); }
Var l2_norm(Var a) { return unary(PrimitiveKind::l2_norm, a); }

Var layer_norm(Var x, Var gamma, Var beta, float eps) {
    OpAttrs at;
    at.eps = eps;
    const Var in[] = {x, gamma, beta};
    return x.tape->apply(PrimitiveKind::layer_norm, in, at);
}

Var cross_entropy(Var logits, std::vector<int32_t> labels) {
    OpAttrs at;
    at.labels = std::move(labels);
    return unary(PrimitiveKind::cross_entropy, logits, at);
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw ContractError("finite_difference_gradient: step must be positive");
    Tensor grad(x.shape());
    auto g = grad.mutable_data();
    Tensor probe = x;
    for (size_t i = 0; i < g.size(); ++i) {
        // Re-fetch the span each time: f may have kept a reference to probe.
        const float orig = probe[static_cast<int64_t>(i)];
        const float up = static_cast<float>(orig + h);
        const float down = static_cast<float>(orig - h);
        probe.mutable_data()[i] = up;
        const double fu = f(probe);
        probe.mutable_data()[i] = down;
        const double fd = f(probe);
        probe.mutable_data()[i] = orig;
        if (!std::isfinite(fu) || !std::isfinite(fd))
            throw NumericError("finite_difference_gradient: non-finite function value at coordinate " + std::to_string(i));
        g[i] = static_cast<float>((fu - fd) / (static_cast<double>(up) - static_cast<double>(down)));
    }
    return grad;
}

} // namespace dta
