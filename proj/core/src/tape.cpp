#include "tetfit/tape.hpp"

#include <cmath>

namespace tetfit {

Tensor Tensor::zeros(std::string name, std::vector<std::size_t> shape) {
    Tensor t;
    t.name = std::move(name);
    t.shape = std::move(shape);
    std::size_t n = 1;
    for (std::size_t d : t.shape) n *= d;
    t.data.assign(n, 0.0);
    return t;
}

int ParamStore::add(std::string name, std::vector<std::size_t> shape) {
    if (find(name) >= 0) throw InvalidArgument("duplicate parameter tensor: " + name);
    tensors_.push_back(Tensor::zeros(std::move(name), std::move(shape)));
    return static_cast<int>(tensors_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
    for (std::size_t k = 0; k < tensors_.size(); ++k)
        if (tensors_[k].name == name) return static_cast<int>(k);
    return -1;
}

std::size_t ParamStore::total_size() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

std::uint32_t Tape::push_node() {
    node_edge_end_.push_back(static_cast<std::uint32_t>(edge_parent_.size()));
    return static_cast<std::uint32_t>(node_edge_end_.size()) - 1;
}

Val Tape::leaf(double value) {
    if (!std::isfinite(value)) throw NumericError("non-finite leaf value");
    return {value, push_node(), this};
}

std::uint32_t Tape::leaves(std::span<const double> values) {
    std::uint32_t first = static_cast<std::uint32_t>(node_edge_end_.size());
    std::uint32_t end = static_cast<std::uint32_t>(edge_parent_.size());
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError("non-finite leaf value");
        node_edge_end_.push_back(end);
    }
    return first;
}

Val Tape::unary(double value, std::uint32_t p, double d) {
    edge_parent_.push_back(p);
    edge_partial_.push_back(d);
    return {value, push_node(), this};
}

Val Tape::binary(double value, std::uint32_t p0, double d0, std::uint32_t p1, double d1) {
    edge_parent_.push_back(p0);
    edge_partial_.push_back(d0);
    edge_parent_.push_back(p1);
    edge_partial_.push_back(d1);
    return {value, push_node(), this};
}

Val Tape::nary(double value, std::span<const std::uint32_t> parents, std::span<const double> partials) {
    TETFIT_CHECK(parents.size() == partials.size(), "nary parent/partial length mismatch");
    edge_parent_.insert(edge_parent_.end(), parents.begin(), parents.end());
    edge_partial_.insert(edge_partial_.end(), partials.begin(), partials.end());
    return {value, push_node(), this};
}

int Tape::register_block(const Tensor& t) {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        if (blocks_[i].tensor == &t) return static_cast<int>(i);
    blocks_.push_back(Block{&t, {}, false});
    return static_cast<int>(blocks_.size()) - 1;
}

Val Tape::affine_row(int wblock, std::size_t w_off, int bblock, std::size_t b_off,
                     std::span<const Val> x) {
    TETFIT_CHECK(wblock >= 0 && wblock < static_cast<int>(blocks_.size()), "bad weight block");
    TETFIT_CHECK(bblock >= 0 && bblock < static_cast<int>(blocks_.size()), "bad bias block");
    const Tensor& wt = *blocks_[static_cast<std::size_t>(wblock)].tensor;
    const Tensor& bt = *blocks_[static_cast<std::size_t>(bblock)].tensor;
    TETFIT_CHECK(w_off + x.size() <= wt.size(), "weight row out of range");
    TETFIT_CHECK(b_off < bt.size(), "bias out of range");
    const double* w = wt.data.data() + w_off;

    double acc = bt.data[b_off];
    AffineRec rec;
    rec.vals_first = static_cast<std::uint32_t>(avals_.size());
    rec.n_in = static_cast<std::uint32_t>(x.size());
    rec.wblock = static_cast<std::uint32_t>(wblock);
    rec.bblock = static_cast<std::uint32_t>(bblock);
    rec.w_off = w_off;
    rec.b_off = b_off;
    for (std::size_t k = 0; k < x.size(); ++k) {
        acc += w[k] * x[k].v;
        avals_.push_back(x[k].v);
        if (!x[k].is_const()) {
            edge_parent_.push_back(x[k].i);
            edge_partial_.push_back(w[k]);
        }
    }
    rec.node = push_node();
    affine_.push_back(rec);
    return {acc, rec.node, this};
}

void Tape::backward(const Val& root) {
    TETFIT_CHECK(root.t == this && !root.is_const(), "backward root not on this tape");
    std::size_t n = node_edge_end_.size();
    adjoint_.assign(n, 0.0);
    adjoint_[root.i] = 1.0;
    for (auto& b : blocks_) {
        if (b.touched) {
            b.grad.assign(b.tensor->size(), 0.0);
            b.touched = false;
        }
    }
    const std::uint32_t* ep = edge_parent_.data();
    const double* ed = edge_partial_.data();
    for (std::size_t k = n; k-- > 0;) {
        double a = adjoint_[k];
        if (a == 0.0) continue;
        std::uint32_t e0 = k == 0 ? 0 : node_edge_end_[k - 1];
        std::uint32_t e1 = node_edge_end_[k];
        for (std::uint32_t e = e0; e < e1; ++e) adjoint_[ep[e]] += a * ed[e];
    }
    for (const AffineRec& rec : affine_) {
        double a = adjoint_[rec.node];
        if (a == 0.0) continue;
        Block& wb = blocks_[rec.wblock];
        Block& bb = blocks_[rec.bblock];
        if (wb.grad.size() != wb.tensor->size()) wb.grad.assign(wb.tensor->size(), 0.0);
        if (bb.grad.size() != bb.tensor->size()) bb.grad.assign(bb.tensor->size(), 0.0);
        wb.touched = bb.touched = true;
        bb.grad[rec.b_off] += a;
        double* gw = wb.grad.data() + rec.w_off;
        const double* xv = avals_.data() + rec.vals_first;
        for (std::uint32_t k = 0; k < rec.n_in; ++k) gw[k] += a * xv[k];
    }
}

double Tape::adjoint(std::uint32_t node) const {
    TETFIT_CHECK(node < adjoint_.size(), "adjoint read before backward or bad node");
    return adjoint_[node];
}

std::span<const double> Tape::block_grad(int block) const {
    const Block& b = blocks_[static_cast<std::size_t>(block)];
    if (!b.touched) return {};
    return {b.grad.data(), b.grad.size()};
}

void Tape::reset() {
    edge_parent_.clear();
    edge_partial_.clear();
    node_edge_end_.clear();
    affine_.clear();
    avals_.clear();
    adjoint_.clear();
    for (auto& b : blocks_) {
        b.touched = false;
        b.grad.clear();
    }
}

namespace detail {
Tape* common_tape(const Val& a, const Val& b) {
    if (!a.is_const() && !b.is_const())
        TETFIT_CHECK(a.t == b.t, "operands on different tapes");
    return !a.is_const() ? a.t : (!b.is_const() ? b.t : nullptr);
}
}  // namespace detail

Val operator+(const Val& a, const Val& b) {
    Tape* t = detail::common_tape(a, b);
    double v = a.v + b.v;
    if (!t) return {v};
    if (a.is_const()) return t->unary(v, b.i, 1.0);
    if (b.is_const()) return t->unary(v, a.i, 1.0);
    return t->binary(v, a.i, 1.0, b.i, 1.0);
}

Val operator-(const Val& a, const Val& b) {
    Tape* t = detail::common_tape(a, b);
    double v = a.v - b.v;
    if (!t) return {v};
    if (a.is_const()) return t->unary(v, b.i, -1.0);
    if (b.is_const()) return t->unary(v, a.i, 1.0);
    return t->binary(v, a.i, 1.0, b.i, -1.0);
}

Val operator*(const Val& a, const Val& b) {
    Tape* t = detail::common_tape(a, b);
    double v = a.v * b.v;
    if (!t) return {v};
    if (a.is_const()) return t->unary(v, b.i, a.v);
    if (b.is_const()) return t->unary(v, a.i, b.v);
    return t->binary(v, a.i, b.v, b.i, a.v);
}

Val operator/(const Val& a, const Val& b) {
    Tape* t = detail::common_tape(a, b);
    double v = a.v / b.v;
    if (!t) return {v};
    double ib = 1.0 / b.v;
    if (a.is_const()) return t->unary(v, b.i, -a.v * ib * ib);
    if (b.is_const()) return t->unary(v, a.i, ib);
    return t->binary(v, a.i, ib, b.i, -a.v * ib * ib);
}

Val operator-(const Val& a) {
    if (a.is_const()) return {-a.v};
    return a.t->unary(-a.v, a.i, -1.0);
}

Val val_tanh(const Val& a) {
    double y = std::tanh(a.v);
    if (a.is_const()) return {y};
    return a.t->unary(y, a.i, 1.0 - y * y);
}

Val val_sigmoid(const Val& a) {
    double y = 1.0 / (1.0 + std::exp(-a.v));
    if (a.is_const()) return {y};
    return a.t->unary(y, a.i, y * (1.0 - y));
}

Val val_sqrt(const Val& a) {
    double y = std::sqrt(a.v);
    if (a.is_const()) return {y};
    return a.t->unary(y, a.i, y > 0.0 ? 0.5 / y : 0.0);
}

Val val_abs(const Val& a) {
    double y = std::fabs(a.v);
    if (a.is_const()) return {y};
    double d = a.v > 0.0 ? 1.0 : (a.v < 0.0 ? -1.0 : 0.0);
    return a.t->unary(y, a.i, d);
}

Val val_relu(const Val& a) {
    double y = a.v > 0.0 ? a.v : 0.0;
    if (a.is_const()) return {y};
    return a.t->unary(y, a.i, a.v > 0.0 ? 1.0 : 0.0);
}

Val val_square(const Val& a) {
    double y = a.v * a.v;
    if (a.is_const()) return {y};
    return a.t->unary(y, a.i, 2.0 * a.v);
}

Val val_clamp(const Val& a, double lo, double hi) {
    double y = a.v < lo ? lo : (a.v > hi ? hi : a.v);
    if (a.is_const()) return {y};
    double d = (a.v > lo && a.v < hi) ? 1.0 : 0.0;
    return a.t->unary(y, a.i, d);
}

Val val_sq_dist(const Vec3Val& a, const Vec3Val& b) {
    const Val* pa = &a.x;
    const Val* pb = &b.x;
    double v = 0.0;
    std::uint32_t parents[6];
    double partials[6];
    std::size_t n = 0;
    Tape* t = nullptr;
    for (int c = 0; c < 3; ++c) {
        double d = pa[c].v - pb[c].v;
        v += d * d;
        if (!pa[c].is_const()) {
            parents[n] = pa[c].i;
            partials[n++] = 2.0 * d;
            t = pa[c].t;
        }
        if (!pb[c].is_const()) {
            parents[n] = pb[c].i;
            partials[n++] = -2.0 * d;
            t = pb[c].t;
        }
    }
    if (!t) return {v};
    return t->nary(v, {parents, n}, {partials, n});
}

Val val_det3(const Vec3Val& a, const Vec3Val& b, const Vec3Val& c) {
    Vec3 A = a.value(), B = b.value(), C = c.value();
    double v = dot(A, cross(B, C));
    Vec3 dA = cross(B, C), dB = cross(C, A), dC = cross(A, B);
    const Val* comps[3] = {&a.x, &b.x, &c.x};
    const Vec3* grads[3] = {&dA, &dB, &dC};
    std::uint32_t parents[9];
    double partials[9];
    std::size_t n = 0;
    Tape* t = nullptr;
    for (int k = 0; k < 3; ++k) {
        for (int cix = 0; cix < 3; ++cix) {
            const Val& x = comps[k][cix];
            if (x.is_const()) continue;
            parents[n] = x.i;
            partials[n++] = (*grads[k])[cix];
            t = x.t;
        }
    }
    if (!t) return {v};
    return t->nary(v, {parents, n}, {partials, n});
}

namespace {
Val reduce_sum(std::span<const Val> xs, double scale) {
    double v = 0.0;
    Tape* t = nullptr;
    std::size_t tracked = 0;
    for (const Val& x : xs) {
        v += x.v;
        if (!x.is_const()) {
            t = x.t;
            ++tracked;
        }
    }
    v *= scale;
    if (!t) return {v};
    std::vector<std::uint32_t> parents;
    std::vector<double> partials;
    parents.reserve(tracked);
    partials.reserve(tracked);
    for (const Val& x : xs)
        if (!x.is_const()) {
            parents.push_back(x.i);
            partials.push_back(scale);
        }
    return t->nary(v, parents, partials);
}
}  // namespace

Val val_mean(std::span<const Val> xs) {
    TETFIT_CHECK(!xs.empty(), "mean of empty span");
    return reduce_sum(xs, 1.0 / static_cast<double>(xs.size()));
}

Val val_sum(std::span<const Val> xs) {
    if (xs.empty()) return {0.0};
    return reduce_sum(xs, 1.0);
}

Val val_axpby(double c0, const Val& x0, double c1, const Val& x1, double offset) {
    Tape* t = detail::common_tape(x0, x1);
    double v = c0 * x0.v + c1 * x1.v + offset;
    if (!t) return {v};
    if (x0.is_const()) return t->unary(v, x1.i, c1);
    if (x1.is_const()) return t->unary(v, x0.i, c0);
    return t->binary(v, x0.i, c0, x1.i, c1);
}

}  // namespace tetfit
