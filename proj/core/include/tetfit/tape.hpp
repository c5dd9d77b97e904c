#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tetfit/common.hpp"

namespace tetfit {

// Named f64 tensor. Shape is bookkeeping for serialization and optimizers;
// all math here runs on the flat data.
struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;

    std::size_t size() const { return data.size(); }
    static Tensor zeros(std::string name, std::vector<std::size_t> shape);
};

// Parameter collection shared by a model, its tapes, and its optimizer.
// Ids are stable for the lifetime of the store.
class ParamStore {
public:
    int add(std::string name, std::vector<std::size_t> shape);
    int find(const std::string& name) const;
    Tensor& at(int id) { return tensors_[static_cast<std::size_t>(id)]; }
    const Tensor& at(int id) const { return tensors_[static_cast<std::size_t>(id)]; }
    int count() const { return static_cast<int>(tensors_.size()); }
    std::size_t total_size() const;

private:
    std::vector<Tensor> tensors_;
};

class Tape;

// Scalar tracked on a tape. A default-constructed or double-converted Val is a
// constant: it has a value but no node, and gradients do not flow into it.
struct Val {
    double v = 0.0;
    std::uint32_t i = 0xffffffffu;
    Tape* t = nullptr;

    Val() = default;
    Val(double c) : v(c) {}  // NOLINT(google-explicit-constructor)
    Val(double value, std::uint32_t node, Tape* tape) : v(value), i(node), t(tape) {}

    bool is_const() const { return i == 0xffffffffu; }
};

struct Vec3Val {
    Val x, y, z;

    Vec3Val() = default;
    Vec3Val(Val x_, Val y_, Val z_) : x(x_), y(y_), z(z_) {}
    explicit Vec3Val(const Vec3& p) : x(p.x), y(p.y), z(p.z) {}

    Vec3 value() const { return {x.v, y.v, z.v}; }
};

// Reverse-mode record over scalar nodes. Each node stores only its incoming
// edges (parent id + local partial, frozen at record time), so the backward
// sweep is a single uniform loop. Dense-layer rows are recorded as affine
// nodes: their input edges carry the weights as partials, and a side record
// keeps the input values so backward can also accumulate weight and bias
// gradients into per-tape block buffers.
class Tape {
public:
    static constexpr std::uint32_t kNone = 0xffffffffu;

    Val leaf(double value);
    // Contiguous run of leaves; returns the id of the first.
    std::uint32_t leaves(std::span<const double> values);

    Val unary(double value, std::uint32_t p, double d);
    Val binary(double value, std::uint32_t p0, double d0, std::uint32_t p1, double d1);
    Val nary(double value, std::span<const std::uint32_t> parents, std::span<const double> partials);

    // Blocks must be registered before affine_row references them. The tensor
    // must outlive the tape's use of it. Registering the same tensor again
    // returns the existing id, so rebinding after reset() is harmless.
    int register_block(const Tensor& t);

    // value = dot(w_row, x) + bias, with w_row = wtensor.data[w_off ...] and
    // bias = btensor.data[b_off]. Constant inputs contribute no edge but still
    // receive weight-gradient accumulation.
    Val affine_row(int wblock, std::size_t w_off, int bblock, std::size_t b_off,
                   std::span<const Val> x);

    void backward(const Val& root);
    double adjoint(std::uint32_t node) const;
    // Zero-length if the block never received gradient on this tape.
    std::span<const double> block_grad(int block) const;

    // Drops all nodes but keeps capacity and registered blocks.
    void reset();

    std::size_t node_count() const { return node_edge_end_.size(); }
    std::size_t edge_count() const { return edge_parent_.size(); }

private:
    std::uint32_t push_node();

    std::vector<std::uint32_t> edge_parent_;
    std::vector<double> edge_partial_;
    std::vector<std::uint32_t> node_edge_end_;

    struct AffineRec {
        std::uint32_t node;
        std::uint32_t vals_first;
        std::uint32_t n_in;
        std::uint32_t wblock, bblock;
        std::size_t w_off, b_off;
    };
    std::vector<AffineRec> affine_;
    std::vector<double> avals_;

    struct Block {
        const Tensor* tensor;
        std::vector<double> grad;
        bool touched = false;
    };
    std::vector<Block> blocks_;
    std::vector<double> adjoint_;
};

// Arithmetic on Vals. Mixed const/tracked operands record only the edges that
// carry gradient. Two tracked operands must live on the same tape.

namespace detail {
Tape* common_tape(const Val& a, const Val& b);
}

Val operator+(const Val& a, const Val& b);
Val operator-(const Val& a, const Val& b);
Val operator*(const Val& a, const Val& b);
Val operator/(const Val& a, const Val& b);
Val operator-(const Val& a);

inline Val& operator+=(Val& a, const Val& b) { a = a + b; return a; }
inline Val& operator-=(Val& a, const Val& b) { a = a - b; return a; }
inline Val& operator*=(Val& a, const Val& b) { a = a * b; return a; }

Val val_tanh(const Val& a);
Val val_sigmoid(const Val& a);
Val val_sqrt(const Val& a);
Val val_abs(const Val& a);
Val val_relu(const Val& a);
Val val_square(const Val& a);
// Saturates outside [lo,hi]; gradient is masked to zero wherever saturation
// is active (boundary included).
Val val_clamp(const Val& a, double lo, double hi);

inline Vec3Val operator+(const Vec3Val& a, const Vec3Val& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3Val operator-(const Vec3Val& a, const Vec3Val& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3Val operator*(const Vec3Val& a, const Val& s) { return {a.x * s, a.y * s, a.z * s}; }

// Single node for |a-b|^2 of two 3D points (up to 6 edges).
Val val_sq_dist(const Vec3Val& a, const Vec3Val& b);
// Single node for the scalar triple product det[a,b,c] (up to 9 edges).
Val val_det3(const Vec3Val& a, const Vec3Val& b, const Vec3Val& c);
// Single node: mean of xs.
Val val_mean(std::span<const Val> xs);
// Single node: sum of xs.
Val val_sum(std::span<const Val> xs);
// Single node: c0*x0 + c1*x1 (+ offset), constants not tracked.
Val val_axpby(double c0, const Val& x0, double c1, const Val& x1, double offset = 0.0);

}  // namespace tetfit
