#pragma once

#include <span>
#include <string>
#include <vector>

#include "tetfit/common.hpp"
#include "tetfit/tape.hpp"

namespace tetfit {

enum class Activation { kIdentity, kRelu, kTanh };

// Fully connected layer whose tensors live in an external ParamStore. Weights
// are uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero; zero_init makes
// the layer start as the constant-zero map.
struct DenseLayer {
    int wid = -1, bid = -1;
    int in = 0, out = 0;
    Activation act = Activation::kIdentity;

    static DenseLayer make(ParamStore& store, const std::string& name, int in, int out,
                           Activation act, Rng& rng, bool zero_init = false);

    // Tape ids for the tensors on `tape`; call once per tape (after reset).
    struct Bound {
        int wblock = -1, bblock = -1;
    };
    Bound bind(Tape& tape, const ParamStore& store) const;

    void forward(Tape& tape, const Bound& b, std::span<const Val> x, std::vector<Val>& y) const;
    void forward_plain(const ParamStore& store, std::span<const double> x, std::vector<double>& y) const;
};

// Gated recurrent unit: z and r gates plus candidate state, input size I,
// hidden size H. Gate weight rows act on the concatenation [x, h] ([x, r*h]
// for the candidate).
struct GruCell {
    DenseLayer zl, rl, hl;  // each maps I+H -> H, identity activation
    int input = 0, hidden = 0;

    static GruCell make(ParamStore& store, const std::string& name, int input, int hidden, Rng& rng);

    struct Bound {
        DenseLayer::Bound z, r, h;
    };
    Bound bind(Tape& tape, const ParamStore& store) const;

    // h' = (1-z)*h + z*tanh(Wh [x, r*h] + bh)
    void forward(Tape& tape, const Bound& b, std::span<const Val> x, std::span<const Val> h,
                 std::vector<Val>& out) const;
};

// Per-tensor gradient buffers aligned with a ParamStore's ids.
using GradSet = std::vector<std::vector<double>>;

GradSet make_gradset(const ParamStore& store);
void zero_gradset(GradSet& g);
// dst += src, elementwise; shapes must match.
void accumulate_gradset(GradSet& dst, const GradSet& src);
// Pull one tape's block gradients (and leaf-range adjoints, if any) into `dst`.
void tape_grads_into(const Tape& tape, std::span<const int> block_of_param, GradSet& dst);

enum class OptimizerKind { kSgdMomentum, kAdam };
enum class LrSchedule { kConstant, kCosine };

// sgd-momentum: buf = mu*buf + g + wd*p; p -= lr*buf.
// adam: bias-corrected first/second moments, decoupled weight decay.
class Optimizer {
public:
    Optimizer() = default;
    Optimizer(OptimizerKind kind, double lr, double momentum, double weight_decay);

    void step(ParamStore& params, const GradSet& grads, double lr_scale = 1.0);

    OptimizerKind kind() const { return kind_; }
    long step_count() const { return t_; }
    double base_lr() const { return lr_; }

    // State round-trip for checkpoints.
    std::vector<Tensor> state_tensors(const ParamStore& params) const;
    void load_state(const ParamStore& params, const std::vector<Tensor>& state, long step_count);

private:
    void ensure_buffers(const ParamStore& params);

    OptimizerKind kind_ = OptimizerKind::kSgdMomentum;
    double lr_ = 0.01, momentum_ = 0.99, wd_ = 3e-5;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    long t_ = 0;
    std::vector<std::vector<double>> buf_, m_, v_;
};

// Effective learning-rate factor for iteration `it` of `total`.
double lr_schedule_scale(LrSchedule s, long it, long total);

// Versioned binary container: meta string (JSON by convention) plus named f64
// tensors with shapes. Byte-exact round trip.
void save_tensors(const std::string& path, std::span<const Tensor> tensors, const std::string& meta);
std::vector<Tensor> load_tensors(const std::string& path, std::string& meta_out);

}  // namespace tetfit
