#include "tetfit/layers.hpp"

#include <cmath>
#include <cstring>

#include "io_util.hpp"

namespace tetfit {

namespace ioutil {

std::string read_text_file(const std::string& path) {
    File f = open_file(path, "rb");
    std::string s;
    char buf[1 << 14];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, f.get())) > 0) s.append(buf, n);
    if (std::ferror(f.get())) throw IoError("read failed: " + path);
    return s;
}

void write_text_file(const std::string& path, const std::string& content) {
    File f = open_file(path, "wb");
    write_exact(f.get(), content.data(), content.size(), path);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace ioutil

DenseLayer DenseLayer::make(ParamStore& store, const std::string& name, int in, int out,
                            Activation act, Rng& rng, bool zero_init) {
    if (in <= 0 || out <= 0) throw InvalidArgument("dense layer dims must be positive");
    DenseLayer l;
    l.in = in;
    l.out = out;
    l.act = act;
    l.wid = store.add(name + ".weight", {static_cast<std::size_t>(out), static_cast<std::size_t>(in)});
    l.bid = store.add(name + ".bias", {static_cast<std::size_t>(out)});
    if (!zero_init) {
        double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& w : store.at(l.wid).data) w = rng.uniform(-bound, bound);
    }
    return l;
}

DenseLayer::Bound DenseLayer::bind(Tape& tape, const ParamStore& store) const {
    Bound b;
    b.wblock = tape.register_block(store.at(wid));
    b.bblock = tape.register_block(store.at(bid));
    return b;
}

void DenseLayer::forward(Tape& tape, const Bound& b, std::span<const Val> x, std::vector<Val>& y) const {
    TETFIT_CHECK(static_cast<int>(x.size()) == in, "dense input size mismatch");
    y.resize(static_cast<std::size_t>(out));
    for (int r = 0; r < out; ++r) {
        Val a = tape.affine_row(b.wblock, static_cast<std::size_t>(r) * in, b.bblock,
                                static_cast<std::size_t>(r), x);
        switch (act) {
            case Activation::kIdentity: y[static_cast<std::size_t>(r)] = a; break;
            case Activation::kRelu: y[static_cast<std::size_t>(r)] = val_relu(a); break;
            case Activation::kTanh: y[static_cast<std::size_t>(r)] = val_tanh(a); break;
        }
    }
}

void DenseLayer::forward_plain(const ParamStore& store, std::span<const double> x,
                               std::vector<double>& y) const {
    TETFIT_CHECK(static_cast<int>(x.size()) == in, "dense input size mismatch");
    const Tensor& W = store.at(wid);
    const Tensor& B = store.at(bid);
    y.resize(static_cast<std::size_t>(out));
    for (int r = 0; r < out; ++r) {
        double acc = B.data[static_cast<std::size_t>(r)];
        const double* w = W.data.data() + static_cast<std::size_t>(r) * in;
        for (int k = 0; k < in; ++k) acc += w[k] * x[static_cast<std::size_t>(k)];
        switch (act) {
            case Activation::kIdentity: break;
            case Activation::kRelu: acc = acc > 0.0 ? acc : 0.0; break;
            case Activation::kTanh: acc = std::tanh(acc); break;
        }
        y[static_cast<std::size_t>(r)] = acc;
    }
}

GruCell GruCell::make(ParamStore& store, const std::string& name, int input, int hidden, Rng& rng) {
    if (input <= 0 || hidden <= 0) throw InvalidArgument("gru dims must be positive");
    GruCell c;
    c.input = input;
    c.hidden = hidden;
    c.zl = DenseLayer::make(store, name + ".update", input + hidden, hidden, Activation::kIdentity, rng);
    c.rl = DenseLayer::make(store, name + ".reset", input + hidden, hidden, Activation::kIdentity, rng);
    c.hl = DenseLayer::make(store, name + ".cand", input + hidden, hidden, Activation::kIdentity, rng);
    return c;
}

GruCell::Bound GruCell::bind(Tape& tape, const ParamStore& store) const {
    return Bound{zl.bind(tape, store), rl.bind(tape, store), hl.bind(tape, store)};
}

void GruCell::forward(Tape& tape, const Bound& b, std::span<const Val> x, std::span<const Val> h,
                      std::vector<Val>& out) const {
    if (static_cast<int>(x.size()) != input || static_cast<int>(h.size()) != hidden)
        throw InvalidArgument("gru input/hidden size mismatch");
    std::vector<Val> xh(x.begin(), x.end());
    xh.insert(xh.end(), h.begin(), h.end());
    std::vector<Val> z, r, cand;
    zl.forward(tape, b.z, xh, z);
    rl.forward(tape, b.r, xh, r);
    for (int u = 0; u < hidden; ++u) z[static_cast<std::size_t>(u)] = val_sigmoid(z[static_cast<std::size_t>(u)]);
    for (int u = 0; u < hidden; ++u) r[static_cast<std::size_t>(u)] = val_sigmoid(r[static_cast<std::size_t>(u)]);
    for (int u = 0; u < hidden; ++u)
        xh[static_cast<std::size_t>(input + u)] = r[static_cast<std::size_t>(u)] * h[static_cast<std::size_t>(u)];
    hl.forward(tape, b.h, xh, cand);
    out.resize(static_cast<std::size_t>(hidden));
    for (int u = 0; u < hidden; ++u) {
        Val c = val_tanh(cand[static_cast<std::size_t>(u)]);
        Val hu = h[static_cast<std::size_t>(u)];
        out[static_cast<std::size_t>(u)] = hu + z[static_cast<std::size_t>(u)] * (c - hu);
    }
}

GradSet make_gradset(const ParamStore& store) {
    GradSet g(static_cast<std::size_t>(store.count()));
    for (int k = 0; k < store.count(); ++k) g[static_cast<std::size_t>(k)].assign(store.at(k).size(), 0.0);
    return g;
}

void zero_gradset(GradSet& g) {
    for (auto& t : g) std::fill(t.begin(), t.end(), 0.0);
}

void accumulate_gradset(GradSet& dst, const GradSet& src) {
    TETFIT_CHECK(dst.size() == src.size(), "gradset size mismatch");
    for (std::size_t k = 0; k < dst.size(); ++k) {
        TETFIT_CHECK(dst[k].size() == src[k].size(), "gradset tensor size mismatch");
        for (std::size_t j = 0; j < dst[k].size(); ++j) dst[k][j] += src[k][j];
    }
}

void tape_grads_into(const Tape& tape, std::span<const int> block_of_param, GradSet& dst) {
    for (std::size_t pid = 0; pid < block_of_param.size(); ++pid) {
        int blk = block_of_param[pid];
        if (blk < 0) continue;
        std::span<const double> g = tape.block_grad(blk);
        if (g.empty()) continue;
        TETFIT_CHECK(g.size() == dst[pid].size(), "tape block size mismatch");
        for (std::size_t j = 0; j < g.size(); ++j) dst[pid][j] += g[j];
    }
}

Optimizer::Optimizer(OptimizerKind kind, double lr, double momentum, double weight_decay)
    : kind_(kind), lr_(lr), momentum_(momentum), wd_(weight_decay) {}

void Optimizer::ensure_buffers(const ParamStore& params) {
    auto fit = [&](std::vector<std::vector<double>>& bufs) {
        bufs.resize(static_cast<std::size_t>(params.count()));
        for (int k = 0; k < params.count(); ++k)
            if (bufs[static_cast<std::size_t>(k)].size() != params.at(k).size())
                bufs[static_cast<std::size_t>(k)].assign(params.at(k).size(), 0.0);
    };
    if (kind_ == OptimizerKind::kSgdMomentum) {
        fit(buf_);
    } else {
        fit(m_);
        fit(v_);
    }
}

void Optimizer::step(ParamStore& params, const GradSet& grads, double lr_scale) {
    TETFIT_CHECK(static_cast<int>(grads.size()) == params.count(), "grad/param count mismatch");
    ensure_buffers(params);
    ++t_;
    double lr = lr_ * lr_scale;
    for (int k = 0; k < params.count(); ++k) {
        Tensor& p = params.at(k);
        const auto& g = grads[static_cast<std::size_t>(k)];
        TETFIT_CHECK(g.size() == p.size(), "grad tensor size mismatch");
        for (double gv : g)
            if (!std::isfinite(gv)) throw NumericError("non-finite gradient in " + p.name);
        if (kind_ == OptimizerKind::kSgdMomentum) {
            auto& buf = buf_[static_cast<std::size_t>(k)];
            for (std::size_t j = 0; j < p.size(); ++j) {
                buf[j] = momentum_ * buf[j] + g[j] + wd_ * p.data[j];
                p.data[j] -= lr * buf[j];
            }
        } else {
            auto& m = m_[static_cast<std::size_t>(k)];
            auto& v = v_[static_cast<std::size_t>(k)];
            double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
            double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
                double mhat = m[j] / c1;
                double vhat = v[j] / c2;
                p.data[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p.data[j]);
            }
        }
    }
}

std::vector<Tensor> Optimizer::state_tensors(const ParamStore& params) const {
    std::vector<Tensor> out;
    auto emit = [&](const char* tag, const std::vector<std::vector<double>>& bufs) {
        for (int k = 0; k < params.count(); ++k) {
            Tensor t;
            t.name = std::string("opt.") + tag + "." + params.at(k).name;
            t.shape = params.at(k).shape;
            t.data = bufs.empty() ? std::vector<double>(params.at(k).size(), 0.0)
                                  : bufs[static_cast<std::size_t>(k)];
            if (t.data.size() != params.at(k).size()) t.data.assign(params.at(k).size(), 0.0);
            out.push_back(std::move(t));
        }
    };
    if (kind_ == OptimizerKind::kSgdMomentum) {
        emit("buf", buf_);
    } else {
        emit("m", m_);
        emit("v", v_);
    }
    return out;
}

void Optimizer::load_state(const ParamStore& params, const std::vector<Tensor>& state, long step_count) {
    ensure_buffers(params);
    t_ = step_count;
    auto take = [&](const char* tag, std::vector<std::vector<double>>& bufs) {
        for (int k = 0; k < params.count(); ++k) {
            std::string want = std::string("opt.") + tag + "." + params.at(k).name;
            for (const Tensor& t : state) {
                if (t.name != want) continue;
                if (t.data.size() != params.at(k).size())
                    throw IoError("optimizer state shape mismatch for " + want);
                bufs[static_cast<std::size_t>(k)] = t.data;
            }
        }
    };
    if (kind_ == OptimizerKind::kSgdMomentum) {
        take("buf", buf_);
    } else {
        take("m", m_);
        take("v", v_);
    }
}

double lr_schedule_scale(LrSchedule s, long it, long total) {
    if (s == LrSchedule::kConstant) return 1.0;
    if (total <= 0) return 1.0;
    double x = static_cast<double>(it) / static_cast<double>(total);
    if (x > 1.0) x = 1.0;
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

namespace {
constexpr char kTensorMagic[8] = {'T', 'E', 'T', 'T', 'E', 'N', 'S', '\0'};
}

void save_tensors(const std::string& path, std::span<const Tensor> tensors, const std::string& meta) {
    ioutil::File f = ioutil::open_file(path, "wb");
    ioutil::write_exact(f.get(), kTensorMagic, 8, path);
    ioutil::write_pod<std::uint32_t>(f.get(), 1, path);
    ioutil::write_pod<std::uint64_t>(f.get(), meta.size(), path);
    ioutil::write_exact(f.get(), meta.data(), meta.size(), path);
    ioutil::write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(tensors.size()), path);
    for (const Tensor& t : tensors) {
        ioutil::write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(t.name.size()), path);
        ioutil::write_exact(f.get(), t.name.data(), t.name.size(), path);
        ioutil::write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(t.shape.size()), path);
        for (std::size_t d : t.shape) ioutil::write_pod<std::uint64_t>(f.get(), d, path);
        std::size_t n = 1;
        for (std::size_t d : t.shape) n *= d;
        if (n != t.data.size()) throw ContractViolation("tensor shape/data mismatch: " + t.name);
        ioutil::write_exact(f.get(), t.data.data(), t.data.size() * sizeof(double), path);
    }
    if (std::fflush(f.get()) != 0) throw IoError("flush failed: " + path);
}

std::vector<Tensor> load_tensors(const std::string& path, std::string& meta_out) {
    ioutil::File f = ioutil::open_file(path, "rb");
    char magic[8];
    ioutil::read_exact(f.get(), magic, 8, path);
    if (std::memcmp(magic, kTensorMagic, 8) != 0) throw IoError("bad tensor container magic: " + path);
    auto version = ioutil::read_pod<std::uint32_t>(f.get(), path);
    if (version != 1) throw IoError("unsupported tensor container version: " + path);
    auto meta_len = ioutil::read_pod<std::uint64_t>(f.get(), path);
    meta_out.resize(meta_len);
    ioutil::read_exact(f.get(), meta_out.data(), meta_len, path);
    auto count = ioutil::read_pod<std::uint32_t>(f.get(), path);
    std::vector<Tensor> out;
    out.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        Tensor t;
        auto name_len = ioutil::read_pod<std::uint32_t>(f.get(), path);
        t.name.resize(name_len);
        ioutil::read_exact(f.get(), t.name.data(), name_len, path);
        auto ndim = ioutil::read_pod<std::uint32_t>(f.get(), path);
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            auto dim = ioutil::read_pod<std::uint64_t>(f.get(), path);
            t.shape.push_back(dim);
            n *= dim;
        }
        t.data.resize(n);
        ioutil::read_exact(f.get(), t.data.data(), n * sizeof(double), path);
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace tetfit
