#include "tetfit/fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <utility>

#include "json.hpp"
#include "tetfit/threading.hpp"

namespace tetfit {

namespace {

double sq_dist(const Vec3& a, const Vec3& b) {
    double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
    return dx * dx + dy * dy + dz * dz;
}

}  // namespace

double chamfer(std::span<const Vec3> a, std::span<const Vec3> b, bool squared) {
    if (a.empty() || b.empty()) throw InvalidArgument("chamfer needs two nonempty point sets");
    NearestNeighborIndex ib(std::vector<Vec3>(b.begin(), b.end()));
    NearestNeighborIndex ia(std::vector<Vec3>(a.begin(), a.end()));
    double s1 = 0.0;
    for (const Vec3& p : a) {
        double d2 = sq_dist(p, ib.point(ib.nearest(p)));
        s1 += squared ? d2 : std::sqrt(d2);
    }
    double s2 = 0.0;
    for (std::size_t k = 0; k < b.size(); ++k) {
        double d2 = sq_dist(b[k], ia.point(ia.nearest(b[k])));
        s2 += squared ? d2 : std::sqrt(d2);
    }
    return s1 / static_cast<double>(a.size()) + s2 / static_cast<double>(b.size());
}

Val chamfer_val(std::span<const Vec3Val> a, const NearestNeighborIndex& b_index, bool squared) {
    if (a.empty() || b_index.size() == 0)
        throw InvalidArgument("chamfer needs two nonempty point sets");
    std::vector<Vec3> av(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) av[i] = a[i].value();

    auto term = [&](const Val& d2) {
        if (!squared) return d2.v > 0.0 ? val_sqrt(d2) : Val(0.0);
        return d2;
    };

    std::vector<Val> t1;
    t1.reserve(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        std::uint32_t j = b_index.nearest(av[i]);
        t1.push_back(term(val_sq_dist(a[i], Vec3Val(b_index.point(j)))));
    }

    NearestNeighborIndex ia(std::move(av));
    std::vector<Val> t2;
    t2.reserve(b_index.size());
    for (std::size_t k = 0; k < b_index.size(); ++k) {
        std::uint32_t i = ia.nearest(b_index.point(k));
        t2.push_back(term(val_sq_dist(a[i], Vec3Val(b_index.point(k)))));
    }
    return val_mean(t1) + val_mean(t2);
}

MeshSdfCache::MeshSdfCache(SurfaceMesh target, std::size_t slots)
    : mesh_(std::move(target)), query_(mesh_), slots_(slots) {
    if (!query_.signed_ok())
        throw InvalidArgument("signed distances need a closed target mesh");
}

double MeshSdfCache::signed_at(std::size_t slot, const Vec3& q) {
    double d = query_.unsigned_distance(q);
    if (d == 0.0) return 0.0;
    Slot& s = slots_[slot];
    double sign;
    if (s.valid && norm(q - s.anchor) < s.radius)
        sign = s.sign;
    else
        sign = query_.winding(q) > 0.5 ? -1.0 : 1.0;
    s = Slot{q, d, sign, true};
    return sign * d;
}

Optimizer make_optimizer(const OptimizerConfig& cfg) {
    if (!(cfg.lr > 0.0)) throw InvalidArgument("learning rate must be positive");
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
        throw InvalidArgument("momentum must be in [0,1)");
    if (cfg.weight_decay < 0.0) throw InvalidArgument("weight decay must be nonnegative");
    return Optimizer(cfg.kind, cfg.lr, cfg.momentum, cfg.weight_decay);
}

const char* optimizer_kind_name(OptimizerKind k) {
    return k == OptimizerKind::kSgdMomentum ? "sgd" : "adam";
}

OptimizerKind optimizer_kind_from_name(const std::string& name) {
    if (name == "sgd") return OptimizerKind::kSgdMomentum;
    if (name == "adam") return OptimizerKind::kAdam;
    throw InvalidArgument("unknown optimizer '" + name + "'");
}

const char* lr_schedule_name(LrSchedule s) {
    return s == LrSchedule::kConstant ? "constant" : "cosine";
}

LrSchedule lr_schedule_from_name(const std::string& name) {
    if (name == "constant") return LrSchedule::kConstant;
    if (name == "cosine") return LrSchedule::kCosine;
    throw InvalidArgument("unknown lr schedule '" + name + "'");
}

namespace {

void check_weights(const LossWeights& w) {
    if (w.cd < 0.0 || w.sdf < 0.0 || w.vol < 0.0 || w.reg < 0.0)
        throw InvalidArgument("loss weights must be nonnegative");
}

}  // namespace

FitShapeResult fit_shape(const TetGrid& grid, const SurfaceMesh& target, const FitShapeConfig& cfg) {
    check_weights(cfg.weights);
    if (cfg.weights.cd + cfg.weights.sdf <= 0.0)
        throw InvalidArgument("shape fit needs a positive cd or sdf weight");
    if (cfg.iterations < 1) throw InvalidArgument("iteration count must be positive");
    if (cfg.weights.cd > 0.0 && cfg.samples == 0)
        throw InvalidArgument("chamfer term needs a positive sample count");
    validate_grid(grid);

    std::size_t n = grid.vertex_count();
    ParamStore params;
    int sdf_id = params.add("sdf", {n});
    int off_id = params.add("offsets", {n, 3});
    params.at(sdf_id).data = grid.sdf;
    {
        std::vector<double>& off = params.at(off_id).data;
        for (std::size_t i = 0; i < n; ++i)
            for (int c = 0; c < 3; ++c) off[3 * i + c] = grid.offsets[i][c];
    }

    Optimizer opt = make_optimizer(cfg.optimizer);
    GradSet grads = make_gradset(params);

    std::unique_ptr<MeshSdfCache> sdf_cache;
    if (cfg.weights.sdf > 0.0) sdf_cache = std::make_unique<MeshSdfCache>(target, n);
    else if (!mesh_is_closed(target))
        throw InvalidArgument("shape fit target must be a closed mesh");

    TetGrid work = grid;
    std::vector<Vec3> raw_off(n);
    Tape tape;
    std::vector<double> dtarget(n);

    FitShapeResult res;
    res.best_loss = std::numeric_limits<double>::infinity();
    std::vector<double> best_sdf = params.at(sdf_id).data;
    std::vector<double> best_off = params.at(off_id).data;
    int empty_streak = 0;

    for (int it = 0; it < cfg.iterations; ++it) {
        const std::vector<double>& sdfp = params.at(sdf_id).data;
        const std::vector<double>& offp = params.at(off_id).data;
        work.sdf = sdfp;
        for (std::size_t i = 0; i < n; ++i)
            raw_off[i] = {offp[3 * i], offp[3 * i + 1], offp[3 * i + 2]};
        apply_offsets(work, raw_off);

        SurfaceMesh mesh = marching_tetrahedra(work);
        if (mesh.empty()) {
            if (++empty_streak > 25)
                throw FitDiverged("surface extraction stayed empty for more than 25 iterations");
            res.loss_trace.push_back(std::numeric_limits<double>::infinity());
            res.best_trace.push_back(res.best_loss);
            continue;
        }
        empty_streak = 0;

        tape.reset();
        TrackedGrid tg = track_grid(tape, work, sdfp, offp, true, true);

        Val loss = 0.0;
        if (cfg.weights.cd > 0.0) {
            std::vector<Vec3Val> lifted = lift_surface(tg, mesh);
            auto pred = sample_surface(mesh, cfg.samples, derive_seed(cfg.seed, 0, it));
            std::vector<Vec3Val> pred_pts = lift_samples(pred, mesh, lifted);
            auto tgt = sample_surface(target, cfg.samples, derive_seed(cfg.seed, 1, it));
            std::vector<Vec3> tgt_pts(tgt.size());
            for (std::size_t k = 0; k < tgt.size(); ++k) tgt_pts[k] = tgt[k].point;
            NearestNeighborIndex tgt_index(std::move(tgt_pts));
            loss = loss + Val(cfg.weights.cd) * chamfer_val(pred_pts, tgt_index, cfg.squared_chamfer);
        }
        if (cfg.weights.sdf > 0.0) {
            // Distance targets are frozen at this iteration's vertex positions.
            parallel_for(n, [&](int, std::size_t b, std::size_t e) {
                for (std::size_t i = b; i < e; ++i)
                    dtarget[i] = sdf_cache->signed_at(i, work.position(i));
            });
            std::vector<Val> diffs;
            diffs.reserve(n);
            for (std::size_t i = 0; i < n; ++i)
                diffs.push_back(val_abs(tg.sdf_val(static_cast<std::uint32_t>(i)) - Val(dtarget[i])));
            loss = loss + Val(cfg.weights.sdf) * val_mean(diffs);
        }

        if (!std::isfinite(loss.v)) throw NumericError("shape fit produced a non-finite loss");

        res.loss_trace.push_back(loss.v);
        if (loss.v < res.best_loss) {
            res.best_loss = loss.v;
            res.best_iteration = it;
            best_sdf = sdfp;
            best_off = offp;
        }
        res.best_trace.push_back(res.best_loss);

        if (!loss.is_const()) {
            tape.backward(loss);
            zero_gradset(grads);
            for (std::size_t i = 0; i < n; ++i)
                grads[static_cast<std::size_t>(sdf_id)][i] = tape.adjoint(tg.sdf_first + static_cast<std::uint32_t>(i));
            for (std::size_t i = 0; i < 3 * n; ++i)
                grads[static_cast<std::size_t>(off_id)][i] = tape.adjoint(tg.offset_first + static_cast<std::uint32_t>(i));
            opt.step(params, grads, lr_schedule_scale(cfg.optimizer.schedule, it, cfg.iterations));
        }
    }

    res.grid = grid;
    res.grid.sdf = best_sdf;
    for (std::size_t i = 0; i < n; ++i)
        raw_off[i] = {best_off[3 * i], best_off[3 * i + 1], best_off[3 * i + 2]};
    apply_offsets(res.grid, raw_off);
    return res;
}

const char* model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::kFreeOffsets: return "free-offsets";
        case ModelKind::kMlp: return "mlp";
        case ModelKind::kGru: return "gru";
    }
    throw InvalidArgument("bad model kind");
}

ModelKind model_kind_from_name(const std::string& name) {
    if (name == "free-offsets") return ModelKind::kFreeOffsets;
    if (name == "mlp") return ModelKind::kMlp;
    if (name == "gru") return ModelKind::kGru;
    throw InvalidArgument("unknown model kind '" + name + "'");
}

namespace {

DenseLayer layer_view(const ParamStore& ps, const std::string& name, int in, int out,
                      Activation act) {
    DenseLayer l;
    l.in = in;
    l.out = out;
    l.act = act;
    l.wid = ps.find(name + ".weight");
    l.bid = ps.find(name + ".bias");
    if (l.wid < 0 || l.bid < 0) throw IoError("model tensor '" + name + "' missing");
    if (ps.at(l.wid).size() != static_cast<std::size_t>(in) * static_cast<std::size_t>(out) ||
        ps.at(l.bid).size() != static_cast<std::size_t>(out))
        throw IoError("model tensor '" + name + "' has the wrong shape");
    return l;
}

struct ModelViews {
    DenseLayer gcn, head0, head1;
    GruCell gru;
    int lat_id = -1, free_id = -1;
};

ModelViews model_views(const DeformationModel& m) {
    ModelViews v;
    const ParamStore& ps = m.params;
    if (m.kind == ModelKind::kFreeOffsets) {
        v.free_id = ps.find("free_offsets");
        if (v.free_id < 0) throw IoError("model tensor 'free_offsets' missing");
        return v;
    }
    v.lat_id = ps.find("latent");
    if (v.lat_id < 0) throw IoError("model tensor 'latent' missing");
    int h = m.hidden, l = m.latent;
    if (m.kind == ModelKind::kGru) {
        v.gcn = layer_view(ps, "gcn", 6 + l, h, Activation::kTanh);
        v.gru.input = h + 3;
        v.gru.hidden = h;
        v.gru.zl = layer_view(ps, "gru.update", v.gru.input + h, h, Activation::kIdentity);
        v.gru.rl = layer_view(ps, "gru.reset", v.gru.input + h, h, Activation::kIdentity);
        v.gru.hl = layer_view(ps, "gru.cand", v.gru.input + h, h, Activation::kIdentity);
        v.head0 = layer_view(ps, "head0", 3 + h, h, Activation::kTanh);
    } else {
        v.head0 = layer_view(ps, "head0", 3 + l, h, Activation::kTanh);
    }
    v.head1 = layer_view(ps, "head1", h, 3, Activation::kIdentity);
    return v;
}

}  // namespace

DeformationModel make_deformation_model(ModelKind kind, int steps, int hidden, int latent,
                                        int frames, std::uint32_t driving, std::uint64_t seed) {
    if (steps < 1) throw InvalidArgument("deformation steps must be >= 1");
    if (kind == ModelKind::kFreeOffsets && steps != 1)
        throw InvalidArgument("free offsets deform in a single step");
    if (frames < 1) throw InvalidArgument("frame count must be >= 1");

    DeformationModel m;
    m.kind = kind;
    m.steps = steps;
    m.frames = frames;
    m.driving = driving;
    Rng rng(derive_seed(seed, 40));

    if (kind == ModelKind::kFreeOffsets) {
        if (driving == 0) throw InvalidArgument("free offsets need at least one driving vertex");
        m.hidden = 0;
        m.latent = 0;
        m.params.add("free_offsets", {static_cast<std::size_t>(frames), driving, 3});
        return m;
    }

    if (hidden < 1 || hidden > 128) throw InvalidArgument("hidden size must be in [1,128]");
    if (latent < 1 || latent > 64) throw InvalidArgument("latent size must be in [1,64]");
    m.hidden = hidden;
    m.latent = latent;
    m.params.add("latent", {static_cast<std::size_t>(frames), static_cast<std::size_t>(latent)});
    if (kind == ModelKind::kGru) {
        DenseLayer::make(m.params, "gcn", 6 + latent, hidden, Activation::kTanh, rng);
        GruCell::make(m.params, "gru", hidden + 3, hidden, rng);
        DenseLayer::make(m.params, "head0", 3 + hidden, hidden, Activation::kTanh, rng);
    } else {
        DenseLayer::make(m.params, "head0", 3 + latent, hidden, Activation::kTanh, rng);
    }
    DenseLayer::make(m.params, "head1", hidden, 3, Activation::kIdentity, rng, /*zero_init=*/true);
    return m;
}

void save_model(const std::string& path, const DeformationModel& model, const Optimizer* optimizer,
                const OptimizerConfig* opt_config) {
    std::vector<Tensor> ts;
    ts.reserve(static_cast<std::size_t>(model.params.count()));
    for (int id = 0; id < model.params.count(); ++id) ts.push_back(model.params.at(id));

    nlohmann::json meta;
    meta["format_version"] = 1;
    meta["kind"] = model_kind_name(model.kind);
    meta["steps"] = model.steps;
    meta["hidden"] = model.hidden;
    meta["latent"] = model.latent;
    meta["frames"] = model.frames;
    meta["driving"] = model.driving;
    if (optimizer != nullptr && opt_config != nullptr) {
        std::vector<Tensor> st = optimizer->state_tensors(model.params);
        for (Tensor& t : st) ts.push_back(std::move(t));
        meta["optimizer"] = {{"kind", optimizer_kind_name(opt_config->kind)},
                             {"lr", opt_config->lr},
                             {"momentum", opt_config->momentum},
                             {"weight_decay", opt_config->weight_decay},
                             {"schedule", lr_schedule_name(opt_config->schedule)},
                             {"step_count", optimizer->step_count()}};
    }
    save_tensors(path, ts, meta.dump());
}

DeformationModel load_model(const std::string& path, Optimizer* optimizer,
                            OptimizerConfig* opt_config) {
    std::string meta_s;
    std::vector<Tensor> ts = load_tensors(path, meta_s);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_s);
        DeformationModel m;
        m.kind = model_kind_from_name(meta.at("kind").get<std::string>());
        m.steps = meta.at("steps").get<int>();
        m.hidden = meta.at("hidden").get<int>();
        m.latent = meta.at("latent").get<int>();
        m.frames = meta.at("frames").get<int>();
        m.driving = meta.at("driving").get<std::uint32_t>();
        if (meta.at("format_version").get<int>() != 1)
            throw IoError("unsupported checkpoint version");

        std::vector<Tensor> opt_state;
        for (Tensor& t : ts) {
            if (t.name.rfind("opt.", 0) == 0) {
                opt_state.push_back(std::move(t));
                continue;
            }
            int id = m.params.add(t.name, t.shape);
            m.params.at(id).data = std::move(t.data);
        }
        model_views(m);  // shape check

        if (optimizer != nullptr && opt_config != nullptr && meta.contains("optimizer")) {
            const nlohmann::json& oj = meta.at("optimizer");
            OptimizerConfig oc;
            oc.kind = optimizer_kind_from_name(oj.at("kind").get<std::string>());
            oc.lr = oj.at("lr").get<double>();
            oc.momentum = oj.at("momentum").get<double>();
            oc.weight_decay = oj.at("weight_decay").get<double>();
            oc.schedule = lr_schedule_from_name(oj.at("schedule").get<std::string>());
            *opt_config = oc;
            *optimizer = make_optimizer(oc);
            optimizer->load_state(m.params, opt_state, oj.at("step_count").get<long>());
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": bad checkpoint meta: " + e.what());
    }
}

MotionSystem::MotionSystem(TetGrid canonical, ModelKind kind, int steps)
    : grid_(std::move(canonical)), kind_(kind), steps_(steps) {
    if (steps_ < 1) throw InvalidArgument("motion rollout needs at least one step");
    if (kind_ == ModelKind::kFreeOffsets && steps_ != 1)
        throw InvalidArgument("free offsets deform in a single step");
    validate_grid(grid_);
    mesh_ = marching_tetrahedra(grid_);
    if (mesh_.empty()) throw InvalidArgument("canonical grid extracts an empty surface");
    TETFIT_CHECK(mesh_.has_provenance(), "extraction lost provenance");

    std::vector<std::uint32_t> set0;
    set0.reserve(mesh_.provenance.size() * 2);
    for (const SurfaceVertexOrigin& p : mesh_.provenance) {
        set0.push_back(p.va);
        set0.push_back(p.vb);
    }
    std::sort(set0.begin(), set0.end());
    set0.erase(std::unique(set0.begin(), set0.end()), set0.end());
    sets_.push_back(std::move(set0));

    // Only the gru rollout reads neighbors, so only it needs the enclosing
    // sets: step s processes sets_[steps-1-s], whose neighbor reads land in
    // the next set up, already updated by every earlier step.
    if (kind_ == ModelKind::kGru) {
        std::vector<std::vector<std::uint32_t>> adj(grid_.vertex_count());
        for (const auto& tet : grid_.tets) {
            for (const auto& e : kTetEdges) {
                std::uint32_t u = tet[static_cast<std::size_t>(e[0])];
                std::uint32_t v = tet[static_cast<std::size_t>(e[1])];
                adj[u].push_back(v);
                adj[v].push_back(u);
            }
        }
        for (auto& lst : adj) {
            std::sort(lst.begin(), lst.end());
            lst.erase(std::unique(lst.begin(), lst.end()), lst.end());
        }
        for (int k = 0; k < steps_; ++k) {
            std::vector<std::uint32_t> next = sets_.back();
            for (std::uint32_t v : sets_[static_cast<std::size_t>(k)])
                next.insert(next.end(), adj[v].begin(), adj[v].end());
            std::sort(next.begin(), next.end());
            next.erase(std::unique(next.begin(), next.end()), next.end());
            sets_.push_back(std::move(next));
        }
        const std::vector<std::uint32_t>& top = sets_.back();
        neighbors_.resize(top.size());
        for (std::size_t i = 0; i < top.size(); ++i) neighbors_[i] = adj[top[i]];
    }

    const std::vector<std::uint32_t>& top = sets_.back();
    slot_of_.assign(grid_.vertex_count(), kNoSlot);
    for (std::size_t i = 0; i < top.size(); ++i) slot_of_[top[i]] = static_cast<std::uint32_t>(i);
}

MotionSystem::FrameRoll MotionSystem::roll_frame(Tape& tape, const DeformationModel& model,
                                                 int t) const {
    if (model.kind != kind_ || model.steps != steps_)
        throw InvalidArgument("model and motion system disagree on kind or steps");
    if (t < 0 || t >= model.frames) throw InvalidArgument("frame index out of range");
    ModelViews views = model_views(model);

    const std::vector<std::uint32_t>& top = sets_.back();
    std::vector<Vec3Val> state(top.size());
    for (std::size_t i = 0; i < top.size(); ++i) state[i] = Vec3Val(grid_.position(top[i]));

    if (kind_ == ModelKind::kFreeOffsets) {
        const std::vector<std::uint32_t>& drive = sets_.front();
        if (model.driving != drive.size())
            throw InvalidArgument("free-offsets table does not match the driving vertex count");
        int blk = tape.register_block(model.params.at(views.free_id));
        for (std::size_t j = 0; j < drive.size(); ++j) {
            std::uint32_t s = slot_of_[drive[j]];
            std::size_t row = (static_cast<std::size_t>(t) * drive.size() + j) * 3;
            Val dx = tape.affine_row(blk, 0, blk, row + 0, {});
            Val dy = tape.affine_row(blk, 0, blk, row + 1, {});
            Val dz = tape.affine_row(blk, 0, blk, row + 2, {});
            state[s] = Vec3Val(state[s].x + dx, state[s].y + dy, state[s].z + dz);
        }
    } else {
        int lat_blk = tape.register_block(model.params.at(views.lat_id));
        std::vector<Val> code(static_cast<std::size_t>(model.latent));
        for (int j = 0; j < model.latent; ++j)
            code[static_cast<std::size_t>(j)] = tape.affine_row(
                lat_blk, 0, lat_blk,
                static_cast<std::size_t>(t) * static_cast<std::size_t>(model.latent) +
                    static_cast<std::size_t>(j),
                {});

        DenseLayer::Bound b_head0 = views.head0.bind(tape, model.params);
        DenseLayer::Bound b_head1 = views.head1.bind(tape, model.params);
        DenseLayer::Bound b_gcn;
        GruCell::Bound b_gru;
        std::vector<std::vector<Val>> hidden;
        if (kind_ == ModelKind::kGru) {
            b_gcn = views.gcn.bind(tape, model.params);
            b_gru = views.gru.bind(tape, model.params);
            hidden.assign(top.size(), std::vector<Val>(static_cast<std::size_t>(model.hidden), Val(0.0)));
        }

        std::vector<Val> x, feat, gin, hnew, hin, tmp, delta;
        std::vector<Val> mx, my, mz;
        std::vector<Vec3Val> fresh;
        for (int s = 0; s < steps_; ++s) {
            const std::vector<std::uint32_t>& pset =
                kind_ == ModelKind::kGru ? sets_[static_cast<std::size_t>(steps_ - 1 - s)]
                                         : sets_.front();
            if (kind_ == ModelKind::kGru) fresh.resize(pset.size());
            for (std::size_t pi = 0; pi < pset.size(); ++pi) {
                std::uint32_t slot = slot_of_[pset[pi]];
                const Vec3Val& cur = state[slot];
                if (kind_ == ModelKind::kGru) {
                    const std::vector<std::uint32_t>& nb = neighbors_[slot];
                    mx.clear();
                    my.clear();
                    mz.clear();
                    for (std::uint32_t g : nb) {
                        const Vec3Val& q = state[slot_of_[g]];
                        mx.push_back(q.x);
                        my.push_back(q.y);
                        mz.push_back(q.z);
                    }
                    x.clear();
                    x.push_back(val_mean(mx));
                    x.push_back(val_mean(my));
                    x.push_back(val_mean(mz));
                    x.push_back(cur.x);
                    x.push_back(cur.y);
                    x.push_back(cur.z);
                    x.insert(x.end(), code.begin(), code.end());
                    views.gcn.forward(tape, b_gcn, x, feat);
                    gin = feat;
                    gin.push_back(cur.x);
                    gin.push_back(cur.y);
                    gin.push_back(cur.z);
                    views.gru.forward(tape, b_gru, gin, hidden[slot], hnew);
                    hidden[slot] = hnew;
                    hin.clear();
                    hin.push_back(cur.x);
                    hin.push_back(cur.y);
                    hin.push_back(cur.z);
                    hin.insert(hin.end(), hnew.begin(), hnew.end());
                    views.head0.forward(tape, b_head0, hin, tmp);
                    views.head1.forward(tape, b_head1, tmp, delta);
                    fresh[pi] = Vec3Val(cur.x + delta[0], cur.y + delta[1], cur.z + delta[2]);
                } else {
                    hin.clear();
                    hin.push_back(cur.x);
                    hin.push_back(cur.y);
                    hin.push_back(cur.z);
                    hin.insert(hin.end(), code.begin(), code.end());
                    views.head0.forward(tape, b_head0, hin, tmp);
                    views.head1.forward(tape, b_head1, tmp, delta);
                    state[slot] = Vec3Val(cur.x + delta[0], cur.y + delta[1], cur.z + delta[2]);
                }
            }
            if (kind_ == ModelKind::kGru)
                for (std::size_t pi = 0; pi < pset.size(); ++pi)
                    state[slot_of_[pset[pi]]] = fresh[pi];
        }
    }

    FrameRoll out;
    out.surface = advect_surface_vals(mesh_, [&](std::uint32_t v) {
        TETFIT_CHECK(slot_of_[v] != kNoSlot, "surface endpoint outside the influence set");
        return state[slot_of_[v]];
    });
    const std::vector<std::uint32_t>& drive = sets_.front();
    out.driving.reserve(drive.size());
    for (std::uint32_t v : drive) out.driving.push_back(state[slot_of_[v]]);
    return out;
}

std::vector<Vec3> MotionSystem::roll_frame_plain(const DeformationModel& model, int t) const {
    thread_local Tape tape;
    tape.reset();
    FrameRoll roll = roll_frame(tape, model, t);
    std::vector<Vec3> out(roll.surface.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = roll.surface[i].value();
    return out;
}

namespace {

// Frozen per-frame observation targets for the slice loss.
struct SliceIndexes {
    std::vector<std::unique_ptr<NearestNeighborIndex>> per_plane;  // null where contour empty
};

Val motion_reg_term(const MotionSystem& sys, const MotionSystem::FrameRoll& roll) {
    std::span<const std::uint32_t> drive = sys.driving_vertices();
    std::vector<Val> terms;
    terms.reserve(drive.size());
    for (std::size_t j = 0; j < drive.size(); ++j) {
        Vec3 v0 = sys.grid().position(drive[j]);
        terms.push_back(val_sq_dist(roll.driving[j], Vec3Val(v0)));
    }
    return val_mean(terms);
}

Val motion_frame_loss(const MotionSystem& sys, const MotionSystem::FrameRoll& roll,
                      const Observation& obs, const SliceIndexes* slices, const LossWeights& w,
                      bool squared, std::size_t samples, std::uint64_t pred_seed,
                      std::uint64_t tgt_seed) {
    SurfaceMesh pm;
    pm.triangles = sys.canonical_mesh().triangles;
    pm.positions.resize(roll.surface.size());
    for (std::size_t i = 0; i < roll.surface.size(); ++i) pm.positions[i] = roll.surface[i].value();

    switch (obs.mode) {
        case ObservationMode::kFull: {
            auto pred = sample_surface(pm, samples, pred_seed);
            std::vector<Vec3Val> pred_pts = lift_samples(pred, pm, roll.surface);
            auto tgt = sample_surface(obs.target, samples, tgt_seed);
            std::vector<Vec3> tgt_pts(tgt.size());
            for (std::size_t k = 0; k < tgt.size(); ++k) tgt_pts[k] = tgt[k].point;
            NearestNeighborIndex tgt_index(std::move(tgt_pts));
            return Val(w.cd) * chamfer_val(pred_pts, tgt_index, squared);
        }
        case ObservationMode::kSlices: {
            std::vector<Val> terms;
            for (std::size_t p = 0; p < obs.planes.size(); ++p) {
                if (slices->per_plane[p] == nullptr) continue;  // plane missed the observed shape
                std::vector<Vec3Val> sec = plane_section_vals(pm, roll.surface, obs.planes[p]);
                if (sec.empty()) {
                    // No section while the observation has one: constant
                    // penalty, no gradient; the penalty term keeps the frame
                    // from being rewarded for leaving the plane.
                    terms.push_back(Val(1.0));
                    continue;
                }
                terms.push_back(chamfer_val(sec, *slices->per_plane[p], squared));
            }
            Val cd_sum = terms.empty() ? Val(0.0) : val_sum(terms);
            return Val(w.cd) * cd_sum + Val(w.reg) * motion_reg_term(sys, roll);
        }
        case ObservationMode::kVolume: {
            Val nv = normalized_volume_val(pm, roll.surface);
            return Val(w.vol) * val_abs(nv - Val(obs.volume)) +
                   Val(w.reg) * motion_reg_term(sys, roll);
        }
    }
    throw InvalidArgument("bad observation mode");
}

}  // namespace

FitMotionResult fit_motion(const TetGrid& canonical, std::span<const Observation> sequence,
                           const FitMotionConfig& cfg) {
    if (sequence.empty()) throw InvalidArgument("motion fit needs at least one observation");
    check_weights(cfg.weights);
    if (cfg.iterations < 1) throw InvalidArgument("iteration count must be positive");
    ObservationMode mode = sequence[0].mode;
    for (const Observation& o : sequence)
        if (o.mode != mode) throw InvalidArgument("observations mix modes");
    if (mode == ObservationMode::kFull) {
        if (cfg.weights.cd <= 0.0) throw InvalidArgument("full-mesh fit needs a positive cd weight");
        if (cfg.samples == 0) throw InvalidArgument("chamfer term needs a positive sample count");
    }
    if (mode == ObservationMode::kSlices && cfg.weights.cd <= 0.0)
        throw InvalidArgument("slice fit needs a positive cd weight");
    if (mode == ObservationMode::kVolume && cfg.weights.vol <= 0.0)
        throw InvalidArgument("volume fit needs a positive vol weight");

    int steps = cfg.steps;
    if (cfg.model == ModelKind::kFreeOffsets)
        steps = 1;
    else if (steps == 0)
        steps = mode == ObservationMode::kFull ? 3 : 2;

    MotionSystem sys(canonical, cfg.model, steps);
    int frames = static_cast<int>(sequence.size());
    DeformationModel model = make_deformation_model(
        cfg.model, steps, cfg.hidden, cfg.latent, frames,
        static_cast<std::uint32_t>(sys.driving_vertices().size()), cfg.seed);

    std::vector<SliceIndexes> slice_idx;
    if (mode == ObservationMode::kSlices) {
        slice_idx.resize(static_cast<std::size_t>(frames));
        for (int t = 0; t < frames; ++t) {
            const Observation& o = sequence[static_cast<std::size_t>(t)];
            if (o.planes.size() != o.contours.size())
                throw InvalidArgument("slice observation planes and contours misaligned");
            auto& per = slice_idx[static_cast<std::size_t>(t)].per_plane;
            per.resize(o.planes.size());
            for (std::size_t p = 0; p < o.planes.size(); ++p)
                if (!o.contours[p].empty())
                    per[p] = std::make_unique<NearestNeighborIndex>(o.contours[p]);
        }
    }

    Optimizer opt = make_optimizer(cfg.optimizer);
    GradSet grads = make_gradset(model.params);
    std::vector<GradSet> fgrads(static_cast<std::size_t>(frames));
    for (auto& g : fgrads) g = make_gradset(model.params);
    std::vector<double> floss(static_cast<std::size_t>(frames));
    std::vector<Tape> tapes(static_cast<std::size_t>(parallel_chunks()));

    FitMotionResult res;
    res.best_loss = std::numeric_limits<double>::infinity();
    ParamStore best_params = model.params;

    for (int it = 0; it < cfg.iterations; ++it) {
        parallel_for(static_cast<std::size_t>(frames), [&](int chunk, std::size_t b, std::size_t e) {
            Tape& tape = tapes[static_cast<std::size_t>(chunk)];
            for (std::size_t t = b; t < e; ++t) {
                tape.reset();
                MotionSystem::FrameRoll roll = sys.roll_frame(tape, model, static_cast<int>(t));
                const Observation& o = sequence[t];
                Val L = motion_frame_loss(
                    sys, roll, o, slice_idx.empty() ? nullptr : &slice_idx[t], cfg.weights,
                    cfg.squared_chamfer, cfg.samples,
                    derive_seed(cfg.seed, 2, static_cast<std::uint64_t>(it) * sequence.size() + t),
                    derive_seed(cfg.seed, 3, static_cast<std::uint64_t>(it) * sequence.size() + t));
                floss[t] = L.v;
                zero_gradset(fgrads[t]);
                if (!L.is_const() && std::isfinite(L.v)) {
                    tape.backward(L);
                    std::vector<int> blk(static_cast<std::size_t>(model.params.count()));
                    for (int pid = 0; pid < model.params.count(); ++pid)
                        blk[static_cast<std::size_t>(pid)] = tape.register_block(model.params.at(pid));
                    tape_grads_into(tape, blk, fgrads[t]);
                }
            }
        });

        double total = 0.0;
        for (int t = 0; t < frames; ++t) total += floss[static_cast<std::size_t>(t)];
        if (!std::isfinite(total)) throw NumericError("motion fit produced a non-finite loss");

        res.loss_trace.push_back(total);
        res.frame_trace.push_back(floss);
        if (total < res.best_loss) {
            res.best_loss = total;
            res.best_iteration = it;
            best_params = model.params;
        }
        res.best_trace.push_back(res.best_loss);

        zero_gradset(grads);
        for (int t = 0; t < frames; ++t) accumulate_gradset(grads, fgrads[static_cast<std::size_t>(t)]);
        opt.step(model.params, grads, lr_schedule_scale(cfg.optimizer.schedule, it, cfg.iterations));
    }

    model.params = best_params;
    res.canonical_mesh = sys.canonical_mesh();
    res.frame_positions.resize(static_cast<std::size_t>(frames));
    for (int t = 0; t < frames; ++t)
        res.frame_positions[static_cast<std::size_t>(t)] = sys.roll_frame_plain(model, t);
    res.model = std::move(model);
    return res;
}

double GradcheckReport::worst() const {
    return std::max(std::max(edge_crossing, pipeline), std::max(networks, motion));
}

namespace {

double rel_err(double a, double b) {
    double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
    return std::fabs(a - b) / denom;
}

double check_edge_crossing(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 50));
    double worst = 0.0;
    for (int trial = 0; trial < 24; ++trial) {
        double in[8];
        Vec3 w{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        for (int c = 0; c < 6; ++c) in[c] = rng.uniform(-0.9, 0.9);
        double mag_a = rng.uniform(0.2, 1.5), mag_b = rng.uniform(0.2, 1.5);
        bool a_neg = (trial & 1) != 0;
        in[6] = a_neg ? -mag_a : mag_a;
        in[7] = a_neg ? mag_b : -mag_b;

        auto eval = [&](const double* q) {
            EdgeCrossing ec = edge_crossing({q[0], q[1], q[2]}, {q[3], q[4], q[5]}, q[6], q[7]);
            return dot(w, ec.point);
        };

        Tape tape;
        std::uint32_t first = tape.leaves(std::span<const double>(in, 8));
        auto leaf = [&](int k) { return Val{in[k], first + static_cast<std::uint32_t>(k), &tape}; };
        Vec3Val pa{leaf(0), leaf(1), leaf(2)};
        Vec3Val pb{leaf(3), leaf(4), leaf(5)};
        Vec3Val p = edge_crossing_val(pa, pb, leaf(6), leaf(7));
        Val s = p.x * Val(w.x) + p.y * Val(w.y) + p.z * Val(w.z);
        tape.backward(s);

        double h = 1e-6;
        for (int k = 0; k < 8; ++k) {
            double save = in[k];
            double q[8];
            std::copy(in, in + 8, q);
            q[k] = save + h;
            double up = eval(q);
            q[k] = save - h;
            double dn = eval(q);
            double fd = (up - dn) / (2.0 * h);
            worst = std::max(worst, rel_err(tape.adjoint(first + static_cast<std::uint32_t>(k)), fd));
        }
    }
    return worst;
}

double check_pipeline(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 51));
    TetGrid grid = build_uniform_grid(4);
    set_sdf_from_field(grid, [](const Vec3& p) { return norm(p) - 0.55; });
    std::size_t n = grid.vertex_count();
    std::vector<double> sdf = grid.sdf;
    std::vector<double> off(3 * n);
    for (double& v : off) v = rng.uniform(-0.1, 0.1);

    auto eval = [&](const std::vector<double>& s, const std::vector<double>& o,
                    const std::vector<double>& w) {
        TetGrid g = grid;
        g.sdf = s;
        std::vector<Vec3> raw(n);
        for (std::size_t i = 0; i < n; ++i) raw[i] = {o[3 * i], o[3 * i + 1], o[3 * i + 2]};
        apply_offsets(g, raw);
        SurfaceMesh mesh = marching_tetrahedra(g);
        TETFIT_CHECK(!mesh.empty(), "gradcheck surface vanished");
        double acc = 0.0;
        for (std::size_t k = 0; k < mesh.positions.size(); ++k) {
            acc += w[3 * k] * mesh.positions[k].x + w[3 * k + 1] * mesh.positions[k].y +
                   w[3 * k + 2] * mesh.positions[k].z;
        }
        return acc;
    };

    TetGrid work = grid;
    work.sdf = sdf;
    std::vector<Vec3> raw(n);
    for (std::size_t i = 0; i < n; ++i) raw[i] = {off[3 * i], off[3 * i + 1], off[3 * i + 2]};
    apply_offsets(work, raw);
    SurfaceMesh mesh = marching_tetrahedra(work);
    TETFIT_CHECK(!mesh.empty(), "gradcheck surface vanished");
    std::vector<double> w(3 * mesh.positions.size());
    for (double& v : w) v = rng.uniform(-1.0, 1.0);

    Tape tape;
    TrackedGrid tg = track_grid(tape, work, sdf, off, true, true);
    std::vector<Vec3Val> lifted = lift_surface(tg, mesh);
    std::vector<Val> terms;
    terms.reserve(3 * lifted.size());
    for (std::size_t k = 0; k < lifted.size(); ++k) {
        terms.push_back(lifted[k].x * Val(w[3 * k]));
        terms.push_back(lifted[k].y * Val(w[3 * k + 1]));
        terms.push_back(lifted[k].z * Val(w[3 * k + 2]));
    }
    Val s = val_sum(terms);
    tape.backward(s);

    double h = 1e-6, worst = 0.0;
    for (int pick = 0; pick < 40; ++pick) {
        std::size_t i = rng.below(n);
        std::vector<double> sp = sdf;
        sp[i] += h;
        double up = eval(sp, off, w);
        sp[i] = sdf[i] - h;
        double dn = eval(sp, off, w);
        double fd = (up - dn) / (2.0 * h);
        worst = std::max(worst, rel_err(tape.adjoint(tg.sdf_first + static_cast<std::uint32_t>(i)), fd));
    }
    for (int pick = 0; pick < 40; ++pick) {
        std::size_t i = rng.below(3 * n);
        std::vector<double> op = off;
        op[i] += h;
        double up = eval(sdf, op, w);
        op[i] = off[i] - h;
        double dn = eval(sdf, op, w);
        double fd = (up - dn) / (2.0 * h);
        worst = std::max(worst, rel_err(tape.adjoint(tg.offset_first + static_cast<std::uint32_t>(i)), fd));
    }
    return worst;
}

double check_networks(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 52));
    ParamStore ps;
    DenseLayer d1 = DenseLayer::make(ps, "d1", 5, 6, Activation::kTanh, rng);
    GruCell cell = GruCell::make(ps, "cell", 6, 4, rng);
    DenseLayer d2 = DenseLayer::make(ps, "d2", 4, 3, Activation::kTanh, rng);

    std::vector<double> xin(5), h0(4);
    for (double& v : xin) v = rng.uniform(-1.0, 1.0);
    for (double& v : h0) v = rng.uniform(-1.0, 1.0);

    Tape tape;
    auto build = [&]() {
        tape.reset();
        DenseLayer::Bound b1 = d1.bind(tape, ps);
        GruCell::Bound bc = cell.bind(tape, ps);
        DenseLayer::Bound b2 = d2.bind(tape, ps);
        std::vector<Val> x(xin.begin(), xin.end());
        std::vector<Val> h(h0.begin(), h0.end());
        std::vector<Val> y1, hn, y2;
        d1.forward(tape, b1, x, y1);
        cell.forward(tape, bc, y1, h, hn);
        d2.forward(tape, b2, hn, y2);
        std::vector<Val> sq;
        sq.reserve(y2.size() + hn.size());
        for (const Val& v : y2) sq.push_back(val_square(v));
        for (const Val& v : hn) sq.push_back(val_square(v));
        return val_sum(sq);
    };

    Val loss = build();
    tape.backward(loss);
    std::vector<std::vector<double>> g(static_cast<std::size_t>(ps.count()));
    for (int pid = 0; pid < ps.count(); ++pid) {
        std::span<const double> bg = tape.block_grad(tape.register_block(ps.at(pid)));
        g[static_cast<std::size_t>(pid)].assign(ps.at(pid).size(), 0.0);
        if (!bg.empty())
            std::copy(bg.begin(), bg.end(), g[static_cast<std::size_t>(pid)].begin());
    }

    double h = 1e-6, worst = 0.0;
    for (int pick = 0; pick < 60; ++pick) {
        int pid = static_cast<int>(rng.below(static_cast<std::uint64_t>(ps.count())));
        std::size_t j = rng.below(ps.at(pid).size());
        double save = ps.at(pid).data[j];
        ps.at(pid).data[j] = save + h;
        double up = build().v;
        ps.at(pid).data[j] = save - h;
        double dn = build().v;
        ps.at(pid).data[j] = save;
        double fd = (up - dn) / (2.0 * h);
        worst = std::max(worst, rel_err(g[static_cast<std::size_t>(pid)][j], fd));
    }
    return worst;
}

double check_motion(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 53));
    TetGrid grid = build_uniform_grid(4);
    set_sdf_from_field(grid, [](const Vec3& p) { return norm(p) - 0.55; });
    MotionSystem sys(grid, ModelKind::kGru, 2);
    DeformationModel model = make_deformation_model(
        ModelKind::kGru, 2, 6, 4, 2, static_cast<std::uint32_t>(sys.driving_vertices().size()),
        seed);
    // The offset head starts at zero, which silences every upstream gradient;
    // randomize it (and the latents) so the whole chain carries signal.
    for (const char* name : {"head1.weight", "head1.bias", "latent"}) {
        Tensor& t = model.params.at(model.params.find(name));
        for (double& v : t.data) v = rng.uniform(-0.3, 0.3);
    }

    Observation obs;
    {
        SurfaceMesh tgt = sys.canonical_mesh();
        for (Vec3& p : tgt.positions) p.x += 0.07;
        obs = observe_full(tgt);
    }
    LossWeights w;
    std::uint64_t pseed = derive_seed(seed, 54), tseed = derive_seed(seed, 55);

    Tape tape;
    auto build = [&]() {
        tape.reset();
        MotionSystem::FrameRoll roll = sys.roll_frame(tape, model, 1);
        Val cd = motion_frame_loss(sys, roll, obs, nullptr, w, true, 600, pseed, tseed);
        return cd + Val(0.01) * motion_reg_term(sys, roll);
    };

    Val loss = build();
    tape.backward(loss);
    std::vector<std::vector<double>> g(static_cast<std::size_t>(model.params.count()));
    for (int pid = 0; pid < model.params.count(); ++pid) {
        std::span<const double> bg = tape.block_grad(tape.register_block(model.params.at(pid)));
        g[static_cast<std::size_t>(pid)].assign(model.params.at(pid).size(), 0.0);
        if (!bg.empty())
            std::copy(bg.begin(), bg.end(), g[static_cast<std::size_t>(pid)].begin());
    }

    double h = 1e-5, worst = 0.0;
    for (int pick = 0; pick < 40; ++pick) {
        int pid = static_cast<int>(rng.below(static_cast<std::uint64_t>(model.params.count())));
        std::size_t j = rng.below(model.params.at(pid).size());
        if (model.params.at(pid).name == "latent") {
            // Frame 0 is never rolled here, so its latent row has no gradient.
            j = model.params.at(pid).size() / 2 + rng.below(model.params.at(pid).size() / 2);
        }
        double save = model.params.at(pid).data[j];
        model.params.at(pid).data[j] = save + h;
        double up = build().v;
        model.params.at(pid).data[j] = save - h;
        double dn = build().v;
        model.params.at(pid).data[j] = save;
        double fd = (up - dn) / (2.0 * h);
        worst = std::max(worst, rel_err(g[static_cast<std::size_t>(pid)][j], fd));
    }
    return worst;
}

}  // namespace

GradcheckReport run_gradcheck(std::uint64_t seed) {
    GradcheckReport r;
    r.edge_crossing = check_edge_crossing(seed);
    r.pipeline = check_pipeline(seed);
    r.networks = check_networks(seed);
    r.motion = check_motion(seed);
    return r;
}

}  // namespace tetfit
