#include "tetfit/observe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <unordered_map>

#include "io_util.hpp"
#include "json.hpp"

namespace tetfit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

std::string frame_name(int t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%03d.obj", t);
    return buf;
}

std::string obs_name(int t, ObservationMode mode) {
    const char* ext = mode == ObservationMode::kFull ? "obj" : (mode == ObservationMode::kSlices ? "csv" : "txt");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "obs_%03d.%s", t, ext);
    return buf;
}

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

}  // namespace

SurfaceMesh make_icosphere(double radius, int subdivisions) {
    if (!(radius > 0.0)) throw InvalidArgument("icosphere radius must be positive");
    if (subdivisions < 0 || subdivisions > 7) throw InvalidArgument("icosphere subdivisions must be in 0..7");

    SurfaceMesh mesh;
    double zc = 1.0 / std::sqrt(5.0), rc = 2.0 / std::sqrt(5.0);
    mesh.positions.push_back({0.0, 0.0, 1.0});
    for (int k = 0; k < 5; ++k) {
        double a = 2.0 * kPi * k / 5.0;
        mesh.positions.push_back({rc * std::cos(a), rc * std::sin(a), zc});
    }
    for (int k = 0; k < 5; ++k) {
        double a = 2.0 * kPi * k / 5.0 + kPi / 5.0;
        mesh.positions.push_back({rc * std::cos(a), rc * std::sin(a), -zc});
    }
    mesh.positions.push_back({0.0, 0.0, -1.0});
    for (std::uint32_t k = 0; k < 5; ++k) {
        std::uint32_t k1 = (k + 1) % 5;
        mesh.triangles.push_back({0, 1 + k, 1 + k1});
        mesh.triangles.push_back({1 + k, 6 + k, 1 + k1});
        mesh.triangles.push_back({1 + k1, 6 + k, 6 + k1});
        mesh.triangles.push_back({11, 6 + k1, 6 + k});
    }
    // Proper rotation taking the +z pole exactly onto +x, so the sphere keeps
    // a vertex at (radius, 0, 0).
    for (Vec3& p : mesh.positions) p = {p.z, p.y, -p.x};

    for (int s = 0; s < subdivisions; ++s) {
        std::unordered_map<std::uint64_t, std::uint32_t> midpoint;
        std::vector<std::array<std::uint32_t, 3>> next;
        next.reserve(mesh.triangles.size() * 4);
        auto mid = [&](std::uint32_t a, std::uint32_t b) {
            std::uint64_t key = a < b ? (static_cast<std::uint64_t>(a) << 32 | b)
                                      : (static_cast<std::uint64_t>(b) << 32 | a);
            auto [it, inserted] = midpoint.try_emplace(key, static_cast<std::uint32_t>(mesh.positions.size()));
            if (inserted) {
                Vec3 m = (mesh.positions[a] + mesh.positions[b]) * 0.5;
                mesh.positions.push_back(m / m.norm());
            }
            return it->second;
        };
        for (const auto& tri : mesh.triangles) {
            std::uint32_t ab = mid(tri[0], tri[1]), bc = mid(tri[1], tri[2]), ca = mid(tri[2], tri[0]);
            next.push_back({tri[0], ab, ca});
            next.push_back({tri[1], bc, ab});
            next.push_back({tri[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        mesh.triangles = std::move(next);
    }
    for (Vec3& p : mesh.positions) p = p * (radius / p.norm());
    return mesh;
}

SurfaceMesh make_box(const Vec3& half_extents) {
    if (!(half_extents.x > 0.0 && half_extents.y > 0.0 && half_extents.z > 0.0))
        throw InvalidArgument("box half-extents must be positive");
    double x = half_extents.x, y = half_extents.y, z = half_extents.z;
    SurfaceMesh mesh;
    mesh.positions = {{-x, -y, -z}, {x, -y, -z}, {x, y, -z}, {-x, y, -z},
                      {-x, -y, z},  {x, -y, z},  {x, y, z},  {-x, y, z}};
    mesh.triangles = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
                      {2, 3, 7}, {2, 7, 6}, {0, 4, 7}, {0, 7, 3}, {1, 2, 6}, {1, 6, 5}};
    return mesh;
}

SurfaceMesh make_capsule(double radius, double half_height, int segments, int rings) {
    if (!(radius > 0.0) || !(half_height > 0.0)) throw InvalidArgument("capsule dimensions must be positive");
    if (segments < 3 || rings < 1) throw InvalidArgument("capsule needs >= 3 segments and >= 1 ring");

    SurfaceMesh mesh;
    // Profile rows top to bottom: upper hemisphere, then lower; the band
    // between the two equator rows is the cylinder wall.
    std::vector<std::pair<double, double>> rows;  // (z, ring radius)
    for (int i = 1; i <= rings; ++i) {
        double a = 0.5 * kPi * i / rings;
        rows.emplace_back(half_height + radius * std::cos(a), radius * std::sin(a));
    }
    for (int i = rings; i >= 1; --i) {
        double a = 0.5 * kPi * i / rings;
        rows.emplace_back(-half_height - radius * std::cos(a), radius * std::sin(a));
    }

    mesh.positions.push_back({0.0, 0.0, half_height + radius});
    for (const auto& [z, r] : rows) {
        for (int k = 0; k < segments; ++k) {
            double a = 2.0 * kPi * k / segments;
            mesh.positions.push_back({r * std::cos(a), r * std::sin(a), z});
        }
    }
    mesh.positions.push_back({0.0, 0.0, -half_height - radius});

    auto ring_vertex = [&](std::size_t row, int k) {
        return static_cast<std::uint32_t>(1 + row * segments + static_cast<std::size_t>(k % segments));
    };
    for (int k = 0; k < segments; ++k)
        mesh.triangles.push_back({0, ring_vertex(0, k), ring_vertex(0, k + 1)});
    for (std::size_t row = 0; row + 1 < rows.size(); ++row) {
        for (int k = 0; k < segments; ++k) {
            std::uint32_t ak = ring_vertex(row, k), ak1 = ring_vertex(row, k + 1);
            std::uint32_t bk = ring_vertex(row + 1, k), bk1 = ring_vertex(row + 1, k + 1);
            mesh.triangles.push_back({ak, bk, bk1});
            mesh.triangles.push_back({ak, bk1, ak1});
        }
    }
    std::uint32_t bottom = static_cast<std::uint32_t>(mesh.positions.size() - 1);
    std::size_t last = rows.size() - 1;
    for (int k = 0; k < segments; ++k)
        mesh.triangles.push_back({bottom, ring_vertex(last, k + 1), ring_vertex(last, k)});
    return mesh;
}

BaseShape base_shape_from_name(const std::string& name) {
    if (name == "icosphere") return BaseShape::kIcosphere;
    if (name == "box") return BaseShape::kBox;
    if (name == "capsule") return BaseShape::kCapsule;
    throw InvalidArgument("unknown base shape: " + name);
}

std::string base_shape_name(BaseShape base) {
    switch (base) {
        case BaseShape::kIcosphere: return "icosphere";
        case BaseShape::kBox: return "box";
        case BaseShape::kCapsule: return "capsule";
    }
    throw InvalidArgument("unknown base shape enum");
}

SurfaceMesh make_base_shape(BaseShape base) {
    switch (base) {
        case BaseShape::kIcosphere: return make_icosphere(0.5, 3);
        case BaseShape::kBox: return make_box({0.5, 0.5, 0.5});
        case BaseShape::kCapsule: return make_capsule(0.35, 0.3, 32, 8);
    }
    throw InvalidArgument("unknown base shape enum");
}

MotionKind motion_kind_from_name(const std::string& name) {
    if (name == "translate") return MotionKind::kTranslate;
    if (name == "squash") return MotionKind::kSquash;
    if (name == "twist") return MotionKind::kTwist;
    if (name == "radial-pulse") return MotionKind::kRadialPulse;
    throw InvalidArgument("unknown motion kind: " + name);
}

std::string motion_kind_name(MotionKind kind) {
    switch (kind) {
        case MotionKind::kTranslate: return "translate";
        case MotionKind::kSquash: return "squash";
        case MotionKind::kTwist: return "twist";
        case MotionKind::kRadialPulse: return "radial-pulse";
    }
    throw InvalidArgument("unknown motion kind enum");
}

Vec3 AnalyticMotion::apply(const Vec3& p, int frame) const {
    double s = std::sin(2.0 * kPi * frame / period);
    switch (kind) {
        case MotionKind::kTranslate:
            return {p.x + amplitude * s, p.y, p.z};
        case MotionKind::kSquash: {
            double sc = 1.0 + amplitude * s;
            double inv = 1.0 / std::sqrt(sc);
            return {p.x * inv, p.y * inv, p.z * sc};
        }
        case MotionKind::kTwist: {
            double ang = amplitude * s * p.z;
            double c = std::cos(ang), si = std::sin(ang);
            return {c * p.x - si * p.y, si * p.x + c * p.y, p.z};
        }
        case MotionKind::kRadialPulse: {
            double r = p.norm();
            if (r == 0.0) return p;
            double ramp = std::min(r / 0.15, 1.0);
            return p + (p / r) * (amplitude * s * ramp);
        }
    }
    throw InvalidArgument("unknown motion kind enum");
}

AnalyticMotion make_motion(MotionKind kind, double amplitude, int period) {
    if (period < 1) throw InvalidArgument("motion period must be >= 1");
    double limit = 0.0;
    switch (kind) {
        case MotionKind::kTranslate: limit = 0.25; break;
        case MotionKind::kSquash: limit = 0.35; break;
        case MotionKind::kTwist: limit = 0.5 * kPi; break;
        // Radial ramp stays monotone only below the 0.15 ramp width.
        case MotionKind::kRadialPulse: limit = 0.14; break;
    }
    if (!(amplitude >= 0.0 && amplitude <= limit))
        throw InvalidArgument("amplitude out of range for " + motion_kind_name(kind) +
                              " (0 <= a <= " + ioutil::format_double(limit) + ")");
    return {kind, amplitude, period};
}

ObservationMode observation_mode_from_name(const std::string& name) {
    if (name == "full") return ObservationMode::kFull;
    if (name == "slices") return ObservationMode::kSlices;
    if (name == "volume") return ObservationMode::kVolume;
    throw InvalidArgument("unknown observation mode: " + name);
}

std::string observation_mode_name(ObservationMode mode) {
    switch (mode) {
        case ObservationMode::kFull: return "full";
        case ObservationMode::kSlices: return "slices";
        case ObservationMode::kVolume: return "volume";
    }
    throw InvalidArgument("unknown observation mode enum");
}

SlicePlacement slice_placement_from_name(const std::string& name) {
    if (name == "central") return SlicePlacement::kCentral;
    if (name == "strided") return SlicePlacement::kStrided;
    if (name == "explicit") return SlicePlacement::kExplicit;
    throw InvalidArgument("unknown slice placement: " + name);
}

std::string slice_placement_name(SlicePlacement placement) {
    switch (placement) {
        case SlicePlacement::kCentral: return "central";
        case SlicePlacement::kStrided: return "strided";
        case SlicePlacement::kExplicit: return "explicit";
    }
    throw InvalidArgument("unknown slice placement enum");
}

std::vector<PlaneSpec> make_slice_planes(double z_lo, double z_hi, const SliceSpec& spec) {
    std::vector<PlaneSpec> planes;
    if (spec.placement == SlicePlacement::kExplicit) {
        if (spec.explicit_z.empty()) throw InvalidArgument("explicit slice placement needs plane offsets");
        for (double z : spec.explicit_z) planes.push_back({{0.0, 0.0, 1.0}, z});
        return planes;
    }
    if (spec.k < 1 || spec.k > 9) throw InvalidArgument("slice count must be in 1..9");
    if (!(z_hi > z_lo)) throw InvalidArgument("slice placement needs a nonempty z-range");
    double mid = 0.5 * (z_lo + z_hi);
    double ext = z_hi - z_lo;
    auto stack_z = [&](int j) { return mid + (j - 4) / 8.0 * 0.9 * ext; };
    if (spec.placement == SlicePlacement::kCentral) {
        int start = (9 - spec.k) / 2;
        for (int i = 0; i < spec.k; ++i) planes.push_back({{0.0, 0.0, 1.0}, stack_z(start + i)});
    } else {
        for (int i = 0; i < spec.k; ++i) {
            int j = spec.k == 1 ? 4 : static_cast<int>(std::lround(i * 8.0 / (spec.k - 1)));
            planes.push_back({{0.0, 0.0, 1.0}, stack_z(j)});
        }
    }
    return planes;
}

Observation observe_full(const SurfaceMesh& mesh) {
    Observation obs;
    obs.mode = ObservationMode::kFull;
    obs.target = mesh;
    return obs;
}

Observation observe_slices(const SurfaceMesh& mesh, const std::vector<PlaneSpec>& planes) {
    if (planes.empty()) throw InvalidArgument("slice observation needs at least one plane");
    Observation obs;
    obs.mode = ObservationMode::kSlices;
    obs.planes = planes;
    for (std::size_t i = 0; i < planes.size(); ++i) {
        obs.contours.push_back(plane_section(mesh, planes[i]));
        if (obs.contours.back().empty())
            std::fprintf(stderr, "warning: slice plane %zu (offset %s) misses the surface\n", i,
                         ioutil::format_double(planes[i].d).c_str());
    }
    return obs;
}

Observation observe_volume(const SurfaceMesh& mesh) {
    Observation obs;
    obs.mode = ObservationMode::kVolume;
    obs.volume = normalized_volume(mesh);
    if (!(obs.volume >= 0.0 && obs.volume <= 1.0))
        throw InvalidArgument("normalized volume observation outside [0,1]");
    return obs;
}

Observation extract_observation(const SurfaceMesh& mesh, ObservationMode mode,
                                const SliceSpec& slices, std::uint64_t seed) {
    (void)seed;
    if (mesh.positions.empty() || mesh.triangles.empty())
        throw InvalidArgument("cannot observe an empty mesh");
    switch (mode) {
        case ObservationMode::kFull: return observe_full(mesh);
        case ObservationMode::kSlices: {
            double z_lo = mesh.positions[0].z, z_hi = z_lo;
            for (const Vec3& p : mesh.positions) {
                z_lo = std::min(z_lo, p.z);
                z_hi = std::max(z_hi, p.z);
            }
            return observe_slices(mesh, make_slice_planes(z_lo, z_hi, slices));
        }
        case ObservationMode::kVolume: return observe_volume(mesh);
    }
    throw InvalidArgument("unknown observation mode enum");
}

SequenceDataset generate_sequence(BaseShape base, const AnalyticMotion& motion, int frames,
                                  ObservationMode mode, const SliceSpec& slices, std::uint64_t seed) {
    if (frames < 1) throw InvalidArgument("frame count must be >= 1");
    AnalyticMotion checked = make_motion(motion.kind, motion.amplitude, motion.period);

    SequenceDataset ds;
    ds.base = base;
    ds.motion = checked;
    ds.frames = frames;
    ds.seed = seed;
    ds.mode = mode;
    ds.slices = slices;

    SurfaceMesh canonical = make_base_shape(base);
    ds.gt_meshes.reserve(frames);
    for (int t = 0; t < frames; ++t) {
        SurfaceMesh frame;
        frame.triangles = canonical.triangles;
        frame.positions.reserve(canonical.positions.size());
        for (const Vec3& p : canonical.positions) {
            Vec3 q = checked.apply(p, t);
            if (!(std::abs(q.x) <= 1.0 && std::abs(q.y) <= 1.0 && std::abs(q.z) <= 1.0))
                throw InvalidArgument("motion pushes the shape outside the domain cube");
            frame.positions.push_back(q);
        }
        ds.gt_meshes.push_back(std::move(frame));
    }

    if (mode == ObservationMode::kSlices && slices.placement != SlicePlacement::kExplicit) {
        // Shared stack from the intersected z-extent, so every plane crosses
        // every frame.
        double z_lo = -1e300, z_hi = 1e300;
        for (const SurfaceMesh& m : ds.gt_meshes) {
            double lo = m.positions[0].z, hi = lo;
            for (const Vec3& p : m.positions) {
                lo = std::min(lo, p.z);
                hi = std::max(hi, p.z);
            }
            z_lo = std::max(z_lo, lo);
            z_hi = std::min(z_hi, hi);
        }
        ds.planes = make_slice_planes(z_lo, z_hi, slices);
    } else if (mode == ObservationMode::kSlices) {
        ds.planes = make_slice_planes(0.0, 0.0, slices);
    }

    ds.observations.reserve(frames);
    for (int t = 0; t < frames; ++t) {
        switch (mode) {
            case ObservationMode::kFull: ds.observations.push_back(observe_full(ds.gt_meshes[t])); break;
            case ObservationMode::kSlices: ds.observations.push_back(observe_slices(ds.gt_meshes[t], ds.planes)); break;
            case ObservationMode::kVolume: ds.observations.push_back(observe_volume(ds.gt_meshes[t])); break;
        }
    }
    return ds;
}

void save_dataset(const std::string& dir, const SequenceDataset& ds) {
    if (ds.gt_meshes.size() != static_cast<std::size_t>(ds.frames) ||
        ds.observations.size() != static_cast<std::size_t>(ds.frames))
        throw InvalidArgument("dataset frame tables disagree with the frame count");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

    json files_frames = json::array(), files_obs = json::array();
    for (int t = 0; t < ds.frames; ++t) {
        save_obj(join(dir, frame_name(t)), ds.gt_meshes[t]);
        files_frames.push_back(frame_name(t));
        const Observation& obs = ds.observations[t];
        std::string oname = obs_name(t, ds.mode);
        switch (ds.mode) {
            case ObservationMode::kFull: save_obj(join(dir, oname), obs.target); break;
            case ObservationMode::kSlices: save_contours_csv(join(dir, oname), obs.contours); break;
            case ObservationMode::kVolume:
                ioutil::write_text_file(join(dir, oname), ioutil::format_double(obs.volume) + "\n");
                break;
        }
        files_obs.push_back(oname);
    }

    json m;
    m["format_version"] = 1;
    m["base"] = base_shape_name(ds.base);
    m["motion"] = {{"kind", motion_kind_name(ds.motion.kind)},
                   {"amplitude", ds.motion.amplitude},
                   {"period", ds.motion.period}};
    m["frames"] = ds.frames;
    m["seed"] = ds.seed;
    m["mode"] = observation_mode_name(ds.mode);
    if (ds.mode == ObservationMode::kSlices) {
        json z = json::array();
        for (const PlaneSpec& p : ds.planes) z.push_back(p.d);
        m["slices"] = {{"k", static_cast<int>(ds.planes.size())},
                       {"placement", slice_placement_name(ds.slices.placement)},
                       {"z", z}};
    }
    m["files"] = {{"frames", files_frames}, {"observations", files_obs}};
    ioutil::write_text_file(join(dir, "manifest.json"), m.dump(2) + "\n");
}

SequenceDataset load_dataset(const std::string& dir) {
    std::string text = ioutil::read_text_file(join(dir, "manifest.json"));
    json m;
    try {
        m = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(join(dir, "manifest.json") + ": " + e.what());
    }
    try {
        if (m.at("format_version").get<int>() != 1)
            throw IoError(dir + ": unsupported dataset format version");

        SequenceDataset ds;
        ds.base = base_shape_from_name(m.at("base").get<std::string>());
        const json& mo = m.at("motion");
        ds.motion = make_motion(motion_kind_from_name(mo.at("kind").get<std::string>()),
                                mo.at("amplitude").get<double>(), mo.at("period").get<int>());
        ds.frames = m.at("frames").get<int>();
        if (ds.frames < 1) throw IoError(dir + ": bad frame count");
        ds.seed = m.at("seed").get<std::uint64_t>();
        ds.mode = observation_mode_from_name(m.at("mode").get<std::string>());
        if (ds.mode == ObservationMode::kSlices) {
            const json& sl = m.at("slices");
            ds.slices.k = sl.at("k").get<int>();
            ds.slices.placement = slice_placement_from_name(sl.at("placement").get<std::string>());
            for (double z : sl.at("z")) ds.planes.push_back({{0.0, 0.0, 1.0}, z});
            if (ds.slices.placement == SlicePlacement::kExplicit)
                for (const PlaneSpec& p : ds.planes) ds.slices.explicit_z.push_back(p.d);
        }

        const json& frames_tab = m.at("files").at("frames");
        const json& obs_tab = m.at("files").at("observations");
        if (static_cast<int>(frames_tab.size()) != ds.frames || static_cast<int>(obs_tab.size()) != ds.frames)
            throw IoError(dir + ": file table length disagrees with the frame count");

        for (int t = 0; t < ds.frames; ++t) {
            ds.gt_meshes.push_back(load_obj(join(dir, frames_tab[t].get<std::string>())));
            if (t > 0 && ds.gt_meshes[t].triangles != ds.gt_meshes[0].triangles)
                throw IoError(dir + ": frame connectivity differs from the canonical mesh");
            Observation obs;
            obs.mode = ds.mode;
            std::string opath = join(dir, obs_tab[t].get<std::string>());
            switch (ds.mode) {
                case ObservationMode::kFull: obs.target = load_obj(opath); break;
                case ObservationMode::kSlices:
                    obs.planes = ds.planes;
                    obs.contours = load_contours_csv(opath);
                    if (obs.contours.size() > ds.planes.size())
                        throw IoError(opath + ": more contour planes than the manifest declares");
                    obs.contours.resize(ds.planes.size());
                    break;
                case ObservationMode::kVolume: {
                    std::string vtext = ioutil::read_text_file(opath);
                    char* end = nullptr;
                    obs.volume = std::strtod(vtext.c_str(), &end);
                    if (end == vtext.c_str()) throw IoError(opath + ": expected a decimal volume");
                    break;
                }
            }
            ds.observations.push_back(std::move(obs));
        }
        return ds;
    } catch (const json::exception& e) {
        throw IoError(join(dir, "manifest.json") + ": " + e.what());
    }
}

}  // namespace tetfit
