#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tetfit/common.hpp"
#include "tetfit/geometry.hpp"
#include "tetfit/march.hpp"

namespace tetfit {

// Closed analytic test shapes, outward-oriented, centered at the origin and
// sized to stay inside the domain cube under the supported motions.
SurfaceMesh make_icosphere(double radius, int subdivisions);
SurfaceMesh make_box(const Vec3& half_extents);
SurfaceMesh make_capsule(double radius, double half_height, int segments, int rings);

enum class BaseShape { kIcosphere, kBox, kCapsule };
BaseShape base_shape_from_name(const std::string& name);
std::string base_shape_name(BaseShape base);
SurfaceMesh make_base_shape(BaseShape base);

enum class MotionKind { kTranslate, kSquash, kTwist, kRadialPulse };
MotionKind motion_kind_from_name(const std::string& name);
std::string motion_kind_name(MotionKind kind);

// Time-indexed diffeomorphism of the domain; frame 0 is always the identity.
// All kinds modulate by sin(2*pi*frame/period).
//   translate:    +x shift by amplitude
//   squash:       z scaled by 1+a, x,y by 1/sqrt(1+a) (volume preserving)
//   twist:        rotation about z by amplitude*z radians
//   radial-pulse: radial shift by amplitude, ramped linearly to 0 at the origin
//                 over |p| < 0.15
struct AnalyticMotion {
    MotionKind kind = MotionKind::kTranslate;
    double amplitude = 0.0;
    int period = 24;

    Vec3 apply(const Vec3& p, int frame) const;
};
// Validates the amplitude against the per-kind range that keeps the motion a
// diffeomorphism with the shipped base shapes inside the domain.
AnalyticMotion make_motion(MotionKind kind, double amplitude, int period);

enum class ObservationMode { kFull, kSlices, kVolume };
ObservationMode observation_mode_from_name(const std::string& name);
std::string observation_mode_name(ObservationMode mode);

enum class SlicePlacement { kCentral, kStrided, kExplicit };
SlicePlacement slice_placement_from_name(const std::string& name);
std::string slice_placement_name(SlicePlacement placement);

// K planes normal to z, chosen out of a fixed stack of 9 spanning the inner
// 90% of a z-range: central takes the middle K consecutive stack slots,
// strided spreads K slots across the whole stack. Explicit placement supplies
// plane offsets directly.
struct SliceSpec {
    int k = 3;
    SlicePlacement placement = SlicePlacement::kCentral;
    std::vector<double> explicit_z;
};
std::vector<PlaneSpec> make_slice_planes(double z_lo, double z_hi, const SliceSpec& spec);

// Evidence for one frame. Exactly the fields of the active mode are filled.
struct Observation {
    ObservationMode mode = ObservationMode::kFull;
    SurfaceMesh target;                       // full
    std::vector<PlaneSpec> planes;            // slices
    std::vector<std::vector<Vec3>> contours;  // slices, aligned with planes
    double volume = 0.0;                      // volume, in [0,1]
};

Observation observe_full(const SurfaceMesh& mesh);
// Planes that miss the surface keep an empty contour and warn on stderr.
Observation observe_slices(const SurfaceMesh& mesh, const std::vector<PlaneSpec>& planes);
Observation observe_volume(const SurfaceMesh& mesh);
// Slice planes placed from this mesh's own z-extent. seed is carried for
// interface stability; current modes are deterministic.
Observation extract_observation(const SurfaceMesh& mesh, ObservationMode mode,
                                const SliceSpec& slices, std::uint64_t seed);

// Ground-truth sequence with identity vertex correspondence: every frame mesh
// shares the canonical connectivity, frame 0 is the canonical mesh itself.
struct SequenceDataset {
    BaseShape base = BaseShape::kIcosphere;
    AnalyticMotion motion;
    int frames = 25;
    std::uint64_t seed = 0;
    ObservationMode mode = ObservationMode::kFull;
    SliceSpec slices;
    std::vector<PlaneSpec> planes;  // shared across frames (slices mode)
    std::vector<SurfaceMesh> gt_meshes;
    std::vector<Observation> observations;

    const SurfaceMesh& canonical() const { return gt_meshes.front(); }
};

// Slices mode resolves one shared plane stack from the min-over-frames
// z-extent, so every plane crosses every frame.
SequenceDataset generate_sequence(BaseShape base, const AnalyticMotion& motion, int frames,
                                  ObservationMode mode, const SliceSpec& slices, std::uint64_t seed);

// Directory layout: manifest.json, frame_%03d.obj, obs_%03d.{obj|csv|txt}.
// Save-load-save round-trips byte-identically.
void save_dataset(const std::string& dir, const SequenceDataset& ds);
SequenceDataset load_dataset(const std::string& dir);

}  // namespace tetfit
