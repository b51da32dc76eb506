#pragma once

#include "trajrep/geometry.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace trajrep {

enum class ObjectClass { ego, agent };

std::string to_string(ObjectClass c);
ObjectClass object_class_from_string(const std::string& s);

/// One timestamped observation of an object together with the recording
/// vehicle's pose at that instant. `heading` is NaN when the dataset does not
/// provide it.
struct RawSample {
    double t = 0.0;
    double x = 0.0;
    double y = 0.0;
    double ego_x = 0.0;
    double ego_y = 0.0;
    double ego_heading = 0.0;
    double heading = std::numeric_limits<double>::quiet_NaN();

    Eigen::Vector2d position() const { return {x, y}; }
    Eigen::Vector2d ego_position() const { return {ego_x, ego_y}; }
    bool has_heading() const { return std::isfinite(heading); }
};

/// Time-ordered samples of one object over one horizon window.
struct TrackedTrajectory {
    std::string scenario_id;
    std::string object_id;
    ObjectClass object_class = ObjectClass::agent;
    std::vector<RawSample> samples;
    double horizon = 5.0;

    /// World-to-working-frame map, once normalization has run.
    std::optional<RigidTransform2> local_transform;
    /// Set when normalization had to fall back to the identity rotation.
    bool frame_warning = false;
    /// Set by ingest when timestamps had to be sorted or are not strictly
    /// increasing.
    bool nonmonotone_time = false;
    /// Ego trajectories reconstructed from the ego pose columns rather than
    /// explicit rows; export skips them.
    bool synthesized_ego = false;

    size_t size() const { return samples.size(); }
    double duration() const {
        return samples.empty() ? 0.0 : samples.back().t - samples.front().t;
    }
};

/// RTS smoother and outlier-gate settings.
struct SmootherConfig {
    double process_noise = 3.0;       // sigma_a, m/s^2
    double measurement_noise = 0.5;   // sigma_m, m
    double position_gate = 2.0;       // m
    double accel_max = 6.0;           // m/s^2
    double decel_min = -10.0;         // m/s^2
    double static_length_gate = 0.5;  // m
    double duration_tol = 0.05;       // delta_T, fraction of the horizon
};

/// Smoothed kinematic states at the valid (unmasked) samples of a trajectory.
/// Samples sitting exactly at (0, 0) or non-finite are treated as missing and
/// do not appear here.
struct SmoothedStates {
    std::vector<int> sample_indices;
    Eigen::Matrix2Xd positions;
    Eigen::Matrix2Xd velocities;
    std::vector<Eigen::Matrix4d> covariances;
    bool time_violation = false;  // some dt <= 0 was encountered

    int size() const { return static_cast<int>(sample_indices.size()); }
    bool empty() const { return sample_indices.empty(); }
};

struct OutlierFlags {
    bool time = false;
    bool static_path = false;
    bool out_of_view = false;
    bool rts = false;

    bool any() const { return time || static_path || out_of_view || rts; }
};

/// Per-category counts over a corpus. Categories are not exclusive, so the
/// union (`total`) is at most the sum of the columns.
struct OutlierReport {
    std::int64_t n_input = 0;
    std::int64_t time = 0;
    std::int64_t static_path = 0;
    std::int64_t out_of_view = 0;
    std::int64_t rts = 0;
    std::int64_t total = 0;

    double percent(std::int64_t count) const {
        return n_input == 0 ? 0.0 : 100.0 * double(count) / double(n_input);
    }
};

nlohmann::json outlier_report_to_json(const OutlierReport& report);

enum class WindowMode { stride_1s, random_one };

/// Reads the canonical CSV (header scenario_id,object_id,class,t,x,y,ego_x,
/// ego_y,ego_heading,heading) into one trajectory per (scenario, object).
/// Scenarios without explicit ego rows get an ego trajectory reconstructed
/// from the ego pose columns. Malformed rows throw with the line number;
/// non-monotone timestamps only flag the trajectory.
std::vector<TrackedTrajectory> ingest(const std::string& path);

/// Inverse of ingest for round trips; synthesized ego trajectories are
/// skipped. Values print with enough digits to re-read bit-equal.
void export_csv(const std::vector<TrackedTrajectory>& corpus, const std::string& path);

/// Cuts horizon-T windows out of a longer trajectory. Windows are taken by
/// nominal sample count (round(T * rate) + 1 samples) so that corrupted
/// timing shows up as a duration mismatch downstream instead of silently
/// shrinking the window. A trajectory shorter than one window but spanning at
/// least T seconds is returned whole. Duration below T yields no windows.
std::vector<TrackedTrajectory> window(const TrackedTrajectory& traj, double T,
                                      WindowMode mode, std::uint64_t rng_seed,
                                      double nominal_rate_hz = 10.0);

/// Forward Kalman pass with state [x y vx vy], constant-velocity transition
/// and white-acceleration process noise, followed by the backward RTS pass.
/// Handles irregular time steps; fewer than two valid samples give an empty
/// result.
SmoothedStates rts_smooth(const TrackedTrajectory& traj, const SmootherConfig& cfg);

/// The four independent outlier predicates for one trajectory.
OutlierFlags classify_one(const TrackedTrajectory& traj, const SmootherConfig& cfg);

/// Splits a corpus into the clean subset and a per-category report.
std::pair<std::vector<TrackedTrajectory>, OutlierReport> classify_outliers(
    const std::vector<TrackedTrajectory>& trajs, const SmootherConfig& cfg);

/// Applies a known world-to-local map to every sample (object position, ego
/// pose, headings) and records it on the trajectory.
TrackedTrajectory apply_transform(const TrackedTrajectory& traj,
                                  const RigidTransform2& world_to_local);

/// Normalizes into the canonical fitting frame: the first smoothed position
/// becomes the origin and the initial smoothed velocity aligns with +x. Below
/// 0.1 m/s the rotation falls back to the first heading sample, or to the
/// identity (with frame_warning set) when no heading exists.
TrackedTrajectory to_local_frame(const TrackedTrajectory& traj,
                                 const SmoothedStates& smoothed);

/// Carries smoothed states into another frame: positions map rigidly,
/// velocities rotate, covariances are conjugated blockwise.
SmoothedStates transform_states(const SmoothedStates& states,
                                const RigidTransform2& transform);

/// Fitting view of one trajectory: rescaled times, working-frame
/// observations, per-sample line-of-sight geometry and heading.
struct FitTrajectory {
    std::string id;
    ObjectClass object_class = ObjectClass::agent;
    Eigen::VectorXd taus;        // in [0, 1]
    Eigen::Matrix2Xd obs;        // working frame
    Eigen::VectorXd range;       // ego-to-agent distance per sample
    Eigen::VectorXd rotation;    // agent: LOS bearing; ego: frame rotation
    Eigen::VectorXd headings;    // working frame, for lon/lat projections
    double horizon = 5.0;        // nominal T
    double t_span = 5.0;         // actual t_m - t_1, rescales derivatives

    int sample_count() const { return static_cast<int>(taus.size()); }
};

/// Builds the fitting view. The trajectory must already be in its working
/// frame; headings fall back to smoothed velocity directions when the data
/// provides none (pass the smoothed states of the transformed trajectory).
FitTrajectory prepare_for_fit(const TrackedTrajectory& traj,
                              const SmoothedStates* smoothed = nullptr);

}  // namespace trajrep
