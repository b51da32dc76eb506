#pragma once

#include "trajrep/basis.hpp"
#include "trajrep/noisemodel.hpp"
#include "trajrep/trajdata.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace trajrep {

/// Deterministic ground-truth corpus generator. Every trajectory draws
/// coefficients from the configured prior, is placed in the world via a
/// random rigid anchor, observed through the exact structured noise model,
/// and optionally corrupted with labelled outliers.
struct SynthConfig {
    int corpus_size = 100;
    int samples_per_traj = 50;
    double horizon = 5.0;
    int degree = 5;
    ObjectClass object_class = ObjectClass::agent;
    Eigen::MatrixXd sigma_omega;          // generating prior, (n+1)d square
    std::optional<NoiseParams> noise;     // nullopt = noiseless observations
    std::string ego_script = "straight";  // straight | turn | stop_and_go
    double ego_speed = 10.0;
    std::uint64_t rng_seed = 1;
    double rate_time = 0.0;   // timestamp stretch
    double rate_static = 0.0; // frozen positions
    double rate_oov = 0.0;    // (0,0) resets
    double rate_jump = 0.0;   // 5 m position jumps

    void validate() const;
};

struct GroundTruthTrajectory {
    std::string scenario_id;
    std::string object_id;
    Eigen::VectorXd omega;  // latent coefficients in the anchor frame
    RigidTransform2 world_to_anchor;
    std::vector<std::string> injected;  // outlier categories applied
};

struct GroundTruth {
    int degree = 0;
    double horizon = 0.0;
    Eigen::MatrixXd sigma_omega;
    std::optional<NoiseParams> noise;
    std::vector<GroundTruthTrajectory> trajectories;
};

/// Structured full prior covariance at the road-vehicle displacement scale:
/// per-order magnitudes decay geometrically with `decay`, the lateral
/// dimension is narrower, and orders are correlated through a rho^|i-j|
/// factor. Decay close to 1 keeps high polynomial orders prominent
/// (maneuver-rich corpora for model-selection checks).
Eigen::MatrixXd preset_prior(int degree, double horizon, double scale = 1.0,
                             double decay = 0.5);

/// Named noise presets at tabulated sensor magnitudes ("a1_ego", "a2_ego",
/// "wo_ego", "desk_ego", "a1_agent", "a2_agent", "wo_agent").
NoiseParams preset_noise(const std::string& name);

/// Generates the corpus (world-frame samples, anchor transform attached) and
/// the matching ground-truth record. Identical seeds give byte-identical
/// output irrespective of parallelism.
std::pair<std::vector<TrackedTrajectory>, GroundTruth> generate(const SynthConfig& cfg);

/// Canonical-CSV export (same schema as ingest).
void export_corpus(const std::vector<TrackedTrajectory>& corpus, const std::string& path);

SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json ground_truth_to_json(const GroundTruth& gt);

/// Fitting views of a generated corpus in the exact anchor frames of its
/// ground truth, where the latent coefficients are zero-mean by
/// construction. This is the frame every recovery oracle works in.
std::vector<FitTrajectory> anchor_fit_corpus(const std::vector<TrackedTrajectory>& corpus,
                                             const GroundTruth& gt);

/// Portable normal sampler (Box-Muller over the engine's uniform output), so
/// generated corpora do not depend on the standard library's distribution
/// implementation.
class GaussianStream {
  public:
    explicit GaussianStream(std::uint64_t seed_hi, std::uint64_t seed_lo = 0);
    double next();
    Eigen::VectorXd vector(int n);
    /// Uniform in [0, 1).
    double uniform();

  private:
    std::uint64_t state_[2];
    bool have_spare_ = false;
    double spare_ = 0.0;
    std::uint64_t next_u64();
};

}  // namespace trajrep
