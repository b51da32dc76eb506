#pragma once

#include "trajrep/geometry.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <variant>
#include <vector>

namespace trajrep {

/// Constant world-frame observation noise of the recording vehicle:
/// equal x/y variance sigma_diag^2 plus an xy covariance term.
struct EgoNoiseParams {
    double sigma_diag = 0.02;  // meters
    double sigma_cov = 0.0;    // meters^2

    void validate() const;
};

/// Range/bearing sensor noise of observed agents. Range variance grows
/// quadratically with distance, angular resolution is constant, and sigma_c
/// adds an isotropic floor for tracker timing jitter. All entries are
/// strictly positive.
struct AgentNoiseParams {
    double sigma_alpha = 1e-3;  // radians
    double beta0 = 0.01;        // m^2
    double beta1 = 1e-3;        // m
    double beta2 = 1e-5;        // dimensionless
    double sigma_c = 0.1;       // meters

    void validate() const;
};

using NoiseParams = std::variant<EgoNoiseParams, AgentNoiseParams>;

/// Ego-to-agent line of sight at one timestamp. `bearing` is the angle of the
/// agent as seen from the ego, expressed in whatever frame the observations
/// live in; rotation() maps line-of-sight coordinates into that frame.
struct SampleGeometry {
    double r = 0.0;
    double bearing = 0.0;

    Eigen::Matrix2d rotation() const { return rotation2d(bearing); }

    void validate() const;
};

/// Eq-style 2x2 ego covariance [[s^2, c], [c, s^2]]. Throws on a
/// non-positive-definite parameter set.
Eigen::Matrix2d ego_cov(const EgoNoiseParams& params);

/// beta0 + beta1 r + beta2 r^2. Throws std::domain_error for r < 0.
double range_variance(const AgentNoiseParams& params, double r);

/// Linearized polar-to-Cartesian agent covariance: variances sigma_r^2(r)
/// along the line of sight and r^2 sigma_alpha^2 across it, plus the
/// isotropic sigma_c^2 floor, rotated by the bearing. At r = 0 the
/// cross-range part degenerates and only sigma_c^2 remains on that axis.
Eigen::Matrix2d agent_cov_world(const AgentNoiseParams& params, const SampleGeometry& geom);

/// Per-sample 2x2 covariance under either noise model. `frame_rotation`
/// rotates a world-frame covariance into the working frame (ego noise is
/// defined in world coordinates; agent geometry is already frame-relative).
Eigen::Matrix2d sample_cov(const NoiseParams& params, const SampleGeometry& geom,
                           double frame_rotation = 0.0);

/// Derivatives of sample_cov w.r.t. the natural parameters, in the same
/// order as pack_noise(): ego (sigma_diag, sigma_cov), agent (sigma_alpha,
/// beta0, beta1, beta2, sigma_c).
std::vector<Eigen::Matrix2d> sample_cov_grad(const NoiseParams& params,
                                             const SampleGeometry& geom,
                                             double frame_rotation = 0.0);

int noise_dof(const NoiseParams& params);

/// Block-diagonal md x md trajectory covariance built from per-sample 2x2
/// blocks. Off-block entries are exactly zero; each block is validated PD.
struct BlockDiagCov {
    std::vector<Eigen::Matrix2d> blocks;

    int dim() const { return 2 * static_cast<int>(blocks.size()); }
    Eigen::MatrixXd dense() const;
    double log_det() const;
    /// Per-block inverses (2x2 closed form).
    std::vector<Eigen::Matrix2d> inverse_blocks() const;
};

/// Validates every block (symmetric PD) and names the offending sample index
/// on failure.
BlockDiagCov assemble_block_cov(const std::vector<Eigen::Matrix2d>& per_sample);

nlohmann::json noise_to_json(const NoiseParams& params);
NoiseParams noise_from_json(const nlohmann::json& j);

}  // namespace trajrep
