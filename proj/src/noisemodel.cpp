#include "trajrep/noisemodel.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace trajrep {
namespace {

bool is_pd_2x2(const Eigen::Matrix2d& s) {
    return s(0, 0) > 0.0 && s.determinant() > 0.0 &&
           std::abs(s(0, 1) - s(1, 0)) <= 1e-12 * (1.0 + std::abs(s(0, 1)));
}

}  // namespace

void EgoNoiseParams::validate() const {
    if (!(sigma_diag > 0.0))
        throw std::invalid_argument("EgoNoiseParams: sigma_diag must be > 0");
    if (!(std::abs(sigma_cov) < sigma_diag * sigma_diag))
        throw std::invalid_argument("EgoNoiseParams: |sigma_cov| must be < sigma_diag^2");
}

void AgentNoiseParams::validate() const {
    if (!(sigma_alpha > 0.0 && beta0 > 0.0 && beta1 > 0.0 && beta2 > 0.0 && sigma_c > 0.0))
        throw std::invalid_argument("AgentNoiseParams: all parameters must be > 0");
}

void SampleGeometry::validate() const {
    if (!(r >= 0.0)) throw std::domain_error("SampleGeometry: r must be >= 0");
}

Eigen::Matrix2d ego_cov(const EgoNoiseParams& params) {
    params.validate();
    Eigen::Matrix2d s;
    const double v = params.sigma_diag * params.sigma_diag;
    s << v, params.sigma_cov, params.sigma_cov, v;
    return s;
}

double range_variance(const AgentNoiseParams& params, double r) {
    if (r < 0.0) throw std::domain_error("range_variance: r must be >= 0");
    return params.beta0 + params.beta1 * r + params.beta2 * r * r;
}

Eigen::Matrix2d agent_cov_world(const AgentNoiseParams& params, const SampleGeometry& geom) {
    geom.validate();
    const double cc = params.sigma_c * params.sigma_c;
    Eigen::Matrix2d los = Eigen::Matrix2d::Zero();
    los(0, 0) = range_variance(params, geom.r) + cc;
    los(1, 1) = geom.r * geom.r * params.sigma_alpha * params.sigma_alpha + cc;
    const Eigen::Matrix2d rot = geom.rotation();
    return rot * los * rot.transpose();
}

Eigen::Matrix2d sample_cov(const NoiseParams& params, const SampleGeometry& geom,
                           double frame_rotation) {
    if (const auto* ego = std::get_if<EgoNoiseParams>(&params)) {
        const Eigen::Matrix2d rot = rotation2d(frame_rotation);
        return rot * ego_cov(*ego) * rot.transpose();
    }
    return agent_cov_world(std::get<AgentNoiseParams>(params), geom);
}

std::vector<Eigen::Matrix2d> sample_cov_grad(const NoiseParams& params,
                                             const SampleGeometry& geom,
                                             double frame_rotation) {
    std::vector<Eigen::Matrix2d> grads;
    if (const auto* ego = std::get_if<EgoNoiseParams>(&params)) {
        const Eigen::Matrix2d rot = rotation2d(frame_rotation);
        // d/d sigma_diag of sigma_diag^2 I is isotropic, so the rotation drops out.
        grads.push_back(2.0 * ego->sigma_diag * Eigen::Matrix2d::Identity());
        Eigen::Matrix2d off;
        off << 0.0, 1.0, 1.0, 0.0;
        grads.push_back(rot * off * rot.transpose());
        return grads;
    }
    const auto& agent = std::get<AgentNoiseParams>(params);
    const Eigen::Matrix2d rot = geom.rotation();
    const double r = geom.r;
    auto los_diag = [&](double along, double cross) {
        Eigen::Matrix2d d = Eigen::Matrix2d::Zero();
        d(0, 0) = along;
        d(1, 1) = cross;
        return Eigen::Matrix2d(rot * d * rot.transpose());
    };
    grads.push_back(los_diag(0.0, 2.0 * r * r * agent.sigma_alpha));  // sigma_alpha
    grads.push_back(los_diag(1.0, 0.0));                              // beta0
    grads.push_back(los_diag(r, 0.0));                                // beta1
    grads.push_back(los_diag(r * r, 0.0));                            // beta2
    grads.push_back(2.0 * agent.sigma_c * Eigen::Matrix2d::Identity());
    return grads;
}

int noise_dof(const NoiseParams& params) {
    return std::holds_alternative<EgoNoiseParams>(params) ? 2 : 5;
}

Eigen::MatrixXd BlockDiagCov::dense() const {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(dim(), dim());
    for (size_t j = 0; j < blocks.size(); ++j) s.block<2, 2>(2 * j, 2 * j) = blocks[j];
    return s;
}

double BlockDiagCov::log_det() const {
    double acc = 0.0;
    for (const auto& b : blocks) acc += std::log(b.determinant());
    return acc;
}

std::vector<Eigen::Matrix2d> BlockDiagCov::inverse_blocks() const {
    std::vector<Eigen::Matrix2d> inv;
    inv.reserve(blocks.size());
    for (const auto& b : blocks) inv.push_back(b.inverse());
    return inv;
}

BlockDiagCov assemble_block_cov(const std::vector<Eigen::Matrix2d>& per_sample) {
    if (per_sample.empty())
        throw std::invalid_argument("assemble_block_cov: need at least one block");
    for (size_t j = 0; j < per_sample.size(); ++j) {
        if (!is_pd_2x2(per_sample[j]))
            throw std::invalid_argument("assemble_block_cov: block at sample " +
                                        std::to_string(j) + " is not symmetric PD");
    }
    return BlockDiagCov{per_sample};
}

nlohmann::json noise_to_json(const NoiseParams& params) {
    nlohmann::json j;
    if (const auto* ego = std::get_if<EgoNoiseParams>(&params)) {
        j["sigma_diag"] = ego->sigma_diag;
        j["sigma_cov"] = ego->sigma_cov;
    } else {
        const auto& a = std::get<AgentNoiseParams>(params);
        j["sigma_alpha"] = a.sigma_alpha;
        j["beta0"] = a.beta0;
        j["beta1"] = a.beta1;
        j["beta2"] = a.beta2;
        j["sigma_c"] = a.sigma_c;
    }
    return j;
}

NoiseParams noise_from_json(const nlohmann::json& j) {
    if (j.contains("sigma_diag")) {
        EgoNoiseParams p;
        p.sigma_diag = j.at("sigma_diag").get<double>();
        p.sigma_cov = j.at("sigma_cov").get<double>();
        p.validate();
        return p;
    }
    AgentNoiseParams p;
    p.sigma_alpha = j.at("sigma_alpha").get<double>();
    p.beta0 = j.at("beta0").get<double>();
    p.beta1 = j.at("beta1").get<double>();
    p.beta2 = j.at("beta2").get<double>();
    p.sigma_c = j.at("sigma_c").get<double>();
    p.validate();
    return p;
}

}  // namespace trajrep
