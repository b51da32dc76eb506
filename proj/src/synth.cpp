#include "trajrep/synth.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace trajrep {
namespace {

// Ego pose (position, heading) at time t for the scripted presets.
void ego_pose(const std::string& script, double speed, double horizon, double t,
              Eigen::Vector2d& pos, double& heading) {
    if (script == "turn") {
        const double yaw_rate = 0.1;
        const double radius = speed / yaw_rate;
        heading = yaw_rate * t;
        pos = {radius * std::sin(heading), radius * (1.0 - std::cos(heading))};
    } else if (script == "stop_and_go") {
        const double t1 = horizon / 3.0, t2 = 2.0 * horizon / 3.0;
        heading = 0.0;
        double dist;
        if (t < t1) dist = speed * t;
        else if (t < t2) dist = speed * t1;
        else dist = speed * t1 + speed * (t - t2);
        pos = {dist, 0.0};
    } else {  // straight
        heading = 0.0;
        pos = {speed * t, 0.0};
    }
}

}  // namespace

GaussianStream::GaussianStream(std::uint64_t seed_hi, std::uint64_t seed_lo) {
    // splitmix64 expansion of the two seed words.
    auto mix = [](std::uint64_t& z) {
        z += 0x9e3779b97f4a7c15ull;
        std::uint64_t x = z;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    };
    std::uint64_t s = seed_hi * 0x9e3779b97f4a7c15ull + seed_lo;
    state_[0] = mix(s);
    state_[1] = mix(s);
    if (state_[0] == 0 && state_[1] == 0) state_[0] = 1;
}

std::uint64_t GaussianStream::next_u64() {
    // xoroshiro128+
    const std::uint64_t s0 = state_[0];
    std::uint64_t s1 = state_[1];
    const std::uint64_t result = s0 + s1;
    s1 ^= s0;
    state_[0] = ((s0 << 55) | (s0 >> 9)) ^ s1 ^ (s1 << 14);
    state_[1] = (s1 << 36) | (s1 >> 28);
    return result;
}

double GaussianStream::uniform() {
    return double(next_u64() >> 11) * 0x1.0p-53;
}

double GaussianStream::next() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    spare_ = mag * std::sin(ang);
    have_spare_ = true;
    return mag * std::cos(ang);
}

Eigen::VectorXd GaussianStream::vector(int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v(i) = next();
    return v;
}

void SynthConfig::validate() const {
    if (corpus_size < 1 || samples_per_traj < 2)
        throw std::invalid_argument("SynthConfig: counts must be positive (m >= 2)");
    if (!(horizon > 0.0)) throw std::invalid_argument("SynthConfig: horizon must be > 0");
    const int p = (degree + 1) * 2;
    if (sigma_omega.rows() != p || sigma_omega.cols() != p)
        throw std::invalid_argument("SynthConfig: sigma_omega must be (n+1)d square");
    for (double rate : {rate_time, rate_static, rate_oov, rate_jump})
        if (rate < 0.0 || rate > 1.0)
            throw std::invalid_argument("SynthConfig: outlier rates must be in [0, 1]");
    if (noise) {
        if (std::holds_alternative<EgoNoiseParams>(*noise))
            std::get<EgoNoiseParams>(*noise).validate();
        else
            std::get<AgentNoiseParams>(*noise).validate();
    }
}

Eigen::MatrixXd preset_prior(int degree, double horizon, double scale, double decay) {
    const int nb = degree + 1;
    const int p = 2 * nb;
    const double t_factor = horizon / 5.0;

    Eigen::VectorXd mags(nb);
    mags(0) = 2.0;
    for (int k = 1; k < nb; ++k) mags(k) = 25.0 * std::pow(decay, k - 1);

    Eigen::VectorXd d(p);
    for (int k = 0; k < nb; ++k) {
        d(2 * k) = scale * t_factor * mags(k);
        d(2 * k + 1) = 0.4 * scale * t_factor * mags(k);
    }

    constexpr double rho = 0.3;
    Eigen::MatrixXd sigma(p, p);
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j)
            sigma(i, j) = d(i) * d(j) * std::pow(rho, std::abs(i - j));
    return sigma;
}

NoiseParams preset_noise(const std::string& name) {
    if (name == "a1_ego") return EgoNoiseParams{0.024, 2e-4};
    if (name == "a2_ego") return EgoNoiseParams{0.012, 3e-6};
    if (name == "wo_ego") return EgoNoiseParams{0.008, -1e-7};
    if (name == "desk_ego") return EgoNoiseParams{0.02, 0.0};
    if (name == "a1_agent") return AgentNoiseParams{1e-3, 1.91e-3, 1.44e-3, 5.9e-7, 0.161};
    if (name == "a2_agent") return AgentNoiseParams{6e-4, 2.5e-3, 2.0e-5, 2.7e-6, 0.044};
    if (name == "wo_agent") return AgentNoiseParams{3e-4, 9.27e-5, 2.19e-5, 4.98e-7, 0.017};
    throw std::invalid_argument("preset_noise: unknown preset '" + name + "'");
}

std::pair<std::vector<TrackedTrajectory>, GroundTruth> generate(const SynthConfig& cfg) {
    cfg.validate();
    const int nb = cfg.degree + 1;
    const int p = 2 * nb;
    const BasisSpec spec(BasisFamily::monomial, cfg.degree, 2, cfg.horizon);

    Eigen::LLT<Eigen::MatrixXd> prior_llt(cfg.sigma_omega);
    if (prior_llt.info() != Eigen::Success)
        throw std::invalid_argument("generate: sigma_omega is not positive definite");
    const Eigen::MatrixXd prior_chol = prior_llt.matrixL();

    std::vector<TrackedTrajectory> corpus(cfg.corpus_size);
    GroundTruth gt;
    gt.degree = cfg.degree;
    gt.horizon = cfg.horizon;
    gt.sigma_omega = cfg.sigma_omega;
    gt.noise = cfg.noise;
    gt.trajectories.resize(cfg.corpus_size);

    const int m = cfg.samples_per_traj;
    const double dt = cfg.horizon / double(m - 1);

    // The time grid is shared by every trajectory.
    Eigen::MatrixXd phi_grid(nb, m), dphi_grid(nb, m);
    for (int j = 0; j < m; ++j) {
        const double tau = double(j) / double(m - 1);
        phi_grid.col(j) = eval_basis(spec, tau, 0).values;
        dphi_grid.col(j) = eval_basis(spec, tau, 1).values;
    }

    for (int i = 0; i < cfg.corpus_size; ++i) {
        GaussianStream rng(cfg.rng_seed, static_cast<std::uint64_t>(i));

        // Anchor placement relative to the ego start.
        const double r0 = 5.0 + 55.0 * rng.uniform();
        const double angle0 = 2.0 * std::numbers::pi * (rng.uniform() - 0.5);
        const double psi = 2.0 * std::numbers::pi * (rng.uniform() - 0.5);
        Eigen::Vector2d anchor =
            cfg.object_class == ObjectClass::agent
                ? Eigen::Vector2d(r0 * std::cos(angle0), r0 * std::sin(angle0))
                : Eigen::Vector2d::Zero();
        const Eigen::Matrix2d anchor_rot = rotation2d(psi);

        const Eigen::VectorXd omega = prior_chol * rng.vector(p);

        TrackedTrajectory traj;
        traj.scenario_id = "s" + std::to_string(i);
        traj.object_id = cfg.object_class == ObjectClass::agent ? "a0" : "ego";
        traj.object_class = cfg.object_class;
        traj.horizon = cfg.horizon;
        traj.samples.resize(m);

        for (int j = 0; j < m; ++j) {
            const double t = j * dt;
            Eigen::Vector2d local = Eigen::Vector2d::Zero();
            Eigen::Vector2d local_vel = Eigen::Vector2d::Zero();
            for (int k = 0; k < nb; ++k) {
                local += phi_grid(k, j) * omega.segment<2>(2 * k);
                local_vel += dphi_grid(k, j) * omega.segment<2>(2 * k);
            }
            const Eigen::Vector2d world_true = anchor + anchor_rot * local;
            const Eigen::Vector2d world_vel = anchor_rot * local_vel / cfg.horizon;

            Eigen::Vector2d ego_p;
            double ego_h;
            if (cfg.object_class == ObjectClass::agent) {
                ego_pose(cfg.ego_script, cfg.ego_speed, cfg.horizon, t, ego_p, ego_h);
            } else {
                ego_p = world_true;
                ego_h = std::atan2(world_vel(1), world_vel(0));
            }

            Eigen::Vector2d observed = world_true;
            if (cfg.noise) {
                const Eigen::Vector2d rel = world_true - ego_p;
                SampleGeometry geom{rel.norm(),
                                    rel.norm() > 1e-12 ? std::atan2(rel(1), rel(0)) : 0.0};
                const Eigen::Matrix2d cov = sample_cov(*cfg.noise, geom, 0.0);
                const Eigen::LLT<Eigen::Matrix2d> llt(cov);
                observed += llt.matrixL() * Eigen::Vector2d(rng.next(), rng.next());
            }
            // An ego object reports its own (measured) position as the pose.
            if (cfg.object_class == ObjectClass::ego) ego_p = observed;

            auto& s = traj.samples[j];
            s.t = t;
            s.x = observed(0);
            s.y = observed(1);
            s.ego_x = ego_p(0);
            s.ego_y = ego_p(1);
            s.ego_heading = ego_h;
            s.heading = world_vel.norm() > 1e-9 ? std::atan2(world_vel(1), world_vel(0))
                                                : std::numeric_limits<double>::quiet_NaN();
        }

        auto& record = gt.trajectories[i];
        record.scenario_id = traj.scenario_id;
        record.object_id = traj.object_id;
        record.omega = omega;
        record.world_to_anchor.angle = -psi;
        record.world_to_anchor.translation = -(rotation2d(-psi) * anchor);

        // Outlier injection, drawn independently per category.
        if (rng.uniform() < cfg.rate_time) {
            const double stretch = 1.5 + 3.5 * rng.uniform();
            for (auto& s : traj.samples) s.t *= stretch;
            record.injected.push_back("time");
        }
        if (rng.uniform() < cfg.rate_static) {
            const Eigen::Vector2d frozen = traj.samples.front().position();
            for (auto& s : traj.samples) {
                s.x = frozen(0);
                s.y = frozen(1);
            }
            record.injected.push_back("static");
        }
        if (rng.uniform() < cfg.rate_oov) {
            const int start = 1 + int(rng.uniform() * (m / 2));
            const int len = std::max(1, m / 5);
            for (int j = start; j < std::min(m, start + len); ++j) {
                traj.samples[j].x = 0.0;
                traj.samples[j].y = 0.0;
            }
            record.injected.push_back("out_of_view");
        }
        if (rng.uniform() < cfg.rate_jump) {
            const int j = 2 + int(rng.uniform() * (m - 4));
            const double ang = 2.0 * std::numbers::pi * rng.uniform();
            traj.samples[j].x += 5.0 * std::cos(ang);
            traj.samples[j].y += 5.0 * std::sin(ang);
            record.injected.push_back("rts");
        }

        corpus[i] = std::move(traj);
    }
    return {std::move(corpus), std::move(gt)};
}

void export_corpus(const std::vector<TrackedTrajectory>& corpus, const std::string& path) {
    export_csv(corpus, path);
}

std::vector<FitTrajectory> anchor_fit_corpus(const std::vector<TrackedTrajectory>& corpus,
                                             const GroundTruth& gt) {
    if (corpus.size() != gt.trajectories.size())
        throw std::invalid_argument("anchor_fit_corpus: corpus/ground-truth mismatch");
    std::vector<FitTrajectory> fits;
    fits.reserve(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        const auto local = apply_transform(corpus[i], gt.trajectories[i].world_to_anchor);
        fits.push_back(prepare_for_fit(local));
    }
    return fits;
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
    SynthConfig cfg;
    cfg.corpus_size = j.at("N").get<int>();
    cfg.samples_per_traj = j.at("m").get<int>();
    cfg.horizon = j.at("T").get<double>();
    cfg.degree = j.at("degree").get<int>();
    cfg.object_class = object_class_from_string(j.value("class", "agent"));
    cfg.rng_seed = j.value("seed", std::uint64_t{1});
    cfg.ego_script = j.value("ego_script", "straight");
    cfg.ego_speed = j.value("ego_speed", 10.0);

    if (j.contains("prior") && j["prior"].is_object() && j["prior"].contains("matrix")) {
        const auto flat = j["prior"]["matrix"].get<std::vector<double>>();
        const int p = (cfg.degree + 1) * 2;
        if (static_cast<int>(flat.size()) != p * p)
            throw std::invalid_argument("synth config: prior matrix has wrong size");
        cfg.sigma_omega.resize(p, p);
        for (int r = 0; r < p; ++r)
            for (int c = 0; c < p; ++c) cfg.sigma_omega(r, c) = flat[r * p + c];
    } else {
        const double scale =
            j.contains("prior") && j["prior"].is_object() ? j["prior"].value("scale", 1.0) : 1.0;
        cfg.sigma_omega = preset_prior(cfg.degree, cfg.horizon, scale);
    }

    if (j.contains("noise")) {
        const auto& jn = j["noise"];
        if (jn.is_string()) {
            const std::string name = jn.get<std::string>();
            if (name != "none") cfg.noise = preset_noise(name);
        } else {
            cfg.noise = noise_from_json(jn);
        }
    }

    if (j.contains("outliers")) {
        const auto& jo = j["outliers"];
        cfg.rate_time = jo.value("time", 0.0);
        cfg.rate_static = jo.value("static", 0.0);
        cfg.rate_oov = jo.value("out_of_view", 0.0);
        cfg.rate_jump = jo.value("rts", 0.0);
    }
    cfg.validate();
    return cfg;
}

nlohmann::json ground_truth_to_json(const GroundTruth& gt) {
    nlohmann::json j;
    j["degree"] = gt.degree;
    j["horizon"] = gt.horizon;
    {
        std::vector<double> flat;
        flat.reserve(gt.sigma_omega.size());
        for (Eigen::Index r = 0; r < gt.sigma_omega.rows(); ++r)
            for (Eigen::Index c = 0; c < gt.sigma_omega.cols(); ++c)
                flat.push_back(gt.sigma_omega(r, c));
        j["sigma_omega"] = flat;
    }
    if (gt.noise) j["noise"] = noise_to_json(*gt.noise);

    nlohmann::json rows = nlohmann::json::array();
    for (const auto& t : gt.trajectories) {
        nlohmann::json r;
        r["scenario_id"] = t.scenario_id;
        r["object_id"] = t.object_id;
        r["omega"] = std::vector<double>(t.omega.data(), t.omega.data() + t.omega.size());
        r["anchor_angle"] = t.world_to_anchor.angle;
        r["anchor_translation"] = {t.world_to_anchor.translation(0),
                                   t.world_to_anchor.translation(1)};
        r["injected"] = t.injected;
        rows.push_back(std::move(r));
    }
    j["trajectories"] = std::move(rows);
    return j;
}

}  // namespace trajrep
