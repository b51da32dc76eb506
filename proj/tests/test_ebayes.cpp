#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "trajrep/ebayes.hpp"
#include "trajrep/synth.hpp"

#include <Eigen/Dense>

#include <numbers>
#include <random>

using namespace trajrep;

namespace {

Eigen::MatrixXd random_spd(int p, std::mt19937_64& rng, double lo = 0.5, double hi = 2.0) {
    std::normal_distribution<double> gauss;
    Eigen::MatrixXd a(p, p);
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j) a(i, j) = gauss(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    std::uniform_real_distribution<double> uni(lo, hi);
    Eigen::VectorXd eigs(p);
    for (int i = 0; i < p; ++i) eigs(i) = uni(rng);
    return q * eigs.asDiagonal() * q.transpose();
}

FitTrajectory random_traj(std::mt19937_64& rng, int m, ObjectClass cls,
                          double horizon = 5.0) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss;
    FitTrajectory traj;
    traj.id = "t";
    traj.object_class = cls;
    traj.horizon = horizon;
    traj.t_span = horizon;
    traj.taus.resize(m);
    for (int j = 0; j < m; ++j) traj.taus(j) = m == 1 ? 0.5 : j / double(m - 1);
    traj.obs.resize(2, m);
    for (int j = 0; j < m; ++j) traj.obs.col(j) = Eigen::Vector2d(gauss(rng), gauss(rng));
    traj.range.resize(m);
    traj.rotation.resize(m);
    traj.headings = Eigen::VectorXd::Zero(m);
    const double frame = 2.0 * std::numbers::pi * (uni(rng) - 0.5);
    for (int j = 0; j < m; ++j) {
        traj.range(j) = 1.0 + 79.0 * uni(rng);
        traj.rotation(j) = cls == ObjectClass::agent
                               ? 2.0 * std::numbers::pi * (uni(rng) - 0.5)
                               : frame;
    }
    return traj;
}

HyperParams random_hyper(std::mt19937_64& rng, ObjectClass cls, int degree) {
    std::uniform_real_distribution<double> uni(0.5, 1.5);
    HyperParams hyper;
    hyper.degree = degree;
    if (cls == ObjectClass::ego) {
        EgoNoiseParams e;
        e.sigma_diag = 0.1 * uni(rng);
        e.sigma_cov = 0.2 * e.sigma_diag * e.sigma_diag * (uni(rng) - 1.0);
        hyper.noise = e;
    } else {
        AgentNoiseParams a;
        a.sigma_alpha = 1e-3 * uni(rng);
        a.beta0 = 0.01 * uni(rng);
        a.beta1 = 1e-3 * uni(rng);
        a.beta2 = 1e-5 * uni(rng);
        a.sigma_c = 0.05 * uni(rng);
        hyper.noise = a;
    }
    hyper.prior.sigma_omega = random_spd((degree + 1) * 2, rng);
    return hyper;
}

}  // namespace

TEST_CASE("single-sample decoupled marginal matches the scalar formula") {
    FitTrajectory traj;
    traj.object_class = ObjectClass::ego;
    traj.horizon = 5.0;
    traj.taus = Eigen::VectorXd::Constant(1, 0.5);
    traj.obs.resize(2, 1);
    traj.obs << 0.7, -1.1;
    traj.range = Eigen::VectorXd::Ones(1);
    traj.rotation = Eigen::VectorXd::Zero(1);
    traj.headings = Eigen::VectorXd::Zero(1);

    HyperParams hyper;
    hyper.degree = 0;
    hyper.noise = EgoNoiseParams{0.3, 0.0};
    hyper.prior.sigma_omega = 2.0 * Eigen::Matrix2d::Identity();

    const double var = 0.3 * 0.3 + 2.0;  // sigma_o^2 + phi^2 sigma_w^2, phi = 1
    double expected = 0.0;
    for (double c : {0.7, -1.1})
        expected += -0.5 * (std::log(2.0 * std::numbers::pi * var) + c * c / var);
    CHECK(log_marginal(traj, hyper) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(log_marginal(traj, hyper, MarginalRoute::dense) ==
          doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("zero-signal prior reduces to the plain noise likelihood") {
    std::mt19937_64 rng(4);
    const auto traj = random_traj(rng, 15, ObjectClass::agent);
    HyperParams hyper = random_hyper(rng, ObjectClass::agent, 3);
    hyper.prior.sigma_omega = 1e-12 * Eigen::MatrixXd::Identity(8, 8);

    double expected = 0.0;
    for (int j = 0; j < 15; ++j) {
        const SampleGeometry geom{traj.range(j), traj.rotation(j)};
        const Eigen::Matrix2d cov = sample_cov(hyper.noise, geom, traj.rotation(j));
        const Eigen::Vector2d y = traj.obs.col(j);
        expected += -0.5 * (2.0 * std::log(2.0 * std::numbers::pi) +
                            std::log(cov.determinant()) + y.dot(cov.inverse() * y));
    }
    CHECK(log_marginal(traj, hyper) == doctest::Approx(expected).epsilon(1e-7));
}

TEST_CASE("dense and low-rank marginal routes agree") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 60; ++trial) {
        const ObjectClass cls = trial % 2 ? ObjectClass::ego : ObjectClass::agent;
        const int degree = int(rng() % 7);
        const int m = 2 + int(rng() % 59);
        const auto traj = random_traj(rng, m, cls);
        const auto hyper = random_hyper(rng, cls, degree);
        const double dense = log_marginal(traj, hyper, MarginalRoute::dense);
        const double lowrank = log_marginal(traj, hyper, MarginalRoute::lowrank);
        CHECK(std::abs(dense - lowrank) / std::abs(dense) < 1e-9);
    }
}

TEST_CASE("analytic gradient matches central finite differences") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> uni(-0.3, 0.3);
    const double h = 1e-5;

    for (int point = 0; point < 10; ++point) {
        const ObjectClass cls = point < 6 ? ObjectClass::agent : ObjectClass::ego;
        const int degree = 1 + point % 3;
        const BasisSpec spec(BasisFamily::monomial, degree, 2, 5.0);
        std::vector<FitTrajectory> corpus;
        for (int i = 0; i < 4; ++i) corpus.push_back(random_traj(rng, 10 + i, cls));

        Eigen::VectorXd u = pack_hyperparams(random_hyper(rng, cls, degree));
        for (int i = 0; i < u.size(); ++i) u(i) += uni(rng);
        if (cls == ObjectClass::ego) {
            // keep sigma_cov inside the PD region of sigma_diag^2
            const double sd = std::exp(u(0));
            u(1) = 0.3 * sd * sd * uni(rng);
        }

        const auto eval = corpus_objective(corpus, u, cls, spec, 1, true);
        REQUIRE(eval.finite);
        for (int i = 0; i < u.size(); ++i) {
            Eigen::VectorXd up = u, dn = u;
            up(i) += h;
            dn(i) -= h;
            const double fp = corpus_objective(corpus, up, cls, spec, 1, false).value;
            const double fm = corpus_objective(corpus, dn, cls, spec, 1, false).value;
            const double fd = (fp - fm) / (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(eval.gradient(i)), 1e-6});
            CHECK(std::abs(fd - eval.gradient(i)) / denom < 1e-4);
        }
    }
}

TEST_CASE("pack/unpack round trip") {
    std::mt19937_64 rng(29);
    for (ObjectClass cls : {ObjectClass::ego, ObjectClass::agent}) {
        const auto hyper = random_hyper(rng, cls, 3);
        const auto u = pack_hyperparams(hyper);
        REQUIRE(u.size() == packed_size(cls, 3));
        const auto back = unpack_hyperparams(u, cls, 3);
        CHECK((back.prior.sigma_omega - hyper.prior.sigma_omega).cwiseAbs().maxCoeff() <
              1e-12);
        if (cls == ObjectClass::ego) {
            CHECK(std::get<EgoNoiseParams>(back.noise).sigma_diag ==
                  doctest::Approx(std::get<EgoNoiseParams>(hyper.noise).sigma_diag));
            CHECK(std::get<EgoNoiseParams>(back.noise).sigma_cov ==
                  doctest::Approx(std::get<EgoNoiseParams>(hyper.noise).sigma_cov));
        } else {
            CHECK(std::get<AgentNoiseParams>(back.noise).beta2 ==
                  doctest::Approx(std::get<AgentNoiseParams>(hyper.noise).beta2));
        }
    }
}

TEST_CASE("dof formula over the full degree range") {
    const NoiseParams ego = EgoNoiseParams{};
    const NoiseParams agent = AgentNoiseParams{};
    for (int n = 0; n <= 9; ++n) {
        const int p = 2 * (n + 1);
        CHECK(model_dof(ego, n) == 2 + p * (p + 1) / 2);
        CHECK(model_dof(agent, n) == 5 + p * (p + 1) / 2);
    }
    CHECK(model_dof(ego, 5) == 80);
    CHECK(model_dof(agent, 6) == 110);
}

TEST_CASE("model score arithmetic") {
    std::mt19937_64 rng(31);
    std::vector<FitTrajectory> corpus;
    for (int i = 0; i < 6; ++i) corpus.push_back(random_traj(rng, 20, ObjectClass::agent));
    const auto hyper = random_hyper(rng, ObjectClass::agent, 2);
    const auto s = score(corpus, hyper, 1);
    CHECK(s.dof == model_dof(hyper.noise, 2));
    CHECK(s.nominal_m == 20);
    CHECK(s.aic == doctest::Approx(s.log_type2 / 6.0 - s.dof));
    CHECK(s.bic == doctest::Approx(s.log_type2 / 6.0 - 0.5 * s.dof * std::log(20.0)));
    // log(m) > 2 makes the BIC penalty the heavier one.
    CHECK(s.aic >= s.bic);
}

TEST_CASE("log marginal is invariant under rigid scene transforms") {
    std::mt19937_64 rng(37);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        const ObjectClass cls = trial % 2 ? ObjectClass::ego : ObjectClass::agent;
        const int degree = 2;
        const int p = (degree + 1) * 2;
        auto traj = random_traj(rng, 18, cls);
        auto hyper = random_hyper(rng, cls, degree);

        const double gamma = 3.0 * uni(rng);
        const Eigen::Vector2d shift(5.0 * uni(rng), 5.0 * uni(rng));
        const Eigen::Matrix2d rot = rotation2d(gamma);

        FitTrajectory moved = traj;
        for (int j = 0; j < traj.sample_count(); ++j) {
            moved.obs.col(j) = rot * traj.obs.col(j) + shift;
            moved.rotation(j) = traj.rotation(j) + gamma;
        }
        Eigen::MatrixXd big_rot = Eigen::MatrixXd::Zero(p, p);
        for (int k = 0; k <= degree; ++k) big_rot.block<2, 2>(2 * k, 2 * k) = rot;
        HyperParams hyper2 = hyper;
        hyper2.prior.sigma_omega = big_rot * hyper.prior.sigma_omega * big_rot.transpose();
        Eigen::VectorXd mean2 = Eigen::VectorXd::Zero(p);
        mean2.head<2>() = shift;

        const double base = log_marginal(traj, hyper);
        const double transformed =
            log_marginal(moved, hyper2, MarginalRoute::lowrank, BasisFamily::monomial,
                         &mean2);
        CHECK(std::abs(base - transformed) < 1e-8 * std::max(1.0, std::abs(base)));
    }
}

TEST_CASE("optimizer reaches the closed-form evidence optimum") {
    // One-way random effects layout: degree 0, isotropic everything. The
    // corpus is four-fold symmetrized so the exact MLE is the scalar
    // closed form: sigma^2 = SSW / (N d (m-1)), v = SSB / (N d m) - sigma^2 / m.
    const int base_n = 250, m = 10;
    const double true_v = 2.0, true_sigma = 0.5;
    std::mt19937_64 rng(41);
    std::normal_distribution<double> gauss;

    std::vector<FitTrajectory> corpus;
    double ssw = 0.0, ssb = 0.0;
    for (int i = 0; i < base_n; ++i) {
        Eigen::Matrix2Xd y(2, m);
        const Eigen::Vector2d omega(std::sqrt(true_v) * gauss(rng),
                                    std::sqrt(true_v) * gauss(rng));
        for (int j = 0; j < m; ++j)
            y.col(j) = omega + Eigen::Vector2d(true_sigma * gauss(rng),
                                               true_sigma * gauss(rng));
        const Eigen::Vector2d mean = y.rowwise().mean();
        for (int j = 0; j < m; ++j) ssw += 4.0 * (y.col(j) - mean).squaredNorm();
        ssb += 4.0 * mean.squaredNorm();

        // Four symmetric variants: (x,y), (x,-y), (y,x), (y,-x).
        for (int variant = 0; variant < 4; ++variant) {
            FitTrajectory traj;
            traj.object_class = ObjectClass::ego;
            traj.horizon = 5.0;
            traj.t_span = 5.0;
            traj.taus.setLinSpaced(m, 0.0, 1.0);
            traj.obs.resize(2, m);
            for (int j = 0; j < m; ++j) {
                const double a = y(0, j), b = y(1, j);
                switch (variant) {
                    case 0: traj.obs.col(j) = Eigen::Vector2d(a, b); break;
                    case 1: traj.obs.col(j) = Eigen::Vector2d(a, -b); break;
                    case 2: traj.obs.col(j) = Eigen::Vector2d(b, a); break;
                    default: traj.obs.col(j) = Eigen::Vector2d(b, -a); break;
                }
            }
            traj.range = Eigen::VectorXd::Ones(m);
            traj.rotation = Eigen::VectorXd::Zero(m);
            traj.headings = Eigen::VectorXd::Zero(m);
            corpus.push_back(std::move(traj));
        }
    }

    const double n_total = 4.0 * base_n;
    const double sigma2_hat = ssw / (n_total * 2.0 * (m - 1));
    const double v_hat = ssb / (n_total * 2.0) - sigma2_hat / m;
    REQUIRE(v_hat > 0.0);

    OptimizerConfig cfg;
    cfg.max_iterations = 3000;
    cfg.gradient_tolerance = 1e-9;
    cfg.threads = 2;
    const BasisSpec spec(BasisFamily::monomial, 0, 2, 5.0);
    const auto fit = fit_hyperparams(corpus, spec, ObjectClass::ego, cfg);

    const auto& noise = std::get<EgoNoiseParams>(fit.hyper.noise);
    CHECK(noise.sigma_diag * noise.sigma_diag ==
          doctest::Approx(sigma2_hat).epsilon(1e-4));
    CHECK(std::abs(noise.sigma_cov) < 1e-4 * sigma2_hat);
    CHECK(fit.hyper.prior.sigma_omega(0, 0) == doctest::Approx(v_hat).epsilon(1e-4));
    CHECK(fit.hyper.prior.sigma_omega(1, 1) == doctest::Approx(v_hat).epsilon(1e-4));
    CHECK(std::abs(fit.hyper.prior.sigma_omega(0, 1)) < 1e-4 * v_hat);
}

TEST_CASE("fit is invariant to corpus ordering, bit exact") {
    SynthConfig cfg;
    cfg.corpus_size = 40;
    cfg.samples_per_traj = 15;
    cfg.degree = 1;
    cfg.object_class = ObjectClass::ego;
    cfg.sigma_omega = preset_prior(1, 5.0);
    cfg.noise = preset_noise("desk_ego");
    cfg.rng_seed = 5;
    auto [corpus, gt] = generate(cfg);
    auto fits = anchor_fit_corpus(corpus, gt);

    OptimizerConfig ocfg;
    ocfg.max_iterations = 60;
    ocfg.threads = 2;
    const BasisSpec spec(BasisFamily::monomial, 1, 2, 5.0);
    const auto a = fit_hyperparams(fits, spec, ObjectClass::ego, ocfg);

    std::reverse(fits.begin(), fits.end());
    const auto b = fit_hyperparams(fits, spec, ObjectClass::ego, ocfg);

    CHECK(a.log_type2 == b.log_type2);
    CHECK((pack_hyperparams(a.hyper) - pack_hyperparams(b.hyper)).cwiseAbs().maxCoeff() ==
          0.0);

    SUBCASE("and to the thread count") {
        OptimizerConfig single = ocfg;
        single.threads = 1;
        const auto c = fit_hyperparams(fits, spec, ObjectClass::ego, single);
        CHECK(c.log_type2 == b.log_type2);
        CHECK((pack_hyperparams(c.hyper) - pack_hyperparams(b.hyper))
                  .cwiseAbs()
                  .maxCoeff() == 0.0);
    }
}

TEST_CASE("optimized likelihood is non-decreasing in the degree") {
    SynthConfig cfg;
    cfg.corpus_size = 80;
    cfg.samples_per_traj = 20;
    cfg.degree = 2;
    cfg.object_class = ObjectClass::ego;
    cfg.sigma_omega = preset_prior(2, 5.0);
    cfg.noise = preset_noise("desk_ego");
    cfg.rng_seed = 11;
    auto [corpus, gt] = generate(cfg);
    const auto fits = anchor_fit_corpus(corpus, gt);

    OptimizerConfig ocfg;
    ocfg.max_iterations = 400;
    ocfg.threads = 2;
    double prev = -std::numeric_limits<double>::infinity();
    for (int n = 1; n <= 4; ++n) {
        const BasisSpec spec(BasisFamily::monomial, n, 2, 5.0);
        const auto fit = fit_hyperparams(fits, spec, ObjectClass::ego, ocfg);
        // allow optimizer tolerance slack on the nested-model inequality
        CHECK(fit.log_type2 >= prev - std::max(1.0, 1e-6 * std::abs(prev)));
        prev = fit.log_type2;
    }
}

TEST_CASE("degree scan recovers a synthetic degree-2 corpus") {
    SynthConfig cfg;
    cfg.corpus_size = 120;
    cfg.samples_per_traj = 20;
    cfg.degree = 2;
    cfg.object_class = ObjectClass::ego;
    cfg.sigma_omega = preset_prior(2, 5.0);
    cfg.noise = preset_noise("desk_ego");
    cfg.rng_seed = 13;
    auto [corpus, gt] = generate(cfg);
    const auto fits = anchor_fit_corpus(corpus, gt);

    OptimizerConfig ocfg;
    ocfg.max_iterations = 400;
    ocfg.threads = 2;
    const auto scan = scan_degrees(fits, ObjectClass::ego, 1, 4, 5.0, ocfg);
    CHECK(scan.best_aic == 2);
    CHECK(scan.best_bic == 2);
    REQUIRE(scan.scores.size() == 4);
    for (const auto& s : scan.scores) CHECK(s.dof == model_dof(EgoNoiseParams{}, s.degree));
}

TEST_CASE("bad inputs raise diagnostic errors") {
    std::mt19937_64 rng(47);
    std::vector<FitTrajectory> corpus;
    for (int i = 0; i < 3; ++i) corpus.push_back(random_traj(rng, 10, ObjectClass::agent));
    const BasisSpec spec(BasisFamily::monomial, 2, 2, 5.0);
    OptimizerConfig cfg;
    cfg.max_iterations = 10;

    SUBCASE("non-finite observations dump the iterate") {
        corpus[1].obs(0, 3) = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(fit_hyperparams(corpus, spec, ObjectClass::agent, cfg),
                        std::runtime_error);
    }
    SUBCASE("mixed classes are rejected") {
        corpus[2].object_class = ObjectClass::ego;
        CHECK_THROWS_AS(fit_hyperparams(corpus, spec, ObjectClass::agent, cfg),
                        std::invalid_argument);
    }
    SUBCASE("non-positive tolerances are rejected") {
        cfg.gradient_tolerance = 0.0;
        CHECK_THROWS_AS(fit_hyperparams(corpus, spec, ObjectClass::agent, cfg),
                        std::invalid_argument);
    }
}

TEST_CASE("hyperparameter JSON round trip") {
    std::mt19937_64 rng(43);
    const auto hyper = random_hyper(rng, ObjectClass::agent, 4);
    const auto j = hyperparams_to_json(hyper, ObjectClass::agent, 5.0);
    CHECK(j["class"] == "agent");
    CHECK(j["degree"] == 4);
    REQUIRE(j["sigma_omega"].size() == 100);
    const auto back = hyperparams_from_json(j);
    CHECK((back.prior.sigma_omega - hyper.prior.sigma_omega).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::get<AgentNoiseParams>(back.noise).sigma_alpha ==
          std::get<AgentNoiseParams>(hyper.noise).sigma_alpha);
}
