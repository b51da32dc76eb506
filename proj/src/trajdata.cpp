#include "trajrep/trajdata.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

namespace trajrep {
namespace {

// Sensor-range resets place samples at exactly (0, 0) in the raw world
// frame. Once a trajectory is normalized, the origin is ordinary data, so
// the mask applies only to un-normalized trajectories.
bool sample_visible(const RawSample& s, bool mask_origin) {
    if (!std::isfinite(s.x) || !std::isfinite(s.y)) return false;
    return !mask_origin || !(s.x == 0.0 && s.y == 0.0);
}

bool mask_origin_for(const TrackedTrajectory& traj) {
    return !traj.local_transform.has_value();
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_double(const std::string& s, const std::string& context) {
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(context + ": cannot parse number '" + s + "'");
    }
}

std::string format_double(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

constexpr const char* kCsvHeader =
    "scenario_id,object_id,class,t,x,y,ego_x,ego_y,ego_heading,heading";

}  // namespace

std::string to_string(ObjectClass c) {
    return c == ObjectClass::ego ? "ego" : "agent";
}

ObjectClass object_class_from_string(const std::string& s) {
    if (s == "ego") return ObjectClass::ego;
    if (s == "agent") return ObjectClass::agent;
    throw std::runtime_error("unknown object class '" + s + "'");
}

std::vector<TrackedTrajectory> ingest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error(path + ": empty file");
    {
        auto fields = split_csv_line(line);
        std::string joined;
        for (size_t i = 0; i < fields.size(); ++i)
            joined += (i ? "," : "") + fields[i];
        if (joined != kCsvHeader)
            throw std::runtime_error(path + ":1: unexpected header, want '" +
                                     std::string(kCsvHeader) + "'");
    }

    // Trajectories keep their first-appearance order so that an
    // export/ingest round trip reproduces the file.
    std::map<std::pair<std::string, std::string>, TrackedTrajectory> groups;
    std::vector<std::pair<std::string, std::string>> group_order;
    std::map<std::string, bool> scenario_has_ego;
    std::map<std::string, std::map<double, RawSample>> scenario_ego_samples;
    std::vector<std::string> scenario_order;

    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string context = path + ":" + std::to_string(line_no);
        auto f = split_csv_line(line);
        if (f.size() != 10)
            throw std::runtime_error(context + ": expected 10 fields, got " +
                                     std::to_string(f.size()));
        RawSample s;
        s.t = parse_double(f[3], context);
        s.x = parse_double(f[4], context);
        s.y = parse_double(f[5], context);
        s.ego_x = parse_double(f[6], context);
        s.ego_y = parse_double(f[7], context);
        s.ego_heading = parse_double(f[8], context);
        s.heading = f[9].empty() ? std::numeric_limits<double>::quiet_NaN()
                                 : parse_double(f[9], context);
        if (!std::isfinite(s.t))
            throw std::runtime_error(context + ": non-finite timestamp");

        const ObjectClass cls = object_class_from_string(f[2]);
        auto key = std::make_pair(f[0], f[1]);
        auto& traj = groups[key];
        if (traj.samples.empty()) {
            traj.scenario_id = f[0];
            traj.object_id = f[1];
            traj.object_class = cls;
            group_order.push_back(key);
        }
        traj.samples.push_back(s);

        if (!scenario_ego_samples.count(f[0])) scenario_order.push_back(f[0]);
        if (cls == ObjectClass::ego) scenario_has_ego[f[0]] = true;
        RawSample ego_sample;
        ego_sample.t = s.t;
        ego_sample.x = s.ego_x;
        ego_sample.y = s.ego_y;
        ego_sample.ego_x = s.ego_x;
        ego_sample.ego_y = s.ego_y;
        ego_sample.ego_heading = s.ego_heading;
        ego_sample.heading = s.ego_heading;
        scenario_ego_samples[f[0]][s.t] = ego_sample;
    }

    std::vector<TrackedTrajectory> out;
    for (const auto& key : group_order) {
        auto& traj = groups[key];
        bool sorted = std::is_sorted(
            traj.samples.begin(), traj.samples.end(),
            [](const RawSample& a, const RawSample& b) { return a.t < b.t; });
        if (!sorted) {
            std::stable_sort(
                traj.samples.begin(), traj.samples.end(),
                [](const RawSample& a, const RawSample& b) { return a.t < b.t; });
            traj.nonmonotone_time = true;
        }
        for (size_t i = 1; i < traj.samples.size(); ++i)
            if (!(traj.samples[i].t > traj.samples[i - 1].t)) traj.nonmonotone_time = true;
        if (traj.samples.size() < 2) continue;
        out.push_back(std::move(traj));
    }

    for (const auto& scenario : scenario_order) {
        const auto& ego_map = scenario_ego_samples[scenario];
        if (scenario_has_ego.count(scenario) || ego_map.size() < 2) continue;
        TrackedTrajectory ego;
        ego.scenario_id = scenario;
        ego.object_id = "ego";
        ego.object_class = ObjectClass::ego;
        ego.synthesized_ego = true;
        for (const auto& [t, s] : ego_map) ego.samples.push_back(s);
        out.push_back(std::move(ego));
    }
    return out;
}

void export_csv(const std::vector<TrackedTrajectory>& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << kCsvHeader << "\n";
    for (const auto& traj : corpus) {
        if (traj.synthesized_ego) continue;
        for (const auto& s : traj.samples) {
            out << traj.scenario_id << ',' << traj.object_id << ','
                << to_string(traj.object_class) << ',' << format_double(s.t) << ','
                << format_double(s.x) << ',' << format_double(s.y) << ','
                << format_double(s.ego_x) << ',' << format_double(s.ego_y) << ','
                << format_double(s.ego_heading) << ',' << format_double(s.heading)
                << '\n';
        }
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<TrackedTrajectory> window(const TrackedTrajectory& traj, double T,
                                      WindowMode mode, std::uint64_t rng_seed,
                                      double nominal_rate_hz) {
    std::vector<TrackedTrajectory> out;
    const int m = static_cast<int>(traj.samples.size());
    if (m < 2 || traj.duration() < T * (1.0 - 1e-9)) return out;

    const int count = static_cast<int>(std::lround(T * nominal_rate_hz)) + 1;
    const int stride = std::max(1, static_cast<int>(std::lround(nominal_rate_hz)));

    auto make_window = [&](int start, int len) {
        TrackedTrajectory w = traj;
        w.samples.assign(traj.samples.begin() + start, traj.samples.begin() + start + len);
        w.horizon = T;
        w.object_id = traj.object_id + "_w" + std::to_string(start);
        w.local_transform.reset();
        return w;
    };

    if (m < count) {
        // Fewer samples than one nominal window but the time span covers T:
        // keep the whole trajectory and let the duration gate judge it.
        out.push_back(make_window(0, m));
        return out;
    }

    if (mode == WindowMode::stride_1s) {
        for (int start = 0; start + count <= m; start += stride)
            out.push_back(make_window(start, count));
    } else {
        std::mt19937_64 rng(rng_seed ^ fnv1a(traj.scenario_id + "/" + traj.object_id));
        std::uniform_int_distribution<int> dist(0, m - count);
        out.push_back(make_window(dist(rng), count));
    }
    return out;
}

SmoothedStates rts_smooth(const TrackedTrajectory& traj, const SmootherConfig& cfg) {
    SmoothedStates out;
    for (int i = 0; i < static_cast<int>(traj.samples.size()); ++i)
        if (sample_visible(traj.samples[i], mask_origin_for(traj)))
            out.sample_indices.push_back(i);
    const int n = out.size();
    if (n < 2) {
        out.sample_indices.clear();
        return out;
    }

    const double q = cfg.process_noise * cfg.process_noise;
    const double r = cfg.measurement_noise * cfg.measurement_noise;

    using Vec4 = Eigen::Vector4d;
    using Mat4 = Eigen::Matrix4d;
    using Mat24 = Eigen::Matrix<double, 2, 4>;

    Mat24 h = Mat24::Zero();
    h(0, 0) = h(1, 1) = 1.0;
    const Eigen::Matrix2d meas_cov = r * Eigen::Matrix2d::Identity();

    std::vector<Vec4> filt_mean(n), pred_mean(n);
    std::vector<Mat4> filt_cov(n), pred_cov(n);
    std::vector<Mat4> trans(n);

    auto z = [&](int k) { return traj.samples[out.sample_indices[k]].position(); };
    auto tm = [&](int k) { return traj.samples[out.sample_indices[k]].t; };

    // Initialize from the first two samples.
    {
        const double dt0 = tm(1) - tm(0);
        Vec4 x0;
        const Eigen::Vector2d v0 =
            dt0 > 0.0 ? Eigen::Vector2d((z(1) - z(0)) / dt0) : Eigen::Vector2d::Zero();
        x0 << z(0)(0), z(0)(1), v0(0), v0(1);
        Mat4 p0 = Mat4::Zero();
        p0(0, 0) = p0(1, 1) = r;
        const double vv = dt0 > 0.0 ? 2.0 * r / (dt0 * dt0) + q * dt0 : 100.0;
        p0(2, 2) = p0(3, 3) = vv;
        filt_mean[0] = x0;
        filt_cov[0] = p0;
        pred_mean[0] = x0;
        pred_cov[0] = p0;
        trans[0] = Mat4::Identity();
        out.time_violation = out.time_violation || !(dt0 > 0.0);
    }

    for (int k = 1; k < n; ++k) {
        double dt = tm(k) - tm(k - 1);
        if (!(dt > 0.0)) {
            out.time_violation = true;
            dt = 1e-3;
        }
        Mat4 f = Mat4::Identity();
        f(0, 2) = f(1, 3) = dt;
        Mat4 qk = Mat4::Zero();
        const double dt2 = dt * dt, dt3 = dt2 * dt;
        qk(0, 0) = qk(1, 1) = q * dt3 / 3.0;
        qk(0, 2) = qk(2, 0) = qk(1, 3) = qk(3, 1) = q * dt2 / 2.0;
        qk(2, 2) = qk(3, 3) = q * dt;

        trans[k] = f;
        pred_mean[k] = f * filt_mean[k - 1];
        pred_cov[k] = f * filt_cov[k - 1] * f.transpose() + qk;

        const Eigen::Vector2d innov = z(k) - h * pred_mean[k];
        const Eigen::Matrix2d s = h * pred_cov[k] * h.transpose() + meas_cov;
        const Eigen::Matrix<double, 4, 2> gain = pred_cov[k] * h.transpose() * s.inverse();
        filt_mean[k] = pred_mean[k] + gain * innov;
        filt_cov[k] = (Mat4::Identity() - gain * h) * pred_cov[k];
    }

    std::vector<Vec4> smooth_mean(n);
    std::vector<Mat4> smooth_cov(n);
    smooth_mean[n - 1] = filt_mean[n - 1];
    smooth_cov[n - 1] = filt_cov[n - 1];
    for (int k = n - 2; k >= 0; --k) {
        const Mat4 gain =
            filt_cov[k] * trans[k + 1].transpose() * pred_cov[k + 1].inverse();
        smooth_mean[k] = filt_mean[k] + gain * (smooth_mean[k + 1] - pred_mean[k + 1]);
        smooth_cov[k] =
            filt_cov[k] + gain * (smooth_cov[k + 1] - pred_cov[k + 1]) * gain.transpose();
    }

    out.positions.resize(2, n);
    out.velocities.resize(2, n);
    out.covariances.resize(n);
    for (int k = 0; k < n; ++k) {
        out.positions.col(k) = smooth_mean[k].head<2>();
        out.velocities.col(k) = smooth_mean[k].tail<2>();
        out.covariances[k] = smooth_cov[k];
    }
    return out;
}

namespace {

double smoothed_path_length(const SmoothedStates& states) {
    double len = 0.0;
    for (int k = 1; k < states.size(); ++k)
        len += (states.positions.col(k) - states.positions.col(k - 1)).norm();
    return len;
}

double raw_path_length(const TrackedTrajectory& traj) {
    double len = 0.0;
    for (size_t k = 1; k < traj.samples.size(); ++k)
        len += (traj.samples[k].position() - traj.samples[k - 1].position()).norm();
    return len;
}

// Longitudinal acceleration from smoothed states: finite differences of the
// smoothed velocity projected onto the direction of motion.
bool accel_gate_tripped(const SmoothedStates& states,
                        const std::vector<double>& times, const SmootherConfig& cfg) {
    const int n = states.size();
    for (int k = 0; k < n; ++k) {
        const int lo = std::max(0, k - 1);
        const int hi = std::min(n - 1, k + 1);
        const double dt = times[hi] - times[lo];
        if (!(dt > 0.0)) continue;
        const Eigen::Vector2d a = (states.velocities.col(hi) - states.velocities.col(lo)) / dt;
        const Eigen::Vector2d v = states.velocities.col(k);
        const double speed = v.norm();
        if (speed < 1e-6) continue;
        const double a_lon = a.dot(v) / speed;
        if (a_lon > cfg.accel_max || a_lon < cfg.decel_min) return true;
    }
    return false;
}

}  // namespace

OutlierFlags classify_one(const TrackedTrajectory& traj, const SmootherConfig& cfg) {
    OutlierFlags flags;

    const double T = traj.horizon;
    const double dur = traj.duration();
    if (dur < T * (1.0 - cfg.duration_tol) || dur > T * (1.0 + cfg.duration_tol))
        flags.time = true;
    if (traj.nonmonotone_time) flags.time = true;

    for (const auto& s : traj.samples)
        if (!sample_visible(s, mask_origin_for(traj))) flags.out_of_view = true;

    const SmoothedStates states = rts_smooth(traj, cfg);
    if (states.time_violation) flags.time = true;

    if (states.empty()) {
        flags.static_path = raw_path_length(traj) <= cfg.static_length_gate;
        return flags;
    }

    flags.static_path = smoothed_path_length(states) <= cfg.static_length_gate;

    std::vector<double> times(states.size());
    for (int k = 0; k < states.size(); ++k) times[k] = traj.samples[states.sample_indices[k]].t;

    for (int k = 0; k < states.size(); ++k) {
        const Eigen::Vector2d meas = traj.samples[states.sample_indices[k]].position();
        if ((states.positions.col(k) - meas).norm() > cfg.position_gate) {
            flags.rts = true;
            break;
        }
    }
    if (!flags.rts) flags.rts = accel_gate_tripped(states, times, cfg);
    return flags;
}

std::pair<std::vector<TrackedTrajectory>, OutlierReport> classify_outliers(
    const std::vector<TrackedTrajectory>& trajs, const SmootherConfig& cfg) {
    std::vector<TrackedTrajectory> clean;
    OutlierReport report;
    report.n_input = static_cast<std::int64_t>(trajs.size());
    for (const auto& traj : trajs) {
        const OutlierFlags f = classify_one(traj, cfg);
        report.time += f.time;
        report.static_path += f.static_path;
        report.out_of_view += f.out_of_view;
        report.rts += f.rts;
        if (f.any())
            ++report.total;
        else
            clean.push_back(traj);
    }
    return {std::move(clean), report};
}

nlohmann::json outlier_report_to_json(const OutlierReport& r) {
    nlohmann::json j;
    j["n_input"] = r.n_input;
    auto entry = [&](std::int64_t count) {
        return nlohmann::json{{"count", count}, {"percent", r.percent(count)}};
    };
    j["time"] = entry(r.time);
    j["static"] = entry(r.static_path);
    j["out_of_view"] = entry(r.out_of_view);
    j["rts"] = entry(r.rts);
    j["total"] = entry(r.total);
    return j;
}

TrackedTrajectory apply_transform(const TrackedTrajectory& traj,
                                  const RigidTransform2& world_to_local) {
    TrackedTrajectory out = traj;
    const bool mask = mask_origin_for(traj);
    for (auto& s : out.samples) {
        if (sample_visible(s, mask)) {
            const Eigen::Vector2d p = world_to_local.apply(s.position());
            s.x = p(0);
            s.y = p(1);
        }
        const Eigen::Vector2d e = world_to_local.apply(s.ego_position());
        s.ego_x = e(0);
        s.ego_y = e(1);
        s.ego_heading = wrap_angle(s.ego_heading + world_to_local.angle);
        if (s.has_heading()) s.heading = wrap_angle(s.heading + world_to_local.angle);
    }
    out.local_transform = traj.local_transform
                              ? world_to_local.compose(*traj.local_transform)
                              : world_to_local;
    return out;
}

TrackedTrajectory to_local_frame(const TrackedTrajectory& traj,
                                 const SmoothedStates& smoothed) {
    if (smoothed.empty())
        throw std::invalid_argument("to_local_frame: smoothed states required");

    const Eigen::Vector2d p0 = smoothed.positions.col(0);
    const Eigen::Vector2d v0 = smoothed.velocities.col(0);

    double theta0 = 0.0;
    bool warn = false;
    if (v0.norm() >= 0.1) {
        theta0 = std::atan2(v0(1), v0(0));
    } else {
        const auto& first = traj.samples[smoothed.sample_indices[0]];
        if (first.has_heading()) {
            theta0 = first.heading;
        } else {
            warn = true;
        }
    }

    RigidTransform2 world_to_local;
    world_to_local.angle = -theta0;
    world_to_local.translation = -(rotation2d(-theta0) * p0);
    TrackedTrajectory out = apply_transform(traj, world_to_local);
    out.frame_warning = warn;
    return out;
}

SmoothedStates transform_states(const SmoothedStates& states,
                                const RigidTransform2& transform) {
    SmoothedStates out = states;
    const Eigen::Matrix2d rot = rotation2d(transform.angle);
    Eigen::Matrix4d big = Eigen::Matrix4d::Zero();
    big.topLeftCorner<2, 2>() = rot;
    big.bottomRightCorner<2, 2>() = rot;
    for (int k = 0; k < states.size(); ++k) {
        out.positions.col(k) = transform.apply(states.positions.col(k));
        out.velocities.col(k) = rot * states.velocities.col(k);
        out.covariances[k] = big * states.covariances[k] * big.transpose();
    }
    return out;
}

FitTrajectory prepare_for_fit(const TrackedTrajectory& traj, const SmoothedStates* smoothed) {
    const int m = static_cast<int>(traj.samples.size());
    if (m < 2) throw std::invalid_argument("prepare_for_fit: need at least 2 samples");

    FitTrajectory fit;
    fit.id = traj.scenario_id + "/" + traj.object_id;
    fit.object_class = traj.object_class;
    fit.horizon = traj.horizon;

    const double t0 = traj.samples.front().t;
    const double span = traj.samples.back().t - t0;
    if (!(span > 0.0)) throw std::invalid_argument("prepare_for_fit: zero time span");
    fit.t_span = span;

    const double frame_rot = traj.local_transform ? traj.local_transform->angle : 0.0;

    fit.taus.resize(m);
    fit.obs.resize(2, m);
    fit.range.resize(m);
    fit.rotation.resize(m);
    fit.headings.resize(m);

    // Map valid sample index -> column in the smoothed states, when provided.
    std::map<int, int> smoothed_col;
    if (smoothed)
        for (int k = 0; k < smoothed->size(); ++k)
            smoothed_col[smoothed->sample_indices[k]] = k;

    for (int j = 0; j < m; ++j) {
        const auto& s = traj.samples[j];
        fit.taus(j) = (s.t - t0) / span;
        fit.obs.col(j) = s.position();
        const Eigen::Vector2d rel = s.position() - s.ego_position();
        fit.range(j) = rel.norm();
        if (traj.object_class == ObjectClass::agent) {
            fit.rotation(j) = (fit.range(j) > 1e-9) ? std::atan2(rel(1), rel(0)) : 0.0;
        } else {
            fit.rotation(j) = frame_rot;
        }
        double heading = s.heading;
        if (!std::isfinite(heading) && smoothed) {
            auto it = smoothed_col.find(j);
            if (it != smoothed_col.end()) {
                const Eigen::Vector2d v = smoothed->velocities.col(it->second);
                if (v.norm() > 1e-9) heading = std::atan2(v(1), v(0));
            }
        }
        fit.headings(j) = heading;
    }
    return fit;
}

}  // namespace trajrep
