#pragma once

// Body-pose metric suite and report generation: Euler-angle error on local
// joint rotations, joint-angle error on root-relative global rotations,
// positional error on forward-kinematics joint positions, PCK/AUC, MPJPE,
// and the KPEVAL1 report (JSON + aligned text table).

#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <kp/bodymodel.hpp>
#include <kp/rotmath.hpp>

#include <json.hpp>

namespace kp {

namespace detail {

inline void check_pair(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw std::invalid_argument(std::string("metrics: ") + what + " size mismatch");
}

} // namespace detail

/// Mean over frames of the l2 norm of the concatenated per-joint Euler
/// angle differences (z,y,x order, each component wrapped to [-pi, pi]).
/// Radians; the report converts to degrees.
inline double euler_error(const std::vector<PoseState>& pred,
                          const std::vector<PoseState>& gt) {
    detail::check_pair(pred.size(), gt.size(), "frame");
    if (pred.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t f = 0; f < pred.size(); ++f) {
        detail::check_pair(pred[f].body_pose.size(), gt[f].body_pose.size(), "joint");
        double sq = 0.0;
        for (std::size_t j = 0; j < pred[f].body_pose.size(); ++j) {
            const Vec3 ep = euler_zyx(pred[f].body_pose[j]);
            const Vec3 eg = euler_zyx(gt[f].body_pose[j]);
            for (int c = 0; c < 3; ++c) {
                const double d = std::remainder(ep[c] - eg[c], 2.0 * M_PI);
                sq += d * d;
            }
        }
        total += std::sqrt(sq);
    }
    return total / double(pred.size());
}

/// Mean over frames and non-root joints of the rotation-log distance
/// between root-relative global joint rotations.
inline double joint_angle_error(const std::vector<PoseState>& pred,
                                const std::vector<PoseState>& gt,
                                const BodyTopology& topo) {
    detail::check_pair(pred.size(), gt.size(), "frame");
    if (pred.empty()) return 0.0;
    const int J = topo.joint_count;
    auto root_relative = [&](const std::vector<Rot3>& locals) {
        std::vector<Rot3> world(static_cast<std::size_t>(J));
        for (int j = 0; j < J; ++j) {
            const int p = topo.joint_parent[std::size_t(j)];
            world[std::size_t(j)] =
                p < 0 ? locals[std::size_t(j)] : world[std::size_t(p)] * locals[std::size_t(j)];
        }
        const Rot3 inv_root = world[0].transpose();
        for (auto& R : world) R = inv_root * R;
        return world;
    };
    double total = 0.0;
    for (std::size_t f = 0; f < pred.size(); ++f) {
        const auto wp = root_relative(pred[f].body_pose);
        const auto wg = root_relative(gt[f].body_pose);
        for (int j = 1; j < J; ++j)
            total += rot_log(wg[std::size_t(j)].transpose() * wp[std::size_t(j)]).norm();
    }
    return total / (double(pred.size()) * double(J - 1));
}

/// World-space joint position errors for every (frame, joint), meters.
inline std::vector<double> joint_position_errors(const std::vector<PoseState>& pred,
                                                 const std::vector<PoseState>& gt,
                                                 const SkinnedModel& model) {
    detail::check_pair(pred.size(), gt.size(), "frame");
    std::vector<double> errs;
    errs.reserve(pred.size() * std::size_t(model.joint_count()));
    for (std::size_t f = 0; f < pred.size(); ++f) {
        const FkResult fp = forward_kinematics(model, pred[f]);
        const FkResult fg = forward_kinematics(model, gt[f]);
        for (int j = 0; j < model.joint_count(); ++j) {
            const Vec3 a = pred[f].global.apply(fp.world_pos[std::size_t(j)]);
            const Vec3 b = gt[f].global.apply(fg.world_pos[std::size_t(j)]);
            errs.push_back((a - b).norm());
        }
    }
    return errs;
}

/// Mean squared world-space joint position error (m^2); the report also
/// carries its square root as an RMS in meters.
inline double positional_error(const std::vector<PoseState>& pred,
                               const std::vector<PoseState>& gt, const SkinnedModel& model) {
    const auto errs = joint_position_errors(pred, gt, model);
    if (errs.empty()) return 0.0;
    double sq = 0.0;
    for (double e : errs) sq += e * e;
    return sq / double(errs.size());
}

/// Fraction of errors strictly below rho.
inline double pck_from_errors(const std::vector<double>& errs, double rho) {
    if (errs.empty()) return 0.0;
    std::size_t n = 0;
    for (double e : errs) n += e < rho;
    return double(n) / double(errs.size());
}

/// Normalized area under the PCK curve over [a, b]: the exact integral of
/// the empirical step function, i.e. each error e contributes
/// (b - clamp(e, a, b)) / (b - a). Grid-free closed form of the normalized
/// trapezoidal integral in the fine-grid limit.
inline double auc_from_errors(const std::vector<double>& errs, double a, double b) {
    if (!(b > a)) throw std::invalid_argument("auc: empty rho range");
    if (errs.empty()) return 0.0;
    double acc = 0.0;
    for (double e : errs) acc += (b - std::clamp(e, a, b)) / (b - a);
    return acc / double(errs.size());
}

struct RhoGrid {
    double min = 0.0;
    double max = 0.15; // meters
    int steps = 150;

    void validate() const {
        if (steps < 1 || !(max > min)) throw std::invalid_argument("rho grid: empty");
    }
};

inline double pck(const std::vector<PoseState>& pred, const std::vector<PoseState>& gt,
                  const SkinnedModel& model, double rho) {
    return pck_from_errors(joint_position_errors(pred, gt, model), rho);
}

inline double auc_pck(const std::vector<PoseState>& pred, const std::vector<PoseState>& gt,
                      const SkinnedModel& model, const RhoGrid& grid) {
    grid.validate();
    return auc_from_errors(joint_position_errors(pred, gt, model), grid.min, grid.max);
}

/// Mean Euclidean keypoint distance in millimeters over a sequence of
/// K x 3 keypoint frames given in meters.
inline double mpjpe(const std::vector<Eigen::MatrixXd>& pred,
                    const std::vector<Eigen::MatrixXd>& gt) {
    detail::check_pair(pred.size(), gt.size(), "frame");
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t f = 0; f < pred.size(); ++f) {
        detail::check_pair(std::size_t(pred[f].rows()), std::size_t(gt[f].rows()), "keypoint");
        for (Eigen::Index k = 0; k < pred[f].rows(); ++k) {
            total += (pred[f].row(k) - gt[f].row(k)).norm();
            ++n;
        }
    }
    return n == 0 ? 0.0 : 1000.0 * total / double(n);
}

// --- reporting -------------------------------------------------------------

struct SequenceEval {
    std::string name;
    double euler_rad = 0.0;
    double joint_angle_rad = 0.0;
    double positional_msq = 0.0;
    double landmark_msq = 0.0;
    double auc = 0.0;
};

struct RunMetrics {
    std::string label;
    nlohmann::json config_echo;
    double euler_deg = 0.0;
    double joint_angle_rad = 0.0;
    double positional_msq = 0.0;   // m^2
    double positional_rms = 0.0;   // m
    double landmark_rms = 0.0;     // m
    double auc = 0.0;
    std::optional<double> mpjpe_mm;
    std::optional<double> expression_mse;
    std::vector<SequenceEval> per_sequence;
};

/// Landmark position errors via the anchor set, meters.
inline std::vector<double> landmark_position_errors(const std::vector<PoseState>& pred,
                                                    const std::vector<PoseState>& gt,
                                                    const SkinnedModel& model) {
    detail::check_pair(pred.size(), gt.size(), "frame");
    std::vector<double> errs;
    for (std::size_t f = 0; f < pred.size(); ++f) {
        const Eigen::MatrixXd a = anchored_landmarks(model, pred[f]);
        const Eigen::MatrixXd b = anchored_landmarks(model, gt[f]);
        for (Eigen::Index k = 0; k < a.rows(); ++k)
            errs.push_back((a.row(k) - b.row(k)).norm());
    }
    return errs;
}

inline RunMetrics evaluate_run(const SkinnedModel& model, const std::string& label,
                               const std::vector<std::vector<PoseState>>& pred,
                               const std::vector<std::vector<PoseState>>& gt,
                               const std::vector<std::string>& names, const RhoGrid& grid,
                               nlohmann::json config_echo = {}) {
    detail::check_pair(pred.size(), gt.size(), "sequence");
    grid.validate();
    RunMetrics run;
    run.label = label;
    run.config_echo = std::move(config_echo);
    std::vector<double> all_joint_errs, all_lm_errs;
    double euler_sum = 0.0, ja_sum = 0.0;
    std::size_t frames = 0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
        SequenceEval se;
        se.name = s < names.size() ? names[s] : "seq_" + std::to_string(s);
        se.euler_rad = euler_error(pred[s], gt[s]);
        se.joint_angle_rad = joint_angle_error(pred[s], gt[s], model.topology);
        const auto je = joint_position_errors(pred[s], gt[s], model);
        const auto le = landmark_position_errors(pred[s], gt[s], model);
        double jsq = 0.0, lsq = 0.0;
        for (double e : je) jsq += e * e;
        for (double e : le) lsq += e * e;
        se.positional_msq = je.empty() ? 0.0 : jsq / double(je.size());
        se.landmark_msq = le.empty() ? 0.0 : lsq / double(le.size());
        se.auc = auc_from_errors(je, grid.min, grid.max);
        all_joint_errs.insert(all_joint_errs.end(), je.begin(), je.end());
        all_lm_errs.insert(all_lm_errs.end(), le.begin(), le.end());
        euler_sum += se.euler_rad * double(pred[s].size());
        ja_sum += se.joint_angle_rad * double(pred[s].size());
        frames += pred[s].size();
        run.per_sequence.push_back(std::move(se));
    }
    run.euler_deg = frames ? (euler_sum / double(frames)) * 180.0 / M_PI : 0.0;
    run.joint_angle_rad = frames ? ja_sum / double(frames) : 0.0;
    double jsq = 0.0, lsq = 0.0;
    for (double e : all_joint_errs) jsq += e * e;
    for (double e : all_lm_errs) lsq += e * e;
    run.positional_msq = all_joint_errs.empty() ? 0.0 : jsq / double(all_joint_errs.size());
    run.positional_rms = std::sqrt(run.positional_msq);
    run.landmark_rms =
        all_lm_errs.empty() ? 0.0 : std::sqrt(lsq / double(all_lm_errs.size()));
    run.auc = auc_from_errors(all_joint_errs, grid.min, grid.max);
    return run;
}

struct MetricsReport {
    RhoGrid grid;
    std::vector<RunMetrics> runs;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["magic"] = "KPEVAL1";
        j["version"] = 1;
        j["rho_grid"] = {{"min", grid.min}, {"max", grid.max}, {"steps", grid.steps}};
        auto& rs = j["runs"] = nlohmann::json::array();
        for (const auto& r : runs) {
            nlohmann::json rj;
            rj["label"] = r.label;
            rj["config"] = r.config_echo;
            rj["auc"] = r.auc;
            rj["euler_deg"] = r.euler_deg;
            rj["joint_angle_rad"] = r.joint_angle_rad;
            rj["positional_msq_m2"] = r.positional_msq;
            rj["positional_rms_m"] = r.positional_rms;
            rj["landmark_rms_m"] = r.landmark_rms;
            if (r.mpjpe_mm) rj["mpjpe_mm"] = *r.mpjpe_mm;
            if (r.expression_mse) rj["expression_mse"] = *r.expression_mse;
            auto& ps = rj["per_sequence"] = nlohmann::json::array();
            for (const auto& s : r.per_sequence)
                ps.push_back({{"name", s.name},
                              {"euler_rad", s.euler_rad},
                              {"joint_angle_rad", s.joint_angle_rad},
                              {"positional_msq_m2", s.positional_msq},
                              {"landmark_msq_m2", s.landmark_msq},
                              {"auc", s.auc}});
            rs.push_back(std::move(rj));
        }
        return j;
    }

    std::string to_table() const {
        std::ostringstream out;
        std::size_t w = 12;
        for (const auto& r : runs) w = std::max(w, r.label.size() + 2);
        out << std::left << std::setw(int(w)) << "run" << std::right << std::setw(9)
            << "AUC^" << std::setw(12) << "Euler(deg)v" << std::setw(14) << "JointAng(rad)v"
            << std::setw(12) << "PosRMS(m)v" << std::setw(12) << "LmRMS(m)v";
        const bool any_mpjpe =
            std::any_of(runs.begin(), runs.end(), [](const auto& r) { return bool(r.mpjpe_mm); });
        if (any_mpjpe) out << std::setw(12) << "MPJPE(mm)v";
        out << '\n';
        out << std::string(w + 59 + (any_mpjpe ? 12 : 0), '-') << '\n';
        for (const auto& r : runs) {
            out << std::left << std::setw(int(w)) << r.label << std::right << std::fixed
                << std::setprecision(4) << std::setw(9) << r.auc << std::setw(12)
                << r.euler_deg << std::setw(14) << r.joint_angle_rad << std::setw(12)
                << r.positional_rms << std::setw(12) << r.landmark_rms;
            if (any_mpjpe) {
                if (r.mpjpe_mm)
                    out << std::setw(12) << *r.mpjpe_mm;
                else
                    out << std::setw(12) << "-";
            }
            out << '\n';
        }
        return out.str();
    }
};

} // namespace kp
