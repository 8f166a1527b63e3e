#pragma once

// Optimization-based pose fitting: a smooth-l1 landmark data term, a
// covariance-weighted l2 pose prior over joint axis-angles, and an l2
// joint-motion temporal term, minimized with Adam plus step-halving so the
// objective never increases across accepted iterations. Gradients are
// analytic through the kinematic chain. Serves as the annotation oracle and
// the accuracy/speed baseline for the regression pipeline.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include <nlohmann/json.hpp>

#include <kp/bodymodel.hpp>
#include <kp/extractor.hpp>
#include <kp/rotmath.hpp>

namespace kp {

/// Huber-style robust penalty: 0.5 r^2 / delta for |r| < delta, else
/// |r| - 0.5 delta. Continuous with continuous first derivative.
inline double smooth_l1(double r, double delta) {
    if (delta <= 0.0) throw std::invalid_argument("smooth_l1: delta must be positive");
    const double a = std::abs(r);
    if (a < delta) return 0.5 * r * r / delta;
    return a - 0.5 * delta;
}

inline double smooth_l1_derivative(double r, double delta) {
    if (delta <= 0.0) throw std::invalid_argument("smooth_l1: delta must be positive");
    if (std::abs(r) < delta) return r / delta;
    return r > 0.0 ? 1.0 : -1.0;
}

/// Gaussian prior over concatenated joint axis-angles: mean, covariance,
/// and the cached covariance inverse used by the quadratic form.
struct PosePrior {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
    Eigen::MatrixXd inverse;

    bool empty() const { return mean.size() == 0; }
};

/// Concatenated axis-angle vector of the per-joint local rotations, length 3J.
inline Eigen::VectorXd pose_axis_angles(const PoseState& pose) {
    const int J = int(pose.body_pose.size());
    Eigen::VectorXd u(3 * J);
    for (int j = 0; j < J; ++j)
        u.segment<3>(3 * j) = rot_log(pose.body_pose[std::size_t(j)]);
    return u;
}

/// Sample mean and covariance of the training poses' axis-angle vectors,
/// ridge-regularized with 1e-6 I so the inverse always exists.
inline PosePrior estimate_pose_covariance(const std::vector<PoseState>& poses) {
    if (poses.empty())
        throw std::invalid_argument("estimate_pose_covariance: no poses");
    const int dim = 3 * int(poses[0].body_pose.size());
    const int n = int(poses.size());
    Eigen::MatrixXd U(n, dim);
    for (int i = 0; i < n; ++i) {
        if (3 * int(poses[std::size_t(i)].body_pose.size()) != dim)
            throw std::invalid_argument("estimate_pose_covariance: joint count mismatch");
        U.row(i) = pose_axis_angles(poses[std::size_t(i)]).transpose();
    }
    PosePrior prior;
    prior.mean = U.colwise().mean().transpose();
    prior.covariance = Eigen::MatrixXd::Zero(dim, dim);
    if (n > 1) {
        const Eigen::MatrixXd centered = U.rowwise() - prior.mean.transpose();
        prior.covariance = centered.transpose() * centered / double(n - 1);
    }
    prior.covariance += 1e-6 * Eigen::MatrixXd::Identity(dim, dim);
    prior.inverse = prior.covariance.llt().solve(Eigen::MatrixXd::Identity(dim, dim));
    return prior;
}

/// Quadratic form u' Sigma^-1 u with u the pose's axis-angle vector minus
/// the prior mean.
inline double pose_prior(const PoseState& pose, const PosePrior& prior) {
    if (prior.empty()) throw std::invalid_argument("pose_prior: prior not fitted");
    const Eigen::VectorXd u = pose_axis_angles(pose) - prior.mean;
    if (u.size() != prior.mean.size())
        throw std::invalid_argument("pose_prior: dimension mismatch");
    return u.dot(prior.inverse * u);
}

namespace detail {

inline std::vector<Vec3> world_joint_positions(const SkinnedModel& model,
                                               const PoseState& pose) {
    const FkResult fk = forward_kinematics(model, pose);
    std::vector<Vec3> out(fk.world_pos.size());
    for (std::size_t j = 0; j < fk.world_pos.size(); ++j)
        out[j] = pose.global.apply(fk.world_pos[j]);
    return out;
}

} // namespace detail

/// Sum of squared world-space joint displacements between two poses.
inline double temporal_cost(const PoseState& a, const PoseState& b,
                            const SkinnedModel& model) {
    const std::vector<Vec3> pa = detail::world_joint_positions(model, a);
    const std::vector<Vec3> pb = detail::world_joint_positions(model, b);
    double c = 0.0;
    for (std::size_t j = 0; j < pa.size(); ++j) c += (pa[j] - pb[j]).squaredNorm();
    return c;
}

enum class FitMode { online, offline };

struct FitConfig {
    double lambda_data = 1.0;
    double lambda_prior = 1e-3;
    double lambda_temporal = 1e-2;
    double delta = 0.01;          // meters; smooth-l1 threshold
    double learning_rate = 0.01;
    double tolerance = 1e-12;     // stop when an accepted step improves less
    int max_iterations = 200;     // per frame in online/single-frame fits
    int offline_iterations = 1000; // total per-frame budget in offline mode
    int sweeps = 3;               // offline refinement sweeps over the sequence
    int max_halvings = 30;
    int max_stalled = 3;          // consecutive iterations without tolerance-level
                                  // progress before stopping
    PosePrior prior;              // prior term is skipped while empty

    void validate() const {
        if (lambda_data < 0 || lambda_prior < 0 || lambda_temporal < 0)
            throw std::invalid_argument("fit config: negative term weight");
        if (delta <= 0) throw std::invalid_argument("fit config: delta must be positive");
        if (learning_rate <= 0)
            throw std::invalid_argument("fit config: learning rate must be positive");
        if (tolerance < 0) throw std::invalid_argument("fit config: negative tolerance");
        if (max_iterations < 1 || offline_iterations < 1)
            throw std::invalid_argument("fit config: iteration budget must be positive");
        if (sweeps < 0 || max_halvings < 0 || max_stalled < 1)
            throw std::invalid_argument("fit config: bad optimizer limits");
    }
};

/// Weighted per-term contributions; total() equals the objective.
struct FitTerms {
    double data = 0.0;
    double prior = 0.0;
    double temporal = 0.0;

    double total() const { return data + prior + temporal; }
};

struct FitResult {
    std::vector<PoseState> poses;
    double objective = 0.0;
    FitTerms terms;
    int iterations = 0;
    double wall_seconds = 0.0;
    bool converged = false;
    std::vector<double> trace;               // objective after each iteration, per frame
    std::vector<double> frame_wall_seconds;  // per-frame time of the online pass

    nlohmann::json to_json() const {
        return nlohmann::json{{"objective", objective},
                              {"data", terms.data},
                              {"prior", terms.prior},
                              {"temporal", terms.temporal},
                              {"iterations", iterations},
                              {"wall_seconds", wall_seconds},
                              {"frame_wall_seconds", frame_wall_seconds},
                              {"converged", converged},
                              {"frames", poses.size()},
                              {"trace", trace}};
    }
};

namespace detail {

/// Single-frame objective over x = [u_0..u_{J-1}, w_global, t_global]:
/// local joint rotations and the global rotation are absolute axis-angles.
/// Hand, jaw, expression, and shape are held at their init values (shape is
/// overridden by the fitted beta).
class FrameProblem {
public:
    FrameProblem(const LandmarkFrame& frame, const SkinnedModel& model,
                 const Eigen::VectorXd& beta, const PoseState& init,
                 const FitConfig& cfg)
        : frame_(frame), model_(model), cfg_(cfg), base_(init) {
        base_.shape = beta;
        joints_ = model.joint_count();
        const Eigen::MatrixXd shaped = shaped_joints(model, beta);
        const int m = model.topology.landmark_count;
        base_points_.resize(static_cast<std::size_t>(m));
        attachments_.resize(static_cast<std::size_t>(m));
        for (int k = 0; k < m; ++k) {
            const AnchoredVertex& a = model.anchors[std::size_t(k)];
            Vec3 base = a.rest_position;
            for (int j = 0; j < joints_; ++j) {
                const double w = a.weights[j];
                if (w == 0.0) continue;
                base += w * (shaped.row(j) - model.joint_rest.row(j)).transpose();
                attachments_[std::size_t(k)].push_back({j, w});
            }
            base_points_[std::size_t(k)] = base;
        }
    }

    int dim() const { return 3 * joints_ + 6; }

    Eigen::VectorXd pack(const PoseState& pose) const {
        Eigen::VectorXd x(dim());
        for (int j = 0; j < joints_; ++j)
            x.segment<3>(3 * j) = rot_log(pose.body_pose[std::size_t(j)]);
        x.segment<3>(3 * joints_) = rot_log(pose.global.rotation);
        x.tail<3>() = pose.global.translation;
        return x;
    }

    PoseState unpack(const Eigen::VectorXd& x) const {
        PoseState pose = base_;
        for (int j = 0; j < joints_; ++j)
            pose.body_pose[std::size_t(j)] = rot_exp(x.segment<3>(3 * j));
        pose.global.rotation = rot_exp(x.segment<3>(3 * joints_));
        pose.global.translation = x.tail<3>();
        return pose;
    }

    void set_prev(const std::vector<Vec3>& positions) { prev_ = positions; }
    void set_next(const std::vector<Vec3>& positions) { next_ = positions; }

    double eval(const Eigen::VectorXd& x, FitTerms* out) const {
        const PoseState pose = unpack(x);
        FitTerms terms;
        if (cfg_.lambda_data > 0) {
            const Eigen::MatrixXd pred = anchored_landmarks(model_, pose);
            for (int k = 0; k < int(frame_.valid.size()); ++k)
                if (frame_.valid[std::size_t(k)])
                    terms.data += smooth_l1(
                        (pred.row(k) - frame_.points.row(k)).norm(), cfg_.delta);
            terms.data *= cfg_.lambda_data;
        }
        if (cfg_.lambda_prior > 0 && !cfg_.prior.empty()) {
            const Eigen::VectorXd u = x.head(3 * joints_) - cfg_.prior.mean;
            terms.prior = cfg_.lambda_prior * u.dot(cfg_.prior.inverse * u);
        }
        if (cfg_.lambda_temporal > 0 && (!prev_.empty() || !next_.empty())) {
            const std::vector<Vec3> pos = world_joint_positions(model_, pose);
            for (const auto& target : {std::cref(prev_), std::cref(next_)}) {
                if (target.get().empty()) continue;
                for (std::size_t j = 0; j < pos.size(); ++j)
                    terms.temporal += (pos[j] - target.get()[j]).squaredNorm();
            }
            terms.temporal *= cfg_.lambda_temporal;
        }
        if (out) *out = terms;
        return terms.total();
    }

    double eval_with_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const {
        const PoseState pose = unpack(x);
        const FkResult fk = forward_kinematics(model_, pose);
        const Rot3& gr = pose.global.rotation;
        const Vec3& gt = pose.global.translation;

        std::vector<Rot3> frames(static_cast<std::size_t>(joints_));
        std::vector<Mat3> jac(static_cast<std::size_t>(joints_));
        for (int j = 0; j < joints_; ++j) {
            const int p = model_.topology.joint_parent[std::size_t(j)];
            frames[std::size_t(j)] =
                p < 0 ? pose.body_pose[std::size_t(j)]
                      : Rot3(fk.world_rot[std::size_t(p)] * pose.body_pose[std::size_t(j)]);
            jac[std::size_t(j)] = so3_right_jacobian(x.segment<3>(3 * j));
        }
        const Mat3 jac_global = so3_right_jacobian(x.segment<3>(3 * joints_));

        grad = Eigen::VectorXd::Zero(dim());
        double data = 0.0;

        if (cfg_.lambda_data > 0) {
            std::vector<Vec3> zacc(static_cast<std::size_t>(joints_));
            std::vector<double> macc(static_cast<std::size_t>(joints_));
            std::vector<Vec3> attach_pos;
            for (int k = 0; k < int(frame_.valid.size()); ++k) {
                if (!frame_.valid[std::size_t(k)]) continue;
                const auto& att = attachments_[std::size_t(k)];
                const Vec3& base = base_points_[std::size_t(k)];
                attach_pos.resize(att.size());
                Vec3 q = Vec3::Zero();
                for (std::size_t i = 0; i < att.size(); ++i) {
                    const int j = att[i].joint;
                    attach_pos[i] =
                        fk.world_rot[std::size_t(j)] *
                            (base - fk.joints_rest.row(j).transpose()) +
                        fk.world_pos[std::size_t(j)];
                    q += att[i].weight * attach_pos[i];
                }
                const Vec3 v = gr * q + gt - frame_.points.row(k).transpose();
                const double r = v.norm();
                data += smooth_l1(r, cfg_.delta);
                const double scale =
                    cfg_.lambda_data * (r < cfg_.delta ? 1.0 / cfg_.delta : 1.0 / r);
                const Vec3 gk = scale * v;
                grad.tail<3>() += gk;
                const Vec3 hg = gr.transpose() * gk;
                grad.segment<3>(3 * joints_) += jac_global.transpose() * q.cross(hg);
                std::fill(zacc.begin(), zacc.end(), Vec3::Zero());
                std::fill(macc.begin(), macc.end(), 0.0);
                for (std::size_t i = 0; i < att.size(); ++i)
                    for (int a = att[i].joint; a >= 0;
                         a = model_.topology.joint_parent[std::size_t(a)]) {
                        zacc[std::size_t(a)] += att[i].weight * attach_pos[i];
                        macc[std::size_t(a)] += att[i].weight;
                    }
                for (int a = 0; a < joints_; ++a) {
                    if (macc[std::size_t(a)] == 0.0) continue;
                    const Vec3 y = zacc[std::size_t(a)] -
                                   macc[std::size_t(a)] * fk.world_pos[std::size_t(a)];
                    const Vec3 y2 = frames[std::size_t(a)].transpose() * y;
                    const Vec3 h2 = frames[std::size_t(a)].transpose() * hg;
                    grad.segment<3>(3 * a) += jac[std::size_t(a)].transpose() * y2.cross(h2);
                }
            }
            data *= cfg_.lambda_data;
        }

        double prior = 0.0;
        if (cfg_.lambda_prior > 0 && !cfg_.prior.empty()) {
            const Eigen::VectorXd u = x.head(3 * joints_) - cfg_.prior.mean;
            const Eigen::VectorXd pu = cfg_.prior.inverse * u;
            prior = cfg_.lambda_prior * u.dot(pu);
            grad.head(3 * joints_) += 2.0 * cfg_.lambda_prior * pu;
        }

        double temporal = 0.0;
        if (cfg_.lambda_temporal > 0 && (!prev_.empty() || !next_.empty())) {
            for (const auto& target : {std::cref(prev_), std::cref(next_)}) {
                if (target.get().empty()) continue;
                for (int j = 0; j < joints_; ++j) {
                    const Vec3 d =
                        gr * fk.world_pos[std::size_t(j)] + gt - target.get()[std::size_t(j)];
                    temporal += d.squaredNorm();
                    const Vec3 gj = 2.0 * cfg_.lambda_temporal * d;
                    grad.tail<3>() += gj;
                    const Vec3 hg = gr.transpose() * gj;
                    grad.segment<3>(3 * joints_) +=
                        jac_global.transpose() * fk.world_pos[std::size_t(j)].cross(hg);
                    for (int a = model_.topology.joint_parent[std::size_t(j)]; a >= 0;
                         a = model_.topology.joint_parent[std::size_t(a)]) {
                        const Vec3 y2 = frames[std::size_t(a)].transpose() *
                                        (fk.world_pos[std::size_t(j)] -
                                         fk.world_pos[std::size_t(a)]);
                        const Vec3 h2 = frames[std::size_t(a)].transpose() * hg;
                        grad.segment<3>(3 * a) +=
                            jac[std::size_t(a)].transpose() * y2.cross(h2);
                    }
                }
            }
            temporal *= cfg_.lambda_temporal;
        }

        return data + prior + temporal;
    }

private:
    struct Attachment {
        int joint = 0;
        double weight = 0.0;
    };

    const LandmarkFrame& frame_;
    const SkinnedModel& model_;
    const FitConfig& cfg_;
    PoseState base_;
    int joints_ = 0;
    std::vector<Vec3> base_points_;
    std::vector<std::vector<Attachment>> attachments_;
    std::vector<Vec3> prev_;
    std::vector<Vec3> next_;
};

struct MinimizeOutcome {
    Eigen::VectorXd x;
    double objective = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> trace;
};

/// Adam with step-halving: a proposed update is halved until the objective
/// does not increase; fully rejected steps leave the iterate unchanged.
inline MinimizeOutcome minimize(const FrameProblem& problem, Eigen::VectorXd x,
                                const FitConfig& cfg, int max_iters) {
    MinimizeOutcome out;
    double f = problem.eval(x, nullptr);
    if (!std::isfinite(f))
        throw std::runtime_error("fit: non-finite objective at the initial pose");
    out.trace.push_back(f);
    Eigen::VectorXd m = Eigen::VectorXd::Zero(x.size());
    Eigen::VectorXd v = Eigen::VectorXd::Zero(x.size());
    Eigen::VectorXd g(x.size());
    int stalled = 0;
    for (int iter = 1; iter <= max_iters; ++iter) {
        problem.eval_with_gradient(x, g);
        if (!g.allFinite())
            throw std::runtime_error("fit: non-finite gradient at iteration " +
                                     std::to_string(iter));
        m = 0.9 * m + 0.1 * g;
        v = (0.999 * v.array() + 0.001 * g.array().square()).matrix();
        const double bc1 = 1.0 - std::pow(0.9, iter);
        const double bc2 = 1.0 - std::pow(0.999, iter);
        const Eigen::VectorXd step =
            (cfg.learning_rate * (m.array() / bc1) /
             ((v.array() / bc2).sqrt() + 1e-8))
                .matrix();
        out.iterations = iter;
        double scale = 1.0;
        bool accepted = false;
        Eigen::VectorXd cand;
        double fc = f;
        for (int h = 0; h <= cfg.max_halvings; ++h) {
            cand = x - scale * step;
            fc = problem.eval(cand, nullptr);
            if (std::isfinite(fc) && fc < f) {
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        double improvement = 0.0;
        if (accepted) {
            improvement = f - fc;
            x = std::move(cand);
            f = fc;
        } else {
            m.setZero();
            v.setZero();
        }
        out.trace.push_back(f);
        if (improvement < cfg.tolerance) {
            if (++stalled >= cfg.max_stalled) {
                out.converged = true;
                break;
            }
        } else {
            stalled = 0;
        }
    }
    out.x = std::move(x);
    out.objective = f;
    return out;
}

} // namespace detail

/// Default pose with the global transform seeded from the observed
/// landmarks: triad alignment for the rotation (identity when degenerate)
/// and the valid-landmark centroid offset for the translation.
inline PoseState initial_guess(const LandmarkFrame& frame, const SkinnedModel& model,
                               const Eigen::VectorXd& beta) {
    PoseState pose = default_pose(model);
    pose.shape = beta;
    try {
        pose.global.rotation = estimate_global_rotation(frame, model);
    } catch (const std::exception&) {
    }
    const Eigen::MatrixXd pred = anchored_landmarks(model, pose);
    Vec3 diff = Vec3::Zero();
    int n = 0;
    for (int k = 0; k < int(frame.valid.size()); ++k)
        if (frame.valid[std::size_t(k)]) {
            diff += frame.points.row(k).transpose() - pred.row(k).transpose();
            ++n;
        }
    if (n > 0) pose.global.translation = diff / double(n);
    return pose;
}

inline FitResult fit_frame(const LandmarkFrame& frame, const SkinnedModel& model,
                           const Eigen::VectorXd& beta, const PoseState& init,
                           const FitConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const detail::FrameProblem problem(frame, model, beta, init, cfg);
    detail::MinimizeOutcome out = detail::minimize(problem, problem.pack(init), cfg,
                                                   cfg.max_iterations);
    FitResult res;
    res.poses.push_back(problem.unpack(out.x));
    res.objective = out.objective;
    problem.eval(out.x, &res.terms);
    res.iterations = out.iterations;
    res.converged = out.converged;
    res.trace = std::move(out.trace);
    res.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

/// Joint objective of a solved sequence: per-frame data and prior terms plus
/// the temporal term between consecutive frames.
inline double sequence_objective(const std::vector<LandmarkFrame>& frames,
                                 const SkinnedModel& model, const Eigen::VectorXd& beta,
                                 const std::vector<PoseState>& poses, const FitConfig& cfg,
                                 FitTerms* terms_out = nullptr) {
    if (frames.size() != poses.size())
        throw std::invalid_argument("sequence_objective: frame/pose count mismatch");
    FitTerms terms;
    for (std::size_t t = 0; t < frames.size(); ++t) {
        if (cfg.lambda_data > 0) {
            const Eigen::MatrixXd pred = anchored_landmarks(model, poses[t]);
            double d = 0.0;
            for (int k = 0; k < int(frames[t].valid.size()); ++k)
                if (frames[t].valid[std::size_t(k)])
                    d += smooth_l1((pred.row(k) - frames[t].points.row(k)).norm(),
                                   cfg.delta);
            terms.data += cfg.lambda_data * d;
        }
        if (cfg.lambda_prior > 0 && !cfg.prior.empty())
            terms.prior += cfg.lambda_prior * pose_prior(poses[t], cfg.prior);
        if (t > 0 && cfg.lambda_temporal > 0)
            terms.temporal +=
                cfg.lambda_temporal * temporal_cost(poses[t], poses[t - 1], model);
    }
    if (terms_out) *terms_out = terms;
    return terms.total();
}

/// Online mode fits frames in order, warm-starting each frame from the
/// previous solution (or from the matching entry of `inits` when provided)
/// with a temporal term against the previous frame. Offline mode runs the
/// online pass first and then refines with alternating forward/backward
/// sweeps in which every frame sees both neighbors, so the joint objective
/// never exceeds the online result.
inline FitResult fit_sequence(const std::vector<LandmarkFrame>& frames,
                              const SkinnedModel& model, const Eigen::VectorXd& beta,
                              const FitConfig& cfg, FitMode mode,
                              const std::vector<PoseState>& inits = {}) {
    cfg.validate();
    if (frames.empty()) throw std::invalid_argument("fit_sequence: no frames");
    if (!inits.empty() && inits.size() != frames.size())
        throw std::invalid_argument("fit_sequence: init/frame count mismatch");
    const auto t0 = std::chrono::steady_clock::now();
    const int T = int(frames.size());
    FitResult res;
    res.poses.resize(static_cast<std::size_t>(T));
    res.converged = true;

    res.frame_wall_seconds.reserve(std::size_t(T));
    for (int t = 0; t < T; ++t) {
        const auto f0 = std::chrono::steady_clock::now();
        const PoseState init =
            !inits.empty() ? inits[std::size_t(t)]
                           : (t == 0 ? initial_guess(frames[0], model, beta)
                                     : res.poses[std::size_t(t - 1)]);
        detail::FrameProblem problem(frames[std::size_t(t)], model, beta, init, cfg);
        if (t > 0 && cfg.lambda_temporal > 0)
            problem.set_prev(
                detail::world_joint_positions(model, res.poses[std::size_t(t - 1)]));
        detail::MinimizeOutcome out =
            detail::minimize(problem, problem.pack(init), cfg, cfg.max_iterations);
        res.poses[std::size_t(t)] = problem.unpack(out.x);
        res.iterations += out.iterations;
        res.converged = res.converged && out.converged;
        res.trace.insert(res.trace.end(), out.trace.begin(), out.trace.end());
        res.frame_wall_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - f0).count());
    }

    if (mode == FitMode::offline && cfg.sweeps > 0) {
        const int budget = std::max(
            1, (cfg.offline_iterations - cfg.max_iterations) / std::max(1, cfg.sweeps));
        for (int s = 0; s < cfg.sweeps; ++s) {
            for (int i = 0; i < T; ++i) {
                const int t = (s % 2 == 0) ? i : T - 1 - i;
                const PoseState init = res.poses[std::size_t(t)];
                detail::FrameProblem problem(frames[std::size_t(t)], model, beta, init,
                                             cfg);
                if (cfg.lambda_temporal > 0) {
                    if (t > 0)
                        problem.set_prev(detail::world_joint_positions(
                            model, res.poses[std::size_t(t - 1)]));
                    if (t + 1 < T)
                        problem.set_next(detail::world_joint_positions(
                            model, res.poses[std::size_t(t + 1)]));
                }
                detail::MinimizeOutcome out =
                    detail::minimize(problem, problem.pack(init), cfg, budget);
                res.poses[std::size_t(t)] = problem.unpack(out.x);
                res.iterations += out.iterations;
                res.trace.insert(res.trace.end(), out.trace.begin(), out.trace.end());
            }
        }
    }

    res.objective = sequence_objective(frames, model, beta, res.poses, cfg, &res.terms);
    res.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

} // namespace kp
