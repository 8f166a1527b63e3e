#pragma once

// Four-step feedforward body pose extractor: triad-based global rotation,
// learning-free bending heuristic, optional learned residual refinement,
// and a Procrustes update of the global transform.

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include <kp/bodymodel.hpp>
#include <kp/rotmath.hpp>

#include <json.hpp>

namespace kp {

struct ResidualFeatures {
    Eigen::MatrixXd twists;          // (m-1) x 9, row-major rotation blocks
    Eigen::MatrixXd init_rotations;  // J x 9, row-major rotation blocks
    std::vector<std::uint8_t> bone_valid;
};

enum class RegressorKind { none, mlp, gru, gru_spl };

inline std::string to_string(RegressorKind k) {
    switch (k) {
        case RegressorKind::none: return "none";
        case RegressorKind::mlp: return "mlp";
        case RegressorKind::gru: return "gru";
        case RegressorKind::gru_spl: return "gru_spl";
    }
    throw std::invalid_argument("regressor kind: unknown");
}

inline RegressorKind regressor_kind_from_string(const std::string& s) {
    if (s == "none") return RegressorKind::none;
    if (s == "mlp") return RegressorKind::mlp;
    if (s == "gru") return RegressorKind::gru;
    if (s == "gru_spl") return RegressorKind::gru_spl;
    throw std::invalid_argument("regressor kind: unknown '" + s + "'");
}

struct ExtractorConfig {
    bool use_keypoints = false;
    bool use_shape = false;
    bool use_init = true;
    bool use_twists = true;
    bool residual_output = true;
    RegressorKind regressor = RegressorKind::none;

    void validate() const {
        if (regressor != RegressorKind::none &&
            !(use_keypoints || use_shape || use_init || use_twists))
            throw std::invalid_argument("extractor config: regressor without any input features");
    }

    std::string label() const {
        std::string flags;
        auto add = [&](bool on, const char* name) {
            if (!on) return;
            if (!flags.empty()) flags += '+';
            flags += name;
        };
        add(use_keypoints, "KP");
        add(use_shape, "Beta");
        add(use_init, "Init");
        add(use_twists, "Twists");
        if (flags.empty()) flags = "off";
        return flags + "/" + (residual_output ? "Res+" : "Res-") + "/" + to_string(regressor);
    }

    nlohmann::json to_json() const {
        return {{"use_keypoints", use_keypoints}, {"use_shape", use_shape},
                {"use_init", use_init},           {"use_twists", use_twists},
                {"residual_output", residual_output}, {"regressor", to_string(regressor)}};
    }

    static ExtractorConfig from_json(const nlohmann::json& j) {
        ExtractorConfig c;
        c.use_keypoints = j.at("use_keypoints").get<bool>();
        c.use_shape = j.at("use_shape").get<bool>();
        c.use_init = j.at("use_init").get<bool>();
        c.use_twists = j.at("use_twists").get<bool>();
        c.residual_output = j.at("residual_output").get<bool>();
        c.regressor = regressor_kind_from_string(j.at("regressor").get<std::string>());
        c.validate();
        return c;
    }
};

/// Per-stream carrier for the recurrent hidden state and the last output.
struct ExtractorState {
    std::vector<Eigen::VectorXd> hidden;  // one entry per recurrent layer; empty = zeros
    PoseState last;
    bool has_last = false;
    bool last_ok = true;

    void reset() {
        hidden.clear();
        has_last = false;
        last_ok = true;
    }
};

/// Interface the learned refinement step programs against. Implementations
/// return a 6J-vector (two stacked rotation-matrix columns per joint) that
/// the extractor projects onto valid rotations.
class PoseRegressor {
public:
    virtual ~PoseRegressor() = default;
    virtual int feature_dim() const = 0;
    virtual int joint_count() const = 0;
    virtual bool stateless() const = 0;
    virtual Eigen::VectorXd forward(const Eigen::VectorXd& features,
                                    ExtractorState& state) const = 0;
};

inline int feature_dim(const ExtractorConfig& cfg, const BodyTopology& topo, int shape_dim) {
    int d = 0;
    if (cfg.use_twists) d += 9 * (topo.landmark_count - 1);
    if (cfg.use_init) d += 9 * topo.joint_count;
    if (cfg.use_keypoints) d += 3 * topo.landmark_count;
    if (cfg.use_shape) d += shape_dim;
    return d;
}

namespace detail {

inline void put_rotation(Eigen::MatrixXd& rows, Eigen::Index r, const Rot3& R) {
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) rows(r, 3 * i + j) = R(i, j);
}

/// Bones of the landmark tree ordered parent-before-child.
inline std::vector<int> bones_root_to_leaf(const BodyTopology& topo,
                                           const std::vector<int>& bones) {
    std::vector<int> depth(std::size_t(topo.landmark_count), 0);
    for (int k = 1; k < topo.landmark_count; ++k)
        depth[std::size_t(k)] = depth[std::size_t(topo.landmark_parent[std::size_t(k)])] + 1;
    std::vector<int> out = bones;
    std::stable_sort(out.begin(), out.end(),
                     [&](int a, int b) { return depth[std::size_t(a)] < depth[std::size_t(b)]; });
    return out;
}

} // namespace detail

/// Step 1: align the root frame with the landmark skeleton from the
/// chest-pelvis vertical and the shoulder-to-shoulder lateral direction.
inline Rot3 estimate_global_rotation(const LandmarkFrame& frame, const SkinnedModel& model) {
    const auto& topo = model.topology;
    const int ids[4] = {topo.lm_chest, topo.lm_pelvis, topo.lm_shoulder_l, topo.lm_shoulder_r};
    for (int id : ids)
        if (!frame.valid[std::size_t(id)])
            throw std::runtime_error("global rotation: required landmark missing");
    const Vec3 v = frame.points.row(topo.lm_chest) - frame.points.row(topo.lm_pelvis);
    const Vec3 w = frame.points.row(topo.lm_shoulder_l) - frame.points.row(topo.lm_shoulder_r);
    const Vec3 vh = model.anchors[std::size_t(topo.lm_chest)].rest_position -
                    model.anchors[std::size_t(topo.lm_pelvis)].rest_position;
    const Vec3 wh = model.anchors[std::size_t(topo.lm_shoulder_l)].rest_position -
                    model.anchors[std::size_t(topo.lm_shoulder_r)].rest_position;
    return triad_align(v, w, vh, wh);
}

/// Step 2: visit the steered bone set root-to-leaf; for each observed bone,
/// recompute the predicted bone under the current partial pose, then fold
/// the world-frame minimal rotation between prediction and observation into
/// the steering joint's local rotation. Invalid bones leave their joint at
/// the default rotation.
inline PoseState bending_heuristic(const LandmarkFrame& frame, const SkinnedModel& model,
                                   const Rot3& global_rotation,
                                   const Eigen::VectorXd& beta = {}) {
    const auto& topo = model.topology;
    PoseState pose = default_pose(model);
    if (beta.size() > 0) pose.shape = beta;
    pose.global.rotation = global_rotation;

    for (int k : detail::bones_root_to_leaf(topo, topo.bone_set)) {
        const int p = topo.landmark_parent[std::size_t(k)];
        if (!frame.valid[std::size_t(k)] || !frame.valid[std::size_t(p)]) continue;
        const Vec3 b = frame.points.row(k) - frame.points.row(p);

        const Eigen::MatrixXd lm = anchored_landmarks(model, pose);
        const Vec3 bhat = lm.row(k) - lm.row(p);
        Rot3 q;
        try {
            q = minimal_rotation(bhat, b);
        } catch (const std::domain_error&) {
            continue;
        }
        const int a = topo.dominant_joint[std::size_t(p)];
        const FkResult fk = forward_kinematics(model, pose);
        const Rot3 Rw = pose.global.rotation * fk.world_rot[std::size_t(a)];
        pose.body_pose[std::size_t(a)] =
            pose.body_pose[std::size_t(a)] * (Rw.transpose() * q * Rw);
    }
    return pose;
}

/// Step 3 features: per-bone minimal rotations between the initialized
/// prediction and the observation, conjugated into the steering joint's
/// world frame, plus the initial local rotations themselves.
inline ResidualFeatures compute_twists(const LandmarkFrame& frame, const SkinnedModel& model,
                                       const PoseState& pose) {
    const auto& topo = model.topology;
    const int m = topo.landmark_count;
    const int J = topo.joint_count;
    ResidualFeatures f;
    f.twists = Eigen::MatrixXd::Zero(m - 1, 9);
    f.init_rotations = Eigen::MatrixXd::Zero(J, 9);
    f.bone_valid.assign(std::size_t(m - 1), 0);

    const FkResult fk = forward_kinematics(model, pose);
    const Eigen::MatrixXd lm = anchored_landmarks(model, pose);
    for (int k = 1; k < m; ++k) {
        const Eigen::Index row = k - 1;
        detail::put_rotation(f.twists, row, Rot3::Identity());
        const int p = topo.landmark_parent[std::size_t(k)];
        if (!frame.valid[std::size_t(k)] || !frame.valid[std::size_t(p)]) continue;
        const Vec3 b = frame.points.row(k) - frame.points.row(p);
        const Vec3 bhat = lm.row(k) - lm.row(p);
        Rot3 q;
        try {
            q = minimal_rotation(bhat, b);
        } catch (const std::domain_error&) {
            continue;
        }
        if ((q - Rot3::Identity()).cwiseAbs().maxCoeff() != 0.0) {
            const int a = topo.dominant_joint[std::size_t(p)];
            const Rot3 Rw = pose.global.rotation * fk.world_rot[std::size_t(a)];
            detail::put_rotation(f.twists, row, Rw.transpose() * q * Rw);
        }
        f.bone_valid[std::size_t(row)] = 1;
    }
    for (int j = 0; j < J; ++j)
        detail::put_rotation(f.init_rotations, j, pose.body_pose[std::size_t(j)]);
    return f;
}

/// Feature vector layout: [twists | init rotations | keypoints | shape],
/// with blocks included per config flags. Invalid landmarks contribute
/// zeros to the keypoint block.
inline Eigen::VectorXd assemble_features(const ExtractorConfig& cfg,
                                         const ResidualFeatures& rf, const LandmarkFrame& frame,
                                         const Eigen::VectorXd& beta,
                                         const BodyTopology& topo) {
    Eigen::VectorXd x(feature_dim(cfg, topo, int(beta.size())));
    Eigen::Index at = 0;
    if (cfg.use_twists) {
        for (Eigen::Index r = 0; r < rf.twists.rows(); ++r)
            x.segment(at + 9 * r, 9) = rf.twists.row(r).transpose();
        at += 9 * rf.twists.rows();
    }
    if (cfg.use_init) {
        for (Eigen::Index r = 0; r < rf.init_rotations.rows(); ++r)
            x.segment(at + 9 * r, 9) = rf.init_rotations.row(r).transpose();
        at += 9 * rf.init_rotations.rows();
    }
    if (cfg.use_keypoints) {
        for (int k = 0; k < topo.landmark_count; ++k) {
            x.segment(at + 3 * k, 3) = frame.valid[std::size_t(k)]
                                           ? Vec3(frame.points.row(k))
                                           : Vec3(Vec3::Zero());
        }
        at += 3 * topo.landmark_count;
    }
    if (cfg.use_shape) {
        x.segment(at, beta.size()) = beta;
        at += beta.size();
    }
    return x;
}

/// Step 3: run the regressor and fold its projected per-joint rotations
/// into the initial pose (residual mode) or take them directly.
inline PoseState refine(const PoseRegressor& regressor, const ExtractorConfig& cfg,
                        const LandmarkFrame& frame, const SkinnedModel& model,
                        const PoseState& init, ExtractorState& state) {
    const ResidualFeatures rf = compute_twists(frame, model, init);
    const Eigen::VectorXd x =
        assemble_features(cfg, rf, frame, init.shape, model.topology);
    if (int(x.size()) != regressor.feature_dim())
        throw std::invalid_argument("refine: feature dim " + std::to_string(x.size()) +
                                    " != regressor dim " +
                                    std::to_string(regressor.feature_dim()));
    const Eigen::VectorXd raw = regressor.forward(x, state);
    const int J = model.joint_count();
    if (int(raw.size()) != 6 * J)
        throw std::invalid_argument("refine: regressor output size mismatch");
    PoseState out = init;
    for (int j = 0; j < J; ++j) {
        const Rot3 delta = rot_from_6d(raw.segment<3>(6 * j), raw.segment<3>(6 * j + 3));
        out.body_pose[std::size_t(j)] =
            cfg.residual_output ? Rot3(init.body_pose[std::size_t(j)] * delta) : delta;
    }
    return out;
}

/// Step 4: rigidly align the predicted anchors with the observed landmarks
/// and fold the alignment into the global transform. Joint angles are
/// untouched; degenerate point sets keep the incoming global.
inline PoseState procrustes_refine(const LandmarkFrame& frame, const SkinnedModel& model,
                                   const PoseState& pose) {
    const Eigen::MatrixXd lm = anchored_landmarks(model, pose);
    std::vector<Vec3> src, dst;
    for (int k = 0; k < model.topology.landmark_count; ++k) {
        if (!frame.valid[std::size_t(k)]) continue;
        src.push_back(lm.row(k));
        dst.push_back(frame.points.row(k));
    }
    if (src.size() < 3) return pose;
    RigidTransform T;
    try {
        T = kabsch(src, dst);
    } catch (const std::exception&) {
        return pose;
    }
    PoseState out = pose;
    out.global = T.compose(pose.global);
    return out;
}

/// Full pipeline for one frame. A failed global estimate holds the previous
/// rotation and clears state.last_ok; without any previous frame it throws.
inline PoseState extract_frame(const LandmarkFrame& frame, const SkinnedModel& model,
                               const ExtractorConfig& cfg, const PoseRegressor* regressor,
                               ExtractorState& state, const Eigen::VectorXd& beta = {}) {
    cfg.validate();
    state.last_ok = true;
    Rot3 global;
    try {
        global = estimate_global_rotation(frame, model);
    } catch (const std::exception&) {
        if (!state.has_last) throw;
        state.last_ok = false;
        global = state.last.global.rotation;
    }

    PoseState pose = bending_heuristic(frame, model, global, beta);
    if (cfg.regressor != RegressorKind::none) {
        if (!regressor) throw std::invalid_argument("extract: config wants a regressor");
        pose = refine(*regressor, cfg, frame, model, pose, state);
    }
    pose = procrustes_refine(frame, model, pose);

    state.last = pose;
    state.has_last = true;
    return pose;
}

inline std::vector<PoseState> extract_sequence(const std::vector<LandmarkFrame>& frames,
                                               const SkinnedModel& model,
                                               const ExtractorConfig& cfg,
                                               const PoseRegressor* regressor,
                                               ExtractorState& state,
                                               const Eigen::VectorXd& beta = {}) {
    std::vector<PoseState> out;
    out.reserve(frames.size());
    for (const auto& f : frames) out.push_back(extract_frame(f, model, cfg, regressor, state, beta));
    return out;
}

} // namespace kp
