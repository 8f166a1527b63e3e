#pragma once

// Parametric linear-blend-skinned body: kinematic tree, template mesh with
// shape/expression/pose blendshapes, landmark-anchored vertices, and the
// procedural desk-scale model used throughout the tests and tools.
//
// Skinning pipeline: T_p = template + shape(beta) + expression(psi) +
// pose-corrective(theta), joint rest positions J(beta) = rest + basis*beta,
// forward kinematics over local joint rotations, then per-vertex weighted
// blend of the joint world transforms, then the global rigid transform.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <kp/container.hpp>
#include <kp/random.hpp>
#include <kp/rotmath.hpp>

namespace kp {

struct BodyTopology {
    int joint_count = 0;
    std::vector<int> joint_parent; // -1 for the root
    std::vector<std::string> joint_names;

    int landmark_count = 0;
    std::vector<int> landmark_parent; // -1 for the root landmark
    std::vector<std::string> landmark_names;
    std::vector<int> dominant_joint; // landmark -> owning joint
    std::vector<int> bone_set;       // landmark indices of the heuristic bones

    // landmark ids consumed by the global-orientation estimate
    int lm_pelvis = 0, lm_chest = 0, lm_shoulder_l = 0, lm_shoulder_r = 0;

    int bone_count() const { return landmark_count - 1; }

    void validate() const {
        auto check_tree = [](const std::vector<int>& parent, const char* what) {
            for (int i = 0; i < int(parent.size()); ++i) {
                int steps = 0, j = i;
                while (j >= 0) {
                    if (parent[j] >= j || ++steps > int(parent.size()))
                        throw std::invalid_argument(std::string("topology: cyclic ") + what);
                    j = parent[j];
                }
            }
        };
        if (int(joint_parent.size()) != joint_count ||
            int(landmark_parent.size()) != landmark_count)
            throw std::invalid_argument("topology: size mismatch");
        check_tree(joint_parent, "joint tree");
        check_tree(landmark_parent, "landmark tree");
        // every heuristic bone must have a distinct joint to steer
        std::vector<int> seen;
        for (int k : bone_set) {
            if (k <= 0 || k >= landmark_count || landmark_parent[k] < 0)
                throw std::invalid_argument("topology: bad bone set entry");
            const int sj = dominant_joint[landmark_parent[k]];
            if (std::find(seen.begin(), seen.end(), sj) != seen.end())
                throw std::invalid_argument("topology: bone set joints not unique");
            seen.push_back(sj);
        }
    }
};

struct AnchoredVertex {
    Vec3 rest_position = Vec3::Zero();
    Eigen::VectorXd weights; // length = joint_count, row-stochastic
};

struct PoseState {
    std::vector<Rot3> body_pose;             // theta, one local rotation per joint
    std::vector<std::vector<Rot3>> hand_poses; // xi, one list per hand
    Rot3 jaw_pose = Rot3::Identity();        // zeta
    Eigen::VectorXd expression;              // psi
    Eigen::VectorXd shape;                   // beta
    RigidTransform global;
};

struct SkinnedModel {
    BodyTopology topology;

    Eigen::MatrixXd template_vertices; // V x 3
    Eigen::MatrixXd lbs_weights;       // V x J, rows sum to 1
    Eigen::MatrixXd shape_basis;       // 3V x |beta| (vertex-major x,y,z)
    Eigen::MatrixXd expression_basis;  // 3V x |psi|
    Eigen::MatrixXd pose_basis;        // 3V x 9(J-1), 0x0 when disabled
    Eigen::MatrixXd joint_rest;        // J x 3
    Eigen::MatrixXd joint_shape_basis; // 3J x |beta|
    std::vector<AnchoredVertex> anchors;

    std::vector<std::vector<int>> hand_joints; // joint ids per hand
    int jaw_joint = -1;

    int vertex_count() const { return int(template_vertices.rows()); }
    int joint_count() const { return topology.joint_count; }
    int shape_dim() const { return int(shape_basis.cols()); }
    int expression_dim() const { return int(expression_basis.cols()); }
};

inline PoseState default_pose(const SkinnedModel& m) {
    PoseState p;
    p.body_pose.assign(std::size_t(m.joint_count()), Rot3::Identity());
    p.hand_poses.resize(m.hand_joints.size());
    for (std::size_t h = 0; h < m.hand_joints.size(); ++h)
        p.hand_poses[h].assign(m.hand_joints[h].size(), Rot3::Identity());
    p.expression = Eigen::VectorXd::Zero(m.expression_dim());
    p.shape = Eigen::VectorXd::Zero(m.shape_dim());
    return p;
}

/// Local rotation actually used at each joint: theta, with the jaw and hand
/// rotations composed on top at their joints.
inline std::vector<Rot3> local_rotations(const SkinnedModel& m, const PoseState& pose) {
    if (int(pose.body_pose.size()) != m.joint_count())
        throw std::invalid_argument("pose: body_pose size mismatch");
    std::vector<Rot3> locals = pose.body_pose;
    if (m.jaw_joint >= 0) locals[m.jaw_joint] = locals[m.jaw_joint] * pose.jaw_pose;
    for (std::size_t h = 0; h < m.hand_joints.size(); ++h)
        for (std::size_t i = 0; i < m.hand_joints[h].size(); ++i)
            if (h < pose.hand_poses.size() && i < pose.hand_poses[h].size())
                locals[m.hand_joints[h][i]] =
                    locals[m.hand_joints[h][i]] * pose.hand_poses[h][i];
    return locals;
}

/// Joint rest positions under shape coefficients: J(beta).
inline Eigen::MatrixXd shaped_joints(const SkinnedModel& m, const Eigen::VectorXd& beta) {
    if (beta.size() != m.shape_dim())
        throw std::invalid_argument("pose: shape size mismatch");
    Eigen::MatrixXd J = m.joint_rest;
    if (beta.size() > 0) {
        const Eigen::VectorXd d = m.joint_shape_basis * beta;
        for (int j = 0; j < m.joint_count(); ++j)
            J.row(j) += d.segment<3>(3 * j).transpose();
    }
    return J;
}

struct FkResult {
    std::vector<Rot3> locals;     // effective local rotations
    std::vector<Rot3> world_rot;  // body-frame joint orientations
    std::vector<Vec3> world_pos;  // body-frame joint positions
    Eigen::MatrixXd joints_rest;  // J(beta), J x 3
};

inline FkResult forward_kinematics(const SkinnedModel& m, const PoseState& pose) {
    FkResult fk;
    fk.locals = local_rotations(m, pose);
    fk.joints_rest = shaped_joints(m, pose.shape);
    const int J = m.joint_count();
    fk.world_rot.resize(J);
    fk.world_pos.resize(J);
    // positions tracked as rest + delta so an identity pose is exact
    std::vector<Vec3> delta(std::size_t(J), Vec3::Zero());
    for (int j = 0; j < J; ++j) {
        const int p = m.topology.joint_parent[j];
        const Vec3 rest = fk.joints_rest.row(j).transpose();
        if (p < 0) {
            fk.world_rot[j] = fk.locals[j];
        } else {
            fk.world_rot[j] = fk.world_rot[p] * fk.locals[j];
            const Vec3 off = rest - fk.joints_rest.row(p).transpose();
            delta[std::size_t(j)] =
                delta[std::size_t(p)] + (fk.world_rot[p] * off - off);
        }
        fk.world_pos[j] = rest + delta[std::size_t(j)];
    }
    return fk;
}

/// Precomputed per-joint affine maps. A point at rest position x with weight
/// row w first follows the shape-shifted joints (x' = x + sum_j w_j*shift_j,
/// the anchors' stand-in for per-vertex shape rows), then lands at
/// global * (x' + sum_j w_j * ((Rw_j * x' - x') + q_j)); the displacement
/// form keeps an identity pose exact even though weight rows only sum to 1
/// up to rounding.
struct Skinner {
    std::vector<Rot3> rot;         // Rw_j
    std::vector<Vec3> off;         // q_j = pos_j - Rw_j * jrest_j
    std::vector<Vec3> shape_shift; // J(beta) - J(0)
    RigidTransform global;

    Vec3 apply(const Vec3& rest, const Eigen::VectorXd& w) const {
        Vec3 base = rest;
        for (std::size_t j = 0; j < rot.size(); ++j)
            if (w[Eigen::Index(j)] != 0.0) base += w[Eigen::Index(j)] * shape_shift[j];
        Vec3 x = base;
        for (std::size_t j = 0; j < rot.size(); ++j)
            if (w[Eigen::Index(j)] != 0.0)
                x += w[Eigen::Index(j)] * (rot[j] * base - base + off[j]);
        return global.apply(x);
    }
};

inline Skinner build_skinner(const SkinnedModel& m, const PoseState& pose) {
    const FkResult fk = forward_kinematics(m, pose);
    Skinner s;
    s.global = pose.global;
    const int J = m.joint_count();
    s.rot.resize(J);
    s.off.resize(J);
    s.shape_shift.resize(J);
    for (int j = 0; j < J; ++j) {
        s.rot[j] = fk.world_rot[j];
        s.off[j] = fk.world_pos[j] - fk.world_rot[j] * fk.joints_rest.row(j).transpose();
        s.shape_shift[j] = (fk.joints_rest.row(j) - m.joint_rest.row(j)).transpose();
    }
    return s;
}

/// Pose-corrective feature: row-major vec(R_local_j - I) over non-root
/// joints, length 9(J-1).
inline Eigen::VectorXd pose_feature(const std::vector<Rot3>& locals) {
    Eigen::VectorXd f(9 * (int(locals.size()) - 1));
    for (std::size_t j = 1; j < locals.size(); ++j) {
        const Mat3 D = locals[j] - Mat3::Identity();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) f[9 * (Eigen::Index(j) - 1) + 3 * r + c] = D(r, c);
    }
    return f;
}

/// Full skinning: blendshapes, forward kinematics, LBS, global transform.
inline Eigen::MatrixXd skin(const SkinnedModel& m, const PoseState& pose) {
    if (pose.expression.size() != m.expression_dim())
        throw std::invalid_argument("pose: expression size mismatch");
    const int V = m.vertex_count();
    const FkResult fk = forward_kinematics(m, pose);

    Eigen::VectorXd flat = Eigen::VectorXd::Zero(3 * V);
    if (pose.shape.size() > 0) flat += m.shape_basis * pose.shape;
    if (pose.expression.size() > 0) flat += m.expression_basis * pose.expression;
    if (m.pose_basis.size() > 0) flat += m.pose_basis * pose_feature(fk.locals);
    Eigen::MatrixXd tp = m.template_vertices;
    for (int v = 0; v < V; ++v) tp.row(v) += flat.segment<3>(3 * v).transpose();

    Eigen::MatrixXd out = tp;
    for (int j = 0; j < m.joint_count(); ++j) {
        const Rot3& R = fk.world_rot[j];
        const Vec3 q = fk.world_pos[j] - R * fk.joints_rest.row(j).transpose();
        out.noalias() +=
            m.lbs_weights.col(j).asDiagonal() *
            (((tp * R.transpose() - tp).rowwise() + q.transpose()));
    }
    out = (out * pose.global.rotation.transpose()).rowwise() +
          pose.global.translation.transpose();
    return out;
}

/// Landmark-anchored vertex positions under a pose, m x 3.
inline Eigen::MatrixXd anchored_landmarks(const SkinnedModel& m, const PoseState& pose) {
    const Skinner s = build_skinner(m, pose);
    Eigen::MatrixXd out(m.anchors.size(), 3);
    for (std::size_t k = 0; k < m.anchors.size(); ++k)
        out.row(Eigen::Index(k)) =
            s.apply(m.anchors[k].rest_position, m.anchors[k].weights).transpose();
    return out;
}

// --- landmark frames and bone vectors -----------------------------------

struct LandmarkFrame {
    double timestamp = 0.0;
    Eigen::MatrixXd points;          // m x 3
    std::vector<std::uint8_t> valid; // m
};

struct BoneVectors {
    // indexed by child landmark k; entry 0 (the root) is always invalid
    std::vector<Vec3> vec;
    std::vector<std::uint8_t> valid;
};

inline BoneVectors bone_vectors(const Eigen::MatrixXd& points,
                                const std::vector<std::uint8_t>& valid,
                                const BodyTopology& topo) {
    if (points.rows() != topo.landmark_count || int(valid.size()) != topo.landmark_count)
        throw std::invalid_argument("bone_vectors: size mismatch");
    BoneVectors b;
    b.vec.assign(std::size_t(topo.landmark_count), Vec3::Zero());
    b.valid.assign(std::size_t(topo.landmark_count), 0);
    for (int k = 0; k < topo.landmark_count; ++k) {
        const int p = topo.landmark_parent[k];
        if (p < 0) continue;
        if (valid[k] && valid[p]) {
            b.vec[k] = (points.row(k) - points.row(p)).transpose();
            b.valid[k] = 1;
        }
    }
    return b;
}

inline BoneVectors bone_vectors(const LandmarkFrame& f, const BodyTopology& topo) {
    return bone_vectors(f.points, f.valid, topo);
}

// --- anchor fitting ------------------------------------------------------

/// Fit a new anchored vertex from (pose, observed point) pairs. Weights are
/// frozen to those of the template vertex nearest the first observation;
/// the rest position solves the (3x3) regularized normal equations, since
/// skinning is affine in the rest position at fixed pose.
inline AnchoredVertex fit_anchor(const SkinnedModel& m,
                                 const std::vector<std::pair<PoseState, Vec3>>& samples,
                                 double lambda = 1e-6) {
    if (samples.empty()) throw std::invalid_argument("fit_anchor: no samples");

    const Eigen::MatrixXd first = skin(m, samples[0].first);
    int nearest = 0;
    double best = std::numeric_limits<double>::infinity();
    for (int v = 0; v < m.vertex_count(); ++v) {
        const double d = (first.row(v).transpose() - samples[0].second).squaredNorm();
        if (d < best) { best = d; nearest = v; }
    }
    const Eigen::VectorXd w = m.lbs_weights.row(nearest).transpose();
    const Vec3 vi = m.template_vertices.row(nearest).transpose();

    Mat3 AtA = lambda * Mat3::Identity();
    Vec3 Atb = lambda * vi;
    for (const auto& [pose, obs] : samples) {
        const Skinner s = build_skinner(m, pose);
        Mat3 M = Mat3::Identity();
        Vec3 c = Vec3::Zero(), d = Vec3::Zero();
        for (int j = 0; j < m.joint_count(); ++j) {
            if (w[j] == 0.0) continue;
            M += w[j] * (s.rot[j] - Mat3::Identity());
            c += w[j] * s.shape_shift[std::size_t(j)];
            d += w[j] * s.off[j];
        }
        const Mat3 A = s.global.rotation * M;
        const Vec3 b = s.global.rotation * (M * c + d) + s.global.translation;
        AtA += A.transpose() * A;
        Atb += A.transpose() * (obs - b);
    }
    AnchoredVertex a;
    a.rest_position = AtA.ldlt().solve(Atb);
    a.weights = w;
    return a;
}

// --- procedural desk-scale model -----------------------------------------

struct DeskConfig {
    int joint_count = 24;   // fixed tree; validated
    int rings_per_bone = 4;
    int ring_vertices = 6;
    double weight_falloff = 0.04; // meters
    bool one_hot_weights = false;
    int shape_dim = 10;
    int expression_dim = 10;
    bool random_pose_basis = false;
    double pose_basis_scale = 0.002;
    std::uint64_t seed = 0;
};

namespace detail {

struct JointSpec {
    const char* name;
    int parent;
    double x, y, z;
};

inline const std::vector<JointSpec>& desk_joints() {
    static const std::vector<JointSpec> j = {
        {"pelvis", -1, 0.0, 0.30, 0.0},    {"spine1", 0, 0.0, 0.36, 0.0},
        {"chest", 1, 0.0, 0.42, 0.0},      {"neck", 2, 0.0, 0.48, 0.0},
        {"head", 3, 0.0, 0.52, 0.0},       {"clav_l", 2, 0.025, 0.465, 0.0},
        {"shoulder_l", 5, 0.07, 0.45, 0.0}, {"elbow_l", 6, 0.15, 0.45, 0.0},
        {"wrist_l", 7, 0.22, 0.45, 0.0},   {"hand_l", 8, 0.255, 0.45, 0.0},
        {"clav_r", 2, -0.025, 0.465, 0.0}, {"shoulder_r", 10, -0.07, 0.45, 0.0},
        {"elbow_r", 11, -0.15, 0.45, 0.0}, {"wrist_r", 12, -0.22, 0.45, 0.0},
        {"hand_r", 13, -0.255, 0.45, 0.0}, {"hip_l", 0, 0.045, 0.28, 0.0},
        {"knee_l", 15, 0.045, 0.15, 0.0},  {"ankle_l", 16, 0.045, 0.03, 0.0},
        {"foot_l", 17, 0.045, 0.005, 0.045}, {"hip_r", 0, -0.045, 0.28, 0.0},
        {"knee_r", 19, -0.045, 0.15, 0.0}, {"ankle_r", 20, -0.045, 0.03, 0.0},
        {"foot_r", 21, -0.045, 0.005, 0.045}, {"jaw", 4, 0.0, 0.50, 0.02},
    };
    return j;
}

struct LandmarkSpec {
    const char* name;
    int parent;         // landmark tree parent
    int joint;          // desk joint it rides on
    double ox, oy, oz;  // rest offset from that joint
};

// 32-landmark depth-sensor tree (pelvis-rooted, clavicle chains, head fan).
inline const std::vector<LandmarkSpec>& desk_landmarks() {
    static const std::vector<LandmarkSpec> l = {
        {"pelvis", -1, 0, 0, 0, 0},
        {"spine_navel", 0, 1, 0, 0, 0},
        {"spine_chest", 1, 2, 0, 0, 0},
        {"neck", 2, 3, 0, 0, 0},
        {"clavicle_left", 2, 5, 0, 0, 0},
        {"shoulder_left", 4, 6, 0, 0, 0},
        {"elbow_left", 5, 7, 0, 0, 0},
        {"wrist_left", 6, 8, 0, 0, 0},
        {"hand_left", 7, 9, 0, 0, 0},
        {"handtip_left", 8, 9, 0.02, 0, 0},
        {"thumb_left", 7, 8, 0.015, 0, 0.015},
        {"clavicle_right", 2, 10, 0, 0, 0},
        {"shoulder_right", 11, 11, 0, 0, 0},
        {"elbow_right", 12, 12, 0, 0, 0},
        {"wrist_right", 13, 13, 0, 0, 0},
        {"hand_right", 14, 14, 0, 0, 0},
        {"handtip_right", 15, 14, -0.02, 0, 0},
        {"thumb_right", 14, 13, -0.015, 0, 0.015},
        {"hip_left", 0, 15, 0, 0, 0},
        {"knee_left", 18, 16, 0, 0, 0},
        {"ankle_left", 19, 17, 0, 0, 0},
        {"foot_left", 20, 18, 0, 0, 0},
        {"hip_right", 0, 19, 0, 0, 0},
        {"knee_right", 22, 20, 0, 0, 0},
        {"ankle_right", 23, 21, 0, 0, 0},
        {"foot_right", 24, 22, 0, 0, 0},
        {"head", 3, 4, 0, 0, 0},
        {"nose", 26, 4, 0, 0.015, 0.025},
        {"eye_left", 26, 4, 0.012, 0.015, 0.02},
        {"ear_left", 26, 4, 0.03, 0, 0},
        {"eye_right", 26, 4, -0.012, 0.015, 0.02},
        {"ear_right", 26, 4, -0.03, 0, 0},
    };
    return l;
}

// bones steered by the alignment heuristic: neck, upper arms, forearms,
// hands, thighs, shins, feet (child landmark indices)
inline const std::vector<int>& desk_bone_set() {
    static const std::vector<int> d = {3, 6, 7, 8, 13, 14, 15, 19, 20, 21, 23, 24, 25};
    return d;
}

inline double desk_bone_radius(const std::string& child_name) {
    if (child_name == "spine1" || child_name == "chest") return 0.035;
    if (child_name == "neck") return 0.015;
    if (child_name == "head") return 0.03;
    if (child_name == "jaw") return 0.008;
    if (child_name.rfind("clav", 0) == 0) return 0.01;
    if (child_name.rfind("hip", 0) == 0) return 0.02;
    if (child_name.rfind("knee", 0) == 0 || child_name.rfind("shoulder", 0) == 0 ||
        child_name.rfind("elbow", 0) == 0)
        return 0.014;
    return 0.011;
}

} // namespace detail

inline SkinnedModel make_desk_model(const DeskConfig& cfg = {}) {
    const auto& js = detail::desk_joints();
    if (cfg.joint_count != int(js.size()))
        throw std::invalid_argument("desk model: joint_count must be 24");
    if (cfg.rings_per_bone < 1 || cfg.ring_vertices < 3 || cfg.weight_falloff <= 0 ||
        cfg.shape_dim < 0 || cfg.expression_dim < 0)
        throw std::invalid_argument("desk model: bad config");

    SkinnedModel m;
    const int J = int(js.size());
    m.topology.joint_count = J;
    m.joint_rest.resize(J, 3);
    for (int j = 0; j < J; ++j) {
        m.topology.joint_parent.push_back(js[j].parent);
        m.topology.joint_names.emplace_back(js[j].name);
        m.joint_rest.row(j) << js[j].x, js[j].y, js[j].z;
    }
    m.jaw_joint = 23;
    m.hand_joints = {{9}, {14}};

    // vertices: rings along every bone, plus a head cap
    std::vector<Vec3> verts;
    std::vector<Vec3> radial; // unit offset from the bone axis, for thickness
    for (int j = 1; j < J; ++j) {
        const Vec3 a = m.joint_rest.row(js[j].parent).transpose();
        const Vec3 b = m.joint_rest.row(j).transpose();
        const Vec3 d = b - a;
        int kmin = 0;
        d.cwiseAbs().minCoeff(&kmin);
        const Vec3 e1 = d.cross(Vec3::Unit(kmin)).normalized();
        const Vec3 e2 = d.normalized().cross(e1);
        const double r = detail::desk_bone_radius(js[j].name);
        for (int ri = 0; ri < cfg.rings_per_bone; ++ri) {
            const double t = (ri + 1.0) / (cfg.rings_per_bone + 1.0);
            for (int vi = 0; vi < cfg.ring_vertices; ++vi) {
                const double phi = 2.0 * M_PI * vi / cfg.ring_vertices;
                const Vec3 rad = std::cos(phi) * e1 + std::sin(phi) * e2;
                verts.push_back(a + t * d + r * rad);
                radial.push_back(rad);
            }
        }
    }
    { // head cap: spiral of points on a sphere around the head joint
        const Vec3 c = m.joint_rest.row(4).transpose() + Vec3(0, 0.015, 0);
        const int n = 48;
        const double ga = M_PI * (3.0 - std::sqrt(5.0));
        for (int i = 0; i < n; ++i) {
            const double y = 1.0 - 2.0 * (i + 0.5) / n;
            const double rr = std::sqrt(1.0 - y * y);
            const Vec3 dir(std::cos(ga * i) * rr, y, std::sin(ga * i) * rr);
            verts.push_back(c + 0.032 * dir);
            radial.push_back(dir);
        }
    }
    const int V = int(verts.size());
    m.template_vertices.resize(V, 3);
    for (int v = 0; v < V; ++v) m.template_vertices.row(v) = verts[v].transpose();

    // distance-based weights over the nearest joints
    auto weight_row = [&](const Vec3& p) {
        Eigen::VectorXd w = Eigen::VectorXd::Zero(J);
        Eigen::VectorXd d2(J);
        for (int j = 0; j < J; ++j)
            d2[j] = (p - m.joint_rest.row(j).transpose()).squaredNorm();
        int nearest = 0;
        d2.minCoeff(&nearest);
        if (cfg.one_hot_weights) {
            w[nearest] = 1.0;
            return w;
        }
        std::vector<int> order(static_cast<std::size_t>(J));
        for (int j = 0; j < J; ++j) order[std::size_t(j)] = j;
        std::partial_sort(order.begin(), order.begin() + 4, order.end(),
                          [&](int a, int b) { return d2[a] < d2[b]; });
        const double s2 = cfg.weight_falloff * cfg.weight_falloff;
        for (int i = 0; i < 4; ++i) w[order[std::size_t(i)]] = std::exp(-d2[order[std::size_t(i)]] / s2);
        w /= w.sum();
        return w;
    };
    m.lbs_weights.resize(V, J);
    for (int v = 0; v < V; ++v) m.lbs_weights.row(v) = weight_row(verts[v]).transpose();

    // shape basis: per-dimension bone-length scalings, accumulated down the
    // tree so joints and (weight-blended) vertices move consistently
    const int B = cfg.shape_dim;
    m.joint_shape_basis = Eigen::MatrixXd::Zero(3 * J, B);
    auto bone_scale = [&](int dim, const std::string& child) -> double {
        auto is = [&](const char* p) { return child.rfind(p, 0) == 0; };
        switch (dim) {
            case 0: return 0.05; // overall size
            case 1: return (is("spine1") || is("chest") || is("neck")) ? 0.08 : 0.0;
            case 2: return (is("elbow") || is("wrist")) ? 0.08 : 0.0; // arm length
            case 3: return (is("knee") || is("ankle")) ? 0.08 : 0.0;  // leg length
            case 4: return (is("clav") || is("shoulder")) ? 0.08 : 0.0;
            case 5: return is("hip") ? 0.08 : 0.0;
            case 6: return (is("neck") || is("head")) ? 0.08 : 0.0;
            case 7: return (is("head") || is("jaw")) ? 0.06 : 0.0;
            case 8: return (is("wrist") || is("ankle")) ? 0.06 : 0.0;
            case 9: return (is("hand") || is("foot")) ? 0.06 : 0.0;
            default: return 0.0;
        }
    };
    for (int dim = 0; dim < B; ++dim) {
        std::vector<Vec3> delta(std::size_t(J), Vec3::Zero());
        for (int j = 0; j < J; ++j) {
            const int p = js[j].parent;
            if (p < 0) continue;
            const Vec3 off = (m.joint_rest.row(j) - m.joint_rest.row(p)).transpose();
            delta[std::size_t(j)] =
                delta[std::size_t(p)] + bone_scale(dim % 10, js[j].name) * off;
        }
        for (int j = 0; j < J; ++j)
            m.joint_shape_basis.block<3, 1>(3 * j, dim) = delta[std::size_t(j)];
    }
    // vertices follow their weighted joints; dim 0 adds radial thickness
    m.shape_basis = Eigen::MatrixXd::Zero(3 * V, B);
    for (int dim = 0; dim < B; ++dim)
        for (int v = 0; v < V; ++v) {
            Vec3 d = Vec3::Zero();
            for (int j = 0; j < J; ++j)
                if (m.lbs_weights(v, j) != 0.0)
                    d += m.lbs_weights(v, j) * m.joint_shape_basis.block<3, 1>(3 * j, dim);
            if (dim == 0) d += 0.004 * radial[std::size_t(v)];
            m.shape_basis.block<3, 1>(3 * v, dim) = d;
        }

    // expression basis: displacements on head/jaw-owned vertices only
    Rng rng(cfg.seed ^ 0xDE5Cull);
    m.expression_basis = Eigen::MatrixXd::Zero(3 * V, cfg.expression_dim);
    for (int v = 0; v < V; ++v) {
        int owner = 0;
        m.lbs_weights.row(v).maxCoeff(&owner);
        if (owner != 4 && owner != m.jaw_joint) continue;
        for (int dim = 0; dim < cfg.expression_dim; ++dim)
            m.expression_basis.block<3, 1>(3 * v, dim) =
                0.004 * Vec3(rng.normal(), rng.normal(), rng.normal());
    }

    if (cfg.random_pose_basis) {
        m.pose_basis.resize(3 * V, 9 * (J - 1));
        for (Eigen::Index i = 0; i < m.pose_basis.size(); ++i)
            m.pose_basis.data()[i] = cfg.pose_basis_scale * rng.normal();
    }

    // landmark anchors
    const auto& ls = detail::desk_landmarks();
    m.topology.landmark_count = int(ls.size());
    for (const auto& l : ls) {
        m.topology.landmark_parent.push_back(l.parent);
        m.topology.landmark_names.emplace_back(l.name);
        m.topology.dominant_joint.push_back(l.joint);
        AnchoredVertex a;
        a.rest_position = m.joint_rest.row(l.joint).transpose() + Vec3(l.ox, l.oy, l.oz);
        a.weights = weight_row(a.rest_position);
        m.anchors.push_back(std::move(a));
    }
    m.topology.bone_set = detail::desk_bone_set();
    m.topology.lm_pelvis = 0;
    m.topology.lm_chest = 2;
    m.topology.lm_shoulder_l = 5;
    m.topology.lm_shoulder_r = 12;

    m.topology.validate();
    for (int k = 0; k < m.topology.landmark_count; ++k) {
        int arg = 0;
        m.anchors[std::size_t(k)].weights.maxCoeff(&arg);
        if (arg != m.topology.dominant_joint[std::size_t(k)])
            throw std::logic_error("desk model: anchor weight argmax mismatch");
    }
    for (int v = 0; v < V; ++v) {
        if (std::abs(m.lbs_weights.row(v).sum() - 1.0) > 1e-9 ||
            m.lbs_weights.row(v).minCoeff() < 0)
            throw std::logic_error("desk model: bad weight row");
    }
    return m;
}

// --- serialization --------------------------------------------------------

inline void save_model(const SkinnedModel& m, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "body_model";
    meta["joint_count"] = m.topology.joint_count;
    meta["joint_parent"] = m.topology.joint_parent;
    meta["joint_names"] = m.topology.joint_names;
    meta["landmark_count"] = m.topology.landmark_count;
    meta["landmark_parent"] = m.topology.landmark_parent;
    meta["landmark_names"] = m.topology.landmark_names;
    meta["dominant_joint"] = m.topology.dominant_joint;
    meta["bone_set"] = m.topology.bone_set;
    meta["global_landmarks"] = {m.topology.lm_pelvis, m.topology.lm_chest,
                                m.topology.lm_shoulder_l, m.topology.lm_shoulder_r};
    meta["hand_joints"] = m.hand_joints;
    meta["jaw_joint"] = m.jaw_joint;

    auto flat = [](const Eigen::MatrixXd& a) {
        std::vector<double> v(std::size_t(a.size()));
        Eigen::Map<Eigen::MatrixXd>(v.data(), a.rows(), a.cols()) = a;
        return v;
    };
    ContainerWriter w(meta);
    auto add = [&](const char* name, const Eigen::MatrixXd& a) {
        w.add(name, {std::size_t(a.rows()), std::size_t(a.cols())}, flat(a), "f4");
    };
    add("template_vertices", m.template_vertices);
    add("lbs_weights", m.lbs_weights);
    add("shape_basis", m.shape_basis);
    add("expression_basis", m.expression_basis);
    add("pose_basis", m.pose_basis);
    add("joint_rest", m.joint_rest);
    add("joint_shape_basis", m.joint_shape_basis);
    Eigen::MatrixXd ar(m.anchors.size(), 3), aw(m.anchors.size(), m.topology.joint_count);
    for (std::size_t k = 0; k < m.anchors.size(); ++k) {
        ar.row(Eigen::Index(k)) = m.anchors[k].rest_position.transpose();
        aw.row(Eigen::Index(k)) = m.anchors[k].weights.transpose();
    }
    add("anchor_rest", ar);
    add("anchor_weights", aw);
    w.write(path);
}

inline SkinnedModel load_model(const std::string& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "body_model")
        throw std::runtime_error("load_model: not a body model file");
    SkinnedModel m;
    m.topology.joint_count = c.meta.at("joint_count");
    m.topology.joint_parent = c.meta.at("joint_parent").get<std::vector<int>>();
    m.topology.joint_names = c.meta.at("joint_names").get<std::vector<std::string>>();
    m.topology.landmark_count = c.meta.at("landmark_count");
    m.topology.landmark_parent = c.meta.at("landmark_parent").get<std::vector<int>>();
    m.topology.landmark_names = c.meta.at("landmark_names").get<std::vector<std::string>>();
    m.topology.dominant_joint = c.meta.at("dominant_joint").get<std::vector<int>>();
    m.topology.bone_set = c.meta.at("bone_set").get<std::vector<int>>();
    const auto gl = c.meta.at("global_landmarks").get<std::vector<int>>();
    m.topology.lm_pelvis = gl.at(0);
    m.topology.lm_chest = gl.at(1);
    m.topology.lm_shoulder_l = gl.at(2);
    m.topology.lm_shoulder_r = gl.at(3);
    m.hand_joints = c.meta.at("hand_joints").get<std::vector<std::vector<int>>>();
    m.jaw_joint = c.meta.at("jaw_joint");

    auto mat = [&](const char* name) {
        const auto& shape = c.shapes.at(name);
        const auto& data = c.at(name);
        Eigen::MatrixXd a(shape[0], shape[1]);
        if (a.size() > 0)
            a = Eigen::Map<const Eigen::MatrixXd>(data.data(), a.rows(), a.cols());
        return a;
    };
    m.template_vertices = mat("template_vertices");
    m.lbs_weights = mat("lbs_weights");
    m.shape_basis = mat("shape_basis");
    m.expression_basis = mat("expression_basis");
    m.pose_basis = mat("pose_basis");
    m.joint_rest = mat("joint_rest");
    m.joint_shape_basis = mat("joint_shape_basis");
    const Eigen::MatrixXd ar = mat("anchor_rest");
    const Eigen::MatrixXd aw = mat("anchor_weights");
    for (Eigen::Index k = 0; k < ar.rows(); ++k) {
        AnchoredVertex a;
        a.rest_position = ar.row(k).transpose();
        a.weights = aw.row(k).transpose();
        m.anchors.push_back(std::move(a));
    }
    m.topology.validate();
    return m;
}

} // namespace kp
