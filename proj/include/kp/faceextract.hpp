#pragma once

// Landmark-to-face regression: 468 2.5D landmarks normalized against their
// rotated bounding box feed a seven-block Linear-BatchNorm-ReLU MLP that
// compresses to a 32-dim feature, from which parallel linear heads predict
// the jaw rotation (6D) and the expression coefficients. The loss combines
// expression MSE with a mouth-weighted MPJPE over 68 keypoints skinned from
// a two-bone (skull + jaw) head rig.

#include <cmath>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include <kp/nn.hpp>
#include <kp/random.hpp>
#include <kp/rotmath.hpp>

namespace kp {

constexpr int kFaceLandmarkCount = 468;
constexpr int kFaceKeypointCount = 68;
constexpr int kMouthBegin = 48;  // mouth region of the 68-keypoint layout
constexpr int kMouthEnd = 68;    // half-open

struct RotatedBox {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;
    double angle = 0.0;  // radians
};

struct FaceLandmarks {
    double timestamp = 0.0;
    Eigen::MatrixXd points;  // 468 x 3: x,y in pixels, z relative
    RotatedBox box;
};

/// Box-rotated, box-scaled landmark coordinates: x and y are expressed in
/// the box frame and divided by its width and height, z is scaled by 1/256.
inline Eigen::MatrixXd normalize_face(const FaceLandmarks& landmarks) {
    if (landmarks.points.rows() != kFaceLandmarkCount || landmarks.points.cols() != 3)
        throw std::invalid_argument("normalize_face: expected 468 x 3 landmarks");
    if (landmarks.box.w <= 0.0 || landmarks.box.h <= 0.0)
        throw std::invalid_argument("normalize_face: zero-size box");
    const double c = std::cos(landmarks.box.angle);
    const double s = std::sin(landmarks.box.angle);
    Eigen::MatrixXd out(kFaceLandmarkCount, 3);
    for (int k = 0; k < kFaceLandmarkCount; ++k) {
        const double dx = landmarks.points(k, 0) - landmarks.box.cx;
        const double dy = landmarks.points(k, 1) - landmarks.box.cy;
        out(k, 0) = (c * dx + s * dy) / landmarks.box.w;
        out(k, 1) = (-s * dx + c * dy) / landmarks.box.h;
        out(k, 2) = landmarks.points(k, 2) / 256.0;
    }
    return out;
}

struct FacePrediction {
    Rot3 jaw_pose = Rot3::Identity();
    Eigen::VectorXd expression;
};

/// Two-bone head rig: keypoints rest on the skull and blend toward a rigid
/// jaw transform about a fixed pivot; the expression basis displaces the
/// rest positions before skinning.
struct HeadModel {
    Eigen::MatrixXd keypoints_rest;    // 68 x 3, meters
    Eigen::VectorXd jaw_weights;       // 68, in [0,1]
    Vec3 jaw_pivot = Vec3::Zero();
    Eigen::MatrixXd expression_basis;  // 3*68 x |psi|

    int expression_dim() const { return int(expression_basis.cols()); }

    void validate() const {
        if (keypoints_rest.rows() != kFaceKeypointCount || keypoints_rest.cols() != 3)
            throw std::invalid_argument("head model: keypoints_rest must be 68 x 3");
        if (jaw_weights.size() != kFaceKeypointCount)
            throw std::invalid_argument("head model: jaw_weights must have 68 entries");
        if (expression_basis.rows() != 3 * kFaceKeypointCount)
            throw std::invalid_argument("head model: basis rows must be 3*68");
        for (int k = 0; k < kFaceKeypointCount; ++k)
            if (jaw_weights[k] < 0.0 || jaw_weights[k] > 1.0)
                throw std::invalid_argument("head model: jaw weight outside [0,1]");
    }
};

/// Deterministic desk-scale head: an oval jawline, brow/eye/nose arcs, and a
/// mouth ellipse, with jaw weights concentrated on the mouth and chin and an
/// expression basis that displaces mouth keypoints the most.
inline HeadModel make_desk_head(int expression_dim = 10, std::uint64_t seed = 0) {
    if (expression_dim < 0)
        throw std::invalid_argument("make_desk_head: negative expression dim");
    HeadModel head;
    head.keypoints_rest.resize(kFaceKeypointCount, 3);
    head.jaw_weights.resize(kFaceKeypointCount);
    auto put = [&](int k, double x, double y, double z, double w) {
        head.keypoints_rest.row(k) << x, y, z;
        head.jaw_weights[k] = w;
    };
    for (int i = 0; i < 17; ++i) {  // jawline, chin at i = 8
        const double a = M_PI * (1.0 - double(i) / 16.0);
        const double chin = std::exp(-0.5 * std::pow((i - 8.0) / 3.0, 2.0));
        put(i, 0.075 * std::cos(a), -0.02 - 0.055 * std::sin(a), 0.01, 0.55 * chin);
    }
    for (int i = 0; i < 10; ++i)  // brows
        put(17 + i, -0.05 + 0.011 * i, 0.045, 0.015, 0.0);
    for (int i = 0; i < 9; ++i)  // nose bridge and base
        put(27 + i, 0.004 * (i - 4), 0.03 - 0.008 * i, 0.03, 0.05);
    for (int i = 0; i < 12; ++i) {  // eyes
        const double a = 2.0 * M_PI * double(i % 6) / 6.0;
        const double cx = i < 6 ? -0.032 : 0.032;
        put(36 + i, cx + 0.014 * std::cos(a), 0.028 + 0.007 * std::sin(a), 0.02, 0.0);
    }
    for (int i = 0; i < 20; ++i) {  // mouth, lower half follows the jaw
        const double a = 2.0 * M_PI * double(i) / 20.0;
        const double sa = std::sin(a);
        put(kMouthBegin + i, 0.024 * std::cos(a), -0.038 + 0.011 * sa, 0.022,
            sa < 0.0 ? 0.85 : 0.35);
    }
    head.jaw_pivot = Vec3(0.0, -0.02, -0.05);
    head.expression_basis.resize(3 * kFaceKeypointCount, expression_dim);
    Rng rng(seed ^ 0xFACEBA5Eull);
    for (int k = 0; k < kFaceKeypointCount; ++k) {
        const double scale = (k >= kMouthBegin && k < kMouthEnd) ? 0.02 : 0.006;
        for (int r = 0; r < 3; ++r)
            for (int e = 0; e < expression_dim; ++e)
                head.expression_basis(3 * k + r, e) = scale * rng.normal();
    }
    head.validate();
    return head;
}

/// Keypoints under a jaw rotation and expression coefficients: rest plus the
/// expression displacement, blended between the skull frame and the rigid
/// jaw transform about the pivot.
inline Eigen::MatrixXd head_keypoints(const HeadModel& head, const Rot3& jaw,
                                      const Eigen::VectorXd& psi) {
    head.validate();
    if (psi.size() != head.expression_dim())
        throw std::invalid_argument("head_keypoints: expression size mismatch");
    const Eigen::VectorXd disp = head.expression_basis * psi;
    Eigen::MatrixXd out(kFaceKeypointCount, 3);
    for (int k = 0; k < kFaceKeypointCount; ++k) {
        const Vec3 base = Vec3(head.keypoints_rest.row(k)) + disp.segment<3>(3 * k);
        const Vec3 moved = head.jaw_pivot + jaw * (base - head.jaw_pivot);
        out.row(k) =
            ((1.0 - head.jaw_weights[k]) * base + head.jaw_weights[k] * moved).transpose();
    }
    return out;
}

struct FaceLossConfig {
    double lambda_keypoints = 1.0;  // weight of the keypoint term against the MSE
    double mouth_weight = 3.0;      // per-keypoint weight on the mouth region
};

/// Expression MSE plus the keypoint-count-normalized weighted MPJPE between
/// the skinned keypoints of the two predictions.
inline double face_loss(const FacePrediction& pred, const FacePrediction& target,
                        const HeadModel& head, const FaceLossConfig& cfg = {}) {
    if (pred.expression.size() != target.expression.size() ||
        pred.expression.size() != head.expression_dim())
        throw std::invalid_argument("face_loss: expression size mismatch");
    const double mse =
        (pred.expression - target.expression).squaredNorm() / double(head.expression_dim());
    const Eigen::MatrixXd xp = head_keypoints(head, pred.jaw_pose, pred.expression);
    const Eigen::MatrixXd xt = head_keypoints(head, target.jaw_pose, target.expression);
    double mpjpe = 0.0;
    for (int k = 0; k < kFaceKeypointCount; ++k) {
        const double w = (k >= kMouthBegin && k < kMouthEnd) ? cfg.mouth_weight : 1.0;
        mpjpe += w * (xp.row(k) - xt.row(k)).norm();
    }
    mpjpe /= double(kFaceKeypointCount);
    return mse + cfg.lambda_keypoints * mpjpe;
}

/// Loss and gradient at the raw network output [jaw 6D | psi] against the
/// target expression and precomputed target keypoints.
inline double face_output_loss(const Eigen::RowVectorXd& raw,
                               const Eigen::MatrixXd& target_keypoints,
                               const Eigen::VectorXd& target_psi, const HeadModel& head,
                               const FaceLossConfig& cfg,
                               Eigen::RowVectorXd* grad = nullptr) {
    const int E = head.expression_dim();
    if (raw.size() != 6 + E)
        throw std::invalid_argument("face_output_loss: raw width mismatch");
    if (target_keypoints.rows() != kFaceKeypointCount || target_psi.size() != E)
        throw std::invalid_argument("face_output_loss: target size mismatch");
    const Vec3 a = raw.segment<3>(0).transpose();
    const Vec3 b = raw.segment<3>(3).transpose();
    const Rot3 R = rot_from_6d(a, b);
    const Eigen::VectorXd psi = raw.tail(E).transpose();

    const Eigen::VectorXd disp = head.expression_basis * psi;
    double loss = (psi - target_psi).squaredNorm() / double(E);
    Eigen::VectorXd gpsi = 2.0 * (psi - target_psi) / double(E);
    Mat3 dR = Mat3::Zero();
    for (int k = 0; k < kFaceKeypointCount; ++k) {
        const double wj = head.jaw_weights[k];
        const Vec3 base = Vec3(head.keypoints_rest.row(k)) + disp.segment<3>(3 * k);
        const Vec3 arm = base - head.jaw_pivot;
        const Vec3 x = (1.0 - wj) * base + wj * (head.jaw_pivot + R * arm);
        const Vec3 v = x - Vec3(target_keypoints.row(k));
        const double n = v.norm();
        const double wk = (k >= kMouthBegin && k < kMouthEnd) ? cfg.mouth_weight : 1.0;
        loss += cfg.lambda_keypoints * wk * n / double(kFaceKeypointCount);
        if (!grad || n == 0.0) continue;
        const Vec3 gx = (cfg.lambda_keypoints * wk / (double(kFaceKeypointCount) * n)) * v;
        dR += wj * gx * arm.transpose();
        const Vec3 gbase = (1.0 - wj) * gx + wj * (R.transpose() * gx);
        gpsi += head.expression_basis.middleRows(3 * k, 3).transpose() * gbase;
    }
    if (grad) {
        Vec3 da, db;
        rot_from_6d_backward(a, b, dR, da, db);
        grad->resize(6 + E);
        grad->segment<3>(0) = da.transpose();
        grad->segment<3>(3) = db.transpose();
        grad->tail(E) = gpsi.transpose();
    }
    return loss;
}

/// Seven Linear-BatchNorm-ReLU blocks narrowing to a 32-dim feature, then a
/// final linear layer whose first six rows are the jaw 6D head and whose
/// remaining rows are the expression head.
inline Network build_face_net(int expression_dim, std::uint64_t seed = 0) {
    if (expression_dim < 0)
        throw std::invalid_argument("build_face_net: negative expression dim");
    const int widths[7] = {128, 96, 64, 64, 48, 40, 32};
    Network net;
    Rng rng(seed ^ 0xFACE0001ull);
    int in = 3 * kFaceLandmarkCount;
    for (int i = 0; i < 7; ++i) {
        net.layers.push_back(std::make_unique<Linear>(in, widths[i], rng));
        net.layers.push_back(std::make_unique<BatchNorm1d>(widths[i]));
        net.layers.push_back(std::make_unique<Relu>(widths[i]));
        in = widths[i];
    }
    net.layers.push_back(std::make_unique<Linear>(in, 6 + expression_dim, rng));
    net.meta = {{"task", "face"}, {"expression_dim", expression_dim}, {"use_z", true}};
    return net;
}

/// Flattened network input row for one frame: normalized landmarks in
/// landmark-major order, with the z channel zeroed when use_z is false.
inline Eigen::VectorXd face_input_row(const FaceLandmarks& landmarks, bool use_z) {
    const Eigen::MatrixXd n = normalize_face(landmarks);
    Eigen::VectorXd row(3 * kFaceLandmarkCount);
    for (int k = 0; k < kFaceLandmarkCount; ++k) {
        row[3 * k + 0] = n(k, 0);
        row[3 * k + 1] = n(k, 1);
        row[3 * k + 2] = use_z ? n(k, 2) : 0.0;
    }
    return row;
}

inline FacePrediction face_predict(Network& net, const FaceLandmarks& landmarks) {
    const int E = net.meta.value("expression_dim", -1);
    if (E < 0) throw std::invalid_argument("face_predict: network is not a face net");
    const bool use_z = net.meta.value("use_z", true);
    net.training = false;
    const Eigen::MatrixXd y = net.forward(face_input_row(landmarks, use_z).transpose());
    if (y.cols() != 6 + E)
        throw std::invalid_argument("face_predict: output width mismatch");
    FacePrediction pred;
    pred.jaw_pose = rot_from_6d(Vec3(y.block<1, 3>(0, 0).transpose()),
                                Vec3(y.block<1, 3>(0, 3).transpose()));
    pred.expression = y.row(0).tail(E).transpose();
    return pred;
}

// --- synthetic data ------------------------------------------------------

/// Fixed linear rig from (jaw axis-angle, expression) to 468 model-space
/// 2.5D landmarks. The jaw loads mainly on x,y and the expression mainly on
/// z, so dropping the z channel discards most of the expression signal.
struct FaceRig {
    Eigen::MatrixXd base;      // 468 x 3
    Eigen::MatrixXd jaw_map;   // 3*468 x 3
    Eigen::MatrixXd expr_map;  // 3*468 x |psi|

    int expression_dim() const { return int(expr_map.cols()); }
};

inline FaceRig make_face_rig(int expression_dim, std::uint64_t seed = 0) {
    if (expression_dim < 0)
        throw std::invalid_argument("make_face_rig: negative expression dim");
    FaceRig rig;
    Rng rng(seed ^ 0xFACE0002ull);
    rig.base.resize(kFaceLandmarkCount, 3);
    for (int k = 0; k < kFaceLandmarkCount; ++k)
        rig.base.row(k) << rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35),
            rng.uniform(-0.12, 0.12);
    rig.jaw_map.resize(3 * kFaceLandmarkCount, 3);
    rig.expr_map.resize(3 * kFaceLandmarkCount, expression_dim);
    for (int k = 0; k < kFaceLandmarkCount; ++k)
        for (int r = 0; r < 3; ++r) {
            const double jaw_scale = r == 2 ? 0.03 : 0.12;
            const double expr_scale = r == 2 ? 0.08 : 0.004;
            for (int c = 0; c < 3; ++c)
                rig.jaw_map(3 * k + r, c) = jaw_scale * rng.normal();
            for (int e = 0; e < expression_dim; ++e)
                rig.expr_map(3 * k + r, e) = expr_scale * rng.normal();
        }
    return rig;
}

struct FaceSample {
    FaceLandmarks landmarks;
    Rot3 jaw = Rot3::Identity();
    Eigen::VectorXd expression;
};

/// Renders ground-truth (jaw, expression) pairs through the rig into pixel
/// landmarks under per-sample random boxes, with Gaussian noise added in
/// normalized coordinates.
inline std::vector<FaceSample> generate_face_dataset(const FaceRig& rig, int count,
                                                     std::uint64_t seed,
                                                     double noise_sigma = 0.005) {
    if (count < 0) throw std::invalid_argument("generate_face_dataset: negative count");
    Rng rng(seed ^ 0xFACE0003ull);
    std::vector<FaceSample> out;
    out.reserve(std::size_t(count));
    for (int i = 0; i < count; ++i) {
        FaceSample s;
        const Vec3 u(rng.uniform(0.0, 0.5), 0.05 * rng.normal(), 0.05 * rng.normal());
        s.jaw = rot_exp(u);
        s.expression.resize(rig.expression_dim());
        for (int e = 0; e < rig.expression_dim(); ++e) s.expression[e] = 0.6 * rng.normal();

        const Eigen::VectorXd offset = rig.jaw_map * u + rig.expr_map * s.expression;
        s.landmarks.timestamp = double(i) / 30.0;
        s.landmarks.box =
            RotatedBox{rng.uniform(100.0, 160.0), rng.uniform(100.0, 160.0),
                       rng.uniform(140.0, 240.0), rng.uniform(140.0, 240.0),
                       rng.uniform(-0.5, 0.5)};
        const double c = std::cos(s.landmarks.box.angle);
        const double sn = std::sin(s.landmarks.box.angle);
        s.landmarks.points.resize(kFaceLandmarkCount, 3);
        for (int k = 0; k < kFaceLandmarkCount; ++k) {
            const double nx = rig.base(k, 0) + offset[3 * k + 0] + noise_sigma * rng.normal();
            const double ny = rig.base(k, 1) + offset[3 * k + 1] + noise_sigma * rng.normal();
            const double nz = rig.base(k, 2) + offset[3 * k + 2] + noise_sigma * rng.normal();
            const double bx = nx * s.landmarks.box.w;
            const double by = ny * s.landmarks.box.h;
            s.landmarks.points(k, 0) = s.landmarks.box.cx + c * bx - sn * by;
            s.landmarks.points(k, 1) = s.landmarks.box.cy + sn * bx + c * by;
            s.landmarks.points(k, 2) = 256.0 * nz;
        }
        out.push_back(std::move(s));
    }
    return out;
}

// --- training -------------------------------------------------------------

struct FaceTrainConfig {
    int epochs = 40;
    int batch = 32;
    double learning_rate = 5e-4;
    bool use_z = true;
    FaceLossConfig loss;
    std::uint64_t seed = 0;
};

struct FaceTrainResult {
    std::vector<double> epoch_loss;
};

/// Adam training on raw-output face losses. The z-channel choice is baked
/// into the network meta so inference matches training.
inline FaceTrainResult train_face(Network& net, const std::vector<FaceSample>& samples,
                                  const HeadModel& head, const FaceTrainConfig& cfg) {
    if (samples.empty()) throw std::invalid_argument("train_face: empty dataset");
    if (cfg.epochs < 1 || cfg.batch < 1)
        throw std::invalid_argument("train_face: bad epoch or batch count");
    const int E = head.expression_dim();
    const int N = int(samples.size());
    const int in_dim = 3 * kFaceLandmarkCount;
    net.meta["use_z"] = cfg.use_z;

    Eigen::MatrixXd X(N, in_dim);
    std::vector<Eigen::MatrixXd> target_kps(static_cast<std::size_t>(N));
    Eigen::MatrixXd target_psi(N, E);
    for (int i = 0; i < N; ++i) {
        const FaceSample& s = samples[std::size_t(i)];
        if (s.expression.size() != E)
            throw std::invalid_argument("train_face: sample expression size mismatch");
        X.row(i) = face_input_row(s.landmarks, cfg.use_z).transpose();
        target_kps[std::size_t(i)] = head_keypoints(head, s.jaw, s.expression);
        target_psi.row(i) = s.expression.transpose();
    }

    Rng order_rng(cfg.seed ^ 0xFACE0004ull);
    net.prepare(cfg.seed ^ 0xFACE0005ull);
    Adam opt(cfg.learning_rate);
    FaceTrainResult result;
    std::vector<std::size_t> idx(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) idx[std::size_t(i)] = std::size_t(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(idx);
        double total = 0.0;
        int batches = 0;
        for (int start = 0; start < N; start += cfg.batch) {
            const int B = std::min(cfg.batch, N - start);
            Eigen::MatrixXd xb(B, in_dim);
            for (int b = 0; b < B; ++b)
                xb.row(b) = X.row(Eigen::Index(idx[std::size_t(start + b)]));
            net.training = true;
            net.zero_grads();
            const Eigen::MatrixXd y = net.forward(xb);
            Eigen::MatrixXd dy(B, 6 + E);
            double batch_loss = 0.0;
            for (int b = 0; b < B; ++b) {
                const std::size_t si = idx[std::size_t(start + b)];
                Eigen::RowVectorXd g;
                batch_loss += face_output_loss(y.row(b), target_kps[si],
                                               target_psi.row(Eigen::Index(si)).transpose(),
                                               head, cfg.loss, &g) /
                              double(B);
                dy.row(b) = g / double(B);
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train_face: non-finite loss at epoch " +
                                         std::to_string(epoch));
            net.backward(dy);
            opt.step(net.params());
            total += batch_loss;
            ++batches;
        }
        result.epoch_loss.push_back(total / double(batches));
    }
    net.training = false;
    net.reset_state();
    return result;
}

struct FaceEval {
    double psi_mse = 0.0;        // expression MSE per coefficient
    double mpjpe_m = 0.0;        // mean keypoint error, meters
    double mouth_mpjpe_m = 0.0;  // mean error over the mouth region, meters
};

/// Held-out metrics of a trained face net against ground-truth samples.
inline FaceEval evaluate_face(Network& net, const std::vector<FaceSample>& samples,
                              const HeadModel& head) {
    if (samples.empty()) throw std::invalid_argument("evaluate_face: empty sample set");
    FaceEval eval;
    for (const FaceSample& s : samples) {
        const FacePrediction pred = face_predict(net, s.landmarks);
        eval.psi_mse +=
            (pred.expression - s.expression).squaredNorm() / double(s.expression.size());
        const Eigen::MatrixXd xp = head_keypoints(head, pred.jaw_pose, pred.expression);
        const Eigen::MatrixXd xt = head_keypoints(head, s.jaw, s.expression);
        for (int k = 0; k < kFaceKeypointCount; ++k) {
            const double e = (xp.row(k) - xt.row(k)).norm();
            eval.mpjpe_m += e / double(kFaceKeypointCount);
            if (k >= kMouthBegin && k < kMouthEnd)
                eval.mouth_mpjpe_m += e / double(kMouthEnd - kMouthBegin);
        }
    }
    eval.psi_mse /= double(samples.size());
    eval.mpjpe_m /= double(samples.size());
    eval.mouth_mpjpe_m /= double(samples.size());
    return eval;
}

// --- face stream files ----------------------------------------------------

/// JSON-lines face stream: one frame per line with fields t, box, pts.
inline void save_face_stream(const std::string& path,
                             const std::vector<FaceLandmarks>& frames) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("face stream: cannot open " + path + " for writing");
    for (const FaceLandmarks& f : frames) {
        if (f.points.rows() != kFaceLandmarkCount || f.points.cols() != 3)
            throw std::invalid_argument("face stream: expected 468 x 3 landmarks");
        nlohmann::json j;
        j["t"] = f.timestamp;
        j["box"] = {{"cx", f.box.cx},
                    {"cy", f.box.cy},
                    {"w", f.box.w},
                    {"h", f.box.h},
                    {"angle", f.box.angle}};
        nlohmann::json pts = nlohmann::json::array();
        for (int k = 0; k < kFaceLandmarkCount; ++k)
            pts.push_back({f.points(k, 0), f.points(k, 1), f.points(k, 2)});
        j["pts"] = std::move(pts);
        out << j.dump() << "\n";
    }
}

inline std::vector<FaceLandmarks> load_face_stream(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("face stream: cannot open " + path);
    std::vector<FaceLandmarks> frames;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        FaceLandmarks f;
        f.timestamp = j.at("t").get<double>();
        const nlohmann::json& box = j.at("box");
        f.box = RotatedBox{box.at("cx").get<double>(), box.at("cy").get<double>(),
                           box.at("w").get<double>(), box.at("h").get<double>(),
                           box.at("angle").get<double>()};
        const nlohmann::json& pts = j.at("pts");
        if (int(pts.size()) != kFaceLandmarkCount)
            throw std::invalid_argument("face stream: expected 468 landmarks per frame");
        f.points.resize(kFaceLandmarkCount, 3);
        for (int k = 0; k < kFaceLandmarkCount; ++k)
            for (int r = 0; r < 3; ++r)
                f.points(k, r) = pts.at(std::size_t(k)).at(std::size_t(r)).get<double>();
        frames.push_back(std::move(f));
    }
    return frames;
}

} // namespace kp
