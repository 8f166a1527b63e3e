#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <kp/faceextract.hpp>
#include <kp/random.hpp>
#include <kp/rotmath.hpp>

#include "helpers.hpp"

namespace {

kp::FaceLandmarks random_landmarks(kp::Rng& rng) {
    kp::FaceLandmarks f;
    f.box = kp::RotatedBox{rng.uniform(80.0, 200.0), rng.uniform(80.0, 200.0),
                           rng.uniform(120.0, 260.0), rng.uniform(120.0, 260.0),
                           rng.uniform(-0.6, 0.6)};
    f.points.resize(kp::kFaceLandmarkCount, 3);
    for (int k = 0; k < kp::kFaceLandmarkCount; ++k)
        f.points.row(k) << f.box.cx + 60.0 * rng.normal(), f.box.cy + 60.0 * rng.normal(),
            40.0 * rng.normal();
    return f;
}

kp::FaceLandmarks render_normalized(const Eigen::MatrixXd& normalized,
                                    const kp::RotatedBox& box) {
    kp::FaceLandmarks f;
    f.box = box;
    f.points.resize(kp::kFaceLandmarkCount, 3);
    const double c = std::cos(box.angle);
    const double s = std::sin(box.angle);
    for (int k = 0; k < kp::kFaceLandmarkCount; ++k) {
        const double bx = normalized(k, 0) * box.w;
        const double by = normalized(k, 1) * box.h;
        f.points(k, 0) = box.cx + c * bx - s * by;
        f.points(k, 1) = box.cy + s * bx + c * by;
        f.points(k, 2) = 256.0 * normalized(k, 2);
    }
    return f;
}

} // namespace

TEST_CASE("landmark normalization maps the box center to the origin") {
    kp::FaceLandmarks f;
    f.box = kp::RotatedBox{120.0, 95.0, 180.0, 210.0, 0.37};
    f.points.resize(kp::kFaceLandmarkCount, 3);
    for (int k = 0; k < kp::kFaceLandmarkCount; ++k)
        f.points.row(k) << f.box.cx, f.box.cy, double(k - 200);
    const Eigen::MatrixXd n = kp::normalize_face(f);
    for (int k = 0; k < kp::kFaceLandmarkCount; ++k) {
        CHECK(n(k, 0) == 0.0);
        CHECK(n(k, 1) == 0.0);
        CHECK(n(k, 2) == double(k - 200) / 256.0);
    }
}

TEST_CASE("landmark normalization is covariant with box scale") {
    kp::Rng rng(301);
    kp::FaceLandmarks f = random_landmarks(rng);
    kp::FaceLandmarks wide = f;
    wide.box.w *= 2.0;
    wide.box.h *= 2.0;
    const Eigen::MatrixXd a = kp::normalize_face(f);
    const Eigen::MatrixXd b = kp::normalize_face(wide);
    for (int k = 0; k < kp::kFaceLandmarkCount; ++k) {
        CHECK(b(k, 0) == Catch::Approx(a(k, 0) / 2.0).margin(1e-12));
        CHECK(b(k, 1) == Catch::Approx(a(k, 1) / 2.0).margin(1e-12));
        CHECK(b(k, 2) == a(k, 2));
    }
}

TEST_CASE("landmark normalization is invariant to a joint image rotation") {
    kp::Rng rng(302);
    kp::FaceLandmarks f = random_landmarks(rng);
    const double phi = 0.83;
    const double c = std::cos(phi);
    const double s = std::sin(phi);
    kp::FaceLandmarks r = f;
    r.box.cx = c * f.box.cx - s * f.box.cy;
    r.box.cy = s * f.box.cx + c * f.box.cy;
    r.box.angle = f.box.angle + phi;
    for (int k = 0; k < kp::kFaceLandmarkCount; ++k) {
        r.points(k, 0) = c * f.points(k, 0) - s * f.points(k, 1);
        r.points(k, 1) = s * f.points(k, 0) + c * f.points(k, 1);
    }
    const Eigen::MatrixXd a = kp::normalize_face(f);
    const Eigen::MatrixXd b = kp::normalize_face(r);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("landmark normalization validates its input") {
    kp::Rng rng(303);
    kp::FaceLandmarks f = random_landmarks(rng);
    SECTION("wrong landmark count") {
        f.points.conservativeResize(100, 3);
        CHECK_THROWS_AS(kp::normalize_face(f), std::invalid_argument);
    }
    SECTION("zero-size box") {
        f.box.w = 0.0;
        CHECK_THROWS_AS(kp::normalize_face(f), std::invalid_argument);
    }
    SECTION("negative box height") {
        f.box.h = -5.0;
        CHECK_THROWS_AS(kp::normalize_face(f), std::invalid_argument);
    }
}

TEST_CASE("desk head is a valid rig with jaw motion focused on the mouth") {
    const kp::HeadModel head = kp::make_desk_head(10, 0);
    CHECK(head.keypoints_rest.rows() == 68);
    CHECK(head.jaw_weights.minCoeff() >= 0.0);
    CHECK(head.jaw_weights.maxCoeff() <= 1.0);
    CHECK(head.expression_basis.rows() == 3 * 68);
    CHECK(head.expression_basis.cols() == 10);

    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(10);
    const Eigen::MatrixXd rest = kp::head_keypoints(head, kp::Rot3::Identity(), zero);
    CHECK((rest - head.keypoints_rest).cwiseAbs().maxCoeff() < 1e-12);

    const kp::Rot3 open = kp::rot_exp(kp::Vec3(0.3, 0.0, 0.0));
    const Eigen::MatrixXd moved = kp::head_keypoints(head, open, zero);
    double mouth = 0.0, brow = 0.0;
    for (int k = kp::kMouthBegin; k < kp::kMouthEnd; ++k)
        mouth += (moved.row(k) - rest.row(k)).norm();
    for (int k = 17; k < 27; ++k) brow += (moved.row(k) - rest.row(k)).norm();
    CHECK(mouth / 20.0 > 1e-3);
    CHECK(brow == 0.0);

    double mouth_basis = 0.0, other_basis = 0.0;
    for (int k = 0; k < 68; ++k) {
        const double m = head.expression_basis.middleRows(3 * k, 3).cwiseAbs().mean();
        (k >= kp::kMouthBegin && k < kp::kMouthEnd ? mouth_basis : other_basis) += m;
    }
    CHECK(mouth_basis / 20.0 > other_basis / 48.0);

    CHECK_THROWS_AS(kp::head_keypoints(head, open, Eigen::VectorXd::Zero(3)),
                    std::invalid_argument);
    CHECK_THROWS_AS(kp::make_desk_head(-1), std::invalid_argument);
}

TEST_CASE("face loss vanishes when prediction equals target") {
    const kp::HeadModel head = kp::make_desk_head(6, 1);
    kp::Rng rng(304);
    kp::FacePrediction p;
    p.jaw_pose = kptest::random_rotation(rng, 0.4);
    p.expression.resize(6);
    for (int e = 0; e < 6; ++e) p.expression[e] = rng.normal();
    CHECK(kp::face_loss(p, p, head) == 0.0);
}

TEST_CASE("unit mouth weight reduces the face loss to its unweighted form") {
    const kp::HeadModel head = kp::make_desk_head(5, 2);
    kp::Rng rng(305);
    kp::FacePrediction p, t;
    p.jaw_pose = kptest::random_rotation(rng, 0.4);
    t.jaw_pose = kptest::random_rotation(rng, 0.4);
    p.expression.resize(5);
    t.expression.resize(5);
    for (int e = 0; e < 5; ++e) {
        p.expression[e] = rng.normal();
        t.expression[e] = rng.normal();
    }
    kp::FaceLossConfig cfg;
    cfg.mouth_weight = 1.0;
    cfg.lambda_keypoints = 0.7;

    const Eigen::MatrixXd xp = kp::head_keypoints(head, p.jaw_pose, p.expression);
    const Eigen::MatrixXd xt = kp::head_keypoints(head, t.jaw_pose, t.expression);
    double mpjpe = 0.0;
    for (int k = 0; k < 68; ++k) mpjpe += (xp.row(k) - xt.row(k)).norm();
    const double expected =
        (p.expression - t.expression).squaredNorm() / 5.0 + 0.7 * mpjpe / 68.0;
    CHECK(kp::face_loss(p, t, head, cfg) == Catch::Approx(expected).epsilon(1e-13));
}

TEST_CASE("triple mouth weight triples the penalty of a mouth-only residual") {
    kp::HeadModel head = kp::make_desk_head(4, 3);
    head.jaw_weights.setZero();
    head.expression_basis.setZero();
    head.expression_basis(3 * 50 + 1, 0) = 0.01;  // psi_0 moves mouth keypoint 50 only

    kp::FacePrediction target;
    target.expression = Eigen::VectorXd::Zero(4);
    kp::FacePrediction pred = target;
    const double delta = 1e-6;
    pred.expression[0] = delta;
    const double mse = delta * delta / 4.0;

    kp::FaceLossConfig weighted;
    kp::FaceLossConfig flat;
    flat.mouth_weight = 1.0;
    const double up_weighted = kp::face_loss(pred, target, head, weighted) - mse;
    const double up_flat = kp::face_loss(pred, target, head, flat) - mse;
    CHECK(up_weighted == Catch::Approx(3.0 * up_flat).epsilon(1e-9));
    CHECK(up_flat == Catch::Approx(0.01 * delta / 68.0).epsilon(1e-9));
}

TEST_CASE("face net has seven hidden blocks feeding a 32-dim shared feature") {
    kp::Network net = kp::build_face_net(10, 0);
    REQUIRE(net.layers.size() == 7 * 3 + 1);
    int linear = 0, batchnorm = 0, relu = 0;
    for (const auto& l : net.layers) {
        const std::string kind = l->kind();
        if (kind == "linear") ++linear;
        if (kind == "batchnorm1d") ++batchnorm;
        if (kind == "relu") ++relu;
    }
    CHECK(linear == 8);
    CHECK(batchnorm == 7);
    CHECK(relu == 7);
    CHECK(net.in_dim() == 3 * 468);
    CHECK(net.layers.back()->in_dim() == 32);
    CHECK(net.out_dim() == 16);
    CHECK(net.meta.at("expression_dim").get<int>() == 10);
    CHECK(net.meta.at("use_z").get<bool>());
}

TEST_CASE("face net parameter count matches the closed form") {
    for (int E : {4, 10}) {
        kp::Network net = kp::build_face_net(E, 1);
        const int widths[7] = {128, 96, 64, 64, 48, 40, 32};
        std::size_t expected = 0;
        int in = 3 * 468;
        for (int w : widths) {
            expected += std::size_t(in) * std::size_t(w) + std::size_t(w);  // linear
            expected += 2 * std::size_t(w);                                 // batchnorm
            in = w;
        }
        expected += std::size_t(32 * (6 + E) + (6 + E));
        CHECK(net.parameter_count() == expected);
    }
}

TEST_CASE("jaw and expression heads read the same feature independently") {
    kp::Network net = kp::build_face_net(8, 4);
    kp::Rng rng(306);
    const kp::FaceLandmarks f = random_landmarks(rng);
    const kp::FacePrediction before = kp::face_predict(net, f);

    auto params = net.params();
    for (auto& p : params)
        if (p.grad && p.value->rows() == 6 + 8 && p.value->cols() == 32)
            p.value->topRows(6).setZero();  // zero the jaw rows of the head layer
    const kp::FacePrediction after = kp::face_predict(net, f);
    CHECK((after.expression - before.expression).cwiseAbs().maxCoeff() == 0.0);
    CHECK((after.jaw_pose - before.jaw_pose).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("face prediction always yields a valid jaw rotation") {
    for (std::uint64_t seed : {7ull, 8ull, 9ull}) {
        kp::Network net = kp::build_face_net(10, seed);
        kp::Rng rng(400 + seed);
        for (int i = 0; i < 3; ++i) {
            const kp::FacePrediction pred = kp::face_predict(net, random_landmarks(rng));
            CHECK(kp::is_rotation(pred.jaw_pose, 1e-9));
            CHECK(pred.expression.size() == 10);
        }
    }
}

TEST_CASE("face inference is deterministic and batch-composition invariant") {
    kp::Network net = kp::build_face_net(6, 11);
    kp::Rng rng(307);
    const kp::FaceLandmarks f1 = random_landmarks(rng);
    const kp::FaceLandmarks f2 = random_landmarks(rng);
    const kp::FacePrediction once = kp::face_predict(net, f1);
    const kp::FacePrediction twice = kp::face_predict(net, f1);
    CHECK((once.jaw_pose - twice.jaw_pose).cwiseAbs().maxCoeff() == 0.0);
    CHECK((once.expression - twice.expression).cwiseAbs().maxCoeff() == 0.0);

    net.training = false;
    Eigen::MatrixXd batch(2, 3 * 468);
    batch.row(0) = kp::face_input_row(f1, true).transpose();
    batch.row(1) = kp::face_input_row(f2, true).transpose();
    const Eigen::MatrixXd joint = net.forward(batch);
    const Eigen::MatrixXd alone1 = net.forward(batch.row(0));
    const Eigen::MatrixXd alone2 = net.forward(batch.row(1));
    CHECK((joint.row(0) - alone1.row(0)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((joint.row(1) - alone2.row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("raw face loss matches the prediction-level loss") {
    const kp::HeadModel head = kp::make_desk_head(5, 6);
    kp::Rng rng(308);
    Eigen::RowVectorXd raw(6 + 5);
    for (int i = 0; i < raw.size(); ++i) raw[i] = 0.7 * rng.normal();
    kp::FacePrediction pred;
    pred.jaw_pose =
        kp::rot_from_6d(raw.segment<3>(0).transpose(), raw.segment<3>(3).transpose());
    pred.expression = raw.tail(5).transpose();

    kp::FacePrediction target;
    target.jaw_pose = kptest::random_rotation(rng, 0.5);
    target.expression.resize(5);
    for (int e = 0; e < 5; ++e) target.expression[e] = rng.normal();
    const Eigen::MatrixXd target_kps =
        kp::head_keypoints(head, target.jaw_pose, target.expression);

    kp::FaceLossConfig cfg;
    const double from_raw =
        kp::face_output_loss(raw, target_kps, target.expression, head, cfg);
    const double from_pred = kp::face_loss(pred, target, head, cfg);
    CHECK(from_raw == Catch::Approx(from_pred).epsilon(1e-13));
}

TEST_CASE("raw face loss gradient matches finite differences") {
    const kp::HeadModel head = kp::make_desk_head(4, 7);
    kp::Rng rng(309);
    kp::FaceLossConfig cfg;
    cfg.lambda_keypoints = 0.8;
    for (int trial = 0; trial < 4; ++trial) {
        Eigen::RowVectorXd raw(6 + 4);
        for (int i = 0; i < raw.size(); ++i) raw[i] = 0.8 * rng.normal();
        Eigen::VectorXd target_psi(4);
        for (int e = 0; e < 4; ++e) target_psi[e] = rng.normal();
        const Eigen::MatrixXd target_kps =
            kp::head_keypoints(head, kptest::random_rotation(rng, 0.5), target_psi);

        Eigen::RowVectorXd grad;
        kp::face_output_loss(raw, target_kps, target_psi, head, cfg, &grad);
        REQUIRE(grad.size() == raw.size());
        const double h = 1e-6;
        for (int i = 0; i < raw.size(); ++i) {
            Eigen::RowVectorXd plus = raw, minus = raw;
            plus[i] += h;
            minus[i] -= h;
            const double fd = (kp::face_output_loss(plus, target_kps, target_psi, head, cfg) -
                               kp::face_output_loss(minus, target_kps, target_psi, head, cfg)) /
                              (2.0 * h);
            const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
            CHECK(std::abs(grad[i] - fd) / scale < 1e-4);
        }
    }
}

TEST_CASE("rendering and normalization are inverse up to the box choice") {
    kp::Rng rng(310);
    Eigen::MatrixXd normalized(kp::kFaceLandmarkCount, 3);
    for (int k = 0; k < kp::kFaceLandmarkCount; ++k)
        normalized.row(k) << 0.4 * rng.normal(), 0.4 * rng.normal(), 0.1 * rng.normal();
    const kp::FaceLandmarks a =
        render_normalized(normalized, kp::RotatedBox{120.0, 110.0, 200.0, 180.0, 0.3});
    const kp::FaceLandmarks b =
        render_normalized(normalized, kp::RotatedBox{90.0, 150.0, 150.0, 230.0, -0.4});
    CHECK((kp::normalize_face(a) - normalized).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((kp::normalize_face(b) - normalized).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((kp::face_input_row(a, true) - kp::face_input_row(b, true)).cwiseAbs().maxCoeff() <
          1e-12);
}

TEST_CASE("face dataset generation is deterministic with valid samples") {
    const kp::FaceRig rig = kp::make_face_rig(6, 0);
    const std::vector<kp::FaceSample> a = kp::generate_face_dataset(rig, 12, 42);
    const std::vector<kp::FaceSample> b = kp::generate_face_dataset(rig, 12, 42);
    REQUIRE(a.size() == 12);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(kp::is_rotation(a[i].jaw, 1e-9));
        CHECK(a[i].expression.size() == 6);
        CHECK((a[i].landmarks.points - b[i].landmarks.points).cwiseAbs().maxCoeff() == 0.0);
        CHECK(a[i].landmarks.box.w > 0.0);
        CHECK_NOTHROW(kp::normalize_face(a[i].landmarks));
    }
    const std::vector<kp::FaceSample> c = kp::generate_face_dataset(rig, 12, 43);
    CHECK((a[0].landmarks.points - c[0].landmarks.points).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("face training reduces the loss and beats predicting zero") {
    const int E = 4;
    const kp::HeadModel head = kp::make_desk_head(E, 0);
    const kp::FaceRig rig = kp::make_face_rig(E, 0);
    const std::vector<kp::FaceSample> train = kp::generate_face_dataset(rig, 320, 50);
    const std::vector<kp::FaceSample> held = kp::generate_face_dataset(rig, 64, 51);

    kp::Network net = kp::build_face_net(E, 12);
    kp::FaceTrainConfig cfg;
    cfg.epochs = 12;
    cfg.batch = 40;
    cfg.learning_rate = 2e-3;
    cfg.seed = 5;
    const kp::FaceTrainResult result = kp::train_face(net, train, head, cfg);
    REQUIRE(int(result.epoch_loss.size()) == cfg.epochs);
    for (double l : result.epoch_loss) CHECK(std::isfinite(l));
    CHECK(result.epoch_loss.back() < result.epoch_loss.front());

    double model_mse = 0.0, zero_mse = 0.0;
    for (const kp::FaceSample& s : held) {
        const kp::FacePrediction pred = kp::face_predict(net, s.landmarks);
        model_mse += (pred.expression - s.expression).squaredNorm() / double(E);
        zero_mse += s.expression.squaredNorm() / double(E);
    }
    CHECK(model_mse < 0.9 * zero_mse);

    kp::Network rerun = kp::build_face_net(E, 12);
    const kp::FaceTrainResult again = kp::train_face(rerun, train, head, cfg);
    for (std::size_t i = 0; i < again.epoch_loss.size(); ++i)
        CHECK(again.epoch_loss[i] == result.epoch_loss[i]);
}

TEST_CASE("face training aborts on non-finite observations") {
    const int E = 3;
    const kp::HeadModel head = kp::make_desk_head(E, 0);
    const kp::FaceRig rig = kp::make_face_rig(E, 0);
    std::vector<kp::FaceSample> samples = kp::generate_face_dataset(rig, 16, 60);
    samples[5].landmarks.points(100, 1) = std::nan("");
    kp::Network net = kp::build_face_net(E, 13);
    kp::FaceTrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch = 8;
    CHECK_THROWS_AS(kp::train_face(net, samples, head, cfg), std::runtime_error);

    CHECK_THROWS_AS(kp::train_face(net, {}, head, cfg), std::invalid_argument);
    kp::FaceTrainConfig bad;
    bad.epochs = 0;
    CHECK_THROWS_AS(kp::train_face(net, kp::generate_face_dataset(rig, 4, 61), head, bad),
                    std::invalid_argument);
}

TEST_CASE("face streams round-trip through the JSON-lines format") {
    kp::Rng rng(311);
    std::vector<kp::FaceLandmarks> frames;
    for (int i = 0; i < 3; ++i) {
        kp::FaceLandmarks f = random_landmarks(rng);
        f.timestamp = 0.5 * i;
        frames.push_back(std::move(f));
    }
    const std::string path = "face_stream_test.jsonl";
    kp::save_face_stream(path, frames);
    const std::vector<kp::FaceLandmarks> loaded = kp::load_face_stream(path);
    REQUIRE(loaded.size() == frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) {
        CHECK(loaded[i].timestamp == frames[i].timestamp);
        CHECK(loaded[i].box.cx == frames[i].box.cx);
        CHECK(loaded[i].box.angle == frames[i].box.angle);
        CHECK((loaded[i].points - frames[i].points).cwiseAbs().maxCoeff() < 1e-12);
    }
    std::remove(path.c_str());

    const std::string bad_path = "face_stream_bad.jsonl";
    {
        std::ofstream out(bad_path);
        out << "{\"t\": 0.0, \"box\": {\"cx\": 1.0, \"cy\": 1.0, \"w\": 2.0, \"h\": 2.0, "
               "\"angle\": 0.0}, \"pts\": [[1.0, 2.0, 3.0]]}\n";
    }
    CHECK_THROWS_AS(kp::load_face_stream(bad_path), std::invalid_argument);
    std::remove(bad_path.c_str());
    CHECK_THROWS_AS(kp::load_face_stream("no_such_face_stream.jsonl"), std::runtime_error);
}
