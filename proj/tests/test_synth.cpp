#include <catch2/catch_amalgamated.hpp>

#include <kp/synth.hpp>

#include <cstdio>
#include <fstream>
#include <set>

#include "helpers.hpp"

using namespace kp;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

MotionSpec still_spec(const SkinnedModel& m, int frames) {
    MotionSpec spec;
    spec.joint_tracks.resize(std::size_t(m.joint_count()));
    spec.joint_limits.assign(std::size_t(m.joint_count()), 0.5);
    spec.shape = Eigen::VectorXd::Zero(m.shape_dim());
    spec.duration = frames / 30.0;
    spec.rate = 30.0;
    return spec;
}

} // namespace

TEST_CASE("zero-amplitude motion keeps anchors at rest") {
    const SkinnedModel m = make_desk_model();
    const SequenceRecord rec = generate_sequence(m, still_spec(m, 10));
    REQUIRE(rec.frames.size() == 10);
    REQUIRE(rec.gt.size() == 10);
    const Eigen::MatrixXd rest = anchored_landmarks(m, default_pose(m));
    for (const auto& f : rec.frames)
        REQUIRE((f.points - rest).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("generated landmarks equal the skinned ground truth") {
    const SkinnedModel m = make_desk_model();
    const MotionSpec spec = random_motion_spec(m, {}, 7);
    const SequenceRecord rec = generate_sequence(m, spec);
    REQUIRE(int(rec.frames.size()) == spec.frame_count());
    for (std::size_t i = 0; i < rec.frames.size(); i += 37) {
        const Eigen::MatrixXd expect = anchored_landmarks(m, rec.gt[i]);
        REQUIRE((rec.frames[i].points - expect).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("generation is bit-identical per seed") {
    const SkinnedModel m = make_desk_model();
    SynthOptions opts;
    opts.duration = 1.0;
    const SequenceRecord a = generate_sequence(m, random_motion_spec(m, opts, 42));
    const SequenceRecord b = generate_sequence(m, random_motion_spec(m, opts, 42));
    REQUIRE(a.frames.size() == b.frames.size());
    for (std::size_t i = 0; i < a.frames.size(); ++i) {
        REQUIRE(a.frames[i].timestamp == b.frames[i].timestamp);
        REQUIRE((a.frames[i].points - b.frames[i].points).cwiseAbs().maxCoeff() == 0.0);
    }
    const SequenceRecord c = generate_sequence(m, random_motion_spec(m, opts, 43));
    REQUIRE((a.frames[5].points - c.frames[5].points).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("generated poses respect joint limits") {
    const SkinnedModel m = make_desk_model();
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const MotionSpec spec = random_motion_spec(m, {}, seed);
        for (std::size_t j = 0; j < spec.joint_tracks.size(); ++j) {
            REQUIRE(spec.joint_tracks[j].amplitude_sum() <= spec.joint_limits[j] + 1e-12);
            for (double t = 0; t < spec.duration; t += 0.21)
                REQUIRE(std::abs(spec.joint_tracks[j].angle(t)) <=
                        spec.joint_limits[j] + 1e-12);
        }
    }
    MotionSpec bad = random_motion_spec(m, {}, 1);
    bad.joint_tracks[3].terms[0].amplitude = 10.0;
    REQUIRE_THROWS_AS(generate_sequence(m, bad), std::invalid_argument);
}

TEST_CASE("one-hot bone lengths are constant along a sequence") {
    DeskConfig cfg;
    cfg.one_hot_weights = true;
    const SkinnedModel m = make_desk_model(cfg);
    SynthOptions opts;
    opts.duration = 2.0;
    const SequenceRecord rec = generate_sequence(m, random_motion_spec(m, opts, 5));
    const BoneVectors first = bone_vectors(rec.frames[0], m.topology);
    for (const auto& f : rec.frames) {
        const BoneVectors b = bone_vectors(f, m.topology);
        for (int k = 1; k < m.topology.landmark_count; ++k)
            REQUIRE(std::abs(b.vec[std::size_t(k)].norm() -
                             first.vec[std::size_t(k)].norm()) < 1e-9);
    }
}

TEST_CASE("corrupt with zero noise is the identity") {
    const SkinnedModel m = make_desk_model();
    SynthOptions opts;
    opts.duration = 1.0;
    const SequenceRecord rec = generate_sequence(m, random_motion_spec(m, opts, 9));
    NoiseModel none;
    none.position_sigma = 0.0;
    none.dropout = 0.0;
    none.time_jitter = 0.0;
    const SequenceRecord out = corrupt(rec, none, 3);
    for (std::size_t i = 0; i < rec.frames.size(); ++i) {
        REQUIRE(out.frames[i].timestamp == rec.frames[i].timestamp);
        REQUIRE((out.frames[i].points - rec.frames[i].points).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(out.frames[i].valid == rec.frames[i].valid);
    }
}

TEST_CASE("corrupt matches its configured statistics") {
    const SkinnedModel m = make_desk_model();
    SynthOptions opts;
    opts.duration = 120.0; // 3600 frames x 32 landmarks > 1e5 slots
    const SequenceRecord rec = generate_sequence(m, random_motion_spec(m, opts, 10));

    NoiseModel noise;
    noise.position_sigma = 0.005;
    noise.dropout = 0.1;
    noise.time_jitter = 0.001;
    const SequenceRecord out = corrupt(rec, noise, 17);

    std::size_t slots = 0, dropped = 0;
    double sq = 0.0;
    std::size_t n = 0;
    double prev = -1.0;
    for (std::size_t i = 0; i < rec.frames.size(); ++i) {
        for (auto v : out.frames[i].valid) {
            ++slots;
            dropped += v == 0;
        }
        const Eigen::MatrixXd d = out.frames[i].points - rec.frames[i].points;
        sq += d.squaredNorm();
        n += std::size_t(d.size());
        REQUIRE(out.frames[i].timestamp > prev);
        prev = out.frames[i].timestamp;
    }
    REQUIRE(slots >= 100000);
    const double rate = double(dropped) / double(slots);
    REQUIRE(std::abs(rate - noise.dropout) <= 0.01);
    const double std_hat = std::sqrt(sq / double(n));
    REQUIRE(std::abs(std_hat - noise.position_sigma) <= 0.03 * noise.position_sigma);

    // ground truth untouched
    for (std::size_t i = 0; i < rec.gt.size(); i += 501)
        REQUIRE((out.gt[i].body_pose[5] - rec.gt[i].body_pose[5]).cwiseAbs().maxCoeff() ==
                0.0);
}

TEST_CASE("stream save and load round-trip bit-exactly") {
    const SkinnedModel m = make_desk_model();
    SynthOptions opts;
    opts.duration = 1.0;
    SequenceRecord rec = generate_sequence(m, random_motion_spec(m, opts, 21), "roundtrip");
    rec = corrupt(rec, NoiseModel{}, 4);

    const std::string p1 = "stream_a.kpstrm", p2 = "stream_b.kpstrm";
    save_record(rec, p1);
    const SequenceRecord r = load_record(p1);
    REQUIRE(r.name == rec.name);
    REQUIRE(r.model_id == rec.model_id);
    REQUIRE(r.rate == rec.rate);
    REQUIRE((r.beta - rec.beta).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(r.frames.size() == rec.frames.size());
    REQUIRE(r.gt.size() == rec.gt.size());
    for (std::size_t i = 0; i < rec.frames.size(); ++i) {
        REQUIRE(r.frames[i].timestamp == rec.frames[i].timestamp);
        REQUIRE((r.frames[i].points - rec.frames[i].points).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(r.frames[i].valid == rec.frames[i].valid);
        for (int j = 0; j < m.joint_count(); ++j)
            REQUIRE((r.gt[i].body_pose[std::size_t(j)] -
                     rec.gt[i].body_pose[std::size_t(j)]).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE((r.gt[i].global.rotation - rec.gt[i].global.rotation).cwiseAbs().maxCoeff() ==
                0.0);
        REQUIRE((r.gt[i].global.translation - rec.gt[i].global.translation).norm() == 0.0);
        REQUIRE((r.gt[i].shape - rec.gt[i].shape).cwiseAbs().maxCoeff() == 0.0);
    }
    save_record(r, p2);
    REQUIRE(slurp(p1) == slurp(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("truncated stream reports a line number") {
    const SkinnedModel m = make_desk_model();
    SynthOptions opts;
    opts.duration = 0.5;
    const SequenceRecord rec = generate_sequence(m, random_motion_spec(m, opts, 30));
    const std::string path = "stream_trunc.kpstrm";
    save_record(rec, path);
    std::string bytes = slurp(path);
    bytes.resize(bytes.size() * 2 / 3); // cut inside a frame line
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << bytes;
    }
    try {
        load_record(path);
        FAIL("expected a parse error");
    } catch (const std::runtime_error& e) {
        REQUIRE(std::string(e.what()).find("stream_trunc.kpstrm:") != std::string::npos);
    }
    std::remove(path.c_str());

    REQUIRE_THROWS_AS(load_record("does_not_exist.kpstrm"), std::runtime_error);
}

TEST_CASE("stream output matches the committed fixture") {
    const SkinnedModel m = make_desk_model();
    SynthOptions opts;
    opts.duration = 0.5;
    const SequenceRecord rec =
        generate_sequence(m, random_motion_spec(m, opts, 0), "golden_seed0");
    const std::string path = "golden_regen.kpstrm";
    save_record(rec, path);
    REQUIRE(slurp(path) == slurp(std::string(KP_TEST_FIXTURES) + "/golden_seed0.kpstrm"));
    std::remove(path.c_str());
}

TEST_CASE("dataset splits are disjoint, exhaustive, and whole-sequence") {
    REQUIRE(split_dataset(0, {1, 0, 0}, 1).train.empty());
    const DatasetSplit all = split_dataset(25, {1, 0, 0}, 2);
    REQUIRE(all.train.size() == 25);
    REQUIRE(all.val.empty());
    REQUIRE(all.test.empty());

    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const DatasetSplit s = split_dataset(37, {0.6, 0.2, 0.2}, seed);
        std::set<std::size_t> seen;
        for (const auto* part : {&s.train, &s.val, &s.test})
            for (std::size_t i : *part) {
                REQUIRE(seen.insert(i).second); // no sequence in two splits
                REQUIRE(i < 37);
            }
        REQUIRE(seen.size() == 37);
    }
    REQUIRE_THROWS_AS(split_dataset(10, {-1, 1, 0}, 0), std::invalid_argument);
}
