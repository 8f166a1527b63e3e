#pragma once

// Synthetic motion dataset generation and the KPSTRM1 stream format.
// Sequences are sinusoidal joint trajectories skinned through the body
// model; landmark frames are what a depth-sensor body tracker would emit,
// with optional per-frame ground-truth poses riding along.

#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <kp/bodymodel.hpp>
#include <kp/container.hpp>
#include <kp/random.hpp>

namespace kp {

inline constexpr const char* kStreamMagic = "KPSTRM1";
inline constexpr const char* kDeskModelId = "desk24";

struct Sinusoid {
    double amplitude = 0.0; // radians (or meters for translation tracks)
    double frequency = 0.0; // Hz
    double phase = 0.0;

    double eval(double t) const {
        return amplitude * std::sin(2.0 * M_PI * frequency * t + phase);
    }
};

struct JointTrack {
    Vec3 axis = Vec3::UnitX();
    std::vector<Sinusoid> terms; // at most 3

    double angle(double t) const {
        double a = 0.0;
        for (const auto& s : terms) a += s.eval(t);
        return a;
    }
    double amplitude_sum() const {
        double a = 0.0;
        for (const auto& s : terms) a += std::abs(s.amplitude);
        return a;
    }
};

struct MotionSpec {
    std::vector<JointTrack> joint_tracks;  // per joint; entry 0 drives the global rotation
    std::vector<double> joint_limits;      // radians, per joint
    std::array<Sinusoid, 3> translation;   // global drift, one sinusoid per axis
    Eigen::VectorXd shape;                 // per-sequence beta
    double duration = 10.0;                // seconds
    double rate = 30.0;                    // Hz
    std::uint64_t seed = 0;

    int frame_count() const { return int(std::lround(duration * rate)); }
};

struct SequenceRecord {
    std::string name;
    std::string model_id;
    Eigen::VectorXd beta;
    double rate = 30.0;
    std::vector<LandmarkFrame> frames;
    std::vector<PoseState> gt; // empty, or one pose per frame
};

struct NoiseModel {
    double position_sigma = 0.005;  // meters
    double dropout = 0.01;          // per landmark slot
    double time_jitter = 0.0;       // seconds
    double occlusion_hazard = 0.0;  // per landmark per frame, burst start probability
    double occlusion_frames = 8.0;  // mean burst length, geometric

    void validate() const {
        if (position_sigma < 0 || time_jitter < 0 || dropout < 0 || dropout > 1)
            throw std::invalid_argument("noise model: bad parameters");
        if (occlusion_hazard < 0 || occlusion_hazard > 1)
            throw std::invalid_argument("noise model: bad occlusion hazard");
        if (occlusion_hazard > 0 && occlusion_frames < 1)
            throw std::invalid_argument("noise model: occlusion needs a mean length >= 1");
    }
};

struct SynthOptions {
    int max_sinusoids = 3;
    double joint_limit = 0.5;      // radians, per joint
    double root_limit = 0.6;       // global rotation amplitude
    double min_frequency = 0.1;    // Hz
    double max_frequency = 0.8;
    double translation_amp = 0.1;  // meters
    double shape_scale = 0.5;
    double duration = 10.0;
    double rate = 30.0;
};

/// Sample a motion spec: per-joint fixed random axis, 1..max sinusoids with
/// total amplitude inside the joint limit, slow global drift, random shape.
inline MotionSpec random_motion_spec(const SkinnedModel& model, const SynthOptions& opts,
                                     std::uint64_t seed) {
    if (opts.rate <= 0 || opts.duration <= 0)
        throw std::invalid_argument("motion spec: rate and duration must be positive");
    Rng rng(seed ^ 0x5eedull);
    MotionSpec spec;
    spec.seed = seed;
    spec.duration = opts.duration;
    spec.rate = opts.rate;
    const int J = model.joint_count();
    spec.joint_tracks.resize(std::size_t(J));
    spec.joint_limits.assign(std::size_t(J), opts.joint_limit);
    spec.joint_limits[0] = opts.root_limit;
    for (int j = 0; j < J; ++j) {
        auto& tr = spec.joint_tracks[std::size_t(j)];
        Vec3 ax(rng.normal(), rng.normal(), rng.normal());
        while (ax.norm() < 1e-6) ax = Vec3(rng.normal(), rng.normal(), rng.normal());
        tr.axis = ax.normalized();
        const int n = 1 + int(rng.index(std::uint64_t(opts.max_sinusoids)));
        double total = 0.0;
        for (int s = 0; s < n; ++s) {
            Sinusoid sin;
            sin.amplitude = rng.uniform(0.05, 1.0);
            sin.frequency = rng.uniform(opts.min_frequency, opts.max_frequency);
            sin.phase = rng.uniform(0.0, 2.0 * M_PI);
            total += sin.amplitude;
            tr.terms.push_back(sin);
        }
        const double limit = 0.95 * spec.joint_limits[std::size_t(j)];
        for (auto& s : tr.terms) s.amplitude *= limit / total;
    }
    for (auto& t : spec.translation) {
        t.amplitude = rng.uniform(0.3, 1.0) * opts.translation_amp;
        t.frequency = rng.uniform(opts.min_frequency, opts.max_frequency);
        t.phase = rng.uniform(0.0, 2.0 * M_PI);
    }
    spec.shape = Eigen::VectorXd::Zero(model.shape_dim());
    for (Eigen::Index i = 0; i < spec.shape.size(); ++i)
        spec.shape[i] = rng.normal(0.0, opts.shape_scale);
    return spec;
}

inline PoseState pose_at(const SkinnedModel& model, const MotionSpec& spec, double t) {
    PoseState p = default_pose(model);
    p.shape = spec.shape;
    for (int j = 1; j < model.joint_count(); ++j) {
        const auto& tr = spec.joint_tracks[std::size_t(j)];
        p.body_pose[std::size_t(j)] = rot_exp(tr.angle(t) * tr.axis);
    }
    const auto& root = spec.joint_tracks[0];
    p.global.rotation = rot_exp(root.angle(t) * root.axis);
    p.global.translation = Vec3(spec.translation[0].eval(t), spec.translation[1].eval(t),
                                spec.translation[2].eval(t));
    return p;
}

/// Skin the anchor set along the trajectory; noise-free landmarks with
/// ground truth attached.
inline SequenceRecord generate_sequence(const SkinnedModel& model, const MotionSpec& spec,
                                        const std::string& name = "",
                                        const std::string& model_id = kDeskModelId) {
    if (int(spec.joint_tracks.size()) != model.joint_count() ||
        int(spec.joint_limits.size()) != model.joint_count())
        throw std::invalid_argument("generate_sequence: spec/model mismatch");
    for (std::size_t j = 0; j < spec.joint_tracks.size(); ++j)
        if (spec.joint_tracks[j].amplitude_sum() > spec.joint_limits[j] + 1e-12)
            throw std::invalid_argument("generate_sequence: track exceeds joint limit");

    SequenceRecord rec;
    rec.name = name.empty() ? "seq_" + std::to_string(spec.seed) : name;
    rec.model_id = model_id;
    rec.beta = spec.shape;
    rec.rate = spec.rate;
    const int N = spec.frame_count();
    rec.frames.reserve(std::size_t(N));
    rec.gt.reserve(std::size_t(N));
    for (int i = 0; i < N; ++i) {
        const double t = double(i) / spec.rate;
        const PoseState pose = pose_at(model, spec, t);
        LandmarkFrame f;
        f.timestamp = t;
        f.points = anchored_landmarks(model, pose);
        f.valid.assign(std::size_t(model.topology.landmark_count), 1);
        rec.frames.push_back(std::move(f));
        rec.gt.push_back(pose);
    }
    return rec;
}

/// Additive Gaussian position noise, landmark dropout, occlusion bursts
/// (each landmark goes missing for a geometric number of consecutive
/// frames), timestamp jitter (kept strictly monotone). Ground truth rides
/// through untouched.
inline SequenceRecord corrupt(const SequenceRecord& rec, const NoiseModel& noise,
                              std::uint64_t seed) {
    noise.validate();
    Rng rng(seed ^ 0xC0440ull);
    SequenceRecord out = rec;
    double prev = -std::numeric_limits<double>::infinity();
    std::vector<int> burst;
    if (!out.frames.empty()) burst.assign(out.frames.front().valid.size(), 0);
    for (auto& f : out.frames) {
        for (Eigen::Index i = 0; i < f.points.rows(); ++i)
            for (Eigen::Index c = 0; c < 3; ++c)
                f.points(i, c) += rng.normal(0.0, noise.position_sigma);
        for (auto& v : f.valid)
            if (rng.uniform() < noise.dropout) v = 0;
        if (noise.occlusion_hazard > 0) {
            const double p = 1.0 / noise.occlusion_frames;
            for (std::size_t k = 0; k < f.valid.size(); ++k) {
                if (burst[k] == 0 && rng.uniform() < noise.occlusion_hazard) {
                    const double u = std::max(rng.uniform(), 1e-12);
                    burst[k] = p >= 1.0 ? 1 : 1 + int(std::log(u) / std::log1p(-p));
                }
                if (burst[k] > 0) {
                    f.valid[k] = 0;
                    --burst[k];
                }
            }
        }
        if (noise.time_jitter > 0) {
            f.timestamp += rng.normal(0.0, noise.time_jitter);
            if (f.timestamp <= prev) f.timestamp = prev + 1e-6;
        }
        prev = f.timestamp;
    }
    return out;
}

// --- KPSTRM1 serialization -------------------------------------------------

namespace detail {

inline nlohmann::json pose_to_json(const PoseState& p) {
    nlohmann::json j;
    auto rot9 = [](const Rot3& R) { return hex_array(R.data(), 9); };
    auto& theta = j["theta"] = nlohmann::json::array();
    for (const auto& R : p.body_pose) theta.push_back(rot9(R));
    auto& hands = j["hands"] = nlohmann::json::array();
    for (const auto& hand : p.hand_poses) {
        nlohmann::json h = nlohmann::json::array();
        for (const auto& R : hand) h.push_back(rot9(R));
        hands.push_back(std::move(h));
    }
    j["jaw"] = rot9(p.jaw_pose);
    j["psi"] = hex_array(p.expression.data(), std::size_t(p.expression.size()));
    j["global_r"] = rot9(p.global.rotation);
    j["global_t"] = hex_array(p.global.translation.data(), 3);
    return j;
}

template <typename Json>
inline PoseState pose_from_json(const Json& j, const Eigen::VectorXd& beta) {
    PoseState p;
    auto rot9 = [](const Json& a) {
        Rot3 R;
        parse_hex_array(a, R.data(), 9);
        return R;
    };
    for (const auto& r : j.at("theta")) p.body_pose.push_back(rot9(r));
    for (const auto& h : j.at("hands")) {
        std::vector<Rot3> hand;
        for (const auto& r : h) hand.push_back(rot9(r));
        p.hand_poses.push_back(std::move(hand));
    }
    p.jaw_pose = rot9(j.at("jaw"));
    p.expression.resize(Eigen::Index(j.at("psi").size()));
    parse_hex_array(j.at("psi"), p.expression.data(), std::size_t(p.expression.size()));
    p.global.rotation = rot9(j.at("global_r"));
    parse_hex_array(j.at("global_t"), p.global.translation.data(), 3);
    p.shape = beta;
    return p;
}

} // namespace detail

inline void save_record(const SequenceRecord& rec, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_record: cannot open " + path);
    nlohmann::json header;
    header["magic"] = kStreamMagic;
    header["version"] = 1;
    header["name"] = rec.name;
    header["model_id"] = rec.model_id;
    header["beta"] = hex_array(rec.beta.data(), std::size_t(rec.beta.size()));
    header["rate"] = to_hexfloat(rec.rate);
    header["frames"] = rec.frames.size();
    header["landmarks"] = rec.frames.empty() ? 0 : rec.frames[0].points.rows();
    header["has_gt"] = !rec.gt.empty();
    out << header.dump() << '\n';
    for (std::size_t i = 0; i < rec.frames.size(); ++i) {
        const auto& f = rec.frames[i];
        nlohmann::json line;
        line["t"] = to_hexfloat(f.timestamp);
        auto& pts = line["pts"] = nlohmann::json::array();
        for (Eigen::Index k = 0; k < f.points.rows(); ++k) {
            const Vec3 p = f.points.row(k).transpose();
            pts.push_back(hex_array(p.data(), 3));
        }
        line["valid"] = f.valid;
        if (!rec.gt.empty()) line["gt"] = detail::pose_to_json(rec.gt[i]);
        out << line.dump() << '\n';
    }
    if (!out) throw std::runtime_error("save_record: write failed for " + path);
}

/// Line-by-line stream reader; holds one frame in memory at a time.
class SequenceReader {
public:
    explicit SequenceReader(const std::string& path)
        : owned_(std::make_unique<std::ifstream>(path, std::ios::binary)), in_(owned_.get()),
          path_(path) {
        if (!*owned_) throw std::runtime_error("stream: cannot open " + path);
        read_header();
    }

    /// Streams from an already-open source, e.g. standard input.
    explicit SequenceReader(std::istream& in, std::string name = "<stream>")
        : in_(&in), path_(std::move(name)) {
        read_header();
    }

    const nlohmann::json& header() const { return header_; }

    Eigen::VectorXd beta() const {
        Eigen::VectorXd b(Eigen::Index(header_.at("beta").size()));
        parse_hex_array(header_.at("beta"), b.data(), std::size_t(b.size()));
        return b;
    }

    /// Reads the next frame; returns false at end of stream.
    bool next(LandmarkFrame& f, PoseState* gt = nullptr) {
        std::string line;
        if (!std::getline(*in_, line)) {
            if (frames_read_ < header_.value("frames", std::size_t(0)))
                fail("truncated stream");
            return false;
        }
        ++lineno_;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            f.timestamp = from_hexfloat(j.at("t").get<std::string>());
            const auto& pts = j.at("pts");
            f.points.resize(Eigen::Index(pts.size()), 3);
            for (Eigen::Index k = 0; k < f.points.rows(); ++k) {
                Vec3 p;
                parse_hex_array(pts[std::size_t(k)], p.data(), 3);
                f.points.row(k) = p.transpose();
            }
            f.valid = j.at("valid").get<std::vector<std::uint8_t>>();
            if (gt) {
                if (j.contains("gt"))
                    *gt = detail::pose_from_json(j.at("gt"), beta());
                else
                    *gt = PoseState{};
            }
        } catch (const std::exception& e) {
            fail(e.what());
        }
        ++frames_read_;
        return true;
    }

private:
    void read_header() {
        std::string line;
        if (!std::getline(*in_, line)) fail("missing header");
        try {
            header_ = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            fail(e.what());
        }
        if (header_.value("magic", "") != kStreamMagic) fail("bad magic");
        ++lineno_;
    }

    [[noreturn]] void fail(const std::string& why) const {
        throw std::runtime_error(path_ + ":" + std::to_string(lineno_ + 1) + ": " + why);
    }
    std::unique_ptr<std::ifstream> owned_;
    std::istream* in_;
    std::string path_;
    nlohmann::json header_;
    std::size_t lineno_ = 0;
    std::size_t frames_read_ = 0;
};

inline SequenceRecord load_record(const std::string& path) {
    SequenceReader reader(path);
    SequenceRecord rec;
    rec.name = reader.header().value("name", "");
    rec.model_id = reader.header().value("model_id", "");
    rec.beta = reader.beta();
    rec.rate = from_hexfloat(reader.header().at("rate").get<std::string>());
    const bool has_gt = reader.header().value("has_gt", false);
    LandmarkFrame f;
    PoseState gt;
    while (reader.next(f, has_gt ? &gt : nullptr)) {
        rec.frames.push_back(f);
        if (has_gt) rec.gt.push_back(gt);
    }
    return rec;
}

// --- dataset splitting ------------------------------------------------------

struct DatasetSplit {
    std::vector<std::size_t> train, val, test;
};

/// Split whole sequences (never frames) into train/val/test index sets.
inline DatasetSplit split_dataset(std::size_t count, std::array<double, 3> ratios,
                                  std::uint64_t seed) {
    const double sum = ratios[0] + ratios[1] + ratios[2];
    if (sum <= 0 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0)
        throw std::invalid_argument("split_dataset: bad ratios");
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    Rng rng(seed ^ 0x59717ull);
    rng.shuffle(order);
    const auto n_train = std::size_t(std::lround(ratios[0] / sum * double(count)));
    const auto n_val =
        std::min(count - n_train, std::size_t(std::lround(ratios[1] / sum * double(count))));
    DatasetSplit s;
    s.train.assign(order.begin(), order.begin() + long(n_train));
    s.val.assign(order.begin() + long(n_train), order.begin() + long(n_train + n_val));
    s.test.assign(order.begin() + long(n_train + n_val), order.end());
    return s;
}

} // namespace kp
