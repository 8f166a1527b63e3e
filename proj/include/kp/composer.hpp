#pragma once

// Channel fusion: body, hand, and face parameter streams arriving at their
// own rates are joined at body timestamps (latest sample per channel, no
// cross-channel interpolation), staleness-masked, and smoothed per field
// with quaternion slerp for rotations and an exponential filter for vectors.

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <istream>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include <kp/bodymodel.hpp>
#include <kp/rotmath.hpp>

namespace kp {

struct BodySample {
    double timestamp = 0.0;
    std::vector<Rot3> body_pose;
    RigidTransform global;
};

struct HandSample {
    double timestamp = 0.0;
    std::vector<std::vector<Rot3>> hand_poses;  // one list per hand
};

struct FaceChannelSample {
    double timestamp = 0.0;
    Rot3 jaw_pose = Rot3::Identity();
    Eigen::VectorXd expression;
};

struct ChannelStreams {
    std::vector<BodySample> body;
    std::vector<HandSample> hands;
    std::vector<FaceChannelSample> face;

    void validate() const {
        auto check = [](const auto& stream, const char* name) {
            for (std::size_t i = 1; i < stream.size(); ++i)
                if (stream[i].timestamp <= stream[i - 1].timestamp)
                    throw std::invalid_argument(std::string("channel streams: ") + name +
                                                " timestamps must strictly increase");
        };
        check(body, "body");
        check(hands, "hand");
        check(face, "face");
    }
};

struct SmoothingConfig {
    double alpha_rotation = 0.8;    // slerp factor toward the newest rotation
    double alpha_expression = 0.5;  // exponential filter factor for vectors
    double max_staleness = 0.25;    // seconds before a lagging channel is held

    void validate() const {
        if (!(alpha_rotation > 0.0 && alpha_rotation <= 1.0))
            throw std::invalid_argument("smoothing config: alpha_rotation outside (0,1]");
        if (!(alpha_expression > 0.0 && alpha_expression <= 1.0))
            throw std::invalid_argument("smoothing config: alpha_expression outside (0,1]");
        if (!(max_staleness > 0.0))
            throw std::invalid_argument("smoothing config: max_staleness must be positive");
    }
};

/// Quaternion slerp from prev toward current by factor alpha. Both alpha = 1
/// and prev = current return current unchanged, keeping pass-through
/// composition bit-exact.
inline Rot3 slerp_smooth(const Rot3& prev, const Rot3& current, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw std::invalid_argument("slerp_smooth: alpha outside (0,1]");
    if (alpha == 1.0 || prev == current) return current;
    const Eigen::Quaterniond qa(prev);
    const Eigen::Quaterniond qb(current);
    return qa.slerp(alpha, qb).normalized().toRotationMatrix();
}

/// Exponential filter alpha * current + (1 - alpha) * prev, with the same
/// exact pass-through guarantees as slerp_smooth.
inline Eigen::VectorXd exp_filter(const Eigen::VectorXd& prev, const Eigen::VectorXd& current,
                                  double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw std::invalid_argument("exp_filter: alpha outside (0,1]");
    if (prev.size() != current.size())
        throw std::invalid_argument("exp_filter: size mismatch");
    if (alpha == 1.0 || prev == current) return current;
    return alpha * current + (1.0 - alpha) * prev;
}

inline Vec3 exp_filter(const Vec3& prev, const Vec3& current, double alpha) {
    return Vec3(exp_filter(Eigen::VectorXd(prev), Eigen::VectorXd(current), alpha));
}

/// Smoothing state: the last composed pose, which also provides the held
/// values for channels that have not produced a fresh sample yet.
struct ComposerState {
    PoseState last;
    bool has_output = false;

    explicit ComposerState(PoseState initial) : last(std::move(initial)) {}
};

namespace detail {

template <typename Sample>
const Sample* latest_at_or_before(const std::vector<Sample>& stream, double t) {
    const auto it = std::upper_bound(
        stream.begin(), stream.end(), t,
        [](double value, const Sample& s) { return value < s.timestamp; });
    return it == stream.begin() ? nullptr : &*(it - 1);
}

} // namespace detail

/// One fused pose at body timestamp t: exact body sample required, hand and
/// face channels joined by their latest sample at or before t and held at
/// the previous smoothed value once older than the staleness threshold.
/// Streams must already satisfy ChannelStreams::validate.
inline std::optional<PoseState> compose_frame(const ChannelStreams& streams, double t,
                                              const SmoothingConfig& cfg,
                                              ComposerState& state) {
    cfg.validate();
    const BodySample* body = detail::latest_at_or_before(streams.body, t);
    if (!body || body->timestamp != t) return std::nullopt;
    if (body->body_pose.size() != state.last.body_pose.size())
        throw std::invalid_argument("compose_frame: body joint count mismatch");

    PoseState raw = state.last;
    raw.body_pose = body->body_pose;
    raw.global = body->global;

    bool hands_fresh = false;
    if (const HandSample* s = detail::latest_at_or_before(streams.hands, t);
        s && t - s->timestamp <= cfg.max_staleness) {
        if (s->hand_poses.size() != state.last.hand_poses.size())
            throw std::invalid_argument("compose_frame: hand count mismatch");
        for (std::size_t h = 0; h < s->hand_poses.size(); ++h)
            if (s->hand_poses[h].size() != state.last.hand_poses[h].size())
                throw std::invalid_argument("compose_frame: hand joint count mismatch");
        raw.hand_poses = s->hand_poses;
        hands_fresh = true;
    }
    bool face_fresh = false;
    if (const FaceChannelSample* s = detail::latest_at_or_before(streams.face, t);
        s && t - s->timestamp <= cfg.max_staleness) {
        if (s->expression.size() != state.last.expression.size())
            throw std::invalid_argument("compose_frame: expression size mismatch");
        raw.jaw_pose = s->jaw_pose;
        raw.expression = s->expression;
        face_fresh = true;
    }

    PoseState out = std::move(raw);
    if (state.has_output) {
        const PoseState& prev = state.last;
        for (std::size_t j = 0; j < out.body_pose.size(); ++j)
            out.body_pose[j] = slerp_smooth(prev.body_pose[j], out.body_pose[j],
                                            cfg.alpha_rotation);
        out.global.rotation =
            slerp_smooth(prev.global.rotation, out.global.rotation, cfg.alpha_rotation);
        out.global.translation =
            exp_filter(prev.global.translation, out.global.translation, cfg.alpha_rotation);
        if (hands_fresh)
            for (std::size_t h = 0; h < out.hand_poses.size(); ++h)
                for (std::size_t i = 0; i < out.hand_poses[h].size(); ++i)
                    out.hand_poses[h][i] = slerp_smooth(prev.hand_poses[h][i],
                                                        out.hand_poses[h][i],
                                                        cfg.alpha_rotation);
        if (face_fresh) {
            out.jaw_pose = slerp_smooth(prev.jaw_pose, out.jaw_pose, cfg.alpha_rotation);
            out.expression = exp_filter(prev.expression, out.expression, cfg.alpha_expression);
        }
    }
    state.last = out;
    state.has_output = true;
    return out;
}

/// Fuses complete streams offline: one output per body sample, timestamps
/// equal to the body timestamps exactly.
inline std::vector<std::pair<double, PoseState>> compose_stream(const ChannelStreams& streams,
                                                                const SmoothingConfig& cfg,
                                                                const PoseState& initial) {
    streams.validate();
    cfg.validate();
    ComposerState state(initial);
    std::vector<std::pair<double, PoseState>> out;
    out.reserve(streams.body.size());
    for (const BodySample& b : streams.body) {
        std::optional<PoseState> pose = compose_frame(streams, b.timestamp, cfg, state);
        if (pose) out.emplace_back(b.timestamp, std::move(*pose));
    }
    return out;
}

// --- live pipeline ----------------------------------------------------------

/// Bounded multi-producer single-consumer channel: push blocks while full,
/// pop blocks until a value arrives or the channel is closed and drained.
template <typename T>
class BoundedChannel {
public:
    explicit BoundedChannel(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("bounded channel: zero capacity");
    }

    void push(T value) {
        std::unique_lock<std::mutex> lock(mutex_);
        not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
        if (closed_) throw std::runtime_error("bounded channel: push after close");
        items_.push_back(std::move(value));
        not_empty_.notify_one();
    }

    bool pop(T& out) {
        std::unique_lock<std::mutex> lock(mutex_);
        not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
        if (items_.empty()) return false;
        out = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return true;
    }

    bool try_pop(T& out) {
        std::lock_guard<std::mutex> lock(mutex_);
        if (items_.empty()) return false;
        out = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return true;
    }

    void close() {
        std::lock_guard<std::mutex> lock(mutex_);
        closed_ = true;
        not_empty_.notify_all();
        not_full_.notify_all();
    }

private:
    std::mutex mutex_;
    std::condition_variable not_full_, not_empty_;
    std::deque<T> items_;
    std::size_t capacity_;
    bool closed_ = false;
};

/// Pulls one body sample at a time, drains whatever hand and face samples
/// have arrived, and composes at the body timestamp. Per-channel windows
/// keep only the latest sample at or before the current time plus any
/// future samples, so buffering stays bounded.
class LiveComposer {
public:
    LiveComposer(PoseState initial, SmoothingConfig cfg, std::size_t capacity = 64)
        : cfg_(cfg), state_(std::move(initial)), body_(capacity), hands_(capacity),
          face_(capacity) {
        cfg_.validate();
    }

    BoundedChannel<BodySample>& body_channel() { return body_; }
    BoundedChannel<HandSample>& hands_channel() { return hands_; }
    BoundedChannel<FaceChannelSample>& face_channel() { return face_; }

    /// Consumes until the body channel is closed and drained.
    std::vector<std::pair<double, PoseState>> run() {
        std::vector<std::pair<double, PoseState>> out;
        BodySample body;
        while (body_.pop(body)) {
            if (has_body_time_ && body.timestamp <= last_body_time_)
                throw std::invalid_argument("live composer: body timestamps must increase");
            last_body_time_ = body.timestamp;
            has_body_time_ = true;
            window_.body.push_back(std::move(body));
            drain(hands_, window_.hands);
            drain(face_, window_.face);
            const double t = window_.body.back().timestamp;
            std::optional<PoseState> pose = compose_frame(window_, t, cfg_, state_);
            if (pose) out.emplace_back(t, std::move(*pose));
            prune(t);
        }
        return out;
    }

private:
    template <typename Sample>
    static void drain(BoundedChannel<Sample>& channel, std::vector<Sample>& window) {
        Sample s;
        while (channel.try_pop(s)) {
            if (!window.empty() && s.timestamp <= window.back().timestamp)
                throw std::invalid_argument(
                    "live composer: channel timestamps must increase");
            window.push_back(std::move(s));
        }
    }

    template <typename Sample>
    static void prune_window(std::vector<Sample>& window, double t) {
        const Sample* keep = detail::latest_at_or_before(window, t);
        if (!keep) return;
        const std::size_t index = std::size_t(keep - window.data());
        window.erase(window.begin(), window.begin() + long(index));
    }

    void prune(double t) {
        window_.body.clear();
        prune_window(window_.hands, t);
        prune_window(window_.face, t);
    }

    SmoothingConfig cfg_;
    ComposerState state_;
    ChannelStreams window_;
    double last_body_time_ = 0.0;
    bool has_body_time_ = false;
    BoundedChannel<BodySample> body_;
    BoundedChannel<HandSample> hands_;
    BoundedChannel<FaceChannelSample> face_;
};

// --- pose stream files ------------------------------------------------------

namespace detail {

inline nlohmann::json quat_json(const Rot3& r) {
    const Eigen::Quaterniond q(r);
    return {q.w(), q.x(), q.y(), q.z()};
}

inline Rot3 quat_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 4)
        throw std::invalid_argument("pose stream: quaternion must have 4 entries (wxyz)");
    Eigen::Quaterniond q(j.at(0).get<double>(), j.at(1).get<double>(),
                         j.at(2).get<double>(), j.at(3).get<double>());
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n))
        throw std::invalid_argument("pose stream: quaternion norm must be positive");
    return q.normalized().toRotationMatrix();
}

} // namespace detail

/// One pose stream record: timestamp, per-joint body quaternions (wxyz),
/// global rotation and translation, hand and jaw quaternions, expression
/// and shape coefficients.
inline nlohmann::json pose_record_json(double t, const PoseState& pose) {
    nlohmann::json j;
    j["t"] = t;
    nlohmann::json body = nlohmann::json::array();
    for (const Rot3& r : pose.body_pose) body.push_back(detail::quat_json(r));
    j["body"] = std::move(body);
    j["global"] = {{"q", detail::quat_json(pose.global.rotation)},
                   {"t",
                    {pose.global.translation.x(), pose.global.translation.y(),
                     pose.global.translation.z()}}};
    nlohmann::json hands = nlohmann::json::array();
    for (const auto& hand : pose.hand_poses) {
        nlohmann::json one = nlohmann::json::array();
        for (const Rot3& r : hand) one.push_back(detail::quat_json(r));
        hands.push_back(std::move(one));
    }
    j["hands"] = std::move(hands);
    j["jaw"] = detail::quat_json(pose.jaw_pose);
    j["expression"] = std::vector<double>(pose.expression.data(),
                                          pose.expression.data() + pose.expression.size());
    j["shape"] =
        std::vector<double>(pose.shape.data(), pose.shape.data() + pose.shape.size());
    return j;
}

inline std::pair<double, PoseState> pose_record_from_json(const nlohmann::json& j) {
    PoseState pose;
    const nlohmann::json& body = j.at("body");
    pose.body_pose.reserve(body.size());
    for (const auto& q : body) pose.body_pose.push_back(detail::quat_from_json(q));
    pose.global.rotation = detail::quat_from_json(j.at("global").at("q"));
    const nlohmann::json& tr = j.at("global").at("t");
    pose.global.translation =
        Vec3(tr.at(0).get<double>(), tr.at(1).get<double>(), tr.at(2).get<double>());
    for (const auto& hand : j.at("hands")) {
        std::vector<Rot3> one;
        one.reserve(hand.size());
        for (const auto& q : hand) one.push_back(detail::quat_from_json(q));
        pose.hand_poses.push_back(std::move(one));
    }
    pose.jaw_pose = detail::quat_from_json(j.at("jaw"));
    const std::vector<double> expr = j.at("expression").get<std::vector<double>>();
    pose.expression = Eigen::Map<const Eigen::VectorXd>(expr.data(), long(expr.size()));
    const std::vector<double> shape = j.at("shape").get<std::vector<double>>();
    pose.shape = Eigen::Map<const Eigen::VectorXd>(shape.data(), long(shape.size()));
    return {j.at("t").get<double>(), std::move(pose)};
}

/// JSON-lines pose stream, one pose_record_json per line.
inline void save_pose_stream(const std::string& path,
                             const std::vector<std::pair<double, PoseState>>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("pose stream: cannot open " + path + " for writing");
    for (const auto& [t, pose] : records) out << pose_record_json(t, pose).dump() << "\n";
}

inline std::vector<std::pair<double, PoseState>> load_pose_stream(std::istream& in) {
    std::vector<std::pair<double, PoseState>> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        records.push_back(pose_record_from_json(nlohmann::json::parse(line)));
    }
    return records;
}

inline std::vector<std::pair<double, PoseState>> load_pose_stream(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("pose stream: cannot open " + path);
    return load_pose_stream(in);
}

} // namespace kp
