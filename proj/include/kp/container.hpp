#pragma once

// Self-describing binary container used by the model file and the network
// checkpoints: a magic string, a JSON header describing named arrays
// (name/shape/dtype), then the raw little-endian array payloads in header
// order. dtype "f4" quantizes to float32 on write; "f8" round-trips
// doubles bit-exactly.
//
// Also holds the hex-float codec used by the JSON-lines stream formats.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace kp {

inline constexpr const char* kContainerMagic = "KPMDL1";

struct Container {
    nlohmann::json meta;
    // Arrays decoded to double regardless of stored dtype.
    std::map<std::string, std::vector<double>> arrays;
    std::map<std::string, std::vector<std::size_t>> shapes;

    const std::vector<double>& at(const std::string& name) const {
        auto it = arrays.find(name);
        if (it == arrays.end())
            throw std::runtime_error("container: missing array '" + name + "'");
        return it->second;
    }
};

class ContainerWriter {
public:
    explicit ContainerWriter(nlohmann::json meta) : meta_(std::move(meta)) {}

    void add(const std::string& name, std::vector<std::size_t> shape,
             const std::vector<double>& data, const std::string& dtype = "f4") {
        const std::size_t count =
            std::accumulate(shape.begin(), shape.end(), std::size_t(1), std::multiplies<>());
        if (count != data.size())
            throw std::invalid_argument("container: shape/data mismatch for '" + name + "'");
        if (dtype != "f4" && dtype != "f8")
            throw std::invalid_argument("container: unknown dtype " + dtype);
        entries_.push_back({name, std::move(shape), dtype, data});
    }

    void write(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("container: cannot open " + path);

        nlohmann::json header = meta_;
        header["magic"] = kContainerMagic;
        auto& arrs = header["arrays"] = nlohmann::json::array();
        for (const auto& e : entries_)
            arrs.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}});
        const std::string hs = header.dump();

        out.write(kContainerMagic, 6);
        out.put('\n');
        const std::uint64_t len = hs.size();
        out.write(reinterpret_cast<const char*>(&len), 8);
        out.write(hs.data(), std::streamsize(hs.size()));
        for (const auto& e : entries_) {
            if (e.dtype == "f4") {
                std::vector<float> f(e.data.begin(), e.data.end());
                out.write(reinterpret_cast<const char*>(f.data()),
                          std::streamsize(f.size() * sizeof(float)));
            } else {
                out.write(reinterpret_cast<const char*>(e.data.data()),
                          std::streamsize(e.data.size() * sizeof(double)));
            }
        }
        if (!out) throw std::runtime_error("container: write failed for " + path);
    }

private:
    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::string dtype;
        std::vector<double> data;
    };
    nlohmann::json meta_;
    std::vector<Entry> entries_;
};

inline Container read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("container: cannot open " + path);
    char magic[7] = {};
    in.read(magic, 7);
    if (!in || std::memcmp(magic, kContainerMagic, 6) != 0 || magic[6] != '\n')
        throw std::runtime_error("container: bad magic in " + path);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    std::string hs(len, '\0');
    in.read(hs.data(), std::streamsize(len));
    if (!in) throw std::runtime_error("container: truncated header in " + path);

    Container c;
    c.meta = nlohmann::json::parse(hs);
    for (const auto& a : c.meta.at("arrays")) {
        const std::string name = a.at("name");
        const std::vector<std::size_t> shape = a.at("shape");
        const std::string dtype = a.at("dtype");
        const std::size_t count =
            std::accumulate(shape.begin(), shape.end(), std::size_t(1), std::multiplies<>());
        std::vector<double> data(count);
        if (dtype == "f4") {
            std::vector<float> f(count);
            in.read(reinterpret_cast<char*>(f.data()), std::streamsize(count * sizeof(float)));
            for (std::size_t i = 0; i < count; ++i) data[i] = double(f[i]);
        } else if (dtype == "f8") {
            in.read(reinterpret_cast<char*>(data.data()),
                    std::streamsize(count * sizeof(double)));
        } else {
            throw std::runtime_error("container: unknown dtype " + dtype);
        }
        if (!in) throw std::runtime_error("container: truncated array '" + name + "' in " + path);
        c.arrays.emplace(name, std::move(data));
        c.shapes.emplace(name, shape);
    }
    return c;
}

// --- hex-float codec ---------------------------------------------------
// Doubles in the JSON-lines stream formats are written as C99 hex-float
// strings ("%a"), which round-trip bit-exactly and stay human-inspectable.

inline std::string to_hexfloat(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%a", v);
    return buf;
}

inline double from_hexfloat(const std::string& s) {
    const char* p = s.c_str();
    char* end = nullptr;
    const double v = std::strtod(p, &end);
    if (end == p) throw std::runtime_error("bad hex-float: " + s);
    return v;
}

inline nlohmann::json hex_array(const double* v, std::size_t n) {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) a.push_back(to_hexfloat(v[i]));
    return a;
}

template <typename Json>
inline void parse_hex_array(const Json& a, double* out, std::size_t n) {
    if (a.size() != n) throw std::runtime_error("hex array: wrong length");
    for (std::size_t i = 0; i < n; ++i) out[i] = from_hexfloat(a[i].template get<std::string>());
}

} // namespace kp
