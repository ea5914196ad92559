// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dog/error.hpp"
#include "dog/hash.hpp"
#include "dog/mlp.hpp"

namespace dog {

/*!
 * Checkpoint file layout:
 *
 *   line 1   "DOGCKPT 1"
 *   line 2   one-line JSON header: architecture, parameterization, class
 *            count, schedule fingerprint, seed, block table, payload hash
 *   rest     every block in declared order, row-major, as little-endian
 *            IEEE-754 float64
 */
struct Checkpoint {
    MlpParams params;
    std::string schedule_fingerprint;
    std::uint64_t seed = 0;
};

namespace detail {

inline constexpr const char* checkpoint_magic = "DOGCKPT 1";

inline std::uint64_t fnv1a(const std::vector<unsigned char>& bytes) { return dog::fnv1a(bytes.data(), bytes.size()); }

inline void put_le(std::vector<unsigned char>& out, double v) {
    std::uint64_t u = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(u >> (8 * i)));
}

inline double get_le(const unsigned char* p) {
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(u);
}

inline std::string describe(const MlpArch& a) {
    std::ostringstream s;
    s << "dim=" << a.dim << " hidden=" << a.hidden << " time_dim=" << a.time_dim
      << " class_count=" << a.class_count << " parameterization=" << to_string(a.parameterization);
    return s.str();
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const MlpParams& p = ck.params;
    std::vector<unsigned char> payload;
    payload.reserve(p.size() * 8);
    nlohmann::json blocks = nlohmann::json::array();
    for (std::size_t b = 0; b < MlpParams::block_count; ++b) {
        const Mat& m = p.block(b);
        blocks.push_back({{"name", MlpParams::names[b]}, {"rows", m.rows()}, {"cols", m.cols()}});
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_le(payload, m(i, j));
    }
    const auto& a = p.arch();
    nlohmann::json header = {
        {"architecture", {{"kind", "mlp4_relu"}, {"dim", a.dim}, {"hidden", a.hidden},
                          {"time_dim", a.time_dim}}},
        {"parameterization", to_string(a.parameterization)},
        {"class_count", a.class_count},
        {"schedule", ck.schedule_fingerprint},
        {"seed", ck.seed},
        {"blocks", blocks},
        {"param_count", p.size()},
        {"payload_fnv1a", detail::fnv1a(payload)},
    };
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << detail::checkpoint_magic << '\n' << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) throw Error("failed writing " + path);
}

/*!
 * Reads a checkpoint. When `expected` is given, any architecture difference
 * is reported as a FormatError naming the expected and actual values.
 */
inline Checkpoint load_checkpoint(const std::string& path, const std::optional<MlpArch>& expected = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    std::string magic, header_line;
    std::getline(in, magic);
    if (magic != detail::checkpoint_magic) throw FormatError(path + ": not a checkpoint file");
    std::getline(in, header_line);
    nlohmann::json h;
    MlpArch arch;
    try {
        h = nlohmann::json::parse(header_line);
        const auto& a = h.at("architecture");
        if (a.at("kind").get<std::string>() != "mlp4_relu")
            throw FormatError(path + ": unknown architecture kind");
        arch.dim = a.at("dim").get<int>();
        arch.hidden = a.at("hidden").get<int>();
        arch.time_dim = a.at("time_dim").get<int>();
        arch.class_count = h.at("class_count").get<int>();
        arch.parameterization = parameterization_from_string(h.at("parameterization").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": corrupt header: " + e.what());
    } catch (const InvalidInput& e) {
        throw FormatError(path + ": corrupt header: " + e.what());
    }
    if (expected && !(*expected == arch)) {
        std::ostringstream msg;
        msg << path << ": architecture mismatch: expected " << detail::describe(*expected) << ", got "
            << detail::describe(arch);
        if (expected->hidden != arch.hidden)
            msg << " (hidden width expected " << expected->hidden << ", actual " << arch.hidden << ")";
        throw FormatError(msg.str());
    }
    MlpParams p;
    try {
        p = MlpParams(arch);
    } catch (const InvalidInput& e) {
        throw FormatError(path + ": " + e.what());
    }
    const std::vector<unsigned char> payload((std::istreambuf_iterator<char>(in)),
                                             std::istreambuf_iterator<char>());
    if (payload.size() != p.size() * 8)
        throw FormatError(path + ": payload has " + std::to_string(payload.size()) + " bytes, expected " +
                          std::to_string(p.size() * 8));
    try {
        if (h.at("payload_fnv1a").get<std::uint64_t>() != detail::fnv1a(payload))
            throw FormatError(path + ": payload checksum mismatch");
        const auto& blocks = h.at("blocks");
        if (blocks.size() != MlpParams::block_count) throw FormatError(path + ": wrong block count");
        std::size_t off = 0;
        for (std::size_t b = 0; b < MlpParams::block_count; ++b) {
            Mat& m = p.block(b);
            if (blocks[b].at("name").get<std::string>() != MlpParams::names[b] ||
                blocks[b].at("rows").get<Eigen::Index>() != m.rows() ||
                blocks[b].at("cols").get<Eigen::Index>() != m.cols())
                throw FormatError(path + ": block table does not match architecture at " +
                                  std::string(MlpParams::names[b]));
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j, off += 8) m(i, j) = detail::get_le(payload.data() + off);
        }
        return {std::move(p), h.at("schedule").get<std::string>(), h.at("seed").get<std::uint64_t>()};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": corrupt header: " + e.what());
    }
}

}  // namespace dog
