#pragma once

// Binary checkpoint: "ROBAD", version byte 1, 8-byte config hash, then per
// tensor a 2-byte name length, the UTF-8 name, a 1-byte rank, rank 4-byte
// dims and the row-major float32 values. All integers and floats are
// little-endian.

#include "model.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace robad {

inline constexpr std::array<char, 5> kCheckpointMagic{'R', 'O', 'B', 'A', 'D'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

template <typename T> void put_le(std::vector<char> &out, T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

class ByteReader {
  public:
    explicit ByteReader(const std::vector<char> &buf) : buf_(buf) {}

    bool done() const { return pos_ == buf_.size(); }

    template <typename T> T get_le() {
        need(sizeof(T));
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(buf_[pos_ + i]))
                 << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(u);
    }

    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }

  private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n)
            throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    }

    const std::vector<char> &buf_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::vector<char> serialize_checkpoint(const ModelParams &params, const ModelConfig &cfg) {
    std::vector<char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    out.push_back(static_cast<char>(kCheckpointVersion));
    detail::put_le<std::uint64_t>(out, cfg.hash());
    params.visit([&](const std::string &name, const Tensor &t) {
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<char>(t.rank()));
        for (auto d : t.shape())
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (double v : t.data())
            detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    });
    return out;
}

/// Parses checkpoint bytes against `cfg`; nothing is returned unless every
/// tensor is present with the expected name and shape.
inline ModelParams deserialize_checkpoint(const std::vector<char> &bytes, const ModelConfig &cfg) {
    detail::ByteReader in(bytes);
    const auto magic = in.get_bytes(kCheckpointMagic.size());
    if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin()))
        throw FormatError("not a checkpoint (bad magic)");
    const auto version = in.get_le<std::uint8_t>();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto hash = in.get_le<std::uint64_t>();
    if (hash != cfg.hash())
        throw CompatibilityError("checkpoint was written for a different model configuration (" +
                                 cfg.canonical() + " expected)");
    const auto shapes = param_shapes(cfg);
    std::vector<Tensor> tensors;
    for (const auto &[expected_name, expected_shape] : shapes) {
        const auto len = in.get_le<std::uint16_t>();
        const auto name = in.get_bytes(len);
        if (name != expected_name)
            throw FormatError("expected tensor " + expected_name + ", found " + name);
        const auto rank = in.get_le<std::uint8_t>();
        Shape shape(rank);
        for (auto &d : shape)
            d = in.get_le<std::uint32_t>();
        if (shape != expected_shape)
            throw FormatError("tensor " + name + " has shape " + shape_str(shape) + ", expected " +
                              shape_str(expected_shape));
        std::vector<double> values(shape_numel(shape));
        for (auto &v : values)
            v = static_cast<double>(std::bit_cast<float>(in.get_le<std::uint32_t>()));
        tensors.emplace_back(shape, std::move(values), true);
    }
    if (!in.done())
        throw FormatError("trailing bytes after the last tensor");
    std::size_t i = 0;
    return make_params(cfg, [&](const std::string &, const Shape &) { return tensors[i++]; });
}

/// Writes through a temporary file and renames it into place.
inline void save_checkpoint(const ModelParams &params, const ModelConfig &cfg,
                            const std::string &path) {
    const auto bytes = serialize_checkpoint(params, cfg);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError("cannot write checkpoint " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw IoError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline ModelParams load_checkpoint(const std::string &path, const ModelConfig &cfg) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open checkpoint " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, cfg);
}

} // namespace robad
