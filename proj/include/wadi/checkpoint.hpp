#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wadi/tensor.hpp"

namespace wadi {

// Binary tensor container. Layout, all integers little-endian:
//   "WADI" | version u32 | tensor count u64
//   per tensor: name length u32 | UTF-8 name | dtype u32 (0=f32, 1=f64)
//               | rank u32 | dims u64 each | raw row-major payload
// Round trips are bit-exact for both dtypes. Names must be unique and
// dims must be positive.

class CheckpointError : public std::runtime_error {
  public:
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Insertion-ordered named tensor collection.
class NamedTensors {
  public:
    void add(const std::string& name, Tensor t) {
        if (index_.count(name))
            throw CheckpointError("duplicate tensor name: " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw CheckpointError("missing tensor: " + name);
        return items_[it->second].second;
    }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }

  private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::map<std::string, std::size_t> index_;
};

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    write_bytes(os, b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    write_bytes(os, b, 8);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw CheckpointError("truncated checkpoint (u32)");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw CheckpointError("truncated checkpoint (u64)");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint32_t f32_bits(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    return u;
}

inline std::uint64_t f64_bits(double d) {
    std::uint64_t u;
    std::memcpy(&u, &d, 8);
    return u;
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open for writing: " + path.string());

    os.write("WADI", 4);
    detail::write_u32(os, kCheckpointVersion);
    detail::write_u64(os, tensors.size());

    for (const auto& [name, t] : tensors.items()) {
        if (name.empty()) throw CheckpointError("empty tensor name");
        for (std::size_t d : t.shape())
            if (d == 0)
                throw CheckpointError("tensor '" + name + "' has an empty dimension, shape " +
                                      shape_str(t.shape()));
        detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
        detail::write_bytes(os, name.data(), name.size());
        detail::write_u32(os, static_cast<std::uint32_t>(t.dtype()));
        detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::write_u64(os, d);
        if (t.dtype() == DType::Float32) {
            for (double v : t.data())
                detail::write_u32(os, detail::f32_bits(static_cast<float>(v)));
        } else {
            for (double v : t.data()) detail::write_u64(os, detail::f64_bits(v));
        }
    }
    if (!os) throw CheckpointError("write failed: " + path.string());
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open: " + path.string());

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "WADI", 4) != 0)
        throw CheckpointError("bad magic in " + path.string());
    const std::uint32_t version = detail::read_u32(is);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

    const std::uint64_t count = detail::read_u64(is);
    NamedTensors out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CheckpointError("truncated checkpoint (name)");

        const std::uint32_t dtype_code = detail::read_u32(is);
        if (dtype_code > 1)
            throw CheckpointError("tensor '" + name + "' has unknown dtype code " +
                                  std::to_string(dtype_code));
        const DType dtype = static_cast<DType>(dtype_code);

        const std::uint32_t rank = detail::read_u32(is);
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<std::size_t>(detail::read_u64(is));
            if (shape[d] == 0)
                throw CheckpointError("tensor '" + name + "' has an empty dimension");
        }

        const std::size_t n = shape_numel(shape);
        std::vector<double> data(n);
        if (dtype == DType::Float32) {
            for (std::size_t j = 0; j < n; ++j) {
                const std::uint32_t bits = detail::read_u32(is);
                float f;
                std::memcpy(&f, &bits, 4);
                data[j] = static_cast<double>(f);
            }
        } else {
            for (std::size_t j = 0; j < n; ++j) {
                const std::uint64_t bits = detail::read_u64(is);
                double d;
                std::memcpy(&d, &bits, 8);
                data[j] = d;
            }
        }
        out.add(name, Tensor::from_data(std::move(shape), std::move(data), dtype));
    }
    return out;
}

} // namespace wadi
