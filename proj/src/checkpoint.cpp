#include "ctxdet/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace ctxdet {

namespace {

constexpr char kMagic[8] = {'C', 'T', 'X', 'D', 'E', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return value;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& named) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, kVersion);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, tensor] : named) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.shape().size()));
        for (const auto d : tensor.shape()) write_pod<std::int64_t>(out, d);
        out.write(reinterpret_cast<const char*>(tensor.values().data()),
                  static_cast<std::streamsize>(tensor.values().size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path,
                     std::vector<std::pair<std::string, Tensor>>& named) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot read " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    const auto version = read_pod<std::uint32_t>(in);
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = read_pod<std::uint32_t>(in);
    if (count != named.size()) {
        throw std::runtime_error("checkpoint: expected " + std::to_string(named.size()) +
                                 " tensors, file has " + std::to_string(count));
    }
    std::map<std::string, Tensor*> by_name;
    for (auto& [name, tensor] : named) by_name[name] = &tensor;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto ndim = read_pod<std::uint32_t>(in);
        Shape shape(ndim);
        for (auto& d : shape) d = read_pod<std::int64_t>(in);
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw std::runtime_error("checkpoint: unexpected tensor '" + name + "'");
        }
        Tensor& t = *it->second;
        if (t.shape() != shape) {
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file " +
                                     shape_str(shape) + " vs model " + shape_str(t.shape()));
        }
        in.read(reinterpret_cast<char*>(t.mutable_values().data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated tensor '" + name + "'");
    }
}

}  // namespace ctxdet
