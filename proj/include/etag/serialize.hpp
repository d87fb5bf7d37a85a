#pragma once

// Parameter files: flat little-endian float64 payload behind a JSON header.
//
//   offset 0   8 bytes   magic "ETAGPARM"
//   offset 8   u32 LE    format version (1)
//   offset 12  u64 LE    header length H
//   offset 20  H bytes   JSON: {"kind", "meta", "tensors": [{"name", "shape"}...]}
//   offset 20+H          float64 LE values of each tensor, in header order

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "etag/errors.hpp"
#include "etag/tensor.hpp"
#include "json.hpp"

namespace etag {

static_assert(std::endian::native == std::endian::little, "parameter files assume a little-endian host");

inline constexpr char kParamMagic[8] = {'E', 'T', 'A', 'G', 'P', 'A', 'R', 'M'};
inline constexpr std::uint32_t kParamVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct ParameterFile {
    std::string kind;
    nlohmann::json meta;
    std::vector<NamedTensor> tensors;

    const Tensor& get(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t.tensor;
        throw FormatError("parameter file has no tensor named '" + name + "'", 0);
    }
};

inline std::vector<std::uint8_t> encode_parameters(const std::string& kind, const nlohmann::json& meta,
                                                   const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    nlohmann::json header;
    header["kind"] = kind;
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : tensors) header["tensors"].push_back({{"name", name}, {"shape", t->shape}});
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(sizeof(kParamMagic) + 4 + 8);
    std::memcpy(out.data(), kParamMagic, sizeof(kParamMagic));
    std::memcpy(out.data() + 8, &kParamVersion, 4);
    const std::uint64_t len = text.size();
    std::memcpy(out.data() + 12, &len, 8);
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, t] : tensors) {
        const std::size_t at = out.size();
        out.resize(at + t->size() * sizeof(double));
        std::memcpy(out.data() + at, t->values.data(), t->size() * sizeof(double));
    }
    return out;
}

inline ParameterFile decode_parameters(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 20) throw FormatError("parameter file shorter than its fixed header", bytes.size());
    if (std::memcmp(bytes.data(), kParamMagic, sizeof(kParamMagic)) != 0) {
        throw FormatError("bad parameter file magic", 0);
    }
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 8, 4);
    if (version != kParamVersion) {
        throw FormatError("unsupported parameter file version " + std::to_string(version), 8);
    }
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 12, 8);
    if (len > bytes.size() - 20) throw FormatError("header length exceeds file size", 12);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed header JSON: ") + e.what(), 20);
    }

    ParameterFile file;
    std::uint64_t offset = 20 + len;
    try {
        file.kind = header.at("kind").get<std::string>();
        file.meta = header.at("meta");
        for (const auto& entry : header.at("tensors")) {
            NamedTensor nt;
            nt.name = entry.at("name").get<std::string>();
            Shape shape = entry.at("shape").get<Shape>();
            const std::uint64_t need = element_count(shape) * sizeof(double);
            if (bytes.size() - offset < need) {
                throw FormatError("payload truncated in tensor '" + nt.name + "': expected " + std::to_string(need) +
                                      " bytes, " + std::to_string(bytes.size() - offset) + " remain",
                                  offset);
            }
            std::vector<double> values(element_count(shape));
            std::memcpy(values.data(), bytes.data() + offset, need);
            offset += need;
            nt.tensor = Tensor(std::move(shape), std::move(values));
            file.tensors.push_back(std::move(nt));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed header fields: ") + e.what(), 20);
    }
    if (offset != bytes.size()) throw FormatError("trailing bytes after payload", offset);
    return file;
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

}  // namespace etag
