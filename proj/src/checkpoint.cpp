#include "seqcls/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace seqcls {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

void write_tensor_file(const TensorFile& file, const std::filesystem::path& path) {
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : file.tensors) {
        const std::uint64_t bytes = static_cast<std::uint64_t>(t.numel()) * sizeof(double);
        header[name] = {{"dtype", "F64"}, {"shape", t.shape()}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    if (!file.metadata.empty()) header["__metadata__"] = file.metadata;
    std::string text = header.dump();
    // Pad so the data section starts 8-byte aligned, as the format allows.
    while ((text.size() + 8) % 8) text.push_back(' ');

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const std::uint64_t n = text.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : file.tensors)
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

void write_tensor_file_atomic(const TensorFile& file, const std::filesystem::path& path) {
    auto tmp = path;
    tmp += ".tmp";
    write_tensor_file(file, tmp);
    std::filesystem::rename(tmp, path);
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    const auto file_size = std::filesystem::file_size(path);
    if (!in || n > file_size - 8) throw std::runtime_error(path.string() + ": bad tensor file header");
    std::string text(n, '\0');
    in.read(text.data(), static_cast<std::streamsize>(n));
    const json header = json::parse(text);
    const std::uint64_t data_start = 8 + n;

    TensorFile out;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : entry.items()) out.metadata[k] = v.get<std::string>();
            continue;
        }
        const auto dtype = entry.at("dtype").get<std::string>();
        const auto shape = entry.at("shape").get<nn::Shape>();
        const auto begin = entry.at("data_offsets").at(0).get<std::uint64_t>();
        const auto end = entry.at("data_offsets").at(1).get<std::uint64_t>();
        const auto count = static_cast<std::uint64_t>(nn::numel_of(shape));
        const std::size_t width = dtype == "F64" ? 8 : dtype == "F32" ? 4 : 0;
        if (!width) throw std::runtime_error(path.string() + ": tensor " + name + " has unsupported dtype " + dtype);
        if (end < begin || end - begin != count * width || data_start + end > file_size)
            throw std::runtime_error(path.string() + ": tensor " + name + " has inconsistent offsets");
        std::vector<char> raw(end - begin);
        in.seekg(static_cast<std::streamoff>(data_start + begin));
        in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
        std::vector<double> values(count);
        if (width == 8) {
            std::memcpy(values.data(), raw.data(), raw.size());
        } else {
            for (std::uint64_t i = 0; i < count; ++i) {
                float f;
                std::memcpy(&f, raw.data() + i * 4, 4);
                values[i] = f;
            }
        }
        out.tensors.emplace(name, nn::Tensor(shape, std::move(values)));
    }
    if (!in) throw std::runtime_error(path.string() + ": truncated tensor data");
    return out;
}

}  // namespace seqcls
