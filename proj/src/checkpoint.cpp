#include "cimt/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cimt/errors.hpp"

namespace cimt {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts need byte swaps");

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string crc_hex(const void* bytes, size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    c = crc32(c, static_cast<const Bytef*>(bytes), static_cast<uInt>(n));
    std::ostringstream os;
    os << std::hex << std::setw(8) << std::setfill('0') << c;
    return os.str();
}

void write_file(const fs::path& path, const void* bytes, size_t n) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
    if (!f) throw IoError("short write to " + path.string());
}

std::vector<char> read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot read " + path.string());
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<char> bytes(static_cast<size_t>(n));
    f.read(bytes.data(), n);
    if (!f) throw IoError("short read from " + path.string());
    return bytes;
}

json tensor_entry(const std::string& name, const Shape& shape, const float* data, size_t len,
                  const fs::path& dir) {
    const std::string file = name + ".bin";
    const size_t bytes = len * sizeof(float);
    write_file(dir / file, data, bytes);
    json e;
    e["name"] = name;
    e["dtype"] = "f32";
    e["shape"] = shape;
    e["file"] = file;
    e["bytes"] = bytes;
    e["crc32"] = crc_hex(data, bytes);
    return e;
}

}  // namespace

json dims_to_json(const ModelDims& dims) {
    json j;
    j["in_channels"] = dims.in_channels;
    j["base_width"] = dims.base_width;
    j["num_classes"] = dims.num_classes;
    j["num_queries"] = dims.num_queries;
    j["embed_dim"] = dims.embed_dim;
    j["num_heads"] = dims.num_heads;
    j["cls_hidden"] = dims.cls_hidden;
    j["roi_margin"] = dims.roi_margin;
    return j;
}

ModelDims dims_from_json(const json& j) {
    ModelDims d;
    d.in_channels = j.at("in_channels").get<int>();
    d.base_width = j.at("base_width").get<int>();
    d.num_classes = j.at("num_classes").get<int>();
    d.num_queries = j.at("num_queries").get<int>();
    d.embed_dim = j.at("embed_dim").get<int>();
    d.num_heads = j.at("num_heads").get<int>();
    d.cls_hidden = j.at("cls_hidden").get<int>();
    d.roi_margin = j.at("roi_margin").get<std::array<int, 3>>();
    return d;
}

void save_checkpoint(const std::string& dir, const CheckpointMeta& meta, const ParamStore& ps,
                     const std::map<std::string, std::vector<float>>& opt_m,
                     const std::map<std::string, std::vector<float>>& opt_v) {
    const fs::path root(dir);
    std::error_code ec;
    fs::remove_all(root, ec);
    fs::create_directories(root);

    json tensors = json::array();
    for (const auto& [name, t] : ps)
        tensors.push_back(tensor_entry(name, t.shape(), t.values().data(),
                                       t.values().size(), root));
    for (const auto& [name, vals] : opt_m)
        tensors.push_back(tensor_entry("opt.m." + name, Shape{int(vals.size())}, vals.data(),
                                       vals.size(), root));
    for (const auto& [name, vals] : opt_v)
        tensors.push_back(tensor_entry("opt.v." + name, Shape{int(vals.size())}, vals.data(),
                                       vals.size(), root));

    json m;
    m["version"] = meta.version;
    m["kind"] = "cimt-checkpoint";
    m["preset"] = meta.preset;
    m["config_hash"] = meta.config_hash;
    m["stage"] = meta.stage;
    m["dims"] = dims_to_json(meta.dims);
    m["extra"] = meta.extra;
    m["tensors"] = tensors;
    const std::string text = m.dump(2) + "\n";
    write_file(root / "manifest.json", text.data(), text.size());
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    const fs::path root(dir);
    const std::vector<char> raw = read_file(root / "manifest.json");
    json m;
    try {
        m = json::parse(raw.begin(), raw.end());
    } catch (const json::exception& e) {
        throw CheckpointError("manifest.json is not valid JSON: " + std::string(e.what()));
    }

    LoadedCheckpoint out;
    try {
        out.meta.version = m.at("version").get<int>();
        if (out.meta.version != kCheckpointVersion)
            throw CheckpointError("unsupported checkpoint version " +
                                  std::to_string(out.meta.version));
        if (m.at("kind").get<std::string>() != "cimt-checkpoint")
            throw CheckpointError("not a model checkpoint: kind mismatch");
        out.meta.preset = m.at("preset").get<std::string>();
        out.meta.config_hash = m.at("config_hash").get<std::string>();
        out.meta.stage = m.at("stage").get<std::string>();
        out.meta.dims = dims_from_json(m.at("dims"));
        out.meta.extra = m.at("extra").get<std::map<std::string, double>>();

        for (const json& e : m.at("tensors")) {
            const std::string name = e.at("name").get<std::string>();
            if (e.at("dtype").get<std::string>() != "f32")
                throw CheckpointError("tensor " + name + ": unsupported dtype");
            const Shape shape = e.at("shape").get<Shape>();
            const size_t bytes = e.at("bytes").get<size_t>();
            const std::string crc = e.at("crc32").get<std::string>();
            const int64_t numel = shape_numel(shape);
            if (bytes != size_t(numel) * sizeof(float))
                throw CheckpointError("tensor " + name + ": byte count does not match shape");

            const std::vector<char> blob = read_file(root / e.at("file").get<std::string>());
            if (blob.size() != bytes)
                throw CheckpointError("tensor " + name + ": file size mismatch");
            if (crc_hex(blob.data(), blob.size()) != crc)
                throw CheckpointError("tensor " + name + ": CRC-32 mismatch");

            std::vector<float> vals(static_cast<size_t>(numel));
            std::memcpy(vals.data(), blob.data(), bytes);
            if (name.rfind("opt.m.", 0) == 0)
                out.opt_m[name.substr(6)] = std::move(vals);
            else if (name.rfind("opt.v.", 0) == 0)
                out.opt_v[name.substr(6)] = std::move(vals);
            else
                out.params.put(name, Tensor::from(shape, std::move(vals)));
        }
    } catch (const json::exception& e) {
        throw CheckpointError("manifest.json is missing fields: " + std::string(e.what()));
    }
    return out;
}

}  // namespace cimt
