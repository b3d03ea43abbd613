#include "checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace vce {

namespace {
using nlohmann::json;
constexpr char kMagic[4] = {'P', 'H', 'S', 'R'};
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    json header;
    header["format_version"] = 1;
    header["config"] = ckpt.config;
    header["step"] = ckpt.step;
    header["adam_t"] = ckpt.adam_t;
    header["rng_state"] = ckpt.rng_state;
    json manifest = json::array();
    std::int64_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        if (numel(t.shape) != static_cast<std::int64_t>(t.data.size()))
            throw ShapeError("checkpoint: tensor '" + t.name + "' shape " +
                             shape_str(t.shape) + " does not match its data");
        json entry;
        entry["name"] = t.name;
        entry["shape"] = t.shape;
        entry["offset"] = offset;
        entry["nbytes"] = static_cast<std::int64_t>(t.data.size() * 4);
        manifest.push_back(entry);
        offset += static_cast<std::int64_t>(t.data.size() * 4);
    }
    header["tensors"] = manifest;

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    const std::string h = header.dump();
    const std::uint32_t hlen = static_cast<std::uint32_t>(h.size());
    os.write(kMagic, 4);
    os.write(reinterpret_cast<const char*>(&hlen), 4);
    os.write(h.data(), h.size());
    for (const auto& t : ckpt.tensors)
        os.write(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 4);
    if (!os) throw FormatError("short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "' for reading");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("'" + path + "': bad magic at byte offset 0 (want PHSR)");
    std::uint32_t hlen = 0;
    if (!is.read(reinterpret_cast<char*>(&hlen), 4))
        throw FormatError("'" + path + "': truncated header length at byte offset 4");
    std::string h(hlen, '\0');
    if (!is.read(h.data(), hlen))
        throw FormatError("'" + path + "': truncated JSON header at byte offset 8");
    json header;
    try {
        header = json::parse(h);
    } catch (const json::exception& e) {
        throw FormatError("'" + path + "': header failed to parse: " + e.what());
    }

    Checkpoint ckpt;
    ckpt.config = header.value("config", json::object());
    ckpt.step = header.value("step", std::int64_t{0});
    ckpt.adam_t = header.value("adam_t", std::int64_t{0});
    ckpt.rng_state = header.value("rng_state", "");

    std::vector<char> payload(std::istreambuf_iterator<char>(is), {});
    std::int64_t expected_end = 0;
    for (const auto& entry : header.at("tensors")) {
        CheckpointTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<Shape>();
        const std::int64_t offset = entry.at("offset").get<std::int64_t>();
        const std::int64_t nbytes = entry.at("nbytes").get<std::int64_t>();
        if (offset != expected_end)
            throw FormatError("'" + path + "': tensor '" + t.name +
                              "' payload offset " + std::to_string(offset) +
                              " overlaps or leaves a gap (expected " +
                              std::to_string(expected_end) + ")");
        if (nbytes != numel(t.shape) * 4)
            throw FormatError("'" + path + "': tensor '" + t.name + "' wants " +
                              std::to_string(numel(t.shape) * 4) + " bytes, manifest says " +
                              std::to_string(nbytes));
        if (offset + nbytes > static_cast<std::int64_t>(payload.size()))
            throw FormatError("'" + path + "': tensor '" + t.name +
                              "' extends past the payload (" +
                              std::to_string(offset + nbytes) + " > " +
                              std::to_string(payload.size()) + " bytes)");
        t.data.resize(nbytes / 4);
        std::memcpy(t.data.data(), payload.data() + offset, nbytes);
        expected_end = offset + nbytes;
        ckpt.tensors.push_back(std::move(t));
    }
    if (expected_end != static_cast<std::int64_t>(payload.size()))
        throw FormatError("'" + path + "': trailing payload bytes after manifest end");
    return ckpt;
}

}  // namespace vce
