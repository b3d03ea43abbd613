#include "volume_io.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace vce {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'C', 'T', 'V', 'L'};

static_assert(sizeof(float) == 4, "f32 payloads assume 4-byte float");

void write_file(const std::string& path, const json& header, const void* payload,
                std::size_t payload_bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    const std::string h = header.dump();
    const std::uint32_t hlen = static_cast<std::uint32_t>(h.size());
    os.write(kMagic, 4);
    os.write(reinterpret_cast<const char*>(&hlen), 4);
    os.write(h.data(), h.size());
    os.write(static_cast<const char*>(payload), payload_bytes);
    if (!os) throw FormatError("short write to '" + path + "'");
}

struct Parsed {
    json header;
    std::vector<char> payload;
    std::size_t payload_offset = 0;
};

json read_header_only(std::ifstream& is, const std::string& path) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("'" + path + "': bad magic at byte offset 0 (want CTVL)");
    std::uint32_t hlen = 0;
    if (!is.read(reinterpret_cast<char*>(&hlen), 4))
        throw FormatError("'" + path + "': truncated header length at byte offset 4");
    std::string h(hlen, '\0');
    if (!is.read(h.data(), hlen))
        throw FormatError("'" + path + "': truncated JSON header at byte offset 8, want " +
                          std::to_string(hlen) + " bytes");
    json header;
    try {
        header = json::parse(h);
    } catch (const json::exception& e) {
        throw FormatError("'" + path + "': header JSON at byte offset 8 failed to parse: " +
                          e.what());
    }
    return header;
}

Parsed read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "' for reading");
    Parsed p;
    p.header = read_header_only(is, path);
    p.payload_offset = 8 + p.header.dump().size();  // informational only

    Dims3 shape{};
    try {
        const auto& sh = p.header.at("shape");
        shape = {sh.at(0).get<std::int64_t>(), sh.at(1).get<std::int64_t>(),
                 sh.at(2).get<std::int64_t>()};
    } catch (const json::exception& e) {
        throw FormatError("'" + path + "': header missing shape: " + e.what());
    }
    const std::string dtype = p.header.value("dtype", "");
    std::size_t elem = 0;
    if (dtype == "f32")
        elem = 4;
    else if (dtype == "u8")
        elem = 1;
    else
        throw FormatError("'" + path + "': unknown dtype '" + dtype + "' (want f32 or u8)");

    const std::size_t want = static_cast<std::size_t>(dims_numel(shape)) * elem;
    p.payload.resize(want);
    is.read(p.payload.data(), static_cast<std::streamsize>(want));
    const std::size_t got = static_cast<std::size_t>(is.gcount());
    if (got != want) {
        const std::size_t hdr = 8 + p.header.dump().size();
        throw FormatError("'" + path + "': truncated payload, expected " +
                          std::to_string(want) + " bytes after byte offset ~" +
                          std::to_string(hdr) + ", found " + std::to_string(got));
    }
    char extra;
    if (is.read(&extra, 1))
        throw FormatError("'" + path + "': trailing bytes after payload (expected " +
                          std::to_string(want) + " payload bytes)");
    return p;
}

std::array<double, 3> spacing_of(const json& header) {
    std::array<double, 3> sp{1.0, 1.0, 1.0};
    if (header.contains("spacing_mm")) {
        const auto& s = header["spacing_mm"];
        sp = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    }
    return sp;
}

}  // namespace

void write_ctvol(const std::string& path, const Volume& vol) {
    json header;
    header["shape"] = {vol.shape[0], vol.shape[1], vol.shape[2]};
    header["spacing_mm"] = {vol.spacing_mm[0], vol.spacing_mm[1], vol.spacing_mm[2]};
    header["dtype"] = "f32";
    header["phase"] = phase_name(vol.phase);
    header["kind"] = "hu";
    write_file(path, header, vol.voxels.data(), vol.voxels.size() * 4);
}

void write_ctvol(const std::string& path, const LabelVolume& labels) {
    json header;
    header["shape"] = {labels.shape[0], labels.shape[1], labels.shape[2]};
    header["spacing_mm"] = {labels.spacing_mm[0], labels.spacing_mm[1], labels.spacing_mm[2]};
    header["dtype"] = "u8";
    header["phase"] = "NC";
    header["kind"] = "label";
    write_file(path, header, labels.labels.data(), labels.labels.size());
}

Volume read_volume(const std::string& path) {
    Parsed p = read_file(path);
    if (p.header.value("kind", "hu") != "hu" || p.header.value("dtype", "") != "f32")
        throw FormatError("'" + path + "': expected an f32 hu volume, found kind '" +
                          p.header.value("kind", "?") + "' dtype '" +
                          p.header.value("dtype", "?") + "'");
    Volume v;
    const auto& sh = p.header["shape"];
    v.shape = {sh[0].get<std::int64_t>(), sh[1].get<std::int64_t>(),
               sh[2].get<std::int64_t>()};
    v.spacing_mm = spacing_of(p.header);
    v.phase = phase_from_name(p.header.value("phase", "NC"));
    v.voxels.resize(p.payload.size() / 4);
    std::memcpy(v.voxels.data(), p.payload.data(), p.payload.size());
    return v;
}

LabelVolume read_labels(const std::string& path) {
    Parsed p = read_file(path);
    if (p.header.value("kind", "") != "label" || p.header.value("dtype", "") != "u8")
        throw FormatError("'" + path + "': expected a u8 label volume, found kind '" +
                          p.header.value("kind", "?") + "' dtype '" +
                          p.header.value("dtype", "?") + "'");
    LabelVolume l;
    const auto& sh = p.header["shape"];
    l.shape = {sh[0].get<std::int64_t>(), sh[1].get<std::int64_t>(),
               sh[2].get<std::int64_t>()};
    l.spacing_mm = spacing_of(p.header);
    l.labels.assign(p.payload.begin(), p.payload.end());
    return l;
}

std::string peek_kind(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "' for reading");
    return read_header_only(is, path).value("kind", "hu");
}

}  // namespace vce
