#include <doctest.h>

#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "checkpoint.hpp"
#include "volume_io.hpp"

using namespace vce;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("vceflow_test_" + std::to_string(std::rand()) + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

Volume random_volume(const Dims3& shape, std::uint64_t seed) {
    Volume v;
    v.shape = shape;
    v.spacing_mm = {2.5, 0.8, 0.8};
    v.phase = Phase::A;
    v.voxels.resize(dims_numel(shape));
    Rng rng(seed);
    rng.fill_normal(v.voxels.data(), v.size(), 30.0, 100.0);
    return v;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("ctvol round-trips an f32 volume bitwise") {
    TempDir tmp;
    const Volume v = random_volume({6, 5, 4}, 1);
    write_ctvol(tmp.file("v.ctvol"), v);
    const Volume r = read_volume(tmp.file("v.ctvol"));
    CHECK(r.shape == v.shape);
    CHECK(r.spacing_mm == v.spacing_mm);
    CHECK(r.phase == v.phase);
    CHECK(std::memcmp(r.voxels.data(), v.voxels.data(), v.size() * 4) == 0);
    CHECK(peek_kind(tmp.file("v.ctvol")) == "hu");
}

TEST_CASE("ctvol round-trips a u8 label volume bitwise") {
    TempDir tmp;
    LabelVolume l;
    l.shape = {4, 4, 4};
    l.labels.resize(64);
    Rng rng(2);
    for (auto& x : l.labels) x = static_cast<std::uint8_t>(rng.uniform_int(4));
    write_ctvol(tmp.file("l.ctvol"), l);
    const LabelVolume r = read_labels(tmp.file("l.ctvol"));
    CHECK(r.shape == l.shape);
    CHECK(r.labels == l.labels);
    CHECK(peek_kind(tmp.file("l.ctvol")) == "label");
}

TEST_CASE("ctvol reader names the failure and the byte offset") {
    TempDir tmp;
    const Volume v = random_volume({3, 3, 3}, 3);
    write_ctvol(tmp.file("v.ctvol"), v);

    SUBCASE("bad magic") {
        auto bytes = slurp(tmp.file("v.ctvol"));
        bytes[0] = 'X';
        std::ofstream(tmp.file("bad.ctvol"), std::ios::binary)
            .write(bytes.data(), bytes.size());
        CHECK_THROWS_WITH_AS(read_volume(tmp.file("bad.ctvol")),
                             doctest::Contains("offset 0"), FormatError);
    }
    SUBCASE("truncated payload names expected vs found") {
        auto bytes = slurp(tmp.file("v.ctvol"));
        bytes.resize(bytes.size() - 10);
        std::ofstream(tmp.file("short.ctvol"), std::ios::binary)
            .write(bytes.data(), bytes.size());
        CHECK_THROWS_WITH_AS(read_volume(tmp.file("short.ctvol")),
                             doctest::Contains("expected 108"), FormatError);
    }
    SUBCASE("unknown dtype") {
        nlohmann::json hdr = {{"shape", {1, 1, 1}}, {"dtype", "f64"}, {"kind", "hu"}};
        const std::string h = hdr.dump();
        std::ofstream os(tmp.file("dtype.ctvol"), std::ios::binary);
        const std::uint32_t n = h.size();
        os.write("CTVL", 4);
        os.write(reinterpret_cast<const char*>(&n), 4);
        os << h << "12345678";
        os.close();
        CHECK_THROWS_WITH_AS(read_volume(tmp.file("dtype.ctvol")),
                             doctest::Contains("f64"), FormatError);
    }
    SUBCASE("trailing garbage is rejected") {
        auto bytes = slurp(tmp.file("v.ctvol"));
        bytes.push_back('x');
        std::ofstream(tmp.file("long.ctvol"), std::ios::binary)
            .write(bytes.data(), bytes.size());
        CHECK_THROWS_AS(read_volume(tmp.file("long.ctvol")), FormatError);
    }
    SUBCASE("reading labels as volume fails") {
        CHECK_THROWS_AS(read_labels(tmp.file("v.ctvol")), FormatError);
    }
}

TEST_CASE("checkpoint save-load-save is byte identical") {
    TempDir tmp;
    Checkpoint ck;
    ck.config = {{"seed", 7}, {"max_steps", 100}};
    ck.step = 42;
    ck.adam_t = 42;
    Rng rng(4);
    ck.rng_state = rng.state();
    for (int i = 0; i < 5; ++i) {
        CheckpointTensor t;
        t.name = "param" + std::to_string(i);
        t.shape = {3, 2 + i};
        t.data.resize(3 * (2 + i));
        rng.fill_normal(t.data.data(), static_cast<std::int64_t>(t.data.size()));
        ck.tensors.push_back(std::move(t));
    }
    save_checkpoint(tmp.file("a.phsr"), ck);
    const Checkpoint loaded = load_checkpoint(tmp.file("a.phsr"));
    CHECK(loaded.step == 42);
    CHECK(loaded.rng_state == ck.rng_state);
    REQUIRE(loaded.tensors.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(loaded.tensors[i].name == ck.tensors[i].name);
        CHECK(loaded.tensors[i].shape == ck.tensors[i].shape);
        CHECK(loaded.tensors[i].data == ck.tensors[i].data);
    }
    save_checkpoint(tmp.file("b.phsr"), loaded);
    CHECK(slurp(tmp.file("a.phsr")) == slurp(tmp.file("b.phsr")));
}

TEST_CASE("checkpoint reader rejects bad magic and inconsistent manifests") {
    TempDir tmp;
    Checkpoint ck;
    ck.tensors.push_back({"w", {2, 2}, {1, 2, 3, 4}});
    save_checkpoint(tmp.file("ok.phsr"), ck);

    auto bytes = slurp(tmp.file("ok.phsr"));
    bytes[0] = 'Q';
    std::ofstream(tmp.file("bad.phsr"), std::ios::binary).write(bytes.data(), bytes.size());
    CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("bad.phsr")), doctest::Contains("PHSR"),
                         FormatError);

    bytes = slurp(tmp.file("ok.phsr"));
    bytes.resize(bytes.size() - 4);  // drop one f32
    std::ofstream(tmp.file("short.phsr"), std::ios::binary)
        .write(bytes.data(), bytes.size());
    CHECK_THROWS_AS(load_checkpoint(tmp.file("short.phsr")), FormatError);
}
