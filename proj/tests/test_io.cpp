#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "soupforge/archive.hpp"
#include "soupforge/config.hpp"
#include "soupforge/dataset.hpp"
#include "soupforge/metrics.hpp"

using namespace soupforge;
namespace fs = std::filesystem;

namespace {

struct Scratch {
    fs::path dir;
    explicit Scratch(const std::string& name) : dir(fs::path("tio_" + name)) {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Scratch() { fs::remove_all(dir); }
    std::string operator/(const std::string& leaf) const { return (dir / leaf).string(); }
};

ImageBatch grid_batch(int n, int h, int w, std::uint64_t seed) {
    ImageBatch b;
    Rng rng(mix64(seed));
    for (int i = 0; i < n; ++i) {
        TensorF img({1, h, w});
        for (auto& v : img.data) v = float(rng.uniform_int(0, 255)) / 255.0f;
        b.images.push_back(std::move(img));
        b.labels.push_back(rng.uniform_int(0, 9));
    }
    return b;
}

AdvBatch sample_advbatch(int n, std::uint64_t seed) {
    AdvBatch b;
    b.session = SessionSpec{};
    b.session.id = 7;
    b.session.surrogate_id = "A";
    b.session.is_default = true;
    b.session.attack = attack_preset("TI-DIM");
    b.session.attack.seed = 99;
    b.session.attack.params.dim_p = 0.625;
    b.session.attack.params.grad_jitter = 0.25;
    b.config_hash = 0xfeedbeefcafef00dull;
    b.provenance = "made by hand for the round-trip check";
    Rng rng(mix64(seed));
    for (int i = 0; i < n; ++i) {
        TensorF img({2, 3, 3});
        for (auto& v : img.data) v = float(rng.uniform(0.0, 1.0));
        TensorF adv = img;
        for (auto& v : adv.data) v = float(std::min(1.0, std::max(0.0, double(v) + rng.uniform(-0.05, 0.05))));
        b.clean.push_back(std::move(img));
        b.adv.push_back(std::move(adv));
        b.labels.push_back(i % 5);
        b.final_loss.push_back(float(rng.uniform(0.0, 3.0)));
    }
    // exercise exact bit preservation with an awkward value
    b.clean[0].data[0] = 1.1754944e-38f;
    b.adv[0].data[0] = 0.1f;
    return b;
}

std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(bool(out));
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(SOUPFORGE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("idx files round trip on the byte grid") {
    Scratch s("idx_rt");
    auto b = grid_batch(9, 5, 4, 3);
    write_idx(b, s / "img.idx", s / "lab.idx");
    auto back = load_idx(s / "img.idx", s / "lab.idx");
    REQUIRE(back.count() == b.count());
    CHECK(back.labels == b.labels);
    for (int i = 0; i < b.count(); ++i) {
        CHECK(back.images[std::size_t(i)].shape == b.images[std::size_t(i)].shape);
        CHECK(back.images[std::size_t(i)].data == b.images[std::size_t(i)].data);
    }
    CHECK(back.content_hash() == b.content_hash());

    // arbitrary floats land on the nearest byte level
    ImageBatch off;
    off.images.push_back(TensorF({1, 1, 2}, {0.5004f, 0.123f}));
    off.labels.push_back(1);
    write_idx(off, s / "o_img.idx", s / "o_lab.idx");
    auto offback = load_idx(s / "o_img.idx", s / "o_lab.idx");
    for (std::size_t q = 0; q < offback.images[0].data.size(); ++q)
        CHECK(double(offback.images[0].data[q]) ==
              doctest::Approx(double(off.images[0].data[q])).epsilon(0).scale(1).epsilon(1.0 / 500.0));
}

TEST_CASE("idx readers reject structural damage") {
    Scratch s("idx_bad");
    auto b = grid_batch(4, 3, 3, 5);
    write_idx(b, s / "img.idx", s / "lab.idx");

    auto img = slurp(s / "img.idx");
    auto lab = slurp(s / "lab.idx");

    auto bad_img = img;
    bad_img[3] ^= 0xFF;  // magic lives in the first word
    spit(s / "bm.idx", bad_img);
    CHECK_THROWS_WITH_AS(load_idx(s / "bm.idx", s / "lab.idx"), doctest::Contains("bad image magic"), IoError);

    auto bad_lab = lab;
    bad_lab[3] ^= 0xFF;
    spit(s / "bl.idx", bad_lab);
    CHECK_THROWS_WITH_AS(load_idx(s / "img.idx", s / "bl.idx"), doctest::Contains("bad label magic"), IoError);

    auto wrong_count = lab;
    wrong_count[7] = (unsigned char)(wrong_count[7] + 1);  // big-endian count, low byte
    spit(s / "wc.idx", wrong_count);
    CHECK_THROWS_WITH_AS(load_idx(s / "img.idx", s / "wc.idx"), doctest::Contains("does not match"), IoError);

    auto chopped = img;
    chopped.pop_back();
    spit(s / "tr.idx", chopped);
    CHECK_THROWS_WITH_AS(load_idx(s / "tr.idx", s / "lab.idx"), doctest::Contains("truncated"), IoError);

    auto padded = lab;
    padded.push_back(0);
    spit(s / "pd.idx", padded);
    CHECK_THROWS_WITH_AS(load_idx(s / "img.idx", s / "pd.idx"), doctest::Contains("trailing"), IoError);

    CHECK_THROWS_AS(load_idx(s / "missing.idx", s / "lab.idx"), IoError);
}

TEST_CASE("idx writer guards its input") {
    Scratch s("idx_guard");
    ImageBatch empty;
    CHECK_THROWS_AS(write_idx(empty, s / "a", s / "b"), IoError);

    ImageBatch multi;
    multi.images.push_back(TensorF::full({3, 2, 2}, 0.5f));
    multi.labels.push_back(0);
    CHECK_THROWS_AS(write_idx(multi, s / "a", s / "b"), IoError);

    ImageBatch bigl = grid_batch(2, 2, 2, 9);
    bigl.labels[1] = 300;
    CHECK_THROWS_AS(write_idx(bigl, s / "a", s / "b"), IoError);
}

TEST_CASE("adversarial archives round trip bit for bit") {
    Scratch s("arc_rt");
    auto b = sample_advbatch(6, 11);
    write_advbatch(s / "b.adv", b);
    auto back = read_advbatch(s / "b.adv");

    REQUIRE(back.count() == b.count());
    CHECK(back.labels == b.labels);
    CHECK(back.final_loss == b.final_loss);
    for (int i = 0; i < b.count(); ++i) {
        CHECK(back.clean[std::size_t(i)].data == b.clean[std::size_t(i)].data);
        CHECK(back.adv[std::size_t(i)].data == b.adv[std::size_t(i)].data);
    }
    CHECK(back.config_hash == b.config_hash);
    CHECK(back.provenance == b.provenance);
    CHECK(back.session.canonical_text() == b.session.canonical_text());
    CHECK(back.session.attack.label == b.session.attack.label);
    CHECK(back.originals_hash() == b.originals_hash());

    // writing the readback again reproduces the same bytes
    write_advbatch(s / "b2.adv", back);
    CHECK(slurp(s / "b.adv") == slurp(s / "b2.adv"));
}

TEST_CASE("adversarial archives reject structural damage") {
    Scratch s("arc_bad");
    auto b = sample_advbatch(3, 13);
    write_advbatch(s / "b.adv", b);
    auto bytes = slurp(s / "b.adv");

    auto bad_magic = bytes;
    bad_magic[0] ^= 0xFF;
    spit(s / "bm.adv", bad_magic);
    CHECK_THROWS_WITH_AS(read_advbatch(s / "bm.adv"), doctest::Contains("bad magic"), IoError);

    auto bad_version = bytes;
    bad_version[8] = 2;
    spit(s / "bv.adv", bad_version);
    CHECK_THROWS_WITH_AS(read_advbatch(s / "bv.adv"), doctest::Contains("unsupported version"), IoError);

    auto chopped = bytes;
    chopped.pop_back();
    spit(s / "tr.adv", chopped);
    CHECK_THROWS_WITH_AS(read_advbatch(s / "tr.adv"), doctest::Contains("truncated"), IoError);

    auto padded = bytes;
    padded.push_back(0x5A);
    spit(s / "pd.adv", padded);
    CHECK_THROWS_WITH_AS(read_advbatch(s / "pd.adv"), doctest::Contains("trailing"), IoError);

    // flip one byte inside the clean-image block: structure parses, hash does not
    std::size_t pix = std::size_t(b.clean[0].data.size());
    std::size_t clean_start = bytes.size() - 2 * b.clean.size() * pix * 4;
    auto tampered = bytes;
    tampered[clean_start + 5] ^= 0x01;
    spit(s / "tp.adv", tampered);
    CHECK_THROWS_WITH_AS(read_advbatch(s / "tp.adv"), doctest::Contains("originals hash mismatch"), IoError);

    CHECK_THROWS_AS(read_advbatch(s / "missing.adv"), IoError);
}

TEST_CASE("archive writer guards its input") {
    Scratch s("arc_guard");
    AdvBatch empty;
    CHECK_THROWS_AS(write_advbatch(s / "a.adv", empty), ShapeError);

    auto uneven = sample_advbatch(3, 17);
    uneven.final_loss.pop_back();
    CHECK_THROWS_AS(write_advbatch(s / "a.adv", uneven), ShapeError);

    auto spacey = sample_advbatch(2, 19);
    spacey.session.surrogate_id = "model A";
    CHECK_THROWS_AS(write_advbatch(s / "a.adv", spacey), IoError);
}

TEST_CASE("session text is its own inverse") {
    SessionSpec s;
    s.id = 42;
    s.surrogate_id = "A";
    s.is_default = false;
    s.attack = attack_preset("SSA-SI-DIM");
    s.attack.seed = 123456789;
    s.attack.epsilon = 12.0 / 255.0;
    s.attack.params.ssa_rho = 0.625;
    s.attack.params.grad_jitter = 1.5;

    std::string text = s.canonical_text();
    SessionSpec back = parse_session_text(text);
    CHECK(back.canonical_text() == text);
    CHECK(back.id == 42);
    CHECK(back.surrogate_id == "A");
    CHECK(back.is_default == false);
    CHECK(back.attack.kind == s.attack.kind);
    CHECK(back.attack.modifiers == s.attack.modifiers);
    CHECK(back.attack.seed == s.attack.seed);
    CHECK(back.attack.epsilon == s.attack.epsilon);
    CHECK(back.attack.params.ssa_rho == s.attack.params.ssa_rho);

    CHECK_THROWS_WITH_AS(parse_session_text("season id=1"), doctest::Contains("missing leading tag"), IoError);
    CHECK_THROWS_WITH_AS(parse_session_text("session id=1 flavor=mint"), doctest::Contains("unknown key"),
                         IoError);
    CHECK_THROWS_WITH_AS(parse_session_text("session id=1 eps=abc"), doctest::Contains("bad number"), IoError);
    CHECK_THROWS_WITH_AS(parse_session_text("session id"), doctest::Contains("expected key=value"), IoError);
}

TEST_CASE("empty config object yields the documented defaults") {
    auto cfg = config_from_json_text("{}");
    CHECK(cfg.dataset_source == "synthetic");
    CHECK(cfg.dataset_count == 2400);
    CHECK(cfg.dataset_classes == 10);
    CHECK(cfg.zoo_epochs == 8);
    CHECK(cfg.attack_kinds == "MI,DIM");
    CHECK(cfg.attack_batch == 256);
    CHECK(cfg.attack_epsilon == doctest::Approx(16.0 / 255.0).epsilon(1e-12));
    CHECK(cfg.attack_alpha == doctest::Approx(1.6 / 255.0).epsilon(1e-12));
    CHECK(cfg.attack_iters == 10);
    CHECK(cfg.soup_m == 10);
    CHECK(cfg.seed == 42);
    CHECK(cfg.out_dir == "out");
}

TEST_CASE("config parser is strict about keys, shapes, and types") {
    CHECK_THROWS_WITH_AS(config_from_json_text("{\"attack.strength\": 3}"), doctest::Contains("unknown key"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json_text("{\"attack\": {\"epsilon\": 0.1}}"),
                         doctest::Contains("must be scalar (use flat dotted keys)"), ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json_text("{\"soup.m\": [1,2]}"), doctest::Contains("must be scalar"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json_text("not json"), doctest::Contains("invalid JSON"), ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json_text("[1,2]"), doctest::Contains("top level"), ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json_text("{\"soup.m\": \"ten\"}"), doctest::Contains("integer"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json_text("{\"soup.m\": 2.5}"), doctest::Contains("integer"), ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json_text("{\"zoo.lr\": \"fast\"}"), doctest::Contains("number"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json_text("{\"eval.defenses\": 1}"), doctest::Contains("boolean"),
                         ConfigError);
}

TEST_CASE("config validation rejects out-of-range settings") {
    CHECK_THROWS_AS(config_from_json_text("{\"dataset.classes\": 1}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"zoo.train_fraction\": 1.5}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"soup.strategy\": \"chunky\"}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"soup.m\": 4, \"soup.greedy_k\": 5}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"zoo.surrogate_arch\": \"resnet152\"}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"experiment.out_dir\": \"\"}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"eval.defense_bits\": 0}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"attack.kinds\": \"MI,,DIM\"}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"attack.kinds\": \"NOPE\"}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"dataset.source\": \"imagenet\"}"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{\"dataset.source\": \"idx\"}"), ConfigError);  // missing paths
}

TEST_CASE("config survives a full render-and-parse cycle") {
    auto cfg = config_from_json_text(
        "{\"attack.epsilon\": 0.0625, \"soup.strategy\": \"greedy\", \"soup.greedy_k\": 3,"
        " \"experiment.seed\": 777, \"zoo.cross_arch\": \"conv1w16\"}");
    std::string rendered = config_to_json(cfg);
    auto back = config_from_json_text(rendered);
    CHECK(back.canonical_dump() == cfg.canonical_dump());
    CHECK(back.hash() == cfg.hash());

    auto defaults = config_from_json_text("{}");
    CHECK(defaults.hash() != cfg.hash());
    CHECK(defaults.canonical_dump() == config_from_json_text("{}").canonical_dump());  // stable

    // dump is sorted, one key=value per line
    std::string dump = cfg.canonical_dump();
    CHECK(dump.find("attack.epsilon=0.0625") != std::string::npos);
    CHECK(dump.find("experiment.seed=777") != std::string::npos);
    std::size_t first_attack = dump.find("attack.");
    std::size_t first_zoo = dump.find("zoo.");
    CHECK(first_attack < first_zoo);
}

TEST_CASE("config files load from disk") {
    Scratch s("cfg_file");
    write_text_file(s / "ok.json", "{\"experiment.seed\": 9}\n");
    auto cfg = load_config(s / "ok.json");
    CHECK(cfg.seed == 9);
    CHECK_THROWS_AS(load_config(s / "missing.json"), ConfigError);
}

TEST_CASE("command line exit codes follow the contract") {
    Scratch s("cli");
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 2);                 // missing subcommand
    CHECK(run_cli("dance --config x") == 2); // unknown subcommand
    CHECK(run_cli("eval") == 2);             // missing required --config
    CHECK(run_cli("eval --config " + (s / "missing.json")) == 2);

    write_text_file(s / "bad.json", "{\"attack.strength\": 1}\n");
    CHECK(run_cli("eval --config " + (s / "bad.json")) == 2);

    // running stages out of order is a usage problem, flagged with a hint
    fs::create_directories(s.dir / "empty_out");
    write_text_file(s / "thin.json",
                    "{\"dataset.count\": 64, \"zoo.test_count\": 16, \"experiment.out_dir\": \"" +
                        (s / "empty_out") + "\"}\n");
    CHECK(run_cli("eval --config " + (s / "thin.json")) == 2);

    // seed override must reject garbage at parse time
    CHECK(run_cli("eval --config " + (s / "thin.json") + " --seed notanumber") == 2);

    // a dataset that fails to parse is a genuine runtime error
    write_text_file(s / "garbage.idx", "this is not an idx file at all");
    write_text_file(s / "corrupt.json",
                    "{\"dataset.source\": \"idx\", \"dataset.idx_images\": \"" + (s / "garbage.idx") +
                        "\", \"dataset.idx_labels\": \"" + (s / "garbage.idx") +
                        "\", \"experiment.out_dir\": \"" + (s / "empty_out") + "\"}\n");
    CHECK(run_cli("train --config " + (s / "corrupt.json")) == 1);
}
