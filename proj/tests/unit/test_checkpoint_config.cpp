#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tsmamba/checkpoint.hpp"
#include "tsmamba/config.hpp"

using namespace tsmamba;
using nlohmann::json;
using tsmamba::testing::error_kind_of;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.lookback = 32;
    c.horizon = 4;
    c.patch_len = 8;
    c.d_model = 8;
    c.n_layers = 2;
    c.d_state = 4;
    c.head_dim = 3;
    return c;
}

struct TempFile {
    std::filesystem::path path;
    explicit TempFile(const std::string& stem) {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() / (stem + std::to_string(rd()) + ".ckpt");
    }
    ~TempFile() {
        std::filesystem::remove(path);
        std::filesystem::remove(path.string() + ".tmp");
    }
    std::string str() const { return path.string(); }
    std::string bytes() const {
        std::ifstream in(path, std::ios::binary);
        return {std::istreambuf_iterator<char>(in), {}};
    }
    void write(const std::string& b) const { std::ofstream(path, std::ios::binary) << b; }
};

std::string error_message(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST(Checkpoint, RoundtripIsBitExact) {
    ModelConfig c = small_config();
    TSMambaModel m(c, 1);
    std::mt19937_64 rng(1);
    m.enable_xchannel(3, rng);
    TempFile f("roundtrip");
    save_checkpoint(f.str(), m, "finetune");
    EXPECT_FALSE(std::filesystem::exists(f.str() + ".tmp"));
    const Checkpoint ck = load_checkpoint(f.str());
    EXPECT_EQ(ck.stage, "finetune");
    EXPECT_EQ(model_config_to_json(ck.config), model_config_to_json(m.config()));
    ASSERT_EQ(ck.model.params().size(), m.params().size());
    for (const auto& p : m.params().all()) {
        const Parameter& q = ck.model.params().at(p.name);
        EXPECT_TRUE(bit_identical(q.value, p.value)) << p.name;
        EXPECT_EQ(q.lr_group, p.lr_group) << p.name;
    }
    // Saving the loaded model reproduces the file byte for byte.
    TempFile g("roundtrip2");
    save_checkpoint(g.str(), ck.model, "finetune");
    EXPECT_EQ(f.bytes(), g.bytes());
}

TEST(Checkpoint, Layout) {
    TSMambaModel m(small_config(), 2);
    TempFile f("layout");
    save_checkpoint(f.str(), m, "stage2");
    const std::string b = f.bytes();
    ASSERT_GT(b.size(), 16u);
    EXPECT_EQ(b.substr(0, 8), "TSMBCKPT");
    std::uint64_t n = 0;
    for (int i = 7; i >= 0; --i) n = (n << 8) | static_cast<unsigned char>(b[8 + i]);
    const json manifest = json::parse(b.substr(16, n));
    EXPECT_EQ(manifest["format_version"], 1);
    EXPECT_EQ(manifest["stage"], "stage2");
    EXPECT_EQ(manifest["model_config"]["d_model"], 8);
    std::size_t payload = 0;
    for (const auto& [name, e] : manifest["tensors"].items()) {
        EXPECT_EQ(e["dtype"], "f64");
        const Tensor& v = m.params().at(name).value;
        EXPECT_EQ(e["shape"].get<Shape>(), v.shape());
        EXPECT_EQ(e["byte_len"].get<std::size_t>(), v.size() * 8);
        const std::size_t off = 16 + n + e["byte_offset"].get<std::size_t>();
        Real first = 0.0;
        std::memcpy(&first, b.data() + off, 8);
        EXPECT_EQ(first, v[0]) << name;
        payload += v.size() * 8;
    }
    EXPECT_EQ(b.size(), 16 + n + payload);
    EXPECT_EQ(read_checkpoint_manifest(f.str()), manifest);
}

TEST(Checkpoint, TruncatedFile) {
    TSMambaModel m(small_config(), 3);
    TempFile f("trunc");
    save_checkpoint(f.str(), m, "stage1");
    const std::string full = f.bytes();
    for (std::size_t keep : {std::size_t{0}, std::size_t{10}, std::size_t{40}, full.size() - 8}) {
        f.write(full.substr(0, keep));
        EXPECT_EQ(error_kind_of([&] { load_checkpoint(f.str()); }), ErrorKind::CorruptCheckpoint) << keep;
    }
}

TEST(Checkpoint, ManifestViolations) {
    const NamedTensors tensors{{"a", Tensor::from({1.0, 2.0})}, {"b", Tensor({2, 2}, 3.0)}};
    const std::string good = encode_container(json{{"stage", "tensors"}}, tensors);
    const DecodedContainer dc = decode_container(good);
    ASSERT_EQ(dc.tensors.size(), 2u);
    EXPECT_EQ(dc.tensors[1].first, "b");
    EXPECT_TRUE(bit_identical(dc.tensors[1].second, tensors[1].second));

    auto rewrite = [&](const std::function<void(json&)>& edit) {
        json m = dc.manifest;
        edit(m);
        const std::string text = m.dump();
        std::string out = good.substr(0, 8);
        const std::uint64_t n = text.size();
        out.append(reinterpret_cast<const char*>(&n), 8);
        std::uint64_t old = 0;
        std::memcpy(&old, good.data() + 8, 8);
        return out + text + good.substr(16 + old);
    };
    const std::string wrong_len = rewrite([](json& m) { m["tensors"]["b"]["byte_len"] = 24; });
    EXPECT_EQ(error_kind_of([&] { decode_container(wrong_len); }), ErrorKind::CorruptCheckpoint);
    EXPECT_NE(error_message([&] { decode_container(wrong_len); }).find("tensor b"), std::string::npos);

    const std::string outside = rewrite([](json& m) { m["tensors"]["b"]["byte_offset"] = 24; });
    EXPECT_NE(error_message([&] { decode_container(outside); }).find("outside the payload"), std::string::npos);
    const std::string overlap = rewrite([](json& m) { m["tensors"]["b"]["byte_offset"] = 8; m["tensors"]["b"]["shape"] = {1}; m["tensors"]["b"]["byte_len"] = 8; });
    EXPECT_NE(error_message([&] { decode_container(overlap); }).find("overlaps"), std::string::npos);
    const std::string dtype = rewrite([](json& m) { m["tensors"]["a"]["dtype"] = "f32"; });
    EXPECT_EQ(error_kind_of([&] { decode_container(dtype); }), ErrorKind::CorruptCheckpoint);
    const std::string version = rewrite([](json& m) { m["format_version"] = 2; });
    EXPECT_EQ(error_kind_of([&] { decode_container(version); }), ErrorKind::VersionMismatch);

    std::string magic = good;
    magic[0] = 'X';
    EXPECT_EQ(error_kind_of([&] { decode_container(magic); }), ErrorKind::CorruptCheckpoint);
}

TEST(Checkpoint, ShapeAndConfigMismatch) {
    TSMambaModel m(small_config(), 4);
    NamedTensors tensors;
    for (const auto& p : m.params().all()) tensors.emplace_back(p.name, p.value);
    tensors.pop_back();
    TempFile f("mismatch");
    f.write(encode_container(json{{"stage", "stage2"}, {"model_config", model_config_to_json(m.config())}}, tensors));
    EXPECT_EQ(error_kind_of([&] { load_checkpoint(f.str()); }), ErrorKind::CheckpointMismatch);

    json bad_cfg = model_config_to_json(m.config());
    bad_cfg["patch_len"] = 7;
    f.write(encode_container(json{{"stage", "stage2"}, {"model_config", bad_cfg}}, tensors));
    EXPECT_EQ(error_kind_of([&] { load_checkpoint(f.str()); }), ErrorKind::CorruptCheckpoint);
    EXPECT_EQ(error_kind_of([&] { load_checkpoint("/nonexistent/dir/x.ckpt"); }), ErrorKind::IoError);
}

TEST(Checkpoint, NamedTensorFiles) {
    TempFile f("tensors");
    save_tensors(f.str(), {{"layers.0.A_log", Tensor({2, 2}, 0.5)}, {"layers.0.D_skip", Tensor::from({1.0})}});
    const auto t = load_tensors(f.str());
    ASSERT_EQ(t.size(), 2u);
    EXPECT_EQ(t.at("layers.0.A_log").shape(), (Shape{2, 2}));
    EXPECT_EQ(read_checkpoint_manifest(f.str())["stage"], "tensors");
    EXPECT_EQ(error_kind_of([&] { load_checkpoint(f.str()); }), ErrorKind::CorruptCheckpoint);
}

TEST(ModelConfigJson, StrictParsing) {
    const ModelConfig c = small_config();
    const json j = model_config_to_json(c);
    EXPECT_EQ(model_config_to_json(model_config_from_json(j)), j);
    json extra = j;
    extra["d_modle"] = 8;
    EXPECT_NE(error_message([&] { model_config_from_json(extra); }).find("d_modle"), std::string::npos);
    json neg = j;
    neg["d_model"] = -8;
    EXPECT_EQ(error_kind_of([&] { model_config_from_json(neg); }), ErrorKind::InvalidConfig);
    json combine = j;
    combine["combine"] = "mul";
    EXPECT_EQ(error_kind_of([&] { model_config_from_json(combine); }), ErrorKind::InvalidConfig);
    combine["combine"] = "concat";
    EXPECT_EQ(model_config_from_json(combine).combine, CombineMode::Concat);
}

TEST(RunConfigJson, StrictParsingAndDefaults) {
    const RunConfig defaults = run_config_from_json(json::object());
    EXPECT_EQ(defaults.stage2.lr_backbone, 1e-5);
    EXPECT_FALSE(defaults.data.date_column.has_value());
    EXPECT_EQ(run_config_to_json(run_config_from_json(run_config_to_json(defaults))), run_config_to_json(defaults));

    const json full = json::parse(R"({
        "seed": 7, "threads": 2,
        "model": {"lookback": 32, "patch_len": 8, "horizon": 4, "d_model": 8, "head_dim": 3},
        "stage1": {"epochs": 3, "batch_size": 8},
        "stage2": {"lr_new": 1e-3, "lr_backbone": 1e-4},
        "finetune": {"max_steps": 200},
        "split": {"train_frac": 0.6, "val_frac": 0.2, "test_frac": 0.2, "mode": "ett_hour"},
        "data": {"date_column": true, "forward_fill": true},
        "paths": {"data": ["a.csv", "b.csv"], "out": "x.ckpt"}
    })");
    const RunConfig r = run_config_from_json(full);
    EXPECT_EQ(r.seed, 7u);
    EXPECT_EQ(r.model.lookback, 32u);
    EXPECT_EQ(r.stage1.epochs, 3u);
    EXPECT_EQ(r.stage1.lr_new, 1e-3);
    EXPECT_EQ(r.stage(Stage::Finetune).max_steps, 200u);
    EXPECT_TRUE(r.stage(Stage::Finetune).freeze_mamba_blocks);
    EXPECT_EQ(r.split.mode, SplitMode::EttHour);
    EXPECT_EQ(*r.data.date_column, true);
    EXPECT_EQ(r.paths.data.size(), 2u);

    for (const char* bad : {R"({"sed": 1})", R"({"stage1": {"epoch": 1}})", R"({"split": {"mode": "weekly"}})",
                            R"({"data": {"ffill": true}})", R"({"paths": {"init": 3}})",
                            R"({"stage2": {"lr_new": 1e-5, "lr_backbone": 1e-3}})",
                            R"({"finetune": {"freeze_mamba_blocks": false}})",
                            R"({"stage1": {"batch_size": "32"}})", R"({"split": {"train_frac": 0.9}})", R"([1, 2])"}) {
        EXPECT_EQ(error_kind_of([&] { run_config_from_json(json::parse(bad)); }), ErrorKind::InvalidConfig) << bad;
    }
    EXPECT_EQ(error_kind_of([] { run_config_from_json(json::parse(R"({"model": {"patch_len": 7}})")); }),
              ErrorKind::PatchLengthMismatch);
}

TEST(RunConfigJson, LoadFromFile) {
    TempFile f("cfg");
    f.write("{\"seed\": 3}");
    EXPECT_EQ(load_run_config(f.str()).seed, 3u);
    f.write("{\"seed\": 3,");
    EXPECT_EQ(error_kind_of([&] { load_run_config(f.str()); }), ErrorKind::InvalidConfig);
    EXPECT_EQ(error_kind_of([&] { load_run_config("/nonexistent.json"); }), ErrorKind::InvalidConfig);
}
