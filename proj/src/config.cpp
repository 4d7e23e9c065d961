#include "tsmamba/config.hpp"

#include <fstream>
#include <set>

#include "tsmamba/checkpoint.hpp"
#include "tsmamba/error.hpp"

namespace tsmamba {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    require(j.is_object(), ErrorKind::InvalidConfig, where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        require(allowed.count(key) > 0, ErrorKind::InvalidConfig, "unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        require(it->is_number_unsigned(), ErrorKind::InvalidConfig,
                where + "." + key + " must be a non-negative integer");
    } else if constexpr (std::is_same_v<T, bool>) {
        require(it->is_boolean(), ErrorKind::InvalidConfig, where + "." + key + " must be a boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
        require(it->is_number(), ErrorKind::InvalidConfig, where + "." + key + " must be a number");
    }
    try {
        out = it->get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::InvalidConfig, where + "." + key + ": " + e.what());
    }
}

std::string split_mode_name(SplitMode m) {
    switch (m) {
        case SplitMode::Fraction: return "fraction";
        case SplitMode::EttHour: return "ett_hour";
        case SplitMode::EttMinute: return "ett_minute";
    }
    return "fraction";
}

}  // namespace

StageConfig stage_config_from_json(const json& j, Stage stage) {
    const std::string where(to_string(stage));
    check_keys(j,
               {"lr_new", "lr_backbone", "epochs", "batch_size", "weight_decay", "grad_clip_norm",
                "freeze_mamba_blocks", "enable_xchannel", "min_samples_for_xchannel", "steps_per_epoch", "max_steps",
                "window_stride", "probe_samples", "cosine_schedule"},
               where);
    StageConfig c = StageConfig::defaults(stage);
    read(j, "lr_new", c.lr_new, where);
    read(j, "lr_backbone", c.lr_backbone, where);
    read(j, "epochs", c.epochs, where);
    read(j, "batch_size", c.batch_size, where);
    read(j, "weight_decay", c.weight_decay, where);
    read(j, "grad_clip_norm", c.grad_clip_norm, where);
    read(j, "freeze_mamba_blocks", c.freeze_mamba_blocks, where);
    read(j, "enable_xchannel", c.enable_xchannel, where);
    read(j, "min_samples_for_xchannel", c.min_samples_for_xchannel, where);
    read(j, "steps_per_epoch", c.steps_per_epoch, where);
    read(j, "max_steps", c.max_steps, where);
    read(j, "window_stride", c.window_stride, where);
    read(j, "probe_samples", c.probe_samples, where);
    read(j, "cosine_schedule", c.cosine_schedule, where);
    require(c.min_samples_for_xchannel >= 1, ErrorKind::InvalidConfig, where + ".min_samples_for_xchannel must be >= 1");
    c.validate();
    return c;
}

json stage_config_to_json(const StageConfig& c) {
    return json{{"lr_new", c.lr_new},
                {"lr_backbone", c.lr_backbone},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"weight_decay", c.weight_decay},
                {"grad_clip_norm", c.grad_clip_norm},
                {"freeze_mamba_blocks", c.freeze_mamba_blocks},
                {"enable_xchannel", c.enable_xchannel},
                {"min_samples_for_xchannel", c.min_samples_for_xchannel},
                {"steps_per_epoch", c.steps_per_epoch},
                {"max_steps", c.max_steps},
                {"window_stride", c.window_stride},
                {"probe_samples", c.probe_samples},
                {"cosine_schedule", c.cosine_schedule}};
}

const StageConfig& RunConfig::stage(Stage s) const {
    switch (s) {
        case Stage::Stage1: return stage1;
        case Stage::Stage2: return stage2;
        case Stage::Finetune: return finetune;
    }
    return stage1;
}

void RunConfig::validate() const {
    model.validate();
    stage1.validate();
    stage2.validate();
    finetune.validate();
    split.validate();
}

RunConfig run_config_from_json(const json& j) {
    check_keys(j, {"seed", "threads", "model", "stage1", "stage2", "finetune", "split", "data", "paths"}, "config");
    RunConfig c;
    read(j, "seed", c.seed, "config");
    read(j, "threads", c.threads, "config");
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    if (j.contains("stage1")) c.stage1 = stage_config_from_json(j["stage1"], Stage::Stage1);
    if (j.contains("stage2")) c.stage2 = stage_config_from_json(j["stage2"], Stage::Stage2);
    if (j.contains("finetune")) c.finetune = stage_config_from_json(j["finetune"], Stage::Finetune);
    if (j.contains("split")) {
        const json& s = j["split"];
        check_keys(s, {"train_frac", "val_frac", "test_frac", "mode"}, "split");
        read(s, "train_frac", c.split.train_frac, "split");
        read(s, "val_frac", c.split.val_frac, "split");
        read(s, "test_frac", c.split.test_frac, "split");
        std::string mode = "fraction";
        read(s, "mode", mode, "split");
        if (mode == "fraction") c.split.mode = SplitMode::Fraction;
        else if (mode == "ett_hour") c.split.mode = SplitMode::EttHour;
        else if (mode == "ett_minute") c.split.mode = SplitMode::EttMinute;
        else fail(ErrorKind::InvalidConfig, "split.mode must be fraction, ett_hour or ett_minute");
    }
    if (j.contains("data")) {
        const json& d = j["data"];
        check_keys(d, {"date_column", "forward_fill", "standardize"}, "data");
        if (d.contains("date_column") && !d["date_column"].is_null()) {
            bool flag = false;
            read(d, "date_column", flag, "data");
            c.data.date_column = flag;
        }
        read(d, "forward_fill", c.data.forward_fill, "data");
        read(d, "standardize", c.data.standardize, "data");
    }
    if (j.contains("paths")) {
        const json& p = j["paths"];
        check_keys(p, {"data", "init", "out", "log"}, "paths");
        read(p, "data", c.paths.data, "paths");
        read(p, "init", c.paths.init, "paths");
        read(p, "out", c.paths.out, "paths");
        read(p, "log", c.paths.log, "paths");
    }
    c.validate();
    return c;
}

json run_config_to_json(const RunConfig& c) {
    return json{{"seed", c.seed},
                {"threads", c.threads},
                {"model", model_config_to_json(c.model)},
                {"stage1", stage_config_to_json(c.stage1)},
                {"stage2", stage_config_to_json(c.stage2)},
                {"finetune", stage_config_to_json(c.finetune)},
                {"split",
                 {{"train_frac", c.split.train_frac},
                  {"val_frac", c.split.val_frac},
                  {"test_frac", c.split.test_frac},
                  {"mode", split_mode_name(c.split.mode)}}},
                {"data",
                 {{"date_column", c.data.date_column ? json(*c.data.date_column) : json(nullptr)},
                  {"forward_fill", c.data.forward_fill},
                  {"standardize", c.data.standardize}}},
                {"paths", {{"data", c.paths.data}, {"init", c.paths.init}, {"out", c.paths.out}, {"log", c.paths.log}}}};
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::InvalidConfig, "cannot open config " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorKind::InvalidConfig, path + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace tsmamba
