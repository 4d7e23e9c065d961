#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsmamba/data.hpp"
#include "tsmamba/model.hpp"
#include "tsmamba/training.hpp"

namespace tsmamba {

struct DataOptions {
    /// Unset: detected from the first data row.
    std::optional<bool> date_column;
    bool forward_fill = false;
    /// Per-channel z-scoring with train-split statistics before windowing.
    bool standardize = true;
};

struct PathOptions {
    std::vector<std::string> data;
    std::string init;
    std::string out;
    std::string log;
};

/// One training run. Every object is parsed strictly: unknown keys are rejected.
struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    ModelConfig model;
    StageConfig stage1 = StageConfig::defaults(Stage::Stage1);
    StageConfig stage2 = StageConfig::defaults(Stage::Stage2);
    StageConfig finetune = StageConfig::defaults(Stage::Finetune);
    SplitSpec split;
    DataOptions data;
    PathOptions paths;

    const StageConfig& stage(Stage s) const;
    void validate() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

StageConfig stage_config_from_json(const nlohmann::json& j, Stage stage);
nlohmann::json stage_config_to_json(const StageConfig& cfg);

}  // namespace tsmamba
