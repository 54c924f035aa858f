#pragma once

#include <filesystem>
#include <string>

#include "rfedit/edit.hpp"
#include "rfedit/flow.hpp"
#include "rfedit/model.hpp"

namespace rfedit::config {

// Whole-workflow configuration. Serialized as line-oriented key=value text
// with [section] headers; unknown keys are rejected.
struct RunConfig {
    net::ModelConfig model;
    flow::TrainConfig train;
    edit::EditSchedule schedule;

    int dataset_count = 240;
    int canvas = 64;
    uint64_t seed = 1;

    std::string dataset_dir;
    std::string checkpoint;
    std::string out_dir;

    void apply(const std::string& key, const std::string& value);  // "section.key"
    std::string serialize() const;
    uint64_t hash() const;

    static RunConfig from_file(const std::filesystem::path& path);
    void write_file(const std::filesystem::path& path) const;
};

}  // namespace rfedit::config
