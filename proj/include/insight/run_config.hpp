#pragma once

// Run configuration shared by every CLI subcommand. Files are JSON or TOML
// (chosen by extension) with one table per stage; unknown keys are rejected.
//
//   seed = 7
//   [sae]
//   m = 32
//   k = 3

#include "insight/concept_naming.hpp"
#include "insight/downstream.hpp"
#include "insight/guided_pooling.hpp"
#include "insight/sae.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace insight {

struct RunConfig {
    std::uint64_t seed = 0;

    AffinityTrainConfig affinity;
    SaeTrainConfig sae;

    double graph_tau = kDefaultEdgeThreshold;

    NamingConfig naming;
    std::filesystem::path vocabulary; // IEF1 (|V|, 3, 10, d) + sidecar

    std::size_t metrics_min_images = 5;

    ProbeConfig probe;
    std::filesystem::path probe_labels; // TSV image_id<TAB>class
    bool probe_thresholded = false;

    std::filesystem::path segment_labels; // IEF1 (L, d) + sidecar names
    std::string background;               // name of the background entry, empty for none
    bool segment_thresholded = false;

    std::size_t top_n = 10;
    bool report_svg = true;

    /// Pushes the global seed into every stage config.
    void apply_seed(std::uint64_t value);

    nlohmann::ordered_json to_json() const;
};

/// Relative paths inside the document resolve against `base_dir`.
RunConfig run_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
nlohmann::json parse_toml_document(const std::string& text, const std::string& origin);
RunConfig load_run_config(const std::filesystem::path& path);

} // namespace insight
