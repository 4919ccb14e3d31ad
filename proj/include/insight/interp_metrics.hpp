#pragma once

// Pixel-level interpretability metrics against annotation rasters: Locality,
// Consistency (both reported x100) and Impurity (mean activation entropy over labels).

#include "insight/common.hpp"
#include "insight/sae.hpp"
#include "insight/tensor_store.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace insight {

struct ConceptMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> magnitude; // row-major, upsampled activation values

    std::vector<std::uint8_t> mask() const;
};

/// Cell index read by each of `pixels` positions along one axis of `cells`
/// cells: floor((p + 0.5) * cells / pixels).
std::vector<std::size_t> source_cells(std::size_t pixels, std::size_t cells);

/// Nearest-neighbour replication sampled at pixel centres: pixel row y reads
/// patch row floor((y + 0.5) * grid_h / height), likewise for columns.
ConceptMask upsample(const ConceptCodes& codes, std::size_t concept_id, std::size_t grid_h, std::size_t grid_w,
                     std::size_t height, std::size_t width);

/// |a and b| / |a or b|; 0 when the union is empty.
double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

/// Codes for one image (grid_h * grid_w patches, row-major) with its annotation.
struct MetricImage {
    ConceptCodes codes;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    AnnotationRaster annotation;
};

double locality(const std::vector<MetricImage>& images);
double consistency(const std::vector<MetricImage>& images);
double impurity(const std::vector<MetricImage>& images, std::size_t min_images);

struct LabelBreakdown {
    std::int64_t label = 0;
    std::string name;
    std::size_t images = 0;         // images containing the label
    double mean_max_iou = 0.0;      // mean over those images of the best concept IoU
    double consistency = 0.0;       // best I_l^c over concepts
    std::int64_t best_concept = -1; // -1 when no concept was ever co-present
};

struct ConceptBreakdown {
    std::size_t concept_id = 0;
    std::size_t images_active = 0;
    bool counted = false;      // active in at least min_images images
    double mean_entropy = 0.0; // meaningful only when counted
};

struct MetricReport {
    double locality = 0.0;
    double consistency = 0.0;
    double impurity = 0.0;
    std::size_t image_count = 0;
    std::size_t impurity_concepts = 0;
    std::vector<LabelBreakdown> labels;
    std::vector<ConceptBreakdown> concepts;
};

MetricReport evaluate_metrics(const std::vector<MetricImage>& images, std::size_t min_images);

std::string report_to_json(const MetricReport& report);
/// Writes metrics.json, labels.csv and concepts.csv under `dir`.
void write_report(const std::filesystem::path& dir, const MetricReport& report);

} // namespace insight
