#pragma once

// Downstream use of concept codes: a sparse linear probe over pooled concept
// activations with per-concept explanations, and open-vocabulary segmentation
// of SAE reconstructions with per-segment concept attributions.

#include "insight/common.hpp"
#include "insight/guided_pooling.hpp"
#include "insight/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace insight {

enum class PoolMode : std::uint8_t { max_mean, max_only };

std::string pool_mode_name(PoolMode mode);
PoolMode parse_pool_mode(const std::string& text);

/// [max over patches || mean over patches] per concept (length 2m), or the max
/// half alone. With a threshold, activations below it are zeroed first.
Vector pool(const ConceptCodes& codes, PoolMode mode = PoolMode::max_mean,
            std::optional<double> threshold = std::nullopt);

struct LinearProbe {
    Matrix weights; // features x classes
    Vector bias;    // classes
    double l1 = 0.0;
    PoolMode mode = PoolMode::max_mean;
    std::vector<std::string> class_names;

    std::size_t class_count() const { return static_cast<std::size_t>(bias.size()); }
    std::size_t feature_count() const { return static_cast<std::size_t>(weights.rows()); }
    std::size_t concept_count() const { return mode == PoolMode::max_mean ? feature_count() / 2 : feature_count(); }
    Vector logits(const Vector& pooled) const;
    std::size_t predict(const Vector& pooled) const;
};

struct ProbeLossResult {
    double loss = 0.0; // mean cross-entropy + l1 * ||W||_1
    Matrix grad_weights;
    Vector grad_bias;
};

/// Exact gradient of the cross-entropy term; the L1 term uses sign(w) with sign(0) = 0.
ProbeLossResult probe_loss_and_gradient(const LinearProbe& probe, const Matrix& features,
                                        const std::vector<std::size_t>& labels);

double probe_accuracy(const LinearProbe& probe, const Matrix& features, const std::vector<std::size_t>& labels);

struct ProbeConfig {
    double lr = 1e-4;
    std::size_t batch_size = 1024;
    std::size_t epochs = 100;
    double l1 = 0.1;
    double weight_decay = 0.0;
    double holdout_fraction = 0.1;
    PoolMode mode = PoolMode::max_mean;
    std::uint64_t seed = 0;
};

struct ProbeEpoch {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double holdout_accuracy = 0.0;
};

struct ProbeTrainResult {
    LinearProbe probe;     // best holdout-accuracy checkpoint
    std::size_t best_epoch = 0;
    double holdout_accuracy = 0.0;
    std::vector<ProbeEpoch> log;
    std::vector<std::size_t> holdout; // row indices held out
};

/// Rows of `features` are pooled vectors; `labels` are class indices. Throws
/// DataError when fewer than two classes are present.
ProbeTrainResult train_probe(const Matrix& features, const std::vector<std::size_t>& labels,
                             const ProbeConfig& config);

struct ConceptContribution {
    std::size_t concept_id = 0;
    double contribution = 0.0;
    double percent = 0.0; // share of the total positive contribution
};

struct Explanation {
    std::size_t predicted_class = 0;
    Vector logits;
    double bias = 0.0;                              // bias of the predicted class
    double contribution_sum = 0.0;                  // over every concept, before truncation
    std::vector<ConceptContribution> contributions; // nonzero, descending, at most top_n
};

/// top_n = 0 keeps every nonzero contribution.
Explanation classify_explain(const LinearProbe& probe, const Vector& pooled, std::size_t top_n = 0);

void save_probe(const std::filesystem::path& dir, const LinearProbe& probe);
LinearProbe load_probe(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------

/// Unit-norm text embeddings; an optional background entry competes with them.
struct LabelBank {
    std::vector<std::string> names;
    Matrix embeddings; // labels x d, unit rows
    std::optional<Vector> background;

    std::size_t size() const { return names.size(); }
};

/// Reads an IEF1 (L, d) tensor whose ".tsv" sidecar lists one name per line. The entry named `background_name`, if given, becomes the
/// background prompt instead of a label.
LabelBank load_label_bank(const std::filesystem::path& path, const std::string& background_name = "");
void save_label_bank(const std::filesystem::path& path, const std::vector<std::string>& names,
                     const Matrix& embeddings);

struct SegmentOptions {
    bool background_prompt = false;
    bool thresholded = false;
};

constexpr std::int64_t kBackgroundLabel = -1;

struct SegmentationResult {
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::vector<std::int64_t> labels; // per patch; kBackgroundLabel for background
    ConceptCodes codes;
    SegmentOptions options;
};

/// Labels each patch by the bank entry most cosine-similar to its SAE
/// reconstruction. Unthresholded codes keep every positive pre-activation;
/// thresholded codes use the model's stored inference threshold.
SegmentationResult segment(const SaeModel& model, const PatchGrid& grid, const LabelBank& bank,
                           const SegmentOptions& options = {});

/// Mean over patches assigned `label` of z_c * cos(dict_c, label embedding), descending.
std::vector<ConceptContribution> explain_segment(const SegmentationResult& result, const SaeModel& model,
                                                 const LabelBank& bank, std::size_t label, std::size_t top_n = 0);

/// Nearest-neighbour upsampling of a per-patch label map to pixel resolution.
std::vector<std::int64_t> upsample_labels(const std::vector<std::int64_t>& patch_labels, std::size_t grid_h,
                                          std::size_t grid_w, std::size_t height, std::size_t width);

/// Dataset-level mean IoU over classes 0..class_count-1 that occur in either
/// prediction or ground truth; ground-truth pixels < 0 are ignored.
double mean_iou(const std::vector<std::vector<std::int64_t>>& predicted,
                const std::vector<std::vector<std::int64_t>>& truth, std::size_t class_count);

std::string segment_attribution_json(const SegmentationResult& result, const SaeModel& model, const LabelBank& bank,
                                     std::size_t top_n);

} // namespace insight
