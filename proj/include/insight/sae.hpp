#pragma once

// Matryoshka BatchTopK sparse autoencoder.
//
//   z_pre = (x - b_dec) W_enc + b_enc
//   z     = ReLU(BatchTopK(z_pre))           (B*k survivors per batch)
//   x_hat = z[:, :l] W_dec + b_dec           (prefix decode for shell bound l)
//
// Training minimizes sum_j mean_b ||x_hat_j - x||^2 over the shell bounds l_j,
// plus aux_coeff * ||r - z_dead W_dec||^2 / ||r - mean(r)||^2 for dead concepts.

#include "insight/common.hpp"
#include "insight/tensor_store.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace insight {

struct Activation {
    std::uint32_t index;
    double value;

    bool operator==(const Activation&) const = default;
};

/// Sparse per-patch concept activations; every stored value is strictly positive.
struct ConceptCodes {
    std::size_t concept_count = 0;
    std::vector<std::vector<Activation>> patches;

    std::size_t patch_count() const { return patches.size(); }
    std::size_t nonzero_count() const;
    Matrix to_dense() const;
    static ConceptCodes from_dense(const Matrix& z);
};

/// Default Matryoshka group ratios (six nested groups).
inline const std::vector<double> kDefaultShellRatios{0.008, 0.03, 0.06, 0.12, 0.24, 0.543};

/// Shell sizes round(ratio * m), at least 1, with the last shell absorbing the
/// remainder; returns the cumulative (strictly ascending) bounds ending at m.
std::vector<std::size_t> shell_bounds_from_ratios(std::size_t m, const std::vector<double>& ratios);

struct SaeModel {
    Matrix enc_weight; // d x m
    Vector enc_bias;   // m
    Matrix dec_weight; // m x d, row i is the dictionary vector of concept i
    Vector dec_bias;   // d
    std::vector<std::size_t> shell_bounds;
    std::size_t k = 1;
    std::optional<double> inference_threshold;
    std::uint64_t seed = 0;

    std::size_t input_dim() const { return static_cast<std::size_t>(dec_weight.cols()); }
    std::size_t concept_count() const { return static_cast<std::size_t>(dec_weight.rows()); }

    /// Unit-sphere dictionary rows, W_enc = W_dec^T, zero biases.
    static SaeModel initialize(std::size_t d, std::size_t m, std::size_t k,
                               std::vector<std::size_t> shell_bounds, std::uint64_t seed);

    void validate() const;
};

Matrix encode_pre(const SaeModel& model, const Matrix& batch);

/// Row-major B x m keep-mask produced by BatchTopK selection (before ReLU).
struct TopKSelection {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::vector<std::uint8_t> keep;
    /// Smallest selected pre-activation (the B*k-th largest); NaN when nothing is selected.
    double kth_value = 0.0;

    bool kept(Eigen::Index r, Eigen::Index c) const { return keep[static_cast<std::size_t>(r * cols + c)] != 0; }
    std::size_t kept_count() const;
};

/// Keeps the B*k largest entries of `pre` across the whole batch; ties favour
/// the lower flat index.
TopKSelection select_batch_topk(const Matrix& pre, std::size_t k);

/// Applies a selection and ReLU; returns dense B x m codes.
Matrix apply_selection(const Matrix& pre, const TopKSelection& selection);

ConceptCodes batch_topk(const Matrix& pre, std::size_t k);

/// Prefix decode; `prefix_bound` must be one of the model's shell bounds.
Matrix decode(const SaeModel& model, const ConceptCodes& codes,
              std::optional<std::size_t> prefix_bound = std::nullopt);
Matrix decode_dense(const SaeModel& model, const Matrix& z,
                    std::optional<std::size_t> prefix_bound = std::nullopt);

struct SaeGradients {
    Matrix enc_weight;
    Vector enc_bias;
    Matrix dec_weight;
    Vector dec_bias;

    static SaeGradients zeros_like(const SaeModel& model);
};

struct SaeLossResult {
    double rec = 0.0;
    double aux = 0.0;
    /// Gradient of rec_weight * rec + aux_weight * aux.
    SaeGradients grads;
};

/// Tracks samples since each concept last fired.
class DeadTracker {
public:
    static constexpr std::uint64_t kDefaultThreshold = 10'000'000;

    DeadTracker(std::size_t concept_count, std::uint64_t dead_threshold = kDefaultThreshold);

    /// `codes` are the batch's post-selection activations (B x m).
    void update(const Matrix& codes);

    std::vector<std::uint8_t> dead_mask() const;
    std::size_t dead_count() const;
    std::uint64_t dead_threshold() const { return dead_threshold_; }
    const std::vector<std::uint64_t>& samples_since_fire() const { return counters_; }
    /// Test hook: overrides one counter.
    void set_counter(std::size_t index, std::uint64_t value) { counters_.at(index) = value; }

private:
    std::vector<std::uint64_t> counters_;
    std::uint64_t dead_threshold_;
};

/// Full objective with a fixed selection mask and dead set. Gradients flow
/// through selected, positive pre-activations only; the residual in the aux
/// term is differentiated as well, so the gradient is exact for the printed
/// expression with the mask held fixed.
SaeLossResult sae_objective(const SaeModel& model, const Matrix& batch, const TopKSelection& selection,
                            const std::vector<std::uint8_t>& dead_mask, double rec_weight,
                            double aux_weight);

/// L_rec and its gradient, selecting the BatchTopK mask from the current model.
SaeLossResult matryoshka_loss(const SaeModel& model, const Matrix& batch);
SaeLossResult matryoshka_loss(const SaeModel& model, const Matrix& batch, const TopKSelection& selection);

/// L_aux for the tracker's dead set (0 when none are dead or the batch residual has no variance).
double aux_loss(const SaeModel& model, const Matrix& batch, const DeadTracker& tracker);
SaeLossResult aux_loss(const SaeModel& model, const Matrix& batch, const TopKSelection& selection,
                       const std::vector<std::uint8_t>& dead_mask);

/// 1 - sum ||x - x_hat||^2 / sum ||x - mean(x)||^2.
double fve(const Matrix& x, const Matrix& x_hat);
/// FVE of the model encoding `patches` as one BatchTopK batch.
double fve(const SaeModel& model, const Matrix& patches);

/// Mean squared reconstruction error per shell prefix (BatchTopK over all patches).
std::vector<double> shell_errors(const SaeModel& model, const Matrix& patches);

/// Batch-size independent codes: keep pre-activations >= threshold, then ReLU.
ConceptCodes infer_codes(const SaeModel& model, const Matrix& patches);
ConceptCodes infer_codes(const SaeModel& model, const Matrix& patches, double threshold);

struct SaeTrainConfig {
    std::size_t m = 8192;
    std::size_t k = 12;
    std::vector<double> shell_ratios = kDefaultShellRatios;
    double lr = 1e-4;
    std::size_t batch_patches = 16268;
    std::size_t epochs = 3;
    double aux_coeff = 1.0 / 32.0;
    std::uint64_t dead_threshold = DeadTracker::kDefaultThreshold;
    double holdout_fraction = 0.1;
    double threshold_decay = 0.999;
    std::uint64_t seed = 0;
};

struct SaeLogRow {
    std::size_t step;
    double rec;
    double aux;
    std::size_t dead_count;
    double fve;
};

struct SaeTrainResult {
    SaeModel model;
    std::vector<SaeLogRow> log;
    /// FVE on the held-out patches (NaN when the holdout has < 2 patches).
    double validation_fve = 0.0;
    Matrix holdout;
};

SaeTrainResult train_sae(const Matrix& patches, const SaeTrainConfig& config);
SaeTrainResult train_sae(const DatasetManifest& manifest, const SaeTrainConfig& config);

/// Stacks every image's embeddings into one (images * N) x d matrix.
Matrix load_all_patches(const DatasetManifest& manifest);

void save_sae(const std::filesystem::path& dir, const SaeModel& model);
SaeModel load_sae(const std::filesystem::path& dir);
void write_training_log(const std::filesystem::path& path, const std::vector<SaeLogRow>& rows);

} // namespace insight
