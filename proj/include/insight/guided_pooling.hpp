#pragma once

// Affinity-guided pooling of patch embeddings and the 3x3 convolutional
// affinity head that predicts self-supervised affinities from backbone tokens.

#include "insight/common.hpp"
#include "insight/tensor_store.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace insight {

/// Row-major H x W grid of d-dimensional patch embeddings (row p = y * W + x).
struct PatchGrid {
    Matrix features;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;

    std::size_t patch_count() const { return grid_h * grid_w; }
    std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

    /// Throws DataError unless rows == grid_h * grid_w and all values are finite.
    void validate() const;
};

/// N x N inter-patch cosine similarity matrix.
using AffinityMatrix = Matrix;

/// 3x3 convolution from d input channels to d' output channels.
/// `kernel` is stored as 9 blocks of d x d' in (ky, kx) row-major tap order:
/// kernel.block(tap * d, 0, d, d') holds the weights for tap = ky * 3 + kx.
struct AffinityHead {
    Matrix kernel; // (9 * d) x d'
    Vector bias;   // d'

    std::size_t in_dim() const { return static_cast<std::size_t>(kernel.rows() / 9); }
    std::size_t out_dim() const { return static_cast<std::size_t>(kernel.cols()); }

    /// Uniform in +-1/sqrt(9d) for the kernel, zero bias.
    static AffinityHead initialize(std::size_t d, std::size_t d_prime, std::uint64_t seed);

    /// Checks shapes, d' <= d, and finiteness.
    void validate() const;
};

AffinityMatrix cosine_affinity(const PatchGrid& grid);

/// F+_p = sum_q A+_pq F_q / sum_q A+_pq with A+ = max(A, 0). Rows whose clamped
/// weights sum to zero keep their input feature and emit a warning.
PatchGrid guided_pool(const PatchGrid& grid, const AffinityMatrix& affinity);

/// Applies the 3x3 convolution (zero padded) and returns the N x d' projections.
Matrix apply_head(const PatchGrid& grid, const AffinityHead& head);

/// Outer product of the row-normalized head projections.
AffinityMatrix predict_affinity(const PatchGrid& grid, const AffinityHead& head);

constexpr double kDefaultAffinityGamma = 0.2;
constexpr double kBceClamp = 1e-6;

/// -mean over all N^2 entries of [D log p + (1-D) log(1-p)], with D = target > gamma
/// and p = clamp((predicted + 1) / 2, 1e-6, 1 - 1e-6).
double bce_affinity_loss(const AffinityMatrix& predicted, const AffinityMatrix& target,
                         double gamma = kDefaultAffinityGamma);

struct HeadGradients {
    Matrix kernel;
    Vector bias;
};

/// Loss of one image and its analytic gradient w.r.t. the head parameters.
double affinity_loss_and_gradient(const PatchGrid& grid, const AffinityMatrix& target,
                                  const AffinityHead& head, double gamma, HeadGradients& grads);

struct AffinityTrainConfig {
    double lr = 5e-5;
    std::size_t batch_size = 16;
    std::size_t epochs = 100;
    double gamma = kDefaultAffinityGamma;
    std::size_t d_prime = 64;
    std::uint64_t seed = 0;
};

struct AffinityTrainingImage {
    PatchGrid tokens;
    AffinityMatrix target;
};

struct AffinityTrainResult {
    AffinityHead head;
    std::vector<double> epoch_losses;
};

/// Adam over mini-batches of images; the initial head is drawn from `config.seed`.
AffinityTrainResult train_affinity_head(const std::vector<AffinityTrainingImage>& images,
                                        const AffinityTrainConfig& config);

/// Loads tokens + target affinities from a manifest and trains.
AffinityTrainResult train_affinity_head(const DatasetManifest& manifest,
                                        const AffinityTrainConfig& config);

/// Writes kernel.ief, bias.ief (float32) and head.json {d, d_prime, gamma}.
void save_affinity_head(const std::filesystem::path& dir, const AffinityHead& head, double gamma);
AffinityHead load_affinity_head(const std::filesystem::path& dir);

} // namespace insight
