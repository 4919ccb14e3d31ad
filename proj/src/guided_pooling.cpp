#include "insight/guided_pooling.hpp"

#include "insight/adam.hpp"
#include "insight/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace insight {

namespace fs = std::filesystem;

void PatchGrid::validate() const {
    if (grid_h == 0 || grid_w == 0 || static_cast<std::size_t>(features.rows()) != grid_h * grid_w) {
        std::ostringstream os;
        os << "patch grid " << grid_h << "x" << grid_w << " does not match " << features.rows() << " rows";
        throw DataError(os.str());
    }
    if (!features.allFinite()) {
        throw DataError("patch grid contains non-finite values");
    }
}

AffinityHead AffinityHead::initialize(std::size_t d, std::size_t d_prime, std::uint64_t seed) {
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(9.0 * static_cast<double>(d));
    AffinityHead head;
    head.kernel.resize(static_cast<Eigen::Index>(9 * d), static_cast<Eigen::Index>(d_prime));
    for (Eigen::Index i = 0; i < head.kernel.size(); ++i) {
        head.kernel.data()[i] = rng.uniform(-bound, bound);
    }
    head.bias = Vector::Zero(static_cast<Eigen::Index>(d_prime));
    return head;
}

void AffinityHead::validate() const {
    if (kernel.rows() == 0 || kernel.rows() % 9 != 0 || kernel.cols() == 0) {
        throw DataError("affinity head kernel must be (9*d) x d'");
    }
    if (bias.size() != kernel.cols()) {
        throw DataError("affinity head bias length must equal d'");
    }
    if (out_dim() > in_dim()) {
        throw DataError("affinity head output dim must not exceed input dim");
    }
    if (!kernel.allFinite() || !bias.allFinite()) {
        throw NumericError("affinity head has non-finite parameters");
    }
}

AffinityMatrix cosine_affinity(const PatchGrid& grid) {
    const auto n = grid.features.rows();
    Matrix unit = grid.features;
    for (Eigen::Index p = 0; p < n; ++p) {
        const double norm = unit.row(p).norm();
        if (norm == 0.0) {
            throw DataError("cosine_affinity: zero-norm feature at patch " + std::to_string(p));
        }
        unit.row(p) /= norm;
    }
    AffinityMatrix a = unit * unit.transpose();
    return a.cwiseMax(-1.0).cwiseMin(1.0);
}

PatchGrid guided_pool(const PatchGrid& grid, const AffinityMatrix& affinity) {
    const auto n = grid.features.rows();
    if (affinity.rows() != n || affinity.cols() != n) {
        throw DataError("guided_pool: affinity must be N x N for N = " + std::to_string(n));
    }
    const Matrix weights = affinity.cwiseMax(0.0);
    PatchGrid out{Matrix(n, grid.features.cols()), grid.grid_h, grid.grid_w};
    for (Eigen::Index p = 0; p < n; ++p) {
        const double total = weights.row(p).sum();
        if (total <= 0.0) {
            log_warning("guided_pool: patch " + std::to_string(p) +
                        " has no positive affinity; keeping its input feature");
            out.features.row(p) = grid.features.row(p);
            continue;
        }
        out.features.row(p) = (weights.row(p) * grid.features) / total;
    }
    return out;
}

namespace {

// Visits every (output patch, tap, neighbour patch) triple of a zero-padded 3x3 conv.
template <typename Fn>
void for_each_tap(std::size_t h, std::size_t w, Fn&& fn) {
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const auto p = static_cast<Eigen::Index>(y * w + x);
            for (int ky = 0; ky < 3; ++ky) {
                const auto ny = static_cast<std::ptrdiff_t>(y) + ky - 1;
                if (ny < 0 || ny >= static_cast<std::ptrdiff_t>(h)) {
                    continue;
                }
                for (int kx = 0; kx < 3; ++kx) {
                    const auto nx = static_cast<std::ptrdiff_t>(x) + kx - 1;
                    if (nx < 0 || nx >= static_cast<std::ptrdiff_t>(w)) {
                        continue;
                    }
                    fn(p, ky * 3 + kx, static_cast<Eigen::Index>(ny * static_cast<std::ptrdiff_t>(w) + nx));
                }
            }
        }
    }
}

void check_head_input(const PatchGrid& grid, const AffinityHead& head) {
    grid.validate();
    head.validate();
    if (grid.dim() != head.in_dim()) {
        throw DataError("affinity head expects d=" + std::to_string(head.in_dim()) + ", grid has d=" +
                        std::to_string(grid.dim()));
    }
}

Matrix normalize_rows(const Matrix& y, Vector& norms) {
    norms.resize(y.rows());
    Matrix u = y;
    for (Eigen::Index p = 0; p < y.rows(); ++p) {
        norms(p) = y.row(p).norm();
        if (norms(p) == 0.0) {
            throw NumericError("predict_affinity: zero-norm projection at patch " + std::to_string(p));
        }
        u.row(p) /= norms(p);
    }
    return u;
}

double clamp_probability(double a) {
    return std::clamp((a + 1.0) / 2.0, kBceClamp, 1.0 - kBceClamp);
}

} // namespace

Matrix apply_head(const PatchGrid& grid, const AffinityHead& head) {
    check_head_input(grid, head);
    const auto d = static_cast<Eigen::Index>(head.in_dim());
    Matrix out = head.bias.transpose().replicate(grid.features.rows(), 1);
    for_each_tap(grid.grid_h, grid.grid_w, [&](Eigen::Index p, int tap, Eigen::Index q) {
        out.row(p).noalias() += grid.features.row(q) * head.kernel.middleRows(tap * d, d);
    });
    return out;
}

AffinityMatrix predict_affinity(const PatchGrid& grid, const AffinityHead& head) {
    Vector norms;
    const Matrix u = normalize_rows(apply_head(grid, head), norms);
    AffinityMatrix a = u * u.transpose();
    // Exact symmetry and unit diagonal regardless of summation order.
    for (Eigen::Index p = 0; p < a.rows(); ++p) {
        a(p, p) = 1.0;
        for (Eigen::Index q = p + 1; q < a.cols(); ++q) {
            a(q, p) = a(p, q);
        }
    }
    return a;
}

double bce_affinity_loss(const AffinityMatrix& predicted, const AffinityMatrix& target, double gamma) {
    if (predicted.rows() != target.rows() || predicted.cols() != target.cols()) {
        throw DataError("bce_affinity_loss: shape mismatch");
    }
    if (!(gamma > -1.0 && gamma < 1.0)) {
        throw ConfigError("bce_affinity_loss: gamma must lie in (-1, 1)");
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < predicted.size(); ++i) {
        const double p = clamp_probability(predicted.data()[i]);
        total += target.data()[i] > gamma ? std::log(p) : std::log(1.0 - p);
    }
    return -total / static_cast<double>(predicted.size());
}

double affinity_loss_and_gradient(const PatchGrid& grid, const AffinityMatrix& target,
                                  const AffinityHead& head, double gamma, HeadGradients& grads) {
    const auto n = grid.features.rows();
    if (target.rows() != n || target.cols() != n) {
        throw DataError("affinity target must be N x N");
    }
    const Matrix y = apply_head(grid, head);
    Vector norms;
    const Matrix u = normalize_rows(y, norms);
    const Matrix a = u * u.transpose();

    // dL/dA, zero where the probability clamp is active.
    const double scale = 1.0 / static_cast<double>(n * n);
    Matrix g(n, n);
    double total = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double raw = (a.data()[i] + 1.0) / 2.0;
        const double p = std::clamp(raw, kBceClamp, 1.0 - kBceClamp);
        const bool positive = target.data()[i] > gamma;
        total += positive ? std::log(p) : std::log(1.0 - p);
        const bool clamped = raw < kBceClamp || raw > 1.0 - kBceClamp;
        const double dp = clamped ? 0.0 : (positive ? -1.0 / p : 1.0 / (1.0 - p));
        g.data()[i] = 0.5 * dp * scale;
    }

    const Matrix grad_u = (g + g.transpose()) * u;
    Matrix grad_y(n, y.cols());
    for (Eigen::Index p = 0; p < n; ++p) {
        const double along = u.row(p).dot(grad_u.row(p));
        grad_y.row(p) = (grad_u.row(p) - along * u.row(p)) / norms(p);
    }

    const auto d = static_cast<Eigen::Index>(head.in_dim());
    grads.kernel = Matrix::Zero(head.kernel.rows(), head.kernel.cols());
    grads.bias = grad_y.colwise().sum().transpose();
    for_each_tap(grid.grid_h, grid.grid_w, [&](Eigen::Index p, int tap, Eigen::Index q) {
        grads.kernel.middleRows(tap * d, d).noalias() += grid.features.row(q).transpose() * grad_y.row(p);
    });
    return -total * scale;
}

AffinityTrainResult train_affinity_head(const std::vector<AffinityTrainingImage>& images,
                                        const AffinityTrainConfig& config) {
    if (images.empty()) {
        throw DataError("train_affinity_head: no training images");
    }
    if (config.batch_size == 0) {
        throw ConfigError("train_affinity_head: batch_size must be >= 1");
    }
    const std::size_t d = images.front().tokens.dim();
    if (config.d_prime == 0 || config.d_prime > d) {
        throw ConfigError("train_affinity_head: d_prime must be in [1, d]");
    }
    Rng rng(config.seed);
    AffinityTrainResult result{AffinityHead::initialize(d, config.d_prime, rng.next_u64()), {}};
    auto& head = result.head;

    Adam adam(AdamConfig{config.lr});
    adam.add_block(head.kernel.size());
    adam.add_block(head.bias.size());

    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    HeadGradients image_grads;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            HeadGradients batch{Matrix::Zero(head.kernel.rows(), head.kernel.cols()),
                                Vector::Zero(head.bias.size())};
            for (std::size_t i = start; i < stop; ++i) {
                const auto& img = images[order[i]];
                const double loss =
                    affinity_loss_and_gradient(img.tokens, img.target, head, config.gamma, image_grads);
                if (!std::isfinite(loss)) {
                    throw NumericError("train_affinity_head: non-finite loss at epoch " +
                                       std::to_string(epoch));
                }
                epoch_loss += loss;
                batch.kernel += image_grads.kernel;
                batch.bias += image_grads.bias;
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            batch.kernel *= inv;
            batch.bias *= inv;
            adam.begin_step();
            adam.update(0, head.kernel, batch.kernel);
            adam.update(1, head.bias, batch.bias);
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(images.size()));
    }
    return result;
}

AffinityTrainResult train_affinity_head(const DatasetManifest& manifest,
                                        const AffinityTrainConfig& config) {
    if (!manifest.has_affinities()) {
        throw DataError("train_affinity_head: manifest is missing affinity targets");
    }
    std::vector<AffinityTrainingImage> images;
    images.reserve(manifest.entries.size());
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        images.push_back({PatchGrid{load_embeddings(manifest, i), manifest.grid_h, manifest.grid_w},
                          load_affinity(manifest, i)});
    }
    return train_affinity_head(images, config);
}

void save_affinity_head(const fs::path& dir, const AffinityHead& head, double gamma) {
    head.validate();
    fs::create_directories(dir);
    Tensor kernel = Tensor::from_matrix(head.kernel);
    kernel.dims = {3, 3, head.in_dim(), head.out_dim()};
    write_tensor(dir / "kernel.ief", kernel);
    write_tensor(dir / "bias.ief", Tensor::from_vector(head.bias));
    nlohmann::ordered_json meta;
    meta["d"] = head.in_dim();
    meta["d_prime"] = head.out_dim();
    meta["gamma"] = gamma;
    write_text(dir / "head.json", meta.dump(2) + "\n");
}

AffinityHead load_affinity_head(const fs::path& dir) {
    const auto kernel = read_tensor(dir / "kernel.ief");
    if (kernel.dims.size() != 4 || kernel.dims[0] != 3 || kernel.dims[1] != 3) {
        throw DataError(dir.string() + ": kernel must have dims [3,3,d,d']");
    }
    AffinityHead head;
    const auto values = kernel.to_doubles();
    head.kernel.resize(static_cast<Eigen::Index>(9 * kernel.dims[2]), static_cast<Eigen::Index>(kernel.dims[3]));
    std::copy(values.begin(), values.end(), head.kernel.data());
    head.bias = read_tensor(dir / "bias.ief").to_vector();
    head.validate();
    return head;
}

} // namespace insight
