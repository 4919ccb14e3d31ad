#include "insight/sae.hpp"

#include "insight/adam.hpp"
#include "insight/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace insight {

namespace fs = std::filesystem;

std::size_t ConceptCodes::nonzero_count() const {
    std::size_t n = 0;
    for (const auto& p : patches) {
        n += p.size();
    }
    return n;
}

Matrix ConceptCodes::to_dense() const {
    Matrix z = Matrix::Zero(static_cast<Eigen::Index>(patches.size()), static_cast<Eigen::Index>(concept_count));
    for (std::size_t r = 0; r < patches.size(); ++r) {
        for (const auto& a : patches[r]) {
            z(static_cast<Eigen::Index>(r), a.index) = a.value;
        }
    }
    return z;
}

ConceptCodes ConceptCodes::from_dense(const Matrix& z) {
    ConceptCodes codes{static_cast<std::size_t>(z.cols()), {}};
    codes.patches.resize(static_cast<std::size_t>(z.rows()));
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        for (Eigen::Index c = 0; c < z.cols(); ++c) {
            if (z(r, c) > 0.0) {
                codes.patches[static_cast<std::size_t>(r)].push_back({static_cast<std::uint32_t>(c), z(r, c)});
            }
        }
    }
    return codes;
}

std::vector<std::size_t> shell_bounds_from_ratios(std::size_t m, const std::vector<double>& ratios) {
    if (ratios.empty()) {
        throw ConfigError("shell_ratios must be nonempty");
    }
    if (m < ratios.size()) {
        throw ConfigError("m must be at least the number of shells");
    }
    std::vector<std::size_t> bounds;
    std::size_t total = 0;
    for (std::size_t j = 0; j + 1 < ratios.size(); ++j) {
        if (!(ratios[j] > 0.0)) {
            throw ConfigError("shell ratios must be positive");
        }
        const auto size = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratios[j] * static_cast<double>(m))));
        total += size;
        bounds.push_back(total);
    }
    if (total >= m) {
        throw ConfigError("shell ratios leave no room for the final shell");
    }
    bounds.push_back(m);
    return bounds;
}

SaeModel SaeModel::initialize(std::size_t d, std::size_t m, std::size_t k,
                              std::vector<std::size_t> shell_bounds, std::uint64_t seed) {
    Rng rng(seed);
    SaeModel model;
    const auto rows = static_cast<Eigen::Index>(m);
    const auto cols = static_cast<Eigen::Index>(d);
    model.dec_weight.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            model.dec_weight(i, j) = rng.normal();
        }
        model.dec_weight.row(i).normalize();
    }
    model.enc_weight = model.dec_weight.transpose();
    model.enc_bias = Vector::Zero(rows);
    model.dec_bias = Vector::Zero(cols);
    model.shell_bounds = std::move(shell_bounds);
    model.k = k;
    model.seed = seed;
    model.validate();
    return model;
}

void SaeModel::validate() const {
    const auto m = dec_weight.rows();
    const auto d = dec_weight.cols();
    if (m == 0 || d == 0) {
        throw DataError("SAE has empty parameters");
    }
    if (enc_weight.rows() != d || enc_weight.cols() != m || enc_bias.size() != m || dec_bias.size() != d) {
        throw DataError("SAE parameter shapes are inconsistent");
    }
    if (shell_bounds.empty() || shell_bounds.back() != static_cast<std::size_t>(m) ||
        !std::is_sorted(shell_bounds.begin(), shell_bounds.end(), std::less_equal<>()) ||
        shell_bounds.front() == 0) {
        throw DataError("shell bounds must be strictly ascending and end at m");
    }
    if (k == 0) {
        throw DataError("SAE k must be >= 1");
    }
    if (!enc_weight.allFinite() || !dec_weight.allFinite() || !enc_bias.allFinite() || !dec_bias.allFinite()) {
        throw NumericError("SAE has non-finite parameters");
    }
}

Matrix encode_pre(const SaeModel& model, const Matrix& batch) {
    if (static_cast<std::size_t>(batch.cols()) != model.input_dim()) {
        throw DataError("encode_pre: batch has d=" + std::to_string(batch.cols()) + ", model expects " +
                        std::to_string(model.input_dim()));
    }
    Matrix centered = batch.rowwise() - model.dec_bias.transpose();
    Matrix pre = centered * model.enc_weight;
    pre.rowwise() += model.enc_bias.transpose();
    return pre;
}

std::size_t TopKSelection::kept_count() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

TopKSelection select_batch_topk(const Matrix& pre, std::size_t k) {
    TopKSelection sel{pre.rows(), pre.cols(), std::vector<std::uint8_t>(static_cast<std::size_t>(pre.size()), 0),
                      std::numeric_limits<double>::quiet_NaN()};
    const auto total = static_cast<std::size_t>(pre.size());
    const std::size_t budget = std::min(total, k * static_cast<std::size_t>(pre.rows()));
    if (budget == 0) {
        return sel;
    }
    std::vector<std::uint32_t> order(total);
    std::iota(order.begin(), order.end(), 0U);
    const double* v = pre.data();
    const auto before = [v](std::uint32_t a, std::uint32_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(budget - 1), order.end(), before);
    for (std::size_t i = 0; i < budget; ++i) {
        sel.keep[order[i]] = 1;
    }
    sel.kth_value = v[order[budget - 1]];
    return sel;
}

Matrix apply_selection(const Matrix& pre, const TopKSelection& selection) {
    Matrix z(pre.rows(), pre.cols());
    for (Eigen::Index i = 0; i < pre.size(); ++i) {
        z.data()[i] = selection.keep[static_cast<std::size_t>(i)] ? std::max(pre.data()[i], 0.0) : 0.0;
    }
    return z;
}

ConceptCodes batch_topk(const Matrix& pre, std::size_t k) {
    return ConceptCodes::from_dense(apply_selection(pre, select_batch_topk(pre, k)));
}

namespace {

std::size_t resolve_prefix(const SaeModel& model, std::optional<std::size_t> prefix_bound) {
    if (!prefix_bound) {
        return model.concept_count();
    }
    if (std::find(model.shell_bounds.begin(), model.shell_bounds.end(), *prefix_bound) == model.shell_bounds.end()) {
        throw DataError("decode: prefix bound " + std::to_string(*prefix_bound) + " is not a shell bound");
    }
    return *prefix_bound;
}

} // namespace

Matrix decode(const SaeModel& model, const ConceptCodes& codes, std::optional<std::size_t> prefix_bound) {
    if (codes.concept_count != model.concept_count()) {
        throw DataError("decode: codes have m=" + std::to_string(codes.concept_count) + ", model has " +
                        std::to_string(model.concept_count()));
    }
    const std::size_t limit = resolve_prefix(model, prefix_bound);
    Matrix out = model.dec_bias.transpose().replicate(static_cast<Eigen::Index>(codes.patch_count()), 1);
    for (std::size_t r = 0; r < codes.patch_count(); ++r) {
        for (const auto& a : codes.patches[r]) {
            if (a.index < limit) {
                out.row(static_cast<Eigen::Index>(r)) += a.value * model.dec_weight.row(a.index);
            }
        }
    }
    return out;
}

Matrix decode_dense(const SaeModel& model, const Matrix& z, std::optional<std::size_t> prefix_bound) {
    if (static_cast<std::size_t>(z.cols()) != model.concept_count()) {
        throw DataError("decode: code width does not match model");
    }
    const auto limit = static_cast<Eigen::Index>(resolve_prefix(model, prefix_bound));
    Matrix out = z.leftCols(limit) * model.dec_weight.topRows(limit);
    out.rowwise() += model.dec_bias.transpose();
    return out;
}

SaeGradients SaeGradients::zeros_like(const SaeModel& model) {
    return {Matrix::Zero(model.enc_weight.rows(), model.enc_weight.cols()), Vector::Zero(model.enc_bias.size()),
            Matrix::Zero(model.dec_weight.rows(), model.dec_weight.cols()), Vector::Zero(model.dec_bias.size())};
}

DeadTracker::DeadTracker(std::size_t concept_count, std::uint64_t dead_threshold)
    : counters_(concept_count, 0), dead_threshold_(dead_threshold) {}

void DeadTracker::update(const Matrix& codes) {
    if (static_cast<std::size_t>(codes.cols()) != counters_.size()) {
        throw DataError("DeadTracker: code width does not match tracker");
    }
    const auto batch = static_cast<std::uint64_t>(codes.rows());
    for (Eigen::Index c = 0; c < codes.cols(); ++c) {
        const bool fired = (codes.col(c).array() > 0.0).any();
        auto& counter = counters_[static_cast<std::size_t>(c)];
        counter = fired ? 0 : counter + batch;
    }
}

std::vector<std::uint8_t> DeadTracker::dead_mask() const {
    std::vector<std::uint8_t> mask(counters_.size());
    std::transform(counters_.begin(), counters_.end(), mask.begin(),
                   [this](std::uint64_t c) { return static_cast<std::uint8_t>(c >= dead_threshold_); });
    return mask;
}

std::size_t DeadTracker::dead_count() const {
    return static_cast<std::size_t>(
        std::count_if(counters_.begin(), counters_.end(), [this](std::uint64_t c) { return c >= dead_threshold_; }));
}

SaeLossResult sae_objective(const SaeModel& model, const Matrix& batch, const TopKSelection& selection,
                            const std::vector<std::uint8_t>& dead_mask, double rec_weight, double aux_weight) {
    const auto b = batch.rows();
    const auto m = static_cast<Eigen::Index>(model.concept_count());
    if (b == 0) {
        throw DataError("SAE loss: empty batch");
    }
    if (selection.rows != b || selection.cols != m) {
        throw DataError("SAE loss: selection mask shape mismatch");
    }
    if (dead_mask.size() != static_cast<std::size_t>(m)) {
        throw DataError("SAE loss: dead mask length mismatch");
    }
    const double inv_b = 1.0 / static_cast<double>(b);

    const Matrix centered = batch.rowwise() - model.dec_bias.transpose();
    Matrix pre = centered * model.enc_weight;
    pre.rowwise() += model.enc_bias.transpose();
    const Matrix z = apply_selection(pre, selection);

    SaeLossResult result{0.0, 0.0, SaeGradients::zeros_like(model)};
    auto& g = result.grads;

    // Shell reconstructions, built incrementally over the shell segments.
    const auto& bounds = model.shell_bounds;
    const std::size_t shells = bounds.size();
    std::vector<Matrix> grad_recon(shells);
    Matrix recon = model.dec_bias.transpose().replicate(b, 1);
    Eigen::Index lo = 0;
    for (std::size_t j = 0; j < shells; ++j) {
        const auto hi = static_cast<Eigen::Index>(bounds[j]);
        recon.noalias() += z.middleCols(lo, hi - lo) * model.dec_weight.middleRows(lo, hi - lo);
        const Matrix err = recon - batch;
        result.rec += err.squaredNorm() * inv_b;
        grad_recon[j] = (2.0 * inv_b * rec_weight) * err;
        lo = hi;
    }

    // Aux term on the full-reconstruction residual.
    Matrix grad_pre_aux;
    const bool any_dead = std::any_of(dead_mask.begin(), dead_mask.end(), [](std::uint8_t d) { return d != 0; });
    if (any_dead) {
        const Matrix residual = batch - recon;
        const RowVector mean_residual = residual.colwise().mean();
        const Matrix centered_residual = residual.rowwise() - mean_residual;
        const double denom = centered_residual.squaredNorm();
        if (denom >= 1e-12) {
            Matrix z_dead = Matrix::Zero(b, m);
            for (Eigen::Index c = 0; c < m; ++c) {
                if (dead_mask[static_cast<std::size_t>(c)]) {
                    z_dead.col(c) = pre.col(c).cwiseMax(0.0);
                }
            }
            const Matrix fit_error = residual - z_dead * model.dec_weight;
            const double numer = fit_error.squaredNorm();
            result.aux = numer / denom;

            if (aux_weight != 0.0) {
                // d aux / d residual, then residual = x - recon.
                const Matrix grad_residual =
                    (2.0 / denom) * fit_error - (2.0 * numer / (denom * denom)) * centered_residual;
                grad_recon[shells - 1] -= aux_weight * grad_residual;
                // d aux / d (z_dead W_dec) = -2 fit_error / denom
                const Matrix grad_dead_out = (-2.0 * aux_weight / denom) * fit_error;
                g.dec_weight.noalias() += z_dead.transpose() * grad_dead_out;
                grad_pre_aux = grad_dead_out * model.dec_weight.transpose();
                for (Eigen::Index i = 0; i < grad_pre_aux.size(); ++i) {
                    const auto c = i % m;
                    if (!dead_mask[static_cast<std::size_t>(c)] || pre.data()[i] <= 0.0) {
                        grad_pre_aux.data()[i] = 0.0;
                    }
                }
            }
        }
    }

    // Suffix sums: a concept in segment s contributes to every shell j >= s.
    Matrix suffix = Matrix::Zero(b, batch.cols());
    Matrix grad_z(b, m);
    Eigen::Index hi = m;
    for (std::size_t j = shells; j-- > 0;) {
        suffix += grad_recon[j];
        const auto seg_lo = j == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(bounds[j - 1]);
        const auto width = hi - seg_lo;
        g.dec_weight.middleRows(seg_lo, width).noalias() += z.middleCols(seg_lo, width).transpose() * suffix;
        grad_z.middleCols(seg_lo, width).noalias() = suffix * model.dec_weight.middleRows(seg_lo, width).transpose();
        hi = seg_lo;
    }
    g.dec_bias = suffix.colwise().sum().transpose();

    // Straight-through on selected, positive coordinates.
    Matrix grad_pre = grad_z;
    for (Eigen::Index i = 0; i < grad_pre.size(); ++i) {
        if (!selection.keep[static_cast<std::size_t>(i)] || pre.data()[i] <= 0.0) {
            grad_pre.data()[i] = 0.0;
        }
    }
    if (grad_pre_aux.size() != 0) {
        grad_pre += grad_pre_aux;
    }
    g.enc_weight.noalias() = centered.transpose() * grad_pre;
    const Vector pre_sum = grad_pre.colwise().sum().transpose();
    g.enc_bias = pre_sum;
    g.dec_bias.noalias() -= model.enc_weight * pre_sum;
    return result;
}

SaeLossResult matryoshka_loss(const SaeModel& model, const Matrix& batch) {
    return matryoshka_loss(model, batch, select_batch_topk(encode_pre(model, batch), model.k));
}

SaeLossResult matryoshka_loss(const SaeModel& model, const Matrix& batch, const TopKSelection& selection) {
    return sae_objective(model, batch, selection, std::vector<std::uint8_t>(model.concept_count(), 0), 1.0, 0.0);
}

double aux_loss(const SaeModel& model, const Matrix& batch, const DeadTracker& tracker) {
    if (tracker.samples_since_fire().size() != model.concept_count()) {
        throw DataError("aux_loss: tracker size does not match model");
    }
    const auto selection = select_batch_topk(encode_pre(model, batch), model.k);
    return aux_loss(model, batch, selection, tracker.dead_mask()).aux;
}

SaeLossResult aux_loss(const SaeModel& model, const Matrix& batch, const TopKSelection& selection,
                       const std::vector<std::uint8_t>& dead_mask) {
    return sae_objective(model, batch, selection, dead_mask, 0.0, 1.0);
}

double fve(const Matrix& x, const Matrix& x_hat) {
    if (x.rows() < 2) {
        throw DataError("fve: need at least 2 patches");
    }
    if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) {
        throw DataError("fve: shape mismatch");
    }
    const RowVector mean = x.colwise().mean();
    const double variance = (x.rowwise() - mean).squaredNorm();
    if (variance <= 0.0) {
        throw NumericError("fve: input has zero variance");
    }
    return 1.0 - (x - x_hat).squaredNorm() / variance;
}

double fve(const SaeModel& model, const Matrix& patches) {
    const Matrix pre = encode_pre(model, patches);
    return fve(patches, decode_dense(model, apply_selection(pre, select_batch_topk(pre, model.k))));
}

std::vector<double> shell_errors(const SaeModel& model, const Matrix& patches) {
    const Matrix pre = encode_pre(model, patches);
    const Matrix z = apply_selection(pre, select_batch_topk(pre, model.k));
    std::vector<double> errors;
    for (const auto bound : model.shell_bounds) {
        errors.push_back((decode_dense(model, z, bound) - patches).rowwise().squaredNorm().mean());
    }
    return errors;
}

ConceptCodes infer_codes(const SaeModel& model, const Matrix& patches) {
    if (!model.inference_threshold) {
        throw DataError("infer_codes: model has no inference threshold (untrained)");
    }
    return infer_codes(model, patches, *model.inference_threshold);
}

ConceptCodes infer_codes(const SaeModel& model, const Matrix& patches, double threshold) {
    Matrix pre = encode_pre(model, patches);
    for (Eigen::Index i = 0; i < pre.size(); ++i) {
        double& v = pre.data()[i];
        v = (v >= threshold && v > 0.0) ? v : 0.0;
    }
    return ConceptCodes::from_dense(pre);
}

namespace {

Matrix gather_rows(const Matrix& source, const std::vector<std::size_t>& order, std::size_t start, std::size_t stop) {
    Matrix out(static_cast<Eigen::Index>(stop - start), source.cols());
    for (std::size_t i = start; i < stop; ++i) {
        out.row(static_cast<Eigen::Index>(i - start)) = source.row(static_cast<Eigen::Index>(order[i]));
    }
    return out;
}

void check_config(const SaeTrainConfig& config, std::size_t d) {
    if (config.m == 0 || config.k == 0 || config.batch_patches == 0 || d == 0) {
        throw ConfigError("train_sae: m, k, batch_patches must be >= 1");
    }
    if (config.k > config.m) {
        throw ConfigError("train_sae: k must not exceed m");
    }
    if (!(config.holdout_fraction >= 0.0 && config.holdout_fraction < 1.0)) {
        throw ConfigError("train_sae: holdout_fraction must lie in [0, 1)");
    }
    if (!(config.threshold_decay > 0.0 && config.threshold_decay < 1.0)) {
        throw ConfigError("train_sae: threshold_decay must lie in (0, 1)");
    }
}

} // namespace

SaeTrainResult train_sae(const Matrix& patches, const SaeTrainConfig& config) {
    const auto d = static_cast<std::size_t>(patches.cols());
    check_config(config, d);
    const auto total = static_cast<std::size_t>(patches.rows());
    if (!patches.allFinite()) {
        throw DataError("train_sae: non-finite input patches");
    }

    Rng rng(config.seed);
    SaeTrainResult result;
    result.model = SaeModel::initialize(d, config.m, config.k, shell_bounds_from_ratios(config.m, config.shell_ratios),
                                        rng.next_u64());
    result.model.seed = config.seed;
    auto& model = result.model;

    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const auto holdout_count = static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(total)));
    std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(holdout_count), order.end());
    std::sort(train.begin(), train.end());
    if (train.size() < config.batch_patches && config.epochs > 0) {
        throw DataError("train_sae: fewer training patches (" + std::to_string(train.size()) +
                        ") than one batch (" + std::to_string(config.batch_patches) + ")");
    }
    std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(holdout_count));
    std::sort(held.begin(), held.end());
    result.holdout = gather_rows(patches, held, 0, held.size());

    Adam adam(AdamConfig{config.lr});
    adam.add_block(model.enc_weight.size());
    adam.add_block(model.enc_bias.size());
    adam.add_block(model.dec_weight.size());
    adam.add_block(model.dec_bias.size());

    DeadTracker tracker(config.m, config.dead_threshold);
    double threshold_ema = 0.0;
    double decay_power = 1.0;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(train);
        for (std::size_t start = 0; start + config.batch_patches <= train.size(); start += config.batch_patches) {
            const Matrix batch = gather_rows(patches, train, start, start + config.batch_patches);
            const Matrix pre = encode_pre(model, batch);
            const auto selection = select_batch_topk(pre, config.k);
            const auto loss =
                sae_objective(model, batch, selection, tracker.dead_mask(), 1.0, config.aux_coeff);
            const double objective = loss.rec + config.aux_coeff * loss.aux;
            if (!std::isfinite(objective)) {
                std::ostringstream os;
                os << "train_sae: non-finite loss at step " << step << " (epoch " << epoch << "): L_rec=" << loss.rec
                   << " L_aux=" << loss.aux << " dead=" << tracker.dead_count();
                throw NumericError(os.str());
            }

            const Matrix z = apply_selection(pre, selection);
            double batch_fve = std::numeric_limits<double>::quiet_NaN();
            const RowVector mean = batch.colwise().mean();
            const double variance = (batch.rowwise() - mean).squaredNorm();
            if (batch.rows() >= 2 && variance > 0.0) {
                batch_fve = 1.0 - (decode_dense(model, z) - batch).squaredNorm() / variance;
            }

            adam.begin_step();
            adam.update(0, model.enc_weight, loss.grads.enc_weight);
            adam.update(1, model.enc_bias, loss.grads.enc_bias);
            adam.update(2, model.dec_weight, loss.grads.dec_weight);
            adam.update(3, model.dec_bias, loss.grads.dec_bias);
            for (Eigen::Index i = 0; i < model.dec_weight.rows(); ++i) {
                const double norm = model.dec_weight.row(i).norm();
                if (norm > 0.0) {
                    model.dec_weight.row(i) /= norm;
                }
            }

            tracker.update(z);
            if (std::isfinite(selection.kth_value)) {
                threshold_ema = config.threshold_decay * threshold_ema + (1.0 - config.threshold_decay) * selection.kth_value;
                decay_power *= config.threshold_decay;
            }
            ++step;
            result.log.push_back({step, loss.rec, loss.aux, tracker.dead_count(), batch_fve});
        }
    }
    if (decay_power < 1.0) {
        // Bias-corrected running estimate.
        model.inference_threshold = threshold_ema / (1.0 - decay_power);
    }
    result.validation_fve =
        result.holdout.rows() >= 2 ? fve(model, result.holdout) : std::numeric_limits<double>::quiet_NaN();
    return result;
}

Matrix load_all_patches(const DatasetManifest& manifest) {
    const auto n = static_cast<Eigen::Index>(manifest.patch_count());
    Matrix all(n * static_cast<Eigen::Index>(manifest.entries.size()), static_cast<Eigen::Index>(manifest.embed_dim));
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        all.middleRows(static_cast<Eigen::Index>(i) * n, n) = load_embeddings(manifest, i);
    }
    return all;
}

SaeTrainResult train_sae(const DatasetManifest& manifest, const SaeTrainConfig& config) {
    return train_sae(load_all_patches(manifest), config);
}

void save_sae(const fs::path& dir, const SaeModel& model) {
    model.validate();
    fs::create_directories(dir);
    write_tensor(dir / "enc_weight.ief", Tensor::from_matrix(model.enc_weight));
    write_tensor(dir / "enc_bias.ief", Tensor::from_vector(model.enc_bias));
    write_tensor(dir / "dec_weight.ief", Tensor::from_matrix(model.dec_weight));
    write_tensor(dir / "dec_bias.ief", Tensor::from_vector(model.dec_bias));
    nlohmann::ordered_json meta;
    meta["d"] = model.input_dim();
    meta["m"] = model.concept_count();
    meta["k"] = model.k;
    meta["shell_bounds"] = model.shell_bounds;
    meta["inference_threshold"] =
        model.inference_threshold ? nlohmann::ordered_json(*model.inference_threshold) : nlohmann::ordered_json(nullptr);
    meta["seed"] = model.seed;
    write_text(dir / "sae.json", meta.dump(2) + "\n");
}

SaeModel load_sae(const fs::path& dir) {
    if (!fs::exists(dir / "sae.json")) {
        throw DataError("missing file: " + (dir / "sae.json").string());
    }
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_text(dir / "sae.json"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError((dir / "sae.json").string() + ": " + e.what());
    }
    SaeModel model;
    model.enc_weight = read_tensor(dir / "enc_weight.ief").to_matrix();
    model.enc_bias = read_tensor(dir / "enc_bias.ief").to_vector();
    model.dec_weight = read_tensor(dir / "dec_weight.ief").to_matrix();
    model.dec_bias = read_tensor(dir / "dec_bias.ief").to_vector();
    try {
        model.k = meta.at("k").get<std::size_t>();
        model.shell_bounds = meta.at("shell_bounds").get<std::vector<std::size_t>>();
        model.seed = meta.value("seed", std::uint64_t{0});
        if (meta.contains("inference_threshold") && !meta["inference_threshold"].is_null()) {
            model.inference_threshold = meta["inference_threshold"].get<double>();
        }
        if (meta.at("m").get<std::size_t>() != model.concept_count()) {
            throw DataError("sae.json m does not match dec_weight");
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError((dir / "sae.json").string() + ": " + e.what());
    }
    model.validate();
    return model;
}

void write_training_log(const fs::path& path, const std::vector<SaeLogRow>& rows) {
    std::ostringstream os;
    os.precision(9);
    os << "step,L_rec,L_aux,dead_count,fve\n";
    for (const auto& r : rows) {
        os << r.step << ',' << r.rec << ',' << r.aux << ',' << r.dead_count << ',' << r.fve << '\n';
    }
    write_text(path, os.str());
}

} // namespace insight
