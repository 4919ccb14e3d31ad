#include "insight/downstream.hpp"

#include "insight/adam.hpp"
#include "insight/interp_metrics.hpp"
#include "insight/rng.hpp"
#include "insight/tensor_store.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace insight {

namespace fs = std::filesystem;

std::string pool_mode_name(PoolMode mode) { return mode == PoolMode::max_mean ? "max_mean" : "max_only"; }

PoolMode parse_pool_mode(const std::string& text) {
    if (text == "max_mean") {
        return PoolMode::max_mean;
    }
    if (text == "max_only") {
        return PoolMode::max_only;
    }
    throw ConfigError("pool mode must be \"max_mean\" or \"max_only\", got \"" + text + "\"");
}

Vector pool(const ConceptCodes& codes, PoolMode mode, std::optional<double> threshold) {
    const auto m = static_cast<Eigen::Index>(codes.concept_count);
    Vector max = Vector::Zero(m);
    Vector sum = Vector::Zero(m);
    for (const auto& patch : codes.patches) {
        for (const auto& a : patch) {
            if (a.index >= codes.concept_count) {
                throw DataError("pool: concept index out of range");
            }
            if (threshold && a.value < *threshold) {
                continue;
            }
            const double v = std::max(a.value, 0.0);
            max(a.index) = std::max(max(a.index), v);
            sum(a.index) += v;
        }
    }
    if (mode == PoolMode::max_only) {
        return max;
    }
    Vector out(2 * m);
    out.head(m) = max;
    out.tail(m) = codes.patches.empty() ? sum : Vector(sum / static_cast<double>(codes.patches.size()));
    return out;
}

// ---------------------------------------------------------------------------

Vector LinearProbe::logits(const Vector& pooled) const {
    if (static_cast<std::size_t>(pooled.size()) != feature_count()) {
        throw DataError("probe expects " + std::to_string(feature_count()) + " features, got " +
                        std::to_string(pooled.size()));
    }
    return weights.transpose() * pooled + bias;
}

std::size_t LinearProbe::predict(const Vector& pooled) const {
    Eigen::Index best = 0;
    logits(pooled).maxCoeff(&best);
    return static_cast<std::size_t>(best);
}

namespace {

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

void check_dataset(const LinearProbe& probe, const Matrix& features, const std::vector<std::size_t>& labels) {
    if (static_cast<std::size_t>(features.rows()) != labels.size()) {
        throw DataError("probe: " + std::to_string(features.rows()) + " feature rows but " +
                        std::to_string(labels.size()) + " labels");
    }
    if (static_cast<std::size_t>(features.cols()) != probe.feature_count()) {
        throw DataError("probe: feature width " + std::to_string(features.cols()) + ", expected " +
                        std::to_string(probe.feature_count()));
    }
    for (const auto y : labels) {
        if (y >= probe.class_count()) {
            throw DataError("probe: label " + std::to_string(y) + " out of range");
        }
    }
}

Matrix gather_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

template <typename T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& rows) {
    std::vector<T> out;
    out.reserve(rows.size());
    for (const auto r : rows) {
        out.push_back(v[r]);
    }
    return out;
}

} // namespace

ProbeLossResult probe_loss_and_gradient(const LinearProbe& probe, const Matrix& features,
                                        const std::vector<std::size_t>& labels) {
    check_dataset(probe, features, labels);
    const auto n = features.rows();
    if (n == 0) {
        throw DataError("probe: empty batch");
    }
    Matrix logits = features * probe.weights;
    logits.rowwise() += probe.bias.transpose();

    ProbeLossResult out;
    Matrix delta(n, logits.cols());
    double ce = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double top = logits.row(i).maxCoeff();
        const RowVector e = (logits.row(i).array() - top).exp().matrix();
        const double z = e.sum();
        const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
        ce += -(logits(i, y) - top - std::log(z));
        delta.row(i) = e / z;
        delta(i, y) -= 1.0;
    }
    const double inv = 1.0 / static_cast<double>(n);
    out.loss = ce * inv + probe.l1 * probe.weights.cwiseAbs().sum();
    out.grad_weights = features.transpose() * delta * inv + probe.l1 * probe.weights.unaryExpr(&sign);
    out.grad_bias = delta.colwise().sum().transpose() * inv;
    return out;
}

double probe_accuracy(const LinearProbe& probe, const Matrix& features, const std::vector<std::size_t>& labels) {
    check_dataset(probe, features, labels);
    if (labels.empty()) {
        return 0.0;
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        correct += probe.predict(features.row(static_cast<Eigen::Index>(i)).transpose()) == labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

ProbeTrainResult train_probe(const Matrix& features, const std::vector<std::size_t>& labels,
                             const ProbeConfig& config) {
    if (config.batch_size == 0 || !(config.lr > 0.0) || config.l1 < 0.0 || config.holdout_fraction < 0.0 ||
        config.holdout_fraction >= 1.0) {
        throw ConfigError("probe: batch_size > 0, lr > 0, l1 >= 0 and holdout_fraction in [0, 1) required");
    }
    if (static_cast<std::size_t>(features.rows()) != labels.size() || labels.size() < 2) {
        throw DataError("probe: need at least two labelled examples");
    }
    const std::size_t classes = *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<std::size_t> seen(labels.begin(), labels.end());
    std::sort(seen.begin(), seen.end());
    if (std::unique(seen.begin(), seen.end()) - seen.begin() < 2) {
        throw DataError("probe: single-class dataset");
    }
    if (!features.allFinite()) {
        throw DataError("probe: non-finite pooled features");
    }

    Rng rng(config.seed);
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::size_t holdout_count = 0;
    if (config.holdout_fraction > 0.0) {
        holdout_count = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(labels.size()))));
    }
    ProbeTrainResult result;
    result.holdout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(holdout_count));
    std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(holdout_count), order.end());
    std::sort(result.holdout.begin(), result.holdout.end());
    std::sort(train.begin(), train.end());

    const Matrix train_x = gather_rows(features, train);
    const auto train_y = gather(labels, train);
    // Without a holdout, checkpoints are ranked by training accuracy.
    const Matrix eval_x = holdout_count > 0 ? gather_rows(features, result.holdout) : train_x;
    const auto eval_y = holdout_count > 0 ? gather(labels, result.holdout) : train_y;

    LinearProbe probe;
    probe.weights = Matrix::Zero(features.cols(), static_cast<Eigen::Index>(classes));
    probe.bias = Vector::Zero(static_cast<Eigen::Index>(classes));
    probe.l1 = config.l1;
    probe.mode = config.mode;

    Adam adam({config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
    adam.add_block(probe.weights.size());
    adam.add_block(probe.bias.size());

    result.probe = probe;
    std::vector<std::size_t> batch_order(train.size());
    std::iota(batch_order.begin(), batch_order.end(), 0);
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        rng.shuffle(batch_order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < batch_order.size(); start += config.batch_size) {
            const auto end = std::min(start + config.batch_size, batch_order.size());
            const std::vector<std::size_t> rows(batch_order.begin() + static_cast<std::ptrdiff_t>(start),
                                                batch_order.begin() + static_cast<std::ptrdiff_t>(end));
            const auto step = probe_loss_and_gradient(probe, gather_rows(train_x, rows), gather(train_y, rows));
            if (!std::isfinite(step.loss)) {
                throw NumericError("probe: non-finite loss at epoch " + std::to_string(epoch));
            }
            adam.begin_step();
            adam.update(0, probe.weights, step.grad_weights, true);
            adam.update(1, probe.bias, step.grad_bias, false);
            loss_sum += step.loss;
            ++batches;
        }
        ProbeEpoch row{epoch, loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1)),
                       probe_accuracy(probe, train_x, train_y), probe_accuracy(probe, eval_x, eval_y)};
        result.log.push_back(row);
        if (row.holdout_accuracy > result.holdout_accuracy || result.best_epoch == 0) {
            result.probe = probe;
            result.best_epoch = epoch;
            result.holdout_accuracy = row.holdout_accuracy;
        }
    }
    return result;
}

Explanation classify_explain(const LinearProbe& probe, const Vector& pooled, std::size_t top_n) {
    Explanation out;
    out.logits = probe.logits(pooled);
    Eigen::Index cls = 0;
    out.logits.maxCoeff(&cls);
    out.predicted_class = static_cast<std::size_t>(cls);
    out.bias = probe.bias(cls);

    const std::size_t m = probe.concept_count();
    std::vector<ConceptContribution> all;
    double positive = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
        const auto i = static_cast<Eigen::Index>(c);
        double v = pooled(i) * probe.weights(i, cls);
        if (probe.mode == PoolMode::max_mean) {
            const auto j = static_cast<Eigen::Index>(m + c);
            v += pooled(j) * probe.weights(j, cls);
        }
        out.contribution_sum += v;
        if (v != 0.0) {
            all.push_back({c, v, 0.0});
            positive += std::max(v, 0.0);
        }
    }
    std::stable_sort(all.begin(), all.end(),
                     [](const auto& a, const auto& b) { return a.contribution > b.contribution; });
    for (auto& c : all) {
        c.percent = positive > 0.0 ? 100.0 * c.contribution / positive : 0.0;
    }
    if (top_n > 0 && all.size() > top_n) {
        all.resize(top_n);
    }
    out.contributions = std::move(all);
    return out;
}

void save_probe(const fs::path& dir, const LinearProbe& probe) {
    fs::create_directories(dir);
    write_tensor(dir / "weights.ief", Tensor::from_matrix(probe.weights));
    write_tensor(dir / "bias.ief", Tensor::from_vector(probe.bias));
    nlohmann::ordered_json meta;
    meta["features"] = probe.feature_count();
    meta["classes"] = probe.class_count();
    meta["l1"] = probe.l1;
    meta["mode"] = pool_mode_name(probe.mode);
    meta["class_names"] = probe.class_names;
    write_text(dir / "probe.json", meta.dump(2) + "\n");
}

LinearProbe load_probe(const fs::path& dir) {
    LinearProbe probe;
    probe.weights = read_tensor(dir / "weights.ief").to_matrix();
    probe.bias = read_tensor(dir / "bias.ief").to_vector();
    try {
        const auto meta = nlohmann::json::parse(read_text(dir / "probe.json"));
        probe.l1 = meta.at("l1").get<double>();
        probe.mode = parse_pool_mode(meta.at("mode").get<std::string>());
        probe.class_names = meta.value("class_names", std::vector<std::string>{});
        if (meta.at("features").get<std::size_t>() != probe.feature_count() ||
            meta.at("classes").get<std::size_t>() != probe.class_count()) {
            throw DataError(dir.string() + ": probe.json disagrees with the weight tensors");
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(dir.string() + "/probe.json: " + e.what());
    }
    if (probe.weights.cols() != probe.bias.size()) {
        throw DataError(dir.string() + ": probe weights and bias disagree");
    }
    return probe;
}

// ---------------------------------------------------------------------------

LabelBank load_label_bank(const fs::path& path, const std::string& background_name) {
    const Matrix raw = read_tensor(path).to_matrix();
    std::vector<std::string> names;
    for (const auto& line : read_lines(annotation_sidecar_path(path))) {
        if (!line.empty()) {
            names.push_back(line);
        }
    }
    if (names.size() != static_cast<std::size_t>(raw.rows())) {
        throw DataError(path.string() + ": sidecar lists " + std::to_string(names.size()) + " names, tensor has " +
                        std::to_string(raw.rows()) + " rows");
    }
    LabelBank bank;
    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const double norm = raw.row(r).norm();
        if (!(norm > 0.0)) {
            throw DataError(path.string() + ": label '" + names[i] + "' has a zero embedding");
        }
        if (!background_name.empty() && names[i] == background_name) {
            bank.background = raw.row(r).transpose() / norm;
        } else {
            keep.push_back(r);
            bank.names.push_back(names[i]);
        }
    }
    if (!background_name.empty() && !bank.background) {
        throw ConfigError(path.string() + ": no background entry named '" + background_name + "'");
    }
    if (keep.empty()) {
        throw DataError(path.string() + ": label bank is empty");
    }
    bank.embeddings.resize(static_cast<Eigen::Index>(keep.size()), raw.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) {
        bank.embeddings.row(static_cast<Eigen::Index>(i)) = raw.row(keep[i]).normalized();
    }
    return bank;
}

void save_label_bank(const fs::path& path, const std::vector<std::string>& names, const Matrix& embeddings) {
    if (names.size() != static_cast<std::size_t>(embeddings.rows())) {
        throw DataError("save_label_bank: names and embeddings differ in length");
    }
    write_tensor(path, Tensor::from_matrix(embeddings));
    std::string text;
    for (const auto& n : names) {
        text += n + "\n";
    }
    write_text(annotation_sidecar_path(path), text);
}

SegmentationResult segment(const SaeModel& model, const PatchGrid& grid, const LabelBank& bank,
                           const SegmentOptions& options) {
    grid.validate();
    if (bank.size() == 0) {
        throw DataError("segment: label bank is empty");
    }
    if (bank.embeddings.cols() != model.dec_bias.size() || grid.features.cols() != model.dec_bias.size()) {
        throw DataError("segment: embedding dimensions of grid, bank and model disagree");
    }
    if (options.background_prompt && !bank.background) {
        throw ConfigError("segment: background prompt requested but the bank has no background entry");
    }
    SegmentationResult out;
    out.grid_h = grid.grid_h;
    out.grid_w = grid.grid_w;
    out.options = options;
    out.codes = options.thresholded ? infer_codes(model, grid.features) : infer_codes(model, grid.features, 0.0);
    const Matrix recon = decode(model, out.codes);

    out.labels.resize(grid.patch_count());
    for (Eigen::Index p = 0; p < recon.rows(); ++p) {
        const double norm = recon.row(p).norm();
        const Vector cos = norm > 0.0 ? Vector(bank.embeddings * recon.row(p).transpose() / norm)
                                      : Vector(Vector::Zero(bank.embeddings.rows()));
        Eigen::Index best = 0;
        const double best_cos = cos.maxCoeff(&best);
        std::int64_t label = best;
        if (options.background_prompt && norm > 0.0 && bank.background->dot(recon.row(p)) / norm > best_cos) {
            label = kBackgroundLabel;
        }
        out.labels[static_cast<std::size_t>(p)] = label;
    }
    return out;
}

std::vector<ConceptContribution> explain_segment(const SegmentationResult& result, const SaeModel& model,
                                                 const LabelBank& bank, std::size_t label, std::size_t top_n) {
    if (label >= bank.size()) {
        throw DataError("explain_segment: label index " + std::to_string(label) + " out of range");
    }
    const Vector e = bank.embeddings.row(static_cast<Eigen::Index>(label)).transpose();
    std::map<std::size_t, double> sums;
    std::size_t patches = 0;
    for (std::size_t p = 0; p < result.labels.size(); ++p) {
        if (result.labels[p] != static_cast<std::int64_t>(label)) {
            continue;
        }
        ++patches;
        for (const auto& a : result.codes.patches[p]) {
            const auto dict = model.dec_weight.row(static_cast<Eigen::Index>(a.index));
            const double norm = dict.norm() * e.norm();
            sums[a.index] += a.value * (norm > 0.0 ? dict.dot(e) / norm : 0.0);
        }
    }
    if (patches == 0) {
        throw DataError("explain_segment: label '" + bank.names[label] + "' is not present in the segmentation");
    }
    std::vector<ConceptContribution> out;
    double positive = 0.0;
    for (const auto& [c, s] : sums) {
        const double v = s / static_cast<double>(patches);
        out.push_back({c, v, 0.0});
        positive += std::max(v, 0.0);
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.contribution > b.contribution; });
    for (auto& c : out) {
        c.percent = positive > 0.0 ? 100.0 * c.contribution / positive : 0.0;
    }
    if (top_n > 0 && out.size() > top_n) {
        out.resize(top_n);
    }
    return out;
}

std::vector<std::int64_t> upsample_labels(const std::vector<std::int64_t>& patch_labels, std::size_t grid_h,
                                          std::size_t grid_w, std::size_t height, std::size_t width) {
    if (patch_labels.size() != grid_h * grid_w || height < grid_h || width < grid_w) {
        throw DataError("upsample_labels: label map does not fit the requested resolution");
    }
    const auto rows = source_cells(height, grid_h);
    const auto cols = source_cells(width, grid_w);
    std::vector<std::int64_t> out(height * width);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            out[y * width + x] = patch_labels[rows[y] * grid_w + cols[x]];
        }
    }
    return out;
}

double mean_iou(const std::vector<std::vector<std::int64_t>>& predicted,
                const std::vector<std::vector<std::int64_t>>& truth, std::size_t class_count) {
    if (predicted.size() != truth.size()) {
        throw DataError("mean_iou: prediction and ground-truth image counts differ");
    }
    std::vector<std::size_t> inter(class_count, 0);
    std::vector<std::size_t> uni(class_count, 0);
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i].size() != truth[i].size()) {
            throw DataError("mean_iou: raster sizes differ for image " + std::to_string(i));
        }
        for (std::size_t p = 0; p < truth[i].size(); ++p) {
            const auto t = truth[i][p];
            const auto q = predicted[i][p];
            if (t < 0) {
                continue;
            }
            if (static_cast<std::size_t>(t) >= class_count) {
                throw DataError("mean_iou: ground-truth class " + std::to_string(t) + " out of range");
            }
            if (t == q) {
                ++inter[static_cast<std::size_t>(t)];
                ++uni[static_cast<std::size_t>(t)];
                continue;
            }
            ++uni[static_cast<std::size_t>(t)];
            if (q >= 0 && static_cast<std::size_t>(q) < class_count) {
                ++uni[static_cast<std::size_t>(q)];
            }
        }
    }
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < class_count; ++c) {
        if (uni[c] > 0) {
            sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
            ++counted;
        }
    }
    return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

std::string segment_attribution_json(const SegmentationResult& result, const SaeModel& model, const LabelBank& bank,
                                     std::size_t top_n) {
    nlohmann::ordered_json out;
    out["grid_h"] = result.grid_h;
    out["grid_w"] = result.grid_w;
    out["thresholded"] = result.options.thresholded;
    out["background_prompt"] = result.options.background_prompt;
    out["segments"] = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < bank.size(); ++l) {
        const auto patches = std::count(result.labels.begin(), result.labels.end(), static_cast<std::int64_t>(l));
        if (patches == 0) {
            continue;
        }
        nlohmann::ordered_json seg;
        seg["label"] = bank.names[l];
        seg["patches"] = patches;
        seg["concepts"] = nlohmann::ordered_json::array();
        for (const auto& c : explain_segment(result, model, bank, l, top_n)) {
            seg["concepts"].push_back({{"concept", c.concept_id}, {"contribution", c.contribution}});
        }
        out["segments"].push_back(std::move(seg));
    }
    out["background_patches"] = std::count(result.labels.begin(), result.labels.end(), kBackgroundLabel);
    return out.dump(2) + "\n";
}

} // namespace insight
