#include "insight/cli.hpp"

#include "insight/concept_naming.hpp"
#include "insight/downstream.hpp"
#include "insight/family_graph.hpp"
#include "insight/guided_pooling.hpp"
#include "insight/interp_metrics.hpp"
#include "insight/parallel.hpp"
#include "insight/run_config.hpp"
#include "insight/sae.hpp"
#include "insight/tensor_store.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace insight::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

struct Options {
    std::string command;
    std::string manifest;
    std::string model;
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<double> threshold;
    std::optional<std::string> background;
    std::optional<std::size_t> top_n;
};

struct Context {
    Options opts;
    RunConfig cfg;
    fs::path out;
    fs::path model; // run directory holding the checkpoints; defaults to out

    fs::path manifest_path() const {
        if (opts.manifest.empty()) {
            throw ConfigError(opts.command + ": --manifest is required");
        }
        return fs::absolute(opts.manifest).lexically_normal();
    }
    DatasetManifest manifest() const { return load_manifest(manifest_path()); }

    fs::path sae_dir() const { return fs::exists(model / "sae" / "sae.json") ? model / "sae" : model; }
    SaeModel sae() const {
        const auto dir = sae_dir();
        if (!fs::exists(dir / "sae.json")) {
            throw DataError("no SAE checkpoint found under " + model.string() + " (run train-sae first)");
        }
        return load_sae(dir);
    }
    std::size_t top_n() const { return opts.top_n.value_or(cfg.top_n); }
};

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

void require_file(const fs::path& path, const std::string& hint) {
    if (!fs::exists(path)) {
        throw DataError("missing file: " + path.string() + " (" + hint + ")");
    }
}

Json read_json(const fs::path& path) {
    require_file(path, "expected output of an earlier stage");
    try {
        return Json::parse(read_text(path));
    } catch (const Json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const Json& doc) { write_text(path, doc.dump(2) + "\n"); }

// --- codes on disk --------------------------------------------------------

struct ImageCodes {
    std::string image_id;
    ConceptCodes codes;
};

void save_codes(const fs::path& dir, const std::vector<ImageCodes>& images) {
    std::ostringstream index;
    for (const auto& im : images) {
        const fs::path rel = fs::path(im.image_id + ".ief");
        write_tensor(dir / rel, Tensor::from_matrix(im.codes.to_dense()));
        index << im.image_id << '\t' << rel.generic_string() << '\n';
    }
    write_text(dir / "index.tsv", index.str());
}

std::vector<ImageCodes> load_codes(const fs::path& dir) {
    require_file(dir / "index.tsv", "run encode first");
    std::vector<std::pair<std::string, fs::path>> rows;
    for (const auto& line : read_lines(dir / "index.tsv")) {
        if (line.empty()) {
            continue;
        }
        const auto f = split_tabs(line);
        if (f.size() != 2) {
            throw DataError((dir / "index.tsv").string() + ": rows must be image_id<TAB>path");
        }
        rows.emplace_back(f[0], dir / f[1]);
    }
    std::vector<ImageCodes> out(rows.size());
    parallel_for(rows.size(), [&](std::size_t i) {
        out[i] = {rows[i].first, ConceptCodes::from_dense(read_tensor(rows[i].second).to_matrix())};
    });
    return out;
}

ConceptCodes concatenate(const std::vector<ImageCodes>& images) {
    ConceptCodes all;
    all.concept_count = images.empty() ? 0 : images.front().codes.concept_count;
    for (const auto& im : images) {
        all.patches.insert(all.patches.end(), im.codes.patches.begin(), im.codes.patches.end());
    }
    return all;
}

std::map<std::string, std::size_t> manifest_index(const DatasetManifest& manifest) {
    std::map<std::string, std::size_t> out;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        out[manifest.entries[i].image_id] = i;
    }
    return out;
}

std::map<std::size_t, std::string> load_name_map(const fs::path& path) {
    std::map<std::size_t, std::string> out;
    if (fs::exists(path)) {
        for (const auto& n : read_names(path)) {
            out[n.concept_id] = n.label;
        }
    }
    return out;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (const char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

// --- subcommands ----------------------------------------------------------

Json cmd_pool(const Context& ctx) {
    const auto manifest = ctx.manifest();
    std::optional<AffinityHead> head;
    if (fs::exists(ctx.model / "affinity_head" / "head.json")) {
        head = load_affinity_head(ctx.model / "affinity_head");
    }
    const std::string source = head ? "affinity_head" : (manifest.has_affinities() ? "manifest" : "cosine");
    const fs::path dir = ctx.out / "pooled";

    DatasetManifest pooled = manifest;
    parallel_for(manifest.entries.size(), [&](std::size_t i) {
        const PatchGrid grid{load_embeddings(manifest, i), manifest.grid_h, manifest.grid_w};
        AffinityMatrix affinity;
        if (head) {
            affinity = predict_affinity(grid, *head);
        } else if (manifest.entries[i].affinity_path) {
            affinity = load_affinity(manifest, i);
        } else {
            affinity = cosine_affinity(grid);
        }
        const auto path = dir / "emb" / (manifest.entries[i].image_id + ".ief");
        write_tensor(path, Tensor::from_matrix(guided_pool(grid, affinity).features));
        pooled.entries[i].embedding_path = path;
    });
    save_manifest(dir / "manifest.tsv", pooled);
    return {{"images", manifest.entries.size()},
            {"affinity_source", source},
            {"manifest", (dir / "manifest.tsv").string()}};
}

Json cmd_train_affinity(const Context& ctx) {
    const auto result = train_affinity_head(ctx.manifest(), ctx.cfg.affinity);
    const fs::path dir = ctx.out / "affinity_head";
    save_affinity_head(dir, result.head, ctx.cfg.affinity.gamma);
    std::ostringstream log;
    log << "epoch,loss\n";
    for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
        log << e + 1 << ',' << fmt(result.epoch_losses[e]) << '\n';
    }
    write_text(dir / "training_log.csv", log.str());
    Json out{{"checkpoint", dir.string()}, {"epochs", result.epoch_losses.size()}};
    out["final_loss"] = result.epoch_losses.empty() ? Json(nullptr) : Json(result.epoch_losses.back());
    return out;
}

Json cmd_train_sae(const Context& ctx) {
    const auto result = train_sae(ctx.manifest(), ctx.cfg.sae);
    const fs::path dir = ctx.out / "sae";
    save_sae(dir, result.model);
    write_training_log(dir / "training_log.csv", result.log);
    Json summary{{"steps", result.log.size()},
                 {"m", result.model.dec_weight.rows()},
                 {"k", result.model.k}};
    summary["validation_fve"] = std::isfinite(result.validation_fve) ? Json(result.validation_fve) : Json(nullptr);
    summary["inference_threshold"] =
        result.model.inference_threshold ? Json(*result.model.inference_threshold) : Json(nullptr);
    summary["final_dead_count"] = result.log.empty() ? 0 : result.log.back().dead_count;
    if (result.holdout.rows() > 1) {
        summary["holdout_shell_errors"] = shell_errors(result.model, result.holdout);
    }
    write_json(dir / "summary.json", summary);
    Json out{{"checkpoint", dir.string()}};
    out.update(summary);
    return out;
}

Json cmd_encode(const Context& ctx) {
    const auto manifest = ctx.manifest();
    const auto model = ctx.sae();
    if (!ctx.opts.threshold && !model.inference_threshold) {
        throw DataError("encode: the SAE checkpoint has no inference threshold; pass --threshold");
    }
    std::vector<ImageCodes> images(manifest.entries.size());
    parallel_for(images.size(), [&](std::size_t i) {
        const Matrix x = load_embeddings(manifest, i);
        images[i] = {manifest.entries[i].image_id,
                     ctx.opts.threshold ? infer_codes(model, x, *ctx.opts.threshold) : infer_codes(model, x)};
    });
    save_codes(ctx.out / "codes", images);
    std::size_t active = 0;
    std::size_t patches = 0;
    for (const auto& im : images) {
        active += im.codes.nonzero_count();
        patches += im.codes.patch_count();
    }
    return {{"images", images.size()},
            {"threshold", ctx.opts.threshold.value_or(*model.inference_threshold)},
            {"mean_active_per_patch", patches == 0 ? 0.0 : static_cast<double>(active) / static_cast<double>(patches)}};
}

Json cmd_graph(const Context& ctx) {
    const auto images = load_codes(ctx.out / "codes");
    if (images.empty()) {
        throw DataError("graph: no encoded images");
    }
    ConfidenceAccumulator acc(images.front().codes.concept_count);
    for (const auto& im : images) {
        acc.add(im.codes);
    }
    const auto matrix = finalize(acc);
    const fs::path dir = ctx.out / "graph";
    save_confidence(dir, matrix);
    const auto built = build_graph(matrix, ctx.cfg.graph_tau);
    write_text(dir / "graph.json", graph_to_json(built.graph));
    std::ostringstream removed;
    removed << "parent\tchild\tconfidence\treason\n";
    for (const auto& r : built.removed) {
        removed << r.edge.parent << '\t' << r.edge.child << '\t' << fmt(r.edge.confidence) << '\t' << r.reason << '\n';
    }
    write_text(dir / "removed_edges.tsv", removed.str());
    std::size_t fired = 0;
    for (std::size_t j = 0; j < matrix.concept_count(); ++j) {
        fired += matrix.defined(j) ? 1 : 0;
    }
    return {{"concepts", matrix.concept_count()},
            {"fired_concepts", fired},
            {"edges", built.graph.edges().size()},
            {"removed_edges", built.removed.size()},
            {"tau", ctx.cfg.graph_tau}};
}

Json cmd_name(const Context& ctx) {
    if (ctx.cfg.vocabulary.empty()) {
        throw ConfigError("name: set naming.vocabulary in the config");
    }
    const auto bank = load_vocabulary_bank(ctx.cfg.vocabulary);
    const auto model = ctx.sae();
    const fs::path graph_dir = ctx.out / "graph";
    require_file(graph_dir / "graph.json", "run graph first");
    auto graph = graph_from_json(read_text(graph_dir / "graph.json"));
    const auto confidence = load_confidence(graph_dir);
    const auto corpus = concatenate(load_codes(ctx.out / "codes"));
    const auto names = name_all(model, graph, confidence.values, corpus, bank, ctx.cfg.naming);
    write_names(ctx.out / "names.tsv", names);

    for (const auto& n : names) {
        if (graph.contains(n.concept_id)) {
            auto& nodes = graph.mutable_nodes();
            std::find_if(nodes.begin(), nodes.end(), [&](const auto& node) { return node.id == n.concept_id; })
                ->label = n.label;
        }
    }
    write_text(graph_dir / "graph.json", graph_to_json(graph));
    std::set<std::string> distinct;
    for (const auto& n : names) {
        distinct.insert(n.label);
    }
    return {{"named_concepts", names.size()}, {"distinct_labels", distinct.size()},
            {"names", (ctx.out / "names.tsv").string()}};
}

Json cmd_metrics(const Context& ctx) {
    const auto manifest = ctx.manifest();
    if (!manifest.has_annotations()) {
        throw DataError("metrics: manifest has no annotation rasters");
    }
    const auto codes = load_codes(ctx.out / "codes");
    const auto by_id = manifest_index(manifest);
    std::vector<MetricImage> images(codes.size());
    parallel_for(codes.size(), [&](std::size_t i) {
        const auto it = by_id.find(codes[i].image_id);
        if (it == by_id.end() || !manifest.entries[it->second].annotation_path) {
            throw DataError("metrics: no annotation for encoded image '" + codes[i].image_id + "'");
        }
        images[i] = {codes[i].codes, manifest.grid_h, manifest.grid_w,
                     load_annotation(*manifest.entries[it->second].annotation_path)};
    });
    const auto report = evaluate_metrics(images, ctx.cfg.metrics_min_images);
    write_report(ctx.out / "metrics", report);
    return {{"locality", report.locality},
            {"consistency", report.consistency},
            {"impurity", report.impurity},
            {"images", report.image_count},
            {"impurity_concepts", report.impurity_concepts}};
}

Json cmd_probe(const Context& ctx) {
    if (ctx.cfg.probe_labels.empty()) {
        throw ConfigError("probe: set probe.labels in the config");
    }
    std::map<std::string, std::string> class_of;
    for (const auto& line : read_lines(ctx.cfg.probe_labels)) {
        if (line.empty()) {
            continue;
        }
        const auto f = split_tabs(line);
        if (f.size() != 2) {
            throw DataError(ctx.cfg.probe_labels.string() + ": rows must be image_id<TAB>class");
        }
        class_of[f[0]] = f[1];
    }
    const auto codes = load_codes(ctx.out / "codes");
    std::optional<double> threshold;
    if (ctx.opts.threshold) {
        threshold = ctx.opts.threshold;
    } else if (ctx.cfg.probe_thresholded) {
        const auto model = ctx.sae();
        if (!model.inference_threshold) {
            throw DataError("probe: thresholded pooling needs a trained SAE threshold");
        }
        threshold = model.inference_threshold;
    }

    std::set<std::string> class_set;
    for (const auto& im : codes) {
        const auto it = class_of.find(im.image_id);
        if (it == class_of.end()) {
            throw DataError("probe: no class label for image '" + im.image_id + "'");
        }
        class_set.insert(it->second);
    }
    const std::vector<std::string> classes(class_set.begin(), class_set.end());
    std::vector<std::size_t> labels;
    Matrix features;
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const Vector v = pool(codes[i].codes, ctx.cfg.probe.mode, threshold);
        if (i == 0) {
            features.resize(static_cast<Eigen::Index>(codes.size()), v.size());
        }
        features.row(static_cast<Eigen::Index>(i)) = v.transpose();
        labels.push_back(static_cast<std::size_t>(
            std::lower_bound(classes.begin(), classes.end(), class_of.at(codes[i].image_id)) - classes.begin()));
    }
    auto result = train_probe(features, labels, ctx.cfg.probe);
    result.probe.class_names = classes;

    const fs::path dir = ctx.out / "probe";
    save_probe(dir, result.probe);
    std::ostringstream log;
    log << "epoch,train_loss,train_accuracy,holdout_accuracy\n";
    for (const auto& r : result.log) {
        log << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.train_accuracy) << ',' << fmt(r.holdout_accuracy)
            << '\n';
    }
    write_text(dir / "training_log.csv", log.str());

    const auto names = load_name_map(ctx.out / "names.tsv");
    Json explanations = Json::array();
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const auto e = classify_explain(result.probe, features.row(static_cast<Eigen::Index>(i)).transpose(),
                                        ctx.top_n());
        Json row{{"image_id", codes[i].image_id},
                 {"true_class", classes[labels[i]]},
                 {"predicted_class", classes[e.predicted_class]},
                 {"logit", e.logits(static_cast<Eigen::Index>(e.predicted_class))},
                 {"bias", e.bias}};
        row["concepts"] = Json::array();
        for (const auto& c : e.contributions) {
            row["concepts"].push_back({{"concept", c.concept_id},
                                       {"label", names.contains(c.concept_id) ? names.at(c.concept_id) : ""},
                                       {"contribution", c.contribution},
                                       {"percent", c.percent}});
        }
        explanations.push_back(std::move(row));
    }
    write_json(dir / "explanations.json", explanations);

    Json summary{{"classes", classes},
                 {"images", codes.size()},
                 {"train_accuracy", probe_accuracy(result.probe, features, labels)},
                 {"holdout_accuracy", result.holdout_accuracy},
                 {"best_epoch", result.best_epoch},
                 {"thresholded", threshold.has_value()}};
    write_json(dir / "summary.json", summary);
    return summary;
}

Json cmd_segment(const Context& ctx) {
    if (ctx.cfg.segment_labels.empty()) {
        throw ConfigError("segment: set segment.labels in the config");
    }
    const std::string background = ctx.opts.background.value_or(ctx.cfg.background);
    const auto bank = load_label_bank(ctx.cfg.segment_labels, background);
    auto model = ctx.sae();
    SegmentOptions options{!background.empty(), ctx.cfg.segment_thresholded};
    if (ctx.opts.threshold) {
        model.inference_threshold = *ctx.opts.threshold;
        options.thresholded = true;
    }
    const auto manifest = ctx.manifest();
    const fs::path dir = ctx.out / "segment";

    std::vector<SegmentationResult> results(manifest.entries.size());
    parallel_for(results.size(), [&](std::size_t i) {
        const PatchGrid grid{load_embeddings(manifest, i), manifest.grid_h, manifest.grid_w};
        results[i] = segment(model, grid, bank, options);
        const auto& id = manifest.entries[i].image_id;
        write_tensor(dir / (id + ".ief"), Tensor::from_i64({manifest.grid_h, manifest.grid_w}, results[i].labels));
        write_text(dir / (id + ".json"), segment_attribution_json(results[i], model, bank, ctx.top_n()));
    });

    Json summary{{"images", results.size()},
                 {"labels", bank.names},
                 {"background_prompt", options.background_prompt},
                 {"thresholded", options.thresholded}};
    summary["mean_iou"] = nullptr;
    if (manifest.has_annotations()) {
        // Bank labels are matched to annotation classes by name.
        std::vector<std::vector<std::int64_t>> predicted;
        std::vector<std::vector<std::int64_t>> truth;
        std::int64_t max_class = -1;
        for (std::size_t i = 0; i < results.size(); ++i) {
            if (!manifest.entries[i].annotation_path) {
                continue;
            }
            const auto ann = load_annotation(*manifest.entries[i].annotation_path);
            std::map<std::string, std::int64_t> id_of;
            for (const auto& [id, name] : ann.label_names) {
                id_of[name] = id;
                max_class = std::max(max_class, id);
            }
            auto labels = upsample_labels(results[i].labels, manifest.grid_h, manifest.grid_w, ann.height, ann.width);
            for (auto& l : labels) {
                if (l >= 0) {
                    const auto it = id_of.find(bank.names[static_cast<std::size_t>(l)]);
                    l = it == id_of.end() ? -2 : it->second;
                }
            }
            predicted.push_back(std::move(labels));
            truth.push_back(ann.labels);
        }
        if (max_class >= 0) {
            summary["mean_iou"] = mean_iou(predicted, truth, static_cast<std::size_t>(max_class + 1));
        }
    }
    write_json(dir / "summary.json", summary);
    return summary;
}

Json cmd_export_graph(const Context& ctx) {
    const fs::path graph_dir = ctx.out / "graph";
    require_file(graph_dir / "graph.json", "run graph first");
    auto graph = graph_from_json(read_text(graph_dir / "graph.json"));
    const auto names = load_name_map(ctx.out / "names.tsv");
    for (auto& node : graph.mutable_nodes()) {
        if (names.contains(node.id)) {
            node.label = names.at(node.id);
        }
    }
    // Only concepts that fired or take part in an edge are exported.
    std::set<std::size_t> keep;
    for (const auto& n : graph.nodes()) {
        if (n.activation_frequency > 0.0) {
            keep.insert(n.id);
        }
    }
    for (const auto& e : graph.edges()) {
        keep.insert(e.parent);
        keep.insert(e.child);
    }
    std::vector<FamilyNode> nodes;
    for (const auto& n : graph.nodes()) {
        if (keep.contains(n.id)) {
            nodes.push_back(n);
        }
    }
    const FamilyGraph exported(std::move(nodes), graph.edges());
    const auto path = graph_dir / "export.json";
    write_text(path, graph_to_json(exported));
    std::size_t roots = 0;
    for (const auto& n : exported.nodes()) {
        roots += exported.parents(n.id).empty() ? 1 : 0;
    }
    return {{"nodes", exported.nodes().size()}, {"edges", exported.edges().size()}, {"roots", roots},
            {"path", path.string()}};
}

std::string contribution_svg(const std::vector<std::pair<std::string, double>>& bars, const std::string& title) {
    const double width = 640.0;
    const double bar_h = 22.0;
    const double left = 200.0;
    const double top = 40.0;
    double max = 0.0;
    for (const auto& [_, v] : bars) {
        max = std::max(max, v);
    }
    std::ostringstream svg;
    svg << std::setprecision(6);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << top + bar_h * static_cast<double>(bars.size()) + 20.0 << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg << "  <text x=\"10\" y=\"22\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const double y = top + bar_h * static_cast<double>(i);
        const double w = max > 0.0 ? (width - left - 20.0) * bars[i].second / max : 0.0;
        svg << "  <text x=\"" << left - 8.0 << "\" y=\"" << y + 15.0 << "\" text-anchor=\"end\">"
            << xml_escape(bars[i].first) << "</text>\n";
        svg << "  <rect x=\"" << left << "\" y=\"" << y + 3.0 << "\" width=\"" << w << "\" height=\"" << bar_h - 6.0
            << "\" fill=\"#4c72b0\"/>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

Json cmd_report(const Context& ctx) {
    Json report;
    const auto load_if = [&](const std::string& key, const fs::path& path) {
        if (fs::exists(path)) {
            report[key] = read_json(path);
        }
    };
    load_if("sae", ctx.sae_dir() / "summary.json");
    if (fs::exists(ctx.out / "metrics" / "metrics.json")) {
        const auto m = read_json(ctx.out / "metrics" / "metrics.json");
        report["metrics"] = {{"locality", m.at("locality")},
                             {"consistency", m.at("consistency")},
                             {"impurity", m.at("impurity")},
                             {"images", m.at("image_count")}};
    }
    if (fs::exists(ctx.out / "graph" / "graph.json")) {
        const auto g = graph_from_json(read_text(ctx.out / "graph" / "graph.json"));
        std::size_t fired = 0;
        for (const auto& n : g.nodes()) {
            fired += n.activation_frequency > 0.0 ? 1 : 0;
        }
        report["graph"] = {{"concepts", g.nodes().size()}, {"fired_concepts", fired}, {"edges", g.edges().size()}};
    }
    if (fs::exists(ctx.out / "names.tsv")) {
        report["named_concepts"] = read_names(ctx.out / "names.tsv").size();
    }
    load_if("probe", ctx.out / "probe" / "summary.json");
    load_if("segment", ctx.out / "segment" / "summary.json");
    if (report.empty()) {
        throw DataError("report: nothing to report under " + ctx.out.string());
    }

    bool svg = false;
    const auto explanations = ctx.out / "probe" / "explanations.json";
    if (ctx.cfg.report_svg && fs::exists(explanations)) {
        std::map<std::string, double> totals;
        for (const auto& row : read_json(explanations)) {
            for (const auto& c : row.at("concepts")) {
                const double v = c.at("contribution").get<double>();
                if (v > 0.0) {
                    const auto label = c.at("label").get<std::string>();
                    const auto id = std::to_string(c.at("concept").get<std::size_t>());
                    totals[label.empty() ? "concept " + id : label + " (" + id + ")"] += v;
                }
            }
        }
        std::vector<std::pair<std::string, double>> bars(totals.begin(), totals.end());
        std::stable_sort(bars.begin(), bars.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        if (bars.size() > ctx.top_n()) {
            bars.resize(ctx.top_n());
        }
        write_text(ctx.out / "report.svg", contribution_svg(bars, "Top concept contributions (probe)"));
        svg = true;
    }
    write_json(ctx.out / "report.json", report);
    Json summary = report;
    summary["svg"] = svg;
    return summary;
}

const std::map<std::string, std::function<Json(const Context&)>>& commands() {
    static const std::map<std::string, std::function<Json(const Context&)>> table{
        {"pool", cmd_pool},       {"train-affinity", cmd_train_affinity},
        {"train-sae", cmd_train_sae}, {"encode", cmd_encode},
        {"graph", cmd_graph},     {"name", cmd_name},
        {"metrics", cmd_metrics}, {"probe", cmd_probe},
        {"segment", cmd_segment}, {"export-graph", cmd_export_graph},
        {"report", cmd_report},
    };
    return table;
}

const std::map<std::string, std::string>& descriptions() {
    static const std::map<std::string, std::string> table{
        {"pool", "guided pooling of patch embeddings"},
        {"train-affinity", "train the 3x3 affinity head on target affinities"},
        {"train-sae", "train the Matryoshka BatchTopK SAE"},
        {"encode", "encode every image into sparse concept codes"},
        {"graph", "build the confidence matrix and concept family graph"},
        {"name", "name concepts against a vocabulary bank"},
        {"metrics", "locality, consistency and impurity against annotations"},
        {"probe", "train a sparse linear probe with concept explanations"},
        {"segment", "open-vocabulary segmentation with concept attributions"},
        {"export-graph", "export the labelled family graph as JSON"},
        {"report", "consolidate stage summaries into report.json"},
    };
    return table;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) != nullptr) {
        return 2;
    }
    if (dynamic_cast<const DataError*>(&e) != nullptr || dynamic_cast<const fs::filesystem_error*>(&e) != nullptr) {
        return 3;
    }
    if (dynamic_cast<const NumericError*>(&e) != nullptr) {
        return 4;
    }
    return 1;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Concept extraction, hierarchy and evaluation pipeline", "insight"};
    app.require_subcommand(1);
    Options opts;
    for (const auto& [name, _] : commands()) {
        auto* sub = app.add_subcommand(name, descriptions().at(name));
        sub->add_option("--manifest", opts.manifest, "dataset manifest TSV");
        sub->add_option("--model", opts.model, "run directory holding checkpoints (defaults to --out)");
        sub->add_option("--config", opts.config, "run config (.toml or .json)");
        sub->add_option("--out", opts.out, "run directory for outputs")->required();
        sub->add_option("--seed", opts.seed, "override the config seed");
        sub->add_option("--threshold", opts.threshold, "activation threshold override");
        sub->add_option("--background", opts.background, "name of the background prompt in the label bank");
        sub->add_option("--top-n", opts.top_n, "number of concepts per explanation");
        sub->callback([&opts, name = name] { opts.command = name; });
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        out << Json{{"status", "error"}, {"exit_code", 2}, {"message", e.what()}}.dump() << '\n';
        return 2;
    }

    try {
        Context ctx;
        ctx.opts = opts;
        if (!opts.config.empty()) {
            ctx.cfg = load_run_config(opts.config);
        }
        if (opts.seed) {
            ctx.cfg.apply_seed(*opts.seed);
        }
        ctx.out = fs::absolute(opts.out).lexically_normal();
        ctx.model = opts.model.empty() ? ctx.out : fs::absolute(opts.model).lexically_normal();
        fs::create_directories(ctx.out);

        Json resolved = ctx.cfg.to_json();
        resolved["command"] = opts.command;
        write_json(ctx.out / (opts.command + ".config.json"), resolved);

        Json summary;
        summary["command"] = opts.command;
        summary["status"] = "ok";
        const Json result = commands().at(opts.command)(ctx);
        for (const auto& [key, value] : result.items()) {
            summary[key] = value;
        }
        out << summary.dump() << '\n';
        return 0;
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        err << "error: " << e.what() << '\n';
        out << Json{{"command", opts.command}, {"status", "error"}, {"exit_code", code}, {"message", e.what()}}.dump()
            << '\n';
        return code;
    }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run(args, out, err);
}

} // namespace insight::cli
