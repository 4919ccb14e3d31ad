#include "insight/interp_metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

namespace insight {

namespace fs = std::filesystem;

std::vector<std::uint8_t> ConceptMask::mask() const {
    std::vector<std::uint8_t> out(magnitude.size());
    for (std::size_t i = 0; i < magnitude.size(); ++i) {
        out[i] = magnitude[i] > 0.0 ? 1 : 0;
    }
    return out;
}

namespace {

void check_grid(const ConceptCodes& codes, std::size_t grid_h, std::size_t grid_w, std::size_t height,
                std::size_t width) {
    if (grid_h == 0 || grid_w == 0 || codes.patches.size() != grid_h * grid_w) {
        throw DataError("metrics: codes hold " + std::to_string(codes.patches.size()) + " patches, grid is " +
                        std::to_string(grid_h) + "x" + std::to_string(grid_w));
    }
    if (height < grid_h || width < grid_w) {
        throw DataError("metrics: annotation " + std::to_string(height) + "x" + std::to_string(width) +
                        " is smaller than the patch grid");
    }
}

} // namespace

std::vector<std::size_t> source_cells(std::size_t pixels, std::size_t cells) {
    std::vector<std::size_t> out(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
        out[p] = (2 * p + 1) * cells / (2 * pixels);
    }
    return out;
}

ConceptMask upsample(const ConceptCodes& codes, std::size_t concept_id, std::size_t grid_h, std::size_t grid_w,
                     std::size_t height, std::size_t width) {
    check_grid(codes, grid_h, grid_w, height, width);
    std::vector<double> patch_value(codes.patches.size(), 0.0);
    for (std::size_t p = 0; p < codes.patches.size(); ++p) {
        for (const auto& a : codes.patches[p]) {
            if (a.index == concept_id) {
                patch_value[p] = a.value;
            }
        }
    }
    const auto rows = source_cells(height, grid_h);
    const auto cols = source_cells(width, grid_w);
    ConceptMask out{height, width, std::vector<double>(height * width)};
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            out.magnitude[y * width + x] = patch_value[rows[y] * grid_w + cols[x]];
        }
    }
    return out;
}

double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) {
        throw DataError("iou: mask sizes differ");
    }
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += (a[i] && b[i]) ? 1 : 0;
        uni += (a[i] || b[i]) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

struct ConceptStats {
    std::size_t mask_pixels = 0;
    std::map<std::int64_t, std::size_t> overlap; // labelled pixels under the mask
    std::map<std::int64_t, double> mass;         // magnitude per label, background included
    double total_mass = 0.0;
};

struct ImageStats {
    std::map<std::int64_t, std::size_t> label_pixels; // labels >= 0 only
    std::map<std::size_t, ConceptStats> concepts;     // concepts with a positive activation

    double iou(std::size_t concept_id, std::int64_t label) const {
        const auto c = concepts.find(concept_id);
        if (c == concepts.end()) {
            return 0.0;
        }
        const auto o = c->second.overlap.find(label);
        const std::size_t inter = o == c->second.overlap.end() ? 0 : o->second;
        const std::size_t uni = c->second.mask_pixels + label_pixels.at(label) - inter;
        return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
};

ImageStats image_stats(const MetricImage& image) {
    const auto& ann = image.annotation;
    check_grid(image.codes, image.grid_h, image.grid_w, ann.height, ann.width);
    if (ann.labels.size() != ann.height * ann.width) {
        throw DataError("metrics: annotation raster size mismatch");
    }
    ImageStats stats;
    for (const auto l : ann.labels) {
        if (l >= 0) {
            ++stats.label_pixels[l];
        }
    }

    const auto rows = source_cells(ann.height, image.grid_h);
    const auto cols = source_cells(ann.width, image.grid_w);
    // Concept -> per-patch magnitude, built sparsely.
    std::map<std::size_t, std::vector<double>> per_concept;
    for (std::size_t p = 0; p < image.codes.patches.size(); ++p) {
        for (const auto& a : image.codes.patches[p]) {
            if (a.value > 0.0) {
                auto& v = per_concept[a.index];
                v.resize(image.codes.patches.size(), 0.0);
                v[p] = a.value;
            }
        }
    }
    for (const auto& [c, values] : per_concept) {
        ConceptStats cs;
        for (std::size_t y = 0; y < ann.height; ++y) {
            for (std::size_t x = 0; x < ann.width; ++x) {
                const double mag = values[rows[y] * image.grid_w + cols[x]];
                if (mag <= 0.0) {
                    continue;
                }
                const auto label = ann.labels[y * ann.width + x];
                ++cs.mask_pixels;
                if (label >= 0) {
                    ++cs.overlap[label];
                }
                cs.mass[label < 0 ? -1 : label] += mag;
                cs.total_mass += mag;
            }
        }
        stats.concepts.emplace(c, std::move(cs));
    }
    return stats;
}

std::vector<ImageStats> all_stats(const std::vector<MetricImage>& images) {
    if (images.empty()) {
        throw DataError("metrics: no annotated images");
    }
    std::vector<ImageStats> out;
    out.reserve(images.size());
    for (const auto& image : images) {
        out.push_back(image_stats(image));
    }
    return out;
}

double entropy(const ConceptStats& cs) {
    double h = 0.0;
    for (const auto& [_, mass] : cs.mass) {
        const double p = mass / cs.total_mass;
        if (p > 0.0) {
            h -= p * std::log(p);
        }
    }
    return h;
}

MetricReport compute(const std::vector<MetricImage>& images, const std::vector<ImageStats>& stats,
                     std::size_t min_images) {
    MetricReport report;
    report.image_count = images.size();

    std::map<std::int64_t, LabelBreakdown> labels;
    for (std::size_t x = 0; x < images.size(); ++x) {
        for (const auto& [l, _] : stats[x].label_pixels) {
            auto& row = labels[l];
            row.label = l;
            const auto name = images[x].annotation.label_names.find(l);
            if (row.name.empty() && name != images[x].annotation.label_names.end()) {
                row.name = name->second;
            }
        }
    }

    // Locality.
    double locality_sum = 0.0;
    std::size_t locality_images = 0;
    for (const auto& s : stats) {
        if (s.label_pixels.empty()) {
            continue;
        }
        double image_sum = 0.0;
        for (const auto& [l, _] : s.label_pixels) {
            double best = 0.0;
            for (const auto& [c, __] : s.concepts) {
                best = std::max(best, s.iou(c, l));
            }
            image_sum += best;
            auto& row = labels[l];
            ++row.images;
            row.mean_max_iou += best;
        }
        locality_sum += image_sum / static_cast<double>(s.label_pixels.size());
        ++locality_images;
    }
    if (locality_images == 0) {
        throw DataError("metrics: no image carries any label");
    }
    report.locality = 100.0 * locality_sum / static_cast<double>(locality_images);

    // Consistency.
    double consistency_sum = 0.0;
    for (auto& [l, row] : labels) {
        row.mean_max_iou /= static_cast<double>(row.images);
        std::map<std::size_t, std::pair<double, std::size_t>> per_concept; // sum IoU, images
        for (const auto& s : stats) {
            if (!s.label_pixels.contains(l)) {
                continue;
            }
            for (const auto& [c, _] : s.concepts) {
                auto& acc = per_concept[c];
                acc.first += s.iou(c, l);
                ++acc.second;
            }
        }
        for (const auto& [c, acc] : per_concept) {
            const double mean = acc.first / static_cast<double>(acc.second);
            if (row.best_concept < 0 || mean > row.consistency) {
                row.consistency = mean;
                row.best_concept = static_cast<std::int64_t>(c);
            }
        }
        consistency_sum += row.consistency;
    }
    report.consistency = 100.0 * consistency_sum / static_cast<double>(labels.size());
    for (auto& [_, row] : labels) {
        report.labels.push_back(std::move(row));
    }

    // Impurity.
    std::map<std::size_t, std::vector<const ConceptStats*>> active;
    for (const auto& s : stats) {
        for (const auto& [c, cs] : s.concepts) {
            active[c].push_back(&cs);
        }
    }
    double impurity_sum = 0.0;
    for (const auto& [c, list] : active) {
        ConceptBreakdown row{c, list.size(), false, 0.0};
        if (list.size() >= min_images) {
            double h = 0.0;
            std::size_t counted = 0;
            for (const auto* cs : list) {
                if (cs->total_mass > 0.0) {
                    h += entropy(*cs);
                    ++counted;
                }
            }
            if (counted > 0) {
                row.counted = true;
                row.mean_entropy = h / static_cast<double>(counted);
                impurity_sum += row.mean_entropy;
                ++report.impurity_concepts;
            }
        }
        report.concepts.push_back(row);
    }
    if (report.impurity_concepts > 0) {
        report.impurity = impurity_sum / static_cast<double>(report.impurity_concepts);
    } else {
        log_warning("metrics: no concept is active in at least " + std::to_string(min_images) +
                    " images; impurity reported as 0");
    }
    return report;
}

} // namespace

double locality(const std::vector<MetricImage>& images) { return evaluate_metrics(images, 1).locality; }

double consistency(const std::vector<MetricImage>& images) { return evaluate_metrics(images, 1).consistency; }

double impurity(const std::vector<MetricImage>& images, std::size_t min_images) {
    return evaluate_metrics(images, min_images).impurity;
}

MetricReport evaluate_metrics(const std::vector<MetricImage>& images, std::size_t min_images) {
    return compute(images, all_stats(images), min_images);
}

std::string report_to_json(const MetricReport& report) {
    nlohmann::ordered_json out;
    out["locality"] = report.locality;
    out["consistency"] = report.consistency;
    out["impurity"] = report.impurity;
    out["image_count"] = report.image_count;
    out["impurity_concepts"] = report.impurity_concepts;
    out["labels"] = nlohmann::ordered_json::array();
    for (const auto& l : report.labels) {
        out["labels"].push_back({{"label", l.label},
                                 {"name", l.name},
                                 {"images", l.images},
                                 {"mean_max_iou", l.mean_max_iou},
                                 {"consistency", l.consistency},
                                 {"best_concept", l.best_concept}});
    }
    return out.dump(2) + "\n";
}

void write_report(const fs::path& dir, const MetricReport& report) {
    write_text(dir / "metrics.json", report_to_json(report));
    std::ostringstream labels;
    labels << std::setprecision(10) << "label,name,images,mean_max_iou,consistency,best_concept\n";
    for (const auto& l : report.labels) {
        std::string name = l.name;
        for (std::size_t at = name.find('"'); at != std::string::npos; at = name.find('"', at + 2)) {
            name.insert(at, 1, '"');
        }
        labels << l.label << ",\"" << name << "\"," << l.images << ',' << l.mean_max_iou << ',' << l.consistency
               << ',' << l.best_concept << '\n';
    }
    write_text(dir / "labels.csv", labels.str());
    std::ostringstream concepts;
    concepts << std::setprecision(10) << "concept,images_active,counted,mean_entropy\n";
    for (const auto& c : report.concepts) {
        concepts << c.concept_id << ',' << c.images_active << ',' << (c.counted ? 1 : 0) << ',' << c.mean_entropy
                 << '\n';
    }
    write_text(dir / "concepts.csv", concepts.str());
}

} // namespace insight
