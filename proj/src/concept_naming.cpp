#include "insight/concept_naming.hpp"

#include "insight/tensor_store.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace insight {

namespace fs = std::filesystem;

namespace {
constexpr const char* kPosLetters = "nva";
} // namespace

std::string pos_name(PartOfSpeech pos) {
    switch (pos) {
    case PartOfSpeech::noun: return "noun";
    case PartOfSpeech::verb: return "verb";
    case PartOfSpeech::adjective: return "adjective";
    }
    return "unknown";
}

namespace {
PartOfSpeech parse_pos(const std::string& text) {
    for (std::size_t p = 0; p < kPosCount; ++p) {
        if (text == pos_name(static_cast<PartOfSpeech>(p))) {
            return static_cast<PartOfSpeech>(p);
        }
    }
    throw DataError("unknown part of speech '" + text + "'");
}
} // namespace

PosMask parse_pos_mask(const std::string& text) {
    PosMask mask{false, false, false};
    for (const char c : text) {
        const char* at = std::strchr(kPosLetters, c);
        if (c == '\0' || at == nullptr) {
            throw DataError("pos mask '" + text + "': expected letters from \"nva\"");
        }
        mask[static_cast<std::size_t>(at - kPosLetters)] = true;
    }
    if (!mask[0] && !mask[1] && !mask[2]) {
        throw DataError("pos mask must enable at least one part of speech");
    }
    return mask;
}

std::string format_pos_mask(const PosMask& mask) {
    std::string out;
    for (std::size_t p = 0; p < kPosCount; ++p) {
        if (mask[p]) {
            out += kPosLetters[p];
        }
    }
    return out;
}

Vector aggregate_templates(const Matrix& raw) {
    if (raw.rows() == 0) {
        throw DataError("aggregate_templates: no template rows");
    }
    Vector sum = Vector::Zero(raw.cols());
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
        const double norm = raw.row(r).norm();
        if (!(norm > 0.0) || !std::isfinite(norm)) {
            throw DataError("aggregate_templates: template row " + std::to_string(r) + " is zero or non-finite");
        }
        sum += raw.row(r).transpose() / norm;
    }
    const Vector mean = sum / static_cast<double>(raw.rows());
    const double norm = mean.norm();
    if (norm < 1e-12) {
        throw DataError("aggregate_templates: degenerate aggregate (templates cancel)");
    }
    return mean / norm;
}

VocabularyBank VocabularyBank::build(std::vector<std::string> entries, std::vector<PosMask> masks,
                                     const std::vector<std::array<Matrix, kPosCount>>& raw) {
    if (entries.empty()) {
        throw DataError("vocabulary bank is empty");
    }
    if (masks.size() != entries.size() || raw.size() != entries.size()) {
        throw DataError("vocabulary bank: entries, masks and embeddings differ in length");
    }
    const auto d = raw[0][0].cols();
    VocabularyBank bank;
    for (auto& m : bank.aggregated) {
        m = Matrix::Zero(static_cast<Eigen::Index>(entries.size()), d);
    }
    for (std::size_t v = 0; v < entries.size(); ++v) {
        for (std::size_t p = 0; p < kPosCount; ++p) {
            if (raw[v][p].cols() != d) {
                throw DataError("vocabulary bank: inconsistent embedding width for '" + entries[v] + "'");
            }
            if (!masks[v][p]) {
                continue;
            }
            try {
                bank.aggregated[p].row(static_cast<Eigen::Index>(v)) = aggregate_templates(raw[v][p]).transpose();
            } catch (const DataError& e) {
                throw DataError("entry '" + entries[v] + "' (" + pos_name(static_cast<PartOfSpeech>(p)) +
                                "): " + e.what());
            }
        }
    }
    bank.entries = std::move(entries);
    bank.pos_masks = std::move(masks);
    return bank;
}

VocabularyBank load_vocabulary_bank(const fs::path& path) {
    const auto t = read_tensor(path);
    if (t.dims.size() != 4 || t.dims[1] != kPosCount || t.dims[2] != kTemplatesPerPos) {
        throw DataError(path.string() + ": vocabulary tensor must have shape (|V|, 3, 10, d)");
    }
    const auto values = t.to_doubles();
    const auto n = t.dims[0];
    const auto d = static_cast<Eigen::Index>(t.dims[3]);

    std::vector<std::string> entries;
    std::vector<PosMask> masks;
    for (const auto& line : read_lines(annotation_sidecar_path(path))) {
        if (line.empty()) {
            continue;
        }
        const auto fields = split_tabs(line);
        if (fields.size() != 2) {
            throw DataError(path.string() + ": vocabulary rows must be entry<TAB>pos-mask");
        }
        entries.push_back(fields[0]);
        masks.push_back(parse_pos_mask(fields[1]));
    }
    if (entries.size() != n) {
        throw DataError(path.string() + ": sidecar lists " + std::to_string(entries.size()) + " entries, tensor has " +
                        std::to_string(n));
    }

    std::vector<std::array<Matrix, kPosCount>> raw(n);
    std::size_t offset = 0;
    for (std::size_t v = 0; v < n; ++v) {
        for (std::size_t p = 0; p < kPosCount; ++p) {
            Matrix slab(static_cast<Eigen::Index>(kTemplatesPerPos), d);
            for (Eigen::Index i = 0; i < slab.size(); ++i) {
                slab.data()[i] = values[offset++];
            }
            raw[v][p] = std::move(slab);
        }
    }
    return VocabularyBank::build(std::move(entries), std::move(masks), raw);
}

void save_vocabulary_bank(const fs::path& path, const std::vector<std::string>& entries,
                          const std::vector<PosMask>& masks,
                          const std::vector<std::array<Matrix, kPosCount>>& raw) {
    if (entries.empty() || masks.size() != entries.size() || raw.size() != entries.size()) {
        throw DataError("save_vocabulary_bank: entries, masks and embeddings differ in length");
    }
    const auto d = static_cast<std::uint64_t>(raw[0][0].cols());
    std::vector<float> values;
    std::ostringstream tsv;
    for (std::size_t v = 0; v < entries.size(); ++v) {
        for (const auto& slab : raw[v]) {
            if (slab.rows() != static_cast<Eigen::Index>(kTemplatesPerPos) || static_cast<std::uint64_t>(slab.cols()) != d) {
                throw DataError("save_vocabulary_bank: each slab must be 10 x d");
            }
            for (Eigen::Index i = 0; i < slab.size(); ++i) {
                values.push_back(static_cast<float>(slab.data()[i]));
            }
        }
        tsv << entries[v] << '\t' << format_pos_mask(masks[v]) << '\n';
    }
    write_tensor(path, {entries.size(), kPosCount, kTemplatesPerPos, d}, values);
    write_text(annotation_sidecar_path(path), tsv.str());
}

// ---------------------------------------------------------------------------

ConceptIndex::ConceptIndex(const ConceptCodes& corpus) : corpus_(&corpus), postings_(corpus.concept_count) {
    for (std::size_t p = 0; p < corpus.patches.size(); ++p) {
        for (const auto& a : corpus.patches[p]) {
            if (a.index >= postings_.size()) {
                throw DataError("naming corpus: concept index out of range");
            }
            if (a.value > 0.0) {
                postings_[a.index].push_back({static_cast<std::uint32_t>(p), a.value});
            }
        }
    }
}

const std::vector<Activation>& ConceptIndex::postings(std::size_t concept_id) const {
    if (concept_id >= postings_.size()) {
        throw DataError("unknown concept id " + std::to_string(concept_id));
    }
    return postings_[concept_id];
}

std::vector<std::size_t> top_patches(const ConceptIndex& index, std::size_t concept_id, std::size_t top_n) {
    auto hits = index.postings(concept_id);
    const auto n = std::min(top_n, hits.size());
    const auto order = [](const Activation& a, const Activation& b) {
        return a.value != b.value ? a.value > b.value : a.index < b.index;
    };
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(n), hits.end(), order);
    std::vector<std::size_t> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(hits[i].index);
    }
    return out;
}

namespace {
double activation_in(const std::vector<Activation>& patch, std::size_t concept_id) {
    for (const auto& a : patch) {
        if (a.index == concept_id) {
            return a.value;
        }
    }
    return 0.0;
}
} // namespace

std::optional<ConceptWeights> patch_weights(const ConceptIndex& index, std::size_t concept_id,
                                            const std::vector<std::size_t>& parents, std::size_t top_n) {
    const auto top = top_patches(index, concept_id, top_n);
    if (top.empty()) {
        return std::nullopt;
    }
    ConceptWeights w;
    w.parents.assign(parents.size(), 0.0);
    for (const auto p : top) {
        const auto& patch = index.corpus().patches[p];
        w.self += activation_in(patch, concept_id);
        for (std::size_t k = 0; k < parents.size(); ++k) {
            w.parents[k] += activation_in(patch, parents[k]);
        }
    }
    const auto count = static_cast<double>(top.size());
    w.self /= count;
    for (auto& x : w.parents) {
        x /= count;
    }
    return w;
}

Vector concept_vector(const SaeModel& model, const FamilyGraph& graph, const Matrix& confidence,
                      const ConceptWeights& weights, std::size_t concept_id, double alpha) {
    const auto m = static_cast<std::size_t>(model.dec_weight.rows());
    if (concept_id >= m) {
        throw DataError("unknown concept id " + std::to_string(concept_id));
    }
    const auto parents = graph.contains(concept_id) ? graph.parents(concept_id) : std::vector<std::size_t>{};
    if (parents.size() != weights.parents.size()) {
        throw DataError("concept_vector: weights do not match the parent set of concept " +
                        std::to_string(concept_id));
    }
    const auto i = static_cast<Eigen::Index>(concept_id);
    Vector v = model.dec_bias + alpha * weights.self * model.dec_weight.row(i).transpose();
    for (std::size_t k = 0; k < parents.size(); ++k) {
        const auto a = static_cast<Eigen::Index>(parents[k]);
        v += confidence(i, a) * weights.parents[k] * model.dec_weight.row(a).transpose();
    }
    return v;
}

ConceptName assign_label(const Vector& v, const VocabularyBank& bank) {
    if (bank.size() == 0) {
        throw DataError("assign_label: empty vocabulary bank");
    }
    if (static_cast<std::size_t>(v.size()) != bank.dim()) {
        throw DataError("assign_label: concept vector has dimension " + std::to_string(v.size()) +
                        ", vocabulary has " + std::to_string(bank.dim()));
    }
    const double norm = v.norm();
    ConceptName best;
    bool found = false;
    for (std::size_t e = 0; e < bank.size(); ++e) {
        for (std::size_t p = 0; p < kPosCount; ++p) {
            if (!bank.pos_masks[e][p]) {
                continue;
            }
            const double cos =
                norm > 0.0 ? bank.aggregated[p].row(static_cast<Eigen::Index>(e)).dot(v) / norm : 0.0;
            if (!found || cos > best.score) {
                best.label = bank.entries[e];
                best.score = std::clamp(cos, -1.0, 1.0);
                best.pos = static_cast<PartOfSpeech>(p);
                found = true;
            }
        }
    }
    return best;
}

std::vector<ConceptName> name_all(const SaeModel& model, const FamilyGraph& graph, const Matrix& confidence,
                                  const ConceptCodes& corpus, const VocabularyBank& bank,
                                  const NamingConfig& config) {
    const auto m = static_cast<std::size_t>(model.dec_weight.rows());
    if (corpus.concept_count != m) {
        throw DataError("name_all: corpus codes have m=" + std::to_string(corpus.concept_count) + ", model has " +
                        std::to_string(m));
    }
    if (static_cast<std::size_t>(confidence.rows()) != m || static_cast<std::size_t>(confidence.cols()) != m) {
        throw DataError("name_all: confidence matrix does not match the model");
    }
    std::vector<ConceptName> names;
    if (corpus.patches.empty()) {
        log_warning("name_all: empty naming corpus, no concepts named");
        return names;
    }
    const ConceptIndex index(corpus);
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const auto parents = graph.contains(i) ? graph.parents(i) : std::vector<std::size_t>{};
        const auto weights = patch_weights(index, i, parents, config.top_patches);
        if (!weights) {
            ++skipped;
            continue;
        }
        auto name = assign_label(concept_vector(model, graph, confidence, *weights, i, config.alpha), bank);
        name.concept_id = i;
        names.push_back(std::move(name));
    }
    if (skipped > 0) {
        log_warning("name_all: skipped " + std::to_string(skipped) + " concepts that never fired on the corpus");
    }
    return names;
}

void write_names(const fs::path& path, const std::vector<ConceptName>& names) {
    std::ostringstream out;
    out << std::setprecision(9);
    for (const auto& n : names) {
        out << n.concept_id << '\t' << n.label << '\t' << n.score << '\t' << pos_name(n.pos) << '\n';
    }
    write_text(path, out.str());
}

std::vector<ConceptName> read_names(const fs::path& path) {
    std::vector<ConceptName> names;
    for (const auto& line : read_lines(path)) {
        if (line.empty()) {
            continue;
        }
        const auto f = split_tabs(line);
        if (f.size() != 4) {
            throw DataError(path.string() + ": name rows must have 4 tab-separated fields");
        }
        try {
            names.push_back({std::stoul(f[0]), f[1], std::stod(f[2]), parse_pos(f[3])});
        } catch (const std::logic_error&) {
            throw DataError(path.string() + ": malformed name row '" + line + "'");
        }
    }
    return names;
}

} // namespace insight
