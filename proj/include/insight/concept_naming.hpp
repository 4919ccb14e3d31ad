#pragma once

// Hierarchy-aware concept labels: family-informed concept vectors matched
// against part-of-speech template embeddings of a vocabulary.

#include "insight/common.hpp"
#include "insight/family_graph.hpp"
#include "insight/sae.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace insight {

constexpr double kDefaultNamingAlpha = 1.33;
constexpr std::size_t kDefaultTopPatches = 30;
constexpr std::size_t kTemplatesPerPos = 10;

enum class PartOfSpeech : std::uint8_t { noun = 0, verb = 1, adjective = 2 };
constexpr std::size_t kPosCount = 3;

std::string pos_name(PartOfSpeech pos);

/// Letters from "nva"; e.g. "nv" enables the noun and verb template sets.
using PosMask = std::array<bool, kPosCount>;
PosMask parse_pos_mask(const std::string& text);
std::string format_pos_mask(const PosMask& mask);

/// Normalize each template row, average, renormalize. Throws DataError on a
/// zero row or when the mean cancels ("degenerate aggregate").
Vector aggregate_templates(const Matrix& raw);

struct VocabularyBank {
    std::vector<std::string> entries;
    std::vector<PosMask> pos_masks;
    /// Per POS: |V| x d unit rows; rows of disabled POS are zero.
    std::array<Matrix, kPosCount> aggregated;

    std::size_t size() const { return entries.size(); }
    std::size_t dim() const { return static_cast<std::size_t>(aggregated[0].cols()); }

    /// raw[v][p] is the 10 x d template slab of entry v for POS p.
    static VocabularyBank build(std::vector<std::string> entries, std::vector<PosMask> masks,
                                const std::vector<std::array<Matrix, kPosCount>>& raw);
};

/// Raw tensor (|V|, 3, 10, d) at `path` plus the `entry<TAB>pos-mask` sidecar
/// at path.replace_extension(".tsv").
VocabularyBank load_vocabulary_bank(const std::filesystem::path& path);
void save_vocabulary_bank(const std::filesystem::path& path, const std::vector<std::string>& entries,
                          const std::vector<PosMask>& masks,
                          const std::vector<std::array<Matrix, kPosCount>>& raw);

/// Per-concept postings (patch, value) over a naming corpus.
class ConceptIndex {
public:
    explicit ConceptIndex(const ConceptCodes& corpus);

    const ConceptCodes& corpus() const { return *corpus_; }
    const std::vector<Activation>& postings(std::size_t concept_id) const; // Activation::index = patch
    bool fired(std::size_t concept_id) const { return !postings(concept_id).empty(); }

private:
    const ConceptCodes* corpus_;
    std::vector<std::vector<Activation>> postings_;
};

struct ConceptWeights {
    double self = 0.0;           // w_ii
    std::vector<double> parents; // w_ia, aligned with the parent list given
};

/// Indices of the `top_n` patches with the largest activation of the concept,
/// ties to the lower patch index.
std::vector<std::size_t> top_patches(const ConceptIndex& index, std::size_t concept_id,
                                     std::size_t top_n = kDefaultTopPatches);

/// Mean activation of the concept and of each parent over the concept's top
/// patches; nullopt when the concept never fires.
std::optional<ConceptWeights> patch_weights(const ConceptIndex& index, std::size_t concept_id,
                                            const std::vector<std::size_t>& parents,
                                            std::size_t top_n = kDefaultTopPatches);

/// v = b_dec + alpha w_ii dict_i + sum over direct parents a of D[i][a] w_ia dict_a.
Vector concept_vector(const SaeModel& model, const FamilyGraph& graph, const Matrix& confidence,
                      const ConceptWeights& weights, std::size_t concept_id,
                      double alpha = kDefaultNamingAlpha);

struct ConceptName {
    std::size_t concept_id = 0;
    std::string label;
    double score = 0.0;
    PartOfSpeech pos = PartOfSpeech::noun;
};

/// Argmax over entries of the max over enabled POS of cos(v, E_p(entry));
/// ties go to the earlier entry, then the earlier POS.
ConceptName assign_label(const Vector& v, const VocabularyBank& bank);

struct NamingConfig {
    double alpha = kDefaultNamingAlpha;
    std::size_t top_patches = kDefaultTopPatches;
};

std::vector<ConceptName> name_all(const SaeModel& model, const FamilyGraph& graph, const Matrix& confidence,
                                  const ConceptCodes& corpus, const VocabularyBank& bank,
                                  const NamingConfig& config = {});

/// TSV rows `concept_id<TAB>label<TAB>score<TAB>pos`.
void write_names(const std::filesystem::path& path, const std::vector<ConceptName>& names);
std::vector<ConceptName> read_names(const std::filesystem::path& path);

} // namespace insight
