#pragma once

// Patch-level co-occurrence confidences and the concept family DAG derived from them.
//
//   D[j][j'] = sum_i [A_j'i > 0] A_ji / sum_i A_ji
//
// An edge candidate j -> j' (D >= tau) says j' is present wherever j is; after
// inversion the general concept j' becomes the parent of the specific j.

#include "insight/common.hpp"
#include "insight/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace insight {

constexpr double kDefaultEdgeThreshold = 0.75;

class ConfidenceAccumulator {
public:
    explicit ConfidenceAccumulator(std::size_t concept_count);

    /// Adds every patch of `codes`; order of patches and chunks does not matter.
    void add(const ConceptCodes& codes);
    /// Merges a shard accumulated separately.
    void merge(const ConfidenceAccumulator& other);

    std::size_t concept_count() const { return static_cast<std::size_t>(mass_.size()); }
    std::size_t patch_count() const { return patch_count_; }
    const Matrix& numerator() const { return numerator_; }
    const Vector& mass() const { return mass_; }
    const std::vector<std::uint64_t>& fire_counts() const { return fire_counts_; }

private:
    Matrix numerator_;
    Vector mass_;
    std::vector<std::uint64_t> fire_counts_;
    std::size_t patch_count_ = 0;
};

struct ConfidenceMatrix {
    Matrix values;                        // m x m, D[j][j']
    Vector activation_mass;               // sum_i A_ji
    std::vector<std::uint64_t> fire_counts; // patches where concept fired
    std::size_t patch_count = 0;

    std::size_t concept_count() const { return static_cast<std::size_t>(values.rows()); }
    /// False for concepts that never fired (their row is stored as zeros).
    bool defined(std::size_t j) const { return activation_mass(static_cast<Eigen::Index>(j)) > 0.0; }
};

ConfidenceMatrix finalize(const ConfidenceAccumulator& acc);

/// One-shot helper: accumulate a stream of per-image codes and finalize.
ConfidenceMatrix accumulate(const std::vector<ConceptCodes>& stream, std::size_t concept_count);

struct FamilyNode {
    std::size_t id;
    std::string label;
    double activation_frequency;
};

struct FamilyEdge {
    std::size_t parent;
    std::size_t child;
    double confidence; // D[child][parent]

    bool operator==(const FamilyEdge&) const = default;
};

/// Edge removed while breaking a residual cycle.
struct RemovedEdge {
    FamilyEdge edge;
    std::string reason;
};

class FamilyGraph {
public:
    FamilyGraph() = default;
    FamilyGraph(std::vector<FamilyNode> nodes, std::vector<FamilyEdge> edges);

    const std::vector<FamilyNode>& nodes() const { return nodes_; }
    const std::vector<FamilyEdge>& edges() const { return edges_; }
    std::vector<FamilyNode>& mutable_nodes() { return nodes_; }

    bool contains(std::size_t id) const;
    const FamilyNode& node(std::size_t id) const;
    /// Direct parents of `id`, ascending by id.
    std::vector<std::size_t> parents(std::size_t id) const;
    std::vector<std::size_t> children(std::size_t id) const;
    /// Confidence of the edge parent -> child; throws if absent.
    double edge_confidence(std::size_t parent, std::size_t child) const;

    bool is_acyclic() const;
    /// Kahn order, parents before children, ties by id. Short of nodes().size() on a cycle.
    std::vector<std::size_t> topological_order() const;

private:
    std::size_t slot(std::size_t id) const;

    std::vector<FamilyNode> nodes_;
    std::vector<FamilyEdge> edges_;
};

struct GraphBuildResult {
    FamilyGraph graph;
    std::vector<RemovedEdge> removed;
};

/// Thresholds D at tau, inverts edge direction, resolves mutual pairs by
/// activation mass (lower id wins ties), then deletes the weakest edge of each
/// remaining cycle until the graph is acyclic.
GraphBuildResult build_graph(const ConfidenceMatrix& matrix, double tau = kDefaultEdgeThreshold);

/// Induced subgraph on the concept, its ancestors, and its descendants.
FamilyGraph family_subgraph(const FamilyGraph& graph, std::size_t concept_id);

/// Ancestors nearest-first: descendants precede their own ancestors, ties by
/// distance then id. Direct parents therefore lead unless one is an ancestor
/// of another listed node.
std::vector<std::size_t> ancestors(const FamilyGraph& graph, std::size_t concept_id);

/// {nodes:[{id,label,freq}], edges:[{parent,child,confidence}]}
std::string graph_to_json(const FamilyGraph& graph);
FamilyGraph graph_from_json(const std::string& text);

/// Dense float32 D (m x m), float64 mass, int64 fire counts with the patch count appended.
void save_confidence(const std::filesystem::path& dir, const ConfidenceMatrix& matrix);
ConfidenceMatrix load_confidence(const std::filesystem::path& dir);

} // namespace insight
