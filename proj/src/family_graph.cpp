#include "insight/family_graph.hpp"

#include "insight/tensor_store.hpp"

#include <json.hpp>

#include <algorithm>
#include <map>
#include <queue>
#include <set>
#include <sstream>

namespace insight {

namespace fs = std::filesystem;

ConfidenceAccumulator::ConfidenceAccumulator(std::size_t concept_count)
    : numerator_(Matrix::Zero(static_cast<Eigen::Index>(concept_count), static_cast<Eigen::Index>(concept_count))),
      mass_(Vector::Zero(static_cast<Eigen::Index>(concept_count))), fire_counts_(concept_count, 0) {}

void ConfidenceAccumulator::add(const ConceptCodes& codes) {
    if (codes.concept_count != concept_count()) {
        throw DataError("accumulate: codes have m=" + std::to_string(codes.concept_count) + ", expected " +
                        std::to_string(concept_count()));
    }
    for (const auto& patch : codes.patches) {
        for (const auto& a : patch) {
            if (a.index >= concept_count()) {
                throw DataError("accumulate: concept index out of range");
            }
            if (!(a.value > 0.0)) {
                continue;
            }
            mass_(a.index) += a.value;
            ++fire_counts_[a.index];
            for (const auto& b : patch) {
                if (b.value > 0.0) {
                    numerator_(a.index, b.index) += a.value;
                }
            }
        }
        ++patch_count_;
    }
}

void ConfidenceAccumulator::merge(const ConfidenceAccumulator& other) {
    if (other.concept_count() != concept_count()) {
        throw DataError("merge: accumulator sizes differ");
    }
    numerator_ += other.numerator_;
    mass_ += other.mass_;
    for (std::size_t i = 0; i < fire_counts_.size(); ++i) {
        fire_counts_[i] += other.fire_counts_[i];
    }
    patch_count_ += other.patch_count_;
}

ConfidenceMatrix finalize(const ConfidenceAccumulator& acc) {
    const auto m = static_cast<Eigen::Index>(acc.concept_count());
    ConfidenceMatrix out{Matrix::Zero(m, m), acc.mass(), acc.fire_counts(), acc.patch_count()};
    for (Eigen::Index j = 0; j < m; ++j) {
        const double mass = acc.mass()(j);
        if (mass <= 0.0) {
            continue;
        }
        for (Eigen::Index k = 0; k < m; ++k) {
            out.values(j, k) = std::clamp(acc.numerator()(j, k) / mass, 0.0, 1.0);
        }
    }
    return out;
}

ConfidenceMatrix accumulate(const std::vector<ConceptCodes>& stream, std::size_t concept_count) {
    ConfidenceAccumulator acc(concept_count);
    for (const auto& codes : stream) {
        acc.add(codes);
    }
    return finalize(acc);
}

// ---------------------------------------------------------------------------

FamilyGraph::FamilyGraph(std::vector<FamilyNode> nodes, std::vector<FamilyEdge> edges)
    : nodes_(std::move(nodes)), edges_(std::move(edges)) {
    std::sort(nodes_.begin(), nodes_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < nodes_.size(); ++i) {
        if (nodes_[i].id == nodes_[i - 1].id) {
            throw DataError("family graph: duplicate node id " + std::to_string(nodes_[i].id));
        }
    }
    std::sort(edges_.begin(), edges_.end(), [](const auto& a, const auto& b) {
        return std::tie(a.parent, a.child) < std::tie(b.parent, b.child);
    });
    for (std::size_t i = 0; i < edges_.size(); ++i) {
        const auto& e = edges_[i];
        if (e.parent == e.child) {
            throw DataError("family graph: self edge on " + std::to_string(e.parent));
        }
        if (!contains(e.parent) || !contains(e.child)) {
            throw DataError("family graph: edge references unknown node");
        }
        if (i > 0 && edges_[i - 1].parent == e.parent && edges_[i - 1].child == e.child) {
            throw DataError("family graph: duplicate edge");
        }
    }
}

bool FamilyGraph::contains(std::size_t id) const {
    const auto it = std::lower_bound(nodes_.begin(), nodes_.end(), id,
                                     [](const FamilyNode& n, std::size_t v) { return n.id < v; });
    return it != nodes_.end() && it->id == id;
}

std::size_t FamilyGraph::slot(std::size_t id) const {
    const auto it = std::lower_bound(nodes_.begin(), nodes_.end(), id,
                                     [](const FamilyNode& n, std::size_t v) { return n.id < v; });
    if (it == nodes_.end() || it->id != id) {
        throw DataError("unknown concept id " + std::to_string(id));
    }
    return static_cast<std::size_t>(it - nodes_.begin());
}

const FamilyNode& FamilyGraph::node(std::size_t id) const { return nodes_[slot(id)]; }

std::vector<std::size_t> FamilyGraph::parents(std::size_t id) const {
    slot(id);
    std::vector<std::size_t> out;
    for (const auto& e : edges_) {
        if (e.child == id) {
            out.push_back(e.parent);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::size_t> FamilyGraph::children(std::size_t id) const {
    slot(id);
    std::vector<std::size_t> out;
    for (const auto& e : edges_) {
        if (e.parent == id) {
            out.push_back(e.child);
        }
    }
    return out;
}

double FamilyGraph::edge_confidence(std::size_t parent, std::size_t child) const {
    for (const auto& e : edges_) {
        if (e.parent == parent && e.child == child) {
            return e.confidence;
        }
    }
    throw DataError("no edge " + std::to_string(parent) + " -> " + std::to_string(child));
}

std::vector<std::size_t> FamilyGraph::topological_order() const {
    std::vector<std::size_t> indegree(nodes_.size(), 0);
    std::vector<std::vector<std::size_t>> out(nodes_.size());
    for (const auto& e : edges_) {
        out[slot(e.parent)].push_back(slot(e.child));
        ++indegree[slot(e.child)];
    }
    std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (indegree[i] == 0) {
            ready.push(i);
        }
    }
    std::vector<std::size_t> order;
    while (!ready.empty()) {
        const auto s = ready.top();
        ready.pop();
        order.push_back(nodes_[s].id);
        for (const auto t : out[s]) {
            if (--indegree[t] == 0) {
                ready.push(t);
            }
        }
    }
    return order;
}

bool FamilyGraph::is_acyclic() const { return topological_order().size() == nodes_.size(); }

// ---------------------------------------------------------------------------

namespace {

// Returns the edges of one directed cycle, or empty when acyclic. Iterative DFS
// in ascending node order keeps the choice deterministic.
std::vector<FamilyEdge> find_cycle(std::size_t m, const std::vector<FamilyEdge>& edges) {
    std::vector<std::vector<std::size_t>> adjacency(m);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        adjacency[edges[i].parent].push_back(i);
    }
    enum : std::uint8_t { kWhite, kGrey, kBlack };
    std::vector<std::uint8_t> colour(m, kWhite);
    std::vector<std::size_t> via(m, SIZE_MAX); // edge index used to enter a node

    for (std::size_t root = 0; root < m; ++root) {
        if (colour[root] != kWhite) {
            continue;
        }
        std::vector<std::pair<std::size_t, std::size_t>> stack{{root, 0}};
        colour[root] = kGrey;
        while (!stack.empty()) {
            auto& [v, next] = stack.back();
            if (next == adjacency[v].size()) {
                colour[v] = kBlack;
                stack.pop_back();
                continue;
            }
            const auto edge_index = adjacency[v][next++];
            const auto w = edges[edge_index].child;
            if (colour[w] == kGrey) {
                std::vector<FamilyEdge> cycle{edges[edge_index]};
                for (auto u = v; u != w;) {
                    const auto& e = edges[via[u]];
                    cycle.push_back(e);
                    u = e.parent;
                }
                return cycle;
            }
            if (colour[w] == kWhite) {
                colour[w] = kGrey;
                via[w] = edge_index;
                stack.emplace_back(w, 0);
            }
        }
    }
    return {};
}

} // namespace

GraphBuildResult build_graph(const ConfidenceMatrix& matrix, double tau) {
    const std::size_t m = matrix.concept_count();
    const auto& d = matrix.values;
    std::vector<FamilyEdge> edges;
    for (std::size_t j = 0; j < m; ++j) {
        if (!matrix.defined(j)) {
            continue;
        }
        for (std::size_t g = 0; g < m; ++g) {
            if (g == j || !matrix.defined(g)) {
                continue;
            }
            const auto jj = static_cast<Eigen::Index>(j);
            const auto gg = static_cast<Eigen::Index>(g);
            if (d(jj, gg) < tau) {
                continue;
            }
            if (d(gg, jj) >= tau) {
                // Mutual pair: the heavier concept is the parent; lower id wins ties.
                const double mj = matrix.activation_mass(jj);
                const double mg = matrix.activation_mass(gg);
                const bool g_is_parent = mg > mj || (mg == mj && g < j);
                if (!g_is_parent) {
                    continue;
                }
            }
            edges.push_back({g, j, d(jj, gg)});
        }
    }

    GraphBuildResult result;
    while (true) {
        const auto cycle = find_cycle(m, edges);
        if (cycle.empty()) {
            break;
        }
        const auto weakest = *std::min_element(cycle.begin(), cycle.end(), [](const auto& a, const auto& b) {
            return std::tie(a.confidence, a.parent, a.child) < std::tie(b.confidence, b.parent, b.child);
        });
        std::ostringstream reason;
        reason << "cycle of length " << cycle.size() << ": removed weakest edge " << weakest.parent << " -> "
               << weakest.child << " (confidence " << weakest.confidence << ")";
        log_warning("build_graph: " + reason.str());
        result.removed.push_back({weakest, reason.str()});
        edges.erase(std::find(edges.begin(), edges.end(), weakest));
    }

    std::vector<FamilyNode> nodes;
    nodes.reserve(m);
    for (std::size_t j = 0; j < m; ++j) {
        const double freq = matrix.patch_count == 0
                                ? 0.0
                                : static_cast<double>(matrix.fire_counts.at(j)) / static_cast<double>(matrix.patch_count);
        nodes.push_back({j, "", freq});
    }
    result.graph = FamilyGraph(std::move(nodes), std::move(edges));
    return result;
}

namespace {

// Shortest upward (or downward) distance from `start` to every reachable node.
std::map<std::size_t, std::size_t> reach(const FamilyGraph& graph, std::size_t start, bool upward) {
    std::map<std::size_t, std::size_t> dist;
    std::queue<std::size_t> frontier;
    frontier.push(start);
    dist[start] = 0;
    while (!frontier.empty()) {
        const auto v = frontier.front();
        frontier.pop();
        for (const auto w : upward ? graph.parents(v) : graph.children(v)) {
            if (!dist.contains(w)) {
                dist[w] = dist[v] + 1;
                frontier.push(w);
            }
        }
    }
    dist.erase(start);
    return dist;
}

} // namespace

FamilyGraph family_subgraph(const FamilyGraph& graph, std::size_t concept_id) {
    graph.node(concept_id);
    std::set<std::size_t> keep{concept_id};
    for (const auto& [id, _] : reach(graph, concept_id, true)) {
        keep.insert(id);
    }
    for (const auto& [id, _] : reach(graph, concept_id, false)) {
        keep.insert(id);
    }
    std::vector<FamilyNode> nodes;
    for (const auto id : keep) {
        nodes.push_back(graph.node(id));
    }
    std::vector<FamilyEdge> edges;
    for (const auto& e : graph.edges()) {
        if (keep.contains(e.parent) && keep.contains(e.child)) {
            edges.push_back(e);
        }
    }
    return FamilyGraph(std::move(nodes), std::move(edges));
}

std::vector<std::size_t> ancestors(const FamilyGraph& graph, std::size_t concept_id) {
    graph.node(concept_id);
    const auto dist = reach(graph, concept_id, true);

    // Reverse Kahn over the ancestor set: a node is emitted once all of its
    // children inside the set have been emitted.
    std::map<std::size_t, std::size_t> pending;
    for (const auto& [id, _] : dist) {
        std::size_t n = 0;
        for (const auto c : graph.children(id)) {
            n += dist.contains(c) ? 1 : 0;
        }
        pending[id] = n;
    }
    using Key = std::pair<std::size_t, std::size_t>; // (distance, id)
    std::priority_queue<Key, std::vector<Key>, std::greater<>> ready;
    for (const auto& [id, n] : pending) {
        if (n == 0) {
            ready.emplace(dist.at(id), id);
        }
    }
    std::vector<std::size_t> order;
    while (!ready.empty()) {
        const auto [_, id] = ready.top();
        ready.pop();
        order.push_back(id);
        for (const auto p : graph.parents(id)) {
            if (dist.contains(p) && --pending[p] == 0) {
                ready.emplace(dist.at(p), p);
            }
        }
    }
    return order;
}

std::string graph_to_json(const FamilyGraph& graph) {
    nlohmann::ordered_json out;
    out["nodes"] = nlohmann::ordered_json::array();
    for (const auto& n : graph.nodes()) {
        out["nodes"].push_back({{"id", n.id}, {"label", n.label}, {"freq", n.activation_frequency}});
    }
    out["edges"] = nlohmann::ordered_json::array();
    for (const auto& e : graph.edges()) {
        out["edges"].push_back({{"parent", e.parent}, {"child", e.child}, {"confidence", e.confidence}});
    }
    return out.dump(2) + "\n";
}

FamilyGraph graph_from_json(const std::string& text) {
    try {
        const auto in = nlohmann::json::parse(text);
        std::vector<FamilyNode> nodes;
        for (const auto& n : in.at("nodes")) {
            nodes.push_back({n.at("id").get<std::size_t>(), n.value("label", std::string{}), n.value("freq", 0.0)});
        }
        std::vector<FamilyEdge> edges;
        for (const auto& e : in.at("edges")) {
            edges.push_back({e.at("parent").get<std::size_t>(), e.at("child").get<std::size_t>(),
                             e.at("confidence").get<double>()});
        }
        return FamilyGraph(std::move(nodes), std::move(edges));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("family graph JSON: ") + e.what());
    }
}

void save_confidence(const fs::path& dir, const ConfidenceMatrix& matrix) {
    fs::create_directories(dir);
    write_tensor(dir / "confidence.ief", Tensor::from_matrix(matrix.values));
    write_tensor(dir / "mass.ief", Tensor::from_vector(matrix.activation_mass, DType::f64));
    std::vector<std::int64_t> counts(matrix.fire_counts.begin(), matrix.fire_counts.end());
    counts.push_back(static_cast<std::int64_t>(matrix.patch_count));
    write_tensor(dir / "fire_counts.ief", Tensor::from_i64({counts.size()}, counts));
}

ConfidenceMatrix load_confidence(const fs::path& dir) {
    ConfidenceMatrix out;
    out.values = read_tensor(dir / "confidence.ief").to_matrix();
    out.activation_mass = read_tensor(dir / "mass.ief").to_vector();
    const auto counts = read_tensor(dir / "fire_counts.ief");
    const auto* values = std::get_if<std::vector<std::int64_t>>(&counts.data);
    const auto m = static_cast<std::size_t>(out.values.rows());
    if (values == nullptr || values->size() != m + 1 || out.values.cols() != out.values.rows() ||
        static_cast<std::size_t>(out.activation_mass.size()) != m) {
        throw DataError(dir.string() + ": inconsistent confidence files");
    }
    out.fire_counts.assign(values->begin(), values->end() - 1);
    out.patch_count = static_cast<std::size_t>(values->back());
    return out;
}

} // namespace insight
