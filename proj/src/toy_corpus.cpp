#include "insight/toy_corpus.hpp"

#include "insight/concept_naming.hpp"
#include "insight/downstream.hpp"
#include "insight/guided_pooling.hpp"
#include "insight/rng.hpp"
#include "insight/tensor_store.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace insight {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kImages = 20;
constexpr std::size_t kGrid = 8;
constexpr std::size_t kPixels = 32;
constexpr std::size_t kPatchPixels = kPixels / kGrid;
constexpr Eigen::Index kDim = 32;

enum Label : std::int64_t { sky, grass, car, wheel, window, bird, wing, beak, kLabelCount };

const std::array<const char*, kLabelCount> kLabelNames{"sky", "grass", "car", "wheel", "window", "bird", "wing", "beak"};

// Parent object of each part label (-1 for objects and backgrounds).
constexpr std::array<std::int64_t, kLabelCount> kParent{-1, -1, -1, car, car, -1, bird, bird};

struct Box {
    std::size_t y0, x0, h, w;
};

void paint(std::vector<std::int64_t>& raster, const Box& b, std::int64_t label) {
    for (std::size_t y = b.y0; y < std::min(b.y0 + b.h, kPixels); ++y) {
        for (std::size_t x = b.x0; x < std::min(b.x0 + b.w, kPixels); ++x) {
            raster[y * kPixels + x] = label;
        }
    }
}

std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

std::vector<std::int64_t> draw_scene(Rng& rng, bool is_car) {
    std::vector<std::int64_t> raster(kPixels * kPixels);
    for (std::size_t y = 0; y < kPixels; ++y) {
        for (std::size_t x = 0; x < kPixels; ++x) {
            raster[y * kPixels + x] = y < 2 ? std::int64_t{-1} : std::int64_t{y < 16 ? sky : grass};
        }
    }
    const Box object{draw(rng, 6, 12), draw(rng, 1, 11), draw(rng, 12, 16), draw(rng, 16, 20)};
    paint(raster, object, is_car ? car : bird);
    if (is_car) {
        paint(raster, {object.y0 + object.h - 6, object.x0 + 2, 6, 6}, wheel);
        paint(raster, {object.y0 + object.h - 6, object.x0 + object.w - 8, 6, 6}, wheel);
        paint(raster, {object.y0 + 1, object.x0 + draw(rng, 3, 7), 5, 8}, window);
    } else {
        paint(raster, {object.y0 + draw(rng, 3, 5), object.x0 + 3, 6, 10}, wing);
        paint(raster, {object.y0 + 2, object.x0 + object.w - 4, 4, 4}, beak);
    }
    return raster;
}

// Majority label of each patch's pixel block (ties to the lower label; unlabelled pixels vote for sky).
std::vector<std::int64_t> patch_labels(const std::vector<std::int64_t>& raster) {
    std::vector<std::int64_t> out(kGrid * kGrid);
    for (std::size_t py = 0; py < kGrid; ++py) {
        for (std::size_t px = 0; px < kGrid; ++px) {
            std::array<int, kLabelCount> votes{};
            for (std::size_t y = py * kPatchPixels; y < (py + 1) * kPatchPixels; ++y) {
                for (std::size_t x = px * kPatchPixels; x < (px + 1) * kPatchPixels; ++x) {
                    const auto l = raster[y * kPixels + x];
                    ++votes[static_cast<std::size_t>(l < 0 ? sky : l)];
                }
            }
            out[py * kGrid + px] = static_cast<std::int64_t>(
                std::max_element(votes.begin(), votes.end()) - votes.begin());
        }
    }
    return out;
}

Vector random_unit(Rng& rng) {
    Vector v(kDim);
    for (Eigen::Index i = 0; i < kDim; ++i) {
        v(i) = rng.normal();
    }
    return v.normalized();
}

// Clean semantic direction of a patch label: parts carry their object.
Vector semantic(const std::vector<Vector>& atoms, std::int64_t label) {
    const auto l = static_cast<std::size_t>(label);
    Vector v = atoms[l];
    if (kParent[l] >= 0) {
        v += 0.6 * atoms[static_cast<std::size_t>(kParent[l])];
    }
    return v;
}

} // namespace

void write_toy_corpus(const fs::path& dir, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Vector> atoms;
    for (std::size_t l = 0; l < kLabelCount; ++l) {
        atoms.push_back(random_unit(rng));
    }

    DatasetManifest manifest;
    manifest.grid_h = kGrid;
    manifest.grid_w = kGrid;
    manifest.embed_dim = kDim;
    std::ostringstream classes;
    std::map<std::int64_t, std::string> names;
    for (std::size_t l = 0; l < kLabelCount; ++l) {
        names[static_cast<std::int64_t>(l)] = kLabelNames[l];
    }

    for (std::size_t i = 0; i < kImages; ++i) {
        const bool is_car = i % 2 == 0;
        const std::string id = "img" + std::string(i < 10 ? "0" : "") + std::to_string(i);
        const auto raster = draw_scene(rng, is_car);
        const auto labels = patch_labels(raster);

        const Vector style = 0.02 * random_unit(rng);
        PatchGrid clean{Matrix(kGrid * kGrid, kDim), kGrid, kGrid};
        Matrix noisy(kGrid * kGrid, kDim);
        for (std::size_t p = 0; p < labels.size(); ++p) {
            const Vector s = semantic(atoms, labels[p]);
            const auto row = static_cast<Eigen::Index>(p);
            clean.features.row(row) = s.transpose();
            Vector x = rng.uniform(0.8, 1.2) * s + style;
            for (Eigen::Index j = 0; j < kDim; ++j) {
                x(j) += 0.05 * rng.normal();
            }
            noisy.row(row) = x.transpose();
        }

        const auto emb = dir / "emb" / (id + ".ief");
        const auto aff = dir / "aff" / (id + ".ief");
        const auto ann = dir / "ann" / (id + ".ief");
        write_tensor(emb, Tensor::from_matrix(noisy));
        write_tensor(aff, Tensor::from_matrix(cosine_affinity(clean)));
        save_annotation(ann, {kPixels, kPixels, raster, names});
        manifest.entries.push_back({id, emb, aff, ann});
        classes << id << '\t' << (is_car ? "car" : "bird") << '\n';
    }
    save_manifest(dir / "manifest.tsv", manifest);
    write_text(dir / "classes.tsv", classes.str());

    // Vocabulary: every label (parts phrased with their object context) plus distractors.
    std::vector<std::string> entries;
    std::vector<PosMask> masks;
    std::vector<std::array<Matrix, kPosCount>> raw;
    const auto add_entry = [&](const std::string& name, const Vector& dir_vec, const std::string& mask) {
        std::array<Matrix, kPosCount> slabs;
        for (auto& slab : slabs) {
            slab.resize(static_cast<Eigen::Index>(kTemplatesPerPos), kDim);
            for (Eigen::Index t = 0; t < slab.rows(); ++t) {
                Vector row = dir_vec.normalized();
                for (Eigen::Index j = 0; j < kDim; ++j) {
                    row(j) += 0.05 * rng.normal();
                }
                slab.row(t) = row.transpose();
            }
        }
        entries.push_back(name);
        masks.push_back(parse_pos_mask(mask));
        raw.push_back(std::move(slabs));
    };
    for (std::size_t l = 0; l < kLabelCount; ++l) {
        add_entry(kLabelNames[l], semantic(atoms, static_cast<std::int64_t>(l)), "n");
    }
    add_entry("flying", atoms[bird] + atoms[wing], "va");
    for (const char* distractor : {"rock", "water", "tree", "road"}) {
        add_entry(distractor, random_unit(rng), "n");
    }
    save_vocabulary_bank(dir / "vocab.ief", entries, masks, raw);

    std::vector<std::string> seg_names;
    Matrix seg(static_cast<Eigen::Index>(kLabelCount + 1), kDim);
    for (std::size_t l = 0; l < kLabelCount; ++l) {
        seg_names.emplace_back(kLabelNames[l]);
        seg.row(static_cast<Eigen::Index>(l)) = semantic(atoms, static_cast<std::int64_t>(l)).normalized().transpose();
    }
    seg_names.emplace_back("background");
    seg.row(static_cast<Eigen::Index>(kLabelCount)) = random_unit(rng).transpose();
    save_label_bank(dir / "seg_labels.ief", seg_names, seg);

    write_text(dir / "config.toml", R"(# Run configuration for the bundled toy corpus.
seed = 0

[affinity]
lr = 0.01
batch_size = 4
epochs = 20
d_prime = 8

[sae]
m = 32
k = 4
lr = 0.003
batch_patches = 128
epochs = 30
dead_threshold = 5000

[graph]
tau = 0.75

[naming]
vocabulary = "vocab.ief"

[metrics]
min_images = 2

[probe]
lr = 0.01
batch_size = 8
epochs = 50
l1 = 0.001
labels = "classes.tsv"

[segment]
labels = "seg_labels.ief"
background = "background"

[report]
top_n = 8
)");
}

} // namespace insight
