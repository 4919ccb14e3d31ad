#pragma once

// Synthetic 20-image corpus with a two-level part hierarchy (objects and their
// parts over sky/grass backgrounds). Everything the CLI needs is written:
//
//   manifest.tsv      8x8 patch grid, d = 32
//   emb/ aff/ ann/    embeddings, target affinities, 32x32 annotation rasters
//   classes.tsv       image_id<TAB>class for the probe
//   vocab.ief/.tsv    naming vocabulary bank (|V|, 3, 10, d)
//   seg_labels.ief/.tsv  segmentation label bank incl. "background"
//   config.toml       run configuration sized for the corpus

#include <cstdint>
#include <filesystem>

namespace insight {

void write_toy_corpus(const std::filesystem::path& dir, std::uint64_t seed = 2024);

} // namespace insight
