#pragma once

// IEF1 binary tensors, dataset manifests, and annotation rasters.
//
// IEF1 layout (all integers little-endian):
//   bytes 0..3   magic "IEF1"
//   byte  4      dtype code (1=f32, 2=f64, 3=u8, 4=i64)
//   byte  5      ndim (>= 1)
//   bytes 6..7   zero padding
//   8*ndim bytes dims as uint64
//   payload      row-major scalars

#include "insight/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace insight {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3, i64 = 4 };

std::size_t dtype_size(DType dtype);
const char* dtype_name(DType dtype);

/// In-memory tensor. The active variant alternative always matches `dtype`.
struct Tensor {
    using Storage = std::variant<std::vector<float>, std::vector<double>,
                                 std::vector<std::uint8_t>, std::vector<std::int64_t>>;

    DType dtype = DType::f32;
    std::vector<std::uint64_t> dims;
    Storage data;

    std::size_t element_count() const;

    static Tensor from_f32(std::vector<std::uint64_t> dims, std::vector<float> values);
    static Tensor from_f64(std::vector<std::uint64_t> dims, std::vector<double> values);
    static Tensor from_u8(std::vector<std::uint64_t> dims, std::vector<std::uint8_t> values);
    static Tensor from_i64(std::vector<std::uint64_t> dims, std::vector<std::int64_t> values);

    /// Stores a matrix as float32 (the default on-disk precision).
    static Tensor from_matrix(const Matrix& m, DType dtype = DType::f32);
    static Tensor from_vector(const Vector& v, DType dtype = DType::f32);

    /// Floating payload widened to double; throws DataError for integer dtypes.
    std::vector<double> to_doubles() const;
    /// Requires ndim == 2 and a floating dtype.
    Matrix to_matrix() const;
    /// Requires ndim == 1 and a floating dtype.
    Vector to_vector() const;
};

/// Serialized bytes of a tensor (header + payload).
std::vector<std::uint8_t> encode_tensor(const Tensor& tensor);
Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);

/// Convenience overload that validates `dims` against the scalar count.
template <typename T>
void write_tensor(const std::filesystem::path& path, std::vector<std::uint64_t> dims,
                  std::vector<T> scalars);

Tensor read_tensor(const std::filesystem::path& path);

/// Reads only the header (dtype and dims) without loading the payload.
struct TensorHeader {
    DType dtype;
    std::vector<std::uint64_t> dims;
};
TensorHeader read_tensor_header(const std::filesystem::path& path);

struct ManifestEntry {
    std::string image_id;
    std::filesystem::path embedding_path;
    std::optional<std::filesystem::path> affinity_path;
    std::optional<std::filesystem::path> annotation_path;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::size_t embed_dim = 0;

    std::size_t patch_count() const { return grid_h * grid_w; }
    bool has_affinities() const;
    bool has_annotations() const;
};

// Manifest TSV:
//   # insight-manifest grid_h=14 grid_w=14 embed_dim=512
//   image_id  embedding_path  affinity_path  annotation_path
//   img0      emb/img0.ief    aff/img0.ief   -
// Optional columns may be empty or "-". Relative paths resolve against the
// manifest's directory. All referenced files are shape-checked on load.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes a manifest; paths are stored relative to the manifest directory when possible.
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Loads one image's patch embeddings as an N x d matrix.
Matrix load_embeddings(const DatasetManifest& manifest, std::size_t index);
Matrix load_affinity(const DatasetManifest& manifest, std::size_t index);

/// Pixel-level label raster; -1 marks unlabeled/background pixels.
struct AnnotationRaster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::int64_t> labels;
    std::map<std::int64_t, std::string> label_names;

    std::int64_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
};

/// Sidecar TSV path for a raster: same stem, ".tsv" extension.
std::filesystem::path annotation_sidecar_path(const std::filesystem::path& raster_path);

AnnotationRaster load_annotation(const std::filesystem::path& raster_path);
void save_annotation(const std::filesystem::path& raster_path, const AnnotationRaster& raster);

// Small text helpers shared by the TSV readers.
std::vector<std::string> split_tabs(const std::string& line);
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

} // namespace insight
