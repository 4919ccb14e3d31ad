#include "insight/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace insight {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'I', 'E', 'F', '1'};
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 48;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
    }
}

template <typename U>
U get_le(const std::uint8_t* p) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        value |= static_cast<U>(p[i]) << (8 * i);
    }
    return value;
}

template <typename T>
struct Bits;
template <>
struct Bits<float> {
    using type = std::uint32_t;
};
template <>
struct Bits<double> {
    using type = std::uint64_t;
};
template <>
struct Bits<std::uint8_t> {
    using type = std::uint8_t;
};
template <>
struct Bits<std::int64_t> {
    using type = std::uint64_t;
};

template <typename T>
void put_scalars(std::vector<std::uint8_t>& out, const std::vector<T>& values) {
    using U = typename Bits<T>::type;
    for (const T v : values) {
        put_le<U>(out, std::bit_cast<U>(v));
    }
}

template <typename T>
std::vector<T> get_scalars(const std::uint8_t* p, std::size_t count) {
    using U = typename Bits<T>::type;
    std::vector<T> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        values[i] = std::bit_cast<T>(get_le<U>(p + i * sizeof(U)));
    }
    return values;
}

std::uint64_t checked_product(const std::vector<std::uint64_t>& dims, const std::string& origin) {
    std::uint64_t total = 1;
    for (const auto d : dims) {
        if (d != 0 && total > kMaxElements / d) {
            throw DataError(origin + ": element count exceeds 2^48");
        }
        total *= d;
    }
    if (total >= kMaxElements) {
        throw DataError(origin + ": element count exceeds 2^48");
    }
    return total;
}

std::string dims_string(const std::vector<std::uint64_t>& dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) {
        os << (i ? "," : "") << dims[i];
    }
    os << ']';
    return os.str();
}

} // namespace

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
    case DType::f32:
        return 4;
    case DType::f64:
        return 8;
    case DType::u8:
        return 1;
    case DType::i64:
        return 8;
    }
    throw DataError("unknown dtype code");
}

const char* dtype_name(DType dtype) {
    switch (dtype) {
    case DType::f32:
        return "float32";
    case DType::f64:
        return "float64";
    case DType::u8:
        return "uint8";
    case DType::i64:
        return "int64";
    }
    return "unknown";
}

std::size_t Tensor::element_count() const {
    return std::visit([](const auto& v) { return v.size(); }, data);
}

Tensor Tensor::from_f32(std::vector<std::uint64_t> dims, std::vector<float> values) {
    return Tensor{DType::f32, std::move(dims), std::move(values)};
}
Tensor Tensor::from_f64(std::vector<std::uint64_t> dims, std::vector<double> values) {
    return Tensor{DType::f64, std::move(dims), std::move(values)};
}
Tensor Tensor::from_u8(std::vector<std::uint64_t> dims, std::vector<std::uint8_t> values) {
    return Tensor{DType::u8, std::move(dims), std::move(values)};
}
Tensor Tensor::from_i64(std::vector<std::uint64_t> dims, std::vector<std::int64_t> values) {
    return Tensor{DType::i64, std::move(dims), std::move(values)};
}

Tensor Tensor::from_matrix(const Matrix& m, DType dtype) {
    std::vector<std::uint64_t> dims{static_cast<std::uint64_t>(m.rows()),
                                    static_cast<std::uint64_t>(m.cols())};
    const auto n = static_cast<std::size_t>(m.size());
    if (dtype == DType::f64) {
        return from_f64(std::move(dims), std::vector<double>(m.data(), m.data() + n));
    }
    if (dtype != DType::f32) {
        throw DataError("from_matrix: floating dtype required");
    }
    std::vector<float> values(n);
    std::transform(m.data(), m.data() + n, values.begin(),
                   [](double x) { return static_cast<float>(x); });
    return from_f32(std::move(dims), std::move(values));
}

Tensor Tensor::from_vector(const Vector& v, DType dtype) {
    Matrix row = v.transpose();
    Tensor t = from_matrix(row, dtype);
    t.dims = {static_cast<std::uint64_t>(v.size())};
    return t;
}

std::vector<double> Tensor::to_doubles() const {
    if (const auto* f = std::get_if<std::vector<float>>(&data)) {
        return {f->begin(), f->end()};
    }
    if (const auto* d = std::get_if<std::vector<double>>(&data)) {
        return *d;
    }
    throw DataError(std::string("expected floating tensor, got ") + dtype_name(dtype));
}

Matrix Tensor::to_matrix() const {
    if (dims.size() != 2) {
        throw DataError("expected 2-D tensor, got dims " + dims_string(dims));
    }
    const auto values = to_doubles();
    Matrix m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
    std::copy(values.begin(), values.end(), m.data());
    return m;
}

Vector Tensor::to_vector() const {
    if (dims.size() != 1) {
        throw DataError("expected 1-D tensor, got dims " + dims_string(dims));
    }
    const auto values = to_doubles();
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor) {
    if (tensor.dims.empty() || tensor.dims.size() > 255) {
        throw DataError("tensor must have 1..255 dims");
    }
    const auto expected = checked_product(tensor.dims, "encode_tensor");
    if (expected != tensor.element_count()) {
        std::ostringstream os;
        os << "count mismatch: dims " << dims_string(tensor.dims) << " need " << expected
           << " scalars, got " << tensor.element_count();
        throw DataError(os.str());
    }
    const bool variant_ok = std::visit(
        [&](const auto& v) {
            using T = typename std::decay_t<decltype(v)>::value_type;
            switch (tensor.dtype) {
            case DType::f32:
                return std::is_same_v<T, float>;
            case DType::f64:
                return std::is_same_v<T, double>;
            case DType::u8:
                return std::is_same_v<T, std::uint8_t>;
            case DType::i64:
                return std::is_same_v<T, std::int64_t>;
            }
            return false;
        },
        tensor.data);
    if (!variant_ok) {
        throw DataError("tensor storage does not match dtype");
    }

    std::vector<std::uint8_t> out;
    out.reserve(8 + 8 * tensor.dims.size() + expected * dtype_size(tensor.dtype));
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(static_cast<std::uint8_t>(tensor.dtype));
    out.push_back(static_cast<std::uint8_t>(tensor.dims.size()));
    out.push_back(0);
    out.push_back(0);
    for (const auto d : tensor.dims) {
        put_le<std::uint64_t>(out, d);
    }
    std::visit([&](const auto& v) { put_scalars(out, v); }, tensor.data);
    return out;
}

namespace {

std::pair<TensorHeader, std::size_t> decode_header(std::span<const std::uint8_t> bytes,
                                                   const std::string& origin) {
    if (bytes.size() < 8) {
        throw DataError(origin + ": truncated header");
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw DataError(origin + ": bad magic");
    }
    const auto code = bytes[4];
    if (code < 1 || code > 4) {
        throw DataError(origin + ": unknown dtype code " + std::to_string(code));
    }
    const std::size_t ndim = bytes[5];
    if (ndim == 0) {
        throw DataError(origin + ": ndim must be >= 1");
    }
    const std::size_t header_size = 8 + 8 * ndim;
    if (bytes.size() < header_size) {
        throw DataError(origin + ": truncated header");
    }
    TensorHeader header{static_cast<DType>(code), {}};
    for (std::size_t i = 0; i < ndim; ++i) {
        header.dims.push_back(get_le<std::uint64_t>(bytes.data() + 8 + 8 * i));
    }
    return {header, header_size};
}

} // namespace

Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin) {
    auto [header, offset] = decode_header(bytes, origin);
    const auto count = checked_product(header.dims, origin);
    const auto payload = count * dtype_size(header.dtype);
    if (bytes.size() - offset < payload) {
        throw DataError(origin + ": truncated payload");
    }
    if (bytes.size() - offset > payload) {
        throw DataError(origin + ": trailing bytes after payload");
    }
    const std::uint8_t* p = bytes.data() + offset;
    Tensor t;
    t.dtype = header.dtype;
    t.dims = std::move(header.dims);
    switch (t.dtype) {
    case DType::f32:
        t.data = get_scalars<float>(p, count);
        break;
    case DType::f64:
        t.data = get_scalars<double>(p, count);
        break;
    case DType::u8:
        t.data = get_scalars<std::uint8_t>(p, count);
        break;
    case DType::i64:
        t.data = get_scalars<std::int64_t>(p, count);
        break;
    }
    return t;
}

void write_tensor(const fs::path& path, const Tensor& tensor) {
    const auto bytes = encode_tensor(tensor);
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open for writing: " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("write failed: " + path.string());
    }
}

template <typename T>
void write_tensor(const fs::path& path, std::vector<std::uint64_t> dims, std::vector<T> scalars) {
    Tensor t;
    if constexpr (std::is_same_v<T, float>) {
        t.dtype = DType::f32;
    } else if constexpr (std::is_same_v<T, double>) {
        t.dtype = DType::f64;
    } else if constexpr (std::is_same_v<T, std::uint8_t>) {
        t.dtype = DType::u8;
    } else {
        static_assert(std::is_same_v<T, std::int64_t>);
        t.dtype = DType::i64;
    }
    t.dims = std::move(dims);
    t.data = std::move(scalars);
    write_tensor(path, t);
}

template void write_tensor<float>(const fs::path&, std::vector<std::uint64_t>, std::vector<float>);
template void write_tensor<double>(const fs::path&, std::vector<std::uint64_t>, std::vector<double>);
template void write_tensor<std::uint8_t>(const fs::path&, std::vector<std::uint64_t>,
                                         std::vector<std::uint8_t>);
template void write_tensor<std::int64_t>(const fs::path&, std::vector<std::uint64_t>,
                                         std::vector<std::int64_t>);

namespace {

std::vector<std::uint8_t> slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open: " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

Tensor read_tensor(const fs::path& path) {
    const auto bytes = slurp(path);
    return decode_tensor(bytes, path.string());
}

TensorHeader read_tensor_header(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open: " + path.string());
    }
    std::vector<std::uint8_t> head(8 + 8 * 255);
    in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    return decode_header(head, path.string()).first;
}

// ---------------------------------------------------------------------------
// text helpers

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find('\t', start);
        fields.push_back(line.substr(start, pos - start));
        if (pos == std::string::npos) {
            break;
        }
        start = pos + 1;
    }
    return fields;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open: " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        lines.push_back(line);
    }
    return lines;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open for writing: " + path.string());
    }
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open: " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// manifests

bool DatasetManifest::has_affinities() const {
    return !entries.empty() && std::all_of(entries.begin(), entries.end(),
                                           [](const auto& e) { return e.affinity_path.has_value(); });
}

bool DatasetManifest::has_annotations() const {
    return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) {
        return e.annotation_path.has_value();
    });
}

namespace {

std::size_t parse_size(const std::string& text, const std::string& what) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(text, &used);
        if (used != text.size()) {
            throw std::invalid_argument(text);
        }
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw DataError("manifest header: bad value for " + what + ": '" + text + "'");
    }
}

std::optional<fs::path> optional_path(const std::vector<std::string>& fields, std::size_t col,
                                      const fs::path& base) {
    if (col >= fields.size() || fields[col].empty() || fields[col] == "-") {
        return std::nullopt;
    }
    return base / fields[col];
}

void expect_dims(const fs::path& file, const TensorHeader& header,
                 const std::vector<std::uint64_t>& want, const std::string& image_id) {
    if (header.dims != want) {
        throw DataError("shape mismatch for '" + image_id + "': " + file.string() + " has dims " +
                        dims_string(header.dims) + ", expected " + dims_string(want));
    }
}

void require_exists(const fs::path& file) {
    if (!fs::exists(file)) {
        throw DataError("missing file: " + file.string());
    }
}

} // namespace

DatasetManifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) {
        throw DataError("missing file: " + path.string());
    }
    const auto lines = read_lines(path);
    const fs::path base = path.parent_path();
    DatasetManifest manifest;

    std::size_t row = 0;
    bool header_seen = false;
    bool columns_seen = false;
    std::set<std::string> ids;
    for (const auto& line : lines) {
        ++row;
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            std::istringstream is(line.substr(1));
            std::string token;
            while (is >> token) {
                const auto eq = token.find('=');
                if (eq == std::string::npos) {
                    continue;
                }
                const auto key = token.substr(0, eq);
                const auto value = token.substr(eq + 1);
                if (key == "grid_h") {
                    manifest.grid_h = parse_size(value, key);
                } else if (key == "grid_w") {
                    manifest.grid_w = parse_size(value, key);
                } else if (key == "embed_dim") {
                    manifest.embed_dim = parse_size(value, key);
                }
            }
            header_seen = true;
            continue;
        }
        const auto fields = split_tabs(line);
        if (!columns_seen) {
            columns_seen = true;
            if (fields[0] == "image_id") {
                continue;
            }
        }
        if (fields.size() < 2) {
            throw DataError(path.string() + ":" + std::to_string(row) + ": expected at least 2 columns");
        }
        if (!ids.insert(fields[0]).second) {
            throw DataError(path.string() + ": duplicate id '" + fields[0] + "'");
        }
        manifest.entries.push_back(ManifestEntry{fields[0], base / fields[1],
                                                 optional_path(fields, 2, base),
                                                 optional_path(fields, 3, base)});
    }
    if (!header_seen || manifest.grid_h == 0 || manifest.grid_w == 0 || manifest.embed_dim == 0) {
        throw DataError(path.string() + ": header must declare grid_h, grid_w, embed_dim");
    }

    const std::uint64_t n = manifest.patch_count();
    for (const auto& e : manifest.entries) {
        require_exists(e.embedding_path);
        expect_dims(e.embedding_path, read_tensor_header(e.embedding_path), {n, manifest.embed_dim},
                    e.image_id);
        if (e.affinity_path) {
            require_exists(*e.affinity_path);
            expect_dims(*e.affinity_path, read_tensor_header(*e.affinity_path), {n, n}, e.image_id);
        }
        if (e.annotation_path) {
            require_exists(*e.annotation_path);
            const auto header = read_tensor_header(*e.annotation_path);
            if (header.dtype != DType::i64 || header.dims.size() != 2 || header.dims[0] < manifest.grid_h ||
                header.dims[1] < manifest.grid_w) {
                throw DataError("shape mismatch for '" + e.image_id +
                                "': annotation must be int64 [H,W] with H,W >= grid dims");
            }
            require_exists(annotation_sidecar_path(*e.annotation_path));
        }
    }
    return manifest;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
    const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
    auto rel = [&](const fs::path& p) {
        auto r = p.lexically_relative(base);
        return (r.empty() ? p : r).generic_string();
    };
    std::ostringstream os;
    os << "# insight-manifest grid_h=" << manifest.grid_h << " grid_w=" << manifest.grid_w
       << " embed_dim=" << manifest.embed_dim << '\n';
    os << "image_id\tembedding_path\taffinity_path\tannotation_path\n";
    for (const auto& e : manifest.entries) {
        os << e.image_id << '\t' << rel(e.embedding_path) << '\t'
           << (e.affinity_path ? rel(*e.affinity_path) : "-") << '\t'
           << (e.annotation_path ? rel(*e.annotation_path) : "-") << '\n';
    }
    write_text(path, os.str());
}

Matrix load_embeddings(const DatasetManifest& manifest, std::size_t index) {
    const auto& e = manifest.entries.at(index);
    Matrix m = read_tensor(e.embedding_path).to_matrix();
    if (static_cast<std::size_t>(m.rows()) != manifest.patch_count() ||
        static_cast<std::size_t>(m.cols()) != manifest.embed_dim) {
        throw DataError("shape mismatch for '" + e.image_id + "'");
    }
    if (!m.allFinite()) {
        throw DataError("non-finite embedding values for '" + e.image_id + "'");
    }
    return m;
}

Matrix load_affinity(const DatasetManifest& manifest, std::size_t index) {
    const auto& e = manifest.entries.at(index);
    if (!e.affinity_path) {
        throw DataError("no affinity file for '" + e.image_id + "'");
    }
    return read_tensor(*e.affinity_path).to_matrix();
}

// ---------------------------------------------------------------------------
// annotations

fs::path annotation_sidecar_path(const fs::path& raster_path) {
    auto p = raster_path;
    p.replace_extension(".tsv");
    return p;
}

AnnotationRaster load_annotation(const fs::path& raster_path) {
    const auto t = read_tensor(raster_path);
    if (t.dtype != DType::i64 || t.dims.size() != 2) {
        throw DataError(raster_path.string() + ": annotation must be a 2-D int64 tensor");
    }
    AnnotationRaster raster;
    raster.height = t.dims[0];
    raster.width = t.dims[1];
    raster.labels = std::get<std::vector<std::int64_t>>(t.data);

    for (const auto& line : read_lines(annotation_sidecar_path(raster_path))) {
        if (line.empty()) {
            continue;
        }
        const auto fields = split_tabs(line);
        if (fields.size() < 2) {
            throw DataError(raster_path.string() + ": sidecar rows must be id<TAB>name");
        }
        try {
            raster.label_names[std::stoll(fields[0])] = fields[1];
        } catch (const std::exception&) {
            throw DataError(raster_path.string() + ": bad label id '" + fields[0] + "'");
        }
    }
    for (const auto id : raster.labels) {
        if (id < -1) {
            throw DataError(raster_path.string() + ": label ids must be >= -1");
        }
        if (id >= 0 && !raster.label_names.contains(id)) {
            throw DataError(raster_path.string() + ": label id " + std::to_string(id) +
                            " missing from sidecar");
        }
    }
    return raster;
}

void save_annotation(const fs::path& raster_path, const AnnotationRaster& raster) {
    write_tensor(raster_path, Tensor::from_i64({raster.height, raster.width}, raster.labels));
    std::ostringstream os;
    for (const auto& [id, name] : raster.label_names) {
        os << id << '\t' << name << '\n';
    }
    write_text(annotation_sidecar_path(raster_path), os.str());
}

} // namespace insight
