#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "numprobe/errors.hpp"
#include "numprobe/matrix.hpp"
#include "numprobe/rng.hpp"

namespace numprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "NPAD I/O assumes a little-endian host");

// ---------------------------------------------------------------------------
// NPAD tensor files
//
//   "NPAD" | format_version u32 | n_rows u64 | n_cols u64 | n_rows*n_cols f32
//
// all little-endian, payload row-major.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t npad_format_version = 1;
inline constexpr std::size_t npad_header_bytes = 4 + 4 + 8 + 8;

struct NpadTensor {
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    std::vector<float> values;
};

inline void write_npad(const fs::path& path, std::uint64_t rows, std::uint64_t cols,
                       std::span<const float> values) {
    if (values.size() != rows * cols) {
        throw DimensionError("npad: payload size does not match shape");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw StoreError("cannot open " + path.string() + " for writing");
    }
    out.write("NPAD", 4);
    out.write(reinterpret_cast<const char*>(&npad_format_version), 4);
    out.write(reinterpret_cast<const char*>(&rows), 8);
    out.write(reinterpret_cast<const char*>(&cols), 8);
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!out) {
        throw StoreError("write failed: " + path.string());
    }
}

inline void write_npad(const fs::path& path, const Matrix& m) {
    std::vector<float> f(m.data().begin(), m.data().end());
    write_npad(path, m.rows(), m.cols(), f);
}

inline NpadTensor read_npad(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw StoreError("cannot open " + path.string());
    }
    const std::string name = path.string();
    char header[npad_header_bytes];
    in.read(header, npad_header_bytes);
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got < 4 || std::memcmp(header, "NPAD", 4) != 0) {
        throw CorruptError(name, 0, "bad magic");
    }
    if (got < npad_header_bytes) {
        throw CorruptError(name, got, "truncated header");
    }
    std::uint32_t version = 0;
    NpadTensor t;
    std::memcpy(&version, header + 4, 4);
    std::memcpy(&t.rows, header + 8, 8);
    std::memcpy(&t.cols, header + 16, 8);
    if (version != npad_format_version) {
        throw CorruptError(name, 4, "unsupported format_version " + std::to_string(version));
    }
    if (t.cols != 0 && t.rows > (std::uint64_t{1} << 40) / t.cols) {
        throw CorruptError(name, 8, "implausible shape");
    }
    const std::size_t count = t.rows * t.cols;
    t.values.resize(count);
    in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(count * sizeof(float)));
    const auto payload = static_cast<std::size_t>(in.gcount());
    if (payload != count * sizeof(float)) {
        throw CorruptError(name, npad_header_bytes + payload,
                           "truncated payload (expected " + std::to_string(count * sizeof(float)) +
                               " bytes)");
    }
    return t;
}

inline Matrix read_npad_matrix(const fs::path& path) {
    const auto t = read_npad(path);
    std::vector<double> d(t.values.begin(), t.values.end());
    return Matrix(t.rows, t.cols, std::move(d));
}

// ---------------------------------------------------------------------------
// Activation sets
// ---------------------------------------------------------------------------

enum class Site {
    residual_out,
    attn_preproj,
    attn_out,
    mlp_out,
    embedding,
    output_embedding,
    final_prenorm,
};

inline std::string_view site_name(Site s) {
    switch (s) {
        case Site::residual_out: return "residual_out";
        case Site::attn_preproj: return "attn_preproj";
        case Site::attn_out: return "attn_out";
        case Site::mlp_out: return "mlp_out";
        case Site::embedding: return "embedding";
        case Site::output_embedding: return "output_embedding";
        case Site::final_prenorm: return "final_prenorm";
    }
    return "?";
}

inline Site parse_site(std::string_view name) {
    for (auto s : {Site::residual_out, Site::attn_preproj, Site::attn_out, Site::mlp_out,
                   Site::embedding, Site::output_embedding, Site::final_prenorm}) {
        if (site_name(s) == name) {
            return s;
        }
    }
    throw ConfigError("unknown site '" + std::string(name) + "'");
}

struct RowMeta {
    std::string sample_id;
    int token_offset = 0;
    std::string context_type;
    std::string prompt_id;

    friend bool operator==(const RowMeta&, const RowMeta&) = default;
};

// Labeled vectors for one (model, layer, site). label -1 marks non-number rows.
struct ActivationSet {
    std::string model_id;
    int layer = 0;
    Site site = Site::residual_out;
    Matrix vectors;
    std::vector<int> labels;
    std::vector<RowMeta> meta;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const noexcept { return vectors.cols(); }

    void validate() const {
        if (vectors.rows() != labels.size() || meta.size() != labels.size()) {
            throw SchemaError("activation set: " + std::to_string(vectors.rows()) + " vectors, " +
                              std::to_string(labels.size()) + " labels, " +
                              std::to_string(meta.size()) + " meta rows");
        }
        for (int l : labels) {
            if (l < -1) {
                throw SchemaError("activation set: label " + std::to_string(l) + " < -1");
            }
        }
    }

    void append(std::span<const double> v, int label, RowMeta m) {
        vectors.append_row(v);
        labels.push_back(label);
        meta.push_back(std::move(m));
    }

    ActivationSet subset(std::span<const std::size_t> idx) const {
        ActivationSet out{model_id, layer, site, vectors.select_rows(idx), {}, {}};
        for (auto i : idx) {
            out.labels.push_back(labels[i]);
            out.meta.push_back(meta[i]);
        }
        return out;
    }

    friend bool operator==(const ActivationSet&, const ActivationSet&) = default;
};

// ---------------------------------------------------------------------------
// Labels CSV
// ---------------------------------------------------------------------------

inline constexpr std::string_view labels_header = "sample_id,label_value,token_offset,context_type,prompt_id";

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    return out + "\"";
}

// Splits one CSV record; returns false on malformed quoting.
inline bool csv_split(const std::string& line, std::vector<std::string>& fields) {
    fields.clear();
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return !quoted;
}

}  // namespace detail

inline void write_labels_csv(const fs::path& path, std::span<const int> labels,
                             std::span<const RowMeta> meta) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw StoreError("cannot open " + path.string() + " for writing");
    }
    out << labels_header << '\n';
    for (std::size_t i = 0; i < labels.size(); ++i) {
        out << detail::csv_field(meta[i].sample_id) << ',' << labels[i] << ',' << meta[i].token_offset
            << ',' << detail::csv_field(meta[i].context_type) << ','
            << detail::csv_field(meta[i].prompt_id) << '\n';
    }
    if (!out) {
        throw StoreError("write failed: " + path.string());
    }
}

inline void read_labels_csv(const fs::path& path, std::vector<int>& labels, std::vector<RowMeta>& meta) {
    std::ifstream in(path);
    if (!in) {
        throw StoreError("cannot open " + path.string());
    }
    std::string line;
    std::size_t offset = 0;
    if (!std::getline(in, line) || line != labels_header) {
        throw CorruptError(path.string(), 0, "unexpected labels header");
    }
    offset += line.size() + 1;
    std::vector<std::string> f;
    while (std::getline(in, line)) {
        if (!detail::csv_split(line, f) || f.size() != 5) {
            throw CorruptError(path.string(), offset, "malformed labels row");
        }
        try {
            labels.push_back(std::stoi(f[1]));
            meta.push_back({f[0], std::stoi(f[2]), f[3], f[4]});
        } catch (const std::exception&) {
            throw CorruptError(path.string(), offset, "non-integer label or offset");
        }
        offset += line.size() + 1;
    }
}

// ---------------------------------------------------------------------------
// Manifest + dumps
// ---------------------------------------------------------------------------

inline constexpr int manifest_format_version = 1;

struct ManifestEntry {
    std::string file;
    int layer = 0;
    Site site = Site::residual_out;
    std::uint64_t n_rows = 0;
    std::string labels_file;
    std::string context_type;
};

struct Manifest {
    int format_version = manifest_format_version;
    std::string model_id;
    std::uint64_t d_model = 0;
    int n_layers = 0;
    std::string dtype = "f32";
    std::vector<ManifestEntry> entries;

    json to_json() const {
        json j;
        j["format_version"] = format_version;
        j["model_id"] = model_id;
        j["d_model"] = d_model;
        j["n_layers"] = n_layers;
        j["dtype"] = dtype;
        j["entries"] = json::array();
        for (const auto& e : entries) {
            j["entries"].push_back({{"file", e.file},
                                    {"layer", e.layer},
                                    {"site", site_name(e.site)},
                                    {"n_rows", e.n_rows},
                                    {"labels_file", e.labels_file},
                                    {"context_type", e.context_type}});
        }
        return j;
    }

    static Manifest from_json(const json& j) {
        try {
            Manifest m;
            m.format_version = j.at("format_version").get<int>();
            m.model_id = j.at("model_id").get<std::string>();
            m.d_model = j.at("d_model").get<std::uint64_t>();
            m.n_layers = j.at("n_layers").get<int>();
            m.dtype = j.at("dtype").get<std::string>();
            if (m.dtype != "f32") {
                throw SchemaError("manifest dtype must be f32, got " + m.dtype);
            }
            for (const auto& e : j.at("entries")) {
                m.entries.push_back({e.at("file").get<std::string>(), e.at("layer").get<int>(),
                                     parse_site(e.at("site").get<std::string>()),
                                     e.at("n_rows").get<std::uint64_t>(),
                                     e.at("labels_file").get<std::string>(),
                                     e.value("context_type", std::string{})});
            }
            return m;
        } catch (const json::exception& e) {
            throw SchemaError(std::string("manifest: ") + e.what());
        } catch (const ConfigError& e) {
            throw SchemaError(std::string("manifest: ") + e.what());
        }
    }
};

inline constexpr const char* manifest_name = "manifest.json";

inline Manifest load_manifest(const fs::path& dir) {
    const auto path = dir / manifest_name;
    std::ifstream in(path);
    if (!in) {
        throw StoreError("no manifest at " + path.string());
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
    return Manifest::from_json(j);
}

namespace detail {

// Advisory single-writer lock: exclusive creation of <dir>/.lock.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (f == nullptr) {
            throw StoreError("dump directory is locked by another writer: " + path_.string());
        }
        std::fclose(f);
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

inline void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) {
            throw StoreError("cannot write " + tmp.string());
        }
        out << text;
        if (!out) {
            throw StoreError("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        throw StoreError("rename " + tmp.string() + ": " + ec.message());
    }
}

inline std::string entry_context(const ActivationSet& set) {
    std::set<std::string> kinds;
    for (const auto& m : set.meta) {
        kinds.insert(m.context_type);
    }
    if (kinds.size() == 1) {
        return *kinds.begin();
    }
    return kinds.empty() ? std::string{} : std::string{"mixed"};
}

}  // namespace detail

// Appends one activation set to the dump in `dir` (created if needed).
inline Manifest write_dump(const ActivationSet& set, const fs::path& dir,
                           std::optional<int> n_layers = std::nullopt) {
    set.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw StoreError("cannot create " + dir.string() + ": " + ec.message());
    }
    detail::DirLock lock(dir);

    Manifest m;
    if (fs::exists(dir / manifest_name)) {
        m = load_manifest(dir);
        if (m.d_model != set.dim() && set.dim() != 0) {
            throw SchemaError("dump d_model " + std::to_string(m.d_model) + " != set width " +
                              std::to_string(set.dim()));
        }
        if (m.model_id != set.model_id) {
            throw SchemaError("dump model_id '" + m.model_id + "' != '" + set.model_id + "'");
        }
        if (n_layers && *n_layers != m.n_layers) {
            throw SchemaError("dump n_layers mismatch");
        }
    } else {
        m.model_id = set.model_id;
        m.d_model = set.dim();
        m.n_layers = n_layers.value_or(0);
    }

    char stem[96];
    std::snprintf(stem, sizeof stem, "L%03d_%s_%04zu", set.layer,
                  std::string(site_name(set.site)).c_str(), m.entries.size());
    const std::string tensor_file = std::string(stem) + ".npad";
    const std::string labels_file = std::string(stem) + ".labels.csv";
    std::vector<float> f(set.vectors.data().begin(), set.vectors.data().end());
    write_npad(dir / tensor_file, set.size(), m.d_model, f);
    write_labels_csv(dir / labels_file, set.labels, set.meta);

    m.entries.push_back({tensor_file, set.layer, set.site, set.size(), labels_file,
                         detail::entry_context(set)});
    detail::write_text_atomic(dir / manifest_name, m.to_json().dump(2) + "\n");
    return m;
}

struct DumpFilter {
    std::optional<int> layer;
    std::optional<Site> site;
    std::optional<std::string> context_type;  // applied per row
};

// Concatenates matching entries in manifest order. Layer/site of the result
// are those of the first match (-1 / requested site when nothing matched).
inline ActivationSet read_dump(const fs::path& dir, const DumpFilter& filter = {}) {
    const Manifest m = load_manifest(dir);
    ActivationSet out;
    out.model_id = m.model_id;
    out.layer = filter.layer.value_or(-1);
    out.site = filter.site.value_or(Site::residual_out);
    out.vectors = Matrix(0, m.d_model);
    bool first = true;
    for (const auto& e : m.entries) {
        if ((filter.layer && e.layer != *filter.layer) || (filter.site && e.site != *filter.site)) {
            continue;
        }
        const auto t = read_npad(dir / e.file);
        if (t.rows != e.n_rows || t.cols != m.d_model) {
            throw CorruptError((dir / e.file).string(), 8,
                               "header shape " + std::to_string(t.rows) + "x" + std::to_string(t.cols) +
                                   " does not match manifest");
        }
        std::vector<int> labels;
        std::vector<RowMeta> meta;
        read_labels_csv(dir / e.labels_file, labels, meta);
        if (labels.size() != t.rows) {
            throw CorruptError((dir / e.labels_file).string(), 0, "row count does not match tensor");
        }
        if (first) {
            out.layer = e.layer;
            out.site = e.site;
            first = false;
        }
        std::vector<double> row(t.cols);
        for (std::size_t r = 0; r < t.rows; ++r) {
            if (filter.context_type && meta[r].context_type != *filter.context_type) {
                continue;
            }
            std::copy_n(t.values.data() + r * t.cols, t.cols, row.begin());
            out.vectors.append_row(row);
            out.labels.push_back(labels[r]);
            out.meta.push_back(std::move(meta[r]));
        }
    }
    return out;
}

// Schema checker: returns human-readable problems; empty means valid.
inline std::vector<std::string> check_dump(const fs::path& dir) {
    std::vector<std::string> problems;
    Manifest m;
    try {
        m = load_manifest(dir);
    } catch (const Error& e) {
        return {e.what()};
    }
    for (const auto& e : m.entries) {
        try {
            const auto t = read_npad(dir / e.file);
            if (t.rows != e.n_rows || t.cols != m.d_model) {
                problems.push_back(e.file + ": header shape does not match manifest");
            }
            std::vector<int> labels;
            std::vector<RowMeta> meta;
            read_labels_csv(dir / e.labels_file, labels, meta);
            if (labels.size() != e.n_rows) {
                problems.push_back(e.labels_file + ": row count does not match manifest");
            }
        } catch (const Error& err) {
            problems.push_back(err.what());
        }
    }
    return problems;
}

// ---------------------------------------------------------------------------
// Value-disjoint splits
// ---------------------------------------------------------------------------

struct Splits {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

// Partitions rows with label >= 0 so that the label values seen in train,
// val and test are pairwise disjoint; val and test each hold exactly the
// requested number of distinct values. Rows labeled -1 are left out.
inline Splits split_by_value(std::span<const int> labels, std::size_t holdout_val,
                             std::size_t holdout_test, std::uint64_t seed) {
    std::vector<int> values;
    for (int l : labels) {
        if (l >= 0) {
            values.push_back(l);
        }
    }
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    if (holdout_val + holdout_test >= values.size()) {
        throw SplitError("split_by_value: " + std::to_string(values.size()) +
                         " distinct values cannot hold out " + std::to_string(holdout_val) + " + " +
                         std::to_string(holdout_test) + " and keep a training set");
    }
    Rng rng(seed);
    rng.shuffle(std::span<int>(values));
    std::map<int, int> bucket;  // 0 train, 1 val, 2 test
    for (std::size_t i = 0; i < values.size(); ++i) {
        bucket[values[i]] = i < holdout_val ? 1 : (i < holdout_val + holdout_test ? 2 : 0);
    }
    Splits s;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] < 0) {
            continue;
        }
        switch (bucket[labels[r]]) {
            case 1: s.val.push_back(r); break;
            case 2: s.test.push_back(r); break;
            default: s.train.push_back(r); break;
        }
    }
    return s;
}

}  // namespace numprobe
