#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fewshot/episodes.hpp"
#include "fewshot/encoder.hpp"
#include "fewshot/meta.hpp"

// FSTC archives: a small versioned little-endian container used for both
// parameter checkpoints and feature caches. Contents are fully determined by
// the data (no timestamps), so identical state serializes to identical bytes.
//
// Layout (all integers little-endian):
//   "FSTC" | u32 version = 1 | u32 kind | u64 fingerprint | u64 record count
//   per record: u32 name length | name | u32 record type | body
//     type 1/2 (f32/f64 tensor): u32 ndim | i64 dims... | payload
//     type 3 (i64 list):         u64 count | i64 values...
//     type 4 (string list):      u64 count | (u32 length | bytes)...

namespace fewshot {

enum class ArchiveKind : std::uint32_t { checkpoint = 1, feature_cache = 2 };

namespace detail {

template <typename Real>
constexpr std::uint32_t dtype_code() {
    if constexpr (std::is_same_v<Real, float>) return 1;
    else return 2;
}

class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
    }
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void real(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void real(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }
    const std::vector<unsigned char>& bytes() const { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<unsigned char>& b) : b_(b) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[at_ + i]) << (8 * i);
        at_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[at_ + i]) << (8 * i);
        at_ += 8;
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + at_), n);
        at_ += n;
        return s;
    }
    std::size_t offset() const { return at_; }
    std::size_t remaining() const { return b_.size() - at_; }
    bool done() const { return at_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (at_ + n > b_.size())
            throw FormatError("offset " + std::to_string(at_) + ": archive truncated (need " +
                              std::to_string(n) + " more bytes)");
    }
    const std::vector<unsigned char>& b_;
    std::size_t at_ = 0;
};

} // namespace detail

class ArchiveWriter {
public:
    ArchiveWriter(ArchiveKind kind, std::uint64_t fingerprint) : kind_(kind), fingerprint_(fingerprint) {}

    template <typename Real>
    void add_tensor(const std::string& name, const Shape& shape, const std::vector<Real>& values) {
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
            throw ContractError("archive tensor " + name + ": " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
        detail::ByteWriter w;
        w.u32(static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape) w.i64(d);
        for (auto v : values) w.real(v);
        add_record(name, detail::dtype_code<Real>(), w.bytes());
    }

    void add_i64_list(const std::string& name, const std::vector<std::int64_t>& values) {
        detail::ByteWriter w;
        w.u64(values.size());
        for (auto v : values) w.i64(v);
        add_record(name, 3, w.bytes());
    }

    void add_string_list(const std::string& name, const std::vector<std::string>& values) {
        detail::ByteWriter w;
        w.u64(values.size());
        for (const auto& s : values) w.str(s);
        add_record(name, 4, w.bytes());
    }

    std::vector<unsigned char> bytes() const {
        detail::ByteWriter w;
        w.u32(0x43545346u); // "FSTC"
        w.u32(1);
        w.u32(static_cast<std::uint32_t>(kind_));
        w.u64(fingerprint_);
        w.u64(records_.size());
        auto out = w.bytes();
        for (const auto& r : records_) out.insert(out.end(), r.begin(), r.end());
        return out;
    }

    void save(const std::string& path) const {
        auto b = bytes();
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IngestionError("cannot open archive for writing: " + path);
        out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
        if (!out) throw IngestionError("failed writing archive: " + path);
    }

private:
    void add_record(const std::string& name, std::uint32_t rtype, const std::vector<unsigned char>& body) {
        if (seen_.count(name)) throw ContractError("archive already holds a record named " + name);
        seen_.insert({name, 0});
        detail::ByteWriter w;
        w.str(name);
        w.u32(rtype);
        auto rec = w.bytes();
        rec.insert(rec.end(), body.begin(), body.end());
        records_.push_back(std::move(rec));
    }

    ArchiveKind kind_;
    std::uint64_t fingerprint_;
    std::vector<std::vector<unsigned char>> records_;
    std::map<std::string, int> seen_;
};

class ArchiveReader {
public:
    explicit ArchiveReader(const std::vector<unsigned char>& bytes) {
        detail::ByteReader r(bytes);
        if (r.u32() != 0x43545346u) throw FormatError("offset 0: expected FSTC magic");
        version_ = r.u32();
        if (version_ != 1)
            throw FormatError("unsupported archive version " + std::to_string(version_));
        kind_ = static_cast<ArchiveKind>(r.u32());
        fingerprint_ = r.u64();
        std::uint64_t count = r.u64();
        for (std::uint64_t i = 0; i < count; ++i) {
            std::size_t rec_at = r.offset();
            std::string name = r.str();
            std::uint32_t rtype = r.u32();
            Record rec;
            rec.rtype = rtype;
            if (rtype == 1 || rtype == 2) {
                std::uint32_t ndim = r.u32();
                for (std::uint32_t d = 0; d < ndim; ++d) {
                    std::int64_t dim = r.i64();
                    if (dim < 0)
                        throw FormatError("offset " + std::to_string(rec_at) + ": negative dimension");
                    rec.shape.push_back(dim);
                }
                std::uint64_t n = static_cast<std::uint64_t>(shape_numel(rec.shape));
                std::uint64_t width = rtype == 1 ? 4 : 8;
                if (n * width > r.remaining())
                    throw FormatError("offset " + std::to_string(rec_at) + ": tensor payload overruns file");
                rec.values_f64.reserve(n);
                for (std::uint64_t k = 0; k < n; ++k)
                    rec.values_f64.push_back(rtype == 1 ? static_cast<double>(r.f32()) : r.f64());
            } else if (rtype == 3) {
                std::uint64_t n = r.u64();
                if (n * 8 > r.remaining())
                    throw FormatError("offset " + std::to_string(rec_at) + ": list payload overruns file");
                rec.values_i64.reserve(n);
                for (std::uint64_t k = 0; k < n; ++k) rec.values_i64.push_back(r.i64());
            } else if (rtype == 4) {
                std::uint64_t n = r.u64();
                if (n * 4 > r.remaining()) // each string costs at least a length field
                    throw FormatError("offset " + std::to_string(rec_at) + ": list payload overruns file");
                for (std::uint64_t k = 0; k < n; ++k) rec.strings.push_back(r.str());
            } else {
                throw FormatError("offset " + std::to_string(rec_at) + ": unknown record type " +
                                  std::to_string(rtype));
            }
            if (!records_.emplace(name, std::move(rec)).second)
                throw FormatError("duplicate record name " + name);
            order_.push_back(name);
        }
        if (!r.done())
            throw FormatError("offset " + std::to_string(r.offset()) + ": trailing bytes after last record");
    }

    static ArchiveReader open(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IngestionError("cannot open archive: " + path);
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
        try {
            return ArchiveReader(bytes);
        } catch (const FormatError& e) {
            throw FormatError(path + ": " + e.what());
        }
    }

    ArchiveKind kind() const { return kind_; }
    std::uint64_t fingerprint() const { return fingerprint_; }
    const std::vector<std::string>& names() const { return order_; }
    bool has(const std::string& name) const { return records_.count(name) != 0; }

    template <typename Real>
    std::pair<Shape, std::vector<Real>> tensor(const std::string& name) const {
        const Record& rec = find(name);
        if (rec.rtype != detail::dtype_code<Real>())
            throw FormatError("record " + name + " has record type " + std::to_string(rec.rtype) +
                              ", expected tensor dtype " + std::to_string(detail::dtype_code<Real>()));
        std::vector<Real> out;
        out.reserve(rec.values_f64.size());
        for (auto v : rec.values_f64) out.push_back(static_cast<Real>(v));
        return {rec.shape, std::move(out)};
    }

    const std::vector<std::int64_t>& i64_list(const std::string& name) const {
        const Record& rec = find(name);
        if (rec.rtype != 3) throw FormatError("record " + name + " is not an i64 list");
        return rec.values_i64;
    }

    const std::vector<std::string>& string_list(const std::string& name) const {
        const Record& rec = find(name);
        if (rec.rtype != 4) throw FormatError("record " + name + " is not a string list");
        return rec.strings;
    }

private:
    struct Record {
        std::uint32_t rtype = 0;
        Shape shape;
        std::vector<double> values_f64; // tensor payload (both dtypes parse into double)
        std::vector<std::int64_t> values_i64;
        std::vector<std::string> strings;
    };

    const Record& find(const std::string& name) const {
        auto it = records_.find(name);
        if (it == records_.end()) throw FormatError("archive has no record named " + name);
        return it->second;
    }

    std::uint32_t version_ = 0;
    ArchiveKind kind_ = ArchiveKind::checkpoint;
    std::uint64_t fingerprint_ = 0;
    std::map<std::string, Record> records_;
    std::vector<std::string> order_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Saves encoder parameters (and curvature matrices, when present) under
/// "param.<name>" / "curv.<name>" records. The fingerprint should describe
/// whatever determines the parameter shapes (architecture + dtype) so stale
/// checkpoints fail loudly.
template <typename Real>
void save_checkpoint(const std::string& path, const EncoderParams<Real>& params,
                     std::type_identity_t<const CurvatureSet<Real>*> curvature,
                     std::uint64_t config_fingerprint) {
    ArchiveWriter w(ArchiveKind::checkpoint, config_fingerprint);
    for (const auto& np : named_params(params))
        w.add_tensor("param." + np.name, np.tensor->shape(), np.tensor->data());
    if (curvature)
        for (const auto& nm : curvature->matrices())
            w.add_tensor("curv." + nm.name, nm.tensor->shape(), nm.tensor->data());
    w.save(path);
}

/// Loads into freshly initialized parameters/curvature: every stored record
/// must match an existing tensor in name and shape, and vice versa.
template <typename Real>
void load_checkpoint(const std::string& path, EncoderParams<Real>& params,
                     std::type_identity_t<CurvatureSet<Real>*> curvature,
                     std::uint64_t config_fingerprint) {
    auto archive = ArchiveReader::open(path);
    if (archive.kind() != ArchiveKind::checkpoint)
        throw FormatError(path + ": archive is not a checkpoint");
    if (archive.fingerprint() != config_fingerprint)
        throw FormatError(path + ": checkpoint fingerprint " + std::to_string(archive.fingerprint()) +
                          " does not match the configured architecture fingerprint " +
                          std::to_string(config_fingerprint));

    std::size_t expected = 0;
    auto restore = [&](const std::string& name, Tensor<Real>* target) {
        ++expected;
        auto [shape, values] = archive.tensor<Real>(name);
        if (shape != target->shape())
            throw FormatError(path + ": record " + name + " has shape " + shape_str(shape) +
                              ", config expects " + shape_str(target->shape()));
        *target = Tensor<Real>::leaf(shape, std::move(values), target->requires_grad());
    };
    for (auto& np : named_params(params)) restore("param." + np.name, np.tensor);
    if (curvature)
        for (auto& nm : curvature->matrices()) restore("curv." + nm.name, nm.tensor);
    if (archive.names().size() != expected)
        throw FormatError(path + ": archive holds " + std::to_string(archive.names().size()) +
                          " records, config expects " + std::to_string(expected));
}

// ---------------------------------------------------------------------------
// Feature cache
// ---------------------------------------------------------------------------

/// Writes a dataset's features/labels/class names keyed by the extraction
/// config's fingerprint.
template <typename Real>
void save_feature_cache(const std::string& path, const FewShotDataset<Real>& ds,
                        std::uint64_t config_fingerprint) {
    if (ds.size() == 0) throw ContractError("refusing to cache an empty dataset");
    ArchiveWriter w(ArchiveKind::feature_cache, config_fingerprint);
    Shape block{ds.size()};
    block.insert(block.end(), ds.feature_shape.begin(), ds.feature_shape.end());
    std::vector<Real> flat;
    flat.reserve(static_cast<std::size_t>(shape_numel(block)));
    for (const auto& f : ds.features) flat.insert(flat.end(), f.begin(), f.end());
    w.add_tensor("features", block, flat);
    w.add_i64_list("labels", ds.labels);
    w.add_string_list("class_names", ds.class_names);
    w.save(path);
}

/// Returns the cached dataset, or nullopt when the file does not exist or was
/// produced under a different config fingerprint (stale cache). Structural
/// corruption still throws.
template <typename Real>
std::optional<FewShotDataset<Real>> load_feature_cache(const std::string& path,
                                                       std::uint64_t config_fingerprint) {
    {
        std::ifstream probe(path, std::ios::binary);
        if (!probe) return std::nullopt;
    }
    auto archive = ArchiveReader::open(path);
    if (archive.kind() != ArchiveKind::feature_cache)
        throw FormatError(path + ": archive is not a feature cache");
    if (archive.fingerprint() != config_fingerprint) return std::nullopt;

    auto [block, flat] = archive.tensor<Real>("features");
    if (block.size() < 2) throw FormatError(path + ": features record must be [count, ...shape]");
    FewShotDataset<Real> ds;
    ds.feature_shape.assign(block.begin() + 1, block.end());
    std::int64_t count = block[0];
    std::int64_t row = shape_numel(ds.feature_shape);
    const auto& labels = archive.i64_list("labels");
    if (static_cast<std::int64_t>(labels.size()) != count)
        throw FormatError(path + ": " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(count) + " feature rows");
    ds.class_names = archive.string_list("class_names");
    for (std::int64_t i = 0; i < count; ++i) {
        std::vector<Real> f(flat.begin() + i * row, flat.begin() + (i + 1) * row);
        ds.add_sample(std::move(f), labels[static_cast<std::size_t>(i)]);
    }
    return ds;
}

} // namespace fewshot
