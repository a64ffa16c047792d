#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fewshot/rng.hpp"
#include "fewshot/tensor.hpp"

// Dataset container, class splits, C-way-K-shot episode sampling, and the
// rotational division that turns one support column into a fake query set.

namespace fewshot {

template <typename Real>
struct FewShotDataset {
    std::vector<std::vector<Real>> features;               // flattened per sample
    std::vector<std::int64_t> labels;                      // class id per sample
    Shape feature_shape;                                   // {channels, mel_bins, frames}
    std::map<std::int64_t, std::vector<std::int64_t>> class_index; // class id -> sample indices
    std::vector<std::string> class_names;                  // position = class id; may be empty

    std::int64_t size() const { return static_cast<std::int64_t>(features.size()); }

    std::vector<std::int64_t> class_ids() const {
        std::vector<std::int64_t> ids;
        ids.reserve(class_index.size());
        for (const auto& [id, _] : class_index) ids.push_back(id);
        return ids;
    }

    void add_sample(std::vector<Real> feature, std::int64_t label) {
        if (static_cast<std::int64_t>(feature.size()) != shape_numel(feature_shape))
            throw ShapeError("dataset sample has " + std::to_string(feature.size()) +
                             " values, expected " + shape_str(feature_shape));
        class_index[label].push_back(size());
        features.push_back(std::move(feature));
        labels.push_back(label);
    }
};

struct ClassSplit {
    std::vector<std::int64_t> train_classes, val_classes, test_classes;
};

/// 60/20/20 split of the shuffled class list. Fractions are floored with the
/// remainder going to train, but every part gets at least one class when
/// there are 3 or more.
inline ClassSplit generate_split(std::vector<std::int64_t> classes, std::uint64_t seed) {
    std::size_t n = classes.size();
    if (n < 3)
        throw ConfigError("class split needs at least 3 classes, got " + std::to_string(n));
    Rng rng(derive_seed(seed, "class-split"));
    rng.shuffle(classes);
    std::size_t n_val = std::max<std::size_t>(1, n / 5);
    std::size_t n_test = std::max<std::size_t>(1, n / 5);
    std::size_t n_train = n - n_val - n_test;
    ClassSplit s;
    s.train_classes.assign(classes.begin(), classes.begin() + n_train);
    s.val_classes.assign(classes.begin() + n_train, classes.begin() + n_train + n_val);
    s.test_classes.assign(classes.begin() + n_train + n_val, classes.end());
    return s;
}

inline void write_split(const std::string& path, const ClassSplit& split) {
    std::ofstream out(path);
    if (!out) throw IngestionError("cannot open split file for writing: " + path);
    auto section = [&](const char* name, const std::vector<std::int64_t>& ids) {
        out << "[" << name << "]\n";
        for (auto id : ids) out << id << "\n";
    };
    section("train", split.train_classes);
    section("val", split.val_classes);
    section("test", split.test_classes);
}

inline ClassSplit read_split(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open split file: " + path);
    ClassSplit split;
    std::vector<std::int64_t>* current = nullptr;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line == "[train]") current = &split.train_classes;
        else if (line == "[val]") current = &split.val_classes;
        else if (line == "[test]") current = &split.test_classes;
        else if (line.front() == '[')
            throw FormatError(path + ":" + std::to_string(line_no) + ": unknown section " + line);
        else {
            if (!current)
                throw FormatError(path + ":" + std::to_string(line_no) +
                                  ": class id before any [train]/[val]/[test] section");
            std::size_t pos = 0;
            std::int64_t id = 0;
            try {
                id = std::stoll(line, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != line.size())
                throw FormatError(path + ":" + std::to_string(line_no) + ": not a class id: " + line);
            current->push_back(id);
        }
    }
    return split;
}

/// A labelled batch of samples in class-major order: sample index
/// c * per_class + k holds shot k of episode-local class c.
template <typename Real>
struct SampleBlock {
    std::vector<Real> data;           // [count, channels, mel_bins, frames] flattened
    std::vector<std::int64_t> labels; // episode-local labels, length count
    Shape feature_shape;              // per-sample shape
    std::int64_t per_class = 0;

    std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t way() const { return per_class == 0 ? 0 : count() / per_class; }

    /// The whole block as a constant [count, ...feature_shape] tensor.
    Tensor<Real> batch() const {
        Shape s{count()};
        s.insert(s.end(), feature_shape.begin(), feature_shape.end());
        return Tensor<Real>::constant(std::move(s), data);
    }
};

template <typename Real>
struct Episode {
    SampleBlock<Real> support, query;
    std::int64_t way = 0, shot = 0, query_count = 0;
    std::vector<std::int64_t> class_ids; // original dataset id per episode-local label
    std::uint64_t seed = 0;
    std::int64_t id = 0;
};

/// Draws a C-way-K-shot episode: C classes without replacement, then K+Q
/// samples per class without replacement, first K to support, remainder to
/// query. Labels are remapped to 0..C-1 in drawing order.
template <typename Real>
Episode<Real> sample_episode(const FewShotDataset<Real>& dataset,
                             const std::vector<std::int64_t>& classes,
                             std::int64_t way, std::int64_t shot, std::int64_t query_count,
                             std::uint64_t rng_seed) {
    if (way < 2) throw SamplingError("episode needs way >= 2, got " + std::to_string(way));
    if (shot < 1 || query_count < 1)
        throw SamplingError("episode needs shot >= 1 and query >= 1");
    if (static_cast<std::int64_t>(classes.size()) < way)
        throw SamplingError("episode needs " + std::to_string(way) + " classes but only " +
                            std::to_string(classes.size()) + " are available");
    Rng rng(rng_seed);
    auto class_pick = rng.sample_without_replacement(static_cast<int>(classes.size()), static_cast<int>(way));

    Episode<Real> ep;
    ep.way = way;
    ep.shot = shot;
    ep.query_count = query_count;
    ep.seed = rng_seed;
    std::int64_t row = shape_numel(dataset.feature_shape);
    auto init_block = [&](SampleBlock<Real>& b, std::int64_t per_class) {
        b.feature_shape = dataset.feature_shape;
        b.per_class = per_class;
        b.data.reserve(static_cast<std::size_t>(way * per_class * row));
    };
    init_block(ep.support, shot);
    init_block(ep.query, query_count);

    for (std::int64_t c = 0; c < way; ++c) {
        std::int64_t cls = classes[static_cast<std::size_t>(class_pick[static_cast<std::size_t>(c)])];
        auto it = dataset.class_index.find(cls);
        std::int64_t have = it == dataset.class_index.end()
                                ? 0
                                : static_cast<std::int64_t>(it->second.size());
        if (have < shot + query_count)
            throw SamplingError("class " + std::to_string(cls) + " has " + std::to_string(have) +
                                " samples but the episode needs " + std::to_string(shot + query_count));
        ep.class_ids.push_back(cls);
        auto pick = rng.sample_without_replacement(static_cast<int>(have),
                                                  static_cast<int>(shot + query_count));
        for (std::int64_t s = 0; s < shot + query_count; ++s) {
            std::int64_t sample = it->second[static_cast<std::size_t>(pick[static_cast<std::size_t>(s)])];
            auto& block = s < shot ? ep.support : ep.query;
            const auto& f = dataset.features[static_cast<std::size_t>(sample)];
            block.data.insert(block.data.end(), f.begin(), f.end());
            block.labels.push_back(c);
        }
    }
    return ep;
}

/// Splits the support block at shot j: that column becomes the fake query
/// (one sample per class), the remaining K-1 columns the sub-support.
template <typename Real>
std::pair<SampleBlock<Real>, SampleBlock<Real>> rdft_divide(const SampleBlock<Real>& support,
                                                            std::int64_t j) {
    std::int64_t k = support.per_class;
    if (k < 2)
        throw UnsupportedError("rotational division needs more than one shot per class (K > 1); "
                               "got K = " + std::to_string(k));
    if (j < 0 || j >= k)
        throw ContractError("rotation index " + std::to_string(j) + " outside [0," + std::to_string(k) + ")");
    std::int64_t way = support.way();
    std::int64_t row = shape_numel(support.feature_shape);
    SampleBlock<Real> sub, fake;
    sub.feature_shape = fake.feature_shape = support.feature_shape;
    sub.per_class = k - 1;
    fake.per_class = 1;
    sub.data.reserve(static_cast<std::size_t>(way * (k - 1) * row));
    fake.data.reserve(static_cast<std::size_t>(way * row));
    for (std::int64_t c = 0; c < way; ++c)
        for (std::int64_t s = 0; s < k; ++s) {
            auto begin = support.data.begin() + (c * k + s) * row;
            auto& block = s == j ? fake : sub;
            block.data.insert(block.data.end(), begin, begin + row);
            block.labels.push_back(c);
        }
    return {std::move(sub), std::move(fake)};
}

/// All K rotations of rdft_divide, j = 0..K-1 in order.
template <typename Real>
std::vector<std::pair<SampleBlock<Real>, SampleBlock<Real>>> rdft_rotations(
    const SampleBlock<Real>& support) {
    std::vector<std::pair<SampleBlock<Real>, SampleBlock<Real>>> out;
    out.reserve(static_cast<std::size_t>(support.per_class));
    for (std::int64_t j = 0; j < support.per_class; ++j) out.push_back(rdft_divide(support, j));
    return out;
}

} // namespace fewshot
