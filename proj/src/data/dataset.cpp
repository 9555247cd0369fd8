#include "tdm/data/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tdm::data {

const ClassRecord& Dataset::by_id(Index id) const {
    for (const auto& c : classes) {
        if (c.id == id) return c;
    }
    throw std::out_of_range("no class with id " + std::to_string(id));
}

std::vector<Index> Dataset::class_ids() const {
    std::vector<Index> ids;
    for (const auto& c : classes) ids.push_back(c.id);
    return ids;
}

Index Dataset::min_instances() const {
    Index m = classes.empty() ? 0 : static_cast<Index>(classes.front().instances.size());
    for (const auto& c : classes) m = std::min(m, static_cast<Index>(c.instances.size()));
    return m;
}

std::span<const Index> part(const ClassSplit& split, SplitPart which) {
    switch (which) {
        case SplitPart::train: return split.train;
        case SplitPart::val: return split.val;
        case SplitPart::test: return split.test;
    }
    return {};
}

std::string to_string(SplitPart which) {
    switch (which) {
        case SplitPart::train: return "train";
        case SplitPart::val: return "val";
        case SplitPart::test: return "test";
    }
    return "?";
}

ClassSplit build_split(const Dataset& dataset, std::array<double, 3> fractions, std::uint64_t seed) {
    if (dataset.class_count() < 3) throw std::invalid_argument("build_split: need at least 3 classes");
    for (double f : fractions) {
        if (f < 0.0) throw std::invalid_argument("build_split: negative fraction");
    }
    if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
        throw std::invalid_argument("build_split: fractions must sum to 1");
    }
    std::vector<Index> ids = dataset.class_ids();
    Rng rng(seed);
    rng.shuffle(std::span<Index>(ids));
    const auto n = static_cast<double>(ids.size());
    const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
    const auto n_val = std::min(static_cast<std::size_t>(std::llround(fractions[1] * n)), ids.size() - n_train);
    if (n_train == 0) throw std::invalid_argument("build_split: train partition is empty");
    ClassSplit split;
    split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                     ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
    return split;
}

Episode sample_episode(const Dataset& dataset, std::span<const Index> class_pool, Index n_way, Index k_shot,
                       Index n_query, Rng& rng) {
    if (n_way < 1 || k_shot < 1 || n_query < 0) throw std::invalid_argument("sample_episode: invalid N/K/U");
    if (static_cast<Index>(class_pool.size()) < n_way) {
        throw std::invalid_argument("sample_episode: " + std::to_string(n_way) + "-way episode needs " +
                                    std::to_string(n_way) + " classes, split has " +
                                    std::to_string(class_pool.size()) + " (short by " +
                                    std::to_string(n_way - static_cast<Index>(class_pool.size())) + ")");
    }
    std::vector<Index> pool(class_pool.begin(), class_pool.end());
    // Partial Fisher-Yates: the first n_way entries are a uniform sample without replacement.
    for (Index i = 0; i < n_way; ++i) {
        const Index j = i + rng.index(static_cast<Index>(pool.size()) - i);
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    Episode ep;
    ep.n_way = n_way;
    ep.k_shot = k_shot;
    ep.n_query = n_query;
    ep.class_ids.assign(pool.begin(), pool.begin() + n_way);
    std::vector<std::vector<Index>> picks;
    for (Index label = 0; label < n_way; ++label) {
        const auto& cls = dataset.by_id(ep.class_ids[static_cast<std::size_t>(label)]);
        const auto available = static_cast<Index>(cls.instances.size());
        if (available < k_shot + n_query) {
            throw std::invalid_argument("sample_episode: class " + std::to_string(cls.id) + " has " +
                                        std::to_string(available) + " instances, needs " +
                                        std::to_string(k_shot + n_query) + " (short by " +
                                        std::to_string(k_shot + n_query - available) + ")");
        }
        std::vector<Index> idx(static_cast<std::size_t>(available));
        std::iota(idx.begin(), idx.end(), Index{0});
        for (Index i = 0; i < k_shot + n_query; ++i) {
            const Index j = i + rng.index(available - i);
            std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        }
        idx.resize(static_cast<std::size_t>(k_shot + n_query));
        picks.push_back(std::move(idx));
    }
    for (Index label = 0; label < n_way; ++label) {
        const auto& p = picks[static_cast<std::size_t>(label)];
        for (Index k = 0; k < k_shot; ++k) {
            ep.support.push_back({ep.class_ids[static_cast<std::size_t>(label)], p[static_cast<std::size_t>(k)]});
            ep.support_labels.push_back(label);
        }
    }
    for (Index label = 0; label < n_way; ++label) {
        const auto& p = picks[static_cast<std::size_t>(label)];
        for (Index u = 0; u < n_query; ++u) {
            ep.query.push_back({ep.class_ids[static_cast<std::size_t>(label)], p[static_cast<std::size_t>(k_shot + u)]});
            ep.query_labels.push_back(label);
        }
    }
    return ep;
}

Tensor stack_instances(const Dataset& dataset, std::span<const InstanceRef> refs) {
    if (refs.empty()) throw std::invalid_argument("stack_instances: no instances");
    const Tensor& first = dataset.by_id(refs.front().class_id).instances.at(static_cast<std::size_t>(refs.front().instance));
    Shape shape{static_cast<Index>(refs.size())};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    Tensor out(shape);
    const Index stride = first.size();
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const Tensor& img = dataset.by_id(refs[i].class_id).instances.at(static_cast<std::size_t>(refs[i].instance));
        if (img.size() != stride) throw ShapeError("stack_instances: mixed image shapes");
        out.array().segment(static_cast<Index>(i) * stride, stride) = img.array();
    }
    return out;
}

}  // namespace tdm::data
