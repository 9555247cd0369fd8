#include "tdm/data/data.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tdm::data {
namespace {

constexpr Index kTemplateGrid = 6;

// Separate streams so the layout can be recomputed without regenerating images.
constexpr std::uint64_t kLayoutStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kTemplateStream = 0xbf58476d1ce4e5b9ULL;
constexpr std::uint64_t kInstanceStream = 0x94d049bb133111ebULL;

Tensor smooth_field(Index size, Rng& rng) {
    Tensor coarse(Shape{3, kTemplateGrid, kTemplateGrid});
    for (Index i = 0; i < coarse.size(); ++i) coarse[i] = rng.normal(0.0, 1.0);
    return resize_bilinear(coarse, size, size);
}

}  // namespace

void SynthConfig::validate() const {
    if (n_classes < 1 || instances_per_class < 1 || image_size < 1 || patch_size < 1 || patch_count_per_class < 1) {
        throw std::invalid_argument("synthetic config: counts must be positive");
    }
    if (patch_size >= image_size) throw std::invalid_argument("synthetic config: patch_size must be below image_size");
    if (jitter < 0 || noise_sigma < 0.0 || template_strength < 0.0 || template_variation < 0.0) {
        throw std::invalid_argument("synthetic config: jitter, noise and strengths must be nonnegative");
    }
}

std::vector<std::vector<PatchSpec>> synthetic_layout(const SynthConfig& config) {
    config.validate();
    Rng rng(config.seed ^ kLayoutStream);
    std::vector<std::vector<PatchSpec>> layout(static_cast<std::size_t>(config.n_classes));
    const Index span = config.image_size - config.patch_size;
    for (auto& patches : layout) {
        for (Index p = 0; p < config.patch_count_per_class; ++p) {
            PatchSpec spec;
            spec.y = rng.index(span + 1);
            spec.x = rng.index(span + 1);
            spec.sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
            double norm = 0.0;
            for (auto& c : spec.color) {
                c = rng.normal(0.0, 1.0);
                norm += c * c;
            }
            // unit-RMS colour so every patch has the same contrast
            norm = std::sqrt(norm / 3.0);
            for (auto& c : spec.color) c /= norm;
            patches.push_back(spec);
        }
    }
    return layout;
}

Tensor synthetic_patch_mask(const SynthConfig& config) {
    Tensor mask(Shape{config.image_size, config.image_size});
    for (const auto& patches : synthetic_layout(config)) {
        for (const auto& p : patches) {
            for (Index y = p.y; y < p.y + config.patch_size; ++y) {
                for (Index x = p.x; x < p.x + config.patch_size; ++x) mask.at(y, x) = 1.0;
            }
        }
    }
    return mask;
}

Dataset generate_synthetic(const SynthConfig& config) {
    const auto layout = synthetic_layout(config);
    const Index s = config.image_size;
    const Index area = s * s;

    Rng template_rng(config.seed ^ kTemplateStream);
    Tensor shared = smooth_field(s, template_rng);
    shared.array() *= config.template_strength;

    Rng rng(config.seed ^ kInstanceStream);
    Dataset ds;
    ds.image_size = s;
    for (Index c = 0; c < config.n_classes; ++c) {
        ClassRecord record;
        record.id = c;
        record.name = "synth_" + std::to_string(c);
        for (Index n = 0; n < config.instances_per_class; ++n) {
            Tensor img = shared;
            if (config.template_variation > 0.0) {
                img.array() *= rng.uniform(1.0 - config.template_variation, 1.0 + config.template_variation);
            }
            for (const auto& p : layout[static_cast<std::size_t>(c)]) {
                Index dy = 0;
                Index dx = 0;
                if (config.jitter > 0) {
                    dy = rng.index(2 * config.jitter + 1) - config.jitter;
                    dx = rng.index(2 * config.jitter + 1) - config.jitter;
                }
                const Index y0 = std::clamp<Index>(p.y + dy, 0, s - config.patch_size);
                const Index x0 = std::clamp<Index>(p.x + dx, 0, s - config.patch_size);
                for (Index ch = 0; ch < 3; ++ch) {
                    const double v = p.sign * p.color[static_cast<std::size_t>(ch)];
                    for (Index y = y0; y < y0 + config.patch_size; ++y) {
                        img.array().segment(ch * area + y * s + x0, config.patch_size) += v;
                    }
                }
            }
            if (config.noise_sigma > 0.0) {
                for (Index i = 0; i < img.size(); ++i) img[i] += rng.normal(0.0, config.noise_sigma);
            }
            record.instances.push_back(std::move(img));
        }
        ds.classes.push_back(std::move(record));
    }

    // Per-channel standardization over every pixel of every instance.
    for (Index ch = 0; ch < 3; ++ch) {
        double sum = 0.0;
        double count = 0.0;
        for (const auto& cls : ds.classes) {
            for (const auto& img : cls.instances) {
                sum += img.array().segment(ch * area, area).sum();
                count += static_cast<double>(area);
            }
        }
        const double mu = sum / count;
        double sq = 0.0;
        for (const auto& cls : ds.classes) {
            for (const auto& img : cls.instances) sq += (img.array().segment(ch * area, area) - mu).square().sum();
        }
        const double sd = std::sqrt(sq / count);
        const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
        for (auto& cls : ds.classes) {
            for (auto& img : cls.instances) {
                img.array().segment(ch * area, area) = (img.array().segment(ch * area, area) - mu) * inv;
            }
        }
    }
    return ds;
}

}  // namespace tdm::data
