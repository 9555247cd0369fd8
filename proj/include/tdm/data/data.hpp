#pragma once

#include "tdm/numeric/rng.hpp"
#include "tdm/numeric/tensor.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tdm::data {

struct ClassRecord {
    Index id = 0;
    std::string name;
    std::vector<Tensor> instances;  // each 3xSxS
};

struct Dataset {
    std::vector<ClassRecord> classes;
    Index image_size = 0;

    Index class_count() const { return static_cast<Index>(classes.size()); }
    const ClassRecord& by_id(Index id) const;
    std::vector<Index> class_ids() const;
    Index min_instances() const;
};

struct ClassSplit {
    std::vector<Index> train;
    std::vector<Index> val;
    std::vector<Index> test;
};

enum class SplitPart { train, val, test };

std::span<const Index> part(const ClassSplit& split, SplitPart which);
std::string to_string(SplitPart which);

/// Shuffles class ids with `seed`, then cuts train/val by rounded fractions;
/// test takes the remainder. Rejects an empty train part.
ClassSplit build_split(const Dataset& dataset, std::array<double, 3> fractions, std::uint64_t seed);

struct InstanceRef {
    Index class_id = 0;
    Index instance = 0;
    friend bool operator==(const InstanceRef&, const InstanceRef&) = default;
};

/// One N-way K-shot task. Support and query are class-major; labels are the
/// position of the class in class_ids.
struct Episode {
    Index n_way = 0;
    Index k_shot = 0;
    Index n_query = 0;
    std::vector<Index> class_ids;
    std::vector<InstanceRef> support;
    std::vector<Index> support_labels;
    std::vector<InstanceRef> query;
    std::vector<Index> query_labels;
};

Episode sample_episode(const Dataset& dataset, std::span<const Index> class_pool, Index n_way, Index k_shot,
                       Index n_query, Rng& rng);

/// Stacks referenced instances into a Bx3xSxS batch.
Tensor stack_instances(const Dataset& dataset, std::span<const InstanceRef> refs);

// ---- synthetic fine-grained data -------------------------------------------

struct SynthConfig {
    Index n_classes = 20;
    Index instances_per_class = 40;
    Index image_size = 84;
    double template_strength = 1.0;
    Index patch_size = 12;
    Index patch_count_per_class = 3;
    Index jitter = 2;
    double noise_sigma = 0.3;
    std::uint64_t seed = 0;
    /// Per-instance amplitude variation of the shared template, Uniform(1-v, 1+v).
    double template_variation = 0.0;

    void validate() const;
};

struct PatchSpec {
    Index y = 0;  // top-left
    Index x = 0;
    double sign = 1.0;
    std::array<double, 3> color{};
};

/// Class-specific patch layout drawn from the config seed.
std::vector<std::vector<PatchSpec>> synthetic_layout(const SynthConfig& config);

/// SxS mask, 1 inside any class's patch footprint (before jitter), else 0.
Tensor synthetic_patch_mask(const SynthConfig& config);

/// Shared smooth template plus class-specific high-contrast patches, per-instance
/// jitter and Gaussian noise; channels normalized over the whole dataset.
Dataset generate_synthetic(const SynthConfig& config);

/// images.tnsr (all instances stacked, class-major) + manifest.json.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, const SynthConfig* config = nullptr);
Dataset load_dataset(const std::filesystem::path& dir);

// ---- image folders ---------------------------------------------------------

/// 8-bit binary PPM (P6) as a 3xHxW tensor with values in [0,1].
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);

/// Bilinear resize with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& image, Index height, Index width);

/// Each subdirectory is a class of .ppm files (sorted by name); images are
/// resized to image_size and normalized per channel over the dataset.
Dataset load_image_folder(const std::filesystem::path& root, Index image_size = 84);

// ---- augmentation ----------------------------------------------------------

struct AugmentFlags {
    bool flip = false;
    bool crop = false;
    bool jitter = false;
    double flip_probability = 0.5;
    Index crop_padding = 4;
    double jitter_range = 0.1;

    bool any() const { return flip || crop || jitter; }
};

Tensor flip_horizontal(const Tensor& image);
Tensor augment(const Tensor& image, Rng& rng, const AugmentFlags& flags);

}  // namespace tdm::data
