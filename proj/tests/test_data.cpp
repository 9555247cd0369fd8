#include "support.hpp"

#include "tdm/data/data.hpp"
#include "tdm/log.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <tuple>

using namespace tdm;
using namespace tdm::data;

namespace {

Dataset toy_dataset(Index classes, Index instances, Index size = 4) {
    Dataset ds;
    ds.image_size = size;
    Rng rng(17);
    for (Index c = 0; c < classes; ++c) {
        ClassRecord rec;
        rec.id = c;
        rec.name = "class" + std::to_string(c);
        for (Index i = 0; i < instances; ++i) rec.instances.push_back(test::random_tensor({3, size, size}, rng));
        ds.classes.push_back(std::move(rec));
    }
    return ds;
}

SynthConfig small_synth() {
    SynthConfig cfg;
    cfg.n_classes = 6;
    cfg.instances_per_class = 5;
    cfg.image_size = 32;
    cfg.patch_size = 6;
    cfg.seed = 3;
    return cfg;
}

double squared_distance(const Tensor& a, const Tensor& b, const Tensor* mask) {
    const Index plane = a.dim(1) * a.dim(2);
    double acc = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        const double w = mask ? (*mask)[i % plane] : 1.0;
        const double d = a[i] - b[i];
        acc += w * d * d;
    }
    return acc;
}

/// Nearest-template classifiers with instance 0 of each class as the template:
/// raw pixels versus pixels inside the patch footprint. Returns (raw, masked, total).
std::tuple<Index, Index, Index> template_classifiers(const SynthConfig& cfg) {
    const auto ds = generate_synthetic(cfg);
    const auto mask = synthetic_patch_mask(cfg);
    Index raw_correct = 0, masked_correct = 0, total = 0;
    for (const auto& rec : ds.classes) {
        for (std::size_t i = 1; i < rec.instances.size(); ++i) {
            Index raw_best = -1, masked_best = -1;
            double raw_d = std::numeric_limits<double>::infinity(), masked_d = raw_d;
            for (const auto& other : ds.classes) {
                const double r = squared_distance(rec.instances[i], other.instances[0], nullptr);
                const double m = squared_distance(rec.instances[i], other.instances[0], &mask);
                if (r < raw_d) raw_d = r, raw_best = other.id;
                if (m < masked_d) masked_d = m, masked_best = other.id;
            }
            raw_correct += raw_best == rec.id;
            masked_correct += masked_best == rec.id;
            ++total;
        }
    }
    return {raw_correct, masked_correct, total};
}

}  // namespace

TEST_SUITE("split") {
    TEST_CASE("rounded fractions give 5/2/3 of ten classes") {
        const auto ds = toy_dataset(10, 2);
        const auto split = build_split(ds, {0.5, 0.2, 0.3}, 4);
        CHECK(split.train.size() == 5);
        CHECK(split.val.size() == 2);
        CHECK(split.test.size() == 3);

        std::set<Index> all(split.train.begin(), split.train.end());
        all.insert(split.val.begin(), split.val.end());
        all.insert(split.test.begin(), split.test.end());
        CHECK(all.size() == 10);
    }

    TEST_CASE("split is a function of the seed") {
        const auto ds = toy_dataset(12, 2);
        const auto a = build_split(ds, {0.5, 0.25, 0.25}, 9);
        const auto b = build_split(ds, {0.5, 0.25, 0.25}, 9);
        CHECK(a.train == b.train);
        CHECK(a.val == b.val);
        CHECK(a.test == b.test);
    }

    TEST_CASE("empty train part is rejected, empty val is not") {
        const auto ds = toy_dataset(4, 2);
        CHECK_THROWS_AS(build_split(ds, {0.0, 0.5, 0.5}, 1), std::invalid_argument);
        const auto split = build_split(ds, {1.0, 0.0, 0.0}, 1);
        CHECK(split.train.size() == 4);
        CHECK(split.val.empty());
    }

    TEST_CASE("fractions must sum to one") {
        const auto ds = toy_dataset(4, 2);
        CHECK_THROWS_AS(build_split(ds, {0.5, 0.5, 0.5}, 1), std::invalid_argument);
    }
}

TEST_SUITE("episodes") {
    TEST_CASE("5-way 1-shot with 16 queries") {
        const auto ds = toy_dataset(8, 20);
        const auto ids = ds.class_ids();
        Rng rng(2);
        const auto ep = sample_episode(ds, ids, 5, 1, 16, rng);
        CHECK(ep.support.size() == 5);
        CHECK(ep.query.size() == 80);
        CHECK(ep.support_labels.size() == 5);
        CHECK(ep.query_labels.size() == 80);
    }

    TEST_CASE("exhaustion case uses every instance once") {
        const auto ds = toy_dataset(2, 2);
        const auto ids = ds.class_ids();
        Rng rng(5);
        const auto ep = sample_episode(ds, ids, 2, 1, 1, rng);
        std::vector<InstanceRef> used = ep.support;
        used.insert(used.end(), ep.query.begin(), ep.query.end());
        CHECK(used.size() == 4);
        for (std::size_t i = 0; i < used.size(); ++i) {
            for (std::size_t j = i + 1; j < used.size(); ++j) CHECK_FALSE(used[i] == used[j]);
        }
    }

    TEST_CASE("labels partition into N groups of K and of U, support and query disjoint") {
        const auto ds = toy_dataset(9, 12);
        const auto ids = ds.class_ids();
        Rng rng(11);
        for (int trial = 0; trial < 25; ++trial) {
            const Index n = 2 + rng.index(4), k = 1 + rng.index(3), u = 1 + rng.index(5);
            const auto ep = sample_episode(ds, ids, n, k, u, rng);
            for (Index label = 0; label < n; ++label) {
                CHECK(std::count(ep.support_labels.begin(), ep.support_labels.end(), label) == k);
                CHECK(std::count(ep.query_labels.begin(), ep.query_labels.end(), label) == u);
            }
            for (std::size_t s = 0; s < ep.support.size(); ++s) {
                CHECK(ep.support[s].class_id == ep.class_ids[static_cast<std::size_t>(ep.support_labels[s])]);
                for (const auto& q : ep.query) CHECK_FALSE(ep.support[s] == q);
            }
            std::set<Index> distinct(ep.class_ids.begin(), ep.class_ids.end());
            CHECK(static_cast<Index>(distinct.size()) == n);
        }
    }

    TEST_CASE("test-part sampling never touches other parts") {
        const auto ds = toy_dataset(12, 6);
        const auto split = build_split(ds, {0.5, 0.25, 0.25}, 21);
        const std::set<Index> test_ids(split.test.begin(), split.test.end());
        Rng rng(8);
        for (int trial = 0; trial < 30; ++trial) {
            const auto ep = sample_episode(ds, split.test, 3, 1, 2, rng);
            for (Index id : ep.class_ids) CHECK(test_ids.count(id) == 1);
        }
    }

    TEST_CASE("fixed seed gives an identical episode") {
        const auto ds = toy_dataset(8, 10);
        const auto ids = ds.class_ids();
        Rng a(99), b(99);
        const auto e1 = sample_episode(ds, ids, 5, 2, 3, a);
        const auto e2 = sample_episode(ds, ids, 5, 2, 3, b);
        CHECK(e1.class_ids == e2.class_ids);
        CHECK(e1.support == e2.support);
        CHECK(e1.query == e2.query);
    }

    TEST_CASE("deficits are named") {
        const auto ds = toy_dataset(3, 4);
        const auto ids = ds.class_ids();
        Rng rng(1);
        std::string message;
        try {
            sample_episode(ds, ids, 5, 1, 1, rng);
        } catch (const std::invalid_argument& e) {
            message = e.what();
        }
        CHECK(message.find("short by 2") != std::string::npos);

        message.clear();
        try {
            sample_episode(ds, ids, 2, 2, 3, rng);
        } catch (const std::invalid_argument& e) {
            message = e.what();
        }
        CHECK(message.find("has 4 instances, needs 5") != std::string::npos);
    }

    TEST_CASE("stacking preserves order") {
        const auto ds = toy_dataset(2, 3);
        const std::vector<InstanceRef> refs{{1, 2}, {0, 0}};
        const auto batch = stack_instances(ds, refs);
        CHECK(batch.shape() == Shape{2, 3, 4, 4});
        CHECK(batch[0] == ds.classes[1].instances[2][0]);
        CHECK(batch[48] == ds.classes[0].instances[0][0]);
    }
}

TEST_SUITE("synthetic") {
    TEST_CASE("shape and counts") {
        const auto cfg = small_synth();
        const auto ds = generate_synthetic(cfg);
        CHECK(ds.class_count() == 6);
        CHECK(ds.min_instances() == 5);
        CHECK(ds.classes[0].instances[0].shape() == Shape{3, 32, 32});
    }

    TEST_CASE("same seed gives identical data") {
        const auto a = generate_synthetic(small_synth());
        const auto b = generate_synthetic(small_synth());
        CHECK(a.classes[3].instances[2] == b.classes[3].instances[2]);
    }

    TEST_CASE("channels are normalized over the dataset") {
        const auto ds = generate_synthetic(small_synth());
        for (Index c = 0; c < 3; ++c) {
            double sum = 0.0, sq = 0.0, n = 0.0;
            for (const auto& rec : ds.classes) {
                for (const auto& img : rec.instances) {
                    for (Index p = 0; p < 32 * 32; ++p) {
                        const double v = img[c * 32 * 32 + p];
                        sum += v;
                        sq += v * v;
                        n += 1.0;
                    }
                }
            }
            CHECK(sum / n == doctest::Approx(0.0).epsilon(1e-9));
            CHECK(sq / n == doctest::Approx(1.0).epsilon(1e-9));
        }
    }

    TEST_CASE("noise-free unjittered instances of a class are identical") {
        auto cfg = small_synth();
        cfg.noise_sigma = 0.0;
        cfg.jitter = 0;
        const auto ds = generate_synthetic(cfg);
        for (const auto& rec : ds.classes) {
            for (const auto& img : rec.instances) CHECK(img == rec.instances[0]);
        }
    }

    TEST_CASE("without a template, classes differ only inside patches") {
        auto cfg = small_synth();
        cfg.template_strength = 0.0;
        cfg.noise_sigma = 0.0;
        cfg.jitter = 0;
        const auto ds = generate_synthetic(cfg);
        const auto mask = synthetic_patch_mask(cfg);
        const Index plane = 32 * 32;
        double outside = 0.0, inside = 0.0;
        for (Index i = 0; i < 3 * plane; ++i) {
            const double d = std::abs(ds.classes[0].instances[0][i] - ds.classes[1].instances[0][i]);
            (mask[i % plane] > 0.0 ? inside : outside) += d;
        }
        CHECK(outside == doctest::Approx(0.0));
        CHECK(inside > 0.0);
    }

    TEST_CASE("layout stays inside the image") {
        const auto cfg = small_synth();
        const auto layout = synthetic_layout(cfg);
        CHECK(static_cast<Index>(layout.size()) == cfg.n_classes);
        for (const auto& patches : layout) {
            CHECK(static_cast<Index>(patches.size()) == cfg.patch_count_per_class);
            for (const auto& p : patches) {
                CHECK(p.y >= 0);
                CHECK(p.x >= 0);
                CHECK(p.y + cfg.patch_size <= cfg.image_size);
                CHECK(p.x + cfg.patch_size <= cfg.image_size);
            }
        }
    }

    TEST_CASE("invalid configs are rejected") {
        auto cfg = small_synth();
        cfg.patch_size = 32;
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
        cfg = small_synth();
        cfg.n_classes = 0;
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    }

    TEST_CASE("patch-masked nearest template is at least as accurate as the raw-pixel one") {
        // Both saturate on the default config; the noisier config separates them.
        const auto [raw_default, masked_default, total_default] = template_classifiers(SynthConfig{});
        MESSAGE("default: raw ", raw_default, ", masked ", masked_default, " of ", total_default);
        CHECK(raw_default <= masked_default);

        SynthConfig noisy;
        noisy.noise_sigma = 1.5;
        const auto [raw, masked, total] = template_classifiers(noisy);
        MESSAGE("noisy: raw ", raw, ", masked ", masked, " of ", total);
        CHECK(raw < masked);
    }

    TEST_CASE("save and load round trip") {
        const auto cfg = small_synth();
        const auto ds = generate_synthetic(cfg);
        const auto dir = test::scratch_dir("synth_roundtrip");
        save_dataset(dir, ds, &cfg);
        const auto back = load_dataset(dir);
        REQUIRE(back.class_count() == ds.class_count());
        CHECK(back.image_size == ds.image_size);
        CHECK(back.classes[4].name == ds.classes[4].name);
        CHECK(back.classes[4].instances[3] == ds.classes[4].instances[3]);
    }
}

TEST_SUITE("image folder") {
    TEST_CASE("two folders of three files") {
        const auto root = test::scratch_dir("folder");
        Rng rng(4);
        for (const char* name : {"a", "b"}) {
            std::filesystem::create_directories(root / name);
            for (int i = 0; i < 3; ++i) {
                write_ppm(root / name / ("img" + std::to_string(i) + ".ppm"), test::random_tensor({3, 10, 12}, rng, 0.0, 1.0));
            }
        }
        const auto ds = load_image_folder(root, 8);
        REQUIRE(ds.class_count() == 2);
        CHECK(ds.classes[0].name == "a");
        CHECK(ds.classes[0].instances.size() == 3);
        CHECK(ds.classes[1].instances.size() == 3);
        CHECK(ds.classes[1].instances[2].shape() == Shape{3, 8, 8});

        const auto again = load_image_folder(root, 8);
        CHECK(again.classes[1].instances[1] == ds.classes[1].instances[1]);
    }

    TEST_CASE("unreadable files are skipped with a warning") {
        const auto root = test::scratch_dir("folder_bad");
        Rng rng(4);
        std::filesystem::create_directories(root / "a");
        std::filesystem::create_directories(root / "b");
        write_ppm(root / "a" / "x.ppm", test::random_tensor({3, 4, 4}, rng, 0.0, 1.0));
        write_ppm(root / "b" / "x.ppm", test::random_tensor({3, 4, 4}, rng, 0.0, 1.0));
        std::ofstream(root / "b" / "y.ppm") << "not an image";
        clear_warnings();
        const auto ds = load_image_folder(root, 4);
        CHECK(ds.classes[1].instances.size() == 1);
        CHECK(warning_count() == 1);
        clear_warnings();
    }

    TEST_CASE("empty directory fails") {
        const auto root = test::scratch_dir("folder_empty");
        CHECK_THROWS(load_image_folder(root, 8));
        std::filesystem::create_directories(root / "only");
        CHECK_THROWS(load_image_folder(root, 8));
    }

    TEST_CASE("ppm round trip at 8-bit resolution") {
        const auto dir = test::scratch_dir("ppm");
        Rng rng(6);
        const auto img = test::random_tensor({3, 5, 7}, rng, 0.0, 1.0);
        write_ppm(dir / "x.ppm", img);
        const auto back = read_ppm(dir / "x.ppm");
        CHECK(back.shape() == img.shape());
        CHECK(oracles::max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-12);
    }

    TEST_CASE("bilinear resize of a constant is constant and identity at equal size") {
        const auto flat = Tensor::constant({3, 4, 6}, 0.25);
        const auto big = resize_bilinear(flat, 9, 5);
        CHECK(big.shape() == Shape{3, 9, 5});
        for (Index i = 0; i < big.size(); ++i) CHECK(big[i] == doctest::Approx(0.25));

        Rng rng(2);
        const auto img = test::random_tensor({3, 4, 4}, rng);
        CHECK(oracles::max_abs_diff(resize_bilinear(img, 4, 4), img) < 1e-12);
    }
}

TEST_SUITE("augment") {
    TEST_CASE("all flags off is the identity") {
        Rng rng(1);
        const auto img = test::random_tensor({3, 8, 8}, rng);
        CHECK(augment(img, rng, AugmentFlags{}) == img);
    }

    TEST_CASE("flip is an involution") {
        Rng rng(1);
        const auto img = test::random_tensor({3, 6, 5}, rng);
        AugmentFlags flags;
        flags.flip = true;
        flags.flip_probability = 1.0;
        const auto once = augment(img, rng, flags);
        CHECK(once.at(1, 2, 0) == img.at(1, 2, 4));
        CHECK(augment(once, rng, flags) == img);
        CHECK(flip_horizontal(flip_horizontal(img)) == img);
    }

    TEST_CASE("fixed seed gives identical augmentation") {
        Rng src(1);
        const auto img = test::random_tensor({3, 8, 8}, src);
        AugmentFlags flags;
        flags.flip = flags.crop = flags.jitter = true;
        Rng a(44), b(44);
        CHECK(augment(img, a, flags) == augment(img, b, flags));
        CHECK(augment(img, a, flags).shape() == img.shape());
    }
}
