#include "support.hpp"

#include "tdm/harness/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace tdm;
using namespace tdm::harness;
using tdm::test::random_tensor;

namespace {

ModelConfig small_config(bool sam, bool qam, bool iam) {
    ModelConfig cfg;
    cfg.channels = 8;
    cfg.tdm.sam = sam;
    cfg.tdm.qam = qam;
    cfg.tdm.iam = iam;
    return cfg;
}

EpisodeBatch random_batch(Index n_way, Index k_shot, Index n_query, Index size, Rng& rng) {
    EpisodeBatch batch;
    batch.n_way = n_way;
    batch.k_shot = k_shot;
    batch.support = random_tensor({n_way * k_shot, 3, size, size}, rng);
    batch.query = random_tensor({n_way * n_query, 3, size, size}, rng);
    for (Index i = 0; i < n_way; ++i) {
        for (Index u = 0; u < n_query; ++u) batch.query_labels.push_back(i);
    }
    return batch;
}

/// Pushes every batch-norm running statistic and FC output bias off its init so
/// eval-mode attention is not near-identity.
void perturb(Model& model, Rng& rng) {
    for (auto& [name, buffer] : model.buffers()) {
        const bool var = name.find("running_var") != std::string::npos;
        for (Index i = 0; i < buffer->size(); ++i) (*buffer)[i] = var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.3, 0.3);
    }
    for (auto* block : {&model.b_intra, &model.b_inter, &model.b_query}) {
        block->b2.mutable_value() = random_tensor({model.config.channels}, rng, -0.5, 0.5);
    }
    for (auto& slot : model.backbone.iam) {
        if (slot) slot->b2.mutable_value() = random_tensor({model.config.channels}, rng, -0.5, 0.5);
    }
}

}  // namespace

TEST_SUITE("backbone") {
    TEST_CASE("spatial extent halves four times") {
        CHECK(backbone::output_extent(84) == 5);
        CHECK(backbone::output_extent(32) == 2);
        CHECK(backbone::output_extent(16) == 1);
    }

    TEST_CASE("inputs below 16 pixels fail") {
        Rng rng(3);
        auto params = backbone::init_backbone(rng, 8);
        CHECK_THROWS(backbone::extract(params, constant(Tensor({1, 3, 15, 15})), Mode::eval, false, rng, {}));
    }

    TEST_CASE("84x84 input gives 64x5x5 features") {
        Rng rng(1);
        auto params = backbone::init_backbone(rng);
        NoGradGuard no_grad;
        const auto f = backbone::extract(params, constant(random_tensor({1, 3, 84, 84}, rng)), Mode::eval, true, rng, {});
        CHECK(f.shape() == Shape{1, 64, 5, 5});
    }

    TEST_CASE("32x32 input gives 64x2x2 features") {
        Rng rng(2);
        auto params = backbone::init_backbone(rng);
        const auto f = backbone::extract(params, constant(random_tensor({2, 3, 32, 32}, rng)), Mode::eval, false, rng, {});
        CHECK(f.shape() == Shape{2, 64, 2, 2});
    }

    TEST_CASE("wrong input channels fail") {
        Rng rng(3);
        auto params = backbone::init_backbone(rng, 8);
        CHECK_THROWS(backbone::extract(params, constant(Tensor({1, 1, 16, 16})), Mode::eval, false, rng, {}));
    }

    TEST_CASE("init is seeded and bounded by the fan-in rule") {
        Rng a(4), b(4);
        const auto p = backbone::init_backbone(a, 16);
        const auto q = backbone::init_backbone(b, 16);
        for (std::size_t i = 0; i < p.blocks.size(); ++i) {
            CHECK(p.blocks[i].kernel.value() == q.blocks[i].kernel.value());
            const auto& k = p.blocks[i].kernel.value();
            const double bound = std::sqrt(1.0 / static_cast<double>(k.dim(1) * 9));
            CHECK(k.array().abs().maxCoeff() <= bound);
            CHECK(p.blocks[i].bn.running_var == Tensor::ones({16}));
            CHECK(p.blocks[i].bn.running_mean == Tensor::zeros({16}));
        }
        CHECK(p.blocks[0].kernel.shape() == Shape{16, 3, 3, 3});
        CHECK(p.blocks[1].kernel.shape() == Shape{16, 16, 3, 3});
        CHECK(p.iam_blocks() == std::vector<Index>{1, 2});
    }

    TEST_CASE("zeros in eval mode stay finite") {
        Rng rng(5);
        auto params = backbone::init_backbone(rng, 8);
        const auto f = backbone::extract(params, constant(Tensor::zeros({1, 3, 16, 16})), Mode::eval, true, rng, {});
        CHECK(f.value().array().isFinite().all());
    }

    TEST_CASE("unit IAM weights match the IAM-free path bitwise") {
        Rng rng(6);
        auto params = backbone::init_backbone(rng, 8);
        for (auto& slot : params.iam) {
            if (!slot) continue;
            slot->w2.mutable_value().array() = 0.0;
            slot->b2.mutable_value().array() = 0.0;
        }
        const auto x = constant(random_tensor({3, 3, 32, 32}, rng));
        const auto with = backbone::extract(params, x, Mode::eval, true, rng, {}).value();
        const auto without = backbone::extract(params, x, Mode::eval, false, rng, {}).value();
        CHECK(with == without);
    }

    TEST_CASE("eval extraction is deterministic") {
        Rng rng(7);
        auto params = backbone::init_backbone(rng, 8);
        const auto x = constant(random_tensor({2, 3, 32, 32}, rng));
        Rng r1(1), r2(2);
        CHECK(backbone::extract(params, x, Mode::eval, true, r1, {}).value() ==
              backbone::extract(params, x, Mode::eval, true, r2, {}).value());
    }
}

TEST_SUITE("pipeline") {
    TEST_CASE("everything off equals the prototype network bitwise") {
        Rng rng(8);
        auto model = make_model(small_config(false, false, false), 3);
        perturb(model, rng);
        const auto batch = random_batch(5, 2, 3, 16, rng);
        const auto full = forward_episode(model, batch, Mode::eval, rng);
        const auto plain = protonet_logits(model, batch, Mode::eval, rng);
        CHECK(full.logits.value() == plain.value());
        CHECK(full.task_weights.value() == Tensor::ones({15, 5, 8}));
    }

    TEST_CASE("probabilities are a simplex") {
        Rng rng(9);
        auto model = make_model(small_config(true, true, true), 4);
        perturb(model, rng);
        const auto out = forward_episode(model, random_batch(4, 1, 3, 16, rng), Mode::eval, rng);
        for (Index q = 0; q < 12; ++q) {
            double total = 0.0;
            for (Index i = 0; i < 4; ++i) {
                CHECK(out.probabilities.at(q, i) > 0.0);
                total += out.probabilities.at(q, i);
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
        }
    }

    TEST_CASE("permuting the class order permutes the probabilities") {
        Rng rng(10);
        auto model = make_model(small_config(true, true, true), 5);
        perturb(model, rng);
        for (int trial = 0; trial < 5; ++trial) {
            const Index n = 4, k = 2, u = 2;
            auto batch = random_batch(n, k, u, 16, rng);
            std::vector<Index> perm(static_cast<std::size_t>(n));
            std::iota(perm.begin(), perm.end(), 0);
            rng.shuffle(std::span<Index>(perm));

            // New class position j holds old class perm[j]; queries keep their order.
            EpisodeBatch permuted = batch;
            const Index stride = batch.support.size() / (n * k) * k;
            for (Index j = 0; j < n; ++j) {
                permuted.support.array().segment(j * stride, stride) =
                    batch.support.array().segment(perm[static_cast<std::size_t>(j)] * stride, stride);
            }
            for (auto& label : permuted.query_labels) {
                label = std::find(perm.begin(), perm.end(), label) - perm.begin();
            }
            const auto a = forward_episode(model, batch, Mode::eval, rng).probabilities;
            const auto b = forward_episode(model, permuted, Mode::eval, rng).probabilities;
            for (Index q = 0; q < n * u; ++q) {
                for (Index j = 0; j < n; ++j) CHECK(b.at(q, j) == doctest::Approx(a.at(q, perm[static_cast<std::size_t>(j)])).epsilon(1e-12));
            }
        }
    }

    TEST_CASE("every attention parameter receives a gradient") {
        Rng rng(11);
        auto model = make_model(small_config(true, true, true), 6);
        const auto out = forward_episode(model, random_batch(3, 1, 2, 16, rng), Mode::train, rng);
        backward(out.loss);
        for (const auto& [name, var] : model.parameters()) {
            INFO(name);
            REQUIRE(var.node()->has_grad());
            CHECK(var.grad().array().abs().maxCoeff() > 0.0);
        }
    }

    TEST_CASE("disabled modules leave their blocks without gradient") {
        Rng rng(12);
        auto model = make_model(small_config(false, true, false), 7);
        const auto out = forward_episode(model, random_batch(3, 1, 2, 16, rng), Mode::train, rng);
        backward(out.loss);
        CHECK_FALSE(model.b_intra.w1.node()->has_grad());
        CHECK(model.b_query.w1.node()->has_grad());
        CHECK_FALSE(model.backbone.iam[0]->w1.node()->has_grad());
    }

    TEST_CASE("one-class episode is rejected by support attention") {
        Rng rng(13);
        auto model = make_model(small_config(true, false, false), 8);
        CHECK_THROWS_AS(forward_episode(model, random_batch(1, 1, 2, 16, rng), Mode::eval, rng), std::invalid_argument);
    }

    TEST_CASE("ablation variants from one seed share initial weights") {
        const auto a = make_model(small_config(false, false, false), 9);
        const auto b = make_model(small_config(true, true, true), 9);
        const auto pa = a.parameters(), pb = b.parameters();
        REQUIRE(pa.size() == pb.size());
        for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second.value() == pb[i].second.value());
    }
}

TEST_SUITE("checkpoint") {
    TEST_CASE("save and load reproduce the eval forward pass") {
        Rng rng(14);
        auto cfg = small_config(true, true, true);
        cfg.head.metric = head::Metric::cosine;
        cfg.tdm.alpha = 0.25;
        auto model = make_model(cfg, 10);
        perturb(model, rng);
        const auto stem = test::scratch_dir("ckpt") / "model";
        save_checkpoint(model, stem);
        auto back = load_checkpoint(stem);
        CHECK(back.config.tdm.alpha == 0.25);
        CHECK(back.config.head.metric == head::Metric::cosine);
        const auto batch = random_batch(3, 1, 2, 16, rng);
        CHECK(forward_episode(model, batch, Mode::eval, rng).logits.value() ==
              forward_episode(back, batch, Mode::eval, rng).logits.value());
    }

    TEST_CASE("snapshot and restore") {
        Rng rng(15);
        auto model = make_model(small_config(true, true, true), 11);
        const auto saved = snapshot(model);
        perturb(model, rng);
        model.backbone.blocks[0].kernel.mutable_value().array() += 1.0;
        restore(model, saved);
        const auto fresh = make_model(small_config(true, true, true), 11);
        CHECK(model.backbone.blocks[0].kernel.value() == fresh.backbone.blocks[0].kernel.value());
        CHECK(model.b_query.b2.value() == fresh.b_query.b2.value());
    }
}
