#include "tdm/harness/model.hpp"

#include "tdm/numeric/serialize.hpp"
#include "tdm/scores/scores.hpp"

#include <json.hpp>

#include <fstream>
#include <map>
#include <stdexcept>

namespace tdm::harness {

std::vector<attention::NamedVar> Model::parameters() const {
    std::vector<attention::NamedVar> out;
    backbone.collect_parameters(out);
    b_intra.collect_parameters("sam.intra", out);
    b_inter.collect_parameters("sam.inter", out);
    b_query.collect_parameters("qam", out);
    return out;
}

std::vector<attention::NamedTensor> Model::buffers() {
    std::vector<attention::NamedTensor> out;
    backbone.collect_buffers(out);
    b_intra.collect_buffers("sam.intra", out);
    b_inter.collect_buffers("sam.inter", out);
    b_query.collect_buffers("qam", out);
    return out;
}

Model make_model(const ModelConfig& config, std::uint64_t seed) {
    config.tdm.validate();
    Rng rng(seed);
    Model model{config, backbone::init_backbone(rng, config.channels, config.iam_blocks), {}, {}, {}};
    model.b_intra = attention::FcBlock::make(config.channels, rng);
    model.b_inter = attention::FcBlock::make(config.channels, rng);
    model.b_query = attention::FcBlock::make(config.channels, rng);
    return model;
}

EpisodeBatch make_batch(const data::Dataset& dataset, const data::Episode& episode, Rng* augment_rng,
                        const data::AugmentFlags& flags) {
    EpisodeBatch batch;
    batch.support = data::stack_instances(dataset, episode.support);
    batch.query = data::stack_instances(dataset, episode.query);
    batch.query_labels = episode.query_labels;
    batch.n_way = episode.n_way;
    batch.k_shot = episode.k_shot;
    if (augment_rng && flags.any()) {
        for (Tensor* t : {&batch.support, &batch.query}) {
            const Index stride = t->size() / t->dim(0);
            const Shape image_shape(t->shape().begin() + 1, t->shape().end());
            for (Index i = 0; i < t->dim(0); ++i) {
                Tensor img(image_shape, Tensor::Array(t->array().segment(i * stride, stride)));
                t->array().segment(i * stride, stride) = data::augment(img, *augment_rng, flags).array();
            }
        }
    }
    return batch;
}

namespace {

Var episode_features(Model& model, const EpisodeBatch& batch, Mode mode, bool iam, Rng& rng) {
    Shape shape = batch.support.shape();
    shape[0] += batch.query.dim(0);
    Tensor images(shape);
    images.array().head(batch.support.size()) = batch.support.array();
    images.array().tail(batch.query.size()) = batch.query.array();
    return backbone::extract(model.backbone, constant(std::move(images)), mode, iam, rng, model.config.tdm);
}

}  // namespace

EpisodeForward forward_episode(Model& model, const EpisodeBatch& batch, Mode mode, Rng& rng) {
    const auto& cfg = model.config.tdm;
    const Index ns = batch.support.dim(0);
    const Index nq = batch.query.dim(0);
    EpisodeForward out;
    out.features = episode_features(model, batch, mode, cfg.iam, rng);
    const Var support = slice(out.features, 0, ns);
    const Var query = slice(out.features, ns, ns + nq);
    out.prototypes = scores::prototypes(support, batch.n_way, batch.k_shot);

    Var w_support;
    if (cfg.sam) {
        out.support_weights = attention::sam(out.prototypes, model.b_intra, model.b_inter, cfg, mode, rng);
        w_support = out.support_weights.support;
    }
    if (cfg.qam) out.query_weights = attention::qam(query, model.b_query, mode, rng, cfg);
    out.task_weights = attention::compose_task_weights(w_support, out.query_weights, cfg.beta, batch.n_way, nq,
                                                       out.features.dim(1));
    out.logits = neg(head::task_adaptive_distances(out.prototypes, query, out.task_weights, model.config.head));
    auto ce = softmax_cross_entropy(out.logits, batch.query_labels);
    out.loss = ce.loss;
    out.probabilities = std::move(ce.probabilities);
    out.accuracy = head::episode_accuracy(out.logits.value(), batch.query_labels);
    return out;
}

Var protonet_logits(Model& model, const EpisodeBatch& batch, Mode mode, Rng& rng) {
    const Index ns = batch.support.dim(0);
    const Var features = episode_features(model, batch, mode, false, rng);
    const Var protos = scores::prototypes(slice(features, 0, ns), batch.n_way, batch.k_shot);
    return neg(head::protonet_distances(protos, slice(features, ns, features.dim(0)), model.config.head));
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"channels", c.channels},
            {"iam_blocks", c.iam_blocks},
            {"alpha", c.tdm.alpha},
            {"beta", c.tdm.beta},
            {"noise_half_width", c.tdm.noise_half_width},
            {"clamp_lo", c.tdm.clamp_lo},
            {"clamp_hi", c.tdm.clamp_hi},
            {"sam", c.tdm.sam},
            {"qam", c.tdm.qam},
            {"iam", c.tdm.iam},
            {"metric", head::to_string(c.head.metric)},
            {"temperature", c.head.temperature},
            {"distance_on", c.head.distance_on == head::DistanceOn::pooled ? "pooled" : "flattened"}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.channels = j.at("channels").get<Index>();
    c.iam_blocks = j.at("iam_blocks").get<std::vector<Index>>();
    c.tdm.alpha = j.at("alpha").get<double>();
    c.tdm.beta = j.at("beta").get<double>();
    c.tdm.noise_half_width = j.at("noise_half_width").get<double>();
    c.tdm.clamp_lo = j.at("clamp_lo").get<double>();
    c.tdm.clamp_hi = j.at("clamp_hi").get<double>();
    c.tdm.sam = j.at("sam").get<bool>();
    c.tdm.qam = j.at("qam").get<bool>();
    c.tdm.iam = j.at("iam").get<bool>();
    c.head.metric = head::parse_metric(j.at("metric").get<std::string>());
    c.head.temperature = j.at("temperature").get<double>();
    c.head.distance_on = head::parse_distance_on(j.at("distance_on").get<std::string>());
    return c;
}

}  // namespace

void save_checkpoint(Model& model, const std::filesystem::path& stem) {
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
    auto bin_path = stem;
    bin_path += ".tnsr";
    auto json_path = stem;
    json_path += ".json";
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + bin_path.string());
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    auto put = [&](const std::string& name, const Tensor& t, const char* kind) {
        write_tensor(bin, t);
        tensors.push_back({{"name", name}, {"kind", kind}, {"offset", offset}, {"shape", t.shape()}});
        offset += serialized_size(t.shape());
    };
    for (const auto& [name, var] : model.parameters()) put(name, var.value(), "parameter");
    for (const auto& [name, buf] : model.buffers()) put(name, *buf, "buffer");
    nlohmann::json manifest{{"format", "tdm-checkpoint"},
                            {"container", bin_path.filename().string()},
                            {"model", config_to_json(model.config)},
                            {"tensors", tensors}};
    std::ofstream js(json_path);
    js << manifest.dump(2) << '\n';
}

Model load_checkpoint(const std::filesystem::path& stem) {
    auto json_path = stem;
    json_path += ".json";
    std::ifstream js(json_path);
    if (!js) throw std::runtime_error("cannot open checkpoint manifest " + json_path.string());
    const auto manifest = nlohmann::json::parse(js);
    Model model = make_model(config_from_json(manifest.at("model")), 0);
    const auto bin_path = json_path.parent_path() / manifest.at("container").get<std::string>();
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open checkpoint container " + bin_path.string());

    std::map<std::string, Tensor*> targets;
    for (auto& [name, var] : model.parameters()) targets[name] = &var.mutable_value();
    for (auto& [name, buf] : model.buffers()) targets[name] = buf;
    std::size_t filled = 0;
    for (const auto& entry : manifest.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        auto it = targets.find(name);
        if (it == targets.end()) throw std::runtime_error("checkpoint tensor '" + name + "' is unknown to the model");
        bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
        Tensor t = read_tensor(bin);
        if (t.shape() != it->second->shape()) {
            throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                                     ", model expects " + shape_str(it->second->shape()));
        }
        *it->second = std::move(t);
        ++filled;
    }
    if (filled != targets.size()) throw std::runtime_error("checkpoint is missing model tensors");
    return model;
}

std::vector<Tensor> snapshot(Model& model) {
    std::vector<Tensor> out;
    for (const auto& [name, var] : model.parameters()) out.push_back(var.value());
    for (const auto& [name, buf] : model.buffers()) out.push_back(*buf);
    return out;
}

void restore(Model& model, const std::vector<Tensor>& values) {
    std::size_t i = 0;
    for (auto& [name, var] : model.parameters()) var.mutable_value() = values.at(i++);
    for (auto& [name, buf] : model.buffers()) *buf = values.at(i++);
}

}  // namespace tdm::harness
