#include "tdm/harness/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace tdm::harness {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string unquote(std::string s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
        return s.substr(1, s.size() - 2);
    }
    return s;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::stringstream ss(s);
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        // "a/b" rationals let split fractions like 2/3 sum to one exactly enough
        if (const auto slash = v.find('/'); slash != std::string::npos) {
            return std::stod(v.substr(0, slash)) / std::stod(v.substr(slash + 1));
        }
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (trim(v.substr(used)).empty()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
}

Index to_index(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long n = std::stoll(v, &used);
        if (trim(v.substr(used)).empty()) return n;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
}

bool to_bool(const std::string& key, std::string v) {
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

std::vector<Index> to_index_list(const std::string& key, const std::string& v) {
    std::vector<Index> out;
    for (const auto& item : split_list(v)) out.push_back(to_index(key, item));
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string join(const std::vector<Index>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::string augment_text(const data::AugmentFlags& a) {
    std::vector<std::string> parts;
    if (a.flip) parts.emplace_back("flip");
    if (a.crop) parts.emplace_back("crop");
    if (a.jitter) parts.emplace_back("jitter");
    if (parts.empty()) return "none";
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "," : "") + parts[i];
    return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"data.source", [](auto& c, auto&, auto& v) { c.data_source = v; }},
        {"data.path", [](auto& c, auto&, auto& v) { c.data_path = v; }},
        {"data.image_size", [](auto& c, auto& k, auto& v) { c.synth.image_size = to_index(k, v); }},
        {"data.classes", [](auto& c, auto& k, auto& v) { c.synth.n_classes = to_index(k, v); }},
        {"data.instances", [](auto& c, auto& k, auto& v) { c.synth.instances_per_class = to_index(k, v); }},
        {"data.template_strength", [](auto& c, auto& k, auto& v) { c.synth.template_strength = to_double(k, v); }},
        {"data.template_variation", [](auto& c, auto& k, auto& v) { c.synth.template_variation = to_double(k, v); }},
        {"data.patch_size", [](auto& c, auto& k, auto& v) { c.synth.patch_size = to_index(k, v); }},
        {"data.patch_count", [](auto& c, auto& k, auto& v) { c.synth.patch_count_per_class = to_index(k, v); }},
        {"data.jitter", [](auto& c, auto& k, auto& v) { c.synth.jitter = to_index(k, v); }},
        {"data.noise_sigma", [](auto& c, auto& k, auto& v) { c.synth.noise_sigma = to_double(k, v); }},
        {"data.seed", [](auto& c, auto& k, auto& v) { c.synth.seed = static_cast<std::uint64_t>(to_index(k, v)); }},
        {"data.split",
         [](auto& c, auto& k, auto& v) {
             const auto parts = split_list(v);
             if (parts.size() != 3) throw ConfigError("config key '" + k + "': expected three fractions");
             for (std::size_t i = 0; i < 3; ++i) c.split_fractions[i] = to_double(k, parts[i]);
         }},
        {"data.split_seed", [](auto& c, auto& k, auto& v) { c.split_seed = static_cast<std::uint64_t>(to_index(k, v)); }},
        {"data.augment",
         [](auto& c, auto& k, auto& v) {
             c.augment.flip = c.augment.crop = c.augment.jitter = false;
             for (const auto& item : split_list(v)) {
                 if (item == "none") continue;
                 if (item == "flip") c.augment.flip = true;
                 else if (item == "crop") c.augment.crop = true;
                 else if (item == "jitter") c.augment.jitter = true;
                 else throw ConfigError("config key '" + k + "': unknown augmentation '" + item + "'");
             }
         }},
        {"model.channels", [](auto& c, auto& k, auto& v) { c.model.channels = to_index(k, v); }},
        {"model.iam_blocks", [](auto& c, auto& k, auto& v) { c.model.iam_blocks = to_index_list(k, v); }},
        {"model.alpha", [](auto& c, auto& k, auto& v) { c.model.tdm.alpha = to_double(k, v); }},
        {"model.beta", [](auto& c, auto& k, auto& v) { c.model.tdm.beta = to_double(k, v); }},
        {"model.noise", [](auto& c, auto& k, auto& v) { c.model.tdm.noise_half_width = to_double(k, v); }},
        {"model.sam", [](auto& c, auto& k, auto& v) { c.model.tdm.sam = to_bool(k, v); }},
        {"model.qam", [](auto& c, auto& k, auto& v) { c.model.tdm.qam = to_bool(k, v); }},
        {"model.iam", [](auto& c, auto& k, auto& v) { c.model.tdm.iam = to_bool(k, v); }},
        {"model.metric",
         [](auto& c, auto& k, auto& v) {
             try {
                 c.model.head.metric = head::parse_metric(v);
             } catch (const std::invalid_argument& e) {
                 throw ConfigError("config key '" + k + "': " + e.what());
             }
         }},
        {"model.temperature", [](auto& c, auto& k, auto& v) { c.model.head.temperature = to_double(k, v); }},
        {"model.distance_on",
         [](auto& c, auto& k, auto& v) {
             try {
                 c.model.head.distance_on = head::parse_distance_on(v);
             } catch (const std::invalid_argument& e) {
                 throw ConfigError("config key '" + k + "': " + e.what());
             }
         }},
        {"optim.kind", [](auto& c, auto&, auto& v) { c.optim.kind = v; }},
        {"optim.lr", [](auto& c, auto& k, auto& v) { c.optim.lr = to_double(k, v); }},
        {"optim.momentum", [](auto& c, auto& k, auto& v) { c.optim.momentum = to_double(k, v); }},
        {"optim.weight_decay", [](auto& c, auto& k, auto& v) { c.optim.weight_decay = to_double(k, v); }},
        {"train.episodes", [](auto& c, auto& k, auto& v) { c.train_episodes = to_index(k, v); }},
        {"train.way", [](auto& c, auto& k, auto& v) { c.train_shape.way = to_index(k, v); }},
        {"train.shot", [](auto& c, auto& k, auto& v) { c.train_shape.shot = to_index(k, v); }},
        {"train.query", [](auto& c, auto& k, auto& v) { c.train_shape.query = to_index(k, v); }},
        {"train.val_every", [](auto& c, auto& k, auto& v) { c.val_every = to_index(k, v); }},
        {"train.val_episodes", [](auto& c, auto& k, auto& v) { c.val_episodes = to_index(k, v); }},
        {"train.val_query", [](auto& c, auto& k, auto& v) { c.val_query = to_index(k, v); }},
        {"eval.episodes", [](auto& c, auto& k, auto& v) { c.eval_episodes = to_index(k, v); }},
        {"eval.way", [](auto& c, auto& k, auto& v) { c.eval_shape.way = to_index(k, v); }},
        {"eval.shot", [](auto& c, auto& k, auto& v) { c.eval_shape.shot = to_index(k, v); }},
        {"eval.query", [](auto& c, auto& k, auto& v) { c.eval_shape.query = to_index(k, v); }},
        {"eval.seed", [](auto& c, auto& k, auto& v) { c.eval_seed = static_cast<std::uint64_t>(to_index(k, v)); }},
        {"eval.reuse_5shot_for_1shot", [](auto& c, auto& k, auto& v) { c.reuse_5shot_for_1shot = to_bool(k, v); }},
        {"sweep.ways", [](auto& c, auto& k, auto& v) { c.sweep_ways = to_index_list(k, v); }},
        {"sweep.shots", [](auto& c, auto& k, auto& v) { c.sweep_shots = to_index_list(k, v); }},
        {"run.seed", [](auto& c, auto& k, auto& v) { c.seed = static_cast<std::uint64_t>(to_index(k, v)); }},
        {"run.out_dir", [](auto& c, auto&, auto& v) { c.out_dir = v; }},
        {"run.checkpoint", [](auto& c, auto&, auto& v) { c.checkpoint = v; }},
        {"run.threads", [](auto& c, auto& k, auto& v) { c.threads = to_index(k, v); }},
    };
    return table;
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
    KeyValues out;
    std::string section;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find_first_of("#;"); hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        out[section.empty() ? key : section + "." + key] = unquote(trim(line.substr(eq + 1)));
    }
    return out;
}

KeyValues read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_key_values(buf.str());
}

Index ExperimentConfig::effective_train_shot() const {
    return (reuse_5shot_for_1shot && eval_shape.shot == 1) ? 5 : train_shape.shot;
}

void ExperimentConfig::validate() const {
    auto positive = [](Index v, const char* what) {
        if (v < 1) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(train_shape.way, "train.way");
    positive(train_shape.shot, "train.shot");
    positive(train_shape.query, "train.query");
    positive(eval_shape.way, "eval.way");
    positive(eval_shape.shot, "eval.shot");
    positive(eval_shape.query, "eval.query");
    positive(eval_episodes, "eval.episodes");
    positive(val_query, "train.val_query");
    positive(model.channels, "model.channels");
    if (train_episodes < 0) throw ConfigError("train.episodes must be nonnegative");
    if (val_every < 0 || val_episodes < 0) throw ConfigError("train.val_every/val_episodes must be nonnegative");
    if (data_source != "synthetic" && data_source != "folder" && data_source != "saved") {
        throw ConfigError("data.source must be synthetic, folder or saved");
    }
    if (optim.kind != "sgd" && optim.kind != "adam") throw ConfigError("optim.kind must be sgd or adam");
    if (optim.lr < 0.0) throw ConfigError("optim.lr must be nonnegative");
    if (threads < 1) throw ConfigError("run.threads must be positive");
    const double total = split_fractions[0] + split_fractions[1] + split_fractions[2];
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("data.split fractions must sum to 1");
    try {
        model.tdm.validate();
        if (data_source == "synthetic") synth.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (model.tdm.sam && train_shape.way < 2) {
        throw ConfigError("SAM needs train.way >= 2");
    }
}

KeyValues to_key_values(const ExperimentConfig& c) {
    return {
        {"data.source", c.data_source},
        {"data.path", c.data_path.string()},
        {"data.image_size", std::to_string(c.synth.image_size)},
        {"data.classes", std::to_string(c.synth.n_classes)},
        {"data.instances", std::to_string(c.synth.instances_per_class)},
        {"data.template_strength", fmt(c.synth.template_strength)},
        {"data.template_variation", fmt(c.synth.template_variation)},
        {"data.patch_size", std::to_string(c.synth.patch_size)},
        {"data.patch_count", std::to_string(c.synth.patch_count_per_class)},
        {"data.jitter", std::to_string(c.synth.jitter)},
        {"data.noise_sigma", fmt(c.synth.noise_sigma)},
        {"data.seed", std::to_string(c.synth.seed)},
        {"data.split", fmt(c.split_fractions[0]) + "," + fmt(c.split_fractions[1]) + "," + fmt(c.split_fractions[2])},
        {"data.split_seed", std::to_string(c.split_seed)},
        {"data.augment", augment_text(c.augment)},
        {"model.channels", std::to_string(c.model.channels)},
        {"model.iam_blocks", join(c.model.iam_blocks)},
        {"model.alpha", fmt(c.model.tdm.alpha)},
        {"model.beta", fmt(c.model.tdm.beta)},
        {"model.noise", fmt(c.model.tdm.noise_half_width)},
        {"model.sam", c.model.tdm.sam ? "true" : "false"},
        {"model.qam", c.model.tdm.qam ? "true" : "false"},
        {"model.iam", c.model.tdm.iam ? "true" : "false"},
        {"model.metric", head::to_string(c.model.head.metric)},
        {"model.temperature", fmt(c.model.head.temperature)},
        {"model.distance_on", c.model.head.distance_on == head::DistanceOn::pooled ? "pooled" : "flattened"},
        {"optim.kind", c.optim.kind},
        {"optim.lr", fmt(c.optim.lr)},
        {"optim.momentum", fmt(c.optim.momentum)},
        {"optim.weight_decay", fmt(c.optim.weight_decay)},
        {"train.episodes", std::to_string(c.train_episodes)},
        {"train.way", std::to_string(c.train_shape.way)},
        {"train.shot", std::to_string(c.train_shape.shot)},
        {"train.query", std::to_string(c.train_shape.query)},
        {"train.val_every", std::to_string(c.val_every)},
        {"train.val_episodes", std::to_string(c.val_episodes)},
        {"train.val_query", std::to_string(c.val_query)},
        {"eval.episodes", std::to_string(c.eval_episodes)},
        {"eval.way", std::to_string(c.eval_shape.way)},
        {"eval.shot", std::to_string(c.eval_shape.shot)},
        {"eval.query", std::to_string(c.eval_shape.query)},
        {"eval.seed", std::to_string(c.eval_seed)},
        {"eval.reuse_5shot_for_1shot", c.reuse_5shot_for_1shot ? "true" : "false"},
        {"sweep.ways", join(c.sweep_ways)},
        {"sweep.shots", join(c.sweep_shots)},
        {"run.seed", std::to_string(c.seed)},
        {"run.out_dir", c.out_dir.string()},
        {"run.checkpoint", c.checkpoint.string()},
        {"run.threads", std::to_string(c.threads)},
    };
}

ExperimentConfig apply_key_values(ExperimentConfig base, const KeyValues& values) {
    const auto& table = setters();
    for (const auto& [key, value] : values) {
        auto it = table.find(key);
        if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second(base, key, value);
    }
    return base;
}

void apply_environment(ExperimentConfig& config) {
    if (const char* seed = std::getenv("TDM_SEED"); seed && *seed) {
        config.seed = static_cast<std::uint64_t>(to_index("TDM_SEED", seed));
    }
    if (const char* threads = std::getenv("TDM_THREADS"); threads && *threads) {
        config.threads = std::max<Index>(1, std::min(config.threads, to_index("TDM_THREADS", threads)));
    }
}

}  // namespace tdm::harness
