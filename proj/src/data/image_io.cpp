#include "tdm/data/data.hpp"

#include "tdm/log.hpp"
#include "tdm/numeric/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace tdm::data {
namespace {

namespace fs = std::filesystem;

// Reads the next header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& in) {
    std::string token;
    int ch = 0;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!token.empty()) break;
            continue;
        }
        token.push_back(static_cast<char>(ch));
    }
    return token;
}

}  // namespace

Tensor read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    if (ppm_token(in) != "P6") throw std::runtime_error(path.string() + ": not a binary PPM (P6)");
    Index width = 0;
    Index height = 0;
    int maxval = 0;
    try {
        width = std::stoll(ppm_token(in));
        height = std::stoll(ppm_token(in));
        maxval = std::stoi(ppm_token(in));
    } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ": malformed PPM header");
    }
    if (width <= 0 || height <= 0 || maxval != 255) {
        throw std::runtime_error(path.string() + ": only 8-bit PPM with positive extents is supported");
    }
    std::vector<unsigned char> raw(static_cast<std::size_t>(width * height * 3));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw std::runtime_error(path.string() + ": truncated pixel data");
    Tensor img(Shape{3, height, width});
    for (Index y = 0; y < height; ++y) {
        for (Index x = 0; x < width; ++x) {
            for (Index c = 0; c < 3; ++c) {
                img.at(c, y, x) = raw[static_cast<std::size_t>((y * width + x) * 3 + c)] / 255.0;
            }
        }
    }
    return img;
}

void write_ppm(const fs::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm expects 3xHxW, got " + shape_str(image.shape()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const Index h = image.dim(1);
    const Index w = image.dim(2);
    out << "P6\n" << w << ' ' << h << "\n255\n";
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            for (Index c = 0; c < 3; ++c) {
                const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
                out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
            }
        }
    }
}

Tensor resize_bilinear(const Tensor& image, Index height, Index width) {
    if (image.rank() != 3) throw ShapeError("resize_bilinear expects CxHxW, got " + shape_str(image.shape()));
    const Index channels = image.dim(0);
    const Index ih = image.dim(1);
    const Index iw = image.dim(2);
    Tensor out(Shape{channels, height, width});
    const double sy = static_cast<double>(ih) / static_cast<double>(height);
    const double sx = static_cast<double>(iw) / static_cast<double>(width);
    for (Index y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(ih - 1));
        const auto y0 = static_cast<Index>(std::floor(fy));
        const Index y1 = std::min(y0 + 1, ih - 1);
        const double wy = fy - static_cast<double>(y0);
        for (Index x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(iw - 1));
            const auto x0 = static_cast<Index>(std::floor(fx));
            const Index x1 = std::min(x0 + 1, iw - 1);
            const double wx = fx - static_cast<double>(x0);
            for (Index c = 0; c < channels; ++c) {
                const double top = image.at(c, y0, x0) * (1.0 - wx) + image.at(c, y0, x1) * wx;
                const double bottom = image.at(c, y1, x0) * (1.0 - wx) + image.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    return out;
}

Dataset load_image_folder(const fs::path& root, Index image_size) {
    if (!fs::is_directory(root)) throw std::runtime_error(root.string() + " is not a directory");
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw std::runtime_error(root.string() + " contains no class folders");

    Dataset ds;
    ds.image_size = image_size;
    for (const auto& dir : class_dirs) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_regular_file()) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        ClassRecord record;
        record.id = ds.class_count();
        record.name = dir.filename().string();
        for (const auto& file : files) {
            try {
                record.instances.push_back(resize_bilinear(read_ppm(file), image_size, image_size));
            } catch (const std::exception& e) {
                record_warning(std::string("skipping unreadable image: ") + e.what());
            }
        }
        if (record.instances.empty()) throw std::runtime_error("class folder " + dir.string() + " has no readable images");
        ds.classes.push_back(std::move(record));
    }

    const Index area = image_size * image_size;
    for (Index ch = 0; ch < 3; ++ch) {
        double sum = 0.0;
        double sq = 0.0;
        double count = 0.0;
        for (const auto& cls : ds.classes) {
            for (const auto& img : cls.instances) {
                sum += img.array().segment(ch * area, area).sum();
                count += static_cast<double>(area);
            }
        }
        const double mu = sum / count;
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

void save_dataset(const fs::path& dir, const Dataset& dataset, const SynthConfig* config) {
    fs::create_directories(dir);
    std::vector<InstanceRef> refs;
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& cls : dataset.classes) {
        classes.push_back({{"id", cls.id}, {"name", cls.name}, {"count", cls.instances.size()}});
        for (Index i = 0; i < static_cast<Index>(cls.instances.size()); ++i) refs.push_back({cls.id, i});
    }
    save_tensor(dir / "images.tnsr", stack_instances(dataset, refs));
    nlohmann::json manifest{{"format", "tdm-dataset"}, {"image_size", dataset.image_size}, {"classes", classes}};
    if (config) {
        manifest["generator"] = {{"n_classes", config->n_classes},
                                 {"instances_per_class", config->instances_per_class},
                                 {"image_size", config->image_size},
                                 {"template_strength", config->template_strength},
                                 {"template_variation", config->template_variation},
                                 {"patch_size", config->patch_size},
                                 {"patch_count_per_class", config->patch_count_per_class},
                                 {"jitter", config->jitter},
                                 {"noise_sigma", config->noise_sigma},
                                 {"seed", config->seed}};
    }
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("missing " + (dir / "manifest.json").string());
    const auto manifest = nlohmann::json::parse(in);
    const Tensor images = load_tensor(dir / "images.tnsr");
    Dataset ds;
    ds.image_size = manifest.at("image_size").get<Index>();
    const Index stride = images.size() / std::max<Index>(images.dim(0), 1);
    Index row = 0;
    for (const auto& c : manifest.at("classes")) {
        ClassRecord record;
        record.id = c.at("id").get<Index>();
        record.name = c.at("name").get<std::string>();
        const auto count = c.at("count").get<Index>();
        for (Index i = 0; i < count; ++i, ++row) {
            if (row >= images.dim(0)) throw std::runtime_error("dataset manifest lists more instances than images.tnsr holds");
            record.instances.emplace_back(Shape{3, ds.image_size, ds.image_size},
                                          Tensor::Array(images.array().segment(row * stride, stride)));
        }
        ds.classes.push_back(std::move(record));
    }
    return ds;
}

Tensor flip_horizontal(const Tensor& image) {
    if (image.rank() != 3) throw ShapeError("flip_horizontal expects CxHxW");
    Tensor out(image.shape());
    const Index rows = image.dim(0) * image.dim(1);
    const Index w = image.dim(2);
    for (Index r = 0; r < rows; ++r) out.array().segment(r * w, w) = image.array().segment(r * w, w).reverse();
    return out;
}

Tensor augment(const Tensor& image, Rng& rng, const AugmentFlags& flags) {
    Tensor out = image;
    if (flags.flip && rng.bernoulli(flags.flip_probability)) out = flip_horizontal(out);
    if (flags.crop) {
        const Index pad = flags.crop_padding;
        const Index c = out.dim(0);
        const Index h = out.dim(1);
        const Index w = out.dim(2);
        const Index oy = rng.index(2 * pad + 1) - pad;
        const Index ox = rng.index(2 * pad + 1) - pad;
        Tensor cropped(out.shape());
        for (Index ch = 0; ch < c; ++ch) {
            for (Index y = 0; y < h; ++y) {
                const Index sy = y + oy;
                if (sy < 0 || sy >= h) continue;
                for (Index x = 0; x < w; ++x) {
                    const Index sx = x + ox;
                    if (sx >= 0 && sx < w) cropped.at(ch, y, x) = out.at(ch, sy, sx);
                }
            }
        }
        out = std::move(cropped);
    }
    if (flags.jitter) {
        const double brightness = rng.uniform(1.0 - flags.jitter_range, 1.0 + flags.jitter_range);
        const double contrast = rng.uniform(1.0 - flags.jitter_range, 1.0 + flags.jitter_range);
        const double mu = out.array().mean();
        out.array() = ((out.array() - mu) * contrast + mu) * brightness;
    }
    return out;
}

}  // namespace tdm::data
