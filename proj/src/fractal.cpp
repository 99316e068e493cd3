#include "fedsim/fractal.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fedsim/errors.hpp"

namespace fedsim {

using nlohmann::json;

double AffineMap::max_singular_value() const {
    // closed form for 2x2: singular values from eigenvalues of A^T A
    const double e = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3]) / 2.0;
    const double f = det();
    const double disc = std::sqrt(std::max(0.0, e * e - f * f));
    return std::sqrt(std::max(0.0, e + disc));
}

namespace {

double weighted_mean_contraction(const IfsCode& code) {
    double s = 0.0;
    for (std::size_t i = 0; i < code.maps.size(); ++i)
        s += code.probs[i] * code.maps[i].max_singular_value();
    return s;
}

}  // namespace

IfsCode sample_ifs(int num_maps, Rng& rng, const IfsSamplerConfig& cfg) {
    if (num_maps < 2 || num_maps > 8)
        throw ConfigError("sample_ifs: num_maps must lie in [2, 8]");
    for (std::size_t attempt = 0; attempt < cfg.budget; ++attempt) {
        IfsCode code;
        bool ok = true;
        for (int m = 0; m < num_maps && ok; ++m) {
            AffineMap map{};
            bool accepted = false;
            for (std::size_t tries = 0; tries < cfg.budget; ++tries) {
                for (auto& x : map.a) x = rng.uniform(-1.0, 1.0);
                for (auto& x : map.b) x = rng.uniform(-1.0, 1.0);
                if (std::abs(map.det()) >= cfg.det_floor &&
                    map.max_singular_value() <= cfg.map_singular_cap) {
                    accepted = true;
                    break;
                }
            }
            if (!accepted) {
                ok = false;
                break;
            }
            code.maps.push_back(map);
        }
        if (!ok) continue;

        double det_sum = 0.0;
        for (const auto& m : code.maps) det_sum += std::abs(m.det());
        code.probs.resize(code.maps.size());
        for (std::size_t i = 0; i < code.maps.size(); ++i)
            code.probs[i] = std::abs(code.maps[i].det()) / det_sum;

        const double c = weighted_mean_contraction(code);
        if (c >= cfg.contraction_lo && c <= cfg.contraction_hi) return code;
    }
    throw ConfigError("sample_ifs: rejection budget exhausted");
}

Tensor render_fractal(const IfsCode& code, std::size_t size, std::size_t iterations,
                      Rng& rng) {
    if (size < 16) throw ConfigError("render_fractal: size must be >= 16");
    if (iterations < 1000) throw ConfigError("render_fractal: iterations must be >= 1000");
    if (code.maps.empty() || code.maps.size() != code.probs.size())
        throw ConfigError("render_fractal: malformed code");

    std::vector<double> cdf(code.probs.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < code.probs.size(); ++i) {
        acc += code.probs[i];
        cdf[i] = acc;
    }

    constexpr std::size_t kBurnIn = 100;
    constexpr double kEscape = 1e6;

    double px = 0.0, py = 0.0;
    std::vector<double> xs, ys;
    xs.reserve(iterations);
    ys.reserve(iterations);
    for (std::size_t it = 0; it < iterations + kBurnIn; ++it) {
        const double u = rng.uniform(0.0, 1.0);
        const std::size_t m = static_cast<std::size_t>(
            std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        const AffineMap& map = code.maps[std::min(m, code.maps.size() - 1)];
        const double nx = map.a[0] * px + map.a[1] * py + map.b[0];
        const double ny = map.a[2] * px + map.a[3] * py + map.b[1];
        px = nx;
        py = ny;
        if (!std::isfinite(px) || !std::isfinite(py) || std::abs(px) > kEscape ||
            std::abs(py) > kEscape)
            throw NumericError("render_fractal: orbit diverged");
        if (it >= kBurnIn) {
            xs.push_back(px);
            ys.push_back(py);
        }
    }

    double xmin = xs[0], xmax = xs[0], ymin = ys[0], ymax = ys[0];
    for (std::size_t i = 1; i < xs.size(); ++i) {
        xmin = std::min(xmin, xs[i]);
        xmax = std::max(xmax, xs[i]);
        ymin = std::min(ymin, ys[i]);
        ymax = std::max(ymax, ys[i]);
    }
    const double ex = std::max(xmax - xmin, 1e-12);
    const double ey = std::max(ymax - ymin, 1e-12);

    std::vector<double> counts(size * size, 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto cx = std::min(size - 1, static_cast<std::size_t>((xs[i] - xmin) / ex *
                                                                    static_cast<double>(size)));
        const auto cy = std::min(size - 1, static_cast<std::size_t>((ys[i] - ymin) / ey *
                                                                    static_cast<double>(size)));
        counts[cy * size + cx] += 1.0;
    }
    double peak = 0.0;
    for (double c : counts) peak = std::max(peak, c);
    Tensor img({1, size, size});
    if (peak > 0.0)
        for (std::size_t i = 0; i < counts.size(); ++i) img[i] = counts[i] / peak;
    return img;
}

namespace {

double nonzero_fraction(const Tensor& img) {
    std::size_t nz = 0;
    for (double v : img.v)
        if (v > 0.0) ++nz;
    return static_cast<double>(nz) / static_cast<double>(img.size());
}

IfsCode jitter_code(const IfsCode& code, double jitter, Rng& rng) {
    IfsCode out = code;
    for (auto& m : out.maps) {
        for (auto& x : m.a) x *= 1.0 + jitter * rng.uniform(-1.0, 1.0);
        for (auto& x : m.b) x *= 1.0 + jitter * rng.uniform(-1.0, 1.0);
    }
    return out;
}

}  // namespace

FractalDataset build_pretrain_dataset(int num_classes, int images_per_class,
                                      std::size_t size, std::uint64_t seed,
                                      const FractalBuildConfig& cfg) {
    if (num_classes < 1) throw ConfigError("build_pretrain_dataset: need >= 1 class");

    FractalDataset ds;
    ds.images_per_class = images_per_class;
    ds.image_size = size;
    ds.seed = seed;
    ds.images.num_classes = num_classes;
    ds.images.split_tag = "train";

    // sample one accepted code per class (sequential: rejection consumes rng)
    for (int c = 0; c < num_classes; ++c) {
        Rng rng = Rng::derive(seed, {Rng::kRenderTag, static_cast<std::uint64_t>(c)});
        IfsCode code;
        bool accepted = false;
        for (int tries = 0; tries < 200 && !accepted; ++tries) {
            const int num_maps = static_cast<int>(rng.uniform_int(2, 4));
            try {
                code = sample_ifs(num_maps, rng, cfg.sampler);
            } catch (const ConfigError&) {
                continue;
            }
            Rng probe = Rng::derive(seed, {Rng::kRenderTag, static_cast<std::uint64_t>(c), 0});
            try {
                const Tensor img = render_fractal(code, size, cfg.render_iterations, probe);
                const double fill = nonzero_fraction(img);
                accepted = fill >= cfg.min_fill && fill <= cfg.max_fill;
            } catch (const NumericError&) {
                accepted = false;
            }
        }
        if (!accepted)
            throw ConfigError("build_pretrain_dataset: could not find an acceptable code for class " +
                              std::to_string(c));
        ds.classes.push_back(std::move(code));
    }

    // render, parallel-safe ordering: image i of class c uses its own stream
    const std::size_t total = static_cast<std::size_t>(num_classes) *
                              static_cast<std::size_t>(images_per_class);
    std::vector<Tensor> imgs(total);
    std::vector<int> labels(total);
    const std::int64_t n = static_cast<std::int64_t>(total);
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i / images_per_class);
        const int k = static_cast<int>(i % images_per_class);
        Rng rng = Rng::derive(seed, {Rng::kRenderTag, static_cast<std::uint64_t>(c),
                                     static_cast<std::uint64_t>(k) + 1});
        IfsCode code = ds.classes[static_cast<std::size_t>(c)];
        if (k > 0) code = jitter_code(code, cfg.jitter, rng);  // image 0 is the canonical render
        imgs[static_cast<std::size_t>(i)] =
            render_fractal(code, size, cfg.render_iterations, rng);
        labels[static_cast<std::size_t>(i)] = c;
    }
    ds.images.samples = std::move(imgs);
    ds.images.labels = std::move(labels);
    return ds;
}

ModelParams pretrain(const ModelParams& model, const LabeledDataset& data, int epochs,
                     std::size_t batch, const LrSchedule& schedule, std::uint64_t seed,
                     std::vector<double>* loss_trace) {
    if (model.config.num_outputs < static_cast<std::size_t>(data.num_classes))
        throw ConfigError("pretrain: classifier head narrower than the class count");
    if (batch < 1) throw ConfigError("pretrain: batch must be >= 1");

    ModelParams theta = model;
    if (epochs <= 0) return theta;

    OptimizerState opt = make_optimizer(theta, schedule);
    const auto in_shape = theta.config.encoder.input_shape();
    const std::size_t sample_len = Tensor::count(in_shape);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng rng = Rng::derive(seed, {Rng::kDataTag, static_cast<std::uint64_t>(epoch)});
        const auto order = rng.permutation(data.size());
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t bsz = std::min(batch, order.size() - start);
            InputBatch b;
            std::vector<std::size_t> shape = {bsz};
            shape.insert(shape.end(), in_shape.begin(), in_shape.end());
            b.x = Tensor(shape);
            for (std::size_t i = 0; i < bsz; ++i) {
                const auto& s = data.samples[order[start + i]];
                std::memcpy(b.x.data() + i * sample_len, s.data(), sample_len * sizeof(double));
                b.labels.push_back(data.labels[order[start + i]]);
            }
            ForwardCache cache;
            const FeatureBatch feat = encode(theta, b, &cache);
            const Tensor logits = classify(theta, feat.features);
            const double loss = cross_entropy(logits, b.labels);
            if (!std::isfinite(loss)) throw NumericError("pretrain: non-finite loss");
            if (loss_trace) loss_trace->push_back(loss);
            const Tensor dlogits = cross_entropy_grad(logits, b.labels);
            const GradientSet grads = backward(theta, cache, feat.features, dlogits);
            adam_step(theta, grads, opt, 0);
        }
    }
    return theta;
}

ModelParams slice_head(const ModelParams& pretrained, std::size_t target_classes) {
    if (target_classes > pretrained.config.num_outputs)
        throw ConfigError("slice_head: target width exceeds pretrained head");
    ModelParams out = pretrained;
    const std::size_t d = pretrained.feature_dim();
    out.config.num_outputs = target_classes;
    out.head_w = Tensor({target_classes, d});
    std::memcpy(out.head_w.data(), pretrained.head_w.data(),
                target_classes * d * sizeof(double));
    out.head_b = Tensor({target_classes});
    std::memcpy(out.head_b.data(), pretrained.head_b.data(),
                target_classes * sizeof(double));
    return out;
}

// --- file format -----------------------------------------------------------

namespace {
constexpr char kFractalMagic[8] = {'F', 'S', 'F', 'R', 'A', 'C', '0', '1'};

template <typename T>
void wpod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T rpod(std::istream& in) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw SchemaError("fractal dataset: truncated file");
    return v;
}
}  // namespace

void save_fractal_dataset(const std::string& path, const FractalDataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    out.write(kFractalMagic, sizeof(kFractalMagic));
    wpod<std::uint32_t>(out, 1);  // version
    wpod<std::uint32_t>(out, static_cast<std::uint32_t>(ds.images.num_classes));
    wpod<std::uint32_t>(out, static_cast<std::uint32_t>(ds.images_per_class));
    wpod<std::uint32_t>(out, static_cast<std::uint32_t>(ds.image_size));
    wpod<std::uint64_t>(out, ds.seed);
    for (const auto& img : ds.images.samples)
        for (double v : img.v) wpod<float>(out, static_cast<float>(v));
    if (!out) throw ConfigError("write failed: " + path);

    json sidecar;
    sidecar["version"] = 1;
    sidecar["seed"] = ds.seed;
    json classes = json::array();
    for (const auto& code : ds.classes) {
        json jc;
        jc["probs"] = code.probs;
        json maps = json::array();
        for (const auto& m : code.maps) maps.push_back({{"A", m.a}, {"b", m.b}});
        jc["maps"] = std::move(maps);
        classes.push_back(std::move(jc));
    }
    sidecar["classes"] = std::move(classes);
    std::ofstream side(path + ".codes.json");
    if (!side) throw ConfigError("cannot open " + path + ".codes.json for writing");
    side << sidecar.dump();
}

LabeledDataset load_fractal_images(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kFractalMagic, 8) != 0)
        throw SchemaError("not a fractal dataset: " + path);
    if (rpod<std::uint32_t>(in) != 1) throw SchemaError("fractal dataset: unsupported version");
    const auto num_classes = rpod<std::uint32_t>(in);
    const auto per_class = rpod<std::uint32_t>(in);
    const auto size = rpod<std::uint32_t>(in);
    (void)rpod<std::uint64_t>(in);  // seed

    LabeledDataset ds;
    ds.num_classes = static_cast<int>(num_classes);
    ds.split_tag = "train";
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (std::uint32_t c = 0; c < num_classes; ++c) {
        for (std::uint32_t k = 0; k < per_class; ++k) {
            Tensor img({1, size, size});
            for (std::size_t i = 0; i < plane; ++i) img[i] = static_cast<double>(rpod<float>(in));
            ds.samples.push_back(std::move(img));
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    return ds;
}

FractalDataset load_fractal_dataset(const std::string& path) {
    FractalDataset ds;
    ds.images = load_fractal_images(path);

    std::ifstream side(path + ".codes.json");
    if (!side) throw ConfigError("cannot open " + path + ".codes.json");
    json sidecar;
    side >> sidecar;
    if (sidecar.at("version").get<int>() != 1)
        throw SchemaError("fractal sidecar: unsupported version");
    ds.seed = sidecar.at("seed").get<std::uint64_t>();
    for (const json& jc : sidecar.at("classes")) {
        IfsCode code;
        code.probs = jc.at("probs").get<std::vector<double>>();
        for (const json& jm : jc.at("maps")) {
            AffineMap m{};
            const auto a = jm.at("A").get<std::vector<double>>();
            const auto b = jm.at("b").get<std::vector<double>>();
            std::copy(a.begin(), a.end(), m.a.begin());
            std::copy(b.begin(), b.end(), m.b.begin());
            code.maps.push_back(m);
        }
        ds.classes.push_back(std::move(code));
    }
    if (!ds.images.samples.empty()) {
        ds.image_size = ds.images.samples[0].shape[1];
        ds.images_per_class =
            static_cast<int>(ds.images.size() / static_cast<std::size_t>(ds.images.num_classes));
    }
    return ds;
}

}  // namespace fedsim
