#include "fedsim/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fedsim/errors.hpp"
#include "fedsim/fractal.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

void LabeledDataset::validate() const {
    if (samples.size() != labels.size())
        throw ConfigError("dataset: samples/labels length mismatch");
    if (num_classes <= 0) throw ConfigError("dataset: num_classes must be positive");
    for (int y : labels)
        if (y < 0 || y >= num_classes)
            throw ConfigError("dataset: label " + std::to_string(y) + " out of range");
}

std::vector<std::vector<std::size_t>> LabeledDataset::indices_by_class() const {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i)
        by_class[static_cast<std::size_t>(labels[i])].push_back(i);
    return by_class;
}

DatasetPair make_synthetic(const SyntheticSpec& spec) {
    if (spec.classes < 1 || spec.dim < 1 || spec.train_per_class < 1 || spec.test_per_class < 0)
        throw ConfigError("synthetic dataset: all counts must be positive");

    const std::size_t dim = static_cast<std::size_t>(spec.dim);
    Rng mean_rng = Rng::derive(spec.seed, {Rng::kDataTag, 0});
    std::vector<std::vector<double>> means(static_cast<std::size_t>(spec.classes));
    for (auto& m : means) {
        m.resize(dim);
        for (auto& x : m) x = mean_rng.uniform(0.15, 0.85);
    }

    auto draw = [&](const char* tag_name, std::uint64_t sub, int per_class) {
        LabeledDataset ds;
        ds.num_classes = spec.classes;
        ds.split_tag = tag_name;
        Rng rng = Rng::derive(spec.seed, {Rng::kDataTag, sub});
        for (int c = 0; c < spec.classes; ++c) {
            for (int i = 0; i < per_class; ++i) {
                Tensor t({dim});
                for (std::size_t k = 0; k < dim; ++k) {
                    double x = means[static_cast<std::size_t>(c)][k] + spec.spread * rng.normal();
                    t[k] = std::clamp(x, 0.0, 1.0);
                }
                ds.samples.push_back(std::move(t));
                ds.labels.push_back(c);
            }
        }
        return ds;
    };

    DatasetPair pair;
    pair.train = draw("train", 1, spec.train_per_class);
    pair.test = draw("test", 2, spec.test_per_class);
    return pair;
}

namespace {

LabeledDataset load_cifar_bin(const std::string& path, std::size_t expected_records,
                              const char* tag) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cifar100: cannot open " + path);
    constexpr std::size_t kRecord = 2 + 3 * 32 * 32;  // coarse, fine, RGB planes
    std::vector<unsigned char> buf(kRecord);
    LabeledDataset ds;
    ds.num_classes = 100;
    ds.split_tag = tag;
    while (in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(kRecord))) {
        Tensor img({3, 32, 32});
        for (std::size_t i = 0; i < 3 * 32 * 32; ++i)
            img[i] = static_cast<double>(buf[2 + i]) / 255.0;
        ds.samples.push_back(std::move(img));
        ds.labels.push_back(static_cast<int>(buf[1]));  // fine label
    }
    if (expected_records != 0 && ds.samples.size() != expected_records)
        throw SchemaError("cifar100: " + path + " holds " + std::to_string(ds.samples.size()) +
                          " records, expected " + std::to_string(expected_records));
    return ds;
}

std::string value_of(const std::string& body, const std::string& key, const std::string& dflt) {
    // body is "k=v,k=v,..."
    std::size_t pos = 0;
    while (pos < body.size()) {
        std::size_t end = body.find(',', pos);
        if (end == std::string::npos) end = body.size();
        const std::string item = body.substr(pos, end - pos);
        const std::size_t eq = item.find('=');
        if (eq != std::string::npos && item.substr(0, eq) == key) return item.substr(eq + 1);
        pos = end + 1;
    }
    return dflt;
}

}  // namespace

DatasetPair load_cifar100(const std::string& dir) {
    const auto base = std::filesystem::path(dir);
    DatasetPair pair;
    pair.train = load_cifar_bin((base / "train.bin").string(), 0, "train");
    pair.test = load_cifar_bin((base / "test.bin").string(), 0, "test");
    return pair;
}

DatasetPair load_dataset(const std::string& spec) {
    const std::size_t colon = spec.find(':');
    const std::string kind = spec.substr(0, colon == std::string::npos ? spec.size() : colon);
    const std::string body = colon == std::string::npos ? "" : spec.substr(colon + 1);

    if (kind == "synthetic") {
        SyntheticSpec s;
        try {
            s.classes = std::stoi(value_of(body, "classes", std::to_string(s.classes)));
            s.dim = std::stoi(value_of(body, "dim", std::to_string(s.dim)));
            s.train_per_class = std::stoi(value_of(body, "train", std::to_string(s.train_per_class)));
            s.test_per_class = std::stoi(value_of(body, "test", std::to_string(s.test_per_class)));
            s.spread = std::stod(value_of(body, "spread", std::to_string(s.spread)));
            s.seed = std::stoull(value_of(body, "seed", std::to_string(s.seed)));
        } catch (const std::exception&) {
            throw ConfigError("bad synthetic dataset spec: " + spec);
        }
        return make_synthetic(s);
    }
    if (kind == "cifar100") return load_cifar100(body);
    if (kind == "fractals") {
        DatasetPair pair;
        pair.train = load_fractal_images(body);
        pair.test.num_classes = pair.train.num_classes;
        pair.test.split_tag = "test";
        return pair;
    }
    throw ConfigError("unknown dataset spec '" + spec +
                      "' (expected synthetic[:...], cifar100:<dir> or fractals:<file>)");
}

}  // namespace fedsim
