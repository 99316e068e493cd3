#include "fedsim/splitgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "fedsim/errors.hpp"

namespace fedsim {

using nlohmann::json;

std::size_t ClientSplit::total_samples() const {
    std::size_t n = 0;
    for (const auto& idx : sample_indices) n += idx.size();
    return n;
}

namespace {

// Distribute `total` units over weights by largest-remainder rounding.
// Deterministic; ties go to the lower index.
std::vector<std::size_t> largest_remainder(const std::vector<double>& weights,
                                           std::size_t total) {
    const std::size_t n = weights.size();
    double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> out(n, 0);
    if (n == 0 || wsum <= 0.0) {
        if (n > 0) {
            // degenerate weights: spread evenly
            for (std::size_t i = 0; i < total; ++i) out[i % n] += 1;
        }
        return out;
    }
    std::vector<double> frac(n);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double share = static_cast<double>(total) * weights[i] / wsum;
        out[i] = static_cast<std::size_t>(std::floor(share));
        frac[i] = share - std::floor(share);
        assigned += out[i];
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t i = 0; assigned < total; ++i) {
        out[order[i % n]] += 1;
        ++assigned;
    }
    return out;
}

}  // namespace

std::vector<std::size_t> sample_client_sizes(int n_clients, std::size_t total_samples,
                                             double exponent, std::size_t min_size,
                                             Rng& rng) {
    (void)rng;
    if (n_clients < 1) throw ConfigError("sample_client_sizes: need at least one client");
    const std::size_t n = static_cast<std::size_t>(n_clients);
    if (total_samples < n * min_size)
        throw ConfigError("sample_client_sizes: total_samples " + std::to_string(total_samples) +
                          " cannot cover " + std::to_string(n) + " clients at min_size " +
                          std::to_string(min_size));
    std::vector<double> weights(n);
    for (std::size_t i = 0; i < n; ++i)
        weights[i] = std::pow(static_cast<double>(i + 1), -exponent);
    std::vector<std::size_t> sizes = largest_remainder(weights, total_samples - n * min_size);
    for (auto& s : sizes) s += min_size;
    return sizes;
}

std::vector<std::vector<std::vector<std::size_t>>> dirichlet_partition(
    const LabeledDataset& dataset, const std::vector<std::size_t>& sizes, double alpha,
    Rng& rng) {
    const std::size_t total_requested = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    if (total_requested > dataset.size())
        throw ConfigError("dirichlet_partition: requested " + std::to_string(total_requested) +
                          " samples from a dataset of " + std::to_string(dataset.size()));
    if (alpha <= 0.0) throw ConfigError("dirichlet_partition: alpha must be positive");

    const std::size_t C = static_cast<std::size_t>(dataset.num_classes);
    auto pools = dataset.indices_by_class();
    // one shuffle per class pool; clients then consume from the tail
    for (std::size_t c = 0; c < C; ++c) {
        const auto perm = rng.permutation(pools[c].size());
        std::vector<std::size_t> shuffled(pools[c].size());
        for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = pools[c][perm[i]];
        pools[c] = std::move(shuffled);
    }

    std::vector<std::vector<std::vector<std::size_t>>> result(sizes.size());
    for (std::size_t k = 0; k < sizes.size(); ++k) {
        auto& mine = result[k];
        mine.assign(C, {});
        const std::vector<double> props = rng.dirichlet(alpha, C);
        std::vector<std::size_t> want = largest_remainder(props, sizes[k]);

        std::size_t missing = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t take = std::min(want[c], pools[c].size());
            for (std::size_t i = 0; i < take; ++i) {
                mine[c].push_back(pools[c].back());
                pools[c].pop_back();
            }
            missing += want[c] - take;
        }
        // pools ran dry for some classes: push the deficit onto classes with
        // remaining capacity, proportionally to this client's preferences
        while (missing > 0) {
            std::vector<double> w(C, 0.0);
            std::size_t capacity = 0;
            for (std::size_t c = 0; c < C; ++c) {
                if (!pools[c].empty()) {
                    w[c] = std::max(props[c], 1e-12);
                    capacity += pools[c].size();
                }
            }
            if (capacity == 0)
                throw ConfigError("dirichlet_partition: ran out of samples while allocating");
            std::vector<std::size_t> extra = largest_remainder(w, std::min(missing, capacity));
            std::size_t placed = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t take = std::min(extra[c], pools[c].size());
                for (std::size_t i = 0; i < take; ++i) {
                    mine[c].push_back(pools[c].back());
                    pools[c].pop_back();
                }
                placed += take;
            }
            missing -= placed;
        }
        for (auto& idx : mine) std::sort(idx.begin(), idx.end());
    }
    return result;
}

std::vector<TaskStream> build_task_streams(int n_clients, int num_tasks,
                                           int classes_per_task, std::size_t total_rounds,
                                           std::size_t min_stage_len, std::uint64_t seed,
                                           bool shuffle_task_classes) {
    if (num_tasks < 1 || classes_per_task < 1)
        throw ConfigError("build_task_streams: tasks and classes_per_task must be positive");
    const std::size_t R = static_cast<std::size_t>(num_tasks);
    if (min_stage_len < 1) min_stage_len = 1;
    if (total_rounds < R * min_stage_len)
        throw ConfigError("build_task_streams: " + std::to_string(total_rounds) +
                          " rounds cannot fit " + std::to_string(R) + " stages of at least " +
                          std::to_string(min_stage_len));

    // shared partition of the global class set into fixed tasks
    const int num_classes = num_tasks * classes_per_task;
    std::vector<int> class_order(static_cast<std::size_t>(num_classes));
    std::iota(class_order.begin(), class_order.end(), 0);
    if (shuffle_task_classes) {
        Rng r = Rng::derive(seed, {Rng::kStreamTag, 0xc1a55e5});
        const auto perm = r.permutation(class_order.size());
        std::vector<int> shuffled(class_order.size());
        for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = class_order[perm[i]];
        class_order = std::move(shuffled);
    }
    std::vector<std::vector<int>> task_classes(R);
    for (std::size_t t = 0; t < R; ++t) {
        task_classes[t].assign(class_order.begin() + static_cast<std::ptrdiff_t>(t) * classes_per_task,
                               class_order.begin() + static_cast<std::ptrdiff_t>(t + 1) * classes_per_task);
        std::sort(task_classes[t].begin(), task_classes[t].end());
    }

    std::vector<TaskStream> streams;
    streams.reserve(static_cast<std::size_t>(n_clients));
    for (int k = 0; k < n_clients; ++k) {
        Rng r = Rng::derive(seed, {Rng::kStreamTag, static_cast<std::uint64_t>(k)});
        const auto order = r.permutation(R);

        // stage lengths: min_stage_len each plus a random composition of the slack
        const std::size_t slack = total_rounds - R * min_stage_len;
        std::vector<std::size_t> cuts(R - 1);
        for (auto& c : cuts) c = static_cast<std::size_t>(r.uniform_int(0, slack));
        std::sort(cuts.begin(), cuts.end());

        TaskStream s;
        std::size_t prev_cut = 0, acc = 0;
        for (std::size_t i = 0; i < R; ++i) {
            const std::size_t cut = i + 1 < R ? cuts[i] : slack;
            acc += min_stage_len + (cut - prev_cut);
            prev_cut = cut;
            s.tasks.push_back(task_classes[order[i]]);
            s.boundaries.push_back(acc);
        }
        streams.push_back(std::move(s));
    }
    return streams;
}

const std::vector<int>& active_task(const TaskStream& stream, std::size_t round) {
    if (stream.boundaries.empty()) throw ConfigError("active_task: empty stream");
    if (round < 1 || round > stream.boundaries.back())
        throw ConfigError("active_task: round " + std::to_string(round) + " outside [1, " +
                          std::to_string(stream.boundaries.back()) + "]");
    const auto it = std::lower_bound(stream.boundaries.begin(), stream.boundaries.end(), round);
    return stream.tasks[static_cast<std::size_t>(it - stream.boundaries.begin())];
}

FederatedSplit generate_split(const LabeledDataset& train, const SplitConfig& config) {
    train.validate();
    if (config.num_tasks * config.classes_per_task != train.num_classes)
        throw ConfigError("generate_split: num_tasks * classes_per_task != dataset classes");
    if (config.subsample <= 0.0 || config.subsample > 1.0)
        throw ConfigError("generate_split: subsample must lie in (0, 1]");

    const auto total =
        static_cast<std::size_t>(std::floor(config.subsample * static_cast<double>(train.size())));

    Rng size_rng = Rng::derive(config.seed, {Rng::kStreamTag, 1});
    const auto sizes = sample_client_sizes(config.n_clients, total, config.powerlaw_exponent,
                                           config.min_size, size_rng);
    Rng part_rng = Rng::derive(config.seed, {Rng::kStreamTag, 2});
    auto indices = dirichlet_partition(train, sizes, config.dirichlet_alpha, part_rng);
    auto streams = build_task_streams(config.n_clients, config.num_tasks,
                                      config.classes_per_task, config.total_rounds,
                                      config.min_stage_len, config.seed,
                                      config.shuffle_task_classes);

    FederatedSplit split;
    split.config = config;
    for (int k = 0; k < config.n_clients; ++k) {
        ClientSplit cs;
        cs.client_id = k;
        cs.sample_indices = std::move(indices[static_cast<std::size_t>(k)]);
        cs.stream = std::move(streams[static_cast<std::size_t>(k)]);
        split.clients.push_back(std::move(cs));
    }
    return split;
}

void validate_split(const FederatedSplit& split, std::size_t dataset_size) {
    std::set<std::size_t> seen;
    for (const auto& client : split.clients) {
        // stream structure
        const auto& s = client.stream;
        if (s.tasks.size() != s.boundaries.size() || s.tasks.empty())
            throw ConfigError("split: malformed stream for client " +
                              std::to_string(client.client_id));
        for (std::size_t i = 1; i < s.boundaries.size(); ++i)
            if (s.boundaries[i] <= s.boundaries[i - 1])
                throw ConfigError("split: boundaries not strictly increasing");
        if (s.boundaries.back() != split.config.total_rounds)
            throw ConfigError("split: stream does not cover all rounds");
        if (s.tasks.size() != static_cast<std::size_t>(split.config.num_tasks))
            throw ConfigError("split: client missing tasks");
        std::set<int> covered;
        for (const auto& task : s.tasks) {
            if (task.empty()) throw ConfigError("split: empty task");
            for (int c : task) covered.insert(c);
        }
        const int num_classes = split.config.num_tasks * split.config.classes_per_task;
        if (covered.size() != static_cast<std::size_t>(num_classes))
            throw ConfigError("split: client stream does not cover every class exactly once");

        // index exclusivity and range
        if (client.sample_indices.size() != static_cast<std::size_t>(num_classes))
            throw ConfigError("split: per-class index table has wrong width");
        for (const auto& idx : client.sample_indices)
            for (std::size_t i : idx) {
                if (i >= dataset_size) throw ConfigError("split: index out of dataset range");
                if (!seen.insert(i).second)
                    throw ConfigError("split: sample assigned to two clients");
            }
    }
}

void save_split(const std::string& path, const FederatedSplit& split) {
    json j;
    j["version"] = 1;
    j["config"] = {{"N", split.config.n_clients},
                   {"num_tasks", split.config.num_tasks},
                   {"classes_per_task", split.config.classes_per_task},
                   {"alpha", split.config.dirichlet_alpha},
                   {"exponent", split.config.powerlaw_exponent},
                   {"seed", split.config.seed},
                   {"total_rounds", split.config.total_rounds},
                   {"min_size", split.config.min_size},
                   {"min_stage_len", split.config.min_stage_len},
                   {"subsample", split.config.subsample},
                   {"shuffle_task_classes", split.config.shuffle_task_classes}};
    json clients = json::array();
    for (const auto& c : split.clients) {
        json jc;
        jc["id"] = c.client_id;
        json idx = json::object();
        for (std::size_t cls = 0; cls < c.sample_indices.size(); ++cls)
            if (!c.sample_indices[cls].empty()) idx[std::to_string(cls)] = c.sample_indices[cls];
        jc["indices"] = idx;
        jc["tasks"] = c.stream.tasks;
        jc["boundaries"] = c.stream.boundaries;
        clients.push_back(std::move(jc));
    }
    j["clients"] = std::move(clients);

    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    out << j.dump();
    if (!out) throw ConfigError("write failed: " + path);
}

FederatedSplit load_split(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError("split file " + path + ": " + e.what());
    }
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw SchemaError("split file " + path + ": unsupported version");

    FederatedSplit split;
    try {
        const json& cfg = j.at("config");
        split.config.n_clients = cfg.at("N").get<int>();
        split.config.num_tasks = cfg.at("num_tasks").get<int>();
        split.config.classes_per_task = cfg.at("classes_per_task").get<int>();
        split.config.dirichlet_alpha = cfg.at("alpha").get<double>();
        split.config.powerlaw_exponent = cfg.at("exponent").get<double>();
        split.config.seed = cfg.at("seed").get<std::uint64_t>();
        split.config.total_rounds = cfg.at("total_rounds").get<std::size_t>();
        split.config.min_size = cfg.at("min_size").get<std::size_t>();
        split.config.min_stage_len = cfg.at("min_stage_len").get<std::size_t>();
        split.config.subsample = cfg.at("subsample").get<double>();
        split.config.shuffle_task_classes = cfg.at("shuffle_task_classes").get<bool>();

        const int num_classes = split.config.num_tasks * split.config.classes_per_task;
        for (const json& jc : j.at("clients")) {
            ClientSplit c;
            c.client_id = jc.at("id").get<int>();
            c.sample_indices.assign(static_cast<std::size_t>(num_classes), {});
            for (const auto& [key, val] : jc.at("indices").items()) {
                const int cls = std::stoi(key);
                if (cls < 0 || cls >= num_classes)
                    throw SchemaError("split file: class key out of range");
                c.sample_indices[static_cast<std::size_t>(cls)] =
                    val.get<std::vector<std::size_t>>();
            }
            c.stream.tasks = jc.at("tasks").get<std::vector<std::vector<int>>>();
            c.stream.boundaries = jc.at("boundaries").get<std::vector<std::size_t>>();
            split.clients.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw SchemaError("split file " + path + ": " + e.what());
    }
    return split;
}

}  // namespace fedsim
