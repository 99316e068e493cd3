#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// One client's class-incremental schedule: tasks[i] is the class set active
// for rounds in (boundaries[i-1], boundaries[i]] (1-based rounds, boundary 0
// implicitly 0, last boundary == total rounds).
struct TaskStream {
    std::vector<std::vector<int>> tasks;
    std::vector<std::size_t> boundaries;

    std::size_t num_stages() const { return tasks.size(); }
    bool operator==(const TaskStream&) const = default;
};

struct ClientSplit {
    int client_id = 0;
    // sample_indices[c] = indices into the train set belonging to class c
    std::vector<std::vector<std::size_t>> sample_indices;
    TaskStream stream;

    std::size_t total_samples() const;
    bool operator==(const ClientSplit&) const = default;
};

struct SplitConfig {
    int n_clients = 50;
    int num_tasks = 10;
    int classes_per_task = 10;
    double dirichlet_alpha = 3.0;
    double powerlaw_exponent = 1.5;
    std::uint64_t seed = 0;
    std::size_t total_rounds = 5000;
    std::size_t min_size = 64;        // smallest per-client sample budget
    std::size_t min_stage_len = 1;    // smallest stage length in rounds
    double subsample = 1.0;           // fraction of the train set handed out
    bool shuffle_task_classes = false;

    bool operator==(const SplitConfig&) const = default;
};

struct FederatedSplit {
    SplitConfig config;
    std::vector<ClientSplit> clients;

    bool operator==(const FederatedSplit&) const = default;
};

// Per-client sample budgets from normalized rank^(-exponent) weights with
// largest-remainder rounding; sizes sum to total_samples, each >= min_size,
// non-increasing in rank. The stream argument is reserved for randomized
// variants and is not consumed by this construction.
std::vector<std::size_t> sample_client_sizes(int n_clients, std::size_t total_samples,
                                             double exponent, std::size_t min_size,
                                             Rng& rng);

// Per-client Dirichlet(alpha) class proportions turned into disjoint index
// draws from per-class pools, with proportional redistribution when a pool
// runs dry. result[client][class] = indices.
std::vector<std::vector<std::vector<std::size_t>>> dirichlet_partition(
    const LabeledDataset& dataset, const std::vector<std::size_t>& sizes, double alpha,
    Rng& rng);

// Shared task partition (contiguous class blocks unless shuffled), then an
// independent task permutation and stage boundaries per client.
std::vector<TaskStream> build_task_streams(int n_clients, int num_tasks,
                                           int classes_per_task, std::size_t total_rounds,
                                           std::size_t min_stage_len, std::uint64_t seed,
                                           bool shuffle_task_classes = false);

// The class set active at `round` (1-based, rounds in (T_{i-1}, T_i]).
const std::vector<int>& active_task(const TaskStream& stream, std::size_t round);

FederatedSplit generate_split(const LabeledDataset& train, const SplitConfig& config);

void save_split(const std::string& path, const FederatedSplit& split);
FederatedSplit load_split(const std::string& path);

// Throws ConfigError when any structural invariant is broken (exclusivity,
// index range, task coverage, boundary cover).
void validate_split(const FederatedSplit& split, std::size_t dataset_size);

}  // namespace fedsim
