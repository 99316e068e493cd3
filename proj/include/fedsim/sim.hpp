#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedsim/client.hpp"
#include "fedsim/dataset.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/server.hpp"
#include "fedsim/splitgen.hpp"

namespace fedsim {

struct AblationFlags {
    bool proto_aggr = true;
    bool pretrain = false;
    bool repr_loss = true;
    bool server_aggr = true;
};

struct ModelSpec {
    std::string encoder = "mlp";  // "mlp" | "conv"
    std::vector<std::size_t> hidden = {64};
    std::size_t feature_dim = 32;
    std::string activation = "tanh";
    std::array<std::size_t, 3> channels = {16, 32, 64};
    bool label_augment = false;
};

struct SimConfig {
    std::string split_path;
    std::string dataset_spec;
    std::string theta0_path;
    std::string out_dir;
    std::string resume_from;

    std::size_t rounds = 0;  // 0: run the split's full horizon
    int clients_per_round = 5;
    double lambda_p = 1e-2;
    double lambda_r = 1e-2;
    double beta = 0.1;
    double rho = 0.5;
    LrSchedule lr;
    AblationFlags flags;
    std::uint64_t seed = 1;
    std::size_t eval_period = 10;
    std::size_t batch = 64;
    int epochs = 1;
    ModelSpec model;
    RadiusMode radius_mode = RadiusMode::PerClassMean;
    NegativesMode negatives = NegativesMode::PerVector;
    bool literal_prefix_norm = false;
};

SimConfig parse_sim_config(const std::string& json_text);
SimConfig load_sim_config(const std::string& path);
std::string sim_config_to_json(const SimConfig& config);

struct RoundLog {
    std::size_t round = 0;
    std::vector<int> selected;
    std::vector<int> active_stage;  // stage index per selected client
    double mean_ce = 0.0;
    double mean_lp = 0.0;
    double mean_lr = 0.0;
    std::optional<double> accuracy;  // only on evaluation rounds
    double wall_ms = 0.0;
};

struct Simulation {
    SimConfig config;
    FederatedSplit split;
    DatasetPair data;
    ServerState server;
    std::vector<GlobalPrototypeStore> local_stores;  // used when proto_aggr is off
    std::vector<RoundLog> logs;
    std::size_t total_rounds = 0;
};

// Builds datasets/split/model and the initial server state (random init, or
// sliced pre-trained weights when the pretrain flag is set).
Simulation prepare_simulation(const SimConfig& config);

// One communication round: select K clients, run their local rounds from the
// current global model, aggregate models and prototypes, evaluate on schedule.
RoundLog run_round(Simulation& sim, std::size_t round);

// The full horizon. Appends one RoundLog per round and leaves the final state
// in sim.server.
void run_simulation(Simulation& sim);

// Top-1 accuracy over all classes; rotation-augmented heads are read on the
// rotation-0 block (label_stride = 4).
double evaluate(const ModelParams& params, const LabeledDataset& test,
                std::size_t label_stride = 1);

// metrics.csv (one row per round, stable column order, exact round-trip
// number formatting) and summary.json ({final_acc, best_acc, config}).
void emit_metrics(const std::vector<RoundLog>& logs, const SimConfig& config,
                  const std::string& out_dir);

std::string metrics_csv(const std::vector<RoundLog>& logs);

// FEDSIM_WORKERS env var; defaults to 1 (sequential clients).
std::size_t worker_count();

}  // namespace fedsim
