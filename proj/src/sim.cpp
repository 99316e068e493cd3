#include "fedsim/sim.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "fedsim/errors.hpp"
#include "fedsim/fractal.hpp"

namespace fedsim {

using nlohmann::json;

namespace {

std::string fmt_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

RadiusMode radius_mode_from(const std::string& s) {
    if (s == "per_class_mean") return RadiusMode::PerClassMean;
    if (s == "dataset_size") return RadiusMode::DatasetSize;
    throw ConfigError("unknown radius_mode: " + s);
}

NegativesMode negatives_from(const std::string& s) {
    if (s == "per_vector") return NegativesMode::PerVector;
    if (s == "per_class_mean") return NegativesMode::PerClassMean;
    throw ConfigError("unknown negatives mode: " + s);
}

}  // namespace

SimConfig parse_sim_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    SimConfig c;
    try {
        c.split_path = j.value("split", "");
        c.dataset_spec = j.value("dataset", "");
        c.theta0_path = j.value("theta0", "");
        c.out_dir = j.value("out", "");
        c.resume_from = j.value("resume", "");
        c.rounds = j.value("rounds", std::size_t{0});
        c.clients_per_round = j.value("clients_per_round", 5);
        c.lambda_p = j.value("lambda_p", 1e-2);
        c.lambda_r = j.value("lambda_r", 1e-2);
        c.beta = j.value("beta", 0.1);
        c.rho = j.value("rho", 0.5);
        if (j.contains("lr")) {
            c.lr.base = j["lr"].value("base", 1e-3);
            c.lr.halve_every = j["lr"].value("halve_every", std::size_t{1000});
        }
        if (j.contains("flags")) {
            const json& f = j["flags"];
            c.flags.proto_aggr = f.value("proto_aggr", true);
            c.flags.pretrain = f.value("pretrain", false);
            c.flags.repr_loss = f.value("repr_loss", true);
            c.flags.server_aggr = f.value("server_aggr", true);
        }
        c.seed = j.value("seed", std::uint64_t{1});
        c.eval_period = j.value("eval_period", std::size_t{10});
        c.batch = j.value("batch", std::size_t{64});
        c.epochs = j.value("epochs", 1);
        if (j.contains("model")) {
            const json& m = j["model"];
            c.model.encoder = m.value("encoder", "mlp");
            if (m.contains("hidden")) c.model.hidden = m["hidden"].get<std::vector<std::size_t>>();
            c.model.feature_dim = m.value("feature_dim", std::size_t{32});
            c.model.activation = m.value("activation", "tanh");
            if (m.contains("channels")) {
                const auto ch = m["channels"].get<std::vector<std::size_t>>();
                if (ch.size() != 3) throw ConfigError("model.channels must have 3 entries");
                c.model.channels = {ch[0], ch[1], ch[2]};
            }
            c.model.label_augment = m.value("label_augment", false);
        }
        c.radius_mode = radius_mode_from(j.value("radius_mode", std::string("per_class_mean")));
        c.negatives = negatives_from(j.value("negatives", std::string("per_vector")));
        c.literal_prefix_norm = j.value("literal_prefix_norm", false);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (c.split_path.empty()) throw ConfigError("config: 'split' is required");
    if (c.dataset_spec.empty()) throw ConfigError("config: 'dataset' is required");
    if (c.beta < 0.0 || c.beta > 1.0) throw ConfigError("config: beta must lie in [0,1]");
    if (c.rho < 0.0 || c.rho > 1.0) throw ConfigError("config: rho must lie in [0,1]");
    if (c.clients_per_round < 1) throw ConfigError("config: clients_per_round must be >= 1");
    if (c.epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (c.eval_period < 1) throw ConfigError("config: eval_period must be >= 1");
    return c;
}

SimConfig load_sim_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_sim_config(text);
}

std::string sim_config_to_json(const SimConfig& c) {
    json j;
    j["split"] = c.split_path;
    j["dataset"] = c.dataset_spec;
    j["theta0"] = c.theta0_path;
    j["out"] = c.out_dir;
    j["resume"] = c.resume_from;
    j["rounds"] = c.rounds;
    j["clients_per_round"] = c.clients_per_round;
    j["lambda_p"] = c.lambda_p;
    j["lambda_r"] = c.lambda_r;
    j["beta"] = c.beta;
    j["rho"] = c.rho;
    j["lr"] = {{"base", c.lr.base}, {"halve_every", c.lr.halve_every}};
    j["flags"] = {{"proto_aggr", c.flags.proto_aggr},
                  {"pretrain", c.flags.pretrain},
                  {"repr_loss", c.flags.repr_loss},
                  {"server_aggr", c.flags.server_aggr}};
    j["seed"] = c.seed;
    j["eval_period"] = c.eval_period;
    j["batch"] = c.batch;
    j["epochs"] = c.epochs;
    j["model"] = {{"encoder", c.model.encoder},
                  {"hidden", c.model.hidden},
                  {"feature_dim", c.model.feature_dim},
                  {"activation", c.model.activation},
                  {"channels", c.model.channels},
                  {"label_augment", c.model.label_augment}};
    j["radius_mode"] =
        c.radius_mode == RadiusMode::PerClassMean ? "per_class_mean" : "dataset_size";
    j["negatives"] = c.negatives == NegativesMode::PerVector ? "per_vector" : "per_class_mean";
    j["literal_prefix_norm"] = c.literal_prefix_norm;
    return j.dump(2);
}

std::size_t worker_count() {
    const char* env = std::getenv("FEDSIM_WORKERS");
    if (!env) return 1;
    const long n = std::atol(env);
    return n > 0 ? static_cast<std::size_t>(n) : 1;
}

namespace {

ModelConfig build_model_config(const SimConfig& c, const LabeledDataset& train) {
    if (train.size() == 0) throw ConfigError("train set is empty");
    ModelConfig mc;
    const auto& shape = train.samples[0].shape;
    if (c.model.encoder == "mlp") {
        mc.encoder.kind = EncoderConfig::Kind::Mlp;
        mc.encoder.input_dim = train.samples[0].size();  // images are flattened
        mc.encoder.hidden = c.model.hidden;
        mc.encoder.mlp_feature_dim = c.model.feature_dim;
        if (c.model.activation == "tanh")
            mc.encoder.act = Activation::Tanh;
        else if (c.model.activation == "relu")
            mc.encoder.act = Activation::Relu;
        else
            throw ConfigError("unknown activation: " + c.model.activation);
    } else if (c.model.encoder == "conv") {
        if (shape.size() != 3 || shape[1] != shape[2])
            throw ConfigError("conv encoder requires square {C,H,W} samples");
        if (shape[1] % 8 != 0)
            throw ConfigError("conv encoder requires image size divisible by 8");
        mc.encoder.kind = EncoderConfig::Kind::Conv;
        mc.encoder.in_channels = shape[0];
        mc.encoder.image_size = shape[1];
        mc.encoder.channels = c.model.channels;
    } else {
        throw ConfigError("unknown encoder kind: " + c.model.encoder);
    }
    if (c.model.label_augment && shape.size() != 3)
        throw ConfigError("label_augment requires image data");
    const std::size_t stride = c.model.label_augment ? 4 : 1;
    mc.num_outputs = static_cast<std::size_t>(train.num_classes) * stride;
    return mc;
}

StageData stage_for(const Simulation& sim, int client_id, std::size_t round) {
    const ClientSplit& cs = sim.split.clients[static_cast<std::size_t>(client_id)];
    const auto& task = active_task(cs.stream, round);
    StageData stage;
    stage.dataset = &sim.data.train;
    for (int c : task)
        for (std::size_t idx : cs.sample_indices[static_cast<std::size_t>(c)])
            stage.indices.push_back(idx);
    return stage;
}

int stage_index(const TaskStream& stream, std::size_t round) {
    const auto it =
        std::lower_bound(stream.boundaries.begin(), stream.boundaries.end(), round);
    return static_cast<int>(it - stream.boundaries.begin());
}

}  // namespace

Simulation prepare_simulation(const SimConfig& config) {
    Simulation sim;
    sim.config = config;
    sim.split = load_split(config.split_path);
    sim.data = load_dataset(config.dataset_spec);
    sim.data.train.validate();
    if (sim.data.test.size() > 0) sim.data.test.validate();
    validate_split(sim.split, sim.data.train.size());

    sim.total_rounds = config.rounds == 0 ? sim.split.config.total_rounds : config.rounds;
    if (sim.total_rounds > sim.split.config.total_rounds)
        throw ConfigError("config: rounds exceed the split horizon");
    if (config.clients_per_round > sim.split.config.n_clients)
        throw ConfigError("config: clients_per_round exceeds the client count");

    const ModelConfig mc = build_model_config(config, sim.data.train);

    if (!config.resume_from.empty()) {
        sim.server = load_server_state(config.resume_from);
        if (!(sim.server.params.config == mc))
            throw ConfigError("resume: checkpoint model does not match this config");
    } else if (config.flags.pretrain) {
        if (config.theta0_path.empty())
            throw ConfigError("config: pretrain flag set but no theta0 checkpoint given");
        const ModelParams theta0 = load_params(config.theta0_path);
        if (!(theta0.config.encoder == mc.encoder))
            throw ConfigError("theta0: encoder does not match this run's model");
        if (theta0.config.num_outputs < mc.num_outputs)
            throw ConfigError("theta0: pre-trained head narrower than needed");
        sim.server.params = slice_head(theta0, mc.num_outputs);
        sim.server.round = 0;
    } else {
        sim.server.params = init_params(mc, config.seed);
        sim.server.round = 0;
    }
    if (!config.flags.proto_aggr)
        sim.local_stores.assign(static_cast<std::size_t>(sim.split.config.n_clients), {});
    return sim;
}

RoundLog run_round(Simulation& sim, std::size_t round) {
    const auto t0 = std::chrono::steady_clock::now();
    const SimConfig& cfg = sim.config;

    Rng select_rng = Rng::derive(cfg.seed, {Rng::kSelectTag, round});
    const std::vector<int> selected =
        sample_clients(sim.split.config.n_clients, cfg.clients_per_round, select_rng);

    ClientConfig ccfg;
    ccfg.lambda_p = cfg.lambda_p;
    ccfg.lambda_r = cfg.flags.repr_loss ? cfg.lambda_r : 0.0;
    ccfg.epochs = cfg.epochs;
    ccfg.batch = cfg.batch;
    ccfg.schedule = cfg.lr;
    ccfg.radius_mode = cfg.radius_mode;
    ccfg.negatives = cfg.negatives;
    ccfg.label_augment = cfg.model.label_augment;

    struct Slot {
        int client_id = -1;
        bool trained = false;
        ClientRoundResult result;
        std::exception_ptr error;
    };
    std::vector<Slot> slots(selected.size());
    for (std::size_t i = 0; i < selected.size(); ++i) slots[i].client_id = selected[i];

    auto run_client = [&](std::size_t slot_idx) {
        Slot& slot = slots[slot_idx];
        try {
            StageData stage = stage_for(sim, slot.client_id, round);
            if (stage.size() == 0) return;  // nothing to train on this stage
            const GlobalPrototypeStore& store =
                cfg.flags.proto_aggr ? sim.server.store
                                     : sim.local_stores[static_cast<std::size_t>(slot.client_id)];
            Rng rng = Rng::derive(cfg.seed, {Rng::kClientTag, round,
                                             static_cast<std::uint64_t>(slot.client_id)});
            slot.result = local_train(sim.server.params, store, stage, round, ccfg, rng);
            slot.trained = true;
        } catch (...) {
            slot.error = std::current_exception();
        }
    };

    const std::size_t workers = std::min(worker_count(), slots.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < slots.size(); ++i) run_client(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&]() {
                for (std::size_t i = next.fetch_add(1); i < slots.size(); i = next.fetch_add(1))
                    run_client(i);
            });
        for (auto& t : pool) t.join();
    }
    for (const auto& slot : slots)
        if (slot.error) std::rethrow_exception(slot.error);  // no partial aggregation

    std::vector<ClientUpload> uploads;
    std::vector<PrototypeUpload> proto_uploads;
    RoundLog log;
    log.round = round;
    double ce = 0.0, lp = 0.0, lr = 0.0;
    std::size_t traced = 0;
    for (const auto& slot : slots) {
        log.selected.push_back(slot.client_id);
        log.active_stage.push_back(stage_index(
            sim.split.clients[static_cast<std::size_t>(slot.client_id)].stream, round));
        if (!slot.trained) continue;
        uploads.push_back({&slot.result.params, slot.result.radius.support_count});
        proto_uploads.push_back({slot.client_id, slot.result.prototypes, slot.result.radius});
        for (std::size_t i = 0; i < slot.result.trace.ce.size(); ++i) {
            ce += slot.result.trace.ce[i];
            lp += slot.result.trace.lp[i];
            lr += slot.result.trace.lr[i];
            ++traced;
        }
    }
    if (traced > 0) {
        log.mean_ce = ce / static_cast<double>(traced);
        log.mean_lp = lp / static_cast<double>(traced);
        log.mean_lr = lr / static_cast<double>(traced);
    }

    const double rho_eff = cfg.flags.server_aggr ? cfg.rho : 1.0;
    sim.server.params =
        aggregate_models(uploads, sim.server.params, rho_eff, cfg.literal_prefix_norm);

    if (cfg.flags.proto_aggr) {
        aggregate_prototypes(proto_uploads, sim.server.store, cfg.beta, round);
    } else {
        for (const auto& up : proto_uploads)
            aggregate_prototypes({up}, sim.local_stores[static_cast<std::size_t>(up.client_id)],
                                 cfg.beta, round);
    }
    sim.server.round = round;

    if ((round % cfg.eval_period == 0 || round == sim.total_rounds) &&
        sim.data.test.size() > 0) {
        const std::size_t stride = cfg.model.label_augment ? 4 : 1;
        log.accuracy = evaluate(sim.server.params, sim.data.test, stride);
    }

    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    return log;
}

void run_simulation(Simulation& sim) {
    const std::size_t first = sim.server.round + 1;
    for (std::size_t round = first; round <= sim.total_rounds; ++round)
        sim.logs.push_back(run_round(sim, round));
}

double evaluate(const ModelParams& params, const LabeledDataset& test,
                std::size_t label_stride) {
    if (test.size() == 0) throw ConfigError("evaluate: empty test set");
    const auto in_shape = params.config.encoder.input_shape();
    const std::size_t sample_len = Tensor::count(in_shape);
    const std::size_t base_classes = params.config.num_outputs / label_stride;
    constexpr std::size_t kChunk = 512;

    std::size_t correct = 0;
    for (std::size_t start = 0; start < test.size(); start += kChunk) {
        const std::size_t len = std::min(kChunk, test.size() - start);
        InputBatch batch;
        std::vector<std::size_t> shape = {len};
        shape.insert(shape.end(), in_shape.begin(), in_shape.end());
        batch.x = Tensor(shape);
        for (std::size_t i = 0; i < len; ++i) {
            const Tensor& s = test.samples[start + i];
            if (s.size() != sample_len) throw ConfigError("evaluate: sample shape mismatch");
            std::memcpy(batch.x.data() + i * sample_len, s.data(), sample_len * sizeof(double));
            batch.labels.push_back(test.labels[start + i]);
        }
        const FeatureBatch fb = encode(params, batch);
        const Tensor logits = classify(params, fb.features);
        for (std::size_t i = 0; i < len; ++i) {
            const double* row = logits.data() + i * params.config.num_outputs;
            std::size_t best = 0;
            double best_v = row[0];
            for (std::size_t c = 1; c < base_classes; ++c) {
                const double v = row[c * label_stride];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            if (static_cast<int>(best) == batch.labels[i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

std::string metrics_csv(const std::vector<RoundLog>& logs) {
    std::string out = "round,acc,ce,lp,lr,clients,stages\n";
    for (const auto& log : logs) {
        out += std::to_string(log.round);
        out += ',';
        if (log.accuracy) out += fmt_double(*log.accuracy);
        out += ',';
        out += fmt_double(log.mean_ce);
        out += ',';
        out += fmt_double(log.mean_lp);
        out += ',';
        out += fmt_double(log.mean_lr);
        out += ',';
        for (std::size_t i = 0; i < log.selected.size(); ++i) {
            if (i) out += ';';
            out += std::to_string(log.selected[i]);
        }
        out += ',';
        for (std::size_t i = 0; i < log.active_stage.size(); ++i) {
            if (i) out += ';';
            out += std::to_string(log.active_stage[i]);
        }
        out += '\n';
    }
    return out;
}

void emit_metrics(const std::vector<RoundLog>& logs, const SimConfig& config,
                  const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const auto csv_path = std::filesystem::path(out_dir) / "metrics.csv";
    {
        std::ofstream out(csv_path);
        if (!out) throw ConfigError("cannot open " + csv_path.string() + " for writing");
        out << metrics_csv(logs);
        if (!out) throw ConfigError("write failed: " + csv_path.string());
    }

    double best = 0.0;
    double final_acc = 0.0;
    bool any = false;
    for (const auto& log : logs)
        if (log.accuracy) {
            best = std::max(best, *log.accuracy);
            final_acc = *log.accuracy;
            any = true;
        }
    json j;
    j["final_acc"] = any ? json(final_acc) : json(nullptr);
    j["best_acc"] = any ? json(best) : json(nullptr);
    j["rounds"] = logs.size();
    j["config"] = json::parse(sim_config_to_json(config));
    const auto sum_path = std::filesystem::path(out_dir) / "summary.json";
    std::ofstream out(sum_path);
    if (!out) throw ConfigError("cannot open " + sum_path.string() + " for writing");
    out << j.dump(2);
}

}  // namespace fedsim
