// fedsim command line: split generation, fractal pre-training data, server
// pre-training, federated training runs and checkpoint evaluation.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fedsim/dataset.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/fractal.hpp"
#include "fedsim/sim.hpp"
#include "fedsim/splitgen.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

int cmd_gen_split(const std::string& dataset_spec, fedsim::SplitConfig cfg,
                  const std::string& out) {
    const auto data = fedsim::load_dataset(dataset_spec);
    const auto split = fedsim::generate_split(data.train, cfg);
    fedsim::validate_split(split, data.train.size());
    fedsim::save_split(out, split);
    std::size_t total = 0;
    for (const auto& c : split.clients) total += c.total_samples();
    std::cout << "wrote " << out << ": " << split.clients.size() << " clients, " << total
              << " samples, " << cfg.num_tasks << " tasks x " << cfg.classes_per_task
              << " classes, " << cfg.total_rounds << " rounds\n";
    return 0;
}

int cmd_gen_fractals(int classes, int per_class, std::size_t size, std::uint64_t seed,
                     std::size_t iterations, const std::string& out) {
    fedsim::FractalBuildConfig cfg;
    cfg.render_iterations = iterations;
    const auto ds = fedsim::build_pretrain_dataset(classes, per_class, size, seed, cfg);
    fedsim::save_fractal_dataset(out, ds);
    std::cout << "wrote " << out << ": " << classes << " classes x " << per_class << " images at "
              << size << "px (codes in " << out << ".codes.json)\n";
    return 0;
}

int cmd_pretrain(const std::string& data_path, int epochs, std::size_t batch, double lr,
                 std::uint64_t seed, const std::string& encoder,
                 const std::array<std::size_t, 3>& channels, std::size_t in_channels,
                 const std::string& out) {
    const fedsim::LabeledDataset images = fedsim::load_fractal_images(data_path);
    if (images.size() == 0) throw fedsim::ConfigError("pretrain: empty dataset");

    fedsim::LabeledDataset train = images;
    if (in_channels > 1) {
        // replicate the grayscale plane for encoders expecting more channels
        for (auto& img : train.samples) {
            const std::size_t s = img.shape[1];
            fedsim::Tensor wide({in_channels, s, s});
            for (std::size_t c = 0; c < in_channels; ++c)
                std::copy(img.v.begin(), img.v.end(),
                          wide.v.begin() + static_cast<std::ptrdiff_t>(c * s * s));
            img = std::move(wide);
        }
    }

    fedsim::ModelConfig mc;
    if (encoder != "conv") throw fedsim::ConfigError("pretrain: only the conv encoder is supported");
    mc.encoder.kind = fedsim::EncoderConfig::Kind::Conv;
    mc.encoder.in_channels = train.samples[0].shape[0];
    mc.encoder.image_size = train.samples[0].shape[1];
    mc.encoder.channels = channels;
    mc.num_outputs = static_cast<std::size_t>(train.num_classes);

    fedsim::ModelParams model = fedsim::init_params(mc, seed);
    fedsim::LrSchedule schedule{lr, 0};
    std::vector<double> trace;
    model = fedsim::pretrain(model, train, epochs, batch, schedule, seed, &trace);
    fedsim::save_params(out, model);
    const double first = trace.empty() ? 0.0 : trace.front();
    const double last = trace.empty() ? 0.0 : trace.back();
    std::cout << "wrote " << out << " after " << epochs << " epoch(s); loss " << first << " -> "
              << last << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& split_override,
              const std::string& theta0_override, const std::string& out_override,
              const std::string& resume_override) {
    fedsim::SimConfig cfg = fedsim::load_sim_config(config_path);
    if (!split_override.empty()) cfg.split_path = split_override;
    if (!theta0_override.empty()) cfg.theta0_path = theta0_override;
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (!resume_override.empty()) cfg.resume_from = resume_override;
    if (cfg.out_dir.empty()) throw fedsim::ConfigError("train: no output directory configured");

    fedsim::Simulation sim = fedsim::prepare_simulation(cfg);
    fedsim::run_simulation(sim);
    fedsim::emit_metrics(sim.logs, cfg, cfg.out_dir);
    fedsim::save_server_state(
        (std::filesystem::path(cfg.out_dir) / "checkpoint.bin").string(), sim.server);

    double final_acc = -1.0;
    for (const auto& log : sim.logs)
        if (log.accuracy) final_acc = *log.accuracy;
    std::cout << "finished " << sim.logs.size() << " rounds";
    if (final_acc >= 0.0) std::cout << ", final top-1 " << final_acc;
    std::cout << "; metrics in " << cfg.out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& test_spec,
             std::size_t label_stride) {
    const fedsim::ServerState state = fedsim::load_server_state(checkpoint);
    const auto data = fedsim::load_dataset(test_spec);
    const fedsim::LabeledDataset& test = data.test.size() > 0 ? data.test : data.train;
    const double acc = fedsim::evaluate(state.params, test, label_stride);
    std::cout << "top-1 accuracy over " << test.size() << " samples: " << acc << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"asynchronous federated continual learning simulator"};
    app.require_subcommand(1);

    // gen-split
    auto* gen = app.add_subcommand("gen-split", "generate a non-IID federated split");
    std::string gs_dataset = "synthetic";
    fedsim::SplitConfig gs_cfg;
    std::string gs_out = "split.json";
    gen->add_option("--dataset", gs_dataset, "dataset spec (synthetic[:...]|cifar100:<dir>|fractals:<bin>)");
    gen->add_option("--clients", gs_cfg.n_clients, "number of clients");
    gen->add_option("--tasks", gs_cfg.num_tasks, "number of tasks");
    gen->add_option("--classes-per-task", gs_cfg.classes_per_task, "classes per task");
    gen->add_option("--alpha", gs_cfg.dirichlet_alpha, "Dirichlet concentration");
    gen->add_option("--exponent", gs_cfg.powerlaw_exponent, "power-law size exponent");
    gen->add_option("--rounds", gs_cfg.total_rounds, "total communication rounds");
    gen->add_option("--seed", gs_cfg.seed, "split seed");
    gen->add_option("--min-size", gs_cfg.min_size, "minimum samples per client");
    gen->add_option("--min-stage-len", gs_cfg.min_stage_len, "minimum rounds per stage");
    gen->add_option("--subsample", gs_cfg.subsample, "fraction of the train set to assign");
    gen->add_flag("--shuffle-task-classes", gs_cfg.shuffle_task_classes,
                  "shuffle class-to-task assignment");
    gen->add_option("--out", gs_out, "output split path");

    // gen-fractals
    auto* gf = app.add_subcommand("gen-fractals", "render a labeled fractal dataset");
    int gf_classes = 1000, gf_per_class = 10;
    std::size_t gf_size = 32, gf_iters = 50000;
    std::uint64_t gf_seed = 1;
    std::string gf_out = "fractals.bin";
    gf->add_option("--classes", gf_classes, "number of fractal classes");
    gf->add_option("--per-class", gf_per_class, "images per class");
    gf->add_option("--size", gf_size, "image side length");
    gf->add_option("--iterations", gf_iters, "chaos-game iterations per image");
    gf->add_option("--seed", gf_seed, "generation seed");
    gf->add_option("--out", gf_out, "output dataset path");

    // pretrain
    auto* pt = app.add_subcommand("pretrain", "pre-train the server model on fractal images");
    std::string pt_data = "fractals.bin", pt_out = "theta0.bin", pt_encoder = "conv";
    int pt_epochs = 1;
    std::size_t pt_batch = 32, pt_in_channels = 1;
    double pt_lr = 1e-3;
    std::uint64_t pt_seed = 1;
    std::array<std::size_t, 3> pt_channels = {16, 32, 64};
    pt->add_option("--data", pt_data, "fractal dataset path");
    pt->add_option("--epochs", pt_epochs, "training epochs");
    pt->add_option("--batch", pt_batch, "batch size");
    pt->add_option("--lr", pt_lr, "learning rate");
    pt->add_option("--seed", pt_seed, "init/shuffle seed");
    pt->add_option("--encoder", pt_encoder, "encoder kind (conv)");
    pt->add_option("--channels", pt_channels, "conv channels per block");
    pt->add_option("--in-channels", pt_in_channels,
                   "input channels (grayscale replicated when > 1)");
    pt->add_option("--out", pt_out, "output checkpoint path");

    // train
    auto* tr = app.add_subcommand("train", "run a federated training simulation");
    std::string tr_config, tr_split, tr_theta0, tr_out, tr_resume;
    tr->add_option("--config", tr_config, "run config JSON")->required();
    tr->add_option("--split", tr_split, "override the split path");
    tr->add_option("--theta0", tr_theta0, "override the pre-trained checkpoint");
    tr->add_option("--out", tr_out, "override the output directory");
    tr->add_option("--resume", tr_resume, "resume from a server checkpoint");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a server checkpoint");
    std::string ev_ckpt, ev_test;
    std::size_t ev_stride = 1;
    ev->add_option("--checkpoint", ev_ckpt, "server checkpoint path")->required();
    ev->add_option("--test", ev_test, "test dataset spec")->required();
    ev->add_option("--label-stride", ev_stride, "head stride (4 with label augmentation)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_split(gs_dataset, gs_cfg, gs_out);
        if (gf->parsed())
            return cmd_gen_fractals(gf_classes, gf_per_class, gf_size, gf_seed, gf_iters, gf_out);
        if (pt->parsed())
            return cmd_pretrain(pt_data, pt_epochs, pt_batch, pt_lr, pt_seed, pt_encoder,
                                pt_channels, pt_in_channels, pt_out);
        if (tr->parsed()) return cmd_train(tr_config, tr_split, tr_theta0, tr_out, tr_resume);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_test, ev_stride);
    } catch (const fedsim::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const fedsim::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return 0;
}
