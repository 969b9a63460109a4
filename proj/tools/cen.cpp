// Command-line front end: train, infer, eval, gradcheck, ablate.

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

#include "cen/gradcheck.hpp"
#include "cen/pipeline.hpp"

namespace {

int cmd_train(const std::string& config_path, const std::string& resume) {
    const cen::RunConfig cfg = cen::load_run_config(config_path);
    cen::TrainOptions options;
    options.resume_from = resume;
    const auto result = cen::train(cfg, options);
    std::cout << "trained iterations " << result.start_iteration << ".." << result.end_iteration << ", final loss "
              << (result.losses.empty() ? 0.0f : result.losses.back().loss) << "\n"
              << "checkpoint: " << result.final_checkpoint.string() << '\n';
    return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& input, const std::string& output,
              std::size_t tile, std::size_t overlap, std::size_t halo, const std::string& config_path) {
    std::optional<cen::RunConfig> cfg;
    if (!config_path.empty()) cfg = cen::load_run_config(config_path);
    const auto net = cen::load_network(checkpoint, cfg ? &cfg->network : nullptr);
    const cen::Image img = cen::read_image(input);
    cen::write_image(output, cen::enhance(net, img, {tile, overlap, halo}));
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& compare,
             const std::string& csv_path, std::size_t tile) {
    cen::CompareMode mode = cen::CompareMode::model;
    if (compare == "input") mode = cen::CompareMode::input;
    else if (compare == "target") mode = cen::CompareMode::target;
    std::optional<cen::Network<float>> net;
    if (mode == cen::CompareMode::model) {
        if (checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "required when comparing the model output");
        net.emplace(cen::load_network(checkpoint));
    }
    const auto report = cen::evaluate(data, mode, net ? &*net : nullptr, {tile, 0, 0});
    report.write_table(std::cout);
    if (!csv_path.empty()) {
        std::ofstream csv(csv_path);
        if (!csv) throw cen::IoError("cannot write " + csv_path);
        report.write_csv(csv);
    }
    return 0;
}

int cmd_gradcheck(const std::string& fault) {
    if (fault == "conv2d") cen::fault_injection().conv2d_backward = true;
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = cen::run_gradcheck_suite();
    report.print(std::cout);
    std::cout << "elapsed " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
    return report.passed() ? 0 : 1;
}

int cmd_ablate(const std::string& config_path) {
    const cen::RunConfig cfg = cen::load_run_config(config_path);
    const auto rows = cen::ablate(cfg);
    cen::write_ablation_table(std::cout, rows);
    std::cout << "csv: " << (cfg.output_dir / "ablation.csv").string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Context-aware low-light enhancement network: training, inference and evaluation"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "Suppress informational log lines");

    std::string config, resume, checkpoint, input, output, data, compare = "model", csv, fault;
    std::size_t tile = 0, overlap = 0, halo = 0;

    auto* train = app.add_subcommand("train", "Train a network from a run config");
    train->add_option("--config", config, "Run config file")->required()->check(CLI::ExistingFile);
    train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

    auto* infer = app.add_subcommand("infer", "Enhance one image");
    infer->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    infer->add_option("--input", input, "Input image (.png or .ppm)")->required()->check(CLI::ExistingFile);
    infer->add_option("--output", output, "Output image (.png or .ppm)")->required();
    infer->add_option("--tile", tile, "Tile edge in pixels (0 = whole image)");
    infer->add_option("--overlap", overlap, "Tile overlap in pixels (0 = automatic)");
    infer->add_option("--halo", halo, "Context margin around each tile in pixels (0 = receptive radius)");
    infer->add_option("--config", config, "Run config whose architecture must match the checkpoint")
        ->check(CLI::ExistingFile);

    auto* eval = app.add_subcommand("eval", "PSNR/SSIM over a paired dataset");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
    eval->add_option("--data", data, "Dataset root with input/ and target/")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--compare", compare, "What to score against the target")
        ->check(CLI::IsMember({"model", "input", "target"}));
    eval->add_option("--csv", csv, "Write per-image rows to this CSV file");
    eval->add_option("--tile", tile, "Tile edge in pixels (0 = whole image)");

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    gradcheck->add_option("--inject-fault", fault, "Corrupt a backward rule (negative control)")
        ->check(CLI::IsMember({"conv2d"}));

    auto* ablate = app.add_subcommand("ablate", "Train and score the four GC/LC variants");
    ablate->add_option("--config", config, "Run config file")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);
    if (quiet) cen::log::set_sink([](std::string_view level, std::string_view msg) {
        if (level != "info") std::clog << "[" << level << "] " << msg << '\n';
    });

    try {
        if (*train) return cmd_train(config, resume);
        if (*infer) return cmd_infer(checkpoint, input, output, tile, overlap, halo, config);
        if (*eval) return cmd_eval(checkpoint, data, compare, csv, tile);
        if (*gradcheck) return cmd_gradcheck(fault);
        if (*ablate) return cmd_ablate(config);
    } catch (const CLI::Error& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
