#include <fmt/format.h>

#include <CLI11.hpp>
#include <iostream>

#include "steerkit/error.hpp"
#include "steerkit/fixtures.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Builds the demo model, SAE and datasets", "steerkit-fixtures"};
    std::string out = "fixtures";
    std::string stamp;
    steerkit::fixtures::PretrainConfig cfg;
    bool quiet = false;
    app.add_option("--out,-o", out, "Output directory")->capture_default_str();
    app.add_option("--steps", cfg.steps, "Pretraining steps")->capture_default_str();
    app.add_option("--batch-size", cfg.batch_size, "Passages per step")->capture_default_str();
    app.add_option("--lr", cfg.learning_rate, "Adam learning rate")->capture_default_str();
    app.add_option("--seed", cfg.seed, "Seed")->capture_default_str();
    app.add_option("--stamp", stamp, "Skip the build when this file exists; touch it afterwards");
    app.add_flag("--quiet,-q", quiet, "Do not print progress");
    CLI11_PARSE(app, argc, argv);

    if (!stamp.empty() && std::filesystem::exists(stamp) &&
        std::filesystem::exists(steerkit::fixtures::fixture_paths(out).model)) {
        if (!quiet) std::cout << "fixtures up to date in " << out << '\n';
        return 0;
    }
    try {
        const int every = std::max(1, cfg.steps / 20);
        const auto paths = steerkit::fixtures::write_fixtures(out, cfg, [&](int step, double loss) {
            if (!quiet && (step % every == 0 || step == 1)) std::cout << fmt::format("step {} loss {:.4f}\n", step, loss);
        });
        if (!stamp.empty()) std::ofstream(stamp) << "ok\n";
        std::cout << fmt::format("wrote {}, {} and {}\n", paths.model.string(), paths.sae.string(),
                                 paths.datasets_dir.string());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
