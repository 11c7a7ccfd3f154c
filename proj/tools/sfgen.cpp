// sfgen <stage> --config <path> [--seed N] [--out DIR]

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sfgen/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Successor-feature rectified decoding on toy language models"};
    std::string stage;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    app.add_option("stage", stage, "train-lm | train-features | train-sf | fit-subject | generate | evaluate | oracle-check | all")
        ->required();
    app.add_option("--config", config_path, "config file")->required();
    app.add_option("--seed", seed, "overrides the config seed");
    app.add_option("--out", out, "output directory (default: the config's out key)");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        sfgen::RunContext ctx;
        ctx.config = sfgen::Config::load(config_path);
        if (seed) ctx.config.set("seed", std::to_string(*seed));
        ctx.out_dir = sfgen::resolve_out_dir(ctx.config, out);
        ctx.log = &std::cerr;
        ctx.note("seed=", ctx.seed(), " out=", ctx.out_dir.string());
        if (stage == "all") {
            sfgen::run_pipeline(ctx);
        } else {
            sfgen::run_stage(sfgen::parse_stage(stage), ctx);
        }
    } catch (const sfgen::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const sfgen::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 3;
    } catch (const sfgen::BudgetError& e) {
        std::cerr << "budget error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
