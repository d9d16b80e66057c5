#include <CLI11.hpp>

#include <iomanip>
#include <iostream>

#include "bsdelab/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Galerkin SPDE / BSDE / control experiments"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path, out = "out";
    std::vector<std::string> overrides;
    app.add_option("-c,--config", config_path, "INI config file")->check(CLI::ExistingFile);
    app.add_option("-o,--out", out, "output directory");
    app.add_option("-s,--set", overrides, "override, section.key=value (repeatable)");

    std::string chosen;
    for (const auto& s : bsdelab::experiment_subcommands())
        app.add_subcommand(s, "run the " + s + " experiment")->callback([&chosen, s] { chosen = s; });
    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = config_path.empty() ? bsdelab::Config{} : bsdelab::Config::from_file(config_path);
        for (const auto& o : overrides) cfg.set(o);
        const auto r = bsdelab::run_experiment(cfg, chosen, out);
        for (const auto& c : r.checks)
            std::cout << (c.passed ? "PASS " : "FAIL ") << std::left << std::setw(40) << c.name << " value=" << c.value
                      << " tol=" << c.tolerance << "  " << c.detail << '\n';
        std::cout << "config " << cfg.hash() << ", artifacts in " << out << '\n';
        return r.passed() ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
