#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "vessmpc/case.hpp"

namespace {

int cmd_validate(const std::string& path) {
    auto cs = vessmpc::load_case_file(path);
    fmt::print("case ok: {} buses, {} branches, {} generators, {} vess, {:.1f} MW load\n",
               cs.buses.size(), cs.branches.size(), cs.generators.size(), cs.vess.size(),
               cs.total_load_mw());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"closed-loop dispatch simulator for uncertain storage fleets"};
    app.require_subcommand(1);

    std::string case_path;
    auto* validate = app.add_subcommand("validate", "load a case file and check invariants");
    validate->add_option("case", case_path, "path to the case JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (validate->parsed()) return cmd_validate(case_path);
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return 2;
}
