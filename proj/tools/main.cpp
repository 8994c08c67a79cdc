#include <cstdlib>
#include <iostream>

#include <spdlog/spdlog.h>

#include "cli.hpp"

int main(int argc, char** argv) {
    if (const char* lvl = std::getenv("GRIDCASCADE_LOG")) {
        spdlog::set_level(spdlog::level::from_str(lvl));
    } else {
        spdlog::set_level(spdlog::level::warn);
    }
    spdlog::set_default_logger(spdlog::default_logger());
    return gridcascade::cli::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
