#include "insight/common.hpp"
#include "insight/toy_corpus.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Writes the synthetic toy corpus"};
    std::string out = "data/toy";
    std::uint64_t seed = 2024;
    app.add_option("--out", out, "output directory");
    app.add_option("--seed", seed, "generator seed");
    CLI11_PARSE(app, argc, argv);
    try {
        insight::write_toy_corpus(out, seed);
    } catch (const insight::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    std::cout << "wrote " << out << '\n';
    return 0;
}
