#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "losatok/optim.hpp"
#include "losatok/sembo.hpp"
#include "losatok/tok.hpp"

namespace losatok::config {

struct CorpusConfig {
    double speech = 0.346; // family mix mirrors the cross-domain proportions
    double music = 0.286;
    double audio = 0.368;
    double file_seconds = 4.0;
};

struct ProbeConfig {
    int classes = 4;
    int items_per_class = 100;
    long long steps = 2000;
    double lr = 0.05;
};

struct Config {
    std::uint64_t seed = 1234;
    int threads = 2;
    std::string corpus_dir = "corpus";
    std::uint64_t teacher_seed = 7;
    sembo::SemboConfig sembo;
    tok::TokConfig tokenizer;
    std::vector<double> kl_sweep{0.0, 1e-4, 1e-3, 1e-2};
    CorpusConfig corpus;
    ProbeConfig probe;
    std::vector<std::string> eval_suites{"recon", "probe", "rtf"};
};

// Parse with defaults for absent fields. Strict mode rejects unknown keys;
// every violation is collected and reported together with its field path.
Config parse_config_json(const nlohmann::json& j, bool strict = true);
Config parse_config_file(const std::string& path, bool strict = true);

// Full echo of the effective configuration, defaults included.
nlohmann::ordered_json config_echo(const Config& c);

} // namespace losatok::config
