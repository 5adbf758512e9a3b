#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "msdet/detector.hpp"
#include "msdet/evaluator.hpp"
#include "msdet/model.hpp"
#include "msdet/partition.hpp"
#include "msdet/synthdata.hpp"
#include "msdet/trainer.hpp"

namespace msdet {

struct DataConfig {
    SceneSpec scene;
    std::size_t n_train = 300;
    std::size_t n_val = 60;
    AugmentSpec augment;
};

struct SweepConfig {
    std::vector<ScaleRange> buckets{{6, 16}, {16, 48}, {48, 96}};
    std::vector<int> stages{1, 2, 3, 4};
};

/// Everything one run needs. Every field has a default except the seed,
/// which must come from the file, a flag or the environment.
struct RunConfig {
    std::optional<std::uint64_t> seed;
    std::filesystem::path out_dir = "out";
    DataConfig data;
    std::string scheme = "three";                           ///< name, slug or path to a scheme JSON file
    std::vector<std::string> compare{"one", "three", "three-even"};
    std::vector<std::uint64_t> seeds{1, 2, 3};              ///< repeat seeds for comparison tables
    TrainMode mode = TrainMode::joint;
    BackboneSpec backbone;
    HeadSpec head;
    TrainerConfig trainer;
    double compress_factor = 0.5;
    SweepConfig sweep;
    int threads = 0;                                        ///< 0 leaves the OpenMP default
    std::filesystem::path base_dir;                         ///< directory of the config file
};

/// Desk-scale defaults used by the experiments and shipped configs.
RunConfig default_run_config();

/// Parses a JSON config on top of the defaults. Unknown keys and
/// out-of-range values raise ConfigError naming the field. `base_dir`
/// resolves relative file references (scheme files).
RunConfig parse_run_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Full config as JSON, every default spelled out.
std::string run_config_json(const RunConfig& cfg);

void validate_run_config(const RunConfig& cfg);

/// Resolves a scheme reference against the desk catalogue, then as a file.
SplitScheme resolve_scheme(const std::string& ref, const std::filesystem::path& base_dir = {});

} // namespace msdet
