#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msdet/config.hpp"
#include "msdet/trainer.hpp"

namespace msdet {

struct ExperimentData {
    Dataset train; ///< generated then augmented
    Dataset val;
};

/// Training and validation scenes drawn from independent streams of `seed`.
ExperimentData make_data(const DataConfig& cfg, std::uint64_t seed);

/// Trains the scheme in the given mode and returns the run, whose
/// final_report holds validation AP per bucket.
TrainResult run_scheme(const ExperimentData& data, const SplitScheme& scheme, TrainMode mode,
                       const BackboneSpec& backbone, const HeadSpec& head, const TrainerConfig& cfg,
                       std::uint64_t seed);

struct ResultRow {
    std::string label;
    std::uint64_t seed = 0;
    std::map<std::string, double> ap; ///< bucket name -> AP
};

double median(std::vector<double> v);

/// Median AP per label for one bucket.
std::map<std::string, double> median_by_label(std::span<const ResultRow> rows, const std::string& bucket);

/// label,seed,<bucket>... rows followed by label,median,... rows.
std::string results_csv(std::span<const ResultRow> rows, std::span<const std::string> buckets);

struct SweepTable {
    ScaleRange bucket;
    std::vector<SweepRow> rows;
    int argmax_stride = 0;
};

std::vector<SweepTable> run_sweep(const RunConfig& cfg, std::uint64_t seed);
std::string sweep_csv(std::span<const SweepTable> tables);

} // namespace msdet
