#pragma once
// File-driven experiment commands behind the CLI.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "confmoe/config.hpp"

namespace confmoe {

// Train/test splits with masks applied, synthesized or read from disk.
SyntheticData materialize_data(const ExperimentConfig& cfg);

// Applies a seed override to both the data and the model.
void override_seed(ExperimentConfig& cfg, std::uint64_t seed);

struct GenerateSummary {
    std::size_t num_train = 0;
    std::size_t num_test = 0;
    Vector train_missing;
    Vector test_missing;
};

// Writes <out>/train and <out>/test in the dataset directory format.
GenerateSummary run_generate(const ExperimentConfig& cfg, const std::filesystem::path& out);

struct RunSummary {
    double final_f1 = 0.0;
    double final_auc = 0.0;
    double final_usage_entropy = 0.0;
    double oscillation = 0.0;
};

// Writes metrics.csv, selection.csv and finally run_meta.json into `out`.
RunSummary run_train(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Recomputes the summary of a finished run directory from its files.
RunSummary summarize_run_dir(const std::filesystem::path& dir);

std::string sweep_run_name(GateKind gate, Variant variant, ImputeMode impute, std::uint64_t seed);

struct SweepReport {
    std::size_t completed = 0;
    std::size_t skipped = 0;
    std::size_t failed = 0;
};

// Runs every gate x variant x impute x seed combination with at most `jobs`
// concurrent runs, skipping finished run directories, then writes
// summary.csv (and failures.csv when a run failed).
SweepReport run_sweep(const SweepConfig& sweep, const std::filesystem::path& out, std::size_t jobs,
                      std::ostream& log);

struct AnalyzeOptions {
    std::size_t psd_samples = 1000;
    std::size_t psd_n_min = 2;
    std::size_t psd_n_max = 16;
    std::size_t sharp = 1000;
    std::size_t n_experts = 8;
    std::size_t grad_check = 50;
    std::uint64_t seed = 2023;
};

struct AnalyzeReport {
    double psd_min_eigenvalue = 0.0;
    double conflict_negative_rate = 0.0;
    double uniform_load_grad_norm = 0.0;
    double max_jacobian_error = 0.0;
    bool psd_pass = false;
    bool conflict_pass = false;
    bool jacobian_pass = false;
    bool all_pass() const { return psd_pass && conflict_pass && jacobian_pass; }
};

// Runs the PSD audit, the sharp-distribution conflict sweep (written to
// <out>/conflict.csv) and a batch of MoE Jacobian checks, printing one
// PASS/FAIL line per audit.
AnalyzeReport run_analyze(const AnalyzeOptions& opts, const std::filesystem::path& out, std::ostream& log);

}  // namespace confmoe
