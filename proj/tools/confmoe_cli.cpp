// confmoe: generate datasets, train models, run sweeps and theory audits.
//
// Exit codes: 0 success, 1 configuration / I/O error, 2 numerical failure,
// 3 audit failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "confmoe/error.hpp"
#include "confmoe/format.hpp"
#include "confmoe/runner.hpp"

namespace {

using confmoe::ExperimentConfig;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitAudit = 3;

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    std::string out;
};

nlohmann::json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw confmoe::ConfigError("cannot open config " + path);
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw confmoe::ConfigError(path + ": " + e.what());
    }
}

bool mentions_seed(const nlohmann::json& j) {
    for (const char* section : {"synth", "model"}) {
        if (j.contains(section) && j.at(section).is_object() && j.at(section).contains("seed")) return true;
    }
    return false;
}

// Seed precedence: --seed, then the config file, then CONFMOE_SEED, then defaults.
std::optional<std::uint64_t> env_seed() {
    const char* text = std::getenv("CONFMOE_SEED");
    if (text == nullptr || *text == '\0') return std::nullopt;
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(text, &used);
        if (used != std::string(text).size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw confmoe::ConfigError(std::string("CONFMOE_SEED is not an unsigned integer: ") + text);
    }
}

ExperimentConfig resolve_experiment(const CommonFlags& flags) {
    nlohmann::json j = nlohmann::json::object();
    if (!flags.config.empty()) j = read_json(flags.config);
    ExperimentConfig cfg = confmoe::parse_experiment_config(j);
    if (flags.seed) {
        confmoe::override_seed(cfg, *flags.seed);
    } else if (!mentions_seed(j)) {
        if (const auto s = env_seed()) confmoe::override_seed(cfg, *s);
    }
    if (!flags.out.empty()) cfg.output_dir = flags.out;
    return cfg;
}

std::string rates_text(const confmoe::Vector& rates) {
    std::string s = "[";
    for (std::size_t i = 0; i < rates.size(); ++i) {
        if (i) s += ",";
        s += confmoe::format_real(rates[i]);
    }
    return s + "]";
}

int cmd_generate(const CommonFlags& flags) {
    const ExperimentConfig cfg = resolve_experiment(flags);
    const auto summary = confmoe::run_generate(cfg, cfg.output_dir);
    std::cout << "generated " << summary.num_train << " train / " << summary.num_test << " test instances in "
              << cfg.output_dir.string() << "; missing rates train=" << rates_text(summary.train_missing)
              << " test=" << rates_text(summary.test_missing) << '\n';
    return kExitOk;
}

int cmd_train(const CommonFlags& flags) {
    const ExperimentConfig cfg = resolve_experiment(flags);
    const auto s = confmoe::run_train(cfg, cfg.output_dir);
    std::cout << "trained " << confmoe::to_string(cfg.model.gate) << " (" << confmoe::to_string(cfg.model.variant)
              << ", impute=" << confmoe::to_string(cfg.model.impute) << ", seed=" << cfg.model.seed
              << ") -> " << cfg.output_dir.string() << "; final f1=" << confmoe::format_real(s.final_f1)
              << " auc=" << confmoe::format_real(s.final_auc)
              << " usage_entropy=" << confmoe::format_real(s.final_usage_entropy)
              << " oscillation=" << confmoe::format_real(s.oscillation) << '\n';
    return kExitOk;
}

int cmd_sweep(const CommonFlags& flags) {
    nlohmann::json j = nlohmann::json::object();
    if (!flags.config.empty()) j = read_json(flags.config);
    confmoe::SweepConfig sweep = confmoe::parse_sweep_config(j);
    if (flags.seed) sweep.seeds = {*flags.seed};
    const fs::path out = flags.out.empty() ? sweep.base.output_dir : fs::path(flags.out);
    const auto report = confmoe::run_sweep(sweep, out, flags.jobs, std::cout);
    std::cout << "sweep: " << report.completed << " completed, " << report.skipped << " skipped, " << report.failed
              << " failed -> " << (out / "summary.csv").string() << '\n';
    return report.failed == 0 ? kExitOk : kExitNumerical;
}

int cmd_analyze(const CommonFlags& flags, const confmoe::AnalyzeOptions& base) {
    confmoe::AnalyzeOptions opts = base;
    if (flags.seed) {
        opts.seed = *flags.seed;
    } else if (const auto s = env_seed()) {
        opts.seed = *s;
    }
    const fs::path out = flags.out.empty() ? fs::path("runs/analyze") : fs::path(flags.out);
    const auto report = confmoe::run_analyze(opts, out, std::cout);
    return report.all_pass() ? kExitOk : kExitAudit;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Confidence-guided sparse mixture-of-experts lab"};
    app.require_subcommand(1);

    CommonFlags flags;
    confmoe::AnalyzeOptions analyze_opts;

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config, "JSON config file");
        sub->add_option("--seed", flags.seed, "seed overriding the config (data and model)");
        sub->add_option("--jobs", flags.jobs, "concurrent runs for sweep")->check(CLI::PositiveNumber);
        sub->add_option("--out", flags.out, "output directory (overrides output_dir)");
    };

    auto* generate = app.add_subcommand("generate", "write a synthetic dataset directory (train/ and test/)");
    auto* train = app.add_subcommand("train", "train one model and write metrics.csv / selection.csv / run_meta.json");
    auto* sweep = app.add_subcommand("sweep", "run every gate x variant x impute x seed combination");
    auto* analyze = app.add_subcommand("analyze", "PSD, gradient-conflict and Jacobian audits");
    for (auto* sub : {generate, train, sweep, analyze}) add_common(sub);
    analyze->add_option("--psd-samples", analyze_opts.psd_samples, "Dirichlet samples for the PSD audit");
    analyze->add_option("--sharp", analyze_opts.sharp, "sharp distributions for the conflict sweep");
    analyze->add_option("--n-experts", analyze_opts.n_experts, "experts in the conflict sweep")
        ->check(CLI::Range(2, 1 << 16));
    analyze->add_option("--grad-check", analyze_opts.grad_check, "random MoE Jacobian checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*generate) return cmd_generate(flags);
        if (*train) return cmd_train(flags);
        if (*sweep) return cmd_sweep(flags);
        if (*analyze) return cmd_analyze(flags, analyze_opts);
    } catch (const confmoe::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const confmoe::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    }
    return kExitConfig;
}
