#include "confmoe/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "confmoe/analysis.hpp"
#include "confmoe/error.hpp"
#include "confmoe/format.hpp"
#include "confmoe/rng.hpp"

namespace confmoe {

namespace fs = std::filesystem;

SyntheticData materialize_data(const ExperimentConfig& cfg) {
    if (cfg.dataset_dir) {
        return {load_dataset(*cfg.dataset_dir / "train"), load_dataset(*cfg.dataset_dir / "test")};
    }
    const SyntheticData raw = generate(cfg.synth);
    return {apply_protocol(raw.train, cfg.protocol, Split::Train, cfg.synth.seed),
            apply_protocol(raw.test, cfg.protocol, Split::Test, cfg.synth.seed)};
}

void override_seed(ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.synth.seed = seed;
    cfg.model.seed = seed;
}

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    return f;
}

}  // namespace

GenerateSummary run_generate(const ExperimentConfig& cfg, const fs::path& out) {
    const SyntheticData data = materialize_data(cfg);
    nlohmann::json meta{{"synth", to_json(cfg.synth)}, {"protocol", to_json(cfg.protocol)}};
    meta["split"] = "train";
    save_dataset(data.train, out / "train", meta.dump(2));
    meta["split"] = "test";
    save_dataset(data.test, out / "test", meta.dump(2));
    return {data.train.size(), data.test.size(), missing_rates(data.train), missing_rates(data.test)};
}

RunSummary run_train(const ExperimentConfig& cfg, const fs::path& out) {
    const SyntheticData data = materialize_data(cfg);
    const RunResult result = train_model(cfg.model, data.train, data.test);
    fs::create_directories(out);
    {
        auto f = open_out(out / "metrics.csv");
        write_metrics_csv(result.metrics, f);
    }
    {
        auto f = open_out(out / "selection.csv");
        result.trace.write_csv(f);
    }
    {
        auto f = open_out(out / "run_meta.json");
        nlohmann::json meta = to_json(cfg);
        meta["output_dir"] = out.string();
        f << meta.dump(2) << '\n';
    }
    return summarize_run_dir(out);
}

namespace {

std::vector<std::vector<std::string>> read_rows(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::getline(f, line);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cells.push_back(c);
        rows.push_back(std::move(cells));
    }
    return rows;
}

}  // namespace

RunSummary summarize_run_dir(const fs::path& dir) {
    RunSummary s;
    const auto metrics = read_rows(dir / "metrics.csv");
    const std::vector<std::string>* last = nullptr;
    for (const auto& r : metrics)
        if (r.at(1) == "test") last = &r;
    if (last == nullptr && !metrics.empty()) last = &metrics.back();
    if (last != nullptr) {
        s.final_f1 = std::stod(last->at(5));
        s.final_auc = std::stod(last->at(6));
    }

    const auto sel = read_rows(dir / "selection.csv");
    std::size_t num_experts = 0;
    for (const auto& r : sel) num_experts = std::max<std::size_t>(num_experts, std::stoul(r.at(1)) + 1);
    SelectionTrace rebuilt(num_experts);
    for (const auto& r : sel) {
        const std::uint64_t epoch = std::stoull(r.at(0));
        const std::size_t expert = std::stoul(r.at(1));
        const std::size_t count = std::stoul(r.at(2));
        rebuilt.touch(epoch);
        TopK one(count, 1);
        for (std::size_t i = 0; i < count; ++i) one.at(i, 0) = expert;
        rebuilt.record(one, epoch);
    }
    if (rebuilt.num_epochs() >= 1) {
        const std::uint64_t last_epoch = rebuilt.epoch_list().back();
        s.final_usage_entropy = rebuilt.total(last_epoch) > 0 ? usage_entropy(rebuilt, last_epoch) : 0.0;
    }
    s.oscillation = rebuilt.num_epochs() >= 2 ? selection_oscillation(rebuilt) : 0.0;
    return s;
}

std::string sweep_run_name(GateKind gate, Variant variant, ImputeMode impute, std::uint64_t seed) {
    return std::string(to_string(gate)) + "_" + std::string(to_string(variant)) + "_" + std::string(to_string(impute)) +
           "_s" + std::to_string(seed);
}

SweepReport run_sweep(const SweepConfig& sweep, const fs::path& out, std::size_t jobs, std::ostream& log) {
    struct Job {
        ExperimentConfig cfg;
        fs::path dir;
        std::string name;
    };
    std::vector<Job> work;
    for (GateKind g : sweep.gates)
        for (Variant v : sweep.variants)
            for (ImputeMode m : sweep.impute)
                for (std::uint64_t seed : sweep.seeds) {
                    ExperimentConfig cfg = sweep.base;
                    cfg.model.gate = g;
                    cfg.model.variant = v;
                    cfg.model.impute = m;
                    override_seed(cfg, seed);
                    const std::string name = sweep_run_name(g, v, m, seed);
                    cfg.output_dir = out / name;
                    work.push_back({cfg, out / name, name});
                }

    fs::create_directories(out);
    std::vector<std::string> errors(work.size());
    std::vector<std::uint8_t> ok(work.size(), 0);
    SweepReport report;
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t i = next++; i < work.size(); i = next++) {
            const Job& job = work[i];
            if (fs::exists(job.dir / "run_meta.json")) {
                std::lock_guard lock(mu);
                ++report.skipped;
                ok[i] = 1;
                log << "skip " << job.name << " (finished)\n";
                continue;
            }
            try {
                run_train(job.cfg, job.dir);
                std::lock_guard lock(mu);
                ++report.completed;
                ok[i] = 1;
                log << "done " << job.name << '\n';
            } catch (const std::exception& e) {
                std::lock_guard lock(mu);
                ++report.failed;
                errors[i] = e.what();
                log << "FAILED " << job.name << ": " << e.what() << '\n';
            }
        }
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, work.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    auto summary = open_out(out / "summary.csv");
    summary << "gate,variant,impute,seed,final_f1,final_auc,final_usage_entropy,oscillation\n";
    for (std::size_t i = 0; i < work.size(); ++i) {
        if (!ok[i]) continue;
        const auto& m = work[i].cfg.model;
        const RunSummary s = summarize_run_dir(work[i].dir);
        summary << to_string(m.gate) << ',' << to_string(m.variant) << ',' << to_string(m.impute) << ',' << m.seed << ','
                << format_real(s.final_f1) << ',' << format_real(s.final_auc) << ','
                << format_real(s.final_usage_entropy) << ',' << format_real(s.oscillation) << '\n';
    }
    if (report.failed > 0) {
        auto failures = open_out(out / "failures.csv");
        failures << "run,error\n";
        for (std::size_t i = 0; i < work.size(); ++i) {
            if (errors[i].empty()) continue;
            std::string msg = errors[i];
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            failures << work[i].name << ',' << msg << '\n';
        }
    }
    return report;
}

AnalyzeReport run_analyze(const AnalyzeOptions& opts, const fs::path& out, std::ostream& log) {
    AnalyzeReport report;
    fs::create_directories(out);

    auto psd_rng = make_rng(opts.seed, {0x505344ULL});
    const PsdAudit psd = psd_audit(opts.psd_samples, opts.psd_n_min, opts.psd_n_max, psd_rng);
    report.psd_min_eigenvalue = psd.min_eigenvalue;
    report.psd_pass = psd.min_eigenvalue >= -1e-10;
    log << "PSD min eigenvalue = " << format_real(psd.min_eigenvalue) << " over " << psd.samples << " samples\n";
    log << "PSD min eigenvalue >= -1e-10: " << (report.psd_pass ? "PASS" : "FAIL") << '\n';

    auto sharp_rng = make_rng(opts.seed, {0x534841ULL});
    std::size_t negative = 0;
    {
        auto f = open_out(out / "conflict.csv");
        f << "step,g_max,conflict_score,entropy\n";
        for (std::size_t i = 0; i < opts.sharp; ++i) {
            const ConflictReport r = conflict_probe(sample_sharp(opts.n_experts, 0.9, sharp_rng), i);
            if (r.conflict_score && *r.conflict_score < 0.0) ++negative;
            f << r.step << ',' << format_real(r.g_max) << ','
              << (r.conflict_score ? format_real(*r.conflict_score) : std::string("null")) << ','
              << format_real(r.h_entropy) << '\n';
        }
    }
    report.conflict_negative_rate = opts.sharp == 0 ? 0.0 : static_cast<double>(negative) / static_cast<double>(opts.sharp);
    const Vector uniform_grad = load_balance_grad(SimplexVector(Vector(opts.n_experts, 1.0 / static_cast<double>(opts.n_experts))));
    double norm = 0.0;
    for (double v : uniform_grad) norm += v * v;
    report.uniform_load_grad_norm = std::sqrt(norm);
    report.conflict_pass = report.conflict_negative_rate >= 0.95 && report.uniform_load_grad_norm <= 1e-10;
    log << "conflict negativity rate = " << format_real(report.conflict_negative_rate) << " over " << opts.sharp
        << " sharp samples (N=" << opts.n_experts << "), uniform load-gradient norm = "
        << format_real(report.uniform_load_grad_norm) << '\n';
    log << "conflict negativity rate >= 0.95: " << (report.conflict_pass ? "PASS" : "FAIL") << '\n';

    auto jac_rng = make_rng(opts.seed, {0x4a4143ULL});
    std::uniform_int_distribution<std::size_t> pick_d(2, 8), pick_n(2, 8);
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < opts.grad_check; ++i) {
        const std::size_t d = pick_d(jac_rng);
        const std::size_t n = pick_n(jac_rng);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(1, n)(jac_rng);
        ExpertPool pool = ExpertPool::random(n, d, jac_rng);
        for (auto& e : pool.experts)
            for (double& b : e.bias) b = 0.1 * normal(jac_rng);
        DenseMatrix router(d, n);
        for (double& v : router.flat()) v = normal(jac_rng);
        Vector h(d);
        for (double& v : h) v = normal(jac_rng);
        worst = std::max(worst, moe_jacobian_check(h, pool, router, k));
    }
    report.max_jacobian_error = worst;
    report.jacobian_pass = worst <= 1e-5;
    log << "MoE Jacobian max rel error = " << format_real(worst) << " over " << opts.grad_check << " instances\n";
    log << "MoE Jacobian max rel error <= 1e-5: " << (report.jacobian_pass ? "PASS" : "FAIL") << '\n';
    return report;
}

}  // namespace confmoe
