// etag_cli: train, ablate, grad-check, report.
//
// Exit codes: 0 success, 1 configuration / input error, 2 training diverged
// (diagnostics.json written), 3 gradient check failure.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "etag/config.hpp"
#include "etag/gradcheck_suite.hpp"
#include "etag/harness.hpp"
#include "etag/serialize.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kInputError = 1, kDiverged = 2, kGradFailure = 3 };

void configure_logging() {
    const char* env = std::getenv("ETAG_LOG_LEVEL");
    const std::string level = env ? env : "info";
    if (level == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (level == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else {
        if (level != "info") spdlog::warn("unknown ETAG_LOG_LEVEL '{}', using info", level);
        spdlog::set_level(spdlog::level::info);
    }
    spdlog::set_pattern("[%l] %v");
}

etag::RunConfig load(const std::string& path, const std::vector<std::string>& overrides) {
    etag::RunConfig base = path.empty() ? etag::RunConfig{} : etag::load_config(path);
    return etag::apply_overrides(base, overrides);
}

void log_epoch(const etag::EpochRecord& r) {
    spdlog::debug("task {} {} epoch {} loss {:.6f}", r.task, r.phase, r.epoch, r.loss);
}

void write_diagnostics(const fs::path& out, const etag::RunConfig& config, const etag::NumericalError& e) {
    fs::create_directories(out);
    json j{{"error", e.what()}, {"task", e.task}, {"phase", e.phase}, {"epoch", e.epoch}, {"config", config}};
    std::ofstream(out / "diagnostics.json") << j.dump(2) << "\n";
}

void run_one(const etag::RunConfig& config, const fs::path& out) {
    spdlog::info("{} seed {} -> {}", etag::to_string(config.method), config.seed, out.string());
    const etag::RunResult r = etag::run_cil(config, log_epoch);
    etag::write_run_outputs(out, r);
    etag::write_bytes((out / "solver.bin").string(), etag::encode_solver(r.solver));
    if (r.generator) etag::write_bytes((out / "generator.bin").string(), etag::encode_generator(*r.generator));
    spdlog::info("A = {:.4f}{}", r.metrics.A, r.metrics.F ? fmt::format(", F = {:.4f}", *r.metrics.F) : "");
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, const fs::path& out) {
    const etag::RunConfig config = load(config_path, overrides);
    try {
        run_one(config, out);
    } catch (const etag::NumericalError& e) {
        write_diagnostics(out, config, e);
        spdlog::error("{} (task {}, {} epoch {}); see {}", e.what(), e.task, e.phase, e.epoch,
                      (out / "diagnostics.json").string());
        return kDiverged;
    }
    return kOk;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

struct Stats {
    double mean = 0.0;
    double sd = 0.0;
};

// Sample standard deviation (n - 1); zero for a single run.
Stats stats(const std::vector<double>& v) {
    Stats s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

std::string num(double v) { return etag::detail::fmt_double(v); }

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& overrides, const fs::path& out,
               const std::string& variants_arg, const std::string& seeds_arg) {
    const etag::RunConfig base = load(config_path, overrides);
    std::vector<etag::Method> variants;
    for (const auto& v : split_list(variants_arg)) {
        try {
            variants.push_back(etag::parse_method(v));
        } catch (const etag::DomainError& e) {
            throw etag::ConfigError(e.what(), "variants");
        }
    }
    std::vector<std::uint64_t> seeds;
    for (const auto& s : split_list(seeds_arg)) {
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(s, &used));
            if (used != s.size()) throw std::invalid_argument(s);
        } catch (const std::exception&) {
            throw etag::ConfigError("seed '" + s + "' is not a non-negative integer", "seeds");
        }
    }
    if (variants.empty() || seeds.empty()) throw etag::ConfigError("ablate needs variants and seeds", "variants");

    std::ostringstream table;
    table << "variant,runs,A_mean,A_std,F_mean,F_std\n";
    std::ostringstream runs;
    runs << "variant,seed,A,F\n";
    for (etag::Method m : variants) {
        std::vector<double> as, fs_;
        for (std::uint64_t seed : seeds) {
            etag::RunConfig c = base;
            c.method = m;
            c.seed = seed;
            const fs::path dir = out / etag::to_string(m) / ("seed_" + std::to_string(seed));
            try {
                run_one(c, dir);
            } catch (const etag::NumericalError& e) {
                write_diagnostics(dir, c, e);
                spdlog::error("{} diverged: {}", dir.string(), e.what());
                return kDiverged;
            }
            std::ifstream is(dir / "metrics.json");
            const json j = json::parse(is);
            as.push_back(j.at("A").get<double>());
            if (!j.at("F").is_null()) fs_.push_back(j.at("F").get<double>());
            runs << etag::to_string(m) << ',' << seed << ',' << num(as.back()) << ','
                 << (j.at("F").is_null() ? "" : num(fs_.back())) << '\n';
        }
        const Stats a = stats(as), f = stats(fs_);
        table << etag::to_string(m) << ',' << as.size() << ',' << num(a.mean) << ',' << num(a.sd) << ',';
        if (fs_.empty()) {
            table << ",\n";
        } else {
            table << num(f.mean) << ',' << num(f.sd) << '\n';
        }
    }
    fs::create_directories(out);
    std::ofstream(out / "ablation.csv") << table.str();
    std::ofstream(out / "ablation_runs.csv") << runs.str();
    std::cout << table.str();
    return kOk;
}

int cmd_grad_check(const fs::path& out, const std::string& fault, std::size_t points) {
    etag::GradCheckOptions opt;
    opt.inject_fault = fault;
    opt.points = points;
    if (!fault.empty()) {
        const auto names = etag::grad_check_names();
        if (std::find(names.begin(), names.end(), fault) == names.end()) {
            throw etag::ConfigError("unknown check '" + fault + "' for --inject-fault", "inject-fault");
        }
    }
    const auto results = etag::run_grad_suite(opt);
    fs::create_directories(out);
    std::ofstream report(out / "gradcheck.csv");
    report << "check,points,max_relative_error,passed,seconds\n";
    bool ok = true;
    for (const auto& r : results) {
        report << r.name << ',' << r.points << ',' << num(r.max_error) << ',' << (r.passed ? "true" : "false") << ','
               << num(r.seconds) << '\n';
        if (!r.passed) {
            ok = false;
            spdlog::error("grad-check FAILED: {} (max relative error {:.3e})", r.name, r.max_error);
        } else {
            spdlog::debug("grad-check ok: {} ({:.3e})", r.name, r.max_error);
        }
    }
    spdlog::info("{} checks, {}", results.size(), ok ? "all passed" : "failures present");
    return ok ? kOk : kGradFailure;
}

// Run id: the directory as given, without trailing separators.
std::string run_id(const std::string& dir) {
    std::string id = fs::path(dir).lexically_normal().generic_string();
    while (id.size() > 1 && id.back() == '/') id.pop_back();
    return id;
}

std::string file_safe(std::string id) {
    for (char& c : id)
        if (c == '/' || c == '\\' || c == ':' || c == ' ') c = '_';
    return id;
}

int cmd_report(const std::vector<std::string>& dirs, const fs::path& out) {
    struct Run {
        std::string id;
        json metrics;
    };
    std::vector<Run> loaded;
    for (const auto& d : dirs) {
        const fs::path path = fs::path(d) / "metrics.json";
        std::ifstream is(path);
        if (!is) {
            spdlog::error("missing metrics file {}", path.string());
            return kInputError;
        }
        json j = json::parse(is, nullptr, false);
        if (j.is_discarded() || !j.contains("accuracy") || !j.at("accuracy").is_array() || !j.contains("confusion")) {
            spdlog::error("malformed metrics file {}", path.string());
            return kInputError;
        }
        try {
            loaded.push_back({run_id(d), j});
            (void)j.at("accuracy").get<etag::AccuracyMatrix>();
            (void)j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
        } catch (const json::exception&) {
            spdlog::error("malformed metrics file {}", path.string());
            return kInputError;
        }
    }
    std::set<std::string> ids;
    for (const auto& r : loaded) {
        if (!ids.insert(r.id).second) {
            spdlog::error("run {} listed twice", r.id);
            return kInputError;
        }
    }

    std::size_t tasks = 0;
    for (const auto& r : loaded) tasks = std::max(tasks, r.metrics.at("accuracy").size());
    std::ostringstream curves;
    curves << "after_task,task";
    for (const auto& r : loaded) curves << ',' << r.id;
    curves << '\n';
    for (std::size_t t = 0; t < tasks; ++t) {
        for (std::size_t j = 0; j <= t; ++j) {
            curves << t << ',' << j;
            for (const auto& r : loaded) {
                const auto a = r.metrics.at("accuracy").get<etag::AccuracyMatrix>();
                curves << ',';
                if (t < a.size() && j < a[t].size()) curves << num(a[t][j]);
            }
            curves << '\n';
        }
    }
    fs::create_directories(out);
    std::ofstream(out / "curves.csv") << curves.str();

    std::ostringstream summary;
    summary << "run,method,seed,A,F\n";
    for (const auto& r : loaded) {
        const json& m = r.metrics;
        summary << r.id << ',' << m.value("method", "") << ',' << m.value("seed", 0) << ','
                << (m.contains("A") ? num(m.at("A").get<double>()) : "") << ','
                << (m.contains("F") && !m.at("F").is_null() ? num(m.at("F").get<double>()) : "") << '\n';
        std::ofstream(out / ("confusion_" + file_safe(r.id) + ".csv"))
            << etag::confusion_csv(m.at("confusion").get<std::vector<std::vector<std::size_t>>>());
    }
    std::ofstream(out / "summary.csv") << summary.str();
    spdlog::info("report for {} run(s) written to {}", loaded.size(), out.string());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    configure_logging();
    CLI::App app{"eTag class-incremental learning laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_dir, variants = "eTag,B0,B1,B2,B3,Fine,Joint", seeds = "0,1,2", fault;
    std::vector<std::string> overrides, dirs;
    std::size_t points = 10;

    auto* train = app.add_subcommand("train", "run one class-incremental experiment");
    train->add_option("--config", config_path, "JSON run config (defaults when omitted)");
    train->add_option("--out", out_dir, "output directory")->required();
    train->add_option("--set", overrides, "dotted.key=value override (repeatable)");

    auto* ablate = app.add_subcommand("ablate", "run every (variant, seed) pair and summarize");
    ablate->add_option("--config", config_path, "JSON run config");
    ablate->add_option("--out", out_dir, "output directory")->required();
    ablate->add_option("--set", overrides, "dotted.key=value override (repeatable)");
    ablate->add_option("--variants", variants, "comma-separated subset of eTag,B0,B1,B2,B3,Fine,Joint");
    ablate->add_option("--seeds", seeds, "comma-separated seeds");

    auto* grad = app.add_subcommand("grad-check", "finite-difference suite over every op and loss");
    grad->add_option("--out", out_dir, "output directory")->required();
    grad->add_option("--inject-fault", fault, "sign-flip the backward pass of the named check");
    grad->add_option("--points", points, "random points per check");

    auto* report = app.add_subcommand("report", "accuracy curves and confusion matrices as CSV");
    report->add_option("--out", out_dir, "output directory")->required();
    report->add_option("dirs", dirs, "run directories containing metrics.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kInputError;
    }

    try {
        if (*train) return cmd_train(config_path, overrides, out_dir);
        if (*ablate) return cmd_ablate(config_path, overrides, out_dir, variants, seeds);
        if (*grad) return cmd_grad_check(out_dir, fault, points);
        if (*report) return cmd_report(dirs, out_dir);
    } catch (const etag::ConfigError& e) {
        spdlog::error("config error{}: {}", e.key.empty() ? "" : " [" + e.key + "]", e.what());
        return kInputError;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kInputError;
    }
    return kOk;
}
