// Acceptance run: one PASS/FAIL line per criterion. Criteria 1, 2, 3, 5 and 7
// are gtest groups run by filter; 4 and 6 are measured here.
//
//   acceptance WORK_DIR [--skip-recovery]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "ldreg/ldreg.hpp"

namespace {

using namespace ldreg;
using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
    failures += !pass;
    std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
    std::fflush(stdout);
}

struct Suite {
    std::string binary, filter;
};

struct SuiteResult {
    bool ok = true;
    int tests = 0;
    double seconds = 0.0;
};

/// Runs gtest groups; every group must run at least one test.
SuiteResult run_suites(const std::vector<Suite>& suites, const fs::path& log) {
    const auto t0 = Clock::now();
    SuiteResult r;
    for (const auto& s : suites) {
        const fs::path part = log.string() + ".part";
        const std::string cmd = std::string(LDREG_TEST_DIR) + "/" + s.binary + " --gtest_brief=1 --gtest_filter='" +
                                s.filter + "' > " + part.string() + " 2>&1";
        r.ok = std::system(cmd.c_str()) == 0 && r.ok;
        std::ifstream in(part);
        std::ofstream out(log, std::ios::app);
        int ran = 0;
        for (std::string line; std::getline(in, line);) {
            out << line << '\n';
            if (line.starts_with("[==========] ")) ran = std::atoi(line.c_str() + 13);
        }
        r.ok = r.ok && ran > 0;
        r.tests += ran;
        fs::remove(part);
    }
    r.seconds = since(t0);
    return r;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

void suite_criterion(int id, const std::string& what, const std::vector<Suite>& suites, const fs::path& work,
                     double budget_s = 0.0) {
    const auto r = run_suites(suites, work / ("criterion" + std::to_string(id) + ".log"));
    const bool in_time = budget_s <= 0.0 || r.seconds < budget_s;
    std::string detail = what + (r.ok ? ": " : " had failures: ") + fmt("%.0f tests in %.1f s", r.tests, r.seconds);
    if (budget_s > 0.0) detail += fmt(" (budget %.0f s)", budget_s);
    report(id, r.ok && in_time, detail);
}

std::vector<double> pooled(const std::vector<nlohmann::json>& reports, const std::string& variant, const std::string& key) {
    std::vector<double> out;
    for (const auto& r : reports)
        for (const auto& v : r["variants"][variant][key])
            out.push_back(v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>());
    return out;
}

void recovery(const fs::path& work) {
    const auto t0 = Clock::now();
    const fs::path data = work / "synthetic";
    SynthConfig synth; // 200 cases, 32^3, level 1, magnitude 6
    fs::remove_all(data);
    write_synthetic_dataset(synth, data);
    const Folds folds = split_dataset(data, 5, 7);
    write_json(to_json(folds), work / "folds.json");

    const TrainConfig cfg = TrainConfig::desk();
    std::vector<nlohmann::json> reports;
    for (int fold = 0; fold < 2; ++fold) {
        const std::set<std::string> held(folds.held_out[static_cast<std::size_t>(fold)].begin(),
                                         folds.held_out[static_cast<std::size_t>(fold)].end());
        std::vector<Case> cases;
        for (const auto& dir : list_cases(data))
            if (!held.contains(case_files(dir).manifest.at("id").get<std::string>())) cases.push_back(read_case(dir));
        TrainOptions opt;
        opt.out_dir = work / ("fold" + std::to_string(fold));
        const auto ck = train(std::move(cases), cfg, opt);
        EvaluationOptions eo;
        eo.variants = {"composite", "global", "local", "identity"};
        eo.fold = fold;
        reports.push_back(evaluate(data, folds, ck, eo));
        write_json(reports.back(), opt.out_dir / "report.json");
        std::printf("  fold %d done after %.0f s\n", fold, since(t0));
        std::fflush(stdout);
    }

    auto median = [&](const std::string& v, const std::string& key) { return summarize(pooled(reports, v, key)).median; };
    const double tre_c = median("composite", "tre_mm"), tre_g = median("global", "tre_mm");
    const double tre_l = median("local", "tre_mm"), tre_i = median("identity", "tre_mm");
    const double dice_c = median("composite", "dice"), dice_g = median("global", "dice");
    const double dice_l = median("local", "dice"), dice_i = median("identity", "dice");
    const double secs = since(t0);
    std::printf("  median TRE mm: composite %.2f global %.2f local %.2f identity %.2f\n", tre_c, tre_g, tre_l, tre_i);
    std::printf("  median Dice:   composite %.3f global %.3f local %.3f identity %.3f\n", dice_c, dice_g, dice_l, dice_i);

    const bool a = tre_c <= 0.5 * tre_i, b = dice_c >= 0.80, c = tre_c < tre_g, t = secs <= 3600.0;
    report(4, a && b && c && t,
           fmt("(a) TRE %.2f <= 0.5 x %.2f: ", tre_c, tre_i) + (a ? "yes" : "no") +
               fmt("; (b) Dice %.3f >= 0.80: ", dice_c) + (b ? "yes" : "no") +
               fmt("; (c) TRE %.2f < global %.2f: ", tre_c, tre_g) + (c ? "yes" : "no") +
               fmt("; 2 folds in %.0f s (budget 3600 s)", secs));
}

void throughput() {
    SynthConfig synth;
    synth.shape = {64, 64, 64};
    synth.seed = 99;
    const auto c = generate_case(synth, 0).first;
    const TrainConfig cfg = TrainConfig::desk(); // n0 = 8 local / 2 global
    const auto net = network_config(cfg, c.fixed.shape);
    const auto params = init_params<float>(cfg.seed, net);
    // two checkpoints that differ only in training length
    std::vector<double> times;
    for (const std::int64_t it : {std::int64_t{0}, std::int64_t{2000}}) {
        Registrar reg(make_checkpoint(cfg, net, it, std::mt19937_64(1), params, AdamState<float>{}));
        reg.run(c.moving, c.fixed, Variant::Composite); // warm caches
        std::vector<double> runs;
        for (int k = 0; k < 3; ++k) runs.push_back(reg.run(c.moving, c.fixed, Variant::Composite).seconds);
        times.push_back(summarize(runs).median);
    }
    const double worst = std::max(times[0], times[1]);
    const bool flat = std::abs(times[0] - times[1]) <= 0.25 * worst;
    report(6, worst < 1.0 && flat,
           fmt("64^3 composite inference median %.3f s / %.3f s at iterations 0 / 2000 (limit 1 s, single thread)",
               times[0], times[1]));
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance WORK_DIR [--skip-recovery]\n");
        return 2;
    }
    const fs::path work = argv[1];
    const bool skip_recovery = argc > 2 && std::string(argv[2]) == "--skip-recovery";
    fs::create_directories(work);
    for (const auto& p : fs::directory_iterator(work))
        if (p.path().extension() == ".log") fs::remove(p.path());

    try {
        suite_criterion(1, "gradient suite",
                        {{"test_network", "OpGradient.*:KernelStride/*:ResnetBlock.Gradient*:Network.*Gradient*"},
                         {"test_spatial_transform", "Padding/WarpGradient.*"},
                         {"test_losses", "*.GradientMatchesCentralDifferences"}},
                        work, 120.0);
        suite_criterion(2, "oracle suite",
                        {{"test_label_smoothing", "Edt.*:InverseDistance.*:TargetMass.*:SolveExponent.*:SmoothLabel.*"},
                         {"test_network", "Conv.CentreMatchesDirectSum:Conv.TransposeIsAdjointOfStrideTwo"}},
                        work, 120.0);
        suite_criterion(3, "structural invariants",
                        {{"test_spatial_transform", "AffineGrid.HasZeroBendingEnergy"},
                         {"test_evaluation", "Registrar.NearIdentityAtInit:Registrar.NeedsNoLabels"},
                         {"test_training", "Train.WarmupLeavesLocalNetBitUnchanged"}},
                        work);
        if (skip_recovery)
            std::printf("SKIP criterion 4: synthetic recovery experiment not requested\n");
        else
            recovery(work);
        suite_criterion(5, "determinism and resumption",
                        {{"test_training", "Train.SameSeedGivesIdenticalCheckpoints:Train.ResumeMatchesUninterruptedRun"}},
                        work);
        throughput();
        suite_criterion(7, "format round trips",
                        {{"test_volume", "VolumeIo.*"},
                         {"test_training", "Checkpoint.*"},
                         {"test_evaluation", "Evaluate.ReportIsConsistent"}},
                        work);
    } catch (const std::exception& e) {
        std::printf("FAIL acceptance aborted: %s\n", e.what());
        return 1;
    }
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
