// Command-line front end: synth, smooth, split, train, register, evaluate.

#include <cstdio>
#include <iostream>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "ldreg/ldreg.hpp"

namespace {

using namespace ldreg;

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto end = s.find(',', start);
        const auto item = s.substr(start, end == std::string::npos ? std::string::npos : end - start);
        if (!item.empty()) out.push_back(item);
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return out;
}

int run_synth(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
    SynthConfig cfg;
    if (!config.empty()) cfg = read_json(config).get<SynthConfig>();
    if (seed) cfg.seed = *seed;
    write_synthetic_dataset(cfg, out);
    std::printf("wrote %d cases to %s\n", cfg.case_count, out.c_str());
    return 0;
}

int run_train(const std::string& config, const std::string& data, const std::string& out, const std::string& resume,
              const std::string& fold_file, int fold) {
    TrainConfig cfg;
    if (!config.empty()) cfg = read_json(config).get<TrainConfig>();
    std::set<std::string> held_out;
    if (!fold_file.empty()) {
        require(fold >= 0, ErrorCode::InvalidArgument, "--fold-file needs --fold");
        const auto folds = folds_from_json(read_json(fold_file));
        require(fold < folds.k, ErrorCode::InvalidArgument, "fold index out of range");
        held_out.insert(folds.held_out[static_cast<std::size_t>(fold)].begin(),
                        folds.held_out[static_cast<std::size_t>(fold)].end());
    }
    std::vector<Case> cases;
    for (const auto& dir : list_cases(data)) {
        const auto id = case_files(dir).manifest.at("id").get<std::string>();
        if (!held_out.contains(id)) cases.push_back(read_case(dir));
    }
    TrainOptions opt;
    opt.out_dir = out;
    if (!resume.empty()) opt.resume = load_checkpoint(resume);
    opt.on_record = [](const nlohmann::json& rec) {
        if (rec.value("iteration", 0) % 100 == 0) std::cout << rec.dump() << '\n' << std::flush;
    };
    const auto ck = train(std::move(cases), cfg, opt);
    std::printf("trained %lld iterations, checkpoint %s/final.bin\n", static_cast<long long>(ck.iteration), out.c_str());
    return 0;
}

int run_register(const std::string& moving, const std::string& fixed, const std::string& checkpoint,
                 const std::string& variant, const std::string& out_ddf, const std::string& out_warped) {
    Registrar reg(load_checkpoint(checkpoint));
    const auto r = reg.run(read_volume(moving), read_volume(fixed), parse_variant(variant));
    if (!out_ddf.empty()) write_field(r.ddf, out_ddf);
    if (!out_warped.empty()) write_volume(r.warped, out_warped);
    std::printf("registered in %.3f s\n", r.seconds);
    return 0;
}

int run_evaluate(const std::string& data, const std::string& fold_file, int fold, const std::string& checkpoint,
                 const std::string& variants, const std::string& report) {
    EvaluationOptions opt;
    opt.variants = split_list(variants);
    opt.fold = fold;
    const auto j = evaluate(data, folds_from_json(read_json(fold_file)), load_checkpoint(checkpoint), opt);
    write_json(j, report);
    for (const auto& [name, v] : j.at("variants").items()) {
        const auto& s = v.at("summary");
        std::printf("%-12s", name.c_str());
        if (s.contains("tre_mm"))
            std::printf("  TRE %.2f (%.2f - %.2f) mm", s["tre_mm"]["median"].get<double>(), s["tre_mm"]["p5"].get<double>(),
                        s["tre_mm"]["p95"].get<double>());
        if (s.contains("dice")) std::printf("  Dice %.3f", s["dice"]["median"].get<double>());
        std::printf("\n");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Label-driven deformable registration"};
    app.require_subcommand(1);

    std::string config, out, data, resume, fold_file, moving, fixed, checkpoint, variant = "composite", out_ddf,
                                                                                 out_warped, variants = "composite,global,local", report;
    std::optional<std::uint64_t> seed;
    std::uint64_t split_seed = 0;
    int fold = -1, k = 10;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--config", config, "synthesis config (JSON)");
    synth->add_option("--out", out, "dataset directory")->required();
    synth->add_option("--seed", seed, "overrides the config seed");

    auto* smooth = app.add_subcommand("smooth", "cache smoothed label maps");
    smooth->add_option("--data", data, "dataset directory")->required();

    auto* split = app.add_subcommand("split", "patient-level cross-validation folds");
    split->add_option("--data", data, "dataset directory")->required();
    split->add_option("--k", k, "fold count");
    split->add_option("--seed", split_seed, "shuffle seed");
    split->add_option("--out", out, "fold file (JSON)")->required();

    auto* tr = app.add_subcommand("train", "train global- and local-net");
    tr->add_option("--config", config, "training config (JSON)");
    tr->add_option("--data", data, "dataset directory")->required();
    tr->add_option("--out", out, "checkpoint directory")->required();
    tr->add_option("--resume", resume, "checkpoint to continue from");
    tr->add_option("--fold-file", fold_file, "exclude a fold's held-out cases");
    tr->add_option("--fold", fold, "fold index");

    auto* reg = app.add_subcommand("register", "register one image pair");
    reg->add_option("--moving", moving)->required();
    reg->add_option("--fixed", fixed)->required();
    reg->add_option("--checkpoint", checkpoint)->required();
    reg->add_option("--variant", variant, "composite|global|local");
    reg->add_option("--out-ddf", out_ddf, "prefix for the _dx/_dy/_dz field volumes");
    reg->add_option("--out-warped", out_warped, "warped moving image");

    auto* ev = app.add_subcommand("evaluate", "TRE and Dice on held-out cases");
    ev->add_option("--data", data)->required();
    ev->add_option("--fold-file", fold_file)->required();
    ev->add_option("--fold", fold, "single fold (default: all held-out cases)");
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--variants", variants, "comma list of composite,global,local,identity,ground_truth");
    ev->add_option("--report", report, "report path (JSON)")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (synth->parsed()) return run_synth(config, out, seed);
        if (smooth->parsed()) {
            smooth_dataset(data);
            return 0;
        }
        if (split->parsed()) {
            write_json(to_json(split_dataset(data, k, split_seed)), out);
            return 0;
        }
        if (tr->parsed()) return run_train(config, data, out, resume, fold_file, fold);
        if (reg->parsed()) return run_register(moving, fixed, checkpoint, variant, out_ddf, out_warped);
        if (ev->parsed()) return run_evaluate(data, fold_file, fold, checkpoint, variants, report);
    } catch (const ldreg::Error& e) {
        std::cerr << "error [" << ldreg::to_string(e.code()) << "]: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 1;
}
