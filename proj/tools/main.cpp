#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "ctxdet/experiment.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace ctxdet;

namespace {

int worker_threads() {
    const char* env = std::getenv("ARTIFACT_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n >= 1 ? n : 1;
}

std::vector<std::uint64_t> parse_seed_csv(const std::string& text) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoull(item));
    }
    return out;
}

std::vector<std::string> parse_value_csv(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void print_report(const std::string& run_dir) {
    const auto j = nlohmann::ordered_json::parse(read_text_file(
        (fs::path(run_dir) / "report.json").string()));
    std::cout << "metric      value\n";
    for (const auto& key : {"ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large", "ar"}) {
        std::cout << key << std::string(12 - std::string(key).size(), ' ')
                  << j.at(key).get<double>() * 100.0 << "\n";
    }
    if (j.contains("image_accuracy")) {
        std::cout << "image_acc   " << j.at("image_accuracy").get<double>() * 100.0 << "\n";
    }
    const auto& t = j.at("tide");
    std::cout << "tide (AP50 deltas x100): ";
    for (const auto& key : {"e_cls", "e_loc", "e_both", "e_dupe", "e_bkg", "e_miss", "e_fp",
                            "e_fn"}) {
        std::cout << key << "=" << t.at(key).get<double>() * 100.0 << " ";
    }
    std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ctxdet: context-attention cell detector experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, ckpt_path, dets_path, split = "val";
    std::string axis_name, values_csv, seeds_csv, run_dir, ablation_dir;
    std::uint64_t seed_override = 0;
    bool has_seed_override = false;
    bool force = false;

    auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
    gen->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    gen->add_option("--out", out_dir)->required();
    gen->add_flag("--force", force);

    auto* train_cmd = app.add_subcommand("train", "train a detector");
    train_cmd->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--data", data_dir)->required();
    train_cmd->add_option("--out", out_dir)->required();
    train_cmd->add_option("--seed", seed_override)->each([&](const std::string&) {
        has_seed_override = true;
    });
    train_cmd->add_flag("--force", force);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or detections file");
    eval_cmd->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--data", data_dir)->required();
    eval_cmd->add_option("--ckpt", ckpt_path);
    eval_cmd->add_option("--dets", dets_path);
    eval_cmd->add_option("--split", split);
    eval_cmd->add_option("--out", out_dir)->required();

    auto* ablate = app.add_subcommand("ablate", "run an ablation axis");
    ablate->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    ablate->add_option("--data", data_dir)->required();
    ablate->add_option("--axis", axis_name)->required();
    ablate->add_option("--values", values_csv);
    ablate->add_option("--seeds", seeds_csv);
    ablate->add_option("--out", out_dir)->required();
    ablate->add_flag("--force", force);

    auto* report = app.add_subcommand("report", "render a run or ablation report");
    report->add_option("--run", run_dir);
    report->add_option("--ablation", ablation_dir);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }

    try {
        if (gen->parsed()) {
            const auto cfg = parse_config_file(config_path);
            cmd_gen(cfg, out_dir, force);
            std::cout << "dataset written to " << out_dir << "\n";
        } else if (train_cmd->parsed()) {
            auto cfg = parse_config_file(config_path);
            if (has_seed_override) cfg.detector.seed = seed_override;
            cmd_train(cfg, data_dir, out_dir, force);
            std::cout << "checkpoint written to " << (fs::path(out_dir) / "checkpoint.bin").string()
                      << "\n";
        } else if (eval_cmd->parsed()) {
            const auto cfg = parse_config_file(config_path);
            if (ckpt_path.empty() == dets_path.empty()) {
                std::cerr << "eval: provide exactly one of --ckpt or --dets\n";
                return 1;
            }
            const auto out = ckpt_path.empty()
                                 ? cmd_eval_detections(cfg, data_dir, dets_path, split, out_dir)
                                 : cmd_eval(cfg, data_dir, ckpt_path, split, out_dir);
            std::cout << "ap=" << out.eval.ap * 100.0 << " ap50=" << out.eval.ap50 * 100.0
                      << " ap75=" << out.eval.ap75 * 100.0 << "\n";
        } else if (ablate->parsed()) {
            auto cfg = parse_config_file(config_path);
            const auto axis = ablation_axis_from_string(axis_name);
            const auto values =
                values_csv.empty() ? default_axis_values(axis) : parse_value_csv(values_csv);
            const auto seeds = seeds_csv.empty() ? cfg.seeds : parse_seed_csv(seeds_csv);
            const fs::path csv_path = fs::path(out_dir) / "ablation.csv";
            if (fs::exists(csv_path) && !force) {
                throw std::runtime_error("ablate: results already exist at " + csv_path.string() +
                                         " (use --force to overwrite)");
            }
            const auto data = import_dataset(data_dir);
            const auto cells = run_ablation(cfg, data, axis, values, seeds, worker_threads());
            fs::create_directories(out_dir);
            write_text_file(csv_path.string(), ablation_csv(cells));
            write_text_file((fs::path(out_dir) / "ablation.md").string(),
                            ablation_markdown(axis, cells));
            std::cout << ablation_markdown(axis, cells);
        } else if (report->parsed()) {
            if (run_dir.empty() == ablation_dir.empty()) {
                std::cerr << "report: provide exactly one of --run or --ablation\n";
                return 1;
            }
            if (!run_dir.empty()) {
                print_report(run_dir);
            } else {
                std::cout << read_text_file((fs::path(ablation_dir) / "ablation.md").string());
            }
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
