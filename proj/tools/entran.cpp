#include <CLI11.hpp>
#include <entran/entran.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;
using namespace entran;

namespace {

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("parse error in " + path + ": " + e.what());
    }
    return j;
}

// Accepts either a bare genotype document or a result.json with a genotype field.
Genotype read_genotype(const std::string& path) {
    auto j = read_json(path);
    if (j.contains("genotype")) return genotype_from_json(j.at("genotype"));
    return genotype_from_json(j);
}

std::string resolve_out(const RunConfig& cfg, const std::string& flag_out, const char* fallback) {
    if (!flag_out.empty()) return flag_out;
    if (!cfg.out_dir.empty()) return cfg.out_dir;
    return fallback;
}

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= csv.size()) {
        std::size_t comma = csv.find(',', pos);
        std::string tok = csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!tok.empty()) out.push_back(std::stod(tok));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw std::runtime_error("empty list: " + csv);
    return out;
}

int run_search_cmd(const std::string& config_path, const std::string& out_flag, bool resume,
                   const std::string& resume_path) {
    RunConfig cfg = load_config(config_path);
    std::string out = resolve_out(cfg, out_flag, "runs/search");
    Dataset data = load_dataset(cfg.dataset);
    Searcher searcher(cfg, data);
    if (resume) {
        std::string ckpt = resume_path.empty() ? out + "/checkpoint.bin" : resume_path;
        searcher.restore(ckpt);
        std::cout << "resumed from " << ckpt << " at epoch " << searcher.epochs_done() << "\n";
    }
    auto result = searcher.run(out);
    const auto& last = result.metrics.back();
    std::cout << "search done: " << last.epoch << " epochs, val_acc=" << format_double(last.val_acc)
              << ", kept edges normal/reduction = " << result.genotype.normal.connection_count() << "/"
              << result.genotype.reduction.connection_count() << "\n";
    std::cout << "artifacts in " << out << "\n";
    return 0;
}

int run_retrain_cmd(const std::string& config_path, const std::string& genotype_path, const std::string& out_flag,
                    std::uint64_t seed) {
    RunConfig cfg = load_config(config_path);
    Genotype g = read_genotype(genotype_path);
    Dataset data = load_dataset(cfg.dataset);
    double acc = retrain(g, cfg, data, seed);
    std::cout << "retrain accuracy: " << format_double(acc) << "\n";
    std::string out = resolve_out(cfg, out_flag, "");
    if (!out.empty()) {
        fs::create_directories(out);
        nlohmann::json j{{"accuracy", acc}, {"seed", seed}, {"genotype", genotype_to_json(g)}};
        write_file_atomic(out + "/retrain.json", j.dump(2) + "\n");
    }
    return 0;
}

int run_consistency_cmd(const std::string& config_path, const std::string& out_flag, int seeds,
                        const std::string& placements_csv) {
    RunConfig cfg = load_config(config_path);
    std::string out = resolve_out(cfg, out_flag, "runs/consistency");
    fs::create_directories(out);
    Dataset data = load_dataset(cfg.dataset);

    std::vector<Placement> placements;
    std::size_t pos = 0;
    while (pos <= placements_csv.size()) {
        std::size_t comma = placements_csv.find(',', pos);
        std::string tok =
            placements_csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!tok.empty()) placements.push_back(placement_from_name(tok));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }

    std::string csv = "placement,seed,supernet_acc,childnet_acc,drop\n";
    std::cout << "placement   mean_super  mean_child  mean_drop\n";
    for (Placement p : placements) {
        if (p == Placement::half)
            std::cout << "note: half = the first half of cells of each kind\n";
        double ms = 0, mc = 0, md = 0;
        for (int s = 0; s < seeds; ++s) {
            RunConfig run_cfg = cfg;
            run_cfg.supernet.engine_placement = p;
            run_cfg.trainer.seed = cfg.trainer.seed + std::uint64_t(s);
            Searcher searcher(run_cfg, data);
            searcher.run();
            auto rep = consistency_report(searcher.net(), searcher.val_half());
            ms += rep.supernet_acc;
            mc += rep.childnet_acc;
            md += rep.drop;
            csv += std::string(placement_name(p)) + "," + std::to_string(run_cfg.trainer.seed) + "," +
                   format_double(rep.supernet_acc) + "," + format_double(rep.childnet_acc) + "," +
                   format_double(rep.drop) + "\n";
        }
        std::printf("%-11s %10.4f  %10.4f  %9.4f\n", placement_name(p), ms / seeds, mc / seeds, md / seeds);
    }
    write_file_atomic(out + "/consistency.csv", csv);
    return 0;
}

int run_kendall_cmd(const std::string& config_path, const std::string& out_flag, int runs) {
    RunConfig cfg = load_config(config_path);
    std::string out = resolve_out(cfg, out_flag, "runs/kendall");
    fs::create_directories(out);
    Dataset data = load_dataset(cfg.dataset);

    std::vector<RankPair> pairs;
    std::string csv = "seed,supernet_acc,retrained_acc\n";
    for (int r = 0; r < runs; ++r) {
        RunConfig run_cfg = cfg;
        run_cfg.trainer.seed = cfg.trainer.seed + std::uint64_t(r);
        Searcher searcher(run_cfg, data);
        auto result = searcher.run();
        double proxy = evaluate_accuracy(searcher.net(), searcher.val_half());
        double truth = retrain(result.genotype, run_cfg, data, run_cfg.trainer.seed + 1000);
        pairs.push_back({proxy, truth});
        csv += std::to_string(run_cfg.trainer.seed) + "," + format_double(proxy) + "," + format_double(truth) + "\n";
        std::cout << "run " << r << ": supernet=" << format_double(proxy) << " retrained=" << format_double(truth)
                  << "\n";
    }
    double tau;
    try {
        tau = kendall_tau(pairs);
    } catch (const std::invalid_argument&) {
        // deterministic rank-stable jitter as the error message suggests
        std::cout << "note: tied scores; applying deterministic perturbation\n";
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            pairs[i].proxy_score += double(i + 1) * 1e-12;
            pairs[i].true_score += double(i + 1) * 1e-12;
        }
        tau = kendall_tau(pairs);
    }
    std::cout << "kendall tau = " << format_double(tau) << "\n";
    write_file_atomic(out + "/kendall.csv", csv + "tau," + format_double(tau) + ",\n");
    return 0;
}

int spawn_child_search(const std::string& config_path, const std::string& out_dir) {
    char exe[4096];
    ssize_t n = readlink("/proc/self/exe", exe, sizeof exe - 1);
    if (n <= 0) throw std::runtime_error("cannot resolve own executable path");
    exe[n] = '\0';
    pid_t pid = fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
        execl(exe, exe, "search", "--config", config_path.c_str(), "--out", out_dir.c_str(), (char*)nullptr);
        _exit(127);
    }
    return pid;
}

int run_sweep_cmd(const std::string& config_path, const std::string& out_flag, const std::string& lambdas_csv,
                  int seeds, int jobs) {
    RunConfig cfg = load_config(config_path);
    if (cfg.supernet.mode != Mode::dst) throw std::runtime_error("sweep-lambda requires mode=dst in the config");
    std::string out = resolve_out(cfg, out_flag, "runs/sweep");
    fs::create_directories(out);
    Dataset data = load_dataset(cfg.dataset);
    auto lambdas = parse_double_list(lambdas_csv);

    struct Job {
        double lambda;
        std::uint64_t seed;
        std::string dir;
    };
    std::vector<Job> job_list;
    for (double l : lambdas)
        for (int s = 0; s < seeds; ++s) {
            std::uint64_t seed = cfg.trainer.seed + std::uint64_t(s);
            std::ostringstream dir;
            dir << out << "/run_l" << l << "_s" << seed;
            job_list.push_back({l, seed, dir.str()});
        }

    if (jobs <= 1) {
        for (const auto& job : job_list) {
            RunConfig run_cfg = cfg;
            run_cfg.trainer.lambda = job.lambda;
            run_cfg.trainer.seed = job.seed;
            Searcher searcher(run_cfg, data);
            searcher.run(job.dir);
        }
    } else {
        // isolated child processes, at most `jobs` in flight
        std::vector<std::pair<int, std::string>> running;
        auto reap_one = [&] {
            int status = 0;
            pid_t done = waitpid(-1, &status, 0);
            for (auto it = running.begin(); it != running.end(); ++it)
                if (it->first == done) {
                    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
                        throw std::runtime_error("child run failed: " + it->second);
                    running.erase(it);
                    return;
                }
        };
        for (const auto& job : job_list) {
            fs::create_directories(job.dir);
            RunConfig run_cfg = cfg;
            run_cfg.trainer.lambda = job.lambda;
            run_cfg.trainer.seed = job.seed;
            run_cfg.out_dir = job.dir;
            write_file_atomic(job.dir + "/config.json", config_to_json(run_cfg).dump(2) + "\n");
            if (int(running.size()) >= jobs) reap_one();
            running.emplace_back(spawn_child_search(job.dir + "/config.json", job.dir), job.dir);
        }
        while (!running.empty()) reap_one();
    }

    // aggregate per-lambda means from the run artifacts
    DataDims dims{data.channels, data.height, data.width, data.classes};
    std::string csv = "lambda,mean_edges_normal,mean_edges_reduction,mean_params\n";
    std::cout << "lambda   edges_normal  edges_reduction  params\n";
    for (double l : lambdas) {
        double en = 0, er = 0, ep = 0;
        int count = 0;
        for (const auto& job : job_list) {
            if (job.lambda != l) continue;
            Genotype g = read_genotype(job.dir + "/result.json");
            RunConfig run_cfg = cfg;
            run_cfg.trainer.lambda = job.lambda;
            en += g.normal.connection_count();
            er += g.reduction.connection_count();
            ep += double(derived_parameter_count(g, run_cfg, dims));
            ++count;
        }
        en /= count;
        er /= count;
        ep /= count;
        csv += format_double(l) + "," + format_double(en) + "," + format_double(er) + "," + format_double(ep) + "\n";
        std::printf("%-8g %12.2f  %15.2f  %8.1f\n", l, en, er, ep);
    }
    write_file_atomic(out + "/sweep.csv", csv);
    return 0;
}

int run_export_dot_cmd(const std::string& genotype_path, const std::string& out_flag) {
    Genotype g = read_genotype(genotype_path);
    std::string out = out_flag.empty() ? "." : out_flag;
    fs::create_directories(out);
    write_file_atomic(out + "/normal.dot", export_dot(g.normal, "normal"));
    write_file_atomic(out + "/reduction.dot", export_dot(g.reduction, "reduction"));
    std::cout << "wrote " << out << "/normal.dot and " << out << "/reduction.dot\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"entran: differentiable architecture search with Engine/Transit cells"};
    app.require_subcommand(1);

    std::string config_path, out_dir, genotype_path, resume_path, lambdas = "0.05,0.1,0.2";
    std::string placements = "all,first";
    int seeds = 3, runs = 6, jobs = 1;
    std::uint64_t seed = 1;
    bool resume = false;

    auto* search = app.add_subcommand("search", "run the architecture search");
    search->add_option("--config", config_path, "config JSON")->required();
    search->add_option("--out", out_dir, "output directory");
    search->add_flag("--resume", resume, "resume from the checkpoint in the output directory");
    search->add_option("--resume-from", resume_path, "explicit checkpoint path to resume from");

    auto* retrain_cmd = app.add_subcommand("retrain", "train a derived architecture from scratch");
    retrain_cmd->add_option("--config", config_path, "config JSON")->required();
    retrain_cmd->add_option("--genotype", genotype_path, "genotype JSON (or result.json)")->required();
    retrain_cmd->add_option("--out", out_dir, "output directory");
    retrain_cmd->add_option("--seed", seed, "retraining seed");

    auto* consistency = app.add_subcommand("eval-consistency", "super-net vs child-net accuracy drop");
    consistency->add_option("--config", config_path, "config JSON")->required();
    consistency->add_option("--out", out_dir, "output directory");
    consistency->add_option("--seeds", seeds, "seeds per placement");
    consistency->add_option("--placements", placements, "comma-separated placements");

    auto* kendall = app.add_subcommand("eval-kendall", "rank correlation of super-net vs retrained accuracy");
    kendall->add_option("--config", config_path, "config JSON")->required();
    kendall->add_option("--out", out_dir, "output directory");
    kendall->add_option("--runs", runs, "number of search runs");

    auto* sweep = app.add_subcommand("sweep-lambda", "kept-edge statistics across sparsity strengths");
    sweep->add_option("--config", config_path, "config JSON")->required();
    sweep->add_option("--out", out_dir, "output directory");
    sweep->add_option("--lambdas", lambdas, "comma-separated lambda values");
    sweep->add_option("--seeds", seeds, "seeds per lambda");
    sweep->add_option("--jobs", jobs, "parallel child runs");

    auto* export_dot_cmd = app.add_subcommand("export-dot", "render a genotype as DOT graphs");
    export_dot_cmd->add_option("--genotype", genotype_path, "genotype JSON (or result.json)")->required();
    export_dot_cmd->add_option("--out", out_dir, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*search) return run_search_cmd(config_path, out_dir, resume || !resume_path.empty(), resume_path);
        if (*retrain_cmd) return run_retrain_cmd(config_path, genotype_path, out_dir, seed);
        if (*consistency) return run_consistency_cmd(config_path, out_dir, seeds, placements);
        if (*kendall) return run_kendall_cmd(config_path, out_dir, runs);
        if (*sweep) return run_sweep_cmd(config_path, out_dir, lambdas, seeds, jobs);
        if (*export_dot_cmd) return run_export_dot_cmd(genotype_path, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
