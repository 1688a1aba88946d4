#include "gridnet/common.hpp"
#include "gridnet/dss.hpp"
#include "gridnet/gnn.hpp"
#include "gridnet/grid.hpp"
#include "gridnet/pf.hpp"
#include "gridnet/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace gridnet;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

constexpr const char* kVersion = "gridnet 0.1.0";

struct CommonOpts {
    uint64_t seed = 0;
    std::string config_path;
    bool quiet = false;
};

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stoi(item));
    }
    return out;
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    return json::parse(read_file(path));
}

/// Config file < flags. Flags already hold config/default values when the
/// user did not pass them, so only unset flags are overridden.
template <typename T>
void config_override(const json& cfg, const char* section, const char* key, T& value,
                     bool flag_given) {
    if (flag_given) return;
    if (!cfg.contains(section)) return;
    const json& s = cfg.at(section);
    if (s.contains(key)) value = s.at(key).get<T>();
}

grid::ControlState control_from_flags(const dss::CircuitSpec& spec, const std::string& caps,
                                      const std::string& taps) {
    grid::ControlState st;
    if (caps.empty()) {
        for (const auto& c : spec.capacitors) st.cap_states.push_back(c.initially_on ? 1 : 0);
    } else {
        st.cap_states = parse_int_list(caps);
    }
    if (taps.empty()) {
        st.tap_positions.assign(spec.transformers.size(), 0);
    } else {
        st.tap_positions = parse_int_list(taps);
    }
    return st;
}

void emit(const std::string& out_path, const std::string& content, bool quiet) {
    if (out_path.empty() || out_path == "-") {
        std::cout << content;
    } else {
        write_file_atomic(out_path, content);
        if (!quiet) std::cerr << "wrote " << out_path << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unbalanced distribution feeders: circuit parsing, per-phase multigraph "
                 "embedding, sweep power flow, and a GNN surrogate"};
    app.require_subcommand(0, 1);
    app.fallthrough();

    CommonOpts common;
    app.add_option("--seed", common.seed, "RNG seed for stochastic commands");
    app.add_option("--config", common.config_path, "JSON config file (model/train/gen sections)");
    app.add_flag("--quiet", common.quiet, "suppress progress logging");
    app.set_version_flag("--version",
                         std::string(kVersion) +
                             "\nschemas: circuit-json 1, multigraph-json 1, solution-json 1, "
                             "dataset 1, checkpoint 1, metrics 1, bench 1");

    // parse
    auto* cmd_parse = app.add_subcommand("parse", "parse a .dss file and emit the circuit as JSON");
    std::string parse_file_path, parse_json_out;
    cmd_parse->add_option("file", parse_file_path, "input .dss file")->required();
    cmd_parse->add_option("--json-out", parse_json_out, "output path (stdout when omitted)");

    // graph
    auto* cmd_graph = app.add_subcommand("graph", "embed a .dss file as a multigraph JSON");
    std::string graph_file, graph_out, graph_caps, graph_taps;
    double graph_sbase = 1000.0;
    cmd_graph->add_option("file", graph_file, "input .dss file")->required();
    cmd_graph->add_option("--out", graph_out, "output path (stdout when omitted)");
    cmd_graph->add_option("--caps", graph_caps, "capacitor states, e.g. 1,0");
    cmd_graph->add_option("--taps", graph_taps, "tap positions, e.g. 0,-2");
    cmd_graph->add_option("--sbase", graph_sbase, "three-phase power base, kVA");

    // solve
    auto* cmd_solve = app.add_subcommand("solve", "run the power-flow sweep");
    std::string solve_file, solve_out, solve_caps, solve_taps;
    double solve_sbase = 1000.0, solve_tol = 1e-6;
    int solve_max_iter = 100;
    cmd_solve->add_option("file", solve_file, "input .dss file")->required();
    cmd_solve->add_option("--out", solve_out, "output path (stdout when omitted)");
    cmd_solve->add_option("--caps", solve_caps, "capacitor states, e.g. 1,0");
    cmd_solve->add_option("--taps", solve_taps, "tap positions, e.g. 0,-2");
    cmd_solve->add_option("--sbase", solve_sbase, "three-phase power base, kVA");
    cmd_solve->add_option("--tol", solve_tol, "convergence tolerance, pu");
    cmd_solve->add_option("--max-iter", solve_max_iter, "iteration limit");

    // gen
    auto* cmd_gen = app.add_subcommand("gen", "generate a labeled mutant dataset");
    std::string gen_file, gen_mode = "uniform", gen_out = "dataset";
    int gen_n = 1000, gen_train = -1, gen_val = -1, gen_jobs = 1, gen_profile_len = 48;
    double gen_delta = 0.1, gen_sigma = 0.2, gen_sbase = 1000.0;
    cmd_gen->add_option("file", gen_file, "input .dss file")->required();
    cmd_gen->add_option("--mode", gen_mode, "uniform | timeseries");
    cmd_gen->add_option("--delta", gen_delta, "uniform mode: +/- load variation fraction");
    cmd_gen->add_option("--profile-len", gen_profile_len, "timeseries mode: steps per day");
    cmd_gen->add_option("--sigma", gen_sigma, "timeseries mode: lognormal noise");
    cmd_gen->add_option("--n", gen_n, "total mutants (80/20 train/val split)");
    cmd_gen->add_option("--train", gen_train, "training mutants (overrides --n split)");
    cmd_gen->add_option("--val", gen_val, "validation mutants (overrides --n split)");
    cmd_gen->add_option("--out", gen_out, "output prefix (<prefix>.train.jsonl, <prefix>.val.jsonl)");
    cmd_gen->add_option("--jobs", gen_jobs, "solver worker threads");
    cmd_gen->add_option("--sbase", gen_sbase, "three-phase power base, kVA");

    // train
    auto* cmd_train = app.add_subcommand("train", "train the surrogate on a dataset");
    std::string train_data, train_val_data, train_ckpt = "checkpoint.json", train_curve;
    gnn::ModelConfig mcfg;
    train::TrainConfig tcfg;
    cmd_train->add_option("train_data", train_data, "training dataset (.jsonl)")->required();
    cmd_train->add_option("val_data", train_val_data, "validation dataset (.jsonl)")->required();
    cmd_train->add_option("--out", train_ckpt, "checkpoint output path");
    cmd_train->add_option("--curve", train_curve, "loss-curve JSON output path");
    auto* opt_epochs = cmd_train->add_option("--epochs", tcfg.epochs, "training epochs");
    auto* opt_bs = cmd_train->add_option("--batch-size", tcfg.batch_size, "mini-batch size");
    auto* opt_lr = cmd_train->add_option("--lr", tcfg.lr0, "initial learning rate");
    auto* opt_hidden = cmd_train->add_option("--hidden-dim", mcfg.hidden_dim, "node embedding width");
    auto* opt_state = cmd_train->add_option("--state-dim", mcfg.state_dim, "state embedding width");
    auto* opt_layers = cmd_train->add_option("--layers", mcfg.num_layers, "graph layers");
    auto* opt_depth = cmd_train->add_option("--mlp-depth", mcfg.mlp_depth, "linear layers per MLP");

    // eval
    auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string eval_ckpt, eval_data, eval_out;
    cmd_eval->add_option("checkpoint", eval_ckpt, "checkpoint file")->required();
    cmd_eval->add_option("val_data", eval_data, "validation dataset (.jsonl)")->required();
    cmd_eval->add_option("--out", eval_out, "metrics JSON output path (stdout when omitted)");

    // bench
    auto* cmd_bench = app.add_subcommand("bench", "time solver solves vs surrogate forwards");
    std::string bench_ckpt, bench_file, bench_data, bench_out, bench_batches = "1,128";
    int bench_reps = 10;
    double bench_sbase = 1000.0;
    cmd_bench->add_option("checkpoint", bench_ckpt, "checkpoint file")->required();
    cmd_bench->add_option("file", bench_file, "input .dss file")->required();
    cmd_bench->add_option("val_data", bench_data, "validation dataset (.jsonl)")->required();
    cmd_bench->add_option("--batch-sizes", bench_batches, "comma list of forward batch sizes");
    cmd_bench->add_option("--reps", bench_reps, "timed repetitions (after 2 warmups)");
    cmd_bench->add_option("--out", bench_out, "report JSON output path (stdout when omitted)");
    cmd_bench->add_option("--sbase", bench_sbase, "three-phase power base, kVA");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);  // --help / --version
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << "error: a subcommand is required (see --help)\n";
        return kExitUsage;
    }

    try {
        json cfg = load_config(common.config_path);

        if (cmd_parse->parsed()) {
            auto spec = dss::parse_file(read_file(parse_file_path));
            if (!common.quiet)
                for (const auto& w : spec.warnings) std::cerr << "warning: " << w << "\n";
            emit(parse_json_out, dss::to_json_string(spec), common.quiet);
            return kExitOk;
        }

        if (cmd_graph->parsed()) {
            auto spec = dss::parse_file(read_file(graph_file));
            auto g = grid::build_multigraph(spec, control_from_flags(spec, graph_caps, graph_taps),
                                            graph_sbase);
            emit(graph_out, grid::to_json_string(g), common.quiet);
            return kExitOk;
        }

        if (cmd_solve->parsed()) {
            auto spec = dss::parse_file(read_file(solve_file));
            auto g = grid::build_multigraph(spec, control_from_flags(spec, solve_caps, solve_taps),
                                            solve_sbase);
            pf::SolverConfig scfg{solve_tol, solve_max_iter};
            auto sol = pf::solve(g, scfg);
            emit(solve_out, pf::to_json_string(g, sol), common.quiet);
            return kExitOk;
        }

        if (cmd_gen->parsed()) {
            auto spec = dss::parse_file(read_file(gen_file));
            train::MutationMode mode;
            config_override(cfg, "gen", "delta", gen_delta, cmd_gen->count("--delta") > 0);
            config_override(cfg, "gen", "sigma", gen_sigma, cmd_gen->count("--sigma") > 0);
            config_override(cfg, "gen", "mode", gen_mode, cmd_gen->count("--mode") > 0);
            if (gen_mode == "uniform") {
                mode = train::MutationMode::uniform(gen_delta);
            } else if (gen_mode == "timeseries") {
                mode = train::MutationMode::timeseries(gen_profile_len, gen_sigma);
            } else {
                std::cerr << "error: unknown mutation mode '" << gen_mode << "'\n";
                return kExitUsage;
            }
            int n_train = gen_train >= 0 ? gen_train : (gen_n * 8) / 10;
            int n_val = gen_val >= 0 ? gen_val : gen_n - (gen_n * 8) / 10;
            auto res = train::generate_dataset(spec, n_train, n_val, mode, common.seed, gen_out,
                                               gen_jobs, gen_sbase);
            if (!common.quiet)
                std::cerr << "generated " << res.generated << " samples (" << res.discarded
                          << " discarded) -> " << res.train_path << ", " << res.val_path << "\n";
            return kExitOk;
        }

        if (cmd_train->parsed()) {
            config_override(cfg, "train", "epochs", tcfg.epochs, opt_epochs->count() > 0);
            config_override(cfg, "train", "batch_size", tcfg.batch_size, opt_bs->count() > 0);
            config_override(cfg, "train", "lr0", tcfg.lr0, opt_lr->count() > 0);
            config_override(cfg, "train", "beta1", tcfg.beta1, false);
            config_override(cfg, "train", "beta2", tcfg.beta2, false);
            config_override(cfg, "train", "eps_adam", tcfg.eps_adam, false);
            if (cfg.contains("train") && cfg.at("train").contains("milestones"))
                tcfg.milestones =
                    cfg.at("train").at("milestones").get<std::vector<std::pair<int, double>>>();
            config_override(cfg, "model", "hidden_dim", mcfg.hidden_dim, opt_hidden->count() > 0);
            config_override(cfg, "model", "state_dim", mcfg.state_dim, opt_state->count() > 0);
            config_override(cfg, "model", "num_layers", mcfg.num_layers, opt_layers->count() > 0);
            config_override(cfg, "model", "mlp_depth", mcfg.mlp_depth, opt_depth->count() > 0);
            tcfg.seed = common.seed;

            auto train_set = train::load_dataset(train_data);
            auto val_set = train::load_dataset(train_val_data);
            auto res = train::train(train_set, val_set, mcfg, tcfg, train_ckpt, train_curve);
            if (!common.quiet)
                std::cerr << "final train loss " << format_double(res.train_loss.back())
                          << ", best val loss " << format_double(res.best_val) << " (epoch "
                          << res.best_epoch << ") -> " << res.checkpoint_path << "\n";
            return kExitOk;
        }

        if (cmd_eval->parsed()) {
            auto model = gnn::Model::load(eval_ckpt);
            auto val_set = train::load_dataset(eval_data);
            auto metrics = train::evaluate(model, val_set);
            if (!common.quiet) std::cerr << train::metrics_table(metrics);
            emit(eval_out, train::to_json_string(metrics), common.quiet);
            return kExitOk;
        }

        if (cmd_bench->parsed()) {
            auto model = gnn::Model::load(bench_ckpt);
            auto spec = dss::parse_file(read_file(bench_file));
            auto val_set = train::load_dataset(bench_data);
            auto batches = parse_int_list(bench_batches);
            auto report = train::benchmark(model, spec, val_set, batches, bench_reps, bench_sbase);
            emit(bench_out, train::to_json_string(report), common.quiet);
            return kExitOk;
        }

        std::cerr << "error: no subcommand\n";
        return kExitUsage;
    } catch (const dss::LexError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const dss::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const grid::GridError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const pf::SolveError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ad::TapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const train::TrainError& e) {
        // generation/training failures are numeric; malformed inputs are not
        std::cerr << "error: " << e.what() << "\n";
        const std::string what = e.what();
        return what.find("aborted") != std::string::npos ? kExitNumeric : kExitInput;
    } catch (const gnn::ModelError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    }
}
