#pragma once

#include "gridnet/gnn.hpp"
#include "gridnet/pf.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace gridnet::train {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MutationMode {
    enum class Kind { Uniform, Timeseries };
    Kind kind = Kind::Uniform;
    double delta = 0.1;   // Uniform: scale factors drawn from [1-delta, 1+delta]
    int profile_len = 48; // Timeseries: timesteps per day
    double sigma = 0.2;   // Timeseries: lognormal noise

    static MutationMode uniform(double delta);
    static MutationMode timeseries(int profile_len, double sigma);
};

/// Synthetic two-peak daily load profile; values clamped to [0.3, 1.2].
double daily_profile(double t01);

struct Mutant {
    dss::CircuitSpec spec;
    grid::ControlState state;
};

/// Scale each load's per-phase P and Q and sample capacitor/tap states.
Mutant mutate_loads(const dss::CircuitSpec& spec, const MutationMode& mode, Rng& rng);

struct DatasetSample {
    grid::GraphArrays arrays;
    std::array<double, gnn::kGraphTargets> y_g{};
    std::vector<std::array<double, gnn::kNodeTargets>> y_b;  // non-substation node order
    int iterations = 0;
    bool operator==(const DatasetSample&) const = default;
};

struct DatasetHeader {
    std::string magic = "gridnet.dataset";
    int schema_version = 1;
    uint64_t topology_hash = 0;
    double s_base_kva = 1000.0;
    int n_nodes = 0;
    int n_edges = 0;
    int f_n = 9;
    int f_e = 3;
};

struct Dataset {
    DatasetHeader header;
    std::vector<DatasetSample> samples;
};

/// Hash of the loading-independent graph structure (endpoints, edge
/// kind/phase, node kinds, substation, control layout).
uint64_t topology_hash(const grid::GraphArrays& arrays);

struct GenResult {
    int generated = 0;
    int discarded = 0;
    std::string train_path;
    std::string val_path;
};

/// Solve n_train + n_val mutants and write JSONL datasets. Deterministic in
/// (spec, mode, seed) regardless of `jobs`; aborts if more than 10% of
/// attempts fail to converge.
GenResult generate_dataset(const dss::CircuitSpec& spec, int n_train, int n_val,
                           const MutationMode& mode, uint64_t seed, const std::string& out_prefix,
                           int jobs = 1, double s_base_kva = 1000.0);

Dataset load_dataset(const std::string& path);

struct TrainConfig {
    int epochs = 300;
    int batch_size = 128;
    double lr0 = 1e-3;
    /// (epoch, multiplier) pairs; empty selects {(epochs/2, 0.1), (3*epochs/4, 0.1)}.
    std::vector<std::pair<int, double>> milestones;
    double beta1 = 0.9;
    double beta2 = 0.95;  // shorter second-moment horizon suits these losses
    double eps_adam = 1e-8;
    uint64_t seed = 0;
};

double lr_at_epoch(const TrainConfig& cfg, int epoch);

struct TrainResult {
    std::vector<double> train_loss;  // running mean per epoch
    std::vector<double> val_loss;    // entry 0 is the pre-training loss
    double final_train_loss = 0.0;   // final parameters, whole training set
    double best_val = 0.0;
    int best_epoch = -1;
    std::string checkpoint_path;
};

/// MSE on both target heads, Adam, multistep learning rate. Saves the
/// best-validation checkpoint to checkpoint_out (and the loss curve as JSON
/// when curve_out is nonempty). Aborts on NaN loss after saving the last
/// good checkpoint.
TrainResult train(const Dataset& train_set, const Dataset& val_set, gnn::ModelConfig mcfg,
                  const TrainConfig& tcfg, const std::string& checkpoint_out,
                  const std::string& curve_out = "");

inline constexpr double kNseEta = 1e-3;  // |target| floor in the NSE denominator

/// ((pred - target) / (|target| + eta))^2
double nse_value(double pred, double target);

struct Metrics {
    struct Stat {
        double mean = 0.0;
        double stddev = 0.0;
        size_t count = 0;
    };
    Stat p, q, v, phi;  // pooled over samples and phases
};

Metrics evaluate(const gnn::Model& model, const Dataset& val, int batch_size = 128);
std::string metrics_table(const Metrics& m);
std::string to_json_string(const Metrics& m, int indent = 2);

struct BenchReport {
    struct Timing {
        double mean_s = 0.0;
        double std_s = 0.0;
        int reps = 0;
    };
    Timing solver_solve;  // one full solve per sample
    std::vector<std::pair<int, Timing>> forward_per_sample;  // per batch size
    int samples_used = 0;
};

/// Wall-clock comparison of the solver against the surrogate's forward pass
/// at the given batch sizes. Single-threaded; `reps` repetitions after two
/// warmup rounds.
BenchReport benchmark(const gnn::Model& model, const dss::CircuitSpec& spec, const Dataset& val,
                      std::span<const int> batch_sizes, int reps = 10,
                      double s_base_kva = 1000.0);
std::string to_json_string(const BenchReport& r, int indent = 2);

}  // namespace gridnet::train
