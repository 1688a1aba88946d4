#pragma once

#include "gridnet/ad.hpp"
#include "gridnet/common.hpp"
#include "gridnet/grid.hpp"

#include <array>
#include <string>
#include <vector>

namespace gridnet::gnn {

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int hidden_dim = 64;
    int state_dim = 32;
    int num_layers = 4;
    int mlp_depth = 2;
    int state_inputs = 0;  // capacitors + transformers of the topology
    bool operator==(const ModelConfig&) const = default;
};

/// Floor added to every constructed message; keeps the power-mean domain
/// strictly positive.
inline constexpr double kMessageEps = 1e-7;
/// |p| floor for the power-mean exponent (projected after optimizer steps).
inline constexpr double kMinExponent = 0.01;

inline constexpr int kNodeFeatures = 9;
inline constexpr int kEdgeFeatures = 6;  // one-hot kind(2) + one-hot phase(3) + tap
inline constexpr int kNodeTargets = 6;   // V_abc, angle_abc
inline constexpr int kGraphTargets = 6;  // P_abc, Q_abc

/// Per-column z-scoring fitted on the training set; std floored at 1e-8.
struct NormStats {
    std::array<double, kNodeFeatures> mean{};
    std::array<double, kNodeFeatures> std{};
    bool fitted = false;
};
NormStats fit_norm_stats(std::span<const grid::NodeFeatureRow> rows);

/// z-scored node features (std floored at 1e-8, so constant columns map to 0).
std::vector<grid::NodeFeatureRow> normalize_node_features(
    std::span<const grid::NodeFeatureRow> rows, const NormStats& stats);

/// One-hot expansion of a raw edge feature row: [line, transformer, a, b, c, tap].
std::array<double, kEdgeFeatures> edge_onehot(const grid::EdgeFeatureRow& raw);

/// State-encoder input layout: [cap states..., tap positions / 16...].
std::vector<double> state_row(const grid::ControlState& control);

/// Per-component affine map folded onto the output heads: the heads predict
/// z-scores of the training targets and the model returns mean + std * z.
/// Identity until fitted, so an untrained model is usable as-is.
struct TargetStats {
    std::array<double, kGraphTargets> g_mean{};
    std::array<double, kGraphTargets> g_std{1, 1, 1, 1, 1, 1};
    std::array<double, kNodeTargets> b_mean{};
    std::array<double, kNodeTargets> b_std{1, 1, 1, 1, 1, 1};
};

class Mlp {
public:
    Mlp() = default;
    /// `final_gain` damps the last linear layer's init; residual blocks use a
    /// small gain so stacking layers keeps hidden magnitudes bounded.
    Mlp(const std::string& name, int in, int out, int depth, Rng& rng, double final_gain = 1.0);

    ad::NodeId forward(ad::Tape& t, ad::NodeId x);
    /// Plain forward: `in` is rows x in_dim row-major, result rows x out_dim.
    std::vector<double> infer(const std::vector<double>& in, size_t rows) const;
    void collect(std::vector<ad::Parameter*>& out);

    std::vector<ad::Parameter> weights;  // depth entries, in x out
    std::vector<ad::Parameter> biases;   // depth entries, 1 x out
};

struct GenConvLayer {
    Mlp update;
    ad::Parameter p;  // power-mean exponent, initialized at 1
    ad::Parameter s;  // message-normalization scale, initialized at 1
};

struct ForwardOutput {
    ad::NodeId y_b = -1;          // (bus+load rows) x 6
    ad::NodeId y_g = -1;          // graphs x 6
    std::vector<int32_t> y_b_nodes;  // batch node id per y_b row
};

struct InferOutput {
    std::vector<std::array<double, kNodeTargets>> y_b;
    std::vector<std::array<double, kGraphTargets>> y_g;
    std::vector<int32_t> y_b_nodes;
};

class Model {
public:
    Model(ModelConfig cfg, uint64_t seed);

    ForwardOutput forward(ad::Tape& tape, const grid::GraphBatch& batch);
    /// Tape-free forward producing the same numbers as forward().
    InferOutput infer(const grid::GraphBatch& batch) const;

    std::vector<ad::Parameter*> parameters();
    /// Project the power-mean exponents back to |p| >= kMinExponent.
    void clamp_exponents();

    void save(const std::string& path) const;
    static Model load(const std::string& path);

    ModelConfig config;
    NormStats stats;
    TargetStats target_stats;
    Mlp state_encoder;
    Mlp edge_encoder;
    Mlp node_encoder;
    std::vector<GenConvLayer> layers;
    ad::Parameter node_head_w, node_head_b;
    ad::Parameter sub_head_w, sub_head_b;
};

}  // namespace gridnet::gnn
