#pragma once

#include "gridnet/dss.hpp"

#include <array>
#include <complex>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridnet::grid {

struct GridError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class NodeKind : int { Substation = 0, Bus = 1, Load = 2 };
enum class EdgeKind : int { Line = 0, Transformer = 1 };

/// 32-step regulator map: ratio = declared * (1 + 0.00625 * position).
inline constexpr double kTapStep = 0.00625;
inline constexpr int kTapMin = -16;
inline constexpr int kTapMax = 16;

double tap_ratio_for_position(double declared_ratio, int position);

struct GridNode {
    int id = 0;
    NodeKind kind = NodeKind::Bus;
    std::string name;
    std::array<double, 3> p_pu{};  // per-phase load, nonzero only on Load nodes
    std::array<double, 3> q_pu{};
};

/// One parallel edge per (branch, shared phase).
struct GridEdge {
    int id = 0;
    int from = 0;
    int to = 0;
    dss::Phase phase = dss::Phase::A;
    EdgeKind kind = EdgeKind::Line;
    double tap = 0.0;  // effective transformer ratio, 0 for lines
    int branch = 0;    // index into MultiGraph::branches
};

/// Per-branch electrical model; the solver-facing payload behind the
/// parallel edges of one physical line, transformer, or load stub.
struct BranchModel {
    int from = 0;
    int to = 0;
    std::array<bool, 3> has_phase{};
    std::array<std::complex<double>, 9> z_ohm{};  // absolute-phase indexed
    std::array<std::complex<double>, 9> z_pu{};   // on the system base
    double tap_ratio = 1.0;                       // effective, 1.0 for lines
    EdgeKind kind = EdgeKind::Line;
    bool attachment = false;  // zero-impedance load stub

    std::complex<double> z(int r, int c) const { return z_pu[static_cast<size_t>(r) * 3 + c]; }
};

struct ControlState {
    std::vector<int> cap_states;     // 0/1 per capacitor, declaration order
    std::vector<int> tap_positions;  // kTapMin..kTapMax per transformer
    bool operator==(const ControlState&) const = default;
};

struct CapBank {
    int node = 0;
    std::array<double, 3> q_pu{};
};

struct MultiGraph {
    std::vector<GridNode> nodes;
    std::vector<GridEdge> edges;
    std::vector<BranchModel> branches;
    std::vector<CapBank> capacitors;
    ControlState control;
    double s_base_kva = 1000.0;
    double source_pu = 1.0;
    int substation = 0;
    std::vector<double> bus_kv_ll;  // per-node voltage base, kV line-to-line
};

MultiGraph build_multigraph(const dss::CircuitSpec& spec, const ControlState& state,
                            double s_base_kva = 1000.0);

/// Regenerate MultiGraph::edges from its branches (one edge per present
/// phase, branch order). Used by manual graph construction.
void rebuild_edges(MultiGraph& g);

using NodeFeatureRow = std::array<double, 9>;  // P_abc, Q_abc, onehot(kind)
using EdgeFeatureRow = std::array<double, 3>;  // kind, tap, phase

struct FeatureMatrices {
    std::vector<NodeFeatureRow> x_n;
    std::vector<EdgeFeatureRow> x_e;
};
FeatureMatrices feature_matrices(const MultiGraph& g);

struct PhaseAdjacency {
    int n = 0;
    std::vector<uint8_t> m;  // row-major n*n, symmetric
    bool at(int i, int j) const { return m[static_cast<size_t>(i) * n + j] != 0; }
    bool operator==(const PhaseAdjacency&) const = default;
};
PhaseAdjacency phase_adjacency(const MultiGraph& g, dss::Phase phase);

/// The arrays the surrogate model consumes; also what dataset samples store.
struct GraphArrays {
    std::vector<NodeFeatureRow> x_n;
    std::vector<EdgeFeatureRow> x_e;
    std::vector<std::array<int, 2>> endpoints;  // undirected, local node ids
    ControlState control;
    int substation = 0;
    bool operator==(const GraphArrays&) const = default;
};
GraphArrays to_arrays(const MultiGraph& g);

struct GraphBatch {
    std::vector<NodeFeatureRow> x_n;
    std::vector<EdgeFeatureRow> x_e;
    std::vector<std::array<int, 2>> endpoints;  // batch node ids
    std::vector<int> node_offsets;              // size G+1, strictly increasing
    std::vector<int> edge_offsets;              // size G+1
    std::vector<ControlState> controls;
    std::vector<int> substations;  // batch node ids

    int num_graphs() const { return static_cast<int>(controls.size()); }
    int num_nodes() const { return static_cast<int>(x_n.size()); }
    int num_edges() const { return static_cast<int>(x_e.size()); }
    bool operator==(const GraphBatch&) const = default;
};

GraphBatch make_batch(std::span<const GraphArrays> graphs);
GraphBatch make_batch(std::span<const MultiGraph> graphs);
std::vector<GraphArrays> split_batch(const GraphBatch& batch);

std::string to_json_string(const MultiGraph& g, int indent = 2);
std::string to_json_string(const GraphBatch& b, int indent = 2);

}  // namespace gridnet::grid
