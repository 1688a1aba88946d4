#pragma once

#include "gridnet/grid.hpp"

#include <array>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridnet::pf {

struct SolverConfig {
    double tolerance = 1e-6;  // max per-phase voltage change, pu
    int max_iter = 100;
};

enum class SolveFailure { Mesh, NonConvergence, VoltageCollapse };

struct SolveError : std::runtime_error {
    SolveFailure kind;
    double last_residual;
    SolveError(SolveFailure k, const std::string& msg, double residual = 0.0)
        : std::runtime_error(msg), kind(k), last_residual(residual) {}
};

struct PFSolution {
    /// Complex per-node per-phase voltages, pu; exactly zero on absent phases.
    std::vector<std::array<std::complex<double>, 3>> v;
    std::array<std::complex<double>, 3> substation_s{};  // per-phase P + jQ, pu
    int iterations = 0;
    bool converged = false;

    double v_mag(int node, int phase) const {
        return std::abs(v[static_cast<size_t>(node)][static_cast<size_t>(phase)]);
    }
    double angle(int node, int phase) const {
        const auto& c = v[static_cast<size_t>(node)][static_cast<size_t>(phase)];
        return (c == std::complex<double>{0.0, 0.0}) ? 0.0 : std::arg(c);
    }
};

struct RadialOrder {
    struct Entry {
        int branch;
        int parent;  // node id nearer the substation
        int child;
    };
    std::vector<Entry> entries;  // parents always precede their children
};

/// Orient branches away from the substation. Throws SolveError(Mesh) on a
/// cycle, naming one of its branches.
RadialOrder radial_order(const grid::MultiGraph& g);

/// Backward/forward sweep from a flat start. Throws on meshes, voltage
/// collapse, and non-convergence (carrying the last voltage change).
PFSolution solve(const grid::MultiGraph& g, const SolverConfig& cfg = {});

struct BranchFlow {
    std::array<std::complex<double>, 3> s_from{};  // pu, into the branch at `from`
    std::array<std::complex<double>, 3> s_to{};    // pu, out of the branch at `to`
};

/// Per-branch power flows recomputed from the solved voltages alone
/// (declaration orientation). Attachment stubs carry their load's power.
std::vector<BranchFlow> branch_flows(const grid::MultiGraph& g, const PFSolution& sol);

/// Max per-node per-phase complex power mismatch (pu) implied by the solved
/// voltages; an independent self-consistency measure.
double power_balance_residual(const grid::MultiGraph& g, const PFSolution& sol);

std::string to_json_string(const grid::MultiGraph& g, const PFSolution& sol, int indent = 2);

}  // namespace gridnet::pf
