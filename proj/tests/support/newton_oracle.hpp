#pragma once

#include "gridnet/grid.hpp"

#include <array>
#include <complex>
#include <vector>

namespace oracle {

struct NodalResult {
    /// Indexed like MultiGraph::nodes; load-node voltages equal their bus.
    std::vector<std::array<std::complex<double>, 3>> v;
    bool converged = false;
    int iterations = 0;
    double max_mismatch = 0.0;
};

/// Brute-force reference: collapses load nodes onto their buses, builds the
/// full complex nodal admittance (taps included), and runs Newton iteration
/// with a numeric Jacobian on the power-balance equations. Test-only; shares
/// no code with the sweep solver.
NodalResult solve_nodal(const gridnet::grid::MultiGraph& g, double tol = 1e-10, int max_iter = 60);

}  // namespace oracle
