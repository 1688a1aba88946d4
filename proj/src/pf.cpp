#include "gridnet/pf.hpp"

#include "gridnet/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>

namespace gridnet::pf {

using cd = std::complex<double>;
using grid::BranchModel;
using grid::MultiGraph;

namespace {

std::array<cd, 3> source_voltages(double pu) {
    constexpr double third = 2.0 * std::numbers::pi / 3.0;
    return {cd(pu * std::cos(0.0), pu * std::sin(0.0)),
            cd(pu * std::cos(-third), pu * std::sin(-third)),
            cd(pu * std::cos(third), pu * std::sin(third))};
}

/// Net constant-power consumption per node/phase: loads minus switched
/// capacitor injections.
std::vector<std::array<cd, 3>> consumption(const MultiGraph& g) {
    std::vector<std::array<cd, 3>> s(g.nodes.size());
    for (const auto& n : g.nodes)
        for (int p = 0; p < 3; ++p)
            s[static_cast<size_t>(n.id)][static_cast<size_t>(p)] =
                cd(n.p_pu[static_cast<size_t>(p)], n.q_pu[static_cast<size_t>(p)]);
    for (size_t ci = 0; ci < g.capacitors.size(); ++ci) {
        const auto& cap = g.capacitors[ci];
        if (g.control.cap_states[ci] == 0) continue;
        for (int p = 0; p < 3; ++p)
            s[static_cast<size_t>(cap.node)][static_cast<size_t>(p)] -=
                cd(0.0, cap.q_pu[static_cast<size_t>(p)]);
    }
    return s;
}

/// Per-node energized-phase masks (union of incident branch phases; the
/// substation always carries all three).
std::vector<uint8_t> phase_masks(const MultiGraph& g) {
    std::vector<uint8_t> mask(g.nodes.size(), 0);
    for (const auto& br : g.branches)
        for (int p = 0; p < 3; ++p)
            if (br.has_phase[static_cast<size_t>(p)]) {
                mask[static_cast<size_t>(br.from)] |= static_cast<uint8_t>(1u << p);
                mask[static_cast<size_t>(br.to)] |= static_cast<uint8_t>(1u << p);
            }
    mask[static_cast<size_t>(g.substation)] = 0b111;
    return mask;
}

/// Solve A x = b for a dense complex system (partial pivoting); A and b are
/// overwritten. Used for branch phase blocks (n <= 3).
void solve_complex(int n, std::vector<cd>& a, std::vector<cd>& b) {
    for (int col = 0; col < n; ++col) {
        int piv = col;
        double best = std::abs(a[static_cast<size_t>(col) * n + col]);
        for (int r = col + 1; r < n; ++r) {
            double m = std::abs(a[static_cast<size_t>(r) * n + col]);
            if (m > best) {
                best = m;
                piv = r;
            }
        }
        if (best == 0.0) throw SolveError(SolveFailure::NonConvergence, "singular branch impedance");
        if (piv != col) {
            for (int c = 0; c < n; ++c)
                std::swap(a[static_cast<size_t>(piv) * n + c], a[static_cast<size_t>(col) * n + c]);
            std::swap(b[static_cast<size_t>(piv)], b[static_cast<size_t>(col)]);
        }
        cd inv = 1.0 / a[static_cast<size_t>(col) * n + col];
        for (int r = col + 1; r < n; ++r) {
            cd f = a[static_cast<size_t>(r) * n + col] * inv;
            if (f == cd{}) continue;
            for (int c = col; c < n; ++c)
                a[static_cast<size_t>(r) * n + c] -= f * a[static_cast<size_t>(col) * n + c];
            b[static_cast<size_t>(r)] -= f * b[static_cast<size_t>(col)];
        }
    }
    for (int r = n - 1; r >= 0; --r) {
        cd acc = b[static_cast<size_t>(r)];
        for (int c = r + 1; c < n; ++c) acc -= a[static_cast<size_t>(r) * n + c] * b[static_cast<size_t>(c)];
        b[static_cast<size_t>(r)] = acc / a[static_cast<size_t>(r) * n + r];
    }
}

}  // namespace

RadialOrder radial_order(const MultiGraph& g) {
    const int n = static_cast<int>(g.nodes.size());
    std::vector<std::vector<int>> incident(static_cast<size_t>(n));
    for (size_t b = 0; b < g.branches.size(); ++b) {
        incident[static_cast<size_t>(g.branches[b].from)].push_back(static_cast<int>(b));
        incident[static_cast<size_t>(g.branches[b].to)].push_back(static_cast<int>(b));
    }
    RadialOrder order;
    std::vector<bool> visited(static_cast<size_t>(n), false);
    std::vector<bool> used(g.branches.size(), false);
    std::deque<int> queue;
    visited[static_cast<size_t>(g.substation)] = true;
    queue.push_back(g.substation);
    while (!queue.empty()) {
        int u = queue.front();
        queue.pop_front();
        for (int bi : incident[static_cast<size_t>(u)]) {
            if (used[static_cast<size_t>(bi)]) continue;
            const auto& br = g.branches[static_cast<size_t>(bi)];
            int other = br.from == u ? br.to : br.from;
            if (visited[static_cast<size_t>(other)])
                throw SolveError(SolveFailure::Mesh,
                                 "mesh unsupported: cycle through branch " + std::to_string(bi) +
                                     " (" + g.nodes[static_cast<size_t>(br.from)].name + "-" +
                                     g.nodes[static_cast<size_t>(br.to)].name + ")");
            used[static_cast<size_t>(bi)] = true;
            visited[static_cast<size_t>(other)] = true;
            order.entries.push_back({bi, u, other});
            queue.push_back(other);
        }
    }
    for (int i = 0; i < n; ++i)
        if (!visited[static_cast<size_t>(i)])
            throw SolveError(SolveFailure::Mesh,
                             "disconnected node '" + g.nodes[static_cast<size_t>(i)].name + "'");
    return order;
}

PFSolution solve(const MultiGraph& g, const SolverConfig& cfg) {
    if (cfg.tolerance <= 0) throw SolveError(SolveFailure::NonConvergence, "tolerance must be > 0");
    if (cfg.max_iter < 1) throw SolveError(SolveFailure::NonConvergence, "max_iter must be >= 1");

    const auto order = radial_order(g);
    const auto s_cons = consumption(g);
    const auto masks = phase_masks(g);
    const int n = static_cast<int>(g.nodes.size());
    const auto v_src = source_voltages(g.source_pu);

    PFSolution sol;
    sol.v.assign(static_cast<size_t>(n), {});
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < 3; ++p)
            if (masks[static_cast<size_t>(i)] & (1u << p))
                sol.v[static_cast<size_t>(i)][static_cast<size_t>(p)] = v_src[static_cast<size_t>(p)];

    std::vector<std::array<cd, 3>> cur(static_cast<size_t>(n));
    std::vector<std::array<cd, 3>> branch_i(g.branches.size());

    auto backward = [&]() {
        // node injection currents at present voltages
        for (int i = 0; i < n; ++i) {
            for (int p = 0; p < 3; ++p) {
                const cd s = s_cons[static_cast<size_t>(i)][static_cast<size_t>(p)];
                if (s == cd{}) {
                    cur[static_cast<size_t>(i)][static_cast<size_t>(p)] = cd{};
                    continue;
                }
                const cd v = sol.v[static_cast<size_t>(i)][static_cast<size_t>(p)];
                if (v == cd{})
                    throw SolveError(SolveFailure::VoltageCollapse,
                                     "voltage collapse at node '" +
                                         g.nodes[static_cast<size_t>(i)].name + "'");
                cur[static_cast<size_t>(i)][static_cast<size_t>(p)] = std::conj(s / v);
            }
        }
        // accumulate toward the root; child entries come later in the order
        for (auto it = order.entries.rbegin(); it != order.entries.rend(); ++it) {
            const auto& br = g.branches[static_cast<size_t>(it->branch)];
            const bool flipped = br.from != it->parent;
            auto& ib = branch_i[static_cast<size_t>(it->branch)];
            for (int p = 0; p < 3; ++p) {
                if (!br.has_phase[static_cast<size_t>(p)]) {
                    ib[static_cast<size_t>(p)] = cd{};
                    continue;
                }
                const cd demand = cur[static_cast<size_t>(it->child)][static_cast<size_t>(p)];
                ib[static_cast<size_t>(p)] = demand;
                const double ratio = flipped ? br.tap_ratio : 1.0 / br.tap_ratio;
                cur[static_cast<size_t>(it->parent)][static_cast<size_t>(p)] += demand * ratio;
            }
        }
    };

    double dv_max = 0.0;
    bool refined = false;
    for (int iter = 1; iter <= cfg.max_iter; ++iter) {
        backward();

        // forward: push voltages away from the root
        dv_max = 0.0;
        for (const auto& e : order.entries) {
            const auto& br = g.branches[static_cast<size_t>(e.branch)];
            const bool flipped = br.from != e.parent;
            const double a = br.tap_ratio;
            for (int p = 0; p < 3; ++p) {
                if (!br.has_phase[static_cast<size_t>(p)]) continue;
                cd drop{};
                for (int q = 0; q < 3; ++q) {
                    if (!br.has_phase[static_cast<size_t>(q)]) continue;
                    drop += br.z(p, q) * branch_i[static_cast<size_t>(e.branch)][static_cast<size_t>(q)];
                }
                const cd v_parent = sol.v[static_cast<size_t>(e.parent)][static_cast<size_t>(p)];
                // declared from-side carries the ideal tap; the series drop
                // sits on the to-side and is referred when traversing flipped
                const cd v_new = flipped ? a * v_parent - a * a * drop : v_parent / a - drop;
                const cd dv = v_new - sol.v[static_cast<size_t>(e.child)][static_cast<size_t>(p)];
                dv_max = std::max(dv_max, std::abs(dv));
                sol.v[static_cast<size_t>(e.child)][static_cast<size_t>(p)] = v_new;
            }
        }
        sol.iterations = iter;
        if (!std::isfinite(dv_max))
            throw SolveError(SolveFailure::NonConvergence,
                             "diverged after " + std::to_string(iter) + " iterations", dv_max);
        if (dv_max < cfg.tolerance) {
            // stop after two consecutive sub-tolerance sweeps so injection
            // currents settle against the final voltages
            if (refined) break;
            refined = true;
        } else {
            refined = false;
        }
    }
    if (!refined)
        throw SolveError(SolveFailure::NonConvergence,
                         "no convergence after " + std::to_string(cfg.max_iter) +
                             " iterations (last dV " + format_double(dv_max) + " pu)",
                         dv_max);

    backward();  // root current consistent with final voltages
    for (int p = 0; p < 3; ++p)
        sol.substation_s[static_cast<size_t>(p)] =
            sol.v[static_cast<size_t>(g.substation)][static_cast<size_t>(p)] *
            std::conj(cur[static_cast<size_t>(g.substation)][static_cast<size_t>(p)]);
    sol.converged = true;
    return sol;
}

std::vector<BranchFlow> branch_flows(const MultiGraph& g, const PFSolution& sol) {
    std::vector<BranchFlow> flows(g.branches.size());
    for (size_t bi = 0; bi < g.branches.size(); ++bi) {
        const auto& br = g.branches[bi];
        auto& fl = flows[bi];
        if (br.attachment) {
            // zero-impedance stub: the flow is the child node's demand
            const auto& child = g.nodes[static_cast<size_t>(br.to)];
            for (int p = 0; p < 3; ++p) {
                cd s(child.p_pu[static_cast<size_t>(p)], child.q_pu[static_cast<size_t>(p)]);
                fl.s_from[static_cast<size_t>(p)] = s;
                fl.s_to[static_cast<size_t>(p)] = s;
            }
            continue;
        }
        int phases[3];
        int k = 0;
        for (int p = 0; p < 3; ++p)
            if (br.has_phase[static_cast<size_t>(p)]) phases[k++] = p;
        if (k == 0) continue;
        std::vector<cd> a(static_cast<size_t>(k) * k);
        std::vector<cd> rhs(static_cast<size_t>(k));
        for (int r = 0; r < k; ++r) {
            for (int c = 0; c < k; ++c) a[static_cast<size_t>(r) * k + c] = br.z(phases[r], phases[c]);
            rhs[static_cast<size_t>(r)] =
                sol.v[static_cast<size_t>(br.from)][static_cast<size_t>(phases[r])] / br.tap_ratio -
                sol.v[static_cast<size_t>(br.to)][static_cast<size_t>(phases[r])];
        }
        solve_complex(k, a, rhs);  // rhs now holds the to-side current
        for (int r = 0; r < k; ++r) {
            const cd i_to = rhs[static_cast<size_t>(r)];
            const int p = phases[r];
            fl.s_from[static_cast<size_t>(p)] =
                sol.v[static_cast<size_t>(br.from)][static_cast<size_t>(p)] *
                std::conj(i_to / br.tap_ratio);
            fl.s_to[static_cast<size_t>(p)] =
                sol.v[static_cast<size_t>(br.to)][static_cast<size_t>(p)] * std::conj(i_to);
        }
    }
    return flows;
}

double power_balance_residual(const MultiGraph& g, const PFSolution& sol) {
    const auto flows = branch_flows(g, sol);
    const auto s_cons = consumption(g);
    std::vector<std::array<cd, 3>> balance(g.nodes.size());
    for (size_t i = 0; i < g.nodes.size(); ++i)
        for (int p = 0; p < 3; ++p)
            balance[i][static_cast<size_t>(p)] = -s_cons[i][static_cast<size_t>(p)];
    for (size_t bi = 0; bi < g.branches.size(); ++bi) {
        const auto& br = g.branches[bi];
        for (int p = 0; p < 3; ++p) {
            balance[static_cast<size_t>(br.from)][static_cast<size_t>(p)] -=
                flows[bi].s_from[static_cast<size_t>(p)];
            balance[static_cast<size_t>(br.to)][static_cast<size_t>(p)] +=
                flows[bi].s_to[static_cast<size_t>(p)];
        }
    }
    double worst = 0.0;
    for (const auto& node : g.nodes) {
        if (node.id == g.substation) continue;
        for (int p = 0; p < 3; ++p)
            worst = std::max(worst,
                             std::abs(balance[static_cast<size_t>(node.id)][static_cast<size_t>(p)]));
    }
    return worst;
}

std::string to_json_string(const MultiGraph& g, const PFSolution& sol, int indent) {
    using nlohmann::json;
    json j;
    j["schema_version"] = 1;
    j["converged"] = sol.converged;
    j["iterations"] = sol.iterations;
    json sub;
    for (int p = 0; p < 3; ++p) {
        std::string key(1, dss::phase_letter(static_cast<dss::Phase>(p)));
        sub[key] = {{"p_pu", sol.substation_s[static_cast<size_t>(p)].real()},
                    {"q_pu", sol.substation_s[static_cast<size_t>(p)].imag()}};
    }
    j["substation"] = sub;
    json buses;
    for (const auto& node : g.nodes) {
        if (node.kind == grid::NodeKind::Load) continue;
        json entry;
        for (int p = 0; p < 3; ++p) {
            if (sol.v[static_cast<size_t>(node.id)][static_cast<size_t>(p)] == cd{}) continue;
            std::string key(1, dss::phase_letter(static_cast<dss::Phase>(p)));
            entry[key] = {{"v_pu", sol.v_mag(node.id, p)}, {"angle_rad", sol.angle(node.id, p)}};
        }
        buses[node.name] = entry;
    }
    j["buses"] = buses;
    return j.dump(indent) + "\n";
}

}  // namespace gridnet::pf
