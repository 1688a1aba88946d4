#include "gridnet/grid.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>

namespace gridnet::grid {

using dss::Phase;

double tap_ratio_for_position(double declared_ratio, int position) {
    return declared_ratio * (1.0 + kTapStep * position);
}

namespace {

double z_base_ohm(double kv_ll, double s_base_kva) { return 1000.0 * kv_ll * kv_ll / s_base_kva; }

struct BusTable {
    std::map<std::string, int> index;
    std::vector<std::string> names;
    std::vector<uint8_t> phase_mask;

    int intern(const std::string& name) {
        auto it = index.find(name);
        if (it != index.end()) return it->second;
        int id = static_cast<int>(names.size());
        index.emplace(name, id);
        names.push_back(name);
        phase_mask.push_back(0);
        return id;
    }
};

}  // namespace

MultiGraph build_multigraph(const dss::CircuitSpec& spec, const ControlState& state,
                            double s_base_kva) {
    if (s_base_kva <= 0) throw GridError("s_base_kva must be > 0");
    if (state.cap_states.size() != spec.capacitors.size())
        throw GridError("control state has " + std::to_string(state.cap_states.size()) +
                        " capacitor states, spec declares " + std::to_string(spec.capacitors.size()));
    if (state.tap_positions.size() != spec.transformers.size())
        throw GridError("control state has " + std::to_string(state.tap_positions.size()) +
                        " tap positions, spec declares " + std::to_string(spec.transformers.size()));
    for (int s : state.cap_states)
        if (s != 0 && s != 1) throw GridError("capacitor states must be 0 or 1");
    for (int t : state.tap_positions)
        if (t < kTapMin || t > kTapMax)
            throw GridError("tap position " + std::to_string(t) + " outside " +
                            std::to_string(kTapMin) + ".." + std::to_string(kTapMax));

    // Bus table in declaration order, source first.
    BusTable buses;
    buses.intern(spec.source.bus);
    struct TerminalPair {
        int b1, b2;
    };
    std::vector<TerminalPair> line_buses, xfmr_buses;
    for (const auto& ld : spec.lines) {
        int a = buses.intern(ld.bus1.bus);
        int b = buses.intern(ld.bus2.bus);
        if (a == b) throw GridError("line '" + ld.name + "' connects bus '" + ld.bus1.bus +
                                    "' to itself");
        buses.phase_mask[static_cast<size_t>(a)] |= ld.bus1.mask();
        buses.phase_mask[static_cast<size_t>(b)] |= ld.bus2.mask();
        line_buses.push_back({a, b});
    }
    for (const auto& td : spec.transformers) {
        int a = buses.intern(td.bus1.bus);
        int b = buses.intern(td.bus2.bus);
        if (a == b) throw GridError("transformer '" + td.name + "' connects bus '" + td.bus1.bus +
                                    "' to itself");
        buses.phase_mask[static_cast<size_t>(a)] |= td.bus1.mask();
        buses.phase_mask[static_cast<size_t>(b)] |= td.bus2.mask();
        xfmr_buses.push_back({a, b});
    }

    const int n_buses = static_cast<int>(buses.names.size());

    // Voltage bases: breadth-first from the source; transformers change zones.
    std::vector<double> kv(static_cast<size_t>(n_buses), 0.0);
    {
        struct Adj {
            int other;
            double ratio;  // kv_other = kv_this * ratio
        };
        std::vector<std::vector<Adj>> adj(static_cast<size_t>(n_buses));
        for (const auto& tp : line_buses) {
            adj[static_cast<size_t>(tp.b1)].push_back({tp.b2, 1.0});
            adj[static_cast<size_t>(tp.b2)].push_back({tp.b1, 1.0});
        }
        for (size_t t = 0; t < xfmr_buses.size(); ++t) {
            const auto& td = spec.transformers[t];
            adj[static_cast<size_t>(xfmr_buses[t].b1)].push_back({xfmr_buses[t].b2, td.kv2 / td.kv1});
            adj[static_cast<size_t>(xfmr_buses[t].b2)].push_back({xfmr_buses[t].b1, td.kv1 / td.kv2});
        }
        std::deque<int> queue;
        int src = buses.index.at(spec.source.bus);
        kv[static_cast<size_t>(src)] = spec.source.base_kv;
        queue.push_back(src);
        while (!queue.empty()) {
            int u = queue.front();
            queue.pop_front();
            for (const auto& e : adj[static_cast<size_t>(u)]) {
                if (kv[static_cast<size_t>(e.other)] != 0.0) continue;
                kv[static_cast<size_t>(e.other)] = kv[static_cast<size_t>(u)] * e.ratio;
                queue.push_back(e.other);
            }
        }
        for (int i = 0; i < n_buses; ++i)
            if (kv[static_cast<size_t>(i)] == 0.0)
                throw GridError("disconnected bus '" + buses.names[static_cast<size_t>(i)] + "'");
    }

    MultiGraph g;
    g.s_base_kva = s_base_kva;
    g.source_pu = spec.source.pu;
    g.control = state;
    const double s_phase_kva = s_base_kva / 3.0;

    for (int i = 0; i < n_buses; ++i) {
        GridNode node;
        node.id = i;
        node.name = buses.names[static_cast<size_t>(i)];
        node.kind = (node.name == spec.source.bus) ? NodeKind::Substation : NodeKind::Bus;
        g.nodes.push_back(std::move(node));
        g.bus_kv_ll.push_back(kv[static_cast<size_t>(i)]);
    }
    g.substation = buses.index.at(spec.source.bus);

    // Physical branches: lines then transformers, declaration order.
    for (size_t i = 0; i < spec.lines.size(); ++i) {
        const auto& ld = spec.lines[i];
        BranchModel br;
        br.from = line_buses[i].b1;
        br.to = line_buses[i].b2;
        br.kind = EdgeKind::Line;
        double zb = z_base_ohm(kv[static_cast<size_t>(br.from)], s_base_kva);
        for (Phase p : ld.bus1.phases) br.has_phase[static_cast<size_t>(p)] = true;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                br.z_ohm[static_cast<size_t>(r) * 3 + c] = ld.z_ohm[static_cast<size_t>(r) * 3 + c];
                br.z_pu[static_cast<size_t>(r) * 3 + c] =
                    ld.z_ohm[static_cast<size_t>(r) * 3 + c] / zb;
            }
        g.branches.push_back(std::move(br));
    }
    for (size_t t = 0; t < spec.transformers.size(); ++t) {
        const auto& td = spec.transformers[t];
        BranchModel br;
        br.from = xfmr_buses[t].b1;
        br.to = xfmr_buses[t].b2;
        br.kind = EdgeKind::Transformer;
        br.tap_ratio = tap_ratio_for_position(td.tap_ratio, g.control.tap_positions[t]);
        for (Phase p : td.bus1.phases) br.has_phase[static_cast<size_t>(p)] = true;
        // impedance sits on the secondary side; convert the nameplate base to
        // the system base, correcting for any winding-vs-zone kV mismatch
        double kv_zone2 = kv[static_cast<size_t>(br.to)];
        double scale = (s_base_kva / td.kva) * (td.kv2 / kv_zone2) * (td.kv2 / kv_zone2);
        std::complex<double> z_sys = td.z_pu * scale;
        std::complex<double> z_ohm = td.z_pu * (1000.0 * td.kv2 * td.kv2 / td.kva);
        for (int r = 0; r < 3; ++r) {
            if (!br.has_phase[static_cast<size_t>(r)]) continue;
            br.z_pu[static_cast<size_t>(r) * 3 + r] = z_sys;
            br.z_ohm[static_cast<size_t>(r) * 3 + r] = z_ohm;
        }
        g.branches.push_back(std::move(br));
    }

    // Load nodes hang from their bus through zero-impedance stubs.
    for (const auto& load : spec.loads) {
        auto it = buses.index.find(load.bus.bus);
        int bus_id = it->second;  // wired-bus invariant guaranteed by the parser
        uint8_t bus_mask = buses.phase_mask[static_cast<size_t>(bus_id)];
        for (Phase p : load.bus.phases)
            if (!(bus_mask & (1u << static_cast<int>(p))))
                throw GridError("load '" + load.name + "' uses phase " +
                                std::string(1, dss::phase_letter(p)) + " not present at bus '" +
                                load.bus.bus + "'");
        GridNode node;
        node.id = static_cast<int>(g.nodes.size());
        node.kind = NodeKind::Load;
        node.name = load.name;
        for (Phase p : load.bus.phases) {
            node.p_pu[static_cast<size_t>(p)] = load.p_kw[static_cast<size_t>(p)] / s_phase_kva;
            node.q_pu[static_cast<size_t>(p)] = load.q_kvar[static_cast<size_t>(p)] / s_phase_kva;
        }
        g.nodes.push_back(node);
        g.bus_kv_ll.push_back(kv[static_cast<size_t>(bus_id)]);

        BranchModel stub;
        stub.from = bus_id;
        stub.to = node.id;
        stub.kind = EdgeKind::Line;
        stub.attachment = true;
        for (Phase p : load.bus.phases) stub.has_phase[static_cast<size_t>(p)] = true;
        g.branches.push_back(std::move(stub));
    }

    for (size_t ci = 0; ci < spec.capacitors.size(); ++ci) {
        const auto& cp = spec.capacitors[ci];
        int bus_id = buses.index.at(cp.bus.bus);
        uint8_t bus_mask = buses.phase_mask[static_cast<size_t>(bus_id)];
        for (Phase p : cp.bus.phases)
            if (!(bus_mask & (1u << static_cast<int>(p))))
                throw GridError("capacitor '" + cp.name + "' uses phase " +
                                std::string(1, dss::phase_letter(p)) + " not present at bus '" +
                                cp.bus.bus + "'");
        CapBank bank;
        bank.node = bus_id;
        for (Phase p : cp.bus.phases)
            bank.q_pu[static_cast<size_t>(p)] = cp.q_kvar[static_cast<size_t>(p)] / s_phase_kva;
        g.capacitors.push_back(bank);
    }

    rebuild_edges(g);
    return g;
}

void rebuild_edges(MultiGraph& g) {
    g.edges.clear();
    for (size_t b = 0; b < g.branches.size(); ++b) {
        const auto& br = g.branches[b];
        for (Phase p : dss::kAllPhases) {
            if (!br.has_phase[static_cast<size_t>(p)]) continue;
            GridEdge e;
            e.id = static_cast<int>(g.edges.size());
            e.from = br.from;
            e.to = br.to;
            e.phase = p;
            e.kind = br.kind;
            e.tap = br.kind == EdgeKind::Transformer ? br.tap_ratio : 0.0;
            e.branch = static_cast<int>(b);
            g.edges.push_back(e);
        }
    }
}

FeatureMatrices feature_matrices(const MultiGraph& g) {
    FeatureMatrices f;
    f.x_n.reserve(g.nodes.size());
    for (const auto& n : g.nodes) {
        NodeFeatureRow row{};
        for (int p = 0; p < 3; ++p) {
            row[static_cast<size_t>(p)] = n.p_pu[static_cast<size_t>(p)];
            row[static_cast<size_t>(p) + 3] = n.q_pu[static_cast<size_t>(p)];
        }
        row[6 + static_cast<size_t>(n.kind)] = 1.0;
        f.x_n.push_back(row);
    }
    f.x_e.reserve(g.edges.size());
    for (const auto& e : g.edges) {
        EdgeFeatureRow row{};
        row[0] = static_cast<double>(e.kind);
        row[1] = e.tap;
        row[2] = static_cast<double>(e.phase);
        f.x_e.push_back(row);
    }
    return f;
}

PhaseAdjacency phase_adjacency(const MultiGraph& g, Phase phase) {
    PhaseAdjacency adj;
    adj.n = static_cast<int>(g.nodes.size());
    adj.m.assign(static_cast<size_t>(adj.n) * adj.n, 0);
    for (const auto& e : g.edges) {
        if (e.phase != phase) continue;
        adj.m[static_cast<size_t>(e.from) * adj.n + e.to] = 1;
        adj.m[static_cast<size_t>(e.to) * adj.n + e.from] = 1;
    }
    return adj;
}

GraphArrays to_arrays(const MultiGraph& g) {
    GraphArrays a;
    auto f = feature_matrices(g);
    a.x_n = std::move(f.x_n);
    a.x_e = std::move(f.x_e);
    a.endpoints.reserve(g.edges.size());
    for (const auto& e : g.edges) a.endpoints.push_back({e.from, e.to});
    a.control = g.control;
    a.substation = g.substation;
    return a;
}

GraphBatch make_batch(std::span<const GraphArrays> graphs) {
    if (graphs.empty()) throw GridError("cannot batch an empty graph list");
    GraphBatch b;
    b.node_offsets.push_back(0);
    b.edge_offsets.push_back(0);
    for (const auto& g : graphs) {
        int base = static_cast<int>(b.x_n.size());
        b.x_n.insert(b.x_n.end(), g.x_n.begin(), g.x_n.end());
        b.x_e.insert(b.x_e.end(), g.x_e.begin(), g.x_e.end());
        for (const auto& ep : g.endpoints) b.endpoints.push_back({ep[0] + base, ep[1] + base});
        b.node_offsets.push_back(static_cast<int>(b.x_n.size()));
        b.edge_offsets.push_back(static_cast<int>(b.x_e.size()));
        b.controls.push_back(g.control);
        b.substations.push_back(g.substation + base);
    }
    return b;
}

GraphBatch make_batch(std::span<const MultiGraph> graphs) {
    std::vector<GraphArrays> arrays;
    arrays.reserve(graphs.size());
    for (const auto& g : graphs) arrays.push_back(to_arrays(g));
    return make_batch(arrays);
}

std::vector<GraphArrays> split_batch(const GraphBatch& batch) {
    std::vector<GraphArrays> out;
    for (int gi = 0; gi < batch.num_graphs(); ++gi) {
        GraphArrays a;
        int n0 = batch.node_offsets[static_cast<size_t>(gi)];
        int n1 = batch.node_offsets[static_cast<size_t>(gi) + 1];
        int e0 = batch.edge_offsets[static_cast<size_t>(gi)];
        int e1 = batch.edge_offsets[static_cast<size_t>(gi) + 1];
        a.x_n.assign(batch.x_n.begin() + n0, batch.x_n.begin() + n1);
        a.x_e.assign(batch.x_e.begin() + e0, batch.x_e.begin() + e1);
        for (int e = e0; e < e1; ++e)
            a.endpoints.push_back({batch.endpoints[static_cast<size_t>(e)][0] - n0,
                                   batch.endpoints[static_cast<size_t>(e)][1] - n0});
        a.control = batch.controls[static_cast<size_t>(gi)];
        a.substation = batch.substations[static_cast<size_t>(gi)] - n0;
        out.push_back(std::move(a));
    }
    return out;
}

namespace {

nlohmann::json control_json(const ControlState& c) {
    return {{"cap_states", c.cap_states}, {"tap_positions", c.tap_positions}};
}

}  // namespace

std::string to_json_string(const MultiGraph& g, int indent) {
    using nlohmann::json;
    json j;
    j["schema_version"] = 1;
    j["s_base_kva"] = g.s_base_kva;
    j["source_pu"] = g.source_pu;
    j["substation"] = g.substation;
    j["nodes"] = json::array();
    for (const auto& n : g.nodes)
        j["nodes"].push_back({{"id", n.id},
                              {"kind", static_cast<int>(n.kind)},
                              {"name", n.name},
                              {"p_pu", n.p_pu},
                              {"q_pu", n.q_pu}});
    j["edges"] = json::array();
    for (const auto& e : g.edges)
        j["edges"].push_back({{"id", e.id},
                              {"from", e.from},
                              {"to", e.to},
                              {"phase", static_cast<int>(e.phase)},
                              {"kind", static_cast<int>(e.kind)},
                              {"tap", e.tap},
                              {"branch", e.branch}});
    j["control"] = control_json(g.control);
    j["bus_kv_ll"] = g.bus_kv_ll;
    json adj;
    for (dss::Phase p : dss::kAllPhases) {
        json pairs = json::array();
        for (const auto& e : g.edges)
            if (e.phase == p) pairs.push_back({e.from, e.to});
        adj[std::string(1, dss::phase_letter(p))] = pairs;
    }
    j["phase_adjacency"] = adj;
    return j.dump(indent) + "\n";
}

std::string to_json_string(const GraphBatch& b, int indent) {
    using nlohmann::json;
    json j;
    j["schema_version"] = 1;
    j["num_graphs"] = b.num_graphs();
    j["node_offsets"] = b.node_offsets;
    j["edge_offsets"] = b.edge_offsets;
    j["substations"] = b.substations;
    j["x_n"] = b.x_n;
    j["x_e"] = b.x_e;
    j["endpoints"] = b.endpoints;
    j["controls"] = json::array();
    for (const auto& c : b.controls) j["controls"].push_back(control_json(c));
    return j.dump(indent) + "\n";
}

}  // namespace gridnet::grid
