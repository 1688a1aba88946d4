#include "gridnet/ad.hpp"
#include "gridnet/common.hpp"
#include "gridnet/dss.hpp"
#include "gridnet/gnn.hpp"
#include "gridnet/grid.hpp"
#include "gridnet/train.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>

using namespace gridnet;
using namespace gridnet::gnn;
using ad::NodeId;
using ad::Tape;
using ad::Tensor;
using grid::GraphArrays;
using grid::GraphBatch;

namespace {

dss::CircuitSpec fixture4() {
    return dss::parse_file(read_file(std::string(GRIDNET_FIXTURE_DIR) + "/case4.dss"));
}

GraphArrays mutant_arrays(const dss::CircuitSpec& spec, uint64_t seed) {
    Rng rng(seed);
    auto m = train::mutate_loads(spec, train::MutationMode::uniform(0.1), rng);
    return grid::to_arrays(grid::build_multigraph(m.spec, m.state));
}

NormStats unit_stats() {
    NormStats st;
    st.mean.fill(0.0);
    st.std.fill(1.0);
    st.fitted = true;
    return st;
}

Model small_model(const GraphArrays& arrays, int hidden = 8, int layers = 2, uint64_t seed = 5) {
    ModelConfig cfg;
    cfg.hidden_dim = hidden;
    cfg.state_dim = 4;
    cfg.num_layers = layers;
    cfg.mlp_depth = 2;
    cfg.state_inputs =
        static_cast<int>(arrays.control.cap_states.size() + arrays.control.tap_positions.size());
    Model m(cfg, seed);
    m.stats = unit_stats();
    return m;
}

}  // namespace

TEST_CASE("edge one-hot layout: [line, transformer, a, b, c, tap]") {
    CHECK(edge_onehot({0.0, 0.0, 0.0}) == std::array<double, 6>{1, 0, 1, 0, 0, 0});
    CHECK(edge_onehot({1.0, 1.00625, 2.0}) == std::array<double, 6>{0, 1, 0, 0, 1, 1.00625});
    CHECK_THROWS_AS(edge_onehot({0.0, 0.0, 3.0}), ModelError);
}

TEST_CASE("state row layout: [caps, taps/16]") {
    grid::ControlState ctl;
    ctl.cap_states = {1, 0};
    ctl.tap_positions = {8, -16};
    CHECK(state_row(ctl) == std::vector<double>{1.0, 0.0, 0.5, -1.0});
}

TEST_CASE("normalization maps the training mean to zero and floors constant columns") {
    std::vector<grid::NodeFeatureRow> rows = {
        {1.0, 2.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0},
        {3.0, 2.0, 0.0, 1.5, 0.0, 0.0, 1.0, 0.0, 0.0},
    };
    auto stats = fit_norm_stats(rows);
    grid::NodeFeatureRow mean_row{};
    for (int c = 0; c < kNodeFeatures; ++c) mean_row[static_cast<size_t>(c)] = stats.mean[static_cast<size_t>(c)];
    auto normed = normalize_node_features(std::span(&mean_row, 1), stats);
    for (double v : normed[0]) CHECK(v == 0.0);

    // column 1 is constant: its std hits the floor and the value normalizes to 0
    auto n2 = normalize_node_features(rows, stats);
    CHECK(n2[0][1] == 0.0);
    CHECK(n2[1][1] == 0.0);
    CHECK(n2[0][0] == doctest::Approx(-1.0));
    CHECK(n2[1][0] == doctest::Approx(1.0));
}

TEST_CASE("message construction: ReLU(h + e) plus the positive floor") {
    Tape t;
    NodeId h = t.constant(Tensor::matrix(1, 2, {1.0, -2.0}));
    NodeId e = t.constant(Tensor::matrix(1, 2, {0.5, 0.5}));
    NodeId msg = t.add_const(t.relu(t.add(h, e)), kMessageEps);
    CHECK(t.value(msg).v[0] == doctest::Approx(1.5 + kMessageEps));
    CHECK(t.value(msg).v[1] == doctest::Approx(kMessageEps));

    NodeId all_neg = t.add_const(
        t.relu(t.add(t.constant(Tensor::matrix(1, 2, {-1.0, -3.0})),
                     t.constant(Tensor::matrix(1, 2, {-0.5, 0.5})))),
        kMessageEps);
    CHECK(t.value(all_neg).v[0] == kMessageEps);
    CHECK(t.value(all_neg).v[1] == kMessageEps);

    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        Tape tt;
        NodeId a = tt.constant(Tensor::matrix(1, 1, {rng.uniform(-4.0, 4.0)}));
        NodeId b = tt.constant(Tensor::matrix(1, 1, {rng.uniform(-4.0, 4.0)}));
        NodeId m = tt.add_const(tt.relu(tt.add(a, b)), kMessageEps);
        CHECK(tt.value(m).v[0] >= kMessageEps);
    }
}

TEST_CASE("power mean at p=1 equals the arithmetic mean to 1e-12") {
    Tape t;
    NodeId x = t.constant(Tensor::matrix(2, 1, {2.0, 4.0}));
    NodeId p = t.constant(Tensor::scalar(1.0));
    NodeId via_pow = t.pow_inv(t.segment_mean(t.pow_base(x, p), {0, 0}, 1), p);
    NodeId direct = t.segment_mean(x, {0, 0}, 1);
    CHECK(std::abs(t.value(via_pow).v[0] - t.value(direct).v[0]) < 1e-12);
    CHECK(t.value(direct).v[0] == doctest::Approx(3.0));
}

TEST_CASE("power mean at p=64 approaches the max of {2,4}") {
    Tape t;
    NodeId x = t.constant(Tensor::matrix(2, 1, {2.0, 4.0}));
    NodeId p = t.constant(Tensor::scalar(64.0));
    NodeId agg = t.pow_inv(t.segment_mean(t.pow_base(x, p), {0, 0}, 1), p);
    CHECK(std::abs(t.value(agg).v[0] - 4.0) / 4.0 < 0.03);
}

TEST_CASE("power mean of a single neighbor is the identity for any exponent") {
    for (double pe : {0.5, 1.0, 3.0, 64.0, -2.0}) {
        Tape t;
        NodeId x = t.constant(Tensor::matrix(1, 1, {1.7}));
        NodeId p = t.constant(Tensor::scalar(pe));
        NodeId agg = t.pow_inv(t.segment_mean(t.pow_base(x, p), {0}, 1), p);
        CHECK(t.value(agg).v[0] == doctest::Approx(1.7).epsilon(1e-12));
    }
}

TEST_CASE("normalized-message update arithmetic") {
    // h=[3,4] (norm 5), m=[0,2] (norm 2), s=1: update input is [3,9]
    Tape t;
    NodeId h = t.constant(Tensor::matrix(1, 2, {3.0, 4.0}));
    NodeId m = t.constant(Tensor::matrix(1, 2, {0.0, 2.0}));
    NodeId s = t.constant(Tensor::scalar(1.0));
    NodeId term = t.mul_scalar(t.scale_rows(t.div_rows_safe(m, t.row_l2norm(m)), t.row_l2norm(h)), s);
    NodeId u = t.add(h, term);
    CHECK(t.value(u).v[0] == doctest::Approx(3.0));
    CHECK(t.value(u).v[1] == doctest::Approx(9.0));

    // zero aggregate leaves the update input at h
    NodeId zero = t.constant(Tensor::matrix(1, 2, {0.0, 0.0}));
    NodeId term0 =
        t.mul_scalar(t.scale_rows(t.div_rows_safe(zero, t.row_l2norm(zero)), t.row_l2norm(h)), s);
    NodeId u0 = t.add(h, term0);
    CHECK(t.value(u0).v[0] == doctest::Approx(3.0));
    CHECK(t.value(u0).v[1] == doctest::Approx(4.0));
}

TEST_CASE("zero state with zero-initialized biases embeds to zero") {
    auto arrays = mutant_arrays(fixture4(), 1);
    arrays.control.cap_states.assign(arrays.control.cap_states.size(), 0);
    arrays.control.tap_positions.assign(arrays.control.tap_positions.size(), 0);
    Model m = small_model(arrays);
    // biases start at zero, so an all-zero state must embed to exactly zero;
    // observable through y_g: zeroing sub_head rows that read the state
    // embedding must not change the output
    auto batch = grid::make_batch(std::span(&arrays, 1));
    auto base = m.infer(batch);
    for (int r = m.config.hidden_dim; r < m.config.hidden_dim + m.config.state_dim; ++r)
        for (int c = 0; c < kGraphTargets; ++c)
            m.sub_head_w.value.at(static_cast<size_t>(r), static_cast<size_t>(c)) = 0.0;
    auto zeroed = m.infer(batch);
    for (int c = 0; c < kGraphTargets; ++c)
        CHECK(base.y_g[0][static_cast<size_t>(c)] ==
              doctest::Approx(zeroed.y_g[0][static_cast<size_t>(c)]).epsilon(1e-15));
}

TEST_CASE("states differing in one capacitor produce different embeddings") {
    auto arrays = mutant_arrays(fixture4(), 2);
    GraphArrays other = arrays;
    other.control.cap_states[0] = 1 - other.control.cap_states[0];
    Model m = small_model(arrays);
    auto b1 = grid::make_batch(std::span(&arrays, 1));
    auto b2 = grid::make_batch(std::span(&other, 1));
    auto o1 = m.infer(b1);
    auto o2 = m.infer(b2);
    bool differ = false;
    for (int c = 0; c < kGraphTargets; ++c)
        if (o1.y_g[0][static_cast<size_t>(c)] != o2.y_g[0][static_cast<size_t>(c)]) differ = true;
    CHECK(differ);
}

TEST_CASE("forward output shapes") {
    auto arrays = mutant_arrays(fixture4(), 3);
    Model m = small_model(arrays);
    std::vector<GraphArrays> gs{arrays, arrays, arrays};
    auto batch = grid::make_batch(gs);
    Tape t;
    auto out = m.forward(t, batch);
    CHECK(t.value(out.y_g).rows() == 3);
    CHECK(t.value(out.y_g).cols() == static_cast<size_t>(kGraphTargets));
    CHECK(t.value(out.y_b).rows() == batch.x_n.size() - 3);
    CHECK(t.value(out.y_b).cols() == static_cast<size_t>(kNodeTargets));
    CHECK(out.y_b_nodes.size() == batch.x_n.size() - 3);
}

TEST_CASE("batching equivariance: batched forward equals concatenated singles") {
    auto spec = fixture4();
    auto a1 = mutant_arrays(spec, 10);
    auto a2 = mutant_arrays(spec, 11);
    Model m = small_model(a1, 16, 3);

    auto single1 = m.infer(grid::make_batch(std::span(&a1, 1)));
    auto single2 = m.infer(grid::make_batch(std::span(&a2, 1)));
    std::vector<GraphArrays> both{a1, a2};
    auto batched = m.infer(grid::make_batch(both));

    REQUIRE(batched.y_g.size() == 2);
    for (int c = 0; c < kGraphTargets; ++c) {
        CHECK(std::abs(batched.y_g[0][static_cast<size_t>(c)] - single1.y_g[0][static_cast<size_t>(c)]) <
              1e-10);
        CHECK(std::abs(batched.y_g[1][static_cast<size_t>(c)] - single2.y_g[0][static_cast<size_t>(c)]) <
              1e-10);
    }
    REQUIRE(batched.y_b.size() == single1.y_b.size() + single2.y_b.size());
    for (size_t r = 0; r < single1.y_b.size(); ++r)
        for (int c = 0; c < kNodeTargets; ++c)
            CHECK(std::abs(batched.y_b[r][static_cast<size_t>(c)] -
                           single1.y_b[r][static_cast<size_t>(c)]) < 1e-10);
    for (size_t r = 0; r < single2.y_b.size(); ++r)
        for (int c = 0; c < kNodeTargets; ++c)
            CHECK(std::abs(batched.y_b[single1.y_b.size() + r][static_cast<size_t>(c)] -
                           single2.y_b[r][static_cast<size_t>(c)]) < 1e-10);
}

TEST_CASE("tape forward and tape-free inference agree") {
    auto arrays = mutant_arrays(fixture4(), 21);
    Model m = small_model(arrays, 16, 3);
    std::vector<GraphArrays> gs{arrays, mutant_arrays(fixture4(), 22)};
    auto batch = grid::make_batch(gs);
    Tape t;
    auto out = m.forward(t, batch);
    auto inf = m.infer(batch);
    const Tensor& yg = t.value(out.y_g);
    for (size_t r = 0; r < yg.rows(); ++r)
        for (size_t c = 0; c < yg.cols(); ++c)
            CHECK(std::abs(yg.at(r, c) - inf.y_g[r][c]) <= 1e-12);
    const Tensor& yb = t.value(out.y_b);
    for (size_t r = 0; r < yb.rows(); ++r)
        for (size_t c = 0; c < yb.cols(); ++c)
            CHECK(std::abs(yb.at(r, c) - inf.y_b[r][c]) <= 1e-12);
}

TEST_CASE("permutation equivariance: relabeling nodes permutes outputs") {
    auto arrays = mutant_arrays(fixture4(), 30);
    const int n = static_cast<int>(arrays.x_n.size());
    Rng rng(77);
    std::vector<int> perm(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(0, i))]);

    GraphArrays permuted;
    permuted.x_n.resize(arrays.x_n.size());
    for (int i = 0; i < n; ++i) permuted.x_n[static_cast<size_t>(perm[static_cast<size_t>(i)])] =
        arrays.x_n[static_cast<size_t>(i)];
    permuted.x_e = arrays.x_e;
    for (const auto& ep : arrays.endpoints)
        permuted.endpoints.push_back({perm[static_cast<size_t>(ep[0])], perm[static_cast<size_t>(ep[1])]});
    permuted.control = arrays.control;
    permuted.substation = perm[static_cast<size_t>(arrays.substation)];

    Model m = small_model(arrays, 16, 3);
    auto out_a = m.infer(grid::make_batch(std::span(&arrays, 1)));
    auto out_b = m.infer(grid::make_batch(std::span(&permuted, 1)));

    for (int c = 0; c < kGraphTargets; ++c)
        CHECK(std::abs(out_a.y_g[0][static_cast<size_t>(c)] - out_b.y_g[0][static_cast<size_t>(c)]) <
              1e-10);

    // match y_b rows through the permutation
    std::vector<int> row_of_node_b(static_cast<size_t>(n), -1);
    for (size_t r = 0; r < out_b.y_b_nodes.size(); ++r)
        row_of_node_b[static_cast<size_t>(out_b.y_b_nodes[r])] = static_cast<int>(r);
    for (size_t r = 0; r < out_a.y_b_nodes.size(); ++r) {
        const int node_b = perm[static_cast<size_t>(out_a.y_b_nodes[r])];
        const int rb = row_of_node_b[static_cast<size_t>(node_b)];
        REQUIRE(rb >= 0);
        for (int c = 0; c < kNodeTargets; ++c)
            CHECK(std::abs(out_a.y_b[r][static_cast<size_t>(c)] -
                           out_b.y_b[static_cast<size_t>(rb)][static_cast<size_t>(c)]) < 1e-10);
    }
}

TEST_CASE("swapping two parallel edge rows does not change outputs") {
    auto arrays = mutant_arrays(fixture4(), 40);
    // find two edges of the same branch pair (parallel edges of one line)
    size_t e1 = 0, e2 = 0;
    bool found = false;
    for (size_t i = 0; i < arrays.endpoints.size() && !found; ++i)
        for (size_t j = i + 1; j < arrays.endpoints.size() && !found; ++j)
            if (arrays.endpoints[i] == arrays.endpoints[j]) {
                e1 = i;
                e2 = j;
                found = true;
            }
    REQUIRE(found);
    GraphArrays swapped = arrays;
    std::swap(swapped.x_e[e1], swapped.x_e[e2]);
    std::swap(swapped.endpoints[e1], swapped.endpoints[e2]);

    Model m = small_model(arrays, 16, 2);
    auto a = m.infer(grid::make_batch(std::span(&arrays, 1)));
    auto b = m.infer(grid::make_batch(std::span(&swapped, 1)));
    for (int c = 0; c < kGraphTargets; ++c)
        CHECK(std::abs(a.y_g[0][static_cast<size_t>(c)] - b.y_g[0][static_cast<size_t>(c)]) < 1e-10);
    for (size_t r = 0; r < a.y_b.size(); ++r)
        for (int c = 0; c < kNodeTargets; ++c)
            CHECK(std::abs(a.y_b[r][static_cast<size_t>(c)] - b.y_b[r][static_cast<size_t>(c)]) <
                  1e-10);
}

TEST_CASE("zero scale and no edges both disable aggregation identically") {
    auto arrays = mutant_arrays(fixture4(), 50);
    GraphArrays no_edges = arrays;
    no_edges.x_e.clear();
    no_edges.endpoints.clear();

    Model m = small_model(arrays, 8, 2);
    for (auto& layer : m.layers) layer.s.value.v[0] = 0.0;
    auto with_edges = m.infer(grid::make_batch(std::span(&arrays, 1)));

    Model m2 = small_model(arrays, 8, 2);  // same seed, same weights
    auto without_edges = m2.infer(grid::make_batch(std::span(&no_edges, 1)));

    for (size_t r = 0; r < with_edges.y_b.size(); ++r)
        for (int c = 0; c < kNodeTargets; ++c)
            CHECK(with_edges.y_b[r][static_cast<size_t>(c)] ==
                  doctest::Approx(without_edges.y_b[r][static_cast<size_t>(c)]).epsilon(1e-14));
}

TEST_CASE("full-model gradients pass finite differences including p and s") {
    auto spec = fixture4();
    auto a1 = mutant_arrays(spec, 60);
    auto a2 = mutant_arrays(spec, 61);
    Model m = small_model(a1, 6, 2, 9);
    for (auto& layer : m.layers) layer.p.value.v[0] = 1.3;  // move off the init point
    std::vector<GraphArrays> gs{a1, a2};
    auto batch = grid::make_batch(gs);

    Tensor target_g, target_b;
    {
        Rng rng(123);
        Tape t;
        auto out = m.forward(t, batch);
        target_g = Tensor::zeros(t.value(out.y_g).shape);
        target_b = Tensor::zeros(t.value(out.y_b).shape);
        for (auto& v : target_g.v) v = rng.uniform(-1.0, 1.0);
        for (auto& v : target_b.v) v = rng.uniform(-1.0, 1.0);
    }

    auto params = m.parameters();
    auto eval = [&](bool with_grad) {
        Tape t;
        auto out = m.forward(t, batch);
        NodeId loss = t.add(t.mse_loss(out.y_g, t.constant(target_g)),
                            t.mse_loss(out.y_b, t.constant(target_b)));
        if (with_grad) t.backward(loss);
        return t.value(loss).v[0];
    };
    auto report = ad::finite_diff_check(params, eval, 1e-5);
    INFO("worst parameter: ", report.worst_param, "[", report.worst_coord, "]");
    CHECK(report.max_rel_err < 1e-4);

    // p and s must actually receive gradient
    bool p_nonzero = false, s_nonzero = false;
    for (auto& layer : m.layers) {
        if (layer.p.grad.v[0] != 0.0) p_nonzero = true;
        if (layer.s.grad.v[0] != 0.0) s_nonzero = true;
    }
    CHECK(p_nonzero);
    CHECK(s_nonzero);
}

TEST_CASE("sixteen layers stay finite forward and backward") {
    auto arrays = mutant_arrays(fixture4(), 70);
    Model m = small_model(arrays, 8, 16);
    auto batch = grid::make_batch(std::span(&arrays, 1));
    Tape t;
    auto out = m.forward(t, batch);
    NodeId loss = t.add(t.mse_loss(out.y_g, t.constant(Tensor::zeros(t.value(out.y_g).shape))),
                        t.mse_loss(out.y_b, t.constant(Tensor::zeros(t.value(out.y_b).shape))));
    CHECK(std::isfinite(t.value(loss).v[0]));
    t.backward(loss);  // tape ops reject non-finite values internally
    for (auto* p : m.parameters())
        for (double g : p->grad.v) CHECK(std::isfinite(g));
}

TEST_CASE("exponent clamp projects |p| below the floor") {
    auto arrays = mutant_arrays(fixture4(), 80);
    Model m = small_model(arrays);
    m.layers[0].p.value.v[0] = 0.001;
    m.layers[1].p.value.v[0] = -0.002;
    m.clamp_exponents();
    CHECK(m.layers[0].p.value.v[0] == kMinExponent);
    CHECK(m.layers[1].p.value.v[0] == -kMinExponent);
}

TEST_CASE("inference without fitted stats is an error") {
    auto arrays = mutant_arrays(fixture4(), 95);
    ModelConfig cfg;
    cfg.hidden_dim = 4;
    cfg.state_dim = 2;
    cfg.num_layers = 1;
    cfg.state_inputs = 2;
    Model m(cfg, 1);  // stats left unfitted
    auto batch = grid::make_batch(std::span(&arrays, 1));
    CHECK_THROWS_AS(m.infer(batch), ModelError);
}

TEST_CASE("checkpoint save/load is bit-exact") {
    auto arrays = mutant_arrays(fixture4(), 90);
    Model m = small_model(arrays, 12, 2, 31);
    m.layers[0].p.value.v[0] = 1.234567890123456789;
    m.stats.mean[0] = 0.1234567890123456789;
    const std::string path = (std::filesystem::temp_directory_path() / "gridnet_ckpt_test.json").string();
    m.save(path);
    Model loaded = Model::load(path);
    CHECK(loaded.config == m.config);
    CHECK(loaded.stats.mean == m.stats.mean);
    CHECK(loaded.stats.std == m.stats.std);
    auto pa = m.parameters();
    auto pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        CHECK(pa[i]->value == pb[i]->value);
    }
    auto batch = grid::make_batch(std::span(&arrays, 1));
    auto o1 = m.infer(batch);
    auto o2 = loaded.infer(batch);
    for (size_t r = 0; r < o1.y_b.size(); ++r) CHECK(o1.y_b[r] == o2.y_b[r]);
    std::filesystem::remove(path);
}
