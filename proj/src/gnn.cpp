#include "gridnet/gnn.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace gridnet::gnn {

using ad::NodeId;
using ad::Parameter;
using ad::Tensor;

NormStats fit_norm_stats(std::span<const grid::NodeFeatureRow> rows) {
    NormStats st;
    if (rows.empty()) throw ModelError("cannot fit normalization on an empty feature set");
    const double n = static_cast<double>(rows.size());
    for (const auto& r : rows)
        for (int c = 0; c < kNodeFeatures; ++c) st.mean[static_cast<size_t>(c)] += r[static_cast<size_t>(c)];
    for (auto& m : st.mean) m /= n;
    for (const auto& r : rows)
        for (int c = 0; c < kNodeFeatures; ++c) {
            const double d = r[static_cast<size_t>(c)] - st.mean[static_cast<size_t>(c)];
            st.std[static_cast<size_t>(c)] += d * d;
        }
    for (auto& s : st.std) s = std::sqrt(s / n);
    st.fitted = true;
    return st;
}

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

namespace {

Tensor kaiming_uniform(size_t in, size_t out, Rng& rng, double gain = 1.0) {
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(std::max<size_t>(in, 1)));
    Tensor t = Tensor::zeros({in, out});
    for (auto& v : t.v) v = rng.uniform(-bound, bound);
    return t;
}

/// Mirrors the tape's matmul loop so tape-free inference reproduces its
/// floating-point results.
void matmul_plain(const double* a, size_t m, size_t k, const double* b, size_t p, double* c) {
    std::fill(c, c + m * p, 0.0);
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * p;
        for (size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * p;
            for (size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Mlp::Mlp(const std::string& name, int in, int out, int depth, Rng& rng, double final_gain) {
    if (depth < 1) throw ModelError("mlp depth must be >= 1");
    int prev = in;
    for (int l = 0; l < depth; ++l) {
        const double gain = (l + 1 == depth) ? final_gain : 1.0;
        weights.emplace_back(
            name + ".w" + std::to_string(l),
            kaiming_uniform(static_cast<size_t>(prev), static_cast<size_t>(out), rng, gain));
        biases.emplace_back(name + ".b" + std::to_string(l),
                            Tensor::zeros({1, static_cast<size_t>(out)}));
        prev = out;
    }
}

ad::NodeId Mlp::forward(ad::Tape& t, ad::NodeId x) {
    for (size_t l = 0; l < weights.size(); ++l) {
        x = t.add_rowvec(t.matmul(x, t.param(weights[l])), t.param(biases[l]));
        if (l + 1 < weights.size()) x = t.relu(x);
    }
    return x;
}

std::vector<double> Mlp::infer(const std::vector<double>& in, size_t rows) const {
    std::vector<double> cur = in;
    for (size_t l = 0; l < weights.size(); ++l) {
        const Tensor& w = weights[l].value;
        const Tensor& b = biases[l].value;
        std::vector<double> next(rows * w.cols());
        matmul_plain(cur.data(), rows, w.rows(), w.v.data(), w.cols(), next.data());
        for (size_t i = 0; i < rows; ++i)
            for (size_t j = 0; j < w.cols(); ++j) next[i * w.cols() + j] += b.v[j];
        if (l + 1 < weights.size())
            for (auto& v : next) v = v > 0.0 ? v : 0.0;
        cur = std::move(next);
    }
    return cur;
}

void Mlp::collect(std::vector<ad::Parameter*>& out) {
    for (size_t l = 0; l < weights.size(); ++l) {
        out.push_back(&weights[l]);
        out.push_back(&biases[l]);
    }
}

// ---------------------------------------------------------------------------
// Featurization
// ---------------------------------------------------------------------------

std::vector<grid::NodeFeatureRow> normalize_node_features(
    std::span<const grid::NodeFeatureRow> rows, const NormStats& stats) {
    if (!stats.fitted) throw ModelError("normalization stats not fitted");
    std::vector<grid::NodeFeatureRow> out(rows.begin(), rows.end());
    for (auto& row : out)
        for (int c = 0; c < kNodeFeatures; ++c) {
            const double sd = std::max(stats.std[static_cast<size_t>(c)], 1e-8);
            row[static_cast<size_t>(c)] = (row[static_cast<size_t>(c)] -
                                           stats.mean[static_cast<size_t>(c)]) / sd;
        }
    return out;
}

std::array<double, kEdgeFeatures> edge_onehot(const grid::EdgeFeatureRow& raw) {
    const int kind = static_cast<int>(raw[0]);
    const int phase = static_cast<int>(raw[2]);
    if (kind < 0 || kind > 1) throw ModelError("edge kind must be 0 or 1");
    if (phase < 0 || phase > 2) throw ModelError("invalid phase code in edge features");
    std::array<double, kEdgeFeatures> out{};
    out[static_cast<size_t>(kind)] = 1.0;
    out[static_cast<size_t>(2 + phase)] = 1.0;
    out[5] = raw[1];  // tap
    return out;
}

std::vector<double> state_row(const grid::ControlState& control) {
    std::vector<double> out;
    out.reserve(control.cap_states.size() + control.tap_positions.size());
    for (int c : control.cap_states) out.push_back(static_cast<double>(c));
    for (int t : control.tap_positions) out.push_back(static_cast<double>(t) / 16.0);
    return out;
}

// ---------------------------------------------------------------------------
// Batch encoding shared by forward() and infer()
// ---------------------------------------------------------------------------

namespace {

struct BatchEncoding {
    Tensor x_n_norm;   // N x 9
    Tensor x_e_onehot; // E x 6
    Tensor state;      // G x state_inputs
    std::vector<int32_t> src, dst, edge_of;  // 2E directed half-edges
    std::vector<int32_t> non_sub, subs;
    Tensor has_col;    // N x 1, 1 when the node has neighbors
    Tensor iso_fill;   // N x d, 1.0 rows on isolated nodes
};

BatchEncoding encode_batch(const grid::GraphBatch& batch, const NormStats& stats,
                           const ModelConfig& cfg) {
    if (!stats.fitted) throw ModelError("normalization stats not fitted");
    const int n = batch.num_nodes();
    const int e = batch.num_edges();
    const int g = batch.num_graphs();

    BatchEncoding enc;
    enc.x_n_norm = Tensor::zeros({static_cast<size_t>(n), kNodeFeatures});
    {
        const auto normed = normalize_node_features(batch.x_n, stats);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < kNodeFeatures; ++c)
                enc.x_n_norm.v[static_cast<size_t>(i) * kNodeFeatures + c] =
                    normed[static_cast<size_t>(i)][static_cast<size_t>(c)];
    }

    enc.x_e_onehot = Tensor::zeros({static_cast<size_t>(e), kEdgeFeatures});
    for (int i = 0; i < e; ++i) {
        const auto row = edge_onehot(batch.x_e[static_cast<size_t>(i)]);
        for (int c = 0; c < kEdgeFeatures; ++c)
            enc.x_e_onehot.v[static_cast<size_t>(i) * kEdgeFeatures + c] =
                row[static_cast<size_t>(c)];
    }

    enc.state = Tensor::zeros({static_cast<size_t>(g), static_cast<size_t>(cfg.state_inputs)});
    for (int gi = 0; gi < g; ++gi) {
        const auto row = state_row(batch.controls[static_cast<size_t>(gi)]);
        if (static_cast<int>(row.size()) != cfg.state_inputs)
            throw ModelError("control state length " + std::to_string(row.size()) +
                             " does not match the model's " + std::to_string(cfg.state_inputs));
        for (int c = 0; c < cfg.state_inputs; ++c)
            enc.state.v[static_cast<size_t>(gi) * cfg.state_inputs + c] = row[static_cast<size_t>(c)];
    }

    enc.src.reserve(static_cast<size_t>(e) * 2);
    enc.dst.reserve(static_cast<size_t>(e) * 2);
    enc.edge_of.reserve(static_cast<size_t>(e) * 2);
    for (int i = 0; i < e; ++i) {
        const auto& ep = batch.endpoints[static_cast<size_t>(i)];
        enc.src.push_back(ep[0]);
        enc.dst.push_back(ep[1]);
        enc.edge_of.push_back(i);
        enc.src.push_back(ep[1]);
        enc.dst.push_back(ep[0]);
        enc.edge_of.push_back(i);
    }

    std::vector<uint8_t> is_sub(static_cast<size_t>(n), 0);
    for (int s : batch.substations) is_sub[static_cast<size_t>(s)] = 1;
    for (int i = 0; i < n; ++i)
        if (!is_sub[static_cast<size_t>(i)]) enc.non_sub.push_back(i);
    enc.subs.assign(batch.substations.begin(), batch.substations.end());

    std::vector<int32_t> degree(static_cast<size_t>(n), 0);
    for (int32_t d : enc.dst) ++degree[static_cast<size_t>(d)];
    enc.has_col = Tensor::zeros({static_cast<size_t>(n), 1});
    enc.iso_fill = Tensor::zeros({static_cast<size_t>(n), static_cast<size_t>(cfg.hidden_dim)});
    for (int i = 0; i < n; ++i) {
        if (degree[static_cast<size_t>(i)] > 0) {
            enc.has_col.v[static_cast<size_t>(i)] = 1.0;
        } else {
            for (int j = 0; j < cfg.hidden_dim; ++j)
                enc.iso_fill.v[static_cast<size_t>(i) * cfg.hidden_dim + j] = 1.0;
        }
    }
    return enc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg, uint64_t seed) : config(cfg) {
    if (cfg.hidden_dim < 1 || cfg.state_dim < 1 || cfg.num_layers < 1 || cfg.mlp_depth < 1)
        throw ModelError("model dimensions must be >= 1");
    if (cfg.state_inputs < 0) throw ModelError("state_inputs must be >= 0");
    Rng rng(seed ^ 0xA5C3D2E1F0B49687ull);
    state_encoder = Mlp("state_encoder", cfg.state_inputs, cfg.state_dim, cfg.mlp_depth, rng);
    edge_encoder = Mlp("edge_encoder", kEdgeFeatures, cfg.hidden_dim, cfg.mlp_depth, rng);
    node_encoder = Mlp("node_encoder", kNodeFeatures, cfg.hidden_dim, cfg.mlp_depth, rng);
    for (int l = 0; l < cfg.num_layers; ++l) {
        GenConvLayer layer;
        const std::string base = "layer" + std::to_string(l);
        layer.update =
            Mlp(base + ".update", cfg.hidden_dim, cfg.hidden_dim, cfg.mlp_depth, rng, 0.3);
        layer.p = Parameter(base + ".p", Tensor::scalar(1.0));
        layer.s = Parameter(base + ".s", Tensor::scalar(1.0));
        layers.push_back(std::move(layer));
    }
    node_head_w = Parameter(
        "node_head.w",
        kaiming_uniform(static_cast<size_t>(cfg.hidden_dim), kNodeTargets, rng, 0.1));
    node_head_b = Parameter("node_head.b", Tensor::zeros({1, kNodeTargets}));
    sub_head_w = Parameter(
        "sub_head.w",
        kaiming_uniform(static_cast<size_t>(cfg.hidden_dim + cfg.state_dim), kGraphTargets, rng, 0.1));
    sub_head_b = Parameter("sub_head.b", Tensor::zeros({1, kGraphTargets}));
}

std::vector<ad::Parameter*> Model::parameters() {
    std::vector<ad::Parameter*> out;
    state_encoder.collect(out);
    edge_encoder.collect(out);
    node_encoder.collect(out);
    for (auto& layer : layers) {
        layer.update.collect(out);
        out.push_back(&layer.p);
        out.push_back(&layer.s);
    }
    out.push_back(&node_head_w);
    out.push_back(&node_head_b);
    out.push_back(&sub_head_w);
    out.push_back(&sub_head_b);
    return out;
}

void Model::clamp_exponents() {
    for (auto& layer : layers) {
        double& p = layer.p.value.v[0];
        if (std::abs(p) < kMinExponent) p = p < 0.0 ? -kMinExponent : kMinExponent;
    }
}

ForwardOutput Model::forward(ad::Tape& t, const grid::GraphBatch& batch) {
    BatchEncoding enc = encode_batch(batch, stats, config);
    const int32_t n = batch.num_nodes();

    NodeId h = node_encoder.forward(t, t.constant(std::move(enc.x_n_norm)));
    NodeId e = edge_encoder.forward(t, t.constant(std::move(enc.x_e_onehot)));
    NodeId s_emb = state_encoder.forward(t, t.constant(std::move(enc.state)));
    NodeId has_col = t.constant(std::move(enc.has_col));
    NodeId iso_fill = t.constant(std::move(enc.iso_fill));

    for (auto& layer : layers) {
        NodeId p = t.param(layer.p);
        NodeId s = t.param(layer.s);
        // message construction: ReLU(h_j + e_ij) + eps, per directed half-edge
        NodeId h_src = t.gather_rows(h, enc.src);
        NodeId e_dir = t.gather_rows(e, enc.edge_of);
        NodeId msg = t.add_const(t.relu(t.add(h_src, e_dir)), kMessageEps);
        // power-mean aggregation over each destination's neighborhood
        NodeId msg_p = t.pow_base(msg, p);
        NodeId mean_p = t.segment_mean(msg_p, enc.dst, n);
        NodeId agg = t.scale_rows(t.pow_inv(t.add(mean_p, iso_fill), p), has_col);
        // normalized-message update with a residual connection
        NodeId h_norm = t.row_l2norm(h);
        NodeId m_dir = t.div_rows_safe(agg, t.row_l2norm(agg));
        NodeId term = t.mul_scalar(t.scale_rows(m_dir, h_norm), s);
        NodeId updated = layer.update.forward(t, t.add(h, term));
        h = t.add(updated, h);
    }

    ForwardOutput out;
    out.y_b_nodes = enc.non_sub;
    NodeId h_bus = t.gather_rows(h, enc.non_sub);
    NodeId z_b = t.add_rowvec(t.matmul(h_bus, t.param(node_head_w)), t.param(node_head_b));
    NodeId h_sub = t.gather_rows(h, enc.subs);
    NodeId cat = t.concat_cols(h_sub, s_emb);
    NodeId z_g = t.add_rowvec(t.matmul(cat, t.param(sub_head_w)), t.param(sub_head_b));

    // heads work in target z-space; map back to physical units
    auto expand = [&t](size_t rows, const auto& vals) {
        Tensor x = Tensor::zeros({rows, vals.size()});
        for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < vals.size(); ++c) x.v[r * vals.size() + c] = vals[c];
        return t.constant(std::move(x));
    };
    const size_t nb = enc.non_sub.size();
    const size_t ng = enc.subs.size();
    out.y_b = t.add(t.mul(z_b, expand(nb, target_stats.b_std)), expand(nb, target_stats.b_mean));
    out.y_g = t.add(t.mul(z_g, expand(ng, target_stats.g_std)), expand(ng, target_stats.g_mean));
    return out;
}

InferOutput Model::infer(const grid::GraphBatch& batch) const {
    BatchEncoding enc = encode_batch(batch, stats, config);
    const size_t n = static_cast<size_t>(batch.num_nodes());
    const size_t g = static_cast<size_t>(batch.num_graphs());
    const size_t d = static_cast<size_t>(config.hidden_dim);
    const size_t n_dir = enc.src.size();

    std::vector<double> h = node_encoder.infer(enc.x_n_norm.v, n);
    std::vector<double> e = edge_encoder.infer(enc.x_e_onehot.v, static_cast<size_t>(batch.num_edges()));
    std::vector<double> s_emb = state_encoder.infer(enc.state.v, g);

    std::vector<double> msg(n_dir * d), agg(n * d), norm_h(n), norm_m(n), upd_in(n * d);
    for (const auto& layer : layers) {
        const double pe = layer.p.value.v[0];
        const double se = layer.s.value.v[0];
        for (size_t k = 0; k < n_dir; ++k) {
            const double* hs = h.data() + static_cast<size_t>(enc.src[k]) * d;
            const double* ed = e.data() + static_cast<size_t>(enc.edge_of[k]) * d;
            double* m = msg.data() + k * d;
            for (size_t j = 0; j < d; ++j) {
                const double x = hs[j] + ed[j];
                const double r = x > 0.0 ? x : 0.0;
                m[j] = std::exp(pe * std::log(r + kMessageEps));
            }
        }
        std::fill(agg.begin(), agg.end(), 0.0);
        std::vector<double> count(n, 0.0);
        for (size_t k = 0; k < n_dir; ++k) {
            double* arow = agg.data() + static_cast<size_t>(enc.dst[k]) * d;
            const double* m = msg.data() + k * d;
            count[static_cast<size_t>(enc.dst[k])] += 1.0;
            for (size_t j = 0; j < d; ++j) arow[j] += m[j];
        }
        for (size_t i = 0; i < n; ++i) {
            double* arow = agg.data() + i * d;
            if (count[i] > 0.0) {
                for (size_t j = 0; j < d; ++j)
                    arow[j] = std::exp(std::log(arow[j] / count[i]) / pe);
            } else {
                std::fill(arow, arow + d, 0.0);
            }
        }
        for (size_t i = 0; i < n; ++i) {
            const double* hrow = h.data() + i * d;
            const double* arow = agg.data() + i * d;
            double acc_h = 0.0, acc_m = 0.0;
            for (size_t j = 0; j < d; ++j) {
                acc_h += hrow[j] * hrow[j];
                acc_m += arow[j] * arow[j];
            }
            norm_h[i] = std::sqrt(acc_h);
            norm_m[i] = std::sqrt(acc_m);
            double* u = upd_in.data() + i * d;
            for (size_t j = 0; j < d; ++j) {
                const double m_dir = norm_m[i] == 0.0 ? 0.0 : arow[j] / norm_m[i];
                u[j] = hrow[j] + m_dir * norm_h[i] * se;
            }
        }
        std::vector<double> updated = layer.update.infer(upd_in, n);
        for (size_t i = 0; i < n * d; ++i) h[i] = updated[i] + h[i];
    }

    InferOutput out;
    out.y_b_nodes = enc.non_sub;
    // node head over bus/load rows
    {
        std::vector<double> rows(enc.non_sub.size() * d);
        for (size_t i = 0; i < enc.non_sub.size(); ++i)
            std::copy_n(h.data() + static_cast<size_t>(enc.non_sub[i]) * d, d, rows.data() + i * d);
        std::vector<double> y(enc.non_sub.size() * kNodeTargets);
        matmul_plain(rows.data(), enc.non_sub.size(), d, node_head_w.value.v.data(), kNodeTargets,
                     y.data());
        out.y_b.resize(enc.non_sub.size());
        for (size_t i = 0; i < enc.non_sub.size(); ++i)
            for (size_t j = 0; j < kNodeTargets; ++j)
                out.y_b[i][j] = (y[i * kNodeTargets + j] + node_head_b.value.v[j]) *
                                    target_stats.b_std[j] +
                                target_stats.b_mean[j];
    }
    // substation head on [h_sub || state embedding]
    {
        const size_t cat_dim = d + static_cast<size_t>(config.state_dim);
        std::vector<double> cat(g * cat_dim);
        for (size_t i = 0; i < g; ++i) {
            std::copy_n(h.data() + static_cast<size_t>(enc.subs[i]) * d, d, cat.data() + i * cat_dim);
            std::copy_n(s_emb.data() + i * static_cast<size_t>(config.state_dim),
                        static_cast<size_t>(config.state_dim), cat.data() + i * cat_dim + d);
        }
        std::vector<double> y(g * kGraphTargets);
        matmul_plain(cat.data(), g, cat_dim, sub_head_w.value.v.data(), kGraphTargets, y.data());
        out.y_g.resize(g);
        for (size_t i = 0; i < g; ++i)
            for (size_t j = 0; j < kGraphTargets; ++j)
                out.y_g[i][j] = (y[i * kGraphTargets + j] + sub_head_b.value.v[j]) *
                                    target_stats.g_std[j] +
                                target_stats.g_mean[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void Model::save(const std::string& path) const {
    using nlohmann::json;
    json j;
    j["schema_version"] = 1;
    j["config"] = {{"hidden_dim", config.hidden_dim},
                   {"state_dim", config.state_dim},
                   {"num_layers", config.num_layers},
                   {"mlp_depth", config.mlp_depth},
                   {"state_inputs", config.state_inputs}};
    j["stats"] = {{"fitted", stats.fitted}, {"mean", stats.mean}, {"std", stats.std}};
    j["target_stats"] = {{"g_mean", target_stats.g_mean},
                         {"g_std", target_stats.g_std},
                         {"b_mean", target_stats.b_mean},
                         {"b_std", target_stats.b_std}};
    json params = json::array();
    for (const auto* p : const_cast<Model*>(this)->parameters())
        params.push_back({{"name", p->name}, {"shape", p->value.shape}, {"values", p->value.v}});
    j["params"] = std::move(params);
    write_file_atomic(path, j.dump() + "\n");
}

Model Model::load(const std::string& path) {
    using nlohmann::json;
    json j = json::parse(read_file(path));
    if (j.at("schema_version").get<int>() != 1)
        throw ModelError("unsupported checkpoint schema in " + path);
    ModelConfig cfg;
    const auto& jc = j.at("config");
    cfg.hidden_dim = jc.at("hidden_dim").get<int>();
    cfg.state_dim = jc.at("state_dim").get<int>();
    cfg.num_layers = jc.at("num_layers").get<int>();
    cfg.mlp_depth = jc.at("mlp_depth").get<int>();
    cfg.state_inputs = jc.at("state_inputs").get<int>();
    Model m(cfg, 0);
    const auto& js = j.at("stats");
    m.stats.fitted = js.at("fitted").get<bool>();
    auto mean = js.at("mean").get<std::vector<double>>();
    auto sd = js.at("std").get<std::vector<double>>();
    if (mean.size() != kNodeFeatures || sd.size() != kNodeFeatures)
        throw ModelError("bad normalization stats in " + path);
    std::copy(mean.begin(), mean.end(), m.stats.mean.begin());
    std::copy(sd.begin(), sd.end(), m.stats.std.begin());
    if (j.contains("target_stats")) {
        const auto& jt = j.at("target_stats");
        auto fill = [](const nlohmann::json& arr, auto& out) {
            auto v = arr.get<std::vector<double>>();
            if (v.size() != out.size()) throw ModelError("bad target stats in checkpoint");
            std::copy(v.begin(), v.end(), out.begin());
        };
        fill(jt.at("g_mean"), m.target_stats.g_mean);
        fill(jt.at("g_std"), m.target_stats.g_std);
        fill(jt.at("b_mean"), m.target_stats.b_mean);
        fill(jt.at("b_std"), m.target_stats.b_std);
    }

    auto params = m.parameters();
    for (const auto& entry : j.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        auto it = std::find_if(params.begin(), params.end(),
                               [&](const Parameter* p) { return p->name == name; });
        if (it == params.end()) throw ModelError("unknown parameter '" + name + "' in " + path);
        auto shape = entry.at("shape").get<std::vector<size_t>>();
        auto values = entry.at("values").get<std::vector<double>>();
        if (shape != (*it)->value.shape || values.size() != (*it)->value.v.size())
            throw ModelError("shape mismatch for parameter '" + name + "' in " + path);
        (*it)->value.v = std::move(values);
    }
    return m;
}

}  // namespace gridnet::gnn
