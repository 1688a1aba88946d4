#include "gridnet/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

namespace gridnet::train {

using ad::Tensor;
using grid::GraphArrays;
using nlohmann::json;

MutationMode MutationMode::uniform(double delta) {
    MutationMode m;
    m.kind = Kind::Uniform;
    m.delta = delta;
    return m;
}

MutationMode MutationMode::timeseries(int profile_len, double sigma) {
    MutationMode m;
    m.kind = Kind::Timeseries;
    m.profile_len = profile_len;
    m.sigma = sigma;
    return m;
}

double daily_profile(double t01) {
    const double tau = 2.0 * std::numbers::pi;
    const double f = 0.7 - 0.32 * std::cos(tau * t01) + 0.18 * std::cos(2.0 * tau * t01 + 0.9);
    return std::clamp(f, 0.3, 1.2);
}

Mutant mutate_loads(const dss::CircuitSpec& spec, const MutationMode& mode, Rng& rng) {
    if (mode.kind == MutationMode::Kind::Uniform && (mode.delta < 0.0 || mode.delta >= 1.0))
        throw TrainError("uniform mutation delta must be in [0, 1)");
    if (mode.kind == MutationMode::Kind::Timeseries && mode.profile_len < 1)
        throw TrainError("timeseries profile length must be >= 1");

    Mutant m{spec, {}};
    m.spec.warnings.clear();
    if (mode.kind == MutationMode::Kind::Uniform) {
        for (auto& load : m.spec.loads) {
            for (int p = 0; p < 3; ++p)
                load.p_kw[static_cast<size_t>(p)] *= rng.uniform(1.0 - mode.delta, 1.0 + mode.delta);
            for (int p = 0; p < 3; ++p)
                load.q_kvar[static_cast<size_t>(p)] *=
                    rng.uniform(1.0 - mode.delta, 1.0 + mode.delta);
        }
    } else {
        const int t = rng.uniform_int(0, mode.profile_len - 1);
        const double base = daily_profile((t + 0.5) / mode.profile_len);
        for (auto& load : m.spec.loads) {
            const double factor = base * std::exp(mode.sigma * rng.normal());
            for (int p = 0; p < 3; ++p) {
                load.p_kw[static_cast<size_t>(p)] *= factor;
                load.q_kvar[static_cast<size_t>(p)] *= factor;
            }
        }
    }
    for (size_t c = 0; c < spec.capacitors.size(); ++c)
        m.state.cap_states.push_back(rng.uniform_int(0, 1));
    for (size_t t = 0; t < spec.transformers.size(); ++t)
        m.state.tap_positions.push_back(rng.uniform_int(grid::kTapMin, grid::kTapMax));
    return m;
}

// ---------------------------------------------------------------------------
// Dataset generation and serialization
// ---------------------------------------------------------------------------

uint64_t topology_hash(const GraphArrays& arrays) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](uint64_t x) {
        h ^= x;
        h *= 0x100000001b3ull;
    };
    mix(arrays.x_n.size());
    mix(arrays.x_e.size());
    mix(static_cast<uint64_t>(arrays.substation));
    for (const auto& row : arrays.x_n) {
        // node kind one-hot occupies the last three feature columns
        int kind = row[6] != 0.0 ? 0 : row[7] != 0.0 ? 1 : 2;
        mix(static_cast<uint64_t>(kind) + 11);
    }
    for (size_t e = 0; e < arrays.x_e.size(); ++e) {
        mix(static_cast<uint64_t>(arrays.endpoints[e][0]) + 101);
        mix(static_cast<uint64_t>(arrays.endpoints[e][1]) + 211);
        mix(static_cast<uint64_t>(arrays.x_e[e][0]) + 307);  // kind
        mix(static_cast<uint64_t>(arrays.x_e[e][2]) + 401);  // phase
    }
    mix(arrays.control.cap_states.size() + 503);
    mix(arrays.control.tap_positions.size() + 601);
    return h;
}

namespace {

DatasetSample sample_from_solution(const grid::MultiGraph& g, const pf::PFSolution& sol) {
    DatasetSample s;
    s.arrays = grid::to_arrays(g);
    for (int p = 0; p < 3; ++p) {
        s.y_g[static_cast<size_t>(p)] = sol.substation_s[static_cast<size_t>(p)].real();
        s.y_g[static_cast<size_t>(p) + 3] = sol.substation_s[static_cast<size_t>(p)].imag();
    }
    for (const auto& node : g.nodes) {
        if (node.id == g.substation) continue;
        std::array<double, gnn::kNodeTargets> row{};
        for (int p = 0; p < 3; ++p) {
            row[static_cast<size_t>(p)] = sol.v_mag(node.id, p);
            row[static_cast<size_t>(p) + 3] = sol.angle(node.id, p);
        }
        s.y_b.push_back(row);
    }
    s.iterations = sol.iterations;
    return s;
}

json sample_to_json(const DatasetSample& s) {
    json j;
    j["x_n"] = s.arrays.x_n;
    j["x_e"] = s.arrays.x_e;
    j["endpoints"] = s.arrays.endpoints;
    j["caps"] = s.arrays.control.cap_states;
    j["taps"] = s.arrays.control.tap_positions;
    j["substation"] = s.arrays.substation;
    j["y_g"] = s.y_g;
    j["y_b"] = s.y_b;
    j["iterations"] = s.iterations;
    return j;
}

DatasetSample sample_from_json(const json& j) {
    DatasetSample s;
    s.arrays.x_n = j.at("x_n").get<std::vector<grid::NodeFeatureRow>>();
    s.arrays.x_e = j.at("x_e").get<std::vector<grid::EdgeFeatureRow>>();
    s.arrays.endpoints = j.at("endpoints").get<std::vector<std::array<int, 2>>>();
    s.arrays.control.cap_states = j.at("caps").get<std::vector<int>>();
    s.arrays.control.tap_positions = j.at("taps").get<std::vector<int>>();
    s.arrays.substation = j.at("substation").get<int>();
    s.y_g = j.at("y_g").get<std::array<double, gnn::kGraphTargets>>();
    s.y_b = j.at("y_b").get<std::vector<std::array<double, gnn::kNodeTargets>>>();
    s.iterations = j.at("iterations").get<int>();
    return s;
}

std::string dataset_text(const DatasetHeader& header, std::span<const DatasetSample> samples) {
    std::ostringstream out;
    json h;
    h["magic"] = header.magic;
    h["schema_version"] = header.schema_version;
    h["topology_hash"] = header.topology_hash;
    h["s_base_kva"] = header.s_base_kva;
    h["n_nodes"] = header.n_nodes;
    h["n_edges"] = header.n_edges;
    h["f_n"] = header.f_n;
    h["f_e"] = header.f_e;
    out << h.dump() << "\n";
    for (const auto& s : samples) out << sample_to_json(s).dump() << "\n";
    return out.str();
}

}  // namespace

GenResult generate_dataset(const dss::CircuitSpec& spec, int n_train, int n_val,
                           const MutationMode& mode, uint64_t seed, const std::string& out_prefix,
                           int jobs, double s_base_kva) {
    if (n_train < 1 || n_val < 0) throw TrainError("dataset sizes must be positive");
    const int wanted = n_train + n_val;
    const int cap = wanted + std::max(20, wanted / 5);

    std::vector<std::optional<DatasetSample>> results(static_cast<size_t>(cap));
    std::atomic<int> next{0};
    std::atomic<bool> hard_fail{false};
    std::string hard_fail_msg;
    std::mutex fail_mutex;

    auto worker = [&]() {
        while (true) {
            const int idx = next.fetch_add(1);
            if (idx >= cap || hard_fail.load()) return;
            Rng rng(Rng::derive(seed, static_cast<uint64_t>(idx)));
            try {
                Mutant m = mutate_loads(spec, mode, rng);
                grid::MultiGraph g = grid::build_multigraph(m.spec, m.state, s_base_kva);
                pf::PFSolution sol = pf::solve(g);
                results[static_cast<size_t>(idx)] = sample_from_solution(g, sol);
            } catch (const pf::SolveError&) {
                // discarded mutant
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(fail_mutex);
                if (!hard_fail.exchange(true)) hard_fail_msg = e.what();
                return;
            }
        }
    };

    const int n_threads = std::max(1, jobs);
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (hard_fail.load()) throw TrainError("dataset generation failed: " + hard_fail_msg);

    std::vector<DatasetSample> taken;
    int discarded = 0;
    for (int idx = 0; idx < cap && static_cast<int>(taken.size()) < wanted; ++idx) {
        if (results[static_cast<size_t>(idx)])
            taken.push_back(std::move(*results[static_cast<size_t>(idx)]));
        else
            ++discarded;
    }
    const int attempts = static_cast<int>(taken.size()) + discarded;
    if (static_cast<int>(taken.size()) < wanted)
        throw TrainError("dataset generation aborted: only " + std::to_string(taken.size()) +
                         " of " + std::to_string(wanted) + " mutants converged (" +
                         std::to_string(discarded) + " discarded)");
    if (discarded * 10 > attempts)
        throw TrainError("dataset generation aborted: discard rate " + std::to_string(discarded) +
                         "/" + std::to_string(attempts) + " exceeds 10%");

    DatasetHeader header;
    header.topology_hash = topology_hash(taken.front().arrays);
    header.s_base_kva = s_base_kva;
    header.n_nodes = static_cast<int>(taken.front().arrays.x_n.size());
    header.n_edges = static_cast<int>(taken.front().arrays.x_e.size());

    GenResult res;
    res.generated = wanted;
    res.discarded = discarded;
    res.train_path = out_prefix + ".train.jsonl";
    res.val_path = out_prefix + ".val.jsonl";
    write_file_atomic(res.train_path,
                      dataset_text(header, std::span(taken.data(), static_cast<size_t>(n_train))));
    write_file_atomic(res.val_path, dataset_text(header, std::span(taken.data() + n_train,
                                                                   static_cast<size_t>(n_val))));
    return res;
}

Dataset load_dataset(const std::string& path) {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line)) throw TrainError("empty dataset file: " + path);
    json h = json::parse(line);
    Dataset ds;
    if (h.value("magic", "") != ds.header.magic)
        throw TrainError("not a dataset file: " + path);
    if (h.at("schema_version").get<int>() != ds.header.schema_version)
        throw TrainError("unsupported dataset schema in " + path);
    ds.header.topology_hash = h.at("topology_hash").get<uint64_t>();
    ds.header.s_base_kva = h.at("s_base_kva").get<double>();
    ds.header.n_nodes = h.at("n_nodes").get<int>();
    ds.header.n_edges = h.at("n_edges").get<int>();
    ds.header.f_n = h.at("f_n").get<int>();
    ds.header.f_e = h.at("f_e").get<int>();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        DatasetSample s = sample_from_json(json::parse(line));
        if (topology_hash(s.arrays) != ds.header.topology_hash)
            throw TrainError("dataset sample does not match the header topology in " + path);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    double lr = cfg.lr0;
    std::vector<std::pair<int, double>> milestones = cfg.milestones;
    if (milestones.empty())
        milestones = {{cfg.epochs / 2, 0.1}, {3 * cfg.epochs / 4, 0.1}};
    for (const auto& [at, mult] : milestones)
        if (epoch >= at) lr *= mult;
    return lr;
}

namespace {

struct AdamState {
    std::vector<Tensor> m, v;
    int64_t t = 0;

    explicit AdamState(const std::vector<ad::Parameter*>& params) {
        for (const auto* p : params) {
            m.push_back(Tensor::zeros(p->value.shape));
            v.push_back(Tensor::zeros(p->value.shape));
        }
    }

    void step(const std::vector<ad::Parameter*>& params, const TrainConfig& cfg, double lr) {
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            ad::Parameter& p = *params[i];
            for (size_t k = 0; k < p.value.size(); ++k) {
                const double g = p.grad.v[k];
                m[i].v[k] = cfg.beta1 * m[i].v[k] + (1.0 - cfg.beta1) * g;
                v[i].v[k] = cfg.beta2 * v[i].v[k] + (1.0 - cfg.beta2) * g * g;
                const double mhat = m[i].v[k] / bc1;
                const double vhat = v[i].v[k] / bc2;
                p.value.v[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps_adam);
            }
        }
    }
};

struct BatchTargets {
    Tensor y_g;
    Tensor y_b;
};

grid::GraphBatch batch_of(const Dataset& ds, std::span<const int> idx) {
    std::vector<GraphArrays> arrays;
    arrays.reserve(idx.size());
    for (int i : idx) arrays.push_back(ds.samples[static_cast<size_t>(i)].arrays);
    return grid::make_batch(arrays);
}

BatchTargets targets_of(const Dataset& ds, std::span<const int> idx) {
    BatchTargets t;
    size_t nb = 0;
    for (int i : idx) nb += ds.samples[static_cast<size_t>(i)].y_b.size();
    t.y_g = Tensor::zeros({idx.size(), gnn::kGraphTargets});
    t.y_b = Tensor::zeros({nb, gnn::kNodeTargets});
    size_t gr = 0, br = 0;
    for (int i : idx) {
        const auto& s = ds.samples[static_cast<size_t>(i)];
        for (int c = 0; c < gnn::kGraphTargets; ++c)
            t.y_g.v[gr * gnn::kGraphTargets + c] = s.y_g[static_cast<size_t>(c)];
        ++gr;
        for (const auto& row : s.y_b) {
            for (int c = 0; c < gnn::kNodeTargets; ++c)
                t.y_b.v[br * gnn::kNodeTargets + c] = row[static_cast<size_t>(c)];
            ++br;
        }
    }
    return t;
}

/// Full-set loss (sum of the two per-head MSEs) via tape-free inference.
double dataset_loss(const gnn::Model& model, const Dataset& ds, int batch_size) {
    double se_g = 0.0, se_b = 0.0;
    size_t n_g = 0, n_b = 0;
    const int n = static_cast<int>(ds.samples.size());
    for (int start = 0; start < n; start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
        auto batch = batch_of(ds, idx);
        auto out = model.infer(batch);
        size_t row = 0;
        for (int i : idx) {
            const auto& s = ds.samples[static_cast<size_t>(i)];
            for (int c = 0; c < gnn::kGraphTargets; ++c) {
                const double d = out.y_g[row][static_cast<size_t>(c)] - s.y_g[static_cast<size_t>(c)];
                se_g += d * d;
            }
            ++row;
        }
        size_t brow = 0;
        for (int i : idx) {
            const auto& s = ds.samples[static_cast<size_t>(i)];
            for (const auto& target : s.y_b) {
                for (int c = 0; c < gnn::kNodeTargets; ++c) {
                    const double d = out.y_b[brow][static_cast<size_t>(c)] - target[static_cast<size_t>(c)];
                    se_b += d * d;
                }
                ++brow;
            }
        }
        n_g += idx.size() * gnn::kGraphTargets;
        for (int i : idx) n_b += ds.samples[static_cast<size_t>(i)].y_b.size() * gnn::kNodeTargets;
    }
    return se_g / static_cast<double>(n_g) + se_b / static_cast<double>(n_b);
}

}  // namespace

TrainResult train(const Dataset& train_set, const Dataset& val_set, gnn::ModelConfig mcfg,
                  const TrainConfig& tcfg, const std::string& checkpoint_out,
                  const std::string& curve_out) {
    if (train_set.samples.empty()) throw TrainError("training set is empty");
    if (tcfg.batch_size < 1 || tcfg.lr0 <= 0.0 || tcfg.epochs < 1)
        throw TrainError("invalid training configuration");

    const auto& first = train_set.samples.front().arrays;
    mcfg.state_inputs =
        static_cast<int>(first.control.cap_states.size() + first.control.tap_positions.size());

    gnn::Model model(mcfg, tcfg.seed);
    {
        std::vector<grid::NodeFeatureRow> rows;
        for (const auto& s : train_set.samples)
            rows.insert(rows.end(), s.arrays.x_n.begin(), s.arrays.x_n.end());
        model.stats = gnn::fit_norm_stats(rows);
    }
    {
        // heads predict z-scored targets; fit the affine map on the training
        // set so the optimizer works at unit scale for every component
        std::array<double, gnn::kGraphTargets> mg{}, vg{};
        std::array<double, gnn::kNodeTargets> mb{}, vb{};
        size_t n_b = 0;
        const double n_g = static_cast<double>(train_set.samples.size());
        for (const auto& s : train_set.samples) {
            for (int c = 0; c < gnn::kGraphTargets; ++c)
                mg[static_cast<size_t>(c)] += s.y_g[static_cast<size_t>(c)];
            for (const auto& row : s.y_b) {
                for (int c = 0; c < gnn::kNodeTargets; ++c)
                    mb[static_cast<size_t>(c)] += row[static_cast<size_t>(c)];
                ++n_b;
            }
        }
        for (auto& x : mg) x /= n_g;
        if (n_b > 0)
            for (auto& x : mb) x /= static_cast<double>(n_b);
        for (const auto& s : train_set.samples) {
            for (int c = 0; c < gnn::kGraphTargets; ++c) {
                const double d = s.y_g[static_cast<size_t>(c)] - mg[static_cast<size_t>(c)];
                vg[static_cast<size_t>(c)] += d * d;
            }
            for (const auto& row : s.y_b)
                for (int c = 0; c < gnn::kNodeTargets; ++c) {
                    const double d = row[static_cast<size_t>(c)] - mb[static_cast<size_t>(c)];
                    vb[static_cast<size_t>(c)] += d * d;
                }
        }
        for (int c = 0; c < gnn::kGraphTargets; ++c) {
            model.target_stats.g_mean[static_cast<size_t>(c)] = mg[static_cast<size_t>(c)];
            model.target_stats.g_std[static_cast<size_t>(c)] =
                std::max(std::sqrt(vg[static_cast<size_t>(c)] / n_g), 1e-6);
        }
        if (n_b > 0)
            for (int c = 0; c < gnn::kNodeTargets; ++c) {
                model.target_stats.b_mean[static_cast<size_t>(c)] = mb[static_cast<size_t>(c)];
                model.target_stats.b_std[static_cast<size_t>(c)] =
                    std::max(std::sqrt(vb[static_cast<size_t>(c)] / static_cast<double>(n_b)), 1e-6);
            }
    }

    auto params = model.parameters();
    AdamState adam(params);
    Rng shuffle_rng(tcfg.seed ^ 0x5A5A5A5A5A5A5A5Aull);

    TrainResult res;
    res.checkpoint_path = checkpoint_out;
    res.best_val = std::numeric_limits<double>::infinity();

    const int n = static_cast<int>(train_set.samples.size());
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    const bool have_val = !val_set.samples.empty();
    if (have_val) res.val_loss.push_back(dataset_loss(model, val_set, tcfg.batch_size));

    auto save_checkpoint = [&]() { model.save(checkpoint_out); };
    auto write_curve = [&]() {
        if (curve_out.empty()) return;
        json j;
        j["train_loss"] = res.train_loss;
        j["val_loss"] = res.val_loss;
        j["best_epoch"] = res.best_epoch;
        j["best_val"] = res.best_val;
        write_file_atomic(curve_out, j.dump(2) + "\n");
    };

    bool have_checkpoint = false;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        // Fisher-Yates shuffle
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);
        const double lr = lr_at_epoch(tcfg, epoch);

        double epoch_loss = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += tcfg.batch_size) {
            std::span<const int> idx(order.data() + start,
                                     static_cast<size_t>(std::min(n, start + tcfg.batch_size) - start));
            double loss_value = 0.0;
            try {
                auto batch = batch_of(train_set, idx);
                auto targets = targets_of(train_set, idx);
                for (auto* p : params) p->zero_grad();
                ad::Tape tape;
                auto out = model.forward(tape, batch);
                ad::NodeId loss = tape.add(tape.mse_loss(out.y_g, tape.constant(targets.y_g)),
                                           tape.mse_loss(out.y_b, tape.constant(targets.y_b)));
                loss_value = tape.value(loss).v[0];
                if (!std::isfinite(loss_value)) throw ad::TapeError("non-finite loss");
                tape.backward(loss);
                adam.step(params, tcfg, lr);
                model.clamp_exponents();
            } catch (const ad::TapeError& e) {
                if (!have_checkpoint) save_checkpoint();
                write_curve();
                throw TrainError("training aborted at epoch " + std::to_string(epoch) + ": " +
                                 e.what() + " (last good checkpoint kept at " + checkpoint_out +
                                 ")");
            }
            epoch_loss += loss_value;
            ++batches;
        }
        res.train_loss.push_back(epoch_loss / std::max(1, batches));

        if (have_val) {
            const double vl = dataset_loss(model, val_set, tcfg.batch_size);
            res.val_loss.push_back(vl);
            if (vl < res.best_val) {
                res.best_val = vl;
                res.best_epoch = epoch;
                save_checkpoint();
                have_checkpoint = true;
            }
        }
    }
    if (!have_checkpoint) {
        save_checkpoint();
        res.best_epoch = tcfg.epochs - 1;
        if (!res.val_loss.empty()) res.best_val = res.val_loss.back();
    }
    res.final_train_loss = dataset_loss(model, train_set, tcfg.batch_size);
    write_curve();
    return res;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double nse_value(double pred, double target) {
    const double d = (pred - target) / (std::abs(target) + kNseEta);
    return d * d;
}

namespace {

struct StatAcc {
    double sum = 0.0, sumsq = 0.0;
    size_t n = 0;
    void add(double x) {
        sum += x;
        sumsq += x * x;
        ++n;
    }
    Metrics::Stat finish() const {
        Metrics::Stat s;
        s.count = n;
        if (n == 0) return s;
        s.mean = sum / static_cast<double>(n);
        const double var = std::max(0.0, sumsq / static_cast<double>(n) - s.mean * s.mean);
        s.stddev = std::sqrt(var);
        return s;
    }
};

}  // namespace

Metrics evaluate(const gnn::Model& model, const Dataset& val, int batch_size) {
    StatAcc p, q, v, phi;
    const int n = static_cast<int>(val.samples.size());
    for (int start = 0; start < n; start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
        auto batch = batch_of(val, idx);
        auto out = model.infer(batch);
        size_t row = 0, brow = 0;
        for (int i : idx) {
            const auto& s = val.samples[static_cast<size_t>(i)];
            for (int c = 0; c < 3; ++c) {
                p.add(nse_value(out.y_g[row][static_cast<size_t>(c)], s.y_g[static_cast<size_t>(c)]));
                q.add(nse_value(out.y_g[row][static_cast<size_t>(c) + 3],
                                s.y_g[static_cast<size_t>(c) + 3]));
            }
            ++row;
            for (const auto& target : s.y_b) {
                for (int c = 0; c < 3; ++c) {
                    v.add(nse_value(out.y_b[brow][static_cast<size_t>(c)],
                                    target[static_cast<size_t>(c)]));
                    phi.add(nse_value(out.y_b[brow][static_cast<size_t>(c) + 3],
                                      target[static_cast<size_t>(c) + 3]));
                }
                ++brow;
            }
        }
    }
    Metrics m;
    m.p = p.finish();
    m.q = q.finish();
    m.v = v.finish();
    m.phi = phi.finish();
    return m;
}

std::string metrics_table(const Metrics& m) {
    std::ostringstream out;
    auto row = [&](const char* name, const Metrics::Stat& s) {
        out << "  " << name << "  mean " << format_double(s.mean) << "  std "
            << format_double(s.stddev) << "  (" << s.count << " values)\n";
    };
    out << "NSE by target:\n";
    row("P  ", m.p);
    row("Q  ", m.q);
    row("V  ", m.v);
    row("phi", m.phi);
    return out.str();
}

std::string to_json_string(const Metrics& m, int indent) {
    auto stat = [](const Metrics::Stat& s) {
        return json{{"mean", s.mean}, {"std", s.stddev}, {"count", s.count}};
    };
    json j;
    j["schema_version"] = 1;
    j["nse"] = {{"p", stat(m.p)}, {"q", stat(m.q)}, {"v", stat(m.v)}, {"phi", stat(m.phi)}};
    return j.dump(indent) + "\n";
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

BenchReport benchmark(const gnn::Model& model, const dss::CircuitSpec& spec, const Dataset& val,
                      std::span<const int> batch_sizes, int reps, double s_base_kva) {
    if (val.samples.empty()) throw TrainError("benchmark requires a non-empty validation set");
    using clock = std::chrono::steady_clock;

    BenchReport report;
    const int n_solver = static_cast<int>(std::min<size_t>(val.samples.size(), 32));
    report.samples_used = n_solver;

    // Fresh mutants for the solver side; graphs built outside the timed region.
    std::vector<grid::MultiGraph> graphs;
    {
        Rng rng(0xBEEFBEEFull);
        MutationMode mode = MutationMode::uniform(0.1);
        while (static_cast<int>(graphs.size()) < n_solver) {
            Mutant m = mutate_loads(spec, mode, rng);
            try {
                graphs.push_back(grid::build_multigraph(m.spec, m.state, s_base_kva));
                pf::solve(graphs.back());
            } catch (const pf::SolveError&) {
                graphs.pop_back();
            }
        }
    }

    {
        StatAcc acc;
        for (int rep = 0; rep < reps + 2; ++rep) {
            for (const auto& g : graphs) {
                const auto t0 = clock::now();
                pf::PFSolution sol = pf::solve(g);
                const auto t1 = clock::now();
                if (!sol.converged) continue;
                if (rep >= 2) acc.add(std::chrono::duration<double>(t1 - t0).count());
            }
        }
        auto s = acc.finish();
        report.solver_solve = {s.mean, s.stddev, static_cast<int>(s.count)};
    }

    for (int bs : batch_sizes) {
        std::vector<int> idx;
        for (int i = 0; i < bs; ++i) idx.push_back(i % static_cast<int>(val.samples.size()));
        auto batch = batch_of(val, idx);
        StatAcc acc;
        for (int rep = 0; rep < reps + 2; ++rep) {
            const auto t0 = clock::now();
            auto out = model.infer(batch);
            const auto t1 = clock::now();
            if (out.y_g.empty()) throw TrainError("benchmark forward produced no output");
            if (rep >= 2)
                acc.add(std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(bs));
        }
        auto s = acc.finish();
        report.forward_per_sample.push_back({bs, {s.mean, s.stddev, static_cast<int>(s.count)}});
    }
    return report;
}

std::string to_json_string(const BenchReport& r, int indent) {
    json j;
    j["schema_version"] = 1;
    j["samples_used"] = r.samples_used;
    j["solver_solve_s"] = {{"mean", r.solver_solve.mean_s},
                           {"std", r.solver_solve.std_s},
                           {"reps", r.solver_solve.reps}};
    json fw = json::array();
    for (const auto& [bs, t] : r.forward_per_sample) {
        const double speedup = t.mean_s > 0.0 ? r.solver_solve.mean_s / t.mean_s : 0.0;
        fw.push_back({{"batch_size", bs},
                      {"per_sample_s", {{"mean", t.mean_s}, {"std", t.std_s}, {"reps", t.reps}}},
                      {"speedup_vs_solver", speedup}});
    }
    j["forward"] = fw;
    return j.dump(indent) + "\n";
}

}  // namespace gridnet::train
