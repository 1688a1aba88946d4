#include "gridnet/common.hpp"
#include "gridnet/dss.hpp"
#include "gridnet/train.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>

using namespace gridnet;
using namespace gridnet::train;

namespace {

dss::CircuitSpec fixture4() {
    return dss::parse_file(read_file(std::string(GRIDNET_FIXTURE_DIR) + "/case4.dss"));
}

std::string temp_prefix(const char* tag) {
    return (std::filesystem::temp_directory_path() / (std::string("gridnet_") + tag)).string();
}

}  // namespace

TEST_CASE("uniform mutation scales stay inside the band") {
    auto spec = fixture4();
    for (double delta : {0.1, 0.5}) {
        Rng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            auto m = mutate_loads(spec, MutationMode::uniform(delta), rng);
            for (size_t li = 0; li < spec.loads.size(); ++li)
                for (int p = 0; p < 3; ++p) {
                    const double before = spec.loads[li].p_kw[static_cast<size_t>(p)];
                    const double after = m.spec.loads[li].p_kw[static_cast<size_t>(p)];
                    if (before == 0.0) {
                        CHECK(after == 0.0);
                        continue;
                    }
                    const double factor = after / before;
                    CHECK(factor >= 1.0 - delta);
                    CHECK(factor <= 1.0 + delta);
                }
            CHECK(m.state.cap_states.size() == spec.capacitors.size());
            CHECK(m.state.tap_positions.size() == spec.transformers.size());
            for (int t : m.state.tap_positions) {
                CHECK(t >= grid::kTapMin);
                CHECK(t <= grid::kTapMax);
            }
        }
    }
}

TEST_CASE("zero delta leaves loads unchanged but still samples control states") {
    auto spec = fixture4();
    Rng rng(8);
    auto m = mutate_loads(spec, MutationMode::uniform(0.0), rng);
    for (size_t li = 0; li < spec.loads.size(); ++li)
        CHECK(m.spec.loads[li].p_kw == spec.loads[li].p_kw);
    CHECK(m.state.cap_states.size() == spec.capacitors.size());
}

TEST_CASE("daily profile stays within its band") {
    for (int i = 0; i <= 1000; ++i) {
        const double v = daily_profile(i / 1000.0);
        CHECK(v >= 0.3);
        CHECK(v <= 1.2);
    }
}

TEST_CASE("timeseries mutation applies a common positive factor per load") {
    auto spec = fixture4();
    Rng rng(9);
    auto m = mutate_loads(spec, MutationMode::timeseries(48, 0.2), rng);
    for (size_t li = 0; li < spec.loads.size(); ++li) {
        double factor = 0.0;
        for (int p = 0; p < 3; ++p) {
            const double before = spec.loads[li].p_kw[static_cast<size_t>(p)];
            if (before == 0.0) continue;
            const double f = m.spec.loads[li].p_kw[static_cast<size_t>(p)] / before;
            CHECK(f > 0.0);
            if (factor == 0.0)
                factor = f;
            else
                CHECK(f == doctest::Approx(factor).epsilon(1e-12));
        }
    }
}

TEST_CASE("dataset generation is deterministic and byte-identical") {
    auto spec = fixture4();
    const std::string p1 = temp_prefix("ds_a");
    const std::string p2 = temp_prefix("ds_b");
    auto r1 = generate_dataset(spec, 24, 6, MutationMode::uniform(0.1), 42, p1);
    auto r2 = generate_dataset(spec, 24, 6, MutationMode::uniform(0.1), 42, p2);
    CHECK(read_file(r1.train_path) == read_file(r2.train_path));
    CHECK(read_file(r1.val_path) == read_file(r2.val_path));
    // parallel generation produces the same bytes
    const std::string p3 = temp_prefix("ds_c");
    auto r3 = generate_dataset(spec, 24, 6, MutationMode::uniform(0.1), 42, p3, 2);
    CHECK(read_file(r1.train_path) == read_file(r3.train_path));

    auto ds = load_dataset(r1.train_path);
    CHECK(ds.samples.size() == 24);
    CHECK(ds.header.n_nodes == 6);
    for (const auto& s : ds.samples) CHECK(s.iterations > 0);
    for (const std::string& path : {r1.train_path, r1.val_path, r2.train_path, r2.val_path,
                                    r3.train_path, r3.val_path})
        std::filesystem::remove(path);
}

TEST_CASE("hopeless circuits abort generation with a diagnostic") {
    const std::string text =
        "New Circuit.c bus1=b1 basekv=1 pu=1\n"
        "New Linecode.c1 nphases=1 units=km rmatrix=(500) xmatrix=(900)\n"
        "New Line.l bus1=b1.1 bus2=b2.1 linecode=c1 length=1 units=km\n"
        "New Load.x bus1=b2.1 kw=900 kvar=400\n";
    auto spec = dss::parse_file(text);
    CHECK_THROWS_WITH_AS(
        generate_dataset(spec, 8, 2, MutationMode::uniform(0.1), 1, temp_prefix("ds_bad")),
        doctest::Contains("aborted"), TrainError);
}

TEST_CASE("learning-rate schedule") {
    TrainConfig cfg;
    cfg.epochs = 1000;
    cfg.lr0 = 1e-3;
    cfg.milestones = {{500, 0.1}, {750, 0.1}};
    CHECK(lr_at_epoch(cfg, 0) == doctest::Approx(1e-3));
    CHECK(lr_at_epoch(cfg, 499) == doctest::Approx(1e-3));
    CHECK(lr_at_epoch(cfg, 500) == doctest::Approx(1e-4));
    CHECK(lr_at_epoch(cfg, 750) == doctest::Approx(1e-5));
    CHECK(lr_at_epoch(cfg, 999) == doctest::Approx(1e-5));
    cfg.milestones.clear();  // defaults at epochs/2 and 3*epochs/4
    CHECK(lr_at_epoch(cfg, 499) == doctest::Approx(1e-3));
    CHECK(lr_at_epoch(cfg, 500) == doctest::Approx(1e-4));
    CHECK(lr_at_epoch(cfg, 750) == doctest::Approx(1e-5));
}

TEST_CASE("nse identities") {
    CHECK(nse_value(1.0, 1.0) == 0.0);
    CHECK(nse_value(0.97, 0.97) == 0.0);
    // constant zero prediction against V ~ 1 pu targets gives NSE ~ 1
    const double v = nse_value(0.0, 1.0);
    CHECK(v == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("metric pooling reports exact zero for perfect predictions") {
    auto spec = fixture4();
    const std::string prefix = temp_prefix("ds_eval");
    auto r = generate_dataset(spec, 8, 4, MutationMode::uniform(0.1), 7, prefix);
    auto val = load_dataset(r.val_path);
    // NSE of targets against themselves
    double acc = 0.0;
    for (const auto& s : val.samples)
        for (int c = 0; c < 6; ++c)
            acc += nse_value(s.y_g[static_cast<size_t>(c)], s.y_g[static_cast<size_t>(c)]);
    CHECK(acc == 0.0);
    std::filesystem::remove(r.train_path);
    std::filesystem::remove(r.val_path);
}

TEST_CASE("overfit: ten samples memorized to tiny loss") {
    auto spec = fixture4();
    const std::string prefix = temp_prefix("ds_overfit");
    auto r = generate_dataset(spec, 10, 2, MutationMode::uniform(0.1), 3, prefix);
    auto train_set = load_dataset(r.train_path);
    auto val_set = load_dataset(r.val_path);

    gnn::ModelConfig mcfg;
    mcfg.hidden_dim = 24;
    mcfg.state_dim = 8;
    mcfg.num_layers = 6;
    mcfg.mlp_depth = 2;
    TrainConfig tcfg;
    tcfg.epochs = 500;
    tcfg.batch_size = 10;
    tcfg.lr0 = 3e-3;
    tcfg.milestones = {{20, 2.0}, {300, 0.5}, {400, 0.3}, {460, 0.2}};
    tcfg.beta2 = 0.9;
    tcfg.seed = 2;

    const std::string ckpt = temp_prefix("overfit_ckpt.json");
    auto res = gridnet::train::train(train_set, val_set, mcfg, tcfg, ckpt);
    CHECK(res.final_train_loss < 1e-5);
    // the fixture run also demonstrates the required >= 10x loss decrease
    CHECK(res.final_train_loss * 10.0 < res.train_loss.front());
    std::filesystem::remove(r.train_path);
    std::filesystem::remove(r.val_path);
    std::filesystem::remove(ckpt);
}

TEST_CASE("training is deterministic and evaluation pools the right counts") {
    auto spec = fixture4();
    const std::string prefix = temp_prefix("ds_det");
    auto r = generate_dataset(spec, 24, 12, MutationMode::uniform(0.1), 5, prefix);
    auto train_set = load_dataset(r.train_path);
    auto val_set = load_dataset(r.val_path);

    gnn::ModelConfig mcfg;
    mcfg.hidden_dim = 16;
    mcfg.state_dim = 8;
    mcfg.num_layers = 2;
    TrainConfig tcfg;
    tcfg.epochs = 15;
    tcfg.batch_size = 8;
    tcfg.seed = 2;

    const std::string ckpt = temp_prefix("det_ckpt.json");
    auto res = gridnet::train::train(train_set, val_set, mcfg, tcfg, ckpt);
    CHECK(res.best_epoch >= 0);
    CHECK(res.val_loss.size() == static_cast<size_t>(tcfg.epochs) + 1);

    // deterministic re-run reproduces the loss trajectory exactly
    const std::string ckpt2 = temp_prefix("det_ckpt2.json");
    auto res2 = gridnet::train::train(train_set, val_set, mcfg, tcfg, ckpt2);
    REQUIRE(res.train_loss.size() == res2.train_loss.size());
    for (size_t i = 0; i < res.train_loss.size(); ++i)
        CHECK(std::abs(res.train_loss[i] - res2.train_loss[i]) <= 1e-12);
    CHECK(std::abs(res.final_train_loss - res2.final_train_loss) <= 1e-12);
    CHECK(read_file(ckpt) == read_file(ckpt2));

    // a trained checkpoint evaluates with sane pooled metrics
    auto model = gnn::Model::load(ckpt);
    auto metrics = evaluate(model, val_set);
    CHECK(metrics.v.count == val_set.samples.size() * 5 * 3);
    CHECK(metrics.p.count == val_set.samples.size() * 3);
    CHECK(metrics.v.mean >= 0.0);

    std::filesystem::remove(r.train_path);
    std::filesystem::remove(r.val_path);
    std::filesystem::remove(ckpt);
    std::filesystem::remove(ckpt2);
}

TEST_CASE("exploding training aborts and keeps a checkpoint") {
    auto spec = fixture4();
    const std::string prefix = temp_prefix("ds_nan");
    auto r = generate_dataset(spec, 8, 2, MutationMode::uniform(0.1), 4, prefix);
    auto train_set = load_dataset(r.train_path);
    auto val_set = load_dataset(r.val_path);

    gnn::ModelConfig mcfg;
    mcfg.hidden_dim = 8;
    mcfg.num_layers = 1;
    TrainConfig tcfg;
    tcfg.epochs = 50;
    tcfg.batch_size = 8;
    tcfg.lr0 = 1e9;  // guaranteed blow-up

    const std::string ckpt = temp_prefix("nan_ckpt.json");
    CHECK_THROWS_WITH_AS(gridnet::train::train(train_set, val_set, mcfg, tcfg, ckpt),
                         doctest::Contains("aborted"), TrainError);
    CHECK(std::filesystem::exists(ckpt));  // last good parameters were kept
    std::filesystem::remove(r.train_path);
    std::filesystem::remove(r.val_path);
    std::filesystem::remove(ckpt);
}

TEST_CASE("benchmark report carries mean and std for every timing") {
    auto spec = fixture4();
    const std::string prefix = temp_prefix("ds_bench");
    auto r = generate_dataset(spec, 8, 8, MutationMode::uniform(0.1), 11, prefix);
    auto train_set = load_dataset(r.train_path);
    auto val_set = load_dataset(r.val_path);

    gnn::ModelConfig mcfg;
    mcfg.hidden_dim = 8;
    mcfg.num_layers = 1;
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 8;
    const std::string ckpt = temp_prefix("bench_ckpt.json");
    gridnet::train::train(train_set, val_set, mcfg, tcfg, ckpt);
    auto model = gnn::Model::load(ckpt);

    const int batches[] = {1, 4};
    auto report = benchmark(model, spec, val_set, batches, 3);
    CHECK(report.solver_solve.reps > 0);
    CHECK(report.solver_solve.mean_s > 0.0);
    REQUIRE(report.forward_per_sample.size() == 2);
    for (const auto& [bs, timing] : report.forward_per_sample) {
        CHECK(timing.mean_s > 0.0);
        CHECK(timing.reps == 3);
        CHECK(timing.std_s >= 0.0);
    }
    const std::string js = to_json_string(report);
    CHECK(js.find("\"mean\"") != std::string::npos);
    CHECK(js.find("\"std\"") != std::string::npos);

    std::filesystem::remove(r.train_path);
    std::filesystem::remove(r.val_path);
    std::filesystem::remove(ckpt);
}
