#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "expofuse/errors.hpp"
#include "expofuse/trainer.hpp"
#include "support.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

using namespace expofuse;
using testing::TempDir;

namespace {

PipelineSpec small_spec(PipelineMode mode) {
    PipelineSpec p;
    p.mode = mode;
    SubNetworkSpec s;
    s.depth = 2;
    s.filters = 4;
    if (mode == PipelineMode::basic2) {
        s.links = LinkTopology::simple;
        p.merge = s;
        return p;
    }
    p.color_map.assign(mode == PipelineMode::pipeline3 ? 2 : 1, s);
    p.merge = s;
    p.deghost = s;
    return p;
}

std::vector<Example> synthetic_examples(PipelineMode mode, int n, int size) {
    SourceCollection src;
    for (int i = 0; i < n; ++i) src.scenes.push_back(synth_scene(100 + i, size, size));
    BuildOptions o;
    o.warn = [](const std::string&) {};
    if (mode == PipelineMode::pipeline3) return make_examples(build_triples_3ldr(src, o));
    return make_examples(build_pairs_2ldr(src, o), mode);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

} // namespace

TEST_CASE("learning-rate schedule") {
    TrainConfig cfg;
    cfg.max_iters = 1000;
    CHECK(lr_schedule(0, cfg) == 1e-2);
    CHECK(lr_schedule(1000, cfg) == 0.0);
    CHECK(lr_schedule(500, cfg) == doctest::Approx(5.359e-3).epsilon(1e-3));
    CHECK(lr_schedule(500, cfg) == doctest::Approx(1e-2 * std::pow(0.5, 0.9)).epsilon(1e-12));
    for (int t = 1; t <= 1000; ++t) CHECK(lr_schedule(t, cfg) < lr_schedule(t - 1, cfg));
    CHECK_THROWS_AS(lr_schedule(1001, cfg), ContractViolation);
    CHECK_THROWS_AS(lr_schedule(-1, cfg), ContractViolation);
}

TEST_CASE("config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(validate(cfg));
    cfg.max_iters = 0;
    CHECK_THROWS_AS(validate(cfg), ContractViolation);
    cfg = {};
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(validate(cfg), ContractViolation);
    cfg = {};
    cfg.lr0 = 0;
    CHECK_THROWS_AS(validate(cfg), ContractViolation);
    cfg = {};
    cfg.decay_power = 0;
    CHECK_THROWS_AS(validate(cfg), ContractViolation);
    cfg = {};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(validate(cfg), ContractViolation);
}

TEST_CASE("sgd with momentum") {
    SUBCASE("momentum 0 is a plain gradient step") {
        std::vector<float> p{0.0f}, g{2.0f}, v{0.0f};
        sgd_momentum_step(p, g, v, 1.0, 0.0);
        CHECK(p[0] == -2.0f);
    }
    SUBCASE("zero gradient leaves parameters alone") {
        std::vector<float> p{0.5f, -1.5f}, g{0.0f, 0.0f}, v{0.0f, 0.0f};
        sgd_momentum_step(p, g, v, 0.1, 0.9);
        CHECK(p == std::vector<float>{0.5f, -1.5f});
    }
    SUBCASE("two steps unrolled") {
        std::vector<float> p{0.0f}, g{1.0f}, v{0.0f};
        sgd_momentum_step(p, g, v, 0.1, 0.9);
        CHECK(p[0] == doctest::Approx(-0.1));
        sgd_momentum_step(p, g, v, 0.1, 0.9);
        CHECK(p[0] == doctest::Approx(-0.29).epsilon(1e-6));
        CHECK(v[0] == doctest::Approx(-0.19).epsilon(1e-6));
    }
    SUBCASE("momentum 0 matches vanilla descent over many steps") {
        std::vector<float> p{1.0f, 2.0f, 3.0f}, v(3, 0.0f), q = p;
        for (int k = 0; k < 10; ++k) {
            std::vector<float> g{0.3f * k, -0.1f, 0.7f};
            sgd_momentum_step(p, g, v, 0.05, 0.0);
            for (int i = 0; i < 3; ++i) q[i] -= static_cast<float>(0.05) * g[i];
        }
        CHECK(p == q);
    }
    SUBCASE("non-finite gradient aborts without touching anything") {
        std::vector<float> p{1.0f, 2.0f}, g{0.5f, std::numeric_limits<float>::quiet_NaN()}, v{0.1f, 0.1f};
        try {
            sgd_momentum_step(p, g, v, 0.1, 0.9, "enc1.w");
            FAIL("expected TrainingError");
        } catch (const TrainingError& e) {
            CHECK(std::string(e.what()).find("enc1.w") != std::string::npos);
        }
        CHECK(p == std::vector<float>{1.0f, 2.0f});
        CHECK(v == std::vector<float>{0.1f, 0.1f});
    }
}

TEST_CASE("psnr and ssim") {
    const Image gt = testing::random_image(32, 24, 3, 1, 0.0f, 0.9f);
    Image off = gt;
    for (float& v : off.data) v += 0.1f;
    CHECK(psnr(off, gt) == doctest::Approx(20.0).epsilon(1e-5));
    CHECK(psnr(gt, gt) == 99.0);
    CHECK(ssim(gt, gt) == doctest::Approx(1.0).epsilon(1e-12));
    // Constant images: only the luminance term differs from one.
    const Image a = testing::constant_image(16, 16, 3, 0.3f), b = testing::constant_image(16, 16, 3, 0.5f);
    const double c1 = 1e-4, mx = 0.3f, my = 0.5f;
    CHECK(ssim(a, b) == doctest::Approx((2 * mx * my + c1) / (mx * mx + my * my + c1)).epsilon(1e-9));
    CHECK(ssim(gt, off) < 1.0);
    CHECK_THROWS_AS(psnr(a, Image(4, 4, 3)), ContractViolation);
}

TEST_CASE("example assembly") {
    const auto e2 = synthetic_examples(PipelineMode::pipeline2, 1, 32);
    REQUIRE(e2.size() == 1);
    CHECK(e2[0].inputs.size() == 3);
    CHECK(e2[0].cm_targets.size() == 1);
    const auto b2 = synthetic_examples(PipelineMode::basic2, 1, 32);
    CHECK(b2[0].inputs.size() == 2);
    CHECK(b2[0].cm_targets.empty());
    const auto e3 = synthetic_examples(PipelineMode::pipeline3, 1, 32);
    REQUIRE(e3.size() == 2);
    CHECK(e3[0].inputs.size() == 4);
    CHECK(e3[0].cm_targets.size() == 2);
    CHECK(e3[0].id == "synth-100/left");
    CHECK_THROWS_AS(make_examples(std::vector<TrainingSample2>{}, PipelineMode::pipeline3), ContractViolation);
}

TEST_CASE("short training runs are reproducible to the byte") {
    TempDir dir("train");
    const auto data = synthetic_examples(PipelineMode::pipeline2, 3, 32);
    TrainConfig cfg;
    cfg.max_iters = 6;
    cfg.batch_size = 2;
    cfg.seed = 5;
    cfg.checkpoint_every = 3;
    cfg.out_dir = dir / "a";
    const TrainResult a = train(small_spec(PipelineMode::pipeline2), data, cfg, data);
    cfg.out_dir = dir / "b";
    const TrainResult b = train(small_spec(PipelineMode::pipeline2), data, cfg, data);
    CHECK(slurp(dir / "a" / "final.lefn") == slurp(dir / "b" / "final.lefn"));
    CHECK(slurp(dir / "a" / "train_log.jsonl") == slurp(dir / "b" / "train_log.jsonl"));
    CHECK(std::filesystem::exists(dir / "a" / "checkpoint-3.lefn"));
    CHECK(std::filesystem::exists(dir / "a" / "checkpoint-6.lefn"));
    CHECK(std::filesystem::exists(dir / "a" / "best.lefn"));
    CHECK(a.best_iter > 0);
    CHECK(serialize_params(*a.net) == serialize_params(*b.net));

    REQUIRE(a.log.size() == 6);
    for (int t = 0; t < 6; ++t) {
        CHECK(a.log[t].iter == t + 1);
        CHECK(a.log[t].lr == lr_schedule(t, cfg));
        CHECK(std::isfinite(a.log[t].loss_final));
    }
    std::ifstream log(dir / "a" / "train_log.jsonl");
    int lines = 0;
    for (std::string l; std::getline(log, l);) {
        ++lines;
        CHECK(l.find("\"loss_cm\"") != std::string::npos);
    }
    CHECK(lines == 6);

    TrainConfig other = cfg;
    other.seed = 6;
    other.out_dir.clear();
    CHECK(serialize_params(*train(small_spec(PipelineMode::pipeline2), data, other).net) != serialize_params(*a.net));
}

TEST_CASE("training reduces the loss on a tiny set") {
    const auto data = synthetic_examples(PipelineMode::basic2, 2, 32);
    TrainConfig cfg;
    cfg.max_iters = 60;
    cfg.batch_size = 2;
    const TrainResult r = train(small_spec(PipelineMode::basic2), data, cfg);
    double first = 0, last = 0;
    for (int k = 0; k < 10; ++k) {
        first += r.log[k].loss_final;
        last += r.log[r.log.size() - 1 - k].loss_final;
    }
    CHECK(last < first);
}

TEST_CASE("non-finite loss halts training with a diagnostic checkpoint") {
    TempDir dir("train");
    auto data = synthetic_examples(PipelineMode::pipeline2, 1, 32);
    data[0].inputs[0].data[10] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig cfg;
    cfg.max_iters = 3;
    cfg.batch_size = 1;
    cfg.out_dir = dir.path();
    CHECK_THROWS_AS(train(small_spec(PipelineMode::pipeline2), data, cfg), TrainingError);
    CHECK(std::filesystem::exists(dir / "diagnostic.lefn"));
    CHECK_FALSE(std::filesystem::exists(dir / "final.lefn"));
}

TEST_CASE("train preconditions") {
    TrainConfig cfg;
    cfg.max_iters = 1;
    CHECK_THROWS_AS(train(small_spec(PipelineMode::pipeline2), {}, cfg), ContractViolation);
    const auto basic = synthetic_examples(PipelineMode::basic2, 1, 32);
    CHECK_THROWS_AS(train(small_spec(PipelineMode::pipeline2), basic, cfg), ContractViolation);
}

TEST_CASE("evaluation report") {
    const auto data = synthetic_examples(PipelineMode::pipeline2, 3, 32);
    FusionPipeline<float> net(small_spec(PipelineMode::pipeline2));
    net.init(1);
    const MetricsReport r = evaluate(net, data);
    REQUIRE(r.samples.size() == 3);
    double p = 0, s = 0, m = 0;
    for (const auto& x : r.samples) {
        p += x.psnr_final;
        s += x.ssim_final;
        m += x.psnr_merged;
        CHECK(x.time_ms >= 0);
    }
    CHECK(r.mean_psnr == doctest::Approx(p / 3).epsilon(1e-12));
    CHECK(r.mean_ssim == doctest::Approx(s / 3).epsilon(1e-12));
    CHECK(r.mean_psnr_merged == doctest::Approx(m / 3).epsilon(1e-12));
    CHECK(r.samples[0].psnr_final ==
          doctest::Approx(psnr(clamp01(net.forward(data[0].inputs).final), data[0].ground_truth)));
    const std::string json = to_json(r);
    CHECK(json.find("\"samples\"") != std::string::npos);
    CHECK(json.find("\"mean\"") != std::string::npos);
}
