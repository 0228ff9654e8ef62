#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "expofuse/errors.hpp"
#include "expofuse/net.hpp"
#include "support.hpp"

#include <cmath>
#include <fstream>
#include <random>

using namespace expofuse;
using testing::TempDir;

namespace {

SubNetworkSpec tiny(int depth, int filters, LinkTopology links = LinkTopology::dense) {
    SubNetworkSpec s;
    s.depth = depth;
    s.filters = filters;
    s.links = links;
    return s;
}

PipelineSpec tiny_pipeline(PipelineMode mode) {
    PipelineSpec p;
    p.mode = mode;
    if (mode == PipelineMode::basic2) {
        p.merge = tiny(2, 3, LinkTopology::simple);
        return p;
    }
    const int n_cm = mode == PipelineMode::pipeline3 ? 2 : 1;
    for (int i = 0; i < n_cm; ++i) p.color_map.push_back(tiny(3, 3));
    p.merge = with_extra_convs(tiny(2, 3), 1, 2);
    p.deghost = tiny(2, 2);
    return p;
}

std::vector<Image> inputs_for(PipelineMode mode, int w, int h, std::uint64_t seed) {
    std::vector<Image> v;
    for (int i = 0; i < input_image_count(mode); ++i) v.push_back(testing::random_image(w, h, 3, seed + i));
    return v;
}

bool finite(const Image& img) {
    for (float v : img.data)
        if (!std::isfinite(v)) return false;
    return true;
}

} // namespace

TEST_CASE("default specs") {
    const PipelineSpec p2 = default_pipeline_spec(PipelineMode::pipeline2);
    REQUIRE(p2.color_map.size() == 1);
    CHECK(p2.color_map[0].depth == 5);
    CHECK(p2.color_map[0].filters == 32);
    CHECK(p2.merge.depth == 3);
    CHECK(p2.merge.filters == 16);
    CHECK(p2.deghost.depth == 3);
    CHECK(p2.deghost.filters == 16);
    CHECK(p2.merge.kernel == 4);
    CHECK(p2.merge.stride == 2);

    const PipelineSpec p3 = default_pipeline_spec(PipelineMode::pipeline3);
    REQUIRE(p3.color_map.size() == 2);
    CHECK(p3.merge.extra_convs == std::vector<int>{2, 2, 4});
    CHECK(p3.merge.refine_extra_convs == std::vector<int>{2, 2});

    const SubNetworkSpec base = flownet_baseline_spec();
    CHECK(base.depth == 3);
    CHECK(base.filters == 16);
    CHECK(base.links == LinkTopology::simple);
    CHECK(merge_input_channels(PipelineMode::pipeline2) == 12);
    CHECK(merge_input_channels(PipelineMode::pipeline3) == 18);
}

TEST_CASE("spec validation") {
    SubNetworkSpec s = tiny(3, 4);
    CHECK_NOTHROW(validate(s));
    s.depth = 0;
    CHECK_THROWS_AS(validate(s), ContractViolation);
    s = tiny(3, 0);
    CHECK_THROWS_AS(validate(s), ContractViolation);
    s = tiny(3, 4);
    s.extra_convs = {1, 1};
    CHECK_THROWS_AS(validate(s), ContractViolation);
    s.extra_convs = {1, -1, 1};
    CHECK_THROWS_AS(validate(s), ContractViolation);
    s = tiny(3, 4);
    s.kernel = 3;
    CHECK_THROWS_AS(validate(s), ContractViolation);

    PipelineSpec p = tiny_pipeline(PipelineMode::pipeline3);
    CHECK_NOTHROW(FusionPipeline<float>{p});
    p.color_map.pop_back();
    CHECK_THROWS_AS(FusionPipeline<float>{p}, ContractViolation);
    p.color_map = {tiny(2, 2), tiny(2, 2), tiny(2, 2)};
    CHECK_THROWS_AS(FusionPipeline<float>{p}, ContractViolation);
    PipelineSpec q = tiny_pipeline(PipelineMode::pipeline2);
    q.color_map.push_back(tiny(2, 2));
    CHECK_THROWS_AS(validate(q), ContractViolation);
}

TEST_CASE("baseline network bottom map is one eighth of 800x480") {
    SubNetwork<float> net(flownet_baseline_spec(), 6, 3, "base", 0.1f);
    const auto dims = net.level_dims(800, 480);
    REQUIRE(dims.size() == 4);
    CHECK(dims.back() == std::pair{100, 60});
    CHECK(net.level_dims(64, 64).back() == std::pair{8, 8});

    Graph<float> g;
    Tensor<float> x(1, 6, 800, 480);
    const int out = net.build(g, g.input(x));
    CHECK(g.value(out).c == 3);
    CHECK(g.value(out).h == 800);
    CHECK(g.value(out).w == 480);
    bool found_bottom = false;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto& v = g.value(static_cast<int>(i));
        if (v.c == 16 && v.h == 100 && v.w == 60) found_bottom = true;
    }
    CHECK(found_bottom);
}

TEST_CASE("dense channel accounting") {
    const int in = 5, F = 4, D = 3;
    SubNetwork<double> net(tiny(D, F), in, 3, "n", 0.1);
    const auto& acc = net.channel_accounting();
    REQUIRE(acc.size() == 2 * D + 1);
    // Every layer sees the input plus every earlier layer's F channels.
    for (std::size_t k = 0; k < acc.size(); ++k) {
        CAPTURE(acc[k].layer);
        CHECK(acc[k].in_channels == in + F * static_cast<int>(k));
        CHECK(acc[k].expected == acc[k].in_channels);
    }
    for (const ParamSlot<double>* s : net.slots()) {
        if (s->name == "n.final") CHECK(s->params.in_channels == in + 2 * D * F);
        if (s->name == "n.dec0") CHECK(s->params.in_channels == in + (2 * D - 1) * F);
    }
}

TEST_CASE("simple-link channel accounting") {
    SubNetwork<float> net(flownet_baseline_spec(), 6, 3, "b", 0.1f);
    const auto& acc = net.channel_accounting();
    REQUIRE(acc.size() == 7);
    const int expect[] = {6, 16, 16, 16, 32, 32, 22};
    for (int k = 0; k < 7; ++k) CHECK(acc[k].in_channels == expect[k]);
}

TEST_CASE("pipeline outputs match input dims and are finite") {
    for (PipelineMode mode : {PipelineMode::basic2, PipelineMode::pipeline2, PipelineMode::pipeline3}) {
        CAPTURE(to_string(mode));
        FusionPipeline<float> net(tiny_pipeline(mode));
        net.init(3);
        for (auto [w, h] : {std::pair{32, 24}, {21, 19}, {8, 8}}) {
            const PipelineOutput out = net.forward(inputs_for(mode, w, h, 10));
            CHECK(out.final.width == w);
            CHECK(out.final.height == h);
            CHECK(out.merged_estimate.width == w);
            CHECK(finite(out.final));
            CHECK(finite(out.merged_estimate));
            CHECK(out.cm_estimates.size() == (mode == PipelineMode::pipeline3 ? 2u : mode == PipelineMode::pipeline2 ? 1u : 0u));
            for (const Image& cm : out.cm_estimates) CHECK(cm.same_shape(out.final));
        }
    }
}

TEST_CASE("default pipeline3 on a 128x96 triple gives 128x96") {
    FusionPipeline<float> net(default_pipeline_spec(PipelineMode::pipeline3));
    net.init(1);
    const auto in = inputs_for(PipelineMode::pipeline3, 128, 96, 20);
    const PipelineOutput out = net.forward_pipeline3(in[0], in[1], in[2], in[3]);
    CHECK(out.final.width == 128);
    CHECK(out.final.height == 96);
    CHECK(finite(out.final));
    CHECK_THROWS_AS(net.forward_pipeline2(in[0], in[1], in[2]), ContractViolation);
}

TEST_CASE("pipeline stage wiring") {
    FusionPipeline<float> net(tiny_pipeline(PipelineMode::pipeline2));
    CHECK(net.color_map()[0]->in_channels() == 6);
    CHECK(net.merge().in_channels() == 12);
    CHECK(net.deghost()->in_channels() == 6);
    FusionPipeline<float> net3(tiny_pipeline(PipelineMode::pipeline3));
    CHECK(net3.merge().in_channels() == 18);
    CHECK(net3.color_map().size() == 2);
}

TEST_CASE("forward preconditions") {
    FusionPipeline<float> net(tiny_pipeline(PipelineMode::pipeline2));
    net.init(1);
    auto in = inputs_for(PipelineMode::pipeline2, 16, 16, 1);
    in[1] = testing::random_image(16, 12, 3, 2);
    CHECK_THROWS_AS(net.forward(in), ContractViolation);
    in.pop_back();
    CHECK_THROWS_AS(net.forward(in), ContractViolation);
}

TEST_CASE("forward is deterministic and init depends only on the seed") {
    FusionPipeline<float> a(tiny_pipeline(PipelineMode::pipeline2)), b(tiny_pipeline(PipelineMode::pipeline2));
    a.init(7);
    b.init(7);
    CHECK(serialize_params(a) == serialize_params(b));
    const auto in = inputs_for(PipelineMode::pipeline2, 24, 16, 30);
    CHECK(a.forward(in).final == a.forward(in).final);
    CHECK(a.forward(in).final == b.forward(in).final);
    b.init(8);
    CHECK(serialize_params(a) != serialize_params(b));
}

TEST_CASE("init is fan-in scaled uniform with zero bias") {
    FusionPipeline<float> net(tiny_pipeline(PipelineMode::pipeline2));
    net.init(5);
    for (const ParamSlot<float>* s : net.slots()) {
        const auto& p = s->params;
        // A stride-s transposed conv feeds each output from in * (k/s)^2 taps.
        const bool up = s->kind == ParamSlot<float>::Kind::deconv;
        const double fan_in = p.in_channels * (up ? (p.kh / p.stride) * (p.kw / p.stride) : p.kh * p.kw);
        const double bound = std::sqrt(6.0 / fan_in);
        float lo = 0, hi = 0;
        for (float v : p.weights) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(hi <= bound);
        CHECK(lo >= -bound);
        CHECK(hi > 0.5 * bound);
        for (float v : p.bias) CHECK(v == 0.0f);
    }
}

TEST_CASE("checkpoint round trip") {
    TempDir dir("ckpt");
    FusionPipeline<float> net(tiny_pipeline(PipelineMode::pipeline3));
    net.init(11);
    save_params(net, dir / "a.lefn");
    const auto in = inputs_for(PipelineMode::pipeline3, 20, 16, 40);
    const PipelineOutput ref = net.forward(in);

    const FusionPipeline<float> loaded = load_pipeline(dir / "a.lefn");
    CHECK(loaded.spec() == net.spec());
    const PipelineOutput out = loaded.forward(in);
    CHECK(out.final == ref.final);
    CHECK(out.merged_estimate == ref.merged_estimate);
    CHECK(serialize_params(loaded) == serialize_params(net));

    FusionPipeline<float> same(tiny_pipeline(PipelineMode::pipeline3));
    load_params(same, dir / "a.lefn");
    CHECK(same.forward(in).final == ref.final);
    CHECK(spec_from_json(spec_to_json(net.spec())) == net.spec());
}

TEST_CASE("loading into a different architecture names the field") {
    TempDir dir("ckpt");
    FusionPipeline<float> net(tiny_pipeline(PipelineMode::pipeline2));
    net.init(1);
    save_params(net, dir / "a.lefn");
    PipelineSpec other = tiny_pipeline(PipelineMode::pipeline2);
    other.merge.filters = 5;
    FusionPipeline<float> mismatched(other);
    try {
        load_params(mismatched, dir / "a.lefn");
        FAIL("expected CompatibilityError");
    } catch (const CompatibilityError& e) {
        CHECK(e.field() == "merge.filters");
    }
    FusionPipeline<float> wrong_mode(tiny_pipeline(PipelineMode::basic2));
    CHECK_THROWS_AS(load_params(wrong_mode, dir / "a.lefn"), CompatibilityError);
    CHECK(first_difference(net.spec(), net.spec()).empty());
}

TEST_CASE("corrupted checkpoints") {
    TempDir dir("ckpt");
    FusionPipeline<float> net(tiny_pipeline(PipelineMode::basic2));
    net.init(1);
    auto bytes = serialize_params(net);
    auto write = [&](const std::vector<std::uint8_t>& b) {
        std::ofstream f(dir / "x.lefn", std::ios::binary);
        f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    };
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    write(bad_magic);
    CHECK_THROWS_AS(load_pipeline(dir / "x.lefn"), FormatError);
    write(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 7));
    CHECK_THROWS_AS(load_pipeline(dir / "x.lefn"), FormatError);
    auto extra = bytes;
    extra.push_back(0);
    write(extra);
    CHECK_THROWS_AS(load_pipeline(dir / "x.lefn"), FormatError);
    CHECK_THROWS_AS(load_pipeline(dir / "missing.lefn"), IoError);
}

TEST_CASE("whole-pipeline gradients match finite differences") {
    for (PipelineMode mode : {PipelineMode::basic2, PipelineMode::pipeline2, PipelineMode::pipeline3}) {
        CAPTURE(to_string(mode));
        FusionPipeline<double> net(tiny_pipeline(mode));
        net.init(21);
        // Nonzero biases so that every layer's gradient is exercised.
        std::mt19937_64 gen(22);
        std::uniform_real_distribution<double> d(-0.1, 0.1);
        for (ParamSlot<double>* s : net.slots())
            for (double& b : s->params.bias) b = d(gen);

        std::vector<Tensor<double>> inputs;
        for (int i = 0; i < input_image_count(mode); ++i) {
            Tensor<double> t(2, 3, 12, 10);
            for (double& v : t.values) v = d(gen) * 5 + 0.5;
            inputs.push_back(t);
        }
        std::vector<Tensor<double>> probes;
        auto objective = [&](bool backprop) {
            Graph<double> g;
            std::vector<int> ids;
            for (const auto& t : inputs) ids.push_back(g.input(t));
            const StageIds st = net.build(g, ids);
            std::vector<int> outs = st.cm;
            if (mode != PipelineMode::basic2) outs.push_back(st.merged);
            outs.push_back(st.final);
            if (probes.empty()) {
                for (std::size_t k = 0; k < outs.size(); ++k) {
                    const auto& v = g.value(outs[k]);
                    Tensor<double> r(v.n, v.c, v.h, v.w);
                    for (double& x : r.values) x = d(gen);
                    probes.push_back(r);
                }
            }
            double total = 0;
            std::vector<std::pair<int, Tensor<double>>> seeds;
            for (std::size_t k = 0; k < outs.size(); ++k) {
                const auto& v = g.value(outs[k]).values;
                for (std::size_t i = 0; i < v.size(); ++i) total += v[i] * probes[k].values[i];
                seeds.emplace_back(outs[k], probes[k]);
            }
            if (backprop) g.backward(seeds);
            return total;
        };
        for (ParamSlot<double>* s : net.slots()) s->zero_grad();
        objective(true);

        // Smaller step than the per-layer checks: with dozens of stacked leaky ReLUs a 1e-3 nudge
        // pushes some pre-activations across the kink.
        const double h = 1e-5;
        double worst = 0;
        std::string worst_name;
        for (ParamSlot<double>* s : net.slots()) {
            for (int which = 0; which < 2; ++which) {
                auto& v = which == 0 ? s->params.weights : s->params.bias;
                const auto& grad = which == 0 ? s->grad_w : s->grad_b;
                for (std::size_t i = 0; i < v.size(); i += std::max<std::size_t>(1, v.size() / 3)) {
                    const double keep = v[i];
                    v[i] = keep + h;
                    const double up = objective(false);
                    v[i] = keep - h;
                    const double down = objective(false);
                    v[i] = keep;
                    const double fd = (up - down) / (2 * h);
                    const double err = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
                    if (err > worst) {
                        worst = err;
                        worst_name = s->name;
                    }
                }
            }
        }
        CAPTURE(worst_name);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("to_tensor and to_image are inverse") {
    const Image a = testing::random_image(5, 4, 3, 1), b = testing::random_image(5, 4, 3, 2);
    const Tensor<float> t = to_tensor<float>({&a, &b});
    CHECK(t.n == 2);
    CHECK(t.c == 3);
    CHECK(to_image(t, 1) == b);
    CHECK(to_image(t, 0) == a);
    const Image c = testing::random_image(4, 4, 3, 3);
    CHECK_THROWS_AS(to_tensor<float>({&a, &c}), ContractViolation);
}
