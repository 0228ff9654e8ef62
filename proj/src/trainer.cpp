#include "expofuse/trainer.hpp"

#include "expofuse/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

namespace expofuse {

void validate(const TrainConfig& c) {
    require(c.lr0 > 0, "lr0 must be positive");
    require(c.momentum >= 0 && c.momentum < 1, "momentum must be in [0,1)");
    require(c.decay_power > 0, "decay_power must be positive");
    require(c.max_iters >= 1, "max_iters must be >= 1");
    require(c.batch_size >= 1, "batch_size must be >= 1");
    require(c.w_cm >= 0 && c.w_merge >= 0 && c.w_final >= 0, "loss weights must be non-negative");
    require(c.checkpoint_every >= 0, "checkpoint_every must be >= 0");
    require(c.clip_norm >= 0, "clip_norm must be >= 0");
}

double lr_schedule(int t, const TrainConfig& cfg) {
    require(t >= 0 && t <= cfg.max_iters, "lr_schedule: iteration outside [0, T]");
    return cfg.lr0 * std::pow(1.0 - static_cast<double>(t) / cfg.max_iters, cfg.decay_power);
}

void sgd_momentum_step(std::span<float> params, std::span<const float> grads, std::span<float> velocity, double lr,
                       double momentum, const std::string& name) {
    require(params.size() == grads.size() && params.size() == velocity.size(),
            "sgd_momentum_step: size mismatch for " + name);
    for (float g : grads)
        if (!std::isfinite(g)) throw TrainingError("non-finite gradient in tensor '" + name + "'");
    const auto m = static_cast<float>(momentum), a = static_cast<float>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = m * velocity[i] - a * grads[i];
        params[i] += velocity[i];
    }
}

std::vector<Example> make_examples(const std::vector<TrainingSample2>& samples, PipelineMode mode) {
    require(mode != PipelineMode::pipeline3, "2-LDR samples cannot feed a pipeline3 network");
    std::vector<Example> out;
    for (const auto& s : samples) {
        Example e;
        e.id = s.scene_id;
        e.inputs = {s.reference, s.non_reference};
        if (mode == PipelineMode::pipeline2) {
            e.inputs.push_back(s.ghost_fused);
            e.cm_targets = {s.color_map_target};
        }
        e.ground_truth = s.ground_truth;
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<Example> make_examples(const std::vector<TrainingSample3>& samples) {
    std::vector<Example> out;
    for (const auto& s : samples) {
        Example e;
        e.id = s.scene_id + "/" + to_string(s.reference_view);
        e.inputs = {s.reference, s.under, s.over, s.ghost_fused};
        e.cm_targets = {s.cm_under_target, s.cm_over_target};
        e.ground_truth = s.ground_truth;
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<Example> make_examples(const Dataset& ds, PipelineMode mode, bool validation) {
    if (ds.mode == DatasetMode::ldr3) {
        require(mode == PipelineMode::pipeline3, "a 3-LDR dataset needs a pipeline3 network");
        return make_examples(validation ? ds.val3 : ds.train3);
    }
    return make_examples(validation ? ds.val2 : ds.train2, mode);
}

std::string to_json_line(const LogRecord& r) {
    return nlohmann::json{{"iter", r.iter}, {"lr", r.lr}, {"loss_cm", r.loss_cm},
                          {"loss_merge", r.loss_merge}, {"loss_final", r.loss_final}}
        .dump();
}

StepLosses accumulate_gradients(FusionPipeline<float>& net, std::span<const Example* const> batch,
                                const TrainConfig& cfg) {
    const PipelineMode mode = net.spec().mode;
    // Same-shape samples run as one batched tensor (flips may transpose dims).
    std::map<std::pair<int, int>, std::vector<const Example*>> groups;
    for (const Example* e : batch) groups[{e->ground_truth.height, e->ground_truth.width}].push_back(e);

    StepLosses total;
    const double n_total = static_cast<double>(batch.size());
    for (const auto& [dims, members] : groups) {
        const float frac = static_cast<float>(members.size() / n_total);
        Graph<float> g;
        std::vector<int> ids;
        const std::size_t n_in = members.front()->inputs.size();
        for (std::size_t k = 0; k < n_in; ++k) {
            std::vector<const Image*> imgs;
            for (const Example* e : members) imgs.push_back(&e->inputs[k]);
            ids.push_back(g.input(to_tensor<float>(imgs)));
        }
        const StageIds out = net.build(g, ids, cfg.staged);

        std::vector<const Image*> gts;
        for (const Example* e : members) gts.push_back(&e->ground_truth);
        const Tensor<float> gt = to_tensor<float>(gts);

        std::vector<std::pair<int, Tensor<float>>> seeds;
        auto seed = [&](int id, const Tensor<float>& target, double weight) {
            LossResult<float> l = l1_loss(g.value(id), target);
            const auto scale = static_cast<float>(weight) * frac;
            for (float& v : l.grad.values) v *= scale;
            if (weight > 0) seeds.emplace_back(id, std::move(l.grad));
            return static_cast<double>(l.value) * frac;
        };
        total.final += seed(out.final, gt, cfg.w_final);
        if (mode == PipelineMode::basic2) {
            total.merge = total.final;
        } else {
            total.merge += seed(out.merged, gt, cfg.w_merge);
            const double per_cm = 1.0 / static_cast<double>(out.cm.size());
            for (std::size_t k = 0; k < out.cm.size(); ++k) {
                std::vector<const Image*> tg;
                for (const Example* e : members) tg.push_back(&e->cm_targets.at(k));
                total.cm += per_cm * seed(out.cm[k], to_tensor<float>(tg), cfg.w_cm * per_cm);
            }
        }
        g.backward(seeds);
    }
    return total;
}

namespace {

void write_bytes(const std::filesystem::path& p, const FusionPipeline<float>& net) { save_params(net, p); }

double mean_psnr(const FusionPipeline<float>& net, const std::vector<Example>& data) {
    double s = 0;
    for (const Example& e : data) s += psnr(clamp01(net.forward(e.inputs).final), e.ground_truth);
    return data.empty() ? 0 : s / static_cast<double>(data.size());
}

} // namespace

TrainResult train(const PipelineSpec& spec, const std::vector<Example>& data, const TrainConfig& cfg,
                  const std::vector<Example>& validation, const std::function<void(const LogRecord&)>& on_log) {
    validate(cfg);
    require(!data.empty(), "train: dataset is empty");
    const int n_in = input_image_count(spec.mode);
    for (const Example& e : data) {
        require(static_cast<int>(e.inputs.size()) == n_in, "train: example '" + e.id + "' has the wrong number of inputs");
        require(spec.mode == PipelineMode::basic2 || e.cm_targets.size() == spec.color_map.size(),
                "train: example '" + e.id + "' lacks colour-map targets");
    }

    TrainResult result;
    result.net = std::make_unique<FusionPipeline<float>>(spec);
    FusionPipeline<float>& net = *result.net;
    net.init(cfg.seed);
    auto slots = net.slots();
    std::vector<std::vector<float>> vel_w, vel_b;
    for (auto* s : slots) {
        vel_w.emplace_back(s->params.weights.size(), 0.0f);
        vel_b.emplace_back(s->params.bias.size(), 0.0f);
    }

    std::ofstream log_file;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        log_file.open(cfg.out_dir / "train_log.jsonl");
        if (!log_file) throw IoError("cannot write training log in " + cfg.out_dir.string());
    }

    std::mt19937_64 gen(cfg.seed ^ 0x5eed5eedULL);
    std::vector<std::size_t> order(data.size());
    std::size_t cursor = order.size();
    auto next_index = [&] {
        if (cursor == order.size()) {
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[gen() % i]);
            cursor = 0;
        }
        return order[cursor++];
    };

    result.best_val_psnr = -1;
    for (int t = 0; t < cfg.max_iters; ++t) {
        for (auto* s : slots) s->zero_grad();
        std::vector<const Example*> batch;
        for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(&data[next_index()]);
        const StepLosses losses = accumulate_gradients(net, batch, cfg);

        if (!std::isfinite(losses.final) || !std::isfinite(losses.merge) || !std::isfinite(losses.cm)) {
            if (!cfg.out_dir.empty()) write_bytes(cfg.out_dir / "diagnostic.lefn", net);
            throw TrainingError("loss became non-finite at iteration " + std::to_string(t + 1));
        }

        if (cfg.clip_norm > 0) {
            double sq = 0;
            for (auto* s : slots) {
                for (float v : s->grad_w) sq += static_cast<double>(v) * v;
                for (float v : s->grad_b) sq += static_cast<double>(v) * v;
            }
            const double norm = std::sqrt(sq);
            if (norm > cfg.clip_norm) {
                const auto scale = static_cast<float>(cfg.clip_norm / norm);
                for (auto* s : slots) {
                    for (float& v : s->grad_w) v *= scale;
                    for (float& v : s->grad_b) v *= scale;
                }
            }
        }

        const double lr = lr_schedule(t, cfg);
        // Checked up front so a bad tensor late in the list cannot leave earlier ones updated.
        for (auto* s : slots) {
            for (const auto* g : {&s->grad_w, &s->grad_b})
                if (!std::all_of(g->begin(), g->end(), [](float v) { return std::isfinite(v); })) {
                    if (!cfg.out_dir.empty()) write_bytes(cfg.out_dir / "diagnostic.lefn", net);
                    throw TrainingError("non-finite gradient in tensor '" + s->name + (g == &s->grad_w ? ".w'" : ".b'"));
                }
        }
        for (std::size_t k = 0; k < slots.size(); ++k) {
            sgd_momentum_step(slots[k]->params.weights, slots[k]->grad_w, vel_w[k], lr, cfg.momentum, slots[k]->name + ".w");
            sgd_momentum_step(slots[k]->params.bias, slots[k]->grad_b, vel_b[k], lr, cfg.momentum, slots[k]->name + ".b");
        }

        const LogRecord rec{t + 1, lr, losses.cm, losses.merge, losses.final};
        result.log.push_back(rec);
        if (log_file) log_file << to_json_line(rec) << std::endl;
        if (on_log) on_log(rec);

        const bool last = t + 1 == cfg.max_iters;
        const bool ckpt = cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0;
        if (ckpt || last) {
            if (!cfg.out_dir.empty() && ckpt)
                write_bytes(cfg.out_dir / ("checkpoint-" + std::to_string(t + 1) + ".lefn"), net);
            if (!validation.empty()) {
                const double v = mean_psnr(net, validation);
                if (v > result.best_val_psnr) {
                    result.best_val_psnr = v;
                    result.best_iter = t + 1;
                    if (!cfg.out_dir.empty()) write_bytes(cfg.out_dir / "best.lefn", net);
                }
            }
        }
    }
    for (auto* s : slots) s->zero_grad();
    if (!cfg.out_dir.empty()) write_bytes(cfg.out_dir / "final.lefn", net);
    return result;
}

double mse(const Image& a, const Image& b) {
    require(a.same_shape(b), "mse: shape mismatch");
    require(!a.data.empty(), "mse: empty images");
    double s = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - b.data[i];
        s += d * d;
    }
    return s / static_cast<double>(a.data.size());
}

double psnr(const Image& a, const Image& b) {
    const double m = mse(a, b);
    if (m <= 0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

namespace {

// Valid-region Gaussian filtering of a single plane.
std::vector<double> gauss_valid(const std::vector<double>& src, int w, int h, const std::vector<double>& k, int& ow,
                                int& oh) {
    const int r = static_cast<int>(k.size()) / 2;
    ow = w - 2 * r;
    oh = h - 2 * r;
    std::vector<double> tmp(static_cast<std::size_t>(ow) * h), out(static_cast<std::size_t>(ow) * oh);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int t = 0; t < static_cast<int>(k.size()); ++t) s += k[t] * src[static_cast<std::size_t>(y) * w + x + t];
            tmp[static_cast<std::size_t>(y) * ow + x] = s;
        }
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int t = 0; t < static_cast<int>(k.size()); ++t) s += k[t] * tmp[static_cast<std::size_t>(y + t) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    return out;
}

} // namespace

double ssim(const Image& a, const Image& b) {
    require(a.same_shape(b), "ssim: shape mismatch");
    int win = std::min({11, a.width, a.height});
    if (win % 2 == 0) --win;
    std::vector<double> k(win);
    double ks = 0;
    for (int i = 0; i < win; ++i) {
        const double d = i - win / 2;
        k[i] = std::exp(-d * d / (2 * 1.5 * 1.5));
        ks += k[i];
    }
    for (double& v : k) v /= ks;
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    const int w = a.width, h = a.height;
    double total = 0;
    for (int c = 0; c < a.channels; ++c) {
        std::vector<double> x(a.pixel_count()), y(a.pixel_count()), xx(x.size()), yy(x.size()), xy(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = a.data[i * a.channels + c];
            y[i] = b.data[i * b.channels + c];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        int ow = 0, oh = 0;
        const auto mx = gauss_valid(x, w, h, k, ow, oh), my = gauss_valid(y, w, h, k, ow, oh);
        const auto sxx = gauss_valid(xx, w, h, k, ow, oh), syy = gauss_valid(yy, w, h, k, ow, oh);
        const auto sxy = gauss_valid(xy, w, h, k, ow, oh);
        double s = 0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
            s += ((2 * mx[i] * my[i] + C1) * (2 * cxy + C2)) / ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
        }
        total += s / static_cast<double>(mx.size());
    }
    return total / a.channels;
}

MetricsReport evaluate(const FusionPipeline<float>& net, const std::vector<Example>& data) {
    MetricsReport r;
    for (const Example& e : data) {
        const auto t0 = std::chrono::steady_clock::now();
        const PipelineOutput out = net.forward(e.inputs);
        const auto t1 = std::chrono::steady_clock::now();
        SampleMetrics m;
        m.id = e.id;
        const Image fin = clamp01(out.final);
        m.psnr_final = psnr(fin, e.ground_truth);
        m.ssim_final = ssim(fin, e.ground_truth);
        m.psnr_merged = psnr(clamp01(out.merged_estimate), e.ground_truth);
        m.time_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        r.samples.push_back(m);
    }
    if (!r.samples.empty()) {
        const double n = static_cast<double>(r.samples.size());
        for (const auto& m : r.samples) {
            r.mean_psnr += m.psnr_final / n;
            r.mean_ssim += m.ssim_final / n;
            r.mean_psnr_merged += m.psnr_merged / n;
            r.mean_time_ms += m.time_ms / n;
        }
    }
    return r;
}

std::string to_json(const MetricsReport& r) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& m : r.samples)
        samples.push_back({{"id", m.id}, {"psnr", m.psnr_final}, {"ssim", m.ssim_final},
                           {"psnr_merged", m.psnr_merged}, {"time_ms", m.time_ms}});
    const nlohmann::json j = {{"samples", samples},
                              {"mean", {{"psnr", r.mean_psnr}, {"ssim", r.mean_ssim},
                                        {"psnr_merged", r.mean_psnr_merged}, {"time_ms", r.mean_time_ms}}},
                              {"count", r.samples.size()}};
    return j.dump(2);
}

} // namespace expofuse
