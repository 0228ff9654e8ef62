#pragma once

#include "expofuse/dataset.hpp"
#include "expofuse/net.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace expofuse {

struct TrainConfig {
    double lr0 = 1e-2;
    double decay_power = 0.9;
    double momentum = 0.9;
    int max_iters = 2000;
    int batch_size = 4;
    double w_cm = 0.5;
    double w_merge = 0.5;
    double w_final = 1.0;
    std::uint64_t seed = 0;
    int checkpoint_every = 0; // 0: only the final checkpoint
    double clip_norm = 10.0;  // global gradient norm; 0 disables
    bool staged = false;      // stop gradients between stages
    std::filesystem::path out_dir; // checkpoints + log; empty keeps everything in memory
};

// Throws ContractViolation describing the first bad field.
void validate(const TrainConfig& cfg);

// lr0 * (1 - t/T)^power for 0 <= t <= T.
double lr_schedule(int t, const TrainConfig& cfg);

// v' = momentum v - lr g;  p' = p + v'. Throws TrainingError naming the
// tensor if any gradient is non-finite; nothing is modified in that case.
void sgd_momentum_step(std::span<float> params, std::span<const float> grads, std::span<float> velocity, double lr,
                       double momentum, const std::string& name = "param");

// One network input set with its supervision targets.
struct Example {
    std::string id;
    std::vector<Image> inputs;     // ordered as FusionPipeline::build expects
    std::vector<Image> cm_targets; // one per colour-mapping network
    Image ground_truth;
};

std::vector<Example> make_examples(const std::vector<TrainingSample2>& samples, PipelineMode mode);
std::vector<Example> make_examples(const std::vector<TrainingSample3>& samples);
// Train or validation split of a dataset, shaped for the given pipeline mode.
std::vector<Example> make_examples(const Dataset& ds, PipelineMode mode, bool validation);

struct LogRecord {
    int iter = 0;
    double lr = 0;
    double loss_cm = 0;
    double loss_merge = 0;
    double loss_final = 0;
};

std::string to_json_line(const LogRecord& r);

struct TrainResult {
    std::unique_ptr<FusionPipeline<float>> net;
    std::vector<LogRecord> log;
    double best_val_psnr = 0;
    int best_iter = 0;
};

struct StepLosses {
    double cm = 0, merge = 0, final = 0;
};

// Forward + backward of one minibatch; gradients accumulate into the slots.
StepLosses accumulate_gradients(FusionPipeline<float>& net, std::span<const Example* const> batch,
                                const TrainConfig& cfg);

// Initializes from cfg.seed and runs cfg.max_iters minibatch SGD steps.
TrainResult train(const PipelineSpec& spec, const std::vector<Example>& data, const TrainConfig& cfg,
                  const std::vector<Example>& validation = {},
                  const std::function<void(const LogRecord&)>& on_log = {});

double mse(const Image& a, const Image& b);
// 10 log10(1/mse), capped at 99 dB.
double psnr(const Image& a, const Image& b);
// Mean SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels.
double ssim(const Image& a, const Image& b);

struct SampleMetrics {
    std::string id;
    double psnr_final = 0;
    double ssim_final = 0;
    double psnr_merged = 0;
    double time_ms = 0;
};

struct MetricsReport {
    std::vector<SampleMetrics> samples;
    double mean_psnr = 0;
    double mean_ssim = 0;
    double mean_psnr_merged = 0;
    double mean_time_ms = 0;
};

MetricsReport evaluate(const FusionPipeline<float>& net, const std::vector<Example>& data);
std::string to_json(const MetricsReport& report);

} // namespace expofuse
