#include "expofuse/cli.hpp"

#include "expofuse/dataset.hpp"
#include "expofuse/errors.hpp"
#include "expofuse/net.hpp"
#include "expofuse/pyramid.hpp"
#include "expofuse/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <omp.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

namespace expofuse {
namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EmptyResult : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Prints "<stage>: <ms> ms" when it goes out of scope.
class StageTimer {
public:
    StageTimer(std::ostream& out, std::string stage)
        : out_(out), stage_(std::move(stage)), t0_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        const auto dt = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_).count();
        out_ << "  " << stage_ << ": " << std::fixed << std::setprecision(1) << dt << " ms\n";
        out_.unsetf(std::ios::floatfield);
    }

private:
    std::ostream& out_;
    std::string stage_;
    std::chrono::steady_clock::time_point t0_;
};

void apply_threads() {
    if (const char* env = std::getenv("FUSION_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || n < 1) throw UsageError("FUSION_THREADS must be a positive integer");
        omp_set_num_threads(static_cast<int>(n));
    }
}

// Flat JSON object; keys are long flag names. Flags given on the command line win.
void apply_config(CLI::App& sub, const std::string& path) {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config file '" + path + "': " + e.what());
    }
    if (!j.is_object()) throw UsageError("config file '" + path + "' must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "config") continue;
        CLI::Option* opt = sub.get_option_no_throw("--" + key);
        if (!opt) throw UsageError("config file '" + path + "': unknown key '" + key + "'");
        if (opt->count() > 0) continue;
        auto as_text = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
        if (value.is_array()) {
            for (const auto& v : value) opt->add_result(as_text(v));
        } else {
            opt->add_result(as_text(value));
        }
        opt->run_callback();
    }
}

void require_file(const std::string& p, const char* what) {
    if (p.empty()) throw UsageError(std::string("missing ") + what);
    if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " '" + p + "' does not exist");
}

std::pair<int, int> parse_dims(const std::string& s) {
    const auto x = s.find('x');
    int w = 0, h = 0;
    try {
        if (x == std::string::npos) throw std::invalid_argument(s);
        std::size_t a = 0, b = 0;
        w = std::stoi(s.substr(0, x), &a);
        h = std::stoi(s.substr(x + 1), &b);
        if (a != x || b != s.size() - x - 1) throw std::invalid_argument(s);
    } catch (const std::exception&) {
        throw UsageError("--dims expects WIDTHxHEIGHT, got '" + s + "'");
    }
    if (w < 1 || h < 1) throw UsageError("--dims must be positive");
    return {w, h};
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
    return out.parent_path() / (out.stem().string() + "_" + suffix + out.extension().string());
}

struct FuseArgs {
    std::vector<std::string> inputs;
    std::string out;
    FusionParams params;
    int bit_depth = 8;
};

int cmd_fuse(const FuseArgs& a, std::ostream& out) {
    if (a.inputs.size() < 2) throw UsageError("fuse needs at least two input images");
    for (const auto& p : a.inputs) require_file(p, "input image");
    std::vector<Image> stack;
    {
        StageTimer t(out, "load");
        for (const auto& p : a.inputs) stack.push_back(load_image(p));
    }
    for (const auto& img : stack)
        if (!img.same_shape(stack.front()))
            throw UsageError("input dims differ: " + std::to_string(stack.front().width) + "x" +
                             std::to_string(stack.front().height) + "x" + std::to_string(stack.front().channels) +
                             " vs " + std::to_string(img.width) + "x" + std::to_string(img.height) + "x" +
                             std::to_string(img.channels));
    Image fused;
    {
        StageTimer t(out, "fuse");
        fused = exposure_fuse(stack, a.params);
    }
    {
        StageTimer t(out, "save");
        save_image(fused, a.out, a.bit_depth);
    }
    out << "wrote " << a.out << " (" << fused.width << "x" << fused.height << ")\n";
    return exit_ok;
}

struct BuildArgs {
    std::string manifest;
    int synthetic = 0;
    std::string mode = "2ldr";
    double ratio_min = 8.0;
    std::string dims = "128x96";
    double split = 0.0;
    std::uint64_t seed = 0;
    std::string out;
    double synthetic_ratio = 16.0;
    int exposures = 5;
    int disparity = 8;
    bool no_motion = false;
    int bit_depth = 16;
};

int cmd_build_dataset(const BuildArgs& a, std::ostream& out, std::ostream& err) {
    if (a.manifest.empty() == (a.synthetic == 0)) throw UsageError("give exactly one of --manifest or --synthetic N");
    if (a.synthetic < 0) throw UsageError("--synthetic must be >= 1");
    if (a.out.empty()) throw UsageError("missing --out");
    if (!a.manifest.empty()) require_file(a.manifest, "manifest");
    const DatasetMode mode = parse_dataset_mode(a.mode);

    BuildOptions opts;
    opts.ratio_min = a.ratio_min;
    opts.warn = [&err](const std::string& m) { err << "warning: " << m << '\n'; };
    SourceCollection src;
    const fs::path out_dir = fs::absolute(a.out);
    {
        StageTimer t(out, "sources");
        if (a.synthetic > 0) {
            auto [w, h] = parse_dims(a.dims);
            SynthOptions so;
            so.ratio = a.synthetic_ratio;
            so.exposures = a.exposures;
            so.disparity = a.disparity;
            so.object_motion = !a.no_motion;
            const fs::path src_dir = out_dir / "sources";
            for (int i = 0; i < a.synthetic; ++i) {
                Scene s = synth_scene(a.seed + static_cast<std::uint64_t>(i), w, h, so);
                write_scene_images(s, src_dir / s.id);
                for (Shot& shot : s.shots) shot.path = fs::relative(shot.path, src_dir).generic_string();
                src.scenes.push_back(std::move(s));
            }
            src.base_dir = src_dir;
            write_manifest(src, src_dir / "manifest.jsonl");
        } else {
            src = read_manifest(a.manifest);
            validate_manifest(src);
            load_images(src);
            std::tie(opts.width, opts.height) = parse_dims(a.dims);
        }
    }

    Dataset ds;
    ds.mode = mode;
    {
        StageTimer t(out, "build");
        std::vector<std::string> ids;
        for (const auto& s : src.scenes) ids.push_back(s.id);
        const auto val_ids = choose_validation_scenes(ids, a.split, a.seed);
        const std::set<std::string> val(val_ids.begin(), val_ids.end());
        auto split_into = [&val](auto&& samples, auto& train, auto& validation) {
            std::remove_cvref_t<decltype(samples)> tr, va;
            for (auto& s : samples) (val.count(s.scene_id) ? va : tr).push_back(std::move(s));
            train = augment(tr);
            validation = augment(va);
        };
        if (mode == DatasetMode::ldr2)
            split_into(build_pairs_2ldr(src, opts), ds.train2, ds.val2);
        else
            split_into(build_triples_3ldr(src, opts), ds.train3, ds.val3);
    }
    out << "samples: " << ds.train_size() << " train, " << ds.val_size() << " validation\n";
    if (ds.train_size() + ds.val_size() == 0) throw EmptyResult("0 samples after filtering");
    {
        StageTimer t(out, "write");
        write_dataset(ds, out_dir, a.bit_depth);
    }
    return exit_ok;
}

struct TrainArgs {
    std::string dataset;
    std::string mode;
    std::string out;
    std::string net_spec;
    TrainConfig cfg;
    bool quiet = false;
};

PipelineMode default_mode(DatasetMode m) {
    return m == DatasetMode::ldr3 ? PipelineMode::pipeline3 : PipelineMode::pipeline2;
}

int cmd_train(TrainArgs a, std::ostream& out) {
    if (a.dataset.empty() || a.out.empty()) throw UsageError("train needs --dataset and --out");
    require_file((fs::path(a.dataset) / "index.json").string(), "dataset index");
    if (!a.net_spec.empty()) require_file(a.net_spec, "network spec");

    Dataset ds;
    {
        StageTimer t(out, "load");
        ds = read_dataset(a.dataset);
    }
    PipelineSpec spec;
    if (!a.net_spec.empty()) {
        std::ifstream in(a.net_spec);
        std::stringstream ss;
        ss << in.rdbuf();
        spec = spec_from_json(ss.str());
        if (!a.mode.empty() && parse_pipeline_mode(a.mode) != spec.mode) throw CompatibilityError("mode");
    } else {
        spec = default_pipeline_spec(a.mode.empty() ? default_mode(ds.mode) : parse_pipeline_mode(a.mode));
    }
    validate(spec);
    if ((spec.mode == PipelineMode::pipeline3) != (ds.mode == DatasetMode::ldr3)) throw CompatibilityError("mode");
    const auto train_set = make_examples(ds, spec.mode, false);
    const auto val_set = make_examples(ds, spec.mode, true);
    if (train_set.empty()) throw EmptyResult("dataset has no training samples");

    a.cfg.out_dir = a.out;
    out << "training " << to_string(spec.mode) << " on " << train_set.size() << " samples for " << a.cfg.max_iters
        << " iterations\n";
    const int every = std::max(1, a.cfg.max_iters / 20);
    TrainResult r;
    {
        StageTimer t(out, "train");
        r = train(spec, train_set, a.cfg, val_set, [&](const LogRecord& rec) {
            if (!a.quiet && (rec.iter % every == 0 || rec.iter == 1)) out << to_json_line(rec) << '\n';
        });
    }
    if (!val_set.empty()) out << "best validation PSNR " << r.best_val_psnr << " dB at iteration " << r.best_iter << '\n';
    out << "wrote " << (fs::path(a.out) / "final.lefn").string() << '\n';
    return exit_ok;
}

struct InferArgs {
    std::string checkpoint;
    std::string ref, nonref, under, over;
    std::string out;
    std::string mode;
    bool dump = false;
    int bit_depth = 8;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
    require_file(a.checkpoint, "checkpoint");
    require_file(a.ref, "reference image");
    if (a.out.empty()) throw UsageError("missing --out");

    std::optional<FusionPipeline<float>> net;
    {
        StageTimer t(out, "load checkpoint");
        net.emplace(load_pipeline(a.checkpoint));
    }
    const PipelineMode mode = net->spec().mode;
    if (!a.mode.empty() && parse_pipeline_mode(a.mode) != mode) throw CompatibilityError("mode");
    if (mode == PipelineMode::pipeline3) {
        require_file(a.under, "under-exposed image (--under)");
        require_file(a.over, "over-exposed image (--over)");
    } else {
        require_file(a.nonref, "non-reference image (--nonref)");
    }

    std::vector<Image> inputs;
    {
        StageTimer t(out, "load images");
        inputs.push_back(load_image(a.ref));
        if (mode == PipelineMode::pipeline3) {
            inputs.push_back(load_image(a.under));
            inputs.push_back(load_image(a.over));
        } else {
            inputs.push_back(load_image(a.nonref));
        }
    }
    for (const auto& img : inputs) {
        if (img.channels != 3) throw UsageError("inputs must be RGB");
        if (!img.same_shape(inputs.front())) throw UsageError("input dims differ");
    }
    Image ghost;
    if (mode != PipelineMode::basic2) {
        StageTimer t(out, "ghost fusion");
        ghost = ghost_fuse(inputs.front(), std::span<const Image>(inputs).subspan(1));
        inputs.push_back(ghost);
    }
    PipelineOutput result;
    {
        StageTimer t(out, "network");
        result = net->forward(inputs);
    }
    {
        StageTimer t(out, "save");
        save_image(clamp01(result.final), a.out, a.bit_depth);
        if (a.dump && mode != PipelineMode::basic2) {
            const fs::path o = a.out;
            if (mode == PipelineMode::pipeline3) {
                save_image(clamp01(result.cm_estimates.at(0)), sibling(o, "cm_under"), a.bit_depth);
                save_image(clamp01(result.cm_estimates.at(1)), sibling(o, "cm_over"), a.bit_depth);
            } else {
                save_image(clamp01(result.cm_estimates.at(0)), sibling(o, "cm_over"), a.bit_depth);
            }
            save_image(clamp01(result.merged_estimate), sibling(o, "merged"), a.bit_depth);
            save_image(ghost, sibling(o, "ghost"), a.bit_depth);
        }
    }
    out << "wrote " << a.out << " (" << result.final.width << "x" << result.final.height << ")\n";
    return exit_ok;
}

struct EvalArgs {
    std::string checkpoint;
    std::string dataset;
    std::string report;
    std::string split = "all";
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    require_file(a.checkpoint, "checkpoint");
    require_file((fs::path(a.dataset) / "index.json").string(), "dataset index");
    if (a.split != "all" && a.split != "train" && a.split != "val")
        throw UsageError("--split must be all, train or val");

    std::optional<FusionPipeline<float>> net;
    Dataset ds;
    {
        StageTimer t(out, "load");
        net.emplace(load_pipeline(a.checkpoint));
        ds = read_dataset(a.dataset);
    }
    const PipelineMode mode = net->spec().mode;
    if ((mode == PipelineMode::pipeline3) != (ds.mode == DatasetMode::ldr3)) throw CompatibilityError("mode");
    std::vector<Example> data;
    if (a.split != "val") data = make_examples(ds, mode, false);
    if (a.split != "train") {
        auto v = make_examples(ds, mode, true);
        data.insert(data.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
    }
    if (data.empty()) throw EmptyResult("no samples to evaluate");
    MetricsReport report;
    {
        StageTimer t(out, "evaluate");
        report = evaluate(*net, data);
    }
    out << "mean PSNR " << report.mean_psnr << " dB, SSIM " << report.mean_ssim << ", merged PSNR "
        << report.mean_psnr_merged << " dB over " << report.samples.size() << " samples\n";
    if (!a.report.empty()) {
        std::ofstream f(a.report);
        if (!f) throw IoError("cannot write report '" + a.report + "'");
        f << to_json(report) << '\n';
    }
    return exit_ok;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Exposure fusion for dynamic scenes: classical fusion, datasets, training and inference."};
    app.require_subcommand(1);
    std::string config;

    FuseArgs fa;
    auto* fuse = app.add_subcommand("fuse", "Classical multi-scale exposure fusion of aligned images");
    fuse->add_option("inputs", fa.inputs, "Input images (2 or more)");
    fuse->add_option("-o,--out", fa.out, "Output image")->required();
    fuse->add_option("--contrast", fa.params.w_contrast, "Contrast exponent");
    fuse->add_option("--saturation", fa.params.w_saturation, "Saturation exponent");
    fuse->add_option("--exposedness", fa.params.w_exposedness, "Well-exposedness exponent");
    fuse->add_option("--sigma", fa.params.sigma, "Well-exposedness sigma");
    fuse->add_option("--depth", fa.params.depth, "Pyramid depth (0 = automatic)");
    fuse->add_option("--bit-depth", fa.bit_depth, "8 or 16");
    fuse->add_option("--config", config, "Flat JSON file with flag values");

    BuildArgs ba;
    auto* build = app.add_subcommand("build-dataset", "Build training samples from a manifest or synthetic scenes");
    build->add_option("--manifest", ba.manifest, "JSON-lines scene manifest");
    build->add_option("--synthetic", ba.synthetic, "Generate N synthetic stereo scenes");
    build->add_option("--mode", ba.mode, "2ldr or 3ldr");
    build->add_option("--ratio-min", ba.ratio_min, "Minimum exposure ratio of 2-LDR pairs");
    build->add_option("--dims", ba.dims, "WIDTHxHEIGHT of every sample");
    build->add_option("--split", ba.split, "Fraction of scenes held out for validation");
    build->add_option("--seed", ba.seed, "Seed for synthesis and the split");
    build->add_option("--out", ba.out, "Output directory")->required();
    build->add_option("--synthetic-ratio", ba.synthetic_ratio, "Brightest/darkest exposure ratio of synthetic stacks");
    build->add_option("--exposures", ba.exposures, "Exposures per synthetic view");
    build->add_option("--disparity", ba.disparity, "Synthetic stereo disparity in pixels");
    build->add_flag("--no-motion", ba.no_motion, "Disable the moving object in synthetic scenes");
    build->add_option("--bit-depth", ba.bit_depth, "8 or 16");
    build->add_option("--config", config, "Flat JSON file with flag values");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train a fusion pipeline");
    tr->add_option("--dataset", ta.dataset, "Dataset directory")->required();
    tr->add_option("--mode", ta.mode, "basic2, pipeline2 or pipeline3 (default follows the dataset)");
    tr->add_option("--out", ta.out, "Output directory for checkpoints and log")->required();
    tr->add_option("--net-spec", ta.net_spec, "Network spec JSON");
    tr->add_option("--iters", ta.cfg.max_iters, "Iterations T");
    tr->add_option("--batch", ta.cfg.batch_size, "Minibatch size");
    tr->add_option("--lr", ta.cfg.lr0, "Base learning rate");
    tr->add_option("--decay-power", ta.cfg.decay_power, "Polynomial decay power");
    tr->add_option("--momentum", ta.cfg.momentum, "Momentum");
    tr->add_option("--seed", ta.cfg.seed, "Initialization and shuffling seed");
    tr->add_option("--clip-norm", ta.cfg.clip_norm, "Global gradient norm limit (0 disables)");
    tr->add_option("--checkpoint-every", ta.cfg.checkpoint_every, "Checkpoint and validate every N iterations");
    tr->add_option("--w-cm", ta.cfg.w_cm, "Colour-mapping loss weight");
    tr->add_option("--w-merge", ta.cfg.w_merge, "Merge loss weight");
    tr->add_option("--w-final", ta.cfg.w_final, "Final loss weight");
    tr->add_flag("--staged", ta.cfg.staged, "Stop gradients between stages");
    tr->add_flag("--quiet", ta.quiet, "Only print the summary");
    tr->add_option("--config", config, "Flat JSON file with flag values");

    InferArgs ia;
    auto* inf = app.add_subcommand("infer", "Run a trained pipeline");
    inf->add_option("--checkpoint", ia.checkpoint, "Checkpoint file")->required();
    inf->add_option("--ref", ia.ref, "Reference image")->required();
    inf->add_option("--nonref", ia.nonref, "Non-reference image (2-LDR)");
    inf->add_option("--under", ia.under, "Under-exposed image of the other view (3-LDR)");
    inf->add_option("--over", ia.over, "Over-exposed image of the other view (3-LDR)");
    inf->add_option("--out", ia.out, "Output image")->required();
    inf->add_option("--mode", ia.mode, "Expected pipeline mode");
    inf->add_flag("--dump-intermediates", ia.dump, "Also write colour-mapped, merged and ghost-fused images");
    inf->add_option("--bit-depth", ia.bit_depth, "8 or 16");
    inf->add_option("--config", config, "Flat JSON file with flag values");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
    ev->add_option("--dataset", ea.dataset, "Dataset directory")->required();
    ev->add_option("--report", ea.report, "Metrics JSON output");
    ev->add_option("--split", ea.split, "all, train or val");
    ev->add_option("--config", config, "Flat JSON file with flag values");

    // Required flags may come from the config file, so CLI11 checks them only
    // after the config has been merged.
    std::vector<std::pair<CLI::App*, CLI::Option*>> required;
    for (auto* sub : app.get_subcommands({}))
        for (auto* opt : sub->get_options())
            if (opt->get_required()) {
                opt->required(false);
                required.emplace_back(sub, opt);
            }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return exit_usage;
    }

    try {
        apply_threads();
        CLI::App* sub = app.get_subcommands().front();
        apply_config(*sub, config);
        for (auto [owner, opt] : required)
            if (owner == sub && opt->count() == 0)
                throw UsageError(opt->get_name() + " is required");
        if (sub == fuse) return cmd_fuse(fa, out);
        if (sub == build) return cmd_build_dataset(ba, out, err);
        if (sub == tr) return cmd_train(ta, out);
        if (sub == inf) return cmd_infer(ia, out);
        return cmd_eval(ea, out);
    } catch (const CompatibilityError& e) {
        err << "error: " << e.what() << '\n';
        return exit_incompatible;
    } catch (const EmptyResult& e) {
        err << "error: " << e.what() << '\n';
        return exit_empty;
    } catch (const TrainingError& e) {
        err << "error: " << e.what() << '\n';
        return exit_failure;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return exit_usage;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return exit_usage;
    } catch (const std::runtime_error& e) {
        // Unreadable inputs, malformed files, failed validation.
        err << "error: " << e.what() << '\n';
        return exit_usage;
    }
}

} // namespace expofuse
