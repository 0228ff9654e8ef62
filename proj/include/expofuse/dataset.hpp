#pragma once

#include "expofuse/image.hpp"
#include "expofuse/pyramid.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace expofuse {

enum class View { left, right, free };
enum class Role { under, mid, over };

const char* to_string(View v);
const char* to_string(Role r);
View parse_view(const std::string& s);
Role parse_role(const std::string& s);

struct ExposureTag {
    double exposure_value = 1.0; // relative; only ratios matter
    View view = View::left;
    Role role_hint = Role::mid;
    friend bool operator==(const ExposureTag&, const ExposureTag&) = default;
};

// One captured LDR frame. image stays empty until loaded (manifest scenes)
// or is filled directly (synthetic scenes).
struct Shot {
    std::string path;
    ExposureTag tag;
    Image image;
};

struct Scene {
    std::string id;
    std::vector<Shot> shots;

    std::vector<const Shot*> view(View v) const; // sorted by exposure value
    bool has_view(View v) const;
};

struct SourceCollection {
    std::vector<Scene> scenes;
    std::filesystem::path base_dir; // relative shot paths resolve against this
};

// Compares ids, paths and tags; pixel data is ignored.
bool same_descriptors(const SourceCollection& a, const SourceCollection& b);

// max/min of the two exposure values, always >= 1.
double exposure_ratio(const ExposureTag& a, const ExposureTag& b);

struct TrainingSample2 {
    std::string scene_id;
    Image reference;        // under-exposed, reference view
    Image non_reference;    // over-exposed, other view
    Image ghost_fused;
    Image color_map_target; // over-exposed instance of the reference view
    Image ground_truth;     // full reference-view stack fused
    double ratio = 1.0;
};

struct TrainingSample3 {
    std::string scene_id;
    View reference_view = View::left;
    View input_view = View::right;
    Image reference; // mid-exposed
    Image under;
    Image over;
    Image ghost_fused;
    Image cm_under_target;
    Image cm_over_target;
    Image ground_truth;
};

struct BuildOptions {
    double ratio_min = 8.0;
    int width = 0; // 0 keeps native dims
    int height = 0;
    double match_factor = 1.3; // colour-map target must lie within this exposure factor
    FusionParams fusion;
    // Receives skip/diagnostic messages; defaults to stderr.
    std::function<void(const std::string&)> warn;
};

// Loads every shot whose image is still empty.
void load_scene_images(Scene& scene, const std::filesystem::path& base_dir);
void load_images(SourceCollection& src);

std::vector<TrainingSample2> build_pairs_2ldr(const SourceCollection& src, const BuildOptions& opts = {});
std::vector<TrainingSample3> build_triples_3ldr(const SourceCollection& src, const BuildOptions& opts = {});

// Original followed by vertical, horizontal and diagonal flips of every sample.
std::vector<TrainingSample2> augment(const std::vector<TrainingSample2>& samples);
std::vector<TrainingSample3> augment(const std::vector<TrainingSample3>& samples);
TrainingSample2 flip_sample(const TrainingSample2& s, FlipAxis axis);
TrainingSample3 flip_sample(const TrainingSample3& s, FlipAxis axis);

struct SynthOptions {
    int exposures = 5;
    double ratio = 16.0;     // brightest / darkest exposure
    int disparity = 8;       // horizontal shift of the right view, px
    bool object_motion = true;
    int shapes = 7;
};

// Deterministic in (seed, dims, options). Views left and right, ids "synth-<seed>".
Scene synth_scene(std::uint64_t seed, int width, int height, const SynthOptions& opts = {});

// One JSON scene record per line.
void write_manifest(const SourceCollection& src, const std::filesystem::path& path);
SourceCollection read_manifest(const std::filesystem::path& path);
// Throws ValidationError listing every missing file.
void validate_manifest(const SourceCollection& src);

// Writes shot images under dir and records their paths (used by the CLI).
void write_scene_images(Scene& scene, const std::filesystem::path& dir);

enum class DatasetMode { ldr2, ldr3 };
const char* to_string(DatasetMode m);
DatasetMode parse_dataset_mode(const std::string& s);

struct Dataset {
    DatasetMode mode = DatasetMode::ldr2;
    std::vector<TrainingSample2> train2, val2;
    std::vector<TrainingSample3> train3, val3;

    std::size_t train_size() const { return mode == DatasetMode::ldr2 ? train2.size() : train3.size(); }
    std::size_t val_size() const { return mode == DatasetMode::ldr2 ? val2.size() : val3.size(); }
};

// Assigns whole scenes to validation: floor(n_scenes * val_fraction) of them,
// chosen by a seeded shuffle of the sorted scene ids. At least one scene stays
// in training.
std::vector<std::string> choose_validation_scenes(std::vector<std::string> scene_ids, double val_fraction,
                                                  std::uint64_t seed);

// <dir>/<scene>/<sample-k>/{...}.png plus <dir>/index.json.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir, int bit_depth = 16);
Dataset read_dataset(const std::filesystem::path& dir);

} // namespace expofuse
