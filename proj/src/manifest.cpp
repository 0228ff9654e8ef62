#include "expofuse/dataset.hpp"

#include "expofuse/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

namespace expofuse {

using nlohmann::json;

namespace {

const json& field(const json& obj, const char* name, int line) {
    if (!obj.is_object() || !obj.contains(name)) throw ParseError(std::string("missing required field '") + name + "'", line);
    return obj.at(name);
}

} // namespace

void write_manifest(const SourceCollection& src, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const Scene& scene : src.scenes) {
        json views = json::object();
        for (View v : {View::left, View::right, View::free}) {
            if (!scene.has_view(v)) continue;
            json arr = json::array();
            for (const Shot& s : scene.shots) {
                if (s.tag.view != v) continue;
                arr.push_back({{"path", s.path}, {"ev", s.tag.exposure_value}, {"role", to_string(s.tag.role_hint)}});
            }
            views[to_string(v)] = std::move(arr);
        }
        out << json{{"id", scene.id}, {"views", std::move(views)}}.dump() << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

SourceCollection read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    SourceCollection src;
    src.base_dir = path.parent_path();
    std::string text;
    int line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) continue;
        json rec;
        try {
            rec = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed JSON: ") + e.what(), line);
        }
        Scene scene;
        const json& id = field(rec, "id", line);
        if (!id.is_string()) throw ParseError("field 'id' must be a string", line);
        scene.id = id.get<std::string>();
        const json& views = field(rec, "views", line);
        if (!views.is_object()) throw ParseError("field 'views' must be an object", line);
        // Stable order independent of the JSON key order.
        for (View v : {View::left, View::right, View::free}) {
            if (!views.contains(to_string(v))) continue;
            const json& arr = views.at(to_string(v));
            if (!arr.is_array()) throw ParseError(std::string("view '") + to_string(v) + "' must be an array", line);
            for (const json& shot : arr) {
                const json& p = field(shot, "path", line);
                const json& ev = field(shot, "ev", line);
                const json& role = field(shot, "role", line);
                if (!p.is_string()) throw ParseError("field 'path' must be a string", line);
                if (!ev.is_number() || ev.get<double>() <= 0) throw ParseError("field 'ev' must be a positive number", line);
                Shot s;
                s.path = p.get<std::string>();
                s.tag.exposure_value = ev.get<double>();
                s.tag.view = v;
                try {
                    s.tag.role_hint = parse_role(role.is_string() ? role.get<std::string>() : "");
                } catch (const std::invalid_argument&) {
                    throw ParseError("field 'role' must be one of under|mid|over", line);
                }
                scene.shots.push_back(std::move(s));
            }
        }
        for (const auto& [key, _] : views.items()) {
            if (key != "left" && key != "right" && key != "free") throw ParseError("unknown view '" + key + "'", line);
        }
        src.scenes.push_back(std::move(scene));
    }
    return src;
}

void validate_manifest(const SourceCollection& src) {
    std::vector<std::string> missing;
    std::set<std::string> ids;
    for (const Scene& scene : src.scenes) {
        if (!ids.insert(scene.id).second) throw ValidationError("duplicate scene id '" + scene.id + "'");
        for (const Shot& s : scene.shots) {
            if (!s.image.empty()) continue;
            std::filesystem::path p(s.path);
            if (p.is_relative() && !src.base_dir.empty()) p = src.base_dir / p;
            if (!std::filesystem::exists(p)) missing.push_back(p.string());
        }
    }
    if (!missing.empty()) {
        std::string msg = "manifest references missing files:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw ValidationError(msg);
    }
}

void write_scene_images(Scene& scene, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    int k = 0;
    for (Shot& s : scene.shots) {
        const std::string name = std::string(to_string(s.tag.view)) + "_" + std::to_string(k++) + ".png";
        save_image(s.image, dir / name, 16);
        s.path = (dir / name).string();
    }
}

const char* to_string(DatasetMode m) { return m == DatasetMode::ldr2 ? "2ldr" : "3ldr"; }

DatasetMode parse_dataset_mode(const std::string& s) {
    if (s == "2ldr") return DatasetMode::ldr2;
    if (s == "3ldr") return DatasetMode::ldr3;
    throw std::invalid_argument("unknown dataset mode '" + s + "' (expected 2ldr or 3ldr)");
}

std::vector<std::string> choose_validation_scenes(std::vector<std::string> ids, double val_fraction, std::uint64_t seed) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    require(val_fraction >= 0 && val_fraction < 1, "validation fraction must be in [0,1)");
    std::size_t n_val = static_cast<std::size_t>(std::floor(ids.size() * val_fraction));
    if (n_val >= ids.size() && !ids.empty()) n_val = ids.size() - 1;
    std::mt19937_64 gen(seed);
    // Fisher-Yates with raw generator output for portability.
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[gen() % i]);
    ids.resize(n_val);
    std::sort(ids.begin(), ids.end());
    return ids;
}

namespace {

std::string safe_name(const std::string& id) {
    std::string out = id;
    for (char& c : out)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
    if (out.empty() || out == "." || out == "..") out = "_" + out;
    return out;
}

struct FileSlot {
    const char* name;
};

template <typename Sample, typename Files>
void write_samples(const std::vector<Sample>& samples, const char* split, const std::filesystem::path& dir,
                   int bit_depth, std::map<std::string, int>& counters, json& index, Files files) {
    for (const Sample& s : samples) {
        const std::string scene_dir = safe_name(s.scene_id);
        const std::string rel = scene_dir + "/sample-" + std::to_string(counters[scene_dir]++);
        std::filesystem::create_directories(dir / rel);
        for (const auto& [name, img] : files(s)) save_image(*img, dir / rel / name, bit_depth);
        index.push_back({{"scene", s.scene_id}, {"dir", rel}, {"split", split}});
    }
}

auto files2(const TrainingSample2& s) {
    return std::vector<std::pair<std::string, const Image*>>{
        {"reference.png", &s.reference}, {"nonref.png", &s.non_reference}, {"ghost.png", &s.ghost_fused},
        {"cmtarget.png", &s.color_map_target}, {"gt.png", &s.ground_truth}};
}

auto files3(const TrainingSample3& s) {
    return std::vector<std::pair<std::string, const Image*>>{
        {"reference.png", &s.reference}, {"under.png", &s.under}, {"over.png", &s.over},
        {"ghost.png", &s.ghost_fused}, {"cm_under.png", &s.cm_under_target},
        {"cm_over.png", &s.cm_over_target}, {"gt.png", &s.ground_truth}};
}

} // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& dir, int bit_depth) {
    std::filesystem::create_directories(dir);
    json samples = json::array();
    std::map<std::string, int> counters;
    if (ds.mode == DatasetMode::ldr2) {
        write_samples(ds.train2, "train", dir, bit_depth, counters, samples, files2);
        write_samples(ds.val2, "val", dir, bit_depth, counters, samples, files2);
    } else {
        write_samples(ds.train3, "train", dir, bit_depth, counters, samples, files3);
        write_samples(ds.val3, "val", dir, bit_depth, counters, samples, files3);
    }
    const json index = {{"mode", to_string(ds.mode)}, {"samples", std::move(samples)}};
    std::ofstream out(dir / "index.json");
    if (!out) throw IoError("cannot write " + (dir / "index.json").string());
    out << index.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "index.json");
    if (!in) throw IoError("no dataset index at " + (dir / "index.json").string());
    json index;
    try {
        index = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("dataset index: ") + e.what());
    }
    Dataset ds;
    try {
        ds.mode = parse_dataset_mode(index.at("mode").get<std::string>());
        for (const json& rec : index.at("samples")) {
            const auto rel = dir / rec.at("dir").get<std::string>();
            const std::string scene = rec.at("scene").get<std::string>();
            const bool val = rec.at("split").get<std::string>() == "val";
            if (ds.mode == DatasetMode::ldr2) {
                TrainingSample2 s;
                s.scene_id = scene;
                s.reference = load_image(rel / "reference.png");
                s.non_reference = load_image(rel / "nonref.png");
                s.ghost_fused = load_image(rel / "ghost.png");
                s.color_map_target = load_image(rel / "cmtarget.png");
                s.ground_truth = load_image(rel / "gt.png");
                (val ? ds.val2 : ds.train2).push_back(std::move(s));
            } else {
                TrainingSample3 s;
                s.scene_id = scene;
                s.reference = load_image(rel / "reference.png");
                s.under = load_image(rel / "under.png");
                s.over = load_image(rel / "over.png");
                s.ghost_fused = load_image(rel / "ghost.png");
                s.cm_under_target = load_image(rel / "cm_under.png");
                s.cm_over_target = load_image(rel / "cm_over.png");
                s.ground_truth = load_image(rel / "gt.png");
                (val ? ds.val3 : ds.train3).push_back(std::move(s));
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("dataset index: ") + e.what());
    }
    return ds;
}

} // namespace expofuse
