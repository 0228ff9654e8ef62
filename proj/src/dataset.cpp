#include "expofuse/dataset.hpp"

#include "expofuse/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>

namespace expofuse {

const char* to_string(View v) {
    switch (v) {
    case View::left: return "left";
    case View::right: return "right";
    case View::free: return "free";
    }
    return "?";
}

const char* to_string(Role r) {
    switch (r) {
    case Role::under: return "under";
    case Role::mid: return "mid";
    case Role::over: return "over";
    }
    return "?";
}

View parse_view(const std::string& s) {
    if (s == "left") return View::left;
    if (s == "right") return View::right;
    if (s == "free") return View::free;
    throw std::invalid_argument("unknown view '" + s + "'");
}

Role parse_role(const std::string& s) {
    if (s == "under") return Role::under;
    if (s == "mid") return Role::mid;
    if (s == "over") return Role::over;
    throw std::invalid_argument("unknown role '" + s + "'");
}

std::vector<const Shot*> Scene::view(View v) const {
    std::vector<const Shot*> out;
    for (const Shot& s : shots)
        if (s.tag.view == v) out.push_back(&s);
    std::stable_sort(out.begin(), out.end(), [](const Shot* a, const Shot* b) {
        return a->tag.exposure_value < b->tag.exposure_value;
    });
    return out;
}

bool Scene::has_view(View v) const {
    return std::any_of(shots.begin(), shots.end(), [v](const Shot& s) { return s.tag.view == v; });
}

bool same_descriptors(const SourceCollection& a, const SourceCollection& b) {
    if (a.scenes.size() != b.scenes.size()) return false;
    for (std::size_t i = 0; i < a.scenes.size(); ++i) {
        const Scene& x = a.scenes[i];
        const Scene& y = b.scenes[i];
        if (x.id != y.id || x.shots.size() != y.shots.size()) return false;
        for (std::size_t k = 0; k < x.shots.size(); ++k)
            if (x.shots[k].path != y.shots[k].path || !(x.shots[k].tag == y.shots[k].tag)) return false;
    }
    return true;
}

double exposure_ratio(const ExposureTag& a, const ExposureTag& b) {
    require(a.exposure_value > 0 && b.exposure_value > 0, "exposure_ratio: exposure values must be positive");
    return std::max(a.exposure_value, b.exposure_value) / std::min(a.exposure_value, b.exposure_value);
}

void load_scene_images(Scene& scene, const std::filesystem::path& base_dir) {
    for (Shot& s : scene.shots) {
        if (!s.image.empty()) continue;
        std::filesystem::path p(s.path);
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        s.image = load_image(p);
    }
}

void load_images(SourceCollection& src) {
    for (Scene& s : src.scenes) load_scene_images(s, src.base_dir);
}

namespace {

void emit_warning(const BuildOptions& opts, const std::string& msg) {
    if (opts.warn) {
        opts.warn(msg);
    } else {
        std::cerr << "warning: " << msg << '\n';
    }
}

std::vector<const Scene*> sorted_scenes(const SourceCollection& src) {
    std::vector<const Scene*> out;
    for (const Scene& s : src.scenes) out.push_back(&s);
    std::stable_sort(out.begin(), out.end(), [](const Scene* a, const Scene* b) { return a->id < b->id; });
    return out;
}

class SceneImages {
public:
    SceneImages(const BuildOptions& opts) : opts_(opts) {}

    const Image& get(const Shot* s) {
        auto it = cache_.find(s);
        if (it != cache_.end()) return it->second;
        require(!s->image.empty(), "dataset builder: shot image not loaded: " + s->path);
        Image img = s->image;
        if (opts_.width > 0 && opts_.height > 0) img = resize(img, opts_.width, opts_.height);
        return cache_.emplace(s, std::move(img)).first->second;
    }

    std::vector<Image> stack(const std::vector<const Shot*>& shots) {
        std::vector<Image> out;
        for (const Shot* s : shots) out.push_back(get(s));
        return out;
    }

private:
    const BuildOptions& opts_;
    std::map<const Shot*, Image> cache_;
};

// Shot in `shots` closest to `ev` in log scale, within the match factor.
const Shot* match_exposure(const std::vector<const Shot*>& shots, double ev, double factor) {
    const Shot* best = nullptr;
    double best_d = std::log(factor) + 1e-12;
    for (const Shot* s : shots) {
        const double d = std::abs(std::log(s->tag.exposure_value / ev));
        if (d <= best_d) {
            if (best && d == best_d) continue;
            best = s;
            best_d = d;
        }
    }
    return best;
}

std::vector<const Shot*> with_role(const std::vector<const Shot*>& shots, Role r) {
    std::vector<const Shot*> out;
    for (const Shot* s : shots)
        if (s->tag.role_hint == r) out.push_back(s);
    return out;
}

bool same_dims(const std::vector<Image>& imgs) {
    return std::all_of(imgs.begin(), imgs.end(), [&](const Image& i) { return i.same_shape(imgs.front()); });
}

} // namespace

std::vector<TrainingSample2> build_pairs_2ldr(const SourceCollection& src, const BuildOptions& opts) {
    std::vector<TrainingSample2> out;
    for (const Scene* scene : sorted_scenes(src)) {
        View ref_view = View::left, other_view = View::right;
        if (scene->has_view(View::free)) {
            ref_view = scene->has_view(View::left) ? View::left : View::right;
            other_view = View::free;
        }
        const auto ref_shots = scene->view(ref_view);
        const auto other_shots = scene->view(other_view);
        if (ref_shots.size() < 2 || other_shots.empty()) {
            emit_warning(opts, "scene '" + scene->id + "': needs a reference-view stack and a second view, skipped");
            continue;
        }
        SceneImages images(opts);
        std::optional<Image> gt;
        for (const Shot* ref : with_role(ref_shots, Role::under)) {
            for (const Shot* nonref : with_role(other_shots, Role::over)) {
                if (nonref->tag.exposure_value <= ref->tag.exposure_value) continue;
                const double ratio = exposure_ratio(ref->tag, nonref->tag);
                if (ratio < opts.ratio_min * (1 - 1e-9)) continue;
                const Shot* cm = match_exposure(ref_shots, nonref->tag.exposure_value, opts.match_factor);
                if (!cm) {
                    emit_warning(opts, "scene '" + scene->id + "': no reference-view exposure matching ev " +
                                           std::to_string(nonref->tag.exposure_value) + ", pair skipped");
                    continue;
                }
                if (!gt) {
                    std::vector<Image> stack = images.stack(ref_shots);
                    require(same_dims(stack), "scene '" + scene->id + "': reference stack dims differ");
                    gt = exposure_fuse(stack, opts.fusion);
                }
                TrainingSample2 s;
                s.scene_id = scene->id;
                s.reference = images.get(ref);
                s.non_reference = images.get(nonref);
                require(s.reference.same_shape(s.non_reference), "scene '" + scene->id + "': view dims differ");
                s.color_map_target = images.get(cm);
                s.ground_truth = *gt;
                const Image nonrefs[] = {s.non_reference};
                s.ghost_fused = ghost_fuse(s.reference, nonrefs, opts.fusion);
                s.ratio = ratio;
                out.push_back(std::move(s));
            }
        }
    }
    return out;
}

std::vector<TrainingSample3> build_triples_3ldr(const SourceCollection& src, const BuildOptions& opts) {
    std::vector<TrainingSample3> out;
    for (const Scene* scene : sorted_scenes(src)) {
        std::vector<std::pair<View, View>> assignments;
        if (scene->has_view(View::free)) {
            assignments.emplace_back(scene->has_view(View::left) ? View::left : View::right, View::free);
        } else if (scene->has_view(View::left) && scene->has_view(View::right)) {
            assignments.emplace_back(View::left, View::right);
            assignments.emplace_back(View::right, View::left);
        }
        if (assignments.empty()) {
            emit_warning(opts, "scene '" + scene->id + "': single view, no cross-view motion, skipped");
            continue;
        }
        SceneImages images(opts);
        for (const auto& [ref_view, input_view] : assignments) {
            const auto ref_shots = scene->view(ref_view);
            const auto in_shots = scene->view(input_view);
            const auto mids = with_role(ref_shots, Role::mid);
            const auto unders = with_role(in_shots, Role::under);
            const auto overs = with_role(in_shots, Role::over);
            if (mids.empty() || unders.empty() || overs.empty()) {
                emit_warning(opts, "scene '" + scene->id + "' (" + to_string(ref_view) +
                                       " reference): missing under/mid/over role, skipped");
                continue;
            }
            const Shot* ref = mids[mids.size() / 2];
            const Shot* under = unders.front();
            const Shot* over = overs.back();
            const Shot* cm_under = match_exposure(ref_shots, under->tag.exposure_value, opts.match_factor);
            const Shot* cm_over = match_exposure(ref_shots, over->tag.exposure_value, opts.match_factor);
            if (!cm_under || !cm_over) {
                emit_warning(opts, "scene '" + scene->id + "' (" + to_string(ref_view) +
                                       " reference): no matching colour-map target, skipped");
                continue;
            }
            std::vector<Image> stack = images.stack(ref_shots);
            require(same_dims(stack), "scene '" + scene->id + "': reference stack dims differ");
            TrainingSample3 s;
            s.scene_id = scene->id;
            s.reference_view = ref_view;
            s.input_view = input_view;
            s.reference = images.get(ref);
            s.under = images.get(under);
            s.over = images.get(over);
            require(s.reference.same_shape(s.under) && s.reference.same_shape(s.over),
                    "scene '" + scene->id + "': view dims differ");
            s.cm_under_target = images.get(cm_under);
            s.cm_over_target = images.get(cm_over);
            s.ground_truth = exposure_fuse(stack, opts.fusion);
            const Image nonrefs[] = {s.under, s.over};
            s.ghost_fused = ghost_fuse(s.reference, nonrefs, opts.fusion);
            out.push_back(std::move(s));
        }
    }
    return out;
}

TrainingSample2 flip_sample(const TrainingSample2& s, FlipAxis axis) {
    TrainingSample2 f;
    f.scene_id = s.scene_id;
    f.ratio = s.ratio;
    f.reference = flip(s.reference, axis);
    f.non_reference = flip(s.non_reference, axis);
    f.ghost_fused = flip(s.ghost_fused, axis);
    f.color_map_target = flip(s.color_map_target, axis);
    f.ground_truth = flip(s.ground_truth, axis);
    return f;
}

TrainingSample3 flip_sample(const TrainingSample3& s, FlipAxis axis) {
    TrainingSample3 f;
    f.scene_id = s.scene_id;
    f.reference_view = s.reference_view;
    f.input_view = s.input_view;
    f.reference = flip(s.reference, axis);
    f.under = flip(s.under, axis);
    f.over = flip(s.over, axis);
    f.ghost_fused = flip(s.ghost_fused, axis);
    f.cm_under_target = flip(s.cm_under_target, axis);
    f.cm_over_target = flip(s.cm_over_target, axis);
    f.ground_truth = flip(s.ground_truth, axis);
    return f;
}

namespace {

template <typename Sample>
std::vector<Sample> augment_impl(const std::vector<Sample>& samples) {
    std::vector<Sample> out;
    out.reserve(samples.size() * 4);
    for (const Sample& s : samples) {
        out.push_back(s);
        out.push_back(flip_sample(s, FlipAxis::vertical));
        out.push_back(flip_sample(s, FlipAxis::horizontal));
        out.push_back(flip_sample(s, FlipAxis::diagonal));
    }
    return out;
}

} // namespace

std::vector<TrainingSample2> augment(const std::vector<TrainingSample2>& samples) { return augment_impl(samples); }
std::vector<TrainingSample3> augment(const std::vector<TrainingSample3>& samples) { return augment_impl(samples); }

} // namespace expofuse
