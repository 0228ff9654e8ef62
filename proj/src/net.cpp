#include "expofuse/net.hpp"

#include "expofuse/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace expofuse {

const char* to_string(PipelineMode m) {
    switch (m) {
    case PipelineMode::basic2: return "basic2";
    case PipelineMode::pipeline2: return "pipeline2";
    case PipelineMode::pipeline3: return "pipeline3";
    }
    return "?";
}

PipelineMode parse_pipeline_mode(const std::string& s) {
    if (s == "basic2") return PipelineMode::basic2;
    if (s == "pipeline2" || s == "2ldr") return PipelineMode::pipeline2;
    if (s == "pipeline3" || s == "3ldr") return PipelineMode::pipeline3;
    throw std::invalid_argument("unknown pipeline mode '" + s + "'");
}

SubNetworkSpec flownet_baseline_spec() {
    SubNetworkSpec s;
    s.depth = 3;
    s.filters = 16;
    s.links = LinkTopology::simple;
    return s;
}

SubNetworkSpec with_extra_convs(SubNetworkSpec s, int per_level, int bottom) {
    s.extra_convs.assign(s.depth, per_level);
    s.extra_convs.back() = bottom;
    s.refine_extra_convs.assign(s.depth - 1, per_level);
    return s;
}

PipelineSpec default_pipeline_spec(PipelineMode mode) {
    PipelineSpec p;
    p.mode = mode;
    SubNetworkSpec small;
    small.depth = 3;
    small.filters = 16;
    small.links = LinkTopology::dense;
    switch (mode) {
    case PipelineMode::basic2:
        p.merge = flownet_baseline_spec();
        break;
    case PipelineMode::pipeline2: {
        SubNetworkSpec cm;
        cm.depth = 5;
        cm.filters = 32;
        cm.links = LinkTopology::dense;
        p.color_map = {cm};
        p.merge = small;
        p.deghost = small;
        break;
    }
    case PipelineMode::pipeline3: {
        const SubNetworkSpec s = with_extra_convs(small, 2, 4);
        p.color_map = {s, s};
        p.merge = s;
        p.deghost = s;
        break;
    }
    }
    return p;
}

void validate(const SubNetworkSpec& s) {
    require(s.depth >= 1, "sub-network depth must be >= 1");
    require(s.filters >= 1, "sub-network filters must be >= 1");
    require(s.kernel == 4 && s.stride == 2, "sub-network kernel must be 4x4 with stride 2");
    require(s.extra_convs.empty() || static_cast<int>(s.extra_convs.size()) == s.depth,
            "extra_convs must have one entry per contractive level");
    require(s.refine_extra_convs.empty() || static_cast<int>(s.refine_extra_convs.size()) == s.depth - 1,
            "refine_extra_convs must have depth - 1 entries");
    for (int v : s.extra_convs) require(v >= 0, "extra_convs entries must be >= 0");
    for (int v : s.refine_extra_convs) require(v >= 0, "refine_extra_convs entries must be >= 0");
}

void validate(const PipelineSpec& p) {
    require(p.leaky_slope >= 0 && p.leaky_slope < 1, "leaky_slope must be in [0,1)");
    validate(p.merge);
    switch (p.mode) {
    case PipelineMode::basic2:
        require(p.color_map.empty(), "basic2 has no colour-mapping sub-network");
        break;
    case PipelineMode::pipeline2:
        require(p.color_map.size() == 1, "pipeline2 needs exactly 1 colour-mapping sub-network");
        break;
    case PipelineMode::pipeline3:
        require(p.color_map.size() == 2, "pipeline3 needs exactly 2 colour-mapping sub-networks");
        break;
    }
    for (const auto& c : p.color_map) validate(c);
    if (p.mode != PipelineMode::basic2) validate(p.deghost);
}

int input_image_count(PipelineMode mode) {
    switch (mode) {
    case PipelineMode::basic2: return 2;
    case PipelineMode::pipeline2: return 3;
    case PipelineMode::pipeline3: return 4;
    }
    return 0;
}

int merge_input_channels(PipelineMode mode) {
    switch (mode) {
    case PipelineMode::basic2: return 6;
    case PipelineMode::pipeline2: return 12; // ref, cm_over, nonref, ghost
    case PipelineMode::pipeline3: return 18; // ref, cm_under, cm_over, under, over, ghost
    }
    return 0;
}

// ---------------------------------------------------------------------------
// SubNetwork

template <typename T>
ParamSlot<T>& SubNetwork<T>::add_slot(const std::string& name, typename ParamSlot<T>::Kind kind, int in, int out,
                                      int k, int s, int pad) {
    auto slot = std::make_unique<ParamSlot<T>>();
    slot->name = name_ + "." + name;
    slot->kind = kind;
    slot->params = make_conv<T>(in, out, k, s, pad);
    if (kind == ParamSlot<T>::Kind::deconv) slot->params.bias.assign(out, T(0));
    slot->zero_grad();
    owned_.push_back(std::move(slot));
    return *owned_.back();
}

template <typename T>
ParamSlot<T>* SubNetwork<T>::link_slot(int node, int res) const {
    for (const Link& l : links_)
        if (l.node == node && l.res == res) return l.slot;
    return nullptr;
}

template <typename T>
SubNetwork<T>::SubNetwork(const SubNetworkSpec& spec, int in_channels, int out_channels, std::string name,
                          T leaky_slope)
    : spec_(spec), name_(std::move(name)), in_channels_(in_channels), out_channels_(out_channels),
      slope_(leaky_slope) {
    validate(spec_);
    require(in_channels >= 1 && out_channels >= 1, "sub-network channel counts must be >= 1");
    using Kind = typename ParamSlot<T>::Kind;
    const int D = spec_.depth, F = spec_.filters;
    const bool dense = spec_.links == LinkTopology::dense;
    const int pad = (spec_.kernel - spec_.stride) / 2;
    nodes_.push_back({0, in_channels});

    // Channel count of a layer's input, creating any link layers it needs.
    auto wire = [&](const std::string& layer, const std::vector<int>& preds, int res) {
        int channels = 0;
        for (int p : preds) {
            const Node n = nodes_[p];
            channels += n.channels;
            if (!dense || n.res == res || link_slot(p, res)) continue;
            const std::string lname = "link" + std::to_string(p) + "_r" + std::to_string(res);
            if (n.res < res) {
                const int s = 1 << (res - n.res);
                links_.push_back({p, res, &add_slot(lname, Kind::conv, n.channels, n.channels, 2 * s, s, s / 2)});
            } else if (n.res == res + 1) {
                links_.push_back({p, res, &add_slot(lname, Kind::deconv, n.channels, n.channels, spec_.kernel, spec_.stride, pad)});
            }
        }
        return std::pair<std::string, int>(layer, channels);
    };
    auto all_preds = [&] {
        std::vector<int> v(nodes_.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int>(i);
        return v;
    };
    auto record = [&](const std::pair<std::string, int>& lc, int expected) {
        accounting_.push_back({lc.first, lc.second, expected});
        return lc.second;
    };

    for (int i = 1; i <= D; ++i) {
        const std::string lname = "enc" + std::to_string(i);
        const auto preds = dense ? all_preds() : std::vector<int>{i - 1};
        const int expected = dense ? in_channels + F * (i - 1) : (i == 1 ? in_channels : F);
        const int in = record(wire(lname, preds, i - 1), expected);
        enc_.push_back(&add_slot(lname, Kind::conv, in, F, spec_.kernel, spec_.stride, pad));
        std::vector<ParamSlot<T>*> extras;
        const int n_extra = spec_.extra_convs.empty() ? 0 : spec_.extra_convs[i - 1];
        for (int k = 0; k < n_extra; ++k)
            extras.push_back(&add_slot(lname + ".extra" + std::to_string(k), Kind::conv, F, F, 3, 1, 1));
        enc_extra_.push_back(std::move(extras));
        nodes_.push_back({i, F});
    }
    for (int j = D - 1; j >= 0; --j) {
        const std::string lname = "dec" + std::to_string(j);
        std::vector<int> preds;
        int expected = 0;
        if (dense) {
            preds = all_preds();
            expected = in_channels + F * (static_cast<int>(nodes_.size()) - 1);
        } else if (j == D - 1) {
            preds = {D};
            expected = F;
        } else {
            preds = {static_cast<int>(nodes_.size()) - 1, j + 1};
            expected = 2 * F;
        }
        const int in = record(wire(lname, preds, j + 1), expected);
        dec_.push_back(&add_slot(lname, Kind::deconv, in, F, spec_.kernel, spec_.stride, pad));
        std::vector<ParamSlot<T>*> extras;
        const int k_idx = D - 1 - j;
        const int n_extra = (j > 0 && !spec_.refine_extra_convs.empty()) ? spec_.refine_extra_convs[k_idx] : 0;
        for (int k = 0; k < n_extra; ++k)
            extras.push_back(&add_slot(lname + ".extra" + std::to_string(k), Kind::conv, F, F, 3, 1, 1));
        dec_extra_.push_back(std::move(extras));
        nodes_.push_back({j, F});
    }
    {
        const auto preds = dense ? all_preds() : std::vector<int>{static_cast<int>(nodes_.size()) - 1, 0};
        const int expected = dense ? in_channels + F * (static_cast<int>(nodes_.size()) - 1) : F + in_channels;
        const int in = record(wire("final", preds, 0), expected);
        final_.push_back(&add_slot("final", Kind::conv, in, out_channels, 3, 1, 1));
    }
    for (const LayerAccount& a : accounting_)
        if (a.in_channels != a.expected)
            throw ContractViolation(name_ + "." + a.layer + ": channel accounting mismatch (" +
                                    std::to_string(a.in_channels) + " vs " + std::to_string(a.expected) + ")");
}

template <typename T>
std::vector<std::pair<int, int>> SubNetwork<T>::level_dims(int h, int w) const {
    const int pad = (spec_.kernel - spec_.stride) / 2;
    std::vector<std::pair<int, int>> dims{{h, w}};
    for (int r = 1; r <= spec_.depth; ++r) {
        const auto [ph, pw] = dims.back();
        dims.emplace_back(conv_out_dim(ph, spec_.kernel, spec_.stride, pad), conv_out_dim(pw, spec_.kernel, spec_.stride, pad));
    }
    return dims;
}

template <typename T>
int SubNetwork<T>::gather(Graph<T>& g, const std::vector<int>& ids, int upto, int res,
                          const std::vector<std::pair<int, int>>& dims, std::vector<std::vector<int>>& cache) const {
    std::vector<int> parts;
    const auto [th, tw] = dims[res];
    for (int p = 0; p < upto; ++p) {
        int& slot_id = cache[p][res];
        if (slot_id < 0) {
            const Node& n = nodes_[p];
            int id = ids[p];
            if (n.res != res) {
                if (ParamSlot<T>* link = link_slot(p, res)) {
                    id = link->kind == ParamSlot<T>::Kind::conv ? g.conv(id, *link) : g.deconv(id, *link);
                    id = g.leaky_relu(id, slope_);
                }
            }
            slot_id = g.resize(id, th, tw);
        }
        parts.push_back(slot_id);
    }
    return g.concat(parts);
}

template <typename T>
int SubNetwork<T>::build(Graph<T>& g, int input) const {
    const Tensor<T>& x = g.value(input);
    require(x.c == in_channels_, name_ + ": expected " + std::to_string(in_channels_) + " input channels, got " +
                                     std::to_string(x.c));
    const int D = spec_.depth;
    const auto dims = level_dims(x.h, x.w);
    require(dims.back().first >= 1 && dims.back().second >= 1,
            name_ + ": input smaller than 2^depth in some dimension");
    const bool dense = spec_.links == LinkTopology::dense;
    std::vector<int> ids{input};
    std::vector<std::vector<int>> cache(nodes_.size(), std::vector<int>(D + 1, -1));
    auto simple_concat = [&](std::initializer_list<int> nodes) {
        std::vector<int> parts;
        for (int n : nodes) parts.push_back(ids[n]);
        return g.concat(parts);
    };

    for (int i = 1; i <= D; ++i) {
        const int in = dense ? gather(g, ids, static_cast<int>(ids.size()), i - 1, dims, cache) : ids[i - 1];
        int h = g.leaky_relu(g.conv(in, *enc_[i - 1]), slope_);
        for (ParamSlot<T>* e : enc_extra_[i - 1]) h = g.leaky_relu(g.conv(h, *e), slope_);
        ids.push_back(h);
    }
    for (int j = D - 1, k = 0; j >= 0; --j, ++k) {
        int in;
        if (dense) {
            in = gather(g, ids, static_cast<int>(ids.size()), j + 1, dims, cache);
        } else if (j == D - 1) {
            in = ids[D];
        } else {
            in = simple_concat({static_cast<int>(ids.size()) - 1, j + 1});
        }
        int h = g.leaky_relu(g.deconv(in, *dec_[k]), slope_);
        h = g.resize(h, dims[j].first, dims[j].second);
        for (ParamSlot<T>* e : dec_extra_[k]) h = g.leaky_relu(g.conv(h, *e), slope_);
        ids.push_back(h);
    }
    const int in = dense ? gather(g, ids, static_cast<int>(ids.size()), 0, dims, cache)
                         : simple_concat({static_cast<int>(ids.size()) - 1, 0});
    return g.conv(in, *final_[0]);
}

template <typename T>
std::vector<ParamSlot<T>*> SubNetwork<T>::slots() {
    std::vector<ParamSlot<T>*> out;
    for (auto& s : owned_) out.push_back(s.get());
    return out;
}

template <typename T>
std::vector<const ParamSlot<T>*> SubNetwork<T>::slots() const {
    std::vector<const ParamSlot<T>*> out;
    for (const auto& s : owned_) out.push_back(s.get());
    return out;
}

// ---------------------------------------------------------------------------
// FusionPipeline

template <typename T>
FusionPipeline<T>::FusionPipeline(PipelineSpec spec) : spec_(std::move(spec)) {
    validate(spec_);
    const T slope = static_cast<T>(spec_.leaky_slope);
    switch (spec_.mode) {
    case PipelineMode::basic2:
        merge_ = std::make_unique<SubNetwork<T>>(spec_.merge, 6, 3, "net", slope);
        break;
    case PipelineMode::pipeline2:
        color_map_.push_back(std::make_unique<SubNetwork<T>>(spec_.color_map[0], 6, 3, "cm0", slope));
        merge_ = std::make_unique<SubNetwork<T>>(spec_.merge, 12, 3, "merge", slope);
        deghost_ = std::make_unique<SubNetwork<T>>(spec_.deghost, 6, 3, "deghost", slope);
        break;
    case PipelineMode::pipeline3:
        color_map_.push_back(std::make_unique<SubNetwork<T>>(spec_.color_map[0], 6, 3, "cm0", slope));
        color_map_.push_back(std::make_unique<SubNetwork<T>>(spec_.color_map[1], 6, 3, "cm1", slope));
        merge_ = std::make_unique<SubNetwork<T>>(spec_.merge, 18, 3, "merge", slope);
        deghost_ = std::make_unique<SubNetwork<T>>(spec_.deghost, 6, 3, "deghost", slope);
        break;
    }
}

template <typename T>
std::vector<ParamSlot<T>*> FusionPipeline<T>::slots() {
    std::vector<ParamSlot<T>*> out;
    for (auto& c : color_map_)
        for (auto* s : c->slots()) out.push_back(s);
    for (auto* s : merge_->slots()) out.push_back(s);
    if (deghost_)
        for (auto* s : deghost_->slots()) out.push_back(s);
    return out;
}

template <typename T>
std::vector<const ParamSlot<T>*> FusionPipeline<T>::slots() const {
    std::vector<const ParamSlot<T>*> out;
    for (const auto& c : color_map_)
        for (const auto* s : std::as_const(*c).slots()) out.push_back(s);
    for (const auto* s : std::as_const(*merge_).slots()) out.push_back(s);
    if (deghost_)
        for (const auto* s : std::as_const(*deghost_).slots()) out.push_back(s);
    return out;
}

template <typename T>
std::size_t FusionPipeline<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto* s : slots()) n += s->params.weights.size() + s->params.bias.size();
    return n;
}

template <typename T>
void FusionPipeline<T>::init(std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    for (ParamSlot<T>* s : slots()) {
        ConvParams<T>& p = s->params;
        double fan_in = static_cast<double>(p.in_channels) * p.kh * p.kw;
        if (s->kind == ParamSlot<T>::Kind::deconv) fan_in /= static_cast<double>(p.stride) * p.stride;
        const double bound = std::sqrt(6.0 / fan_in);
        for (T& w : p.weights) {
            const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
            w = static_cast<T>((2 * u - 1) * bound);
        }
        std::fill(p.bias.begin(), p.bias.end(), T(0));
        s->zero_grad();
    }
}

template <typename T>
StageIds FusionPipeline<T>::build(Graph<T>& g, const std::vector<int>& in, bool staged) const {
    require(static_cast<int>(in.size()) == input_image_count(spec_.mode),
            std::string("pipeline ") + to_string(spec_.mode) + " expects " +
                std::to_string(input_image_count(spec_.mode)) + " input images");
    const Tensor<T>& first = g.value(in[0]);
    for (int id : in)
        require(g.value(id).same_shape(first) && first.c == 3, "pipeline inputs must be RGB with equal dims");
    auto pass = [&](int id) { return staged ? g.detach(id) : id; };
    StageIds out;
    switch (spec_.mode) {
    case PipelineMode::basic2:
        out.final = merge_->build(g, g.concat({in[0], in[1]}));
        out.merged = out.final;
        break;
    case PipelineMode::pipeline2: {
        const int ref = in[0], nonref = in[1], ghost = in[2];
        const int cm_over = color_map_[0]->build(g, g.concat({ref, nonref}));
        out.cm = {cm_over};
        out.merged = merge_->build(g, g.concat({ref, pass(cm_over), nonref, ghost}));
        out.final = deghost_->build(g, g.concat({pass(out.merged), ghost}));
        break;
    }
    case PipelineMode::pipeline3: {
        const int ref = in[0], under = in[1], over = in[2], ghost = in[3];
        const int cm_under = color_map_[0]->build(g, g.concat({ref, under}));
        const int cm_over = color_map_[1]->build(g, g.concat({ref, over}));
        out.cm = {cm_under, cm_over};
        out.merged = merge_->build(g, g.concat({ref, pass(cm_under), pass(cm_over), under, over, ghost}));
        out.final = deghost_->build(g, g.concat({pass(out.merged), ghost}));
        break;
    }
    }
    return out;
}

template <typename T>
Tensor<T> to_tensor(const std::vector<const Image*>& batch) {
    require(!batch.empty(), "to_tensor: empty batch");
    const Image& f = *batch[0];
    Tensor<T> t(static_cast<int>(batch.size()), f.channels, f.height, f.width);
    for (int b = 0; b < t.n; ++b) {
        const Image& im = *batch[b];
        require(im.same_shape(f), "to_tensor: images in a batch must share shape");
        for (int c = 0; c < f.channels; ++c) {
            T* dst = t.values.data() + t.offset(b, c);
            for (std::size_t i = 0; i < im.pixel_count(); ++i) dst[i] = static_cast<T>(im.data[i * f.channels + c]);
        }
    }
    return t;
}

template <typename T>
Image to_image(const Tensor<T>& t, int b) {
    require(b >= 0 && b < t.n, "to_image: batch index out of range");
    Image im(t.w, t.h, t.c);
    for (int c = 0; c < t.c; ++c) {
        const T* src = t.values.data() + t.offset(b, c);
        for (std::size_t i = 0; i < im.pixel_count(); ++i) im.data[i * t.c + c] = static_cast<float>(src[i]);
    }
    return im;
}

template <typename T>
PipelineOutput FusionPipeline<T>::forward(const std::vector<Image>& inputs) const {
    require(static_cast<int>(inputs.size()) == input_image_count(spec_.mode), "forward: wrong number of inputs");
    for (const Image& im : inputs)
        require(im.same_shape(inputs[0]) && im.channels == 3, "forward: inputs must be RGB with equal dims");
    Graph<T> g;
    std::vector<int> ids;
    for (const Image& im : inputs) ids.push_back(g.input(to_tensor<T>({&im})));
    const StageIds s = build(g, ids);
    PipelineOutput out;
    for (int id : s.cm) out.cm_estimates.push_back(to_image(g.value(id)));
    out.merged_estimate = to_image(g.value(s.merged));
    out.final = to_image(g.value(s.final));
    return out;
}

template <typename T>
PipelineOutput FusionPipeline<T>::forward_pipeline2(const Image& ref, const Image& nonref, const Image& ghost) const {
    require(spec_.mode == PipelineMode::pipeline2, "forward_pipeline2 needs a pipeline2 network");
    return forward({ref, nonref, ghost});
}

template <typename T>
PipelineOutput FusionPipeline<T>::forward_pipeline3(const Image& ref, const Image& under, const Image& over,
                                                    const Image& ghost) const {
    require(spec_.mode == PipelineMode::pipeline3, "forward_pipeline3 needs a pipeline3 network");
    return forward({ref, under, over, ghost});
}

template class SubNetwork<float>;
template class SubNetwork<double>;
template class FusionPipeline<float>;
template class FusionPipeline<double>;
template Tensor<float> to_tensor<float>(const std::vector<const Image*>&);
template Tensor<double> to_tensor<double>(const std::vector<const Image*>&);
template Image to_image<float>(const Tensor<float>&, int);
template Image to_image<double>(const Tensor<double>&, int);

} // namespace expofuse
