#pragma once

#include "expofuse/graph.hpp"
#include "expofuse/image.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace expofuse {

enum class LinkTopology { simple, dense };

// One FlowNet-style contractive/refinement network.
struct SubNetworkSpec {
    int depth = 3;
    int filters = 16;
    int kernel = 4;
    int stride = 2;
    // Stride-1 3x3 convolutions after each contractive level; the last entry
    // is the lowest-resolution level. Empty means none.
    std::vector<int> extra_convs;
    // Same after each refinement level above full resolution (depth - 1 entries).
    std::vector<int> refine_extra_convs;
    LinkTopology links = LinkTopology::dense;

    friend bool operator==(const SubNetworkSpec&, const SubNetworkSpec&) = default;
};

enum class PipelineMode { basic2, pipeline2, pipeline3 };

const char* to_string(PipelineMode m);
PipelineMode parse_pipeline_mode(const std::string& s);

// basic2 runs a single network held in the merge slot on ref + nonref.
struct PipelineSpec {
    PipelineMode mode = PipelineMode::pipeline2;
    std::vector<SubNetworkSpec> color_map;
    SubNetworkSpec merge;
    SubNetworkSpec deghost;
    double leaky_slope = 0.1;

    friend bool operator==(const PipelineSpec&, const PipelineSpec&) = default;
};

SubNetworkSpec flownet_baseline_spec();      // 3+3 levels, 16 filters, simple links
PipelineSpec default_pipeline_spec(PipelineMode mode);
// {2, 2, ..., bottom} contractive and {2, ...} refinement schedule.
SubNetworkSpec with_extra_convs(SubNetworkSpec s, int per_level, int bottom);

// Throws ContractViolation describing the first inconsistency.
void validate(const PipelineSpec& spec);
void validate(const SubNetworkSpec& spec);

// Number of RGB images the pipeline consumes (ghost-fused included).
int input_image_count(PipelineMode mode);
int merge_input_channels(PipelineMode mode);

// Per-layer input channel bookkeeping, checked at construction.
struct LayerAccount {
    std::string layer;
    int in_channels = 0;
    int expected = 0;
};

template <typename T>
class SubNetwork {
public:
    SubNetwork(const SubNetworkSpec& spec, int in_channels, int out_channels, std::string name, T leaky_slope);

    // Appends the forward ops to g; returns the output id.
    int build(Graph<T>& g, int input) const;

    const SubNetworkSpec& spec() const noexcept { return spec_; }
    const std::string& name() const noexcept { return name_; }
    int in_channels() const noexcept { return in_channels_; }
    int out_channels() const noexcept { return out_channels_; }
    const std::vector<LayerAccount>& channel_accounting() const noexcept { return accounting_; }
    // Spatial dims of every resolution level for an input of (h, w).
    std::vector<std::pair<int, int>> level_dims(int h, int w) const;

    std::vector<ParamSlot<T>*> slots();
    std::vector<const ParamSlot<T>*> slots() const;

private:
    struct Node {
        int res;
        int channels;
    };
    struct Link {
        int node;
        int res;
        ParamSlot<T>* slot;
    };

    ParamSlot<T>& add_slot(const std::string& name, typename ParamSlot<T>::Kind kind, int in, int out, int k,
                           int s, int pad);
    ParamSlot<T>* link_slot(int node, int res) const;
    int gather(Graph<T>& g, const std::vector<int>& ids, int upto, int res,
               const std::vector<std::pair<int, int>>& dims, std::vector<std::vector<int>>& cache) const;

    SubNetworkSpec spec_;
    std::string name_;
    int in_channels_;
    int out_channels_;
    T slope_;
    std::vector<std::unique_ptr<ParamSlot<T>>> owned_;
    std::vector<Node> nodes_; // creation order: input, encoders, decoders
    std::vector<Link> links_;
    std::vector<ParamSlot<T>*> enc_, dec_, final_;
    std::vector<std::vector<ParamSlot<T>*>> enc_extra_, dec_extra_;
    std::vector<LayerAccount> accounting_;
};

struct PipelineOutput {
    std::vector<Image> cm_estimates; // pipeline2: {over}; pipeline3: {under, over}
    Image merged_estimate;
    Image final;
};

// Output ids of one pipeline forward pass recorded into a Graph.
struct StageIds {
    std::vector<int> cm;
    int merged = -1;
    int final = -1;
};

template <typename T>
class FusionPipeline {
public:
    explicit FusionPipeline(PipelineSpec spec);

    const PipelineSpec& spec() const noexcept { return spec_; }

    // Fan-in scaled uniform weights, zero bias, deterministic in seed.
    void init(std::uint64_t seed);

    // inputs: basic2 {ref, nonref}; pipeline2 {ref, nonref, ghost};
    // pipeline3 {ref, under, over, ghost}. staged=true stops gradients
    // flowing between stages.
    StageIds build(Graph<T>& g, const std::vector<int>& inputs, bool staged = false) const;

    PipelineOutput forward_pipeline2(const Image& ref, const Image& nonref, const Image& ghost) const;
    PipelineOutput forward_pipeline3(const Image& ref, const Image& under, const Image& over,
                                     const Image& ghost) const;
    // Dispatches on mode with images ordered as for build().
    PipelineOutput forward(const std::vector<Image>& inputs) const;

    std::vector<ParamSlot<T>*> slots();
    std::vector<const ParamSlot<T>*> slots() const;
    std::size_t parameter_count() const;

    const std::vector<std::unique_ptr<SubNetwork<T>>>& color_map() const noexcept { return color_map_; }
    const SubNetwork<T>& merge() const noexcept { return *merge_; }
    const SubNetwork<T>* deghost() const noexcept { return deghost_.get(); }

private:
    PipelineSpec spec_;
    std::vector<std::unique_ptr<SubNetwork<T>>> color_map_;
    std::unique_ptr<SubNetwork<T>> merge_;
    std::unique_ptr<SubNetwork<T>> deghost_;
};

template <typename T>
Tensor<T> to_tensor(const std::vector<const Image*>& batch);
// Batch item b of a 1- or 3-channel tensor.
template <typename T>
Image to_image(const Tensor<T>& t, int b = 0);

// Checkpoint: "LEFN", u32 version, u32 length + spec JSON, u32 count, then per
// tensor: u32 name length, name, u32 rank, u32 dims, raw f32 values. Little endian.
void save_params(const FusionPipeline<float>& net, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_params(const FusionPipeline<float>& net);
// Builds a pipeline from the spec embedded in the file.
FusionPipeline<float> load_pipeline(const std::filesystem::path& path);
// Loads into an existing pipeline; CompatibilityError if the specs differ.
void load_params(FusionPipeline<float>& net, const std::filesystem::path& path);

std::string spec_to_json(const PipelineSpec& spec);
PipelineSpec spec_from_json(const std::string& text);
// Dotted path of the first differing field, empty when equal.
std::string first_difference(const PipelineSpec& a, const PipelineSpec& b);

} // namespace expofuse
