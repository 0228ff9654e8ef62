#include "expofuse/errors.hpp"
#include "expofuse/net.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <iterator>

namespace expofuse {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'L', 'E', 'F', 'N'};
constexpr std::uint32_t kVersion = 1;

json sub_to_json(const SubNetworkSpec& s) {
    return {{"depth", s.depth},
            {"filters", s.filters},
            {"kernel", s.kernel},
            {"stride", s.stride},
            {"extra_convs", s.extra_convs},
            {"refine_extra_convs", s.refine_extra_convs},
            {"links", s.links == LinkTopology::dense ? "dense" : "simple"}};
}

SubNetworkSpec sub_from_json(const json& j) {
    SubNetworkSpec s;
    s.depth = j.at("depth").get<int>();
    s.filters = j.at("filters").get<int>();
    s.kernel = j.value("kernel", 4);
    s.stride = j.value("stride", 2);
    s.extra_convs = j.value("extra_convs", std::vector<int>{});
    s.refine_extra_convs = j.value("refine_extra_convs", std::vector<int>{});
    const std::string links = j.value("links", std::string("dense"));
    if (links != "dense" && links != "simple") throw FormatError("unknown link topology '" + links + "'");
    s.links = links == "dense" ? LinkTopology::dense : LinkTopology::simple;
    return s;
}

json spec_json(const PipelineSpec& p) {
    json cm = json::array();
    for (const auto& c : p.color_map) cm.push_back(sub_to_json(c));
    json j = {{"mode", to_string(p.mode)}, {"leaky_slope", p.leaky_slope}, {"color_map", cm}, {"merge", sub_to_json(p.merge)}};
    if (p.mode != PipelineMode::basic2) j["deghost"] = sub_to_json(p.deghost);
    return j;
}

std::string diff(const json& a, const json& b, const std::string& path) {
    if (a.type() != b.type()) return path.empty() ? "<root>" : path;
    if (a.is_object()) {
        for (auto it = a.begin(); it != a.end(); ++it) {
            const std::string sub = path.empty() ? it.key() : path + "." + it.key();
            if (!b.contains(it.key())) return sub;
            if (auto d = diff(it.value(), b.at(it.key()), sub); !d.empty()) return d;
        }
        for (auto it = b.begin(); it != b.end(); ++it)
            if (!a.contains(it.key())) return path.empty() ? it.key() : path + "." + it.key();
        return {};
    }
    if (a.is_array()) {
        if (a.size() != b.size()) return path;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (auto d = diff(a[i], b[i], path + "[" + std::to_string(i) + "]"); !d.empty()) return d;
        return {};
    }
    return a == b ? std::string{} : path;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

class Reader {
public:
    explicit Reader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() {
        const std::uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(bytes_.begin() + static_cast<long>(pos_), bytes_.begin() + static_cast<long>(pos_ + n));
        pos_ += n;
        return s;
    }
    const std::uint8_t* raw(std::size_t n) {
        need(n);
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::vector<std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

PipelineSpec read_header(Reader& r) {
    const std::uint8_t* magic = r.raw(4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    return spec_from_json(r.str());
}

void read_tensors(Reader& r, FusionPipeline<float>& net) {
    auto slots = net.slots();
    const std::uint32_t count = r.u32();
    if (count != slots.size() * 2) throw FormatError("checkpoint tensor count does not match the network");
    for (ParamSlot<float>* s : slots) {
        for (int part = 0; part < 2; ++part) {
            std::vector<float>& dst = part == 0 ? s->params.weights : s->params.bias;
            const std::string expected = s->name + (part == 0 ? ".w" : ".b");
            const std::string name = r.str();
            if (name != expected) throw FormatError("checkpoint tensor '" + name + "' where '" + expected + "' expected");
            const std::uint32_t rank = r.u32();
            std::size_t n = 1;
            for (std::uint32_t d = 0; d < rank; ++d) n *= r.u32();
            if (n != dst.size()) throw FormatError("checkpoint tensor '" + name + "' has the wrong size");
            for (float& v : dst) v = r.f32();
        }
        s->zero_grad();
    }
    if (!r.done()) throw FormatError("trailing bytes after checkpoint tensors");
}

} // namespace

std::string spec_to_json(const PipelineSpec& spec) { return spec_json(spec).dump(); }

PipelineSpec spec_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        PipelineSpec p;
        p.mode = parse_pipeline_mode(j.at("mode").get<std::string>());
        p.leaky_slope = j.value("leaky_slope", 0.1);
        for (const json& c : j.value("color_map", json::array())) p.color_map.push_back(sub_from_json(c));
        p.merge = sub_from_json(j.at("merge"));
        if (j.contains("deghost")) p.deghost = sub_from_json(j.at("deghost"));
        return p;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad network spec: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("bad network spec: ") + e.what());
    }
}

std::string first_difference(const PipelineSpec& a, const PipelineSpec& b) {
    return diff(spec_json(a), spec_json(b), "");
}

std::vector<std::uint8_t> serialize_params(const FusionPipeline<float>& net) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_str(out, spec_to_json(net.spec()));
    const auto slots = net.slots();
    put_u32(out, static_cast<std::uint32_t>(slots.size() * 2));
    for (const ParamSlot<float>* s : slots) {
        const ConvParams<float>& p = s->params;
        put_str(out, s->name + ".w");
        put_u32(out, 4);
        if (s->kind == ParamSlot<float>::Kind::conv) {
            for (int d : {p.out_channels, p.in_channels, p.kh, p.kw}) put_u32(out, static_cast<std::uint32_t>(d));
        } else {
            for (int d : {p.in_channels, p.out_channels, p.kh, p.kw}) put_u32(out, static_cast<std::uint32_t>(d));
        }
        for (float v : p.weights) put_f32(out, v);
        put_str(out, s->name + ".b");
        put_u32(out, 1);
        put_u32(out, static_cast<std::uint32_t>(p.bias.size()));
        for (float v : p.bias) put_f32(out, v);
    }
    return out;
}

void save_params(const FusionPipeline<float>& net, const std::filesystem::path& path) {
    const auto bytes = serialize_params(net);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

FusionPipeline<float> load_pipeline(const std::filesystem::path& path) {
    Reader r(read_file(path));
    const PipelineSpec spec = read_header(r);
    FusionPipeline<float> net(spec);
    read_tensors(r, net);
    return net;
}

void load_params(FusionPipeline<float>& net, const std::filesystem::path& path) {
    Reader r(read_file(path));
    const PipelineSpec spec = read_header(r);
    if (const std::string d = first_difference(net.spec(), spec); !d.empty()) throw CompatibilityError(d);
    read_tensors(r, net);
}

} // namespace expofuse
