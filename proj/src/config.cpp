#include "usis/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "usis/error.hpp"

namespace usis {

namespace {

// Reads optional fields from one JSON object and rejects unknown keys.
class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) {
            throw ParseError("config: '" + path_ + "' must be a mapping");
        }
    }

    template <typename T>
    void read(const char* key, T& out)
    {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ParseError("config: '" + path_ + "." + key + "' has the wrong type");
        }
    }

    Section sub(const char* key)
    {
        seen_.insert(key);
        return Section(j_.contains(key) ? j_.at(key) : empty(), path_ + "." + key);
    }

    void finish() const
    {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) {
                throw ParseError("config: unknown key '" + path_ + "." + k + "'");
            }
        }
    }

private:
    static const nlohmann::json& empty()
    {
        static const nlohmann::json e = nlohmann::json::object();
        return e;
    }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

nlohmann::json encoder_json(const EncoderConfig& c)
{
    return {{"image_size", c.image_size},
            {"in_channels", c.in_channels},
            {"depth", c.depth},
            {"dim", c.dim},
            {"patch", c.patch},
            {"heads", c.heads},
            {"mlp_ratio", c.mlp_ratio},
            {"replace_start", c.replace_start},
            {"replace_stride", c.replace_stride},
            {"adapter_bottleneck", c.adapter_bottleneck},
            {"channel_reduction", c.channel_reduction},
            {"neck_dim", c.neck_dim},
            {"adapter_activation", nn::to_string(c.adapter_activation)},
            {"channel_activation", nn::to_string(c.channel_activation)},
            {"backbone_seed", c.backbone_seed}};
}

void read_encoder(Section s, EncoderConfig& c)
{
    s.read("image_size", c.image_size);
    s.read("in_channels", c.in_channels);
    s.read("depth", c.depth);
    s.read("dim", c.dim);
    s.read("patch", c.patch);
    s.read("heads", c.heads);
    s.read("mlp_ratio", c.mlp_ratio);
    s.read("replace_start", c.replace_start);
    s.read("replace_stride", c.replace_stride);
    s.read("adapter_bottleneck", c.adapter_bottleneck);
    s.read("channel_reduction", c.channel_reduction);
    s.read("neck_dim", c.neck_dim);
    std::string a = nn::to_string(c.adapter_activation);
    std::string ca = nn::to_string(c.channel_activation);
    s.read("adapter_activation", a);
    s.read("channel_activation", ca);
    try {
        c.adapter_activation = nn::parse_activation(a);
        c.channel_activation = nn::parse_activation(ca);
    } catch (const std::invalid_argument& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    s.read("backbone_seed", c.backbone_seed);
    s.finish();
}

nlohmann::json sfpg_json(const SfpgConfig& c)
{
    return {{"lambda", c.lambda},
            {"in_channels", c.in_channels},
            {"fusion_channels", c.fusion_channels},
            {"channel_reduction", c.channel_reduction},
            {"kernels", c.kernels},
            {"prompt_tokens", c.prompt_tokens},
            {"prompt_dim", c.prompt_dim},
            {"roi_size", c.roi_size},
            {"prompt_hidden", c.prompt_hidden},
            {"canonical_size", c.canonical_size}};
}

void read_sfpg(Section s, SfpgConfig& c)
{
    s.read("lambda", c.lambda);
    s.read("in_channels", c.in_channels);
    s.read("fusion_channels", c.fusion_channels);
    s.read("channel_reduction", c.channel_reduction);
    s.read("kernels", c.kernels);
    s.read("prompt_tokens", c.prompt_tokens);
    s.read("prompt_dim", c.prompt_dim);
    s.read("roi_size", c.roi_size);
    s.read("prompt_hidden", c.prompt_hidden);
    s.read("canonical_size", c.canonical_size);
    s.finish();
}

nlohmann::json rpn_json(const RpnConfig& c)
{
    return {{"sizes", c.sizes},
            {"ratios", c.ratios},
            {"positive_iou", c.positive_iou},
            {"negative_iou", c.negative_iou},
            {"batch_per_image", c.batch_per_image},
            {"positive_fraction", c.positive_fraction},
            {"max_instances_per_image", c.max_instances_per_image},
            {"pre_nms_top", c.pre_nms_top},
            {"nms_iou", c.nms_iou},
            {"post_nms_top", c.post_nms_top},
            {"min_box_size", c.min_box_size}};
}

void read_rpn(Section s, RpnConfig& c)
{
    s.read("sizes", c.sizes);
    s.read("ratios", c.ratios);
    s.read("positive_iou", c.positive_iou);
    s.read("negative_iou", c.negative_iou);
    s.read("batch_per_image", c.batch_per_image);
    s.read("positive_fraction", c.positive_fraction);
    s.read("max_instances_per_image", c.max_instances_per_image);
    s.read("pre_nms_top", c.pre_nms_top);
    s.read("nms_iou", c.nms_iou);
    s.read("post_nms_top", c.post_nms_top);
    s.read("min_box_size", c.min_box_size);
    s.finish();
}

nlohmann::json decoder_json(const DecoderConfig& c)
{
    return {{"dim", c.dim},
            {"heads", c.heads},
            {"mlp_dim", c.mlp_dim},
            {"num_classes", c.num_classes},
            {"upscale_channels", c.upscale_channels}};
}

void read_decoder(Section s, DecoderConfig& c)
{
    s.read("dim", c.dim);
    s.read("heads", c.heads);
    s.read("mlp_dim", c.mlp_dim);
    s.read("num_classes", c.num_classes);
    s.read("upscale_channels", c.upscale_channels);
    s.finish();
}

void read_inference(Section s, InferenceConfig& c)
{
    s.read("score_threshold", c.score_threshold);
    s.read("max_detections", c.max_detections);
    s.read("mask_threshold", c.mask_threshold);
    s.finish();
}

void read_model(Section s, ModelConfig& c)
{
    read_encoder(s.sub("encoder"), c.encoder);
    read_sfpg(s.sub("sfpg"), c.sfpg);
    read_rpn(s.sub("rpn"), c.rpn);
    read_decoder(s.sub("decoder"), c.decoder);
    read_inference(s.sub("inference"), c.inference);
    s.read("seed", c.seed);
    s.finish();
}

void read_train(Section s, TrainConfig& c)
{
    s.read("epochs", c.epochs);
    s.read("learning_rate", c.learning_rate);
    s.read("weight_decay", c.weight_decay);
    s.read("batch_size", c.batch_size);
    s.read("optimizer", c.optimizer);
    s.read("beta1", c.beta1);
    s.read("beta2", c.beta2);
    s.read("eps", c.eps);
    s.read("max_steps", c.max_steps);
    s.read("shuffle", c.shuffle);
    s.read("seed", c.seed);
    s.finish();
}

void read_synth(Section s, SynthConfig& c)
{
    s.read("height", c.height);
    s.read("width", c.width);
    s.read("min_instances", c.min_instances);
    s.read("max_instances", c.max_instances);
    s.read("attenuation", c.attenuation);
    s.read("noise", c.noise);
    s.read("min_extent", c.min_extent);
    s.read("max_extent", c.max_extent);
    s.read("min_area", c.min_area);
    s.finish();
}

void read_data(Section s, DataConfig& c)
{
    s.read("synthetic_count", c.synthetic_count);
    read_synth(s.sub("synthetic"), c.synth);
    s.read("annotations", c.annotations);
    s.read("images", c.images);
    s.finish();
}

template <typename Fn>
void validated(Fn fn)
{
    try {
        fn();
    } catch (const std::invalid_argument& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
}

nlohmann::json scalar_json(const std::string& v)
{
    if (v == "true" || v == "True") {
        return true;
    }
    if (v == "false" || v == "False") {
        return false;
    }
    if (v.empty()) {
        return v;
    }
    std::size_t used = 0;
    try {
        const long long i = std::stoll(v, &used);
        if (used == v.size()) {
            return i;
        }
    } catch (const std::exception&) {
    }
    try {
        const double d = std::stod(v, &used);
        if (used == v.size()) {
            return d;
        }
    } catch (const std::exception&) {
    }
    return v;
}

nlohmann::json node_json(const YAML::Node& n)
{
    switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
        return nullptr;
    case YAML::NodeType::Scalar:
        // Quoted scalars stay strings.
        return n.Tag() == "!" ? nlohmann::json(n.Scalar()) : scalar_json(n.Scalar());
    case YAML::NodeType::Sequence: {
        auto out = nlohmann::json::array();
        for (const auto& e : n) {
            out.push_back(node_json(e));
        }
        return out;
    }
    case YAML::NodeType::Map: {
        auto out = nlohmann::json::object();
        for (const auto& kv : n) {
            out[kv.first.as<std::string>()] = node_json(kv.second);
        }
        return out;
    }
    }
    return nullptr;
}

} // namespace

void RunConfig::apply_seed(std::uint64_t s)
{
    seed = s;
    model.seed = s;
    train.seed = s;
}

nlohmann::json model_config_to_json(const ModelConfig& c)
{
    return {{"encoder", encoder_json(c.encoder)},
            {"sfpg", sfpg_json(c.sfpg)},
            {"rpn", rpn_json(c.rpn)},
            {"decoder", decoder_json(c.decoder)},
            {"inference",
             {{"score_threshold", c.inference.score_threshold},
              {"max_detections", c.inference.max_detections},
              {"mask_threshold", c.inference.mask_threshold}}},
            {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j)
{
    ModelConfig c;
    read_model(Section(j, "model"), c);
    validated([&] { c.validate(); });
    return c;
}

nlohmann::json run_config_to_json(const RunConfig& c)
{
    const auto& s = c.data.synth;
    return {{"seed", c.seed},
            {"model", model_config_to_json(c.model)},
            {"train",
             {{"epochs", c.train.epochs},
              {"learning_rate", c.train.learning_rate},
              {"weight_decay", c.train.weight_decay},
              {"batch_size", c.train.batch_size},
              {"optimizer", c.train.optimizer},
              {"beta1", c.train.beta1},
              {"beta2", c.train.beta2},
              {"eps", c.train.eps},
              {"max_steps", c.train.max_steps},
              {"shuffle", c.train.shuffle},
              {"seed", c.train.seed}}},
            {"data",
             {{"synthetic_count", c.data.synthetic_count},
              {"synthetic",
               {{"height", s.height},
                {"width", s.width},
                {"min_instances", s.min_instances},
                {"max_instances", s.max_instances},
                {"attenuation", s.attenuation},
                {"noise", s.noise},
                {"min_extent", s.min_extent},
                {"max_extent", s.max_extent},
                {"min_area", s.min_area}}},
              {"annotations", c.data.annotations},
              {"images", c.data.images}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j)
{
    RunConfig c;
    const auto doc = j.is_null() ? nlohmann::json::object() : j;
    Section root(doc, "config");
    std::uint64_t seed = 0;
    root.read("seed", seed);
    c.apply_seed(seed);
    // Section-level seeds, when present, override the run seed.
    read_model(root.sub("model"), c.model);
    read_train(root.sub("train"), c.train);
    read_data(root.sub("data"), c.data);
    root.finish();
    validated([&] {
        c.model.validate();
        c.train.validate();
        c.data.synth.validate();
        if (c.data.synthetic_count < 1) {
            throw std::invalid_argument("data.synthetic_count must be >= 1");
        }
    });
    return c;
}

nlohmann::json yaml_to_json(const std::string& text)
{
    try {
        return node_json(YAML::Load(text));
    } catch (const YAML::Exception& e) {
        throw ParseError(std::string("config: malformed YAML: ") + e.what());
    }
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read config " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return run_config_from_json(yaml_to_json(ss.str()));
}

std::uint64_t backbone_config_hash(const EncoderConfig& c)
{
    const auto j = encoder_json(c);
    // Adapter-only fields do not change the frozen weights.
    nlohmann::json frozen;
    for (const char* k : {"image_size", "in_channels", "depth", "dim", "patch", "heads", "mlp_ratio", "neck_dim",
                          "backbone_seed"}) {
        frozen[k] = j[k];
    }
    const auto text = frozen.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h = (h ^ ch) * 0x100000001b3ULL;
    }
    return h;
}

} // namespace usis
