#include "usis/model.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>

#include "usis/error.hpp"

namespace usis {

void ModelConfig::validate() const
{
    encoder.validate();
    sfpg.validate();
    rpn.validate();
    decoder.validate();
    auto need = [](bool ok, const std::string& what) {
        if (!ok) {
            throw std::invalid_argument("model config: " + what);
        }
    };
    need(sfpg.in_channels == encoder.dim, "sfpg in_channels must equal the encoder dim");
    need(sfpg.prompt_dim == decoder.dim, "prompt dim must equal the decoder dim");
    need(encoder.neck_dim == decoder.dim, "encoder neck dim must equal the decoder dim");
    need(rpn.sizes.size() == 3, "the pyramid has three levels, so three anchor size groups are needed");
    need(!plan_replacement(encoder).empty(), "at least one encoder block must be replaced");
    need(inference.max_detections > 0, "max detections must be positive");
    need(inference.mask_threshold > 0.0 && inference.mask_threshold < 1.0, "mask threshold must lie in (0, 1)");
}

UsisSam::UsisSam(const ModelConfig& cfg) : cfg_(cfg)
{
    cfg.validate();
    Rng rng(cfg.seed);
    encoder = Encoder::build(cfg.encoder, rng);
    sfpg = Sfpg::build(cfg.sfpg, static_cast<int>(encoder.replaced.size()), rng);
    rpn = RpnHead::build(cfg.sfpg.fusion_channels, cfg.rpn.anchors_per_cell(), rng);
    decoder = MaskDecoder::build(cfg.decoder, rng);
    const int g = cfg.encoder.grid();
    anchors = generate_anchors(cfg.rpn, {g, 2 * g, 4 * g}, cfg.encoder.image_size);
}

nn::ParamList UsisSam::parameters() const
{
    nn::ParamList out;
    encoder.collect(out);
    sfpg.collect(out);
    rpn.collect(out);
    decoder.collect(out);
    return out;
}

nn::ParamList UsisSam::trainable_parameters() const
{
    nn::ParamList out;
    for (auto& p : parameters()) {
        if (p.tensor.requires_grad()) {
            out.push_back(std::move(p));
        }
    }
    return out;
}

Tensor pixels_tensor(const RgbImage& image)
{
    const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
    std::vector<double> v(3 * plane);
    for (int r = 0; r < image.height; ++r) {
        for (int c = 0; c < image.width; ++c) {
            for (int ch = 0; ch < 3; ++ch) {
                v[ch * plane + static_cast<std::size_t>(r) * image.width + c] = image.at(r, c, ch);
            }
        }
    }
    return Tensor::from_vector({1, 3, image.height, image.width}, std::move(v));
}

std::vector<TrainSample> prepare_samples(const UsisSam& model, const Dataset& d, std::span<const RgbImage> images)
{
    if (images.size() != d.images.size()) {
        throw ShapeError("prepare_samples: images do not match the dataset");
    }
    const int size = model.config().encoder.image_size;
    const int classes = model.config().decoder.num_classes;
    NoGradGuard no_grad;
    std::vector<TrainSample> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& rec = d.images[i];
        if (images[i].height != size || images[i].width != size) {
            continue;
        }
        TrainSample s;
        s.pixels = pixels_tensor(images[i]);
        for (const auto* ann : d.annotations_for(rec.id)) {
            if (ann->category_id < 1 || ann->category_id > classes) {
                throw IntegrityError("category " + std::to_string(ann->category_id) + " outside the model's classes");
            }
            auto mask = ann->segmentation.rasterize(rec.height, rec.width);
            if (mask.area() == 0) {
                continue;
            }
            s.boxes.push_back(bbox_from_mask(mask));
            s.labels.push_back(ann->category_id);
            s.masks.push_back(std::move(mask));
        }
        s.prefix = encoder_prefix(s.pixels, model.encoder);
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

std::vector<double> pool_mask(const BinaryMask& m, int side)
{
    const int fy = m.height() / side;
    const int fx = m.width() / side;
    if (fy < 1 || fx < 1 || fy * side != m.height() || fx * side != m.width()) {
        throw ShapeError("mask target: image size is not a multiple of the mask grid");
    }
    std::vector<double> out(static_cast<std::size_t>(side) * side, 0.0);
    const double inv = 1.0 / (fy * fx);
    for (int r = 0; r < m.height(); ++r) {
        for (int c = 0; c < m.width(); ++c) {
            if (m.at(r, c)) {
                out[static_cast<std::size_t>(r / fy) * side + c / fx] += inv;
            }
        }
    }
    return out;
}

struct ImageForward {
    EncoderOutput enc;
    FeaturePyramid pyramid;
    RpnOutput rpn;
};

ImageForward forward_features(const UsisSam& model, const Tensor& prefix)
{
    ImageForward f;
    f.enc = encoder_suffix(prefix, model.encoder);
    f.pyramid = sfpg_features(f.enc.captured, model.sfpg);
    f.rpn = rpn_forward(f.pyramid.levels, 0, model.rpn);
    return f;
}

} // namespace

LossBreakdown batch_loss(const UsisSam& model, std::span<const TrainSample> batch, Rng& rng)
{
    const auto& cfg = model.config();
    const int size = cfg.encoder.image_size;
    const auto& anchors = model.anchors;
    LossInputs in;
    std::vector<Tensor> obj;
    std::vector<Tensor> del;
    std::vector<Tensor> cls;
    std::vector<Tensor> box;
    std::vector<Tensor> msk;
    for (const auto& s : batch) {
        Tensor prefix = s.prefix;
        if (!prefix.defined()) {
            NoGradGuard no_grad;
            prefix = encoder_prefix(s.pixels, model.encoder);
        }
        const auto f = forward_features(model, prefix);
        obj.push_back(f.rpn.objectness);
        del.push_back(f.rpn.deltas);

        const auto a = assign_anchors(anchors, s.boxes, cfg.rpn, rng);
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            const int label = a.sampled[i] ? a.label[i] : -1;
            in.rpn_labels.push_back(label);
            if (label == 1) {
                const auto t = encode_box(anchors[i], s.boxes[a.matched_gt[i]]);
                in.rpn_delta_targets.insert(in.rpn_delta_targets.end(), t.begin(), t.end());
            } else {
                in.rpn_delta_targets.insert(in.rpn_delta_targets.end(), 4, 0.0);
            }
        }

        auto positives = a.sampled_positives();
        const auto cap = static_cast<std::size_t>(cfg.rpn.max_instances_per_image);
        if (positives.size() > cap) {
            rng.shuffle(positives.begin(), positives.end());
            positives.resize(cap);
            std::sort(positives.begin(), positives.end());
        }
        if (positives.empty()) {
            continue;
        }
        // Instance terms are per salient anchor: the anchor box itself is the
        // prompt region and the regression reference.
        std::vector<Box> proposals;
        for (auto i : positives) {
            proposals.push_back(anchors[i]);
        }
        const auto prompts = generate_prompts(f.pyramid, 0, proposals, size, model.sfpg);
        const auto dec = decoder_forward(f.enc.final, prompts, model.decoder);
        cls.push_back(dec.cls_logits);
        box.push_back(dec.box_deltas);
        msk.push_back(dec.mask_logits);
        for (std::size_t j = 0; j < positives.size(); ++j) {
            const int g = a.matched_gt[positives[j]];
            in.indicator.push_back(1);
            in.cls_targets.push_back(s.labels[g]);
            const auto t = encode_box(proposals[j], s.boxes[g]);
            in.box_targets.insert(in.box_targets.end(), t.begin(), t.end());
            const auto m = pool_mask(s.masks[g], dec.mask_size);
            in.mask_targets.insert(in.mask_targets.end(), m.begin(), m.end());
        }
    }
    if (obj.empty()) {
        throw AlignmentError("batch_loss: empty batch");
    }
    in.rpn_objectness = obj.size() == 1 ? obj.front() : ops::concat_rows(obj);
    in.rpn_deltas = del.size() == 1 ? del.front() : ops::concat_rows(del);
    if (!cls.empty()) {
        in.cls_logits = cls.size() == 1 ? cls.front() : ops::concat_rows(cls);
        in.box_deltas = box.size() == 1 ? box.front() : ops::concat_rows(box);
        in.mask_logits = msk.size() == 1 ? msk.front() : ops::concat_rows(msk);
    }
    return compute_loss(in);
}

BinaryMask logits_to_mask(std::span<const double> logits, int side, int height, int width, double probability)
{
    if (static_cast<std::size_t>(side) * side != logits.size()) {
        throw ShapeError("logits_to_mask: logit count does not match the grid side");
    }
    const double cut = std::log(probability / (1.0 - probability));
    BinaryMask m(height, width);
    const double sy = static_cast<double>(side) / height;
    const double sx = static_cast<double>(side) / width;
    for (int r = 0; r < height; ++r) {
        const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, side - 1.0);
        const int y0 = static_cast<int>(y);
        const int y1 = std::min(y0 + 1, side - 1);
        const double ly = y - y0;
        for (int c = 0; c < width; ++c) {
            const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, side - 1.0);
            const int x0 = static_cast<int>(x);
            const int x1 = std::min(x0 + 1, side - 1);
            const double lx = x - x0;
            const auto at = [&](int yy, int xx) { return logits[static_cast<std::size_t>(yy) * side + xx]; };
            const double v = (1 - ly) * ((1 - lx) * at(y0, x0) + lx * at(y0, x1)) +
                             ly * ((1 - lx) * at(y1, x0) + lx * at(y1, x1));
            if (v > cut) {
                m.set(r, c, true);
            }
        }
    }
    return m;
}

std::vector<Detection> infer_image(const UsisSam& model, const RgbImage& image)
{
    const auto& cfg = model.config();
    const int size = cfg.encoder.image_size;
    if (image.height != size || image.width != size) {
        throw ShapeError("inference: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         ", model expects " + std::to_string(size) + "x" + std::to_string(size));
    }
    NoGradGuard no_grad;
    const auto f = forward_features(model, encoder_prefix(pixels_tensor(image), model.encoder));
    const auto ov = f.rpn.objectness.values();
    const auto dv = f.rpn.deltas.values();
    std::vector<std::int64_t> order(ov.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return ov[i] > ov[j]; });
    if (order.size() > static_cast<std::size_t>(cfg.rpn.pre_nms_top)) {
        order.resize(static_cast<std::size_t>(cfg.rpn.pre_nms_top));
    }
    std::vector<Box> boxes;
    std::vector<double> objectness;
    for (auto i : order) {
        const auto b = clip_box(decode_box(model.anchors[i], dv.subspan(static_cast<std::size_t>(i) * 4, 4)), size);
        if (b.width() < cfg.rpn.min_box_size || b.height() < cfg.rpn.min_box_size) {
            continue;
        }
        boxes.push_back(b);
        objectness.push_back(1.0 / (1.0 + std::exp(-ov[i])));
    }
    auto keep = nms(boxes, objectness, cfg.rpn.nms_iou);
    if (keep.size() > static_cast<std::size_t>(cfg.rpn.post_nms_top)) {
        keep.resize(static_cast<std::size_t>(cfg.rpn.post_nms_top));
    }
    if (keep.empty()) {
        return {};
    }
    std::vector<Box> proposals;
    for (auto k : keep) {
        proposals.push_back(boxes[k]);
    }
    const auto prompts = generate_prompts(f.pyramid, 0, proposals, size, model.sfpg);
    const auto dec = decoder_forward(f.enc.final, prompts, model.decoder);
    const auto probs = ops::softmax_lastdim(dec.cls_logits);
    const auto pv = probs.values();
    const auto mv = dec.mask_logits.values();
    const auto k = probs.dim(1);
    const auto pixels = static_cast<std::size_t>(dec.mask_size) * dec.mask_size;

    std::vector<Detection> out;
    for (std::size_t p = 0; p < keep.size(); ++p) {
        int best = 1;
        for (int c = 2; c < k; ++c) {
            if (pv[p * k + c] > pv[p * k + best]) {
                best = c;
            }
        }
        const double score = objectness[keep[p]] * pv[p * k + best];
        if (!(score > cfg.inference.score_threshold)) {
            continue;
        }
        Detection d;
        d.mask = logits_to_mask(mv.subspan(p * pixels, pixels), dec.mask_size, size, size,
                                cfg.inference.mask_threshold);
        d.score = score;
        d.category_id = best;
        out.push_back(std::move(d));
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    if (out.size() > static_cast<std::size_t>(cfg.inference.max_detections)) {
        out.resize(static_cast<std::size_t>(cfg.inference.max_detections));
    }
    return out;
}

std::vector<std::vector<Detection>> model_forward(const UsisSam& model, std::span<const RgbImage> images)
{
    const auto n = static_cast<std::int64_t>(images.size());
    std::vector<std::vector<Detection>> out(images.size());
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < n; ++i) {
        try {
            out[i] = infer_image(model, images[i]);
        } catch (...) {
#pragma omp critical(usis_model_forward)
            if (!failure) {
                failure = std::current_exception();
            }
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    return out;
}

EvalResult evaluate(const UsisSam& model, const Dataset& d, std::span<const RgbImage> images, EvalMode mode)
{
    if (images.size() != d.images.size()) {
        throw ShapeError("evaluate: images do not match the dataset");
    }
    auto evals = ground_truth_images(d);
    auto dets = model_forward(model, images);
    for (std::size_t i = 0; i < evals.size(); ++i) {
        evals[i].detections = std::move(dets[i]);
    }
    return summarize(evals, mode);
}

} // namespace usis
