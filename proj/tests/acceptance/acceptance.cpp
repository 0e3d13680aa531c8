// Acceptance run: one PASS/FAIL line per criterion, with the measured
// numbers. Exit status is non-zero when a criterion fails, except for
// criteria listed in kKnownConflicts (an expected value that contradicts the
// formula it illustrates); --strict counts those too.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "usis/config.hpp"
#include "usis/datakit.hpp"
#include "usis/evalkit.hpp"
#include "usis/kernels.hpp"
#include "usis/loss.hpp"
#include "usis/model.hpp"
#include "usis/sfpg.hpp"
#include "usis/stats.hpp"
#include "usis/train.hpp"
#include "usis/uavit.hpp"

using namespace usis;
using Clock = std::chrono::steady_clock;

namespace {

const std::set<int> kKnownConflicts{4};

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what)
    {
        pass = pass && ok;
        notes.push_back(std::string(ok ? "ok: " : "FAILED: ") + what);
    }
};

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor random_pixels(Rng& rng, int size)
{
    std::vector<double> v(static_cast<std::size_t>(3 * size * size));
    for (auto& x : v) x = rng.uniform(0.0, 255.0);
    return Tensor::from_vector({1, 3, size, size}, std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
    return m;
}

// 1. Adapters start at zero, so the encoder equals its frozen backbone.
Outcome zero_init_identity()
{
    Outcome o;
    const auto t0 = Clock::now();
    Rng arng(0);
    const auto enc = Encoder::build(EncoderConfig{}, arng);
    Rng rng(1);
    double worst = 0.0;
    NoGradGuard no_grad;
    for (int i = 0; i < 10; ++i) {
        const auto x = random_pixels(rng, enc.cfg.image_size);
        const auto a = encoder_forward(x, enc, true);
        const auto b = encoder_forward(x, enc, false);
        worst = std::max(worst, max_abs_diff(a.final, b.final));
        for (std::size_t k = 0; k < a.captured.size(); ++k) {
            worst = std::max(worst, max_abs_diff(a.captured[k], b.captured[k]));
        }
    }
    const double secs = seconds_since(t0);
    o.check(worst < 1e-6, "max |adapted - backbone| = " + fmt("%.3g", worst) + " over 10 inputs");
    o.check(secs < 30.0, "runtime " + fmt("%.1f", secs) + " s < 30 s");
    return o;
}

// 2. Central finite differences on each module, three shapes apiece.
Outcome gradient_suite()
{
    Outcome o;
    const auto t0 = Clock::now();
    Rng rng(2);
    auto record = [&](const std::string& name, const std::vector<double>& errs) {
        double worst = 0;
        for (double e : errs) worst = std::max(worst, e);
        o.check(errs.size() >= 3 && worst < 1e-4,
                name + ": worst relative error " + fmt("%.2e", worst) + " over " + std::to_string(errs.size()) +
                    " shapes");
    };

    std::vector<double> errs;
    for (auto [dim, r, b, t] : {std::tuple{8, 2, 1, 3}, std::tuple{12, 3, 2, 4}, std::tuple{16, 4, 2, 5}}) {
        auto p = make_adapter(rng, dim, r, nn::Activation::Gelu);
        oracle::randomize({p.up.weight, p.up.bias}, rng);
        auto f = oracle::random_tensor(rng, {b, t, dim});
        errs.push_back(oracle::gradient_error([&] { return oracle::probe_loss(adapter_forward(f, p), 1); },
                                              {f, p.down.weight, p.down.bias, p.up.weight, p.up.bias}));
    }
    record("adapter", errs);

    errs.clear();
    for (auto s : {Shape{1, 4, 3, 3}, Shape{2, 8, 2, 3}, Shape{1, 12, 4, 4}}) {
        auto p = make_channel_adapter(rng, static_cast<int>(s[1]), 4, nn::Activation::Relu);
        oracle::randomize({p.up.weight}, rng);
        // Shift the pre-activation away from the relu kink.
        for (auto& v : p.down.bias.mutable_values()) v = 0.5;
        auto f = oracle::random_tensor(rng, s);
        errs.push_back(oracle::gradient_error([&] { return oracle::probe_loss(channel_adapter_forward(f, p), 2); },
                                              {f, p.down.weight, p.down.bias, p.up.weight, p.up.bias}));
    }
    record("channel adapter", errs);

    errs.clear();
    for (auto s : {Shape{1, 4, 3, 3}, Shape{2, 4, 4, 3}, Shape{1, 8, 5, 5}}) {
        SfpgConfig cfg;
        cfg.in_channels = static_cast<int>(s[1]);
        cfg.fusion_channels = 3;
        cfg.channel_reduction = 2;
        auto p = make_sffm(rng, cfg);
        oracle::randomize({p.channel.up.weight}, rng);
        for (auto& v : p.channel.down.bias.mutable_values()) v = 0.5;
        auto f = oracle::random_tensor(rng, s);
        std::vector<Tensor> wrt{f, p.channel.down.weight, p.channel.up.weight};
        for (const auto& c : p.convs) {
            wrt.push_back(c.weight);
            wrt.push_back(c.bias);
        }
        errs.push_back(
            oracle::gradient_error([&] { return oracle::probe_loss(sffm_scale_fusion(f, p), 3); }, wrt));
    }
    record("scale fusion", errs);

    errs.clear();
    for (auto s : {Shape{1, 1, 2, 2}, Shape{2, 3, 4, 3}, Shape{1, 5, 6, 6}}) {
        auto f = oracle::random_tensor(rng, s);
        errs.push_back(oracle::gradient_error([&] { return oracle::probe_loss(noise_balance(f, 0.8), 4); }, {f}));
    }
    record("noise balance", errs);

    errs.clear();
    for (auto s : {Shape{1, 2, 3, 3}, Shape{2, 3, 4, 4}, Shape{1, 4, 5, 3}}) {
        auto conv = nn::make_conv(rng, static_cast<int>(s[1]), static_cast<int>(s[1]), 3, true);
        auto f = oracle::random_tensor(rng, s);
        auto prev = oracle::random_tensor(rng, s);
        errs.push_back(oracle::gradient_error(
            [&] { return oracle::probe_loss(cross_layer_fuse(f, prev, conv), 5); }, {f, prev, conv.weight, conv.bias}));
    }
    record("cross-layer fuse", errs);

    const double secs = seconds_since(t0);
    o.check(secs < 300.0, "runtime " + fmt("%.1f", secs) + " s < 300 s");
    return o;
}

std::vector<TrainSample> smoke_batch(const UsisSam& model, int count, std::uint64_t seed)
{
    const auto corpus = generate_synthetic_corpus(SynthConfig{}, count, seed);
    return prepare_samples(model, corpus.dataset, corpus.images);
}

// 3. Frozen parameters never move; each trainable group does.
Outcome freezing_contract()
{
    Outcome o;
    UsisSam model(ModelConfig{});
    std::map<std::string, std::vector<double>> before;
    for (const auto& p : model.parameters()) before[p.name].assign(p.tensor.values().begin(), p.tensor.values().end());
    const auto samples = smoke_batch(model, 8, 31);
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.max_steps = 50;
    const auto h = train(model, samples, cfg).history;
    o.check(h.size() == 50, std::to_string(h.size()) + " optimizer steps");

    std::int64_t frozen_changed = 0;
    std::map<nn::ParamGroup, int> moved;
    for (const auto& p : model.parameters()) {
        const bool same = std::equal(p.tensor.values().begin(), p.tensor.values().end(), before[p.name].begin());
        if (p.group == nn::ParamGroup::Backbone) {
            frozen_changed += same ? 0 : 1;
        } else if (!same) {
            ++moved[p.group];
        }
    }
    o.check(frozen_changed == 0, std::to_string(frozen_changed) + " frozen tensors changed (bit comparison)");
    for (auto g : {nn::ParamGroup::Adapter, nn::ParamGroup::ChannelAdapter, nn::ParamGroup::Sfpg,
                   nn::ParamGroup::Rpn}) {
        o.check(moved[g] > 0, nn::to_string(g) + ": " + std::to_string(moved[g]) + " tensors changed");
    }
    const auto counts = count_encoder_params(model.encoder);
    const double frac = static_cast<double>(counts.trainable) / static_cast<double>(counts.total());
    o.check(frac < 0.10, "encoder trainable fraction " + fmt("%.4f", frac) + " (" + std::to_string(counts.trainable) +
                             " of " + std::to_string(counts.total()) + ") < 0.10");
    return o;
}

// 4. Average-residual balancing.
Outcome noise_balance_exactness()
{
    Outcome o;
    const std::vector<double> x{1, 3, 5, 7};
    const auto y = noise_balance(Tensor::from_vector({1, 1, 2, 2}, x), 0.8);
    const std::vector<double> stated{2.4, 4.0, 5.6, 7.2};
    double to_stated = 0.0, to_formula = 0.0;
    for (int i = 0; i < 4; ++i) {
        to_stated = std::max(to_stated, std::abs(y.at(i) - stated[i]));
        to_formula = std::max(to_formula, std::abs(y.at(i) - (0.8 * x[i] + 0.2 * 4.0)));
    }
    std::ostringstream got;
    got << "[[" << y.at(0) << ", " << y.at(1) << "], [" << y.at(2) << ", " << y.at(3) << "]]";
    o.check(to_stated < 1e-9, "2x2 example: got " + got.str() + ", expected [[2.4, 4.0], [5.6, 7.2]]; max diff " +
                                  fmt("%.3g", to_stated));
    o.notes.push_back("info: direct evaluation of 0.8*x + 0.2*mean(x) gives [[1.6, 3.2], [4.8, 6.4]]; output differs "
                      "from it by " + fmt("%.3g", to_formula) +
                      ". The expected matrix equals 0.8*x + 1.6, not the balancing formula.");
    const auto c = Tensor::full({2, 3, 4, 4}, -2.5);
    bool fixed = true;
    for (double lambda : {0.0, 0.3, 0.8, 1.0}) {
        const auto z = noise_balance(c, lambda);
        for (double v : z.values()) fixed = fixed && v == -2.5;
    }
    o.check(fixed, "constant input is a fixed point for lambda in {0, 0.3, 0.8, 1}");
    return o;
}

// 5. Composite loss on a hand-built case.
Outcome loss_exactness()
{
    Outcome o;
    auto in = oracle::hand_loss_case();
    const auto expect = oracle::hand_loss_expected();
    const auto got = compute_loss(in);
    o.check(std::abs(got.total - expect.total) < 1e-6,
            "4 anchors / 2 positives: total " + fmt("%.9f", got.total) + " vs hand " + fmt("%.9f", expect.total));
    in.indicator.assign(in.indicator.size(), 0);
    const auto guard = compute_loss(in);
    o.check(std::abs(guard.total - expect.rpn) < 1e-12 && std::isfinite(guard.total),
            "no salient rows: total " + fmt("%.9f", guard.total) + " equals rpn term " + fmt("%.9f", expect.rpn));
    return o;
}

// 6. Bhattacharyya distance.
Outcome bhattacharyya()
{
    Outcome o;
    const std::vector<double> p{0.9, 0.1}, q{0.1, 0.9};
    const double dpp = bhattacharyya_distance(p, p);
    o.check(std::abs(dpp) < 1e-15, "D(p, p) = " + fmt("%.3g", std::abs(dpp)));
    const double dpq = bhattacharyya_distance(p, q);
    o.check(std::abs(dpq - 0.510826) < 1e-6, "D([0.9, 0.1], [0.1, 0.9]) = " + fmt("%.7f", dpq));
    Rng rng(6);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        std::vector<double> a(64), b(64);
        double sa = 0, sb = 0;
        for (int i = 0; i < 64; ++i) {
            a[i] = rng.uniform() * (rng.uniform() < 0.3 ? 0.0 : 1.0);
            b[i] = rng.uniform();
            sa += a[i];
            sb += b[i];
        }
        for (int i = 0; i < 64; ++i) {
            a[i] /= sa;
            b[i] /= sb;
        }
        worst = std::max(worst, std::abs(bhattacharyya_distance(a, b) - bhattacharyya_distance(b, a)));
    }
    o.check(worst < 1e-12, "symmetry on 100 random pairs, max |D(a,b) - D(b,a)| = " + fmt("%.3g", worst));
    return o;
}

// 7. Evaluator against the brute-force oracle.
Outcome evaluator_oracle()
{
    Outcome o;
    const auto images = oracle::random_eval_images(77, 50);
    std::size_t max_inst = 0;
    for (const auto& img : images) max_inst = std::max(max_inst, img.ground_truth.size());
    o.check(images.size() == 50 && max_inst <= 3, "50 scenes, at most " + std::to_string(max_inst) + " instances");
    for (bool agnostic : {true, false}) {
        const auto r = summarize(images, agnostic ? EvalMode::ClassAgnostic : EvalMode::MultiClass);
        const auto [a50, a75] = oracle::brute_force_ap50_ap75(images, agnostic);
        o.check(r.ap50 == a50 && r.ap75 == a75, std::string(agnostic ? "class-agnostic" : "multi-class") +
                                                     ": AP50 " + fmt("%.6f", r.ap50) + " / oracle " +
                                                     fmt("%.6f", a50) + ", AP75 " + fmt("%.6f", r.ap75) +
                                                     " / oracle " + fmt("%.6f", a75));
    }
    auto perfect = images;
    for (auto& img : perfect) {
        img.detections.clear();
        for (const auto& g : img.ground_truth) img.detections.push_back({g.mask, 1.0, g.category_id});
    }
    const auto p = summarize(perfect, EvalMode::MultiClass);
    o.check(p.map == 1.0 && p.ap50 == 1.0 && p.ap75 == 1.0, "perfect predictions give (" + fmt("%.3f", p.map) +
                                                                 ", " + fmt("%.3f", p.ap50) + ", " +
                                                                 fmt("%.3f", p.ap75) + ")");
    ImageEval six;
    BinaryMask g(1, 12), d(1, 12);
    for (int c = 0; c < 8; ++c) g.set(0, c);
    for (int c = 2; c < 10; ++c) d.set(0, c);
    six.ground_truth.push_back({g, 1});
    six.detections.push_back({d, 0.9, 1});
    const auto s = summarize(std::vector<ImageEval>{six}, EvalMode::MultiClass);
    o.check(s.ap50 == 1.0 && s.ap75 == 0.0, "IoU " + fmt("%.2f", mask_iou(g, d)) + " case: AP50 " +
                                                fmt("%.1f", s.ap50) + ", AP75 " + fmt("%.1f", s.ap75));
    return o;
}

// 8. Overfitting one batch, then the full smoke run with a paired baseline.
Outcome smoke_training(const std::filesystem::path& config)
{
    Outcome o;
    {
        UsisSam model(ModelConfig{});
        const auto batch = smoke_batch(model, 1, 5);
        TrainConfig cfg;
        cfg.epochs = 50;
        cfg.learning_rate = 1e-3;
        const auto h = train(model, batch, cfg).history;
        const double first = h.front().loss.total;
        const double last = h.back().loss.total;
        o.check(last <= 0.5 * first, "one repeated batch, 50 steps: loss " + fmt("%.4f", first) + " -> " +
                                         fmt("%.4f", last) + " (" + fmt("%.1f", 100.0 * (1 - last / first)) +
                                         "% drop)");
    }
    const auto t0 = Clock::now();
    const auto run = load_run_config(config);
    auto corpus = generate_synthetic_corpus(run.data.synth, run.data.synthetic_count, run.seed);
    const auto splits = split_dataset(corpus.dataset, SplitRatios{}, run.seed);
    auto images_of = [&](const Dataset& part) {
        std::vector<RgbImage> v;
        for (const auto& rec : part.images) v.push_back(corpus.images[static_cast<std::size_t>(rec.id - 1)]);
        return v;
    };
    const auto test_images = images_of(splits.test);
    UsisSam model(run.model);
    const auto untrained = evaluate(model, splits.test, test_images, EvalMode::MultiClass);
    const auto samples = prepare_samples(model, splits.train, images_of(splits.train));
    const auto h = train(model, samples, run.train).history;
    const auto trained = evaluate(model, splits.test, test_images, EvalMode::MultiClass);
    const double secs = seconds_since(t0);
    o.check(secs < 1200.0, std::to_string(run.data.synthetic_count) + " images, " +
                               std::to_string(run.train.epochs) + " epochs, " + std::to_string(h.size()) +
                               " steps in " + fmt("%.0f", secs) + " s < 1200 s");
    o.check(trained.ap50 > untrained.ap50, "test AP50 trained " + fmt("%.4f", trained.ap50) + " > untrained " +
                                               fmt("%.4f", untrained.ap50) + " (mAP " + fmt("%.4f", trained.map) +
                                               " vs " + fmt("%.4f", untrained.map) + ")");
    return o;
}

// 9. Statistics and split bookkeeping.
Outcome stats_pipeline()
{
    Outcome o;
    const auto corpus = generate_synthetic_corpus(SynthConfig{}, 50, 9);
    const auto& d = corpus.dataset;
    std::map<std::int64_t, std::size_t> index;
    for (std::size_t i = 0; i < d.images.size(); ++i) index[d.images[i].id] = i;
    ImageLoader loader = [&](const ImageRecord& rec, std::string&) -> std::optional<RgbImage> {
        return corpus.images[index.at(rec.id)];
    };
    const auto s = corpus_statistics(d, loader);
    o.check(s.size_buckets.total() == static_cast<std::int64_t>(d.annotations.size()),
            "size buckets " + std::to_string(s.size_buckets.below_1pct) + " + " +
                std::to_string(s.size_buckets.between) + " + " + std::to_string(s.size_buckets.above_30pct) +
                " = " + std::to_string(d.annotations.size()) + " instances");
    const auto sp = split_dataset(d, SplitRatios{}, 9);
    const double n = 50.0;
    const bool ratio_ok = std::abs(sp.train.images.size() - n * 0.70) <= 1.0 &&
                          std::abs(sp.val.images.size() - n * 0.15) <= 1.0 &&
                          std::abs(sp.test.images.size() - n * 0.15) <= 1.0;
    o.check(ratio_ok, "split " + std::to_string(sp.train.images.size()) + " / " +
                          std::to_string(sp.val.images.size()) + " / " + std::to_string(sp.test.images.size()) +
                          " vs 35 / 7.5 / 7.5");
    double r = 0, g = 0, b = 0;
    for (const auto& c : s.channel_means) {
        r += c.r;
        g += c.g;
        b += c.b;
    }
    const double k = static_cast<double>(s.channel_means.size());
    o.check(r < g && r < b, "mean intensity R " + fmt("%.1f", r / k) + ", G " + fmt("%.1f", g / k) + ", B " +
                                fmt("%.1f", b / k));
    return o;
}

} // namespace

int main(int argc, char** argv)
{
    kernels::configure_workers_from_env();
    bool strict = false;
    std::filesystem::path config = std::filesystem::path(USIS_SOURCE_DIR) / "configs" / "smoke.yaml";
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--strict") == 0) {
            strict = true;
        } else if (std::strcmp(argv[i], "--config") == 0 && i + 1 < argc) {
            config = argv[++i];
        }
    }
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"zero-init identity", zero_init_identity},
        {"gradient suite", gradient_suite},
        {"freezing contract", freezing_contract},
        {"noise balance exactness", noise_balance_exactness},
        {"composite loss exactness", loss_exactness},
        {"Bhattacharyya distance", bhattacharyya},
        {"evaluator oracle equivalence", evaluator_oracle},
        {"overfit and smoke training", [&] { return smoke_training(config); }},
        {"stats pipeline consistency", stats_pipeline},
    };
    int hard_failures = 0, failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        const bool known = kKnownConflicts.contains(id);
        std::printf("%s criterion %d: %s (%.1f s)%s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                    seconds_since(t0), !o.pass && known ? " [known conflict in the expected value]" : "");
        for (const auto& n : o.notes) std::printf("    %s\n", n.c_str());
        std::fflush(stdout);
        if (!o.pass) {
            ++failures;
            if (strict || !known) ++hard_failures;
        }
    }
    std::printf("%zu criteria, %d passed, %d failed (%d counted toward the exit status)\n", criteria.size(),
                static_cast<int>(criteria.size()) - failures, failures, hard_failures);
    return hard_failures == 0 ? 0 : 1;
}
