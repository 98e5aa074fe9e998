#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "capsdemm/capsule.hpp"
#include "capsdemm/config.hpp"
#include "capsdemm/image.hpp"
#include "capsdemm/metrics.hpp"
#include "capsdemm/morphology.hpp"
#include "capsdemm/plot.hpp"
#include "capsdemm/serialize.hpp"
#include "capsdemm/slic.hpp"
#include "capsdemm/synth.hpp"
#include "capsdemm/unet.hpp"

namespace capsdemm {

struct WsiSample {
    std::string id;
    Image image;
    Mask gt_mask;
    std::vector<std::pair<int, int>> centers;
    int label = 0;
    int fold = 0;
};

inline std::vector<WsiSample> load_dataset(const std::filesystem::path& dir) {
    const Manifest manifest = read_manifest(dir);
    std::vector<WsiSample> out;
    out.reserve(manifest.entries.size());
    for (const ManifestEntry& entry : manifest.entries) {
        WsiSample s;
        s.id = entry.id;
        s.label = entry.label;
        s.fold = entry.fold;
        s.centers = entry.centers;
        if (s.label != 0 && s.label != 1)
            throw std::runtime_error("manifest label out of range for image " + s.id);
        if (s.fold < 0 || s.fold > 2)
            throw std::runtime_error("manifest fold out of range for image " + s.id);
        s.image = load_png(dir / entry.image_path);
        s.gt_mask = load_mask_png(dir / entry.mask_path);
        if (s.gt_mask.width != s.image.width || s.gt_mask.height != s.image.height)
            throw std::runtime_error("mask size does not match image for " + s.id);
        out.push_back(std::move(s));
    }
    return out;
}

struct FoldPlan {
    std::array<std::vector<int>, 3> members;  // dataset indices per fold
};

inline FoldPlan plan_folds(const std::vector<WsiSample>& dataset) {
    FoldPlan plan;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        plan.members[static_cast<std::size_t>(dataset[i].fold)].push_back(static_cast<int>(i));
    for (int f = 0; f < 3; ++f)
        if (plan.members[static_cast<std::size_t>(f)].empty())
            throw std::runtime_error("dataset too small: fold " + std::to_string(f) + " is empty");
    return plan;
}

struct PatchRef {
    int wsi = 0;
    PatchSpec spec;
    int label = 0;
};

// Patches and geometry-derived labels for one image, selected against its
// ground-truth band mask.
inline std::vector<PatchRef> gt_patch_refs(const std::vector<WsiSample>& dataset, int wsi,
                                           int superpixels, double compactness, int patch_size) {
    const WsiSample& s = dataset[static_cast<std::size_t>(wsi)];
    const SlicResult sp = slic_segment(s.image, superpixels, compactness);
    const std::vector<PatchSpec> specs = select_patches(sp, s.gt_mask, patch_size);
    const std::vector<int> labels = derive_patch_labels(s.centers, specs);
    std::vector<PatchRef> refs;
    refs.reserve(specs.size());
    for (std::size_t j = 0; j < specs.size(); ++j) refs.push_back({wsi, specs[j], labels[j]});
    return refs;
}

inline std::vector<LabeledPatch> materialize_patches(const std::vector<WsiSample>& dataset,
                                                     const std::vector<PatchRef>& refs) {
    std::vector<LabeledPatch> out;
    out.reserve(refs.size());
    for (const PatchRef& r : refs)
        out.push_back({crop(dataset[static_cast<std::size_t>(r.wsi)].image, r.spec), r.label});
    return out;
}

inline double topk_mean(const std::vector<float>& row, int k) {
    const int kk = std::min<int>(k, static_cast<int>(row.size()));
    std::vector<float> v(row);
    std::partial_sort(v.begin(), v.begin() + kk, v.end(), std::greater<float>());
    double s = 0;
    for (int i = 0; i < kk; ++i) s += v[i];
    return s / kk;
}

namespace detail {

// Streams crops through the network in batches and collects one probability
// map row per patch, so different K values can be pooled without another
// forward pass.
template <class CropAt>
inline std::vector<std::vector<float>> prob_map_rows(CapsNet<float>& net, int n, int batch,
                                                     CropAt&& crop_at) {
    std::vector<std::vector<float>> rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (int first = 0; first < n; first += batch) {
        const int count = std::min(batch, n - first);
        std::vector<LabeledPatch> group;
        group.reserve(static_cast<std::size_t>(count));
        for (int j = 0; j < count; ++j) group.push_back({crop_at(first + j), 0});
        std::vector<int> order(static_cast<std::size_t>(count));
        std::iota(order.begin(), order.end(), 0);
        const Tensor<float> x =
            batch_patch_tensor(group, order, 0, static_cast<std::size_t>(count));
        auto map = net.forward_map(x);
        const int cells = map.map_h * map.map_w;
        const float* data = map.prob_map.values().data();
        for (int j = 0; j < count; ++j)
            rows.emplace_back(data + static_cast<std::size_t>(j) * cells,
                              data + static_cast<std::size_t>(j + 1) * cells);
    }
    return rows;
}

}  // namespace detail

inline std::vector<double> score_patch_refs(CapsNet<float>& net,
                                            const std::vector<WsiSample>& dataset,
                                            const std::vector<PatchRef>& refs, int k,
                                            int batch = 8) {
    const auto rows = detail::prob_map_rows(
        net, static_cast<int>(refs.size()), batch, [&](int i) {
            const PatchRef& r = refs[static_cast<std::size_t>(i)];
            return crop(dataset[static_cast<std::size_t>(r.wsi)].image, r.spec);
        });
    std::vector<double> scores;
    scores.reserve(rows.size());
    for (const auto& row : rows) scores.push_back(topk_mean(row, k));
    return scores;
}

struct WsiDiagnosis {
    std::string id;
    int patch_count = 0;
    int positive_patch_count = 0;
    int threshold = 0;
    bool positive = false;
    bool empty_mask = false;
    std::vector<double> patch_probs;
    std::vector<PatchSpec> patches;
    Mask sc_mask;
};

// Classification stage against an already-computed band mask. A patch is
// called positive when its score reaches the cutoff; the image is called
// positive when strictly more than T patches are positive.
inline WsiDiagnosis diagnose_with_mask(const Image& image, Mask sc_mask, CapsNet<float>& caps,
                                       int superpixels, double compactness, int patch_size, int k,
                                       double cutoff, int threshold, std::string id = {}) {
    WsiDiagnosis d;
    d.id = std::move(id);
    d.threshold = threshold;
    d.sc_mask = std::move(sc_mask);
    const bool any = std::any_of(d.sc_mask.pixels.begin(), d.sc_mask.pixels.end(),
                                 [](std::uint8_t v) { return v != 0; });
    if (!any) {
        d.empty_mask = true;
        d.positive = 0 > threshold;
        return d;
    }
    const SlicResult sp = slic_segment(image, superpixels, compactness);
    d.patches = select_patches(sp, d.sc_mask, patch_size);
    d.patch_count = static_cast<int>(d.patches.size());
    const auto rows = detail::prob_map_rows(caps, d.patch_count, 8, [&](int i) {
        return crop(image, d.patches[static_cast<std::size_t>(i)]);
    });
    for (const auto& row : rows) {
        const double p = topk_mean(row, k);
        d.patch_probs.push_back(p);
        if (p >= cutoff) ++d.positive_patch_count;
    }
    d.positive = d.positive_patch_count > threshold;
    return d;
}

inline WsiDiagnosis diagnose_wsi(const Image& image, UNet<float>& seg, CapsNet<float>& caps,
                                 int superpixels, double compactness, int patch_size, int k,
                                 double cutoff, int threshold, std::string id = {}) {
    Mask mask = postprocess_mask(segment(seg, image));
    return diagnose_with_mask(image, std::move(mask), caps, superpixels, compactness, patch_size,
                              k, cutoff, threshold, std::move(id));
}

struct WsiStrategyRow {
    int superpixels = 0;
    ThresholdStrategy strategy = ThresholdStrategy::accuracy;
    int threshold = 0;
    double accuracy = 0, precision = 0, recall = 0, f1 = 0, tnr = 0;
};

struct FoldOutcome {
    double seg_val_dice = 0;
    std::vector<std::pair<int, double>> val_auc_by_k;  // ordered as the sweep
    std::map<int, RocCurve> val_roc_by_k;
    double cutoff = 0;
    ConfusionMetrics patch_metrics;
    double patch_auc = 0;
    std::vector<WsiStrategyRow> wsi_rows;  // superpixel-major, strategy inner
};

struct CrossvalOutcome {
    int chosen_k = 0;
    std::array<FoldOutcome, 3> folds;
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    return Rng::splitmix64(Rng::splitmix64(base) ^ Rng::splitmix64(tag));
}

template <class Fn>
inline void for_each_fold(int jobs, Fn&& fn) {
    jobs = std::clamp(jobs, 1, 3);
    if (jobs == 1) {
        for (int f = 0; f < 3; ++f) fn(f);
        return;
    }
    std::atomic<int> next{0};
    std::array<std::exception_ptr, 3> errors{};
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            for (int f = next.fetch_add(1); f < 3; f = next.fetch_add(1)) {
                try {
                    fn(f);
                } catch (...) {
                    errors[static_cast<std::size_t>(f)] = std::current_exception();
                }
            }
        });
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
}

inline void split_by_label(const std::vector<PatchRef>& pool, std::vector<PatchRef>& pos,
                           std::vector<PatchRef>& neg) {
    for (const PatchRef& r : pool) (r.label ? pos : neg).push_back(r);
}

inline void cap_stratified(std::vector<PatchRef>& pos, std::vector<PatchRef>& neg, int cap) {
    const int total = static_cast<int>(pos.size() + neg.size());
    if (total <= cap) return;
    int keep_pos = static_cast<int>(
        std::lround(static_cast<double>(cap) * static_cast<double>(pos.size()) / total));
    keep_pos = std::clamp(keep_pos, 1, std::min<int>(static_cast<int>(pos.size()), cap - 1));
    const int keep_neg = std::min<int>(cap - keep_pos, static_cast<int>(neg.size()));
    pos.resize(static_cast<std::size_t>(keep_pos));
    neg.resize(static_cast<std::size_t>(keep_neg));
}

struct FoldState {
    std::optional<UNet<float>> seg;
    std::optional<CapsNet<float>> caps;
    FoldOutcome outcome;
};

}  // namespace detail

struct PatchSplit {
    std::vector<PatchRef> train;
    std::vector<PatchRef> val;
};

// Stratified validation holdout followed by class-proportional size caps.
// The pool is shuffled per class first so the caps keep a representative mix.
inline PatchSplit split_patch_pool(const std::vector<PatchRef>& pool, double val_fraction,
                                   int train_cap, int val_cap, Rng rng) {
    std::vector<PatchRef> pos, neg;
    detail::split_by_label(pool, pos, neg);
    if (pos.empty() || neg.empty())
        throw std::runtime_error("patch pool does not cover both classes");
    rng.shuffle(pos.begin(), pos.end());
    rng.shuffle(neg.begin(), neg.end());
    const int val_pos = std::max(
        1, static_cast<int>(std::lround(val_fraction * static_cast<double>(pos.size()))));
    const int val_neg = std::max(
        1, static_cast<int>(std::lround(val_fraction * static_cast<double>(neg.size()))));
    if (val_pos >= static_cast<int>(pos.size()) || val_neg >= static_cast<int>(neg.size()))
        throw std::runtime_error("patch pool too small to hold out validation patches");
    PatchSplit out;
    std::vector<PatchRef> vpos(pos.begin(), pos.begin() + val_pos);
    std::vector<PatchRef> vneg(neg.begin(), neg.begin() + val_neg);
    pos.erase(pos.begin(), pos.begin() + val_pos);
    neg.erase(neg.begin(), neg.begin() + val_neg);
    detail::cap_stratified(vpos, vneg, val_cap);
    detail::cap_stratified(pos, neg, train_cap);
    out.val = std::move(vpos);
    out.val.insert(out.val.end(), vneg.begin(), vneg.end());
    out.train = std::move(pos);
    out.train.insert(out.train.end(), neg.begin(), neg.end());
    return out;
}

// Three-fold harness: per fold, trains the segmenter (10% of training images
// held for validation) and the patch classifier (20% of training patches held
// for validation, stratified), sweeps K on the validation patches, then after
// a single K is chosen by mean validation AUC evaluates the held-out fold at
// patch level and at image level for every superpixel count and both
// threshold strategies. Threshold T is fit on the training images' predicted
// patch counts.
inline CrossvalOutcome run_crossval(const std::vector<WsiSample>& dataset, const RunConfig& cfg,
                                    int jobs = 1) {
    cfg.validate();
    const FoldPlan plan = plan_folds(dataset);
    // patch pool per image, selected on ground-truth masks at the configured
    // training superpixel count
    std::vector<std::vector<PatchRef>> refs_by_wsi(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i)
        refs_by_wsi[i] = gt_patch_refs(dataset, static_cast<int>(i), cfg.superpixels,
                                       cfg.compactness, cfg.patch_size);

    std::array<detail::FoldState, 3> states;
    constexpr int kValPatchCap = 300;  // keeps per-epoch validation fast

    detail::for_each_fold(jobs, [&](int f) {
        detail::FoldState& state = states[static_cast<std::size_t>(f)];
        std::vector<int> train_wsis;
        for (int g = 0; g < 3; ++g)
            if (g != f)
                for (int i : plan.members[static_cast<std::size_t>(g)]) train_wsis.push_back(i);
        std::sort(train_wsis.begin(), train_wsis.end());
        if (train_wsis.size() < 2)
            throw std::runtime_error("dataset too small to split training images");

        // segmenter
        std::vector<int> seg_order = train_wsis;
        Rng seg_rng = Rng::stream(detail::derive_seed(cfg.seed, 101), static_cast<std::uint64_t>(f));
        seg_rng.shuffle(seg_order.begin(), seg_order.end());
        const int n_seg_val =
            std::max(1, static_cast<int>(std::lround(0.1 * static_cast<double>(seg_order.size()))));
        if (n_seg_val >= static_cast<int>(seg_order.size()))
            throw std::runtime_error("dataset too small to hold out segmentation validation");
        std::vector<SegSample> seg_train, seg_val;
        for (std::size_t idx = 0; idx < seg_order.size(); ++idx) {
            const WsiSample& s = dataset[static_cast<std::size_t>(seg_order[idx])];
            SegSample sample{resize_bilinear(s.image, cfg.seg.train_w, cfg.seg.train_h),
                             resize_nearest(s.gt_mask, cfg.seg.train_w, cfg.seg.train_h)};
            (idx < static_cast<std::size_t>(n_seg_val) ? seg_val : seg_train)
                .push_back(std::move(sample));
        }
        SegTrainOptions seg_opt = cfg.seg_train;
        seg_opt.seed = detail::derive_seed(cfg.seed, 201 + static_cast<std::uint64_t>(f));
        SegTrainResult seg_result = train_segmenter(cfg.seg, seg_train, seg_val, seg_opt);
        state.outcome.seg_val_dice = seg_result.best_val_dice;
        state.seg.emplace(std::move(seg_result.model));

        // patch classifier
        std::vector<PatchRef> pool;
        for (int i : train_wsis) {
            const auto& refs = refs_by_wsi[static_cast<std::size_t>(i)];
            pool.insert(pool.end(), refs.begin(), refs.end());
        }
        const PatchSplit split = split_patch_pool(
            pool, 0.2, cfg.train_patches, kValPatchCap,
            Rng::stream(detail::derive_seed(cfg.seed, 102), static_cast<std::uint64_t>(f)));
        const std::vector<PatchRef>& train_refs = split.train;
        const std::vector<PatchRef>& val_refs = split.val;

        CapsTrainOptions caps_opt = cfg.caps_train;
        caps_opt.seed = detail::derive_seed(cfg.seed, 301 + static_cast<std::uint64_t>(f));
        CapsTrainResult caps_result =
            train_patch_classifier(cfg.caps, materialize_patches(dataset, train_refs),
                                   materialize_patches(dataset, val_refs), caps_opt);
        state.caps.emplace(std::move(caps_result.model));

        // K sweep on validation patches
        std::vector<int> val_labels;
        val_labels.reserve(val_refs.size());
        for (const PatchRef& r : val_refs) val_labels.push_back(r.label);
        const auto rows = detail::prob_map_rows(
            *state.caps, static_cast<int>(val_refs.size()), cfg.caps_train.batch, [&](int i) {
                const PatchRef& r = val_refs[static_cast<std::size_t>(i)];
                return crop(dataset[static_cast<std::size_t>(r.wsi)].image, r.spec);
            });
        for (int k : cfg.k_sweep) {
            std::vector<double> scores;
            scores.reserve(rows.size());
            for (const auto& row : rows) scores.push_back(topk_mean(row, k));
            RocCurve curve = roc_and_auc(scores, val_labels);
            state.outcome.val_auc_by_k.emplace_back(k, curve.auc);
            state.outcome.val_roc_by_k.emplace(k, std::move(curve));
        }
    });

    // arg-max mean validation AUC, ties toward the smaller K
    std::vector<int> k_sorted = cfg.k_sweep;
    std::sort(k_sorted.begin(), k_sorted.end());
    k_sorted.erase(std::unique(k_sorted.begin(), k_sorted.end()), k_sorted.end());
    int chosen_k = k_sorted.front();
    double best_mean = -1;
    for (int k : k_sorted) {
        double mean = 0;
        for (const detail::FoldState& state : states)
            for (const auto& [kk, auc] : state.outcome.val_auc_by_k)
                if (kk == k) mean += auc / 3.0;
        if (mean > best_mean) {
            best_mean = mean;
            chosen_k = k;
        }
    }

    detail::for_each_fold(jobs, [&](int f) {
        detail::FoldState& state = states[static_cast<std::size_t>(f)];
        FoldOutcome& outcome = state.outcome;
        outcome.cutoff = choose_cutoff(outcome.val_roc_by_k.at(chosen_k));

        // patch-level metrics on the held-out fold
        std::vector<PatchRef> test_refs;
        for (int i : plan.members[static_cast<std::size_t>(f)])
            test_refs.insert(test_refs.end(), refs_by_wsi[static_cast<std::size_t>(i)].begin(),
                             refs_by_wsi[static_cast<std::size_t>(i)].end());
        if (test_refs.empty()) throw std::runtime_error("held-out fold produced no patches");
        const std::vector<double> test_scores =
            score_patch_refs(*state.caps, dataset, test_refs, chosen_k, cfg.caps_train.batch);
        std::vector<int> test_labels, test_pred;
        for (const PatchRef& r : test_refs) test_labels.push_back(r.label);
        for (double s : test_scores) test_pred.push_back(s >= outcome.cutoff ? 1 : 0);
        outcome.patch_metrics = classification_metrics(test_pred, test_labels);
        outcome.patch_auc = roc_and_auc(test_scores, test_labels).auc;

        // image-level evaluation across the superpixel sweep
        std::vector<Mask> pred_masks(dataset.size());
        for (std::size_t i = 0; i < dataset.size(); ++i)
            pred_masks[i] = postprocess_mask(segment(*state.seg, dataset[i].image));
        std::vector<int> train_wsis;
        for (int g = 0; g < 3; ++g)
            if (g != f)
                for (int i : plan.members[static_cast<std::size_t>(g)]) train_wsis.push_back(i);
        std::sort(train_wsis.begin(), train_wsis.end());
        const std::vector<int>& test_wsis = plan.members[static_cast<std::size_t>(f)];
        for (int sp : cfg.superpixel_sweep) {
            std::vector<int> counts(dataset.size(), 0);
            for (std::size_t i = 0; i < dataset.size(); ++i) {
                const WsiDiagnosis d = diagnose_with_mask(
                    dataset[i].image, pred_masks[i], *state.caps, sp, cfg.compactness,
                    cfg.patch_size, chosen_k, outcome.cutoff, 0, dataset[i].id);
                counts[i] = d.positive_patch_count;
            }
            std::vector<int> train_counts, train_labels, test_counts, test_labels_w;
            for (int i : train_wsis) {
                train_counts.push_back(counts[static_cast<std::size_t>(i)]);
                train_labels.push_back(dataset[static_cast<std::size_t>(i)].label);
            }
            for (int i : test_wsis) {
                test_counts.push_back(counts[static_cast<std::size_t>(i)]);
                test_labels_w.push_back(dataset[static_cast<std::size_t>(i)].label);
            }
            for (ThresholdStrategy strategy :
                 {ThresholdStrategy::accuracy, ThresholdStrategy::tnr}) {
                WsiStrategyRow row;
                row.superpixels = sp;
                row.strategy = strategy;
                row.threshold = select_threshold(train_counts, train_labels, strategy);
                std::vector<int> pred;
                pred.reserve(test_counts.size());
                for (int c : test_counts) pred.push_back(c > row.threshold ? 1 : 0);
                const ConfusionMetrics m = classification_metrics(pred, test_labels_w);
                row.accuracy = m.accuracy;
                row.precision = m.precision;
                row.recall = m.recall;
                row.f1 = m.f1;
                row.tnr = true_negative_rate(pred, test_labels_w);
                outcome.wsi_rows.push_back(row);
            }
        }
    });

    CrossvalOutcome result;
    result.chosen_k = chosen_k;
    for (int f = 0; f < 3; ++f)
        result.folds[static_cast<std::size_t>(f)] =
            std::move(states[static_cast<std::size_t>(f)].outcome);
    return result;
}

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline const char* strategy_name(ThresholdStrategy s) {
    return s == ThresholdStrategy::accuracy ? "accuracy" : "tnr";
}

inline void write_history_csv(const std::filesystem::path& path,
                              const std::vector<TrainHistoryRow>& history) {
    std::string csv = "epoch,train_loss,val_metric\n";
    for (const TrainHistoryRow& row : history)
        csv += std::to_string(row.epoch) + "," + format_metric(row.train_loss) + "," +
               format_metric(row.val_metric) + "\n";
    write_file_atomic(path, csv);
}

// patch_metrics.csv, wsi_metrics.csv, roc_val.csv, summary.csv and one ROC
// plot PNG per fold, every numeric cell formatted %.6f so reruns are
// byte-identical.
inline void write_crossval_outputs(const std::filesystem::path& dir, const CrossvalOutcome& result,
                                   const RunConfig& cfg) {
    std::string patch = "fold,accuracy,precision,recall,f1,auc\n";
    double pa = 0, pp = 0, pr = 0, pf = 0, pauc = 0;
    for (int f = 0; f < 3; ++f) {
        const FoldOutcome& o = result.folds[static_cast<std::size_t>(f)];
        patch += std::to_string(f) + "," + format_metric(o.patch_metrics.accuracy) + "," +
                 format_metric(o.patch_metrics.precision) + "," +
                 format_metric(o.patch_metrics.recall) + "," + format_metric(o.patch_metrics.f1) +
                 "," + format_metric(o.patch_auc) + "\n";
        pa += o.patch_metrics.accuracy / 3;
        pp += o.patch_metrics.precision / 3;
        pr += o.patch_metrics.recall / 3;
        pf += o.patch_metrics.f1 / 3;
        pauc += o.patch_auc / 3;
    }
    patch += "average," + format_metric(pa) + "," + format_metric(pp) + "," + format_metric(pr) +
             "," + format_metric(pf) + "," + format_metric(pauc) + "\n";
    write_file_atomic(dir / "patch_metrics.csv", patch);

    std::string wsi = "superpixels,strategy,fold,threshold,accuracy,precision,recall,f1,tnr\n";
    const std::size_t rows_per_fold = result.folds[0].wsi_rows.size();
    for (std::size_t r = 0; r < rows_per_fold; ++r) {
        double at = 0, aa = 0, ap = 0, ar = 0, af = 0, an = 0;
        for (int f = 0; f < 3; ++f) {
            const WsiStrategyRow& row = result.folds[static_cast<std::size_t>(f)].wsi_rows[r];
            wsi += std::to_string(row.superpixels) + "," + strategy_name(row.strategy) + "," +
                   std::to_string(f) + "," + std::to_string(row.threshold) + "," +
                   format_metric(row.accuracy) + "," + format_metric(row.precision) + "," +
                   format_metric(row.recall) + "," + format_metric(row.f1) + "," +
                   format_metric(row.tnr) + "\n";
            at += row.threshold / 3.0;
            aa += row.accuracy / 3;
            ap += row.precision / 3;
            ar += row.recall / 3;
            af += row.f1 / 3;
            an += row.tnr / 3;
        }
        const WsiStrategyRow& head = result.folds[0].wsi_rows[r];
        wsi += std::to_string(head.superpixels) + "," + strategy_name(head.strategy) +
               ",average," + format_metric(at) + "," + format_metric(aa) + "," +
               format_metric(ap) + "," + format_metric(ar) + "," + format_metric(af) + "," +
               format_metric(an) + "\n";
    }
    write_file_atomic(dir / "wsi_metrics.csv", wsi);

    std::string roc = "fold,k,threshold,fpr,tpr\n";
    for (int f = 0; f < 3; ++f) {
        const FoldOutcome& o = result.folds[static_cast<std::size_t>(f)];
        for (const auto& [k, curve] : o.val_roc_by_k)
            for (const RocPoint& p : curve.points)
                roc += std::to_string(f) + "," + std::to_string(k) + "," +
                       format_metric(p.threshold) + "," + format_metric(p.fpr) + "," +
                       format_metric(p.tpr) + "\n";
    }
    write_file_atomic(dir / "roc_val.csv", roc);

    std::string summary = "key,value\n";
    summary += "chosen_k," + std::to_string(result.chosen_k) + "\n";
    for (int f = 0; f < 3; ++f) {
        const FoldOutcome& o = result.folds[static_cast<std::size_t>(f)];
        const std::string tag = "fold" + std::to_string(f);
        summary += tag + "_cutoff," + format_metric(o.cutoff) + "\n";
        summary += tag + "_seg_val_dice," + format_metric(o.seg_val_dice) + "\n";
        for (const auto& [k, auc] : o.val_auc_by_k)
            summary += tag + "_val_auc_k" + std::to_string(k) + "," + format_metric(auc) + "\n";
    }
    write_file_atomic(dir / "summary.csv", summary);

    for (int f = 0; f < 3; ++f) {
        const FoldOutcome& o = result.folds[static_cast<std::size_t>(f)];
        std::vector<PlotCurve> curves;
        for (const auto& [k, curve] : o.val_roc_by_k) {
            char name[48];
            std::snprintf(name, sizeof name, "K=%d AUC=%.3f", k, curve.auc);
            curves.push_back({name, curve.points});
        }
        save_png(dir / ("roc_fold" + std::to_string(f) + ".png"), plot_roc(curves));
    }
    (void)cfg;
}

}  // namespace capsdemm
