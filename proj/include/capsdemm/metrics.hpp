#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace capsdemm {

struct ConfusionMetrics {
    long tp = 0, fp = 0, fn = 0, tn = 0;
    double precision = 0, recall = 0, f1 = 0, accuracy = 0;
};

// Labels and predictions are 0/1. Ratios with an empty denominator report 0.
inline ConfusionMetrics classification_metrics(const std::vector<int>& pred,
                                               const std::vector<int>& truth) {
    if (pred.empty() || pred.size() != truth.size())
        throw std::invalid_argument("metrics need equal-length nonempty label vectors");
    ConfusionMetrics m;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, t = truth[i] != 0;
        if (p && t) ++m.tp;
        else if (p && !t) ++m.fp;
        else if (!p && t) ++m.fn;
        else ++m.tn;
    }
    m.precision = m.tp + m.fp ? static_cast<double>(m.tp) / (m.tp + m.fp) : 0.0;
    m.recall = m.tp + m.fn ? static_cast<double>(m.tp) / (m.tp + m.fn) : 0.0;
    m.f1 = m.precision + m.recall > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(pred.size());
    return m;
}

inline double true_negative_rate(const std::vector<int>& pred, const std::vector<int>& truth) {
    const ConfusionMetrics m = classification_metrics(pred, truth);
    if (m.tn + m.fp == 0) throw std::invalid_argument("true negative rate needs negative samples");
    return static_cast<double>(m.tn) / (m.tn + m.fp);
}

struct RocPoint {
    double threshold = 0;  // operating rule: positive iff score >= threshold
    double fpr = 0;
    double tpr = 0;
};

struct RocCurve {
    std::vector<RocPoint> points;  // thresholds descending, from (0,0) to (1,1)
    double auc = 0;
};

// Sweep over the distinct scores, one operating point per score plus the
// classify-nothing sentinel at +infinity. The trapezoidal area equals the
// Mann-Whitney statistic P(score+ > score-) + P(tie)/2.
inline RocCurve roc_and_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.empty() || scores.size() != labels.size())
        throw std::invalid_argument("roc needs equal-length nonempty score and label vectors");
    long pos = 0, neg = 0;
    for (int l : labels) (l ? pos : neg)++;
    if (!pos || !neg) throw std::invalid_argument("roc needs both classes present");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve curve;
    curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    long tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] ? tp : fp)++;
            ++i;
        }
        curve.points.push_back({s, static_cast<double>(fp) / neg, static_cast<double>(tp) / pos});
    }
    for (std::size_t j = 1; j < curve.points.size(); ++j)
        curve.auc += (curve.points[j].fpr - curve.points[j - 1].fpr) *
                     (curve.points[j].tpr + curve.points[j - 1].tpr) / 2.0;
    return curve;
}

// Maximizes Youden's J = TPR - FPR; J ties resolve to the lower threshold.
// The returned cutoff is the midpoint between the chosen score and the next
// lower distinct score, so "score >= cutoff" reproduces the chosen operating
// point with a margin. When the chosen point is the lowest score the score
// itself comes back; when it is the classify-nothing sentinel, max score + 1.
inline double choose_cutoff(const RocCurve& curve) {
    if (curve.points.empty()) throw std::invalid_argument("empty roc curve");
    std::size_t best = 0;
    double best_j = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < curve.points.size(); ++i) {
        const double j = curve.points[i].tpr - curve.points[i].fpr;
        if (j >= best_j) {
            best_j = j;
            best = i;
        }
    }
    const double t = curve.points[best].threshold;
    if (std::isinf(t)) return curve.points.back().threshold + 1.0;
    if (best + 1 < curve.points.size()) return (t + curve.points[best + 1].threshold) / 2.0;
    return t;
}

enum class ThresholdStrategy {
    accuracy,  // best slide-level accuracy, smallest qualifying T
    tnr,       // max true negative rate with at least one detected positive
};

// Decision rule: a slide is positive when its positive-patch count exceeds T.
// T is scanned over [0, max count]. The tnr strategy requires recall > 0 so
// it cannot trivially call everything negative; if no T detects a positive
// the constraint is dropped.
inline int select_threshold(const std::vector<int>& counts, const std::vector<int>& labels,
                            ThresholdStrategy strategy) {
    if (counts.empty() || counts.size() != labels.size())
        throw std::invalid_argument("threshold selection needs equal-length nonempty vectors");
    const int max_count = *std::max_element(counts.begin(), counts.end());

    auto evaluate = [&](int t, long& correct, double& tnr_value, bool& detects_positive) {
        long tp = 0, tn = 0, fp = 0;
        correct = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            const bool pred = counts[i] > t, truth = labels[i] != 0;
            if (pred == truth) ++correct;
            if (pred && truth) ++tp;
            if (!pred && !truth) ++tn;
            if (pred && !truth) ++fp;
        }
        detects_positive = tp > 0;
        tnr_value = tn + fp ? static_cast<double>(tn) / (tn + fp) : 1.0;
    };

    int best_t = 0;
    if (strategy == ThresholdStrategy::accuracy) {
        long best_correct = -1;
        for (int t = 0; t <= max_count; ++t) {
            long correct;
            double tnr_value;
            bool detects;
            evaluate(t, correct, tnr_value, detects);
            if (correct > best_correct) {
                best_correct = correct;
                best_t = t;
            }
        }
        return best_t;
    }

    double best_tnr = -1.0;
    bool found_feasible = false;
    for (int pass = 0; pass < 2 && !found_feasible; ++pass) {
        const bool require_recall = pass == 0;
        for (int t = 0; t <= max_count; ++t) {
            long correct;
            double tnr_value;
            bool detects;
            evaluate(t, correct, tnr_value, detects);
            if (require_recall && !detects) continue;
            if (tnr_value > best_tnr) {
                best_tnr = tnr_value;
                best_t = t;
                found_feasible = true;
            }
        }
    }
    return best_t;
}

}  // namespace capsdemm
