#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

#include <capsdemm/capsdemm.hpp>

namespace testsupport {

using capsdemm::Mask;
using capsdemm::Rng;
using capsdemm::Tape;
using capsdemm::Tensor;

// Central-difference gradient comparison over every element of every input.
// Relative error uses a floored denominator so true zeros compare cleanly.
inline double max_rel_grad_error(std::vector<Tensor<double>> inputs,
                                 const std::function<Tensor<double>()>& f, double eps = 1e-5) {
    std::vector<std::vector<double>> analytic;
    {
        for (auto& t : inputs) t.set_requires_grad(true);
        Tape<double> tape;
        Tensor<double> loss = f();
        tape.backward(loss);
        for (auto& t : inputs) analytic.push_back(t.grad());
    }
    double worst = 0;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        std::vector<double>& x = inputs[ti].values();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            x[i] = orig + eps;
            const double fp = f().item();
            x[i] = orig - eps;
            const double fm = f().item();
            x[i] = orig;
            const double numeric = (fp - fm) / (2 * eps);
            const double a = analytic[ti][i];
            const double rel = std::abs(a - numeric) / std::max(1e-4, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

inline Tensor<double> random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// Distinct values in random order, for ops whose subgradient is ambiguous at
// ties.
inline Tensor<double> distinct_tensor(Rng& rng, std::vector<int> shape) {
    Tensor<double> t(std::move(shape));
    std::vector<double>& v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = 0.05 * static_cast<double>(i) - 0.5;
    rng.shuffle(v.begin(), v.end());
    return t;
}

// Six-loop convolution reference.
inline Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k,
                                  const Tensor<double>& b, int stride, int pad) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int F = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor<double> out({N, F, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double acc = b.values()[static_cast<std::size_t>(f)];
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = oy * stride + ky - pad;
                                const int ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                const std::size_t xi =
                                    ((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix;
                                const std::size_t ki =
                                    ((static_cast<std::size_t>(f) * C + c) * kh + ky) * kw + kx;
                                acc += x.values()[xi] * k.values()[ki];
                            }
                    out.values()[(((static_cast<std::size_t>(n) * F + f) * Ho + oy) * Wo + ox)] =
                        acc;
                }
    return out;
}

// Pairwise Mann-Whitney statistic: P(s+ > s-) + 0.5 P(s+ == s-).
inline double mann_whitney(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            pairs += 1;
            if (scores[i] > scores[j]) wins += 1;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / pairs;
}

// Union-find component labeling, normalized to first-appearance order in a
// row-major scan (0 stays background).
struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) {
        std::iota(parent.begin(), parent.end(), 0);
    }
    int find(int a) {
        while (parent[static_cast<std::size_t>(a)] != a) {
            parent[static_cast<std::size_t>(a)] =
                parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
            a = parent[static_cast<std::size_t>(a)];
        }
        return a;
    }
    void unite(int a, int b) { parent[static_cast<std::size_t>(find(a))] = find(b); }
};

inline std::vector<int> uf_labels(const Mask& m, int connectivity) {
    const int w = m.width, h = m.height;
    UnionFind uf(w * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!m.at(x, y)) continue;
            const int p = y * w + x;
            if (x + 1 < w && m.at(x + 1, y)) uf.unite(p, p + 1);
            if (y + 1 < h && m.at(x, y + 1)) uf.unite(p, p + w);
            if (connectivity == 8) {
                if (x + 1 < w && y + 1 < h && m.at(x + 1, y + 1)) uf.unite(p, p + w + 1);
                if (x > 0 && y + 1 < h && m.at(x - 1, y + 1)) uf.unite(p, p + w - 1);
            }
        }
    std::vector<int> labels(static_cast<std::size_t>(w) * h, 0);
    std::vector<int> remap(static_cast<std::size_t>(w) * h, -1);
    int next = 1;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!m.at(x, y)) continue;
            const int root = uf.find(y * w + x);
            if (remap[static_cast<std::size_t>(root)] < 0)
                remap[static_cast<std::size_t>(root)] = next++;
            labels[static_cast<std::size_t>(y) * w + x] = remap[static_cast<std::size_t>(root)];
        }
    return labels;
}

inline Mask random_mask(Rng& rng, int w, int h, double p_on = 0.45) {
    Mask m(w, h);
    for (auto& v : m.pixels) v = rng.uniform() < p_on ? 1 : 0;
    return m;
}

}  // namespace testsupport
