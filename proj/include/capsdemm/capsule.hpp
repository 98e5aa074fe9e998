#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsdemm/image.hpp"
#include "capsdemm/metrics.hpp"
#include "capsdemm/ops.hpp"
#include "capsdemm/optim.hpp"
#include "capsdemm/rng.hpp"
#include "capsdemm/serialize.hpp"
#include "capsdemm/tensor.hpp"

namespace capsdemm {

// Squash per location over the channel axis of an NCHW map:
//   v = s * r / (1 + r^2),  r = ||s||
// so output length is r^2/(1+r^2) < 1, direction is preserved, and
// squash(0) = 0.
template <class T>
Tensor<T> squash_channels(const Tensor<T>& x) {
    if (x.rank() != 4) throw std::invalid_argument("squash_channels expects an NCHW tensor");
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> out(x.shape());
    const std::vector<T>& xv = x.values();
    std::vector<T>& yv = out.values();
    for (int n = 0; n < N; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t base = static_cast<std::size_t>(n) * C * plane + p;
            T r2 = T(0);
            for (int c = 0; c < C; ++c) {
                const T v = xv[base + c * plane];
                r2 += v * v;
            }
            const T g = std::sqrt(r2) / (T(1) + r2);
            for (int c = 0; c < C; ++c) yv[base + c * plane] = xv[base + c * plane] * g;
        }
    check_finite(out, "squash_channels");

    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y, N, C, plane]() mutable {
            std::vector<T>& gx = tx.grad();
            const std::vector<T>& gy = y.grad();
            const std::vector<T>& xv2 = tx.values();
            for (int n = 0; n < N; ++n)
                for (std::size_t p = 0; p < plane; ++p) {
                    const std::size_t base = static_cast<std::size_t>(n) * C * plane + p;
                    T r2 = T(0), dot = T(0);
                    for (int c = 0; c < C; ++c) {
                        const T v = xv2[base + c * plane];
                        r2 += v * v;
                        dot += v * gy[base + c * plane];
                    }
                    if (r2 < T(1e-30)) continue;
                    const T r = std::sqrt(r2);
                    const T g = r / (T(1) + r2);
                    // d(r/(1+r^2))/dr = (1-r^2)/(1+r^2)^2, applied along s/r
                    const T coef = (T(1) - r2) / ((T(1) + r2) * (T(1) + r2)) * dot / r;
                    for (int c = 0; c < C; ++c)
                        gx[base + c * plane] += g * gy[base + c * plane] + coef * xv2[base + c * plane];
                }
        });
    }
    return out;
}

// Euclidean norm over the channel axis, flattened to one row of H*W cells
// per batch element.
template <class T>
Tensor<T> channel_length(const Tensor<T>& x) {
    if (x.rank() != 4) throw std::invalid_argument("channel_length expects an NCHW tensor");
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> out({N, static_cast<int>(plane)});
    const std::vector<T>& xv = x.values();
    for (int n = 0; n < N; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t base = static_cast<std::size_t>(n) * C * plane + p;
            T r2 = T(0);
            for (int c = 0; c < C; ++c) {
                const T v = xv[base + c * plane];
                r2 += v * v;
            }
            out.values()[static_cast<std::size_t>(n) * plane + p] = std::sqrt(r2);
        }

    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y, N, C, plane]() mutable {
            std::vector<T>& gx = tx.grad();
            const std::vector<T>& gy = y.grad();
            const std::vector<T>& xv2 = tx.values();
            const std::vector<T>& yv2 = y.values();
            for (int n = 0; n < N; ++n)
                for (std::size_t p = 0; p < plane; ++p) {
                    const T len = yv2[static_cast<std::size_t>(n) * plane + p];
                    if (len < T(1e-15)) continue;
                    const T g = gy[static_cast<std::size_t>(n) * plane + p] / len;
                    const std::size_t base = static_cast<std::size_t>(n) * C * plane + p;
                    for (int c = 0; c < C; ++c) gx[base + c * plane] += g * xv2[base + c * plane];
                }
        });
    }
    return out;
}

// Mean binary cross entropy over a vector of probabilities. Probabilities are
// clamped to [1e-7, 1-1e-7]; a clamped entry contributes no gradient.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& p, const std::vector<T>& labels) {
    if (p.rank() != 1 || static_cast<std::size_t>(p.dim(0)) != labels.size())
        throw std::invalid_argument("bce_loss needs one probability per label");
    const T lo = T(1e-7), hi = T(1) - T(1e-7);
    const std::size_t n = labels.size();
    T total = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T pc = std::min(hi, std::max(lo, p.values()[i]));
        total += -labels[i] * std::log(pc) - (T(1) - labels[i]) * std::log(T(1) - pc);
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
    check_finite(out, "bce_loss");

    if (detail::track<T>({&p})) {
        out.set_requires_grad(true);
        Tensor<T> tp = p, y = out;
        Tape<T>::active()->record([tp, y, labels, lo, hi, n]() mutable {
            std::vector<T>& gp = tp.grad();
            const T g = y.grad()[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const T pv = tp.values()[i];
                if (pv < lo || pv > hi) continue;
                gp[i] += g * (pv - labels[i]) / (pv * (T(1) - pv));
            }
        });
    }
    return out;
}

inline std::vector<double> squash_vector(const std::vector<double>& s) {
    double r2 = 0;
    for (double v : s) r2 += v * v;
    const double g = std::sqrt(r2) / (1.0 + r2);
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] * g;
    return out;
}

struct RoutingTrace {
    std::vector<std::vector<double>> output;               // per output capsule
    std::vector<std::vector<std::vector<double>>> coupling;  // [iteration][input][output]
};

// Reference routing for one spatial location, in plain doubles.
// weights[i][j] is the out_dim x in_dim matrix (row-major) predicting output
// capsule j from input capsule i. Logits start at zero; each iteration takes
// c = softmax(b) over outputs, forms s_j as the c-weighted prediction sum,
// squashes, then adds the prediction-output agreements to the logits. The
// coupling snapshots record the c actually used in each iteration.
inline RoutingTrace route_by_agreement(const std::vector<std::vector<double>>& inputs,
                                       const std::vector<std::vector<std::vector<double>>>& weights,
                                       int iterations) {
    if (iterations < 1) throw std::invalid_argument("routing needs at least one iteration");
    if (inputs.empty() || weights.size() != inputs.size())
        throw std::invalid_argument("routing needs one weight row per input capsule");
    const std::size_t I = inputs.size();
    const std::size_t J = weights[0].size();
    if (!J) throw std::invalid_argument("routing needs at least one output capsule");
    const std::size_t in_dim = inputs[0].size();
    const std::size_t out_dim = weights[0][0].size() / in_dim;
    if (out_dim * in_dim != weights[0][0].size())
        throw std::invalid_argument("weight matrix size must be out_dim * in_dim");

    std::vector<std::vector<std::vector<double>>> uhat(I,
        std::vector<std::vector<double>>(J, std::vector<double>(out_dim, 0.0)));
    for (std::size_t i = 0; i < I; ++i) {
        if (inputs[i].size() != in_dim || weights[i].size() != J)
            throw std::invalid_argument("inconsistent routing input shapes");
        for (std::size_t j = 0; j < J; ++j) {
            if (weights[i][j].size() != out_dim * in_dim)
                throw std::invalid_argument("inconsistent routing weight shapes");
            for (std::size_t o = 0; o < out_dim; ++o) {
                double acc = 0;
                for (std::size_t d = 0; d < in_dim; ++d)
                    acc += weights[i][j][o * in_dim + d] * inputs[i][d];
                uhat[i][j][o] = acc;
            }
        }
    }

    RoutingTrace trace;
    std::vector<std::vector<double>> b(I, std::vector<double>(J, 0.0));
    std::vector<std::vector<double>> v(J, std::vector<double>(out_dim, 0.0));
    for (int it = 0; it < iterations; ++it) {
        std::vector<std::vector<double>> c(I, std::vector<double>(J, 0.0));
        for (std::size_t i = 0; i < I; ++i) {
            double mx = b[i][0];
            for (std::size_t j = 1; j < J; ++j) mx = std::max(mx, b[i][j]);
            double sum = 0;
            for (std::size_t j = 0; j < J; ++j) {
                c[i][j] = std::exp(b[i][j] - mx);
                sum += c[i][j];
            }
            for (std::size_t j = 0; j < J; ++j) c[i][j] /= sum;
        }
        trace.coupling.push_back(c);
        for (std::size_t j = 0; j < J; ++j) {
            std::vector<double> s(out_dim, 0.0);
            for (std::size_t i = 0; i < I; ++i)
                for (std::size_t o = 0; o < out_dim; ++o) s[o] += c[i][j] * uhat[i][j][o];
            v[j] = squash_vector(s);
        }
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t j = 0; j < J; ++j) {
                double agree = 0;
                for (std::size_t o = 0; o < out_dim; ++o) agree += uhat[i][j][o] * v[j][o];
                b[i][j] += agree;
            }
    }
    trace.output = v;
    return trace;
}

struct StemLayer {
    int filters = 0;
    int kernel = 0;
    int stride = 1;
};

struct CapsConfig {
    std::vector<StemLayer> stem{{16, 5, 2}, {32, 5, 2}};
    int in_channels = 3;
    int primary_types = 16;
    int capsule_dim = 8;
    int primary_kernel = 5;
    int primary_stride = 2;
    int secondary_dim = 16;
    int routing_iterations = 3;
    int topk = 5;

    void validate() const {
        for (const StemLayer& l : stem)
            if (l.filters < 1 || l.kernel < 1 || l.stride < 1)
                throw std::invalid_argument("stem layers need positive filters, kernel, stride");
        if (in_channels < 1 || primary_types < 1 || capsule_dim < 1 || primary_kernel < 1 ||
            primary_stride < 1 || secondary_dim < 1)
            throw std::invalid_argument("capsule dimensions must be positive");
        if (routing_iterations < 1) throw std::invalid_argument("routing iterations must be >= 1");
        if (topk < 1) throw std::invalid_argument("top-K must be >= 1");
    }
};

// Convolutional stem, a 5x5/stride-2 primary-capsule convolution reshaped to
// capsule vectors, and one secondary capsule per grid location reached by
// 1x1-convolutional routing with weights shared across locations. With a
// single output capsule per location the coupling softmax is over a
// singleton, so c = 1 identically at every routing iteration and the routed
// result is exactly squash of the prediction sum, in value and in gradient;
// the forward pass computes that closed form.
template <class T>
class CapsNet {
public:
    CapsNet(const CapsConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        int ch = cfg_.in_channels;
        for (const StemLayer& l : cfg_.stem) {
            stem_k_.push_back(he_uniform(rng, {l.filters, ch, l.kernel, l.kernel}));
            stem_b_.emplace_back(std::vector<int>{l.filters});
            ch = l.filters;
        }
        const int prim = cfg_.primary_types * cfg_.capsule_dim;
        primary_k_ = he_uniform(rng, {prim, ch, cfg_.primary_kernel, cfg_.primary_kernel});
        primary_b_ = Tensor<T>({prim});
        for (int t = 0; t < cfg_.primary_types; ++t)
            route_w_.push_back(he_uniform(rng, {cfg_.secondary_dim, cfg_.capsule_dim, 1, 1}));
    }

    const CapsConfig& config() const { return cfg_; }

    struct MapOutput {
        Tensor<T> prob_map;  // [N, map_h * map_w]
        int map_h = 0, map_w = 0;
    };

    // Probability map of secondary-capsule lengths, one cell per grid
    // location. Fully convolutional: any input at least as large as the
    // receptive field works, larger inputs give larger maps.
    MapOutput forward_map(const Tensor<T>& x) {
        if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
            throw std::invalid_argument("capsule input must be NCHW with the configured channels");
        Tensor<T> h = x;
        for (std::size_t i = 0; i < stem_k_.size(); ++i)
            h = relu(conv2d(h, stem_k_[i], stem_b_[i], cfg_.stem[i].stride, 0));
        Tensor<T> prim = conv2d(h, primary_k_, primary_b_, cfg_.primary_stride, 0);
        Tensor<T> zero_bias({cfg_.secondary_dim});
        Tensor<T> s;
        for (int t = 0; t < cfg_.primary_types; ++t) {
            Tensor<T> u = squash_channels(slice_channels(prim, t * cfg_.capsule_dim, cfg_.capsule_dim));
            Tensor<T> uhat = conv2d(u, route_w_[static_cast<std::size_t>(t)], zero_bias, 1, 0);
            s = t == 0 ? uhat : add(s, uhat);
        }
        Tensor<T> v = squash_channels(s);
        MapOutput out;
        out.map_h = v.dim(2);
        out.map_w = v.dim(3);
        out.prob_map = channel_length(v);
        return out;
    }

    // Patch probability: mean of the K largest map cells.
    Tensor<T> forward(const Tensor<T>& x) { return topk_average(forward_map(x).prob_map, cfg_.topk); }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> params;
        for (std::size_t i = 0; i < stem_k_.size(); ++i) {
            params.push_back(stem_k_[i]);
            params.push_back(stem_b_[i]);
        }
        params.push_back(primary_k_);
        params.push_back(primary_b_);
        for (Tensor<T>& w : route_w_) params.push_back(w);
        return params;
    }

    long count_parameters() {
        long total = 0;
        for (const Tensor<T>& p : parameters()) total += static_cast<long>(p.numel());
        return total;
    }

    const std::vector<Tensor<T>>& routing_weights() const { return route_w_; }

    void save(const std::filesystem::path& path) {
        std::vector<NamedTensor> tensors;
        tensors.push_back({"config", config_tensor()});
        for (auto& [name, param] : parameter_entries()) {
            Tensor<float> copy(param->shape());
            for (std::size_t i = 0; i < param->numel(); ++i)
                copy.values()[i] = static_cast<float>(param->values()[i]);
            tensors.push_back({name, std::move(copy)});
        }
        save_model(path, tensors);
    }

    static CapsNet<T> load(const std::filesystem::path& path) {
        const std::vector<NamedTensor> tensors = load_model(path);
        CapsConfig cfg = config_from_tensor(model_tensor(tensors, "config"), path.string());
        Rng rng(0);
        CapsNet<T> net(cfg, rng);
        for (auto& [name, param] : net.parameter_entries())
            copy_into(model_tensor(tensors, name), *param, name, path.string());
        return net;
    }

private:
    static Tensor<T> he_uniform(Rng& rng, const std::vector<int>& shape) {
        Tensor<T> t(shape);
        std::size_t fan_in = 1;
        for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= static_cast<std::size_t>(shape[d]);
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (T& v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
        return t;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> parameter_entries() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (std::size_t i = 0; i < stem_k_.size(); ++i) {
            out.emplace_back("stem" + std::to_string(i) + ".kernel", &stem_k_[i]);
            out.emplace_back("stem" + std::to_string(i) + ".bias", &stem_b_[i]);
        }
        out.emplace_back("primary.kernel", &primary_k_);
        out.emplace_back("primary.bias", &primary_b_);
        for (std::size_t t = 0; t < route_w_.size(); ++t)
            out.emplace_back("route.w" + std::to_string(t), &route_w_[t]);
        return out;
    }

    Tensor<float> config_tensor() const {
        std::vector<float> meta = {static_cast<float>(cfg_.in_channels),
                                   static_cast<float>(cfg_.primary_types),
                                   static_cast<float>(cfg_.capsule_dim),
                                   static_cast<float>(cfg_.primary_kernel),
                                   static_cast<float>(cfg_.primary_stride),
                                   static_cast<float>(cfg_.secondary_dim),
                                   static_cast<float>(cfg_.routing_iterations),
                                   static_cast<float>(cfg_.topk),
                                   static_cast<float>(cfg_.stem.size())};
        for (const StemLayer& l : cfg_.stem) {
            meta.push_back(static_cast<float>(l.filters));
            meta.push_back(static_cast<float>(l.kernel));
            meta.push_back(static_cast<float>(l.stride));
        }
        Tensor<float> t({static_cast<int>(meta.size())});
        t.values() = meta;
        return t;
    }

    static CapsConfig config_from_tensor(const Tensor<float>& meta, const std::string& origin) {
        const std::vector<float>& m = meta.values();
        if (meta.rank() != 1 || m.size() < 9)
            throw std::runtime_error("malformed capsule config in model file: " + origin);
        CapsConfig cfg;
        cfg.in_channels = static_cast<int>(m[0]);
        cfg.primary_types = static_cast<int>(m[1]);
        cfg.capsule_dim = static_cast<int>(m[2]);
        cfg.primary_kernel = static_cast<int>(m[3]);
        cfg.primary_stride = static_cast<int>(m[4]);
        cfg.secondary_dim = static_cast<int>(m[5]);
        cfg.routing_iterations = static_cast<int>(m[6]);
        cfg.topk = static_cast<int>(m[7]);
        const int stem_count = static_cast<int>(m[8]);
        if (m.size() != 9 + static_cast<std::size_t>(stem_count) * 3)
            throw std::runtime_error("malformed capsule config in model file: " + origin);
        cfg.stem.clear();
        for (int i = 0; i < stem_count; ++i)
            cfg.stem.push_back({static_cast<int>(m[9 + i * 3]), static_cast<int>(m[10 + i * 3]),
                                static_cast<int>(m[11 + i * 3])});
        return cfg;
    }

    static void copy_into(const Tensor<float>& stored, Tensor<T>& dst, const std::string& name,
                          const std::string& origin) {
        if (stored.shape() != dst.shape())
            throw std::runtime_error("model tensor " + name + " has unexpected shape: " + origin);
        for (std::size_t i = 0; i < dst.numel(); ++i)
            dst.values()[i] = static_cast<T>(stored.values()[i]);
    }

    CapsConfig cfg_;
    std::vector<Tensor<T>> stem_k_;
    std::vector<Tensor<T>> stem_b_;
    Tensor<T> primary_k_{std::vector<int>{1}};
    Tensor<T> primary_b_{std::vector<int>{1}};
    std::vector<Tensor<T>> route_w_;
};

struct LabeledPatch {
    Image image;
    int label = 0;
};

struct CapsTrainOptions {
    int epochs = 6;
    float lr = 1e-3f;
    int batch = 8;
    std::uint64_t seed = 1;
};

struct CapsTrainResult {
    CapsNet<float> model;
    std::vector<TrainHistoryRow> history;
    double best_val_auc = 0;
    int best_epoch = 0;
};

namespace detail {

inline Tensor<float> batch_patch_tensor(const std::vector<LabeledPatch>& patches,
                                        const std::vector<int>& order, std::size_t first,
                                        std::size_t count) {
    const Image& head = patches[static_cast<std::size_t>(order[first])].image;
    Tensor<float> x({static_cast<int>(count), 3, head.height, head.width});
    const std::size_t plane = static_cast<std::size_t>(head.width) * head.height;
    for (std::size_t b = 0; b < count; ++b) {
        const Image& img = patches[static_cast<std::size_t>(order[first + b])].image;
        if (img.width != head.width || img.height != head.height)
            throw std::invalid_argument("all patches in a training set must share one size");
        float* dst = x.values().data() + b * 3 * plane;
        for (std::size_t i = 0; i < plane; ++i)
            for (int c = 0; c < 3; ++c)
                dst[c * plane + i] = static_cast<float>(img.pixels[i * 3 + c]) / 255.0f;
    }
    return x;
}

}  // namespace detail

// Patch probabilities under the current parameters, in dataset order.
inline std::vector<double> score_patches(CapsNet<float>& model,
                                         const std::vector<LabeledPatch>& patches, int batch) {
    std::vector<int> order(patches.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> scores;
    scores.reserve(patches.size());
    for (std::size_t first = 0; first < patches.size(); first += static_cast<std::size_t>(batch)) {
        const std::size_t count = std::min(static_cast<std::size_t>(batch), patches.size() - first);
        Tensor<float> x = detail::batch_patch_tensor(patches, order, first, count);
        Tensor<float> pooled = model.forward(x);
        for (std::size_t b = 0; b < count; ++b) scores.push_back(pooled.values()[b]);
    }
    return scores;
}

// Minimizes mean BCE of the pooled patch probability with Adam and returns
// the parameter snapshot with the best validation AUC.
inline CapsTrainResult train_patch_classifier(const CapsConfig& cfg,
                                              const std::vector<LabeledPatch>& train,
                                              const std::vector<LabeledPatch>& val,
                                              const CapsTrainOptions& opt) {
    if (train.empty()) throw std::invalid_argument("training patch set is empty");
    if (val.empty()) throw std::invalid_argument("validation patch set is empty");
    if (opt.epochs < 1 || opt.batch < 1) throw std::invalid_argument("epochs and batch must be >= 1");
    bool has_pos = false, has_neg = false;
    for (const LabeledPatch& p : val) (p.label ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
        throw std::invalid_argument("validation patches must contain both classes");

    Rng rng(opt.seed);
    CapsTrainResult result{CapsNet<float>(cfg, rng), {}, -1.0, 0};
    AdamOptimizer<float> adam(result.model.parameters(), opt.lr);

    std::vector<int> val_labels;
    for (const LabeledPatch& p : val) val_labels.push_back(p.label);
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<std::vector<float>> best_params;
    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0;
        for (std::size_t first = 0; first < train.size(); first += static_cast<std::size_t>(opt.batch)) {
            const std::size_t count =
                std::min(static_cast<std::size_t>(opt.batch), train.size() - first);
            Tensor<float> x = detail::batch_patch_tensor(train, order, first, count);
            std::vector<float> y(count);
            for (std::size_t b = 0; b < count; ++b)
                y[b] = train[static_cast<std::size_t>(order[first + b])].label ? 1.0f : 0.0f;
            adam.zero_grad();
            Tape<float> tape;
            Tensor<float> loss = bce_loss(result.model.forward(x), y);
            tape.backward(loss);
            adam.step();
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(count);
        }

        const std::vector<double> val_scores = score_patches(result.model, val, opt.batch);
        const double val_auc = roc_and_auc(val_scores, val_labels).auc;
        result.history.push_back({epoch, loss_sum / static_cast<double>(train.size()), val_auc});
        if (val_auc > result.best_val_auc) {
            result.best_val_auc = val_auc;
            result.best_epoch = epoch;
            best_params.clear();
            for (Tensor<float>& p : result.model.parameters()) best_params.push_back(p.values());
        }
    }

    std::vector<Tensor<float>> params = result.model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].values() = best_params[i];
    return result;
}

}  // namespace capsdemm
