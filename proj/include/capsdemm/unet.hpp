#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "capsdemm/image.hpp"
#include "capsdemm/ops.hpp"
#include "capsdemm/optim.hpp"
#include "capsdemm/rng.hpp"
#include "capsdemm/serialize.hpp"
#include "capsdemm/tensor.hpp"

namespace capsdemm {

struct UNetConfig {
    int depth = 4;
    int base_filters = 16;
    int kernel = 3;
    int in_channels = 3;
    int train_h = 192;
    int train_w = 256;

    void validate() const {
        if (depth < 1 || base_filters < 1 || in_channels < 1)
            throw std::invalid_argument("depth, base_filters, in_channels must be >= 1");
        if (kernel < 1 || kernel % 2 == 0)
            throw std::invalid_argument("kernel size must be odd");
        const int div = 1 << depth;
        if (train_h < div || train_w < div || train_h % div || train_w % div)
            throw std::invalid_argument("train size must be divisible by 2^depth");
    }
};

// Encoder of double conv+ReLU blocks with 2x2 max-pooling, a bottleneck
// block, and a decoder of nearest upsampling with skip concatenation, closed
// by a 1x1 convolution and sigmoid. Filter counts double per stage.
template <class T>
class UNet {
public:
    UNet(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int k = cfg_.kernel;
        int ch = cfg_.in_channels;
        for (int d = 0; d < cfg_.depth; ++d) {
            const int f = cfg_.base_filters << d;
            enc_.push_back(make_block(rng, ch, f, k));
            ch = f;
        }
        mid_ = make_block(rng, ch, cfg_.base_filters << cfg_.depth, k);
        ch = cfg_.base_filters << cfg_.depth;
        for (int d = cfg_.depth - 1; d >= 0; --d) {
            const int f = cfg_.base_filters << d;
            dec_.push_back(make_block(rng, ch + f, f, k));
            ch = f;
        }
        out_k_ = he_uniform(rng, {1, ch, 1, 1});
        out_b_ = Tensor<T>({1});
    }

    const UNetConfig& config() const { return cfg_; }

    // [N, 1, H, W] probability map; H and W must be divisible by 2^depth.
    Tensor<T> forward(const Tensor<T>& x) {
        if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
            throw std::invalid_argument("segmenter input must be NCHW with the configured channels");
        const int div = 1 << cfg_.depth;
        if (x.dim(2) % div || x.dim(3) % div)
            throw std::invalid_argument("segmenter input size must be divisible by 2^depth");
        const int pad = cfg_.kernel / 2;
        Tensor<T> h = x;
        std::vector<Tensor<T>> skips;
        for (int d = 0; d < cfg_.depth; ++d) {
            h = relu(conv2d(h, enc_[d].k1, enc_[d].b1, 1, pad));
            h = relu(conv2d(h, enc_[d].k2, enc_[d].b2, 1, pad));
            skips.push_back(h);
            h = maxpool2d(h, 2, 2);
        }
        h = relu(conv2d(h, mid_.k1, mid_.b1, 1, pad));
        h = relu(conv2d(h, mid_.k2, mid_.b2, 1, pad));
        for (int d = cfg_.depth - 1; d >= 0; --d) {
            h = upsample2d_nearest(h, 2);
            h = concat_channels(h, skips[static_cast<std::size_t>(d)]);
            Block& blk = dec_[static_cast<std::size_t>(cfg_.depth - 1 - d)];
            h = relu(conv2d(h, blk.k1, blk.b1, 1, pad));
            h = relu(conv2d(h, blk.k2, blk.b2, 1, pad));
        }
        return sigmoid(conv2d(h, out_k_, out_b_, 1, 0));
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> params;
        for (auto& [name, p] : parameter_entries()) params.push_back(*p);
        return params;
    }

    long count_parameters() {
        long total = 0;
        for (const Tensor<T>& p : parameters()) total += static_cast<long>(p.numel());
        return total;
    }

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

    static UNet<T> load(const std::filesystem::path& path) {
        const std::vector<NamedTensor> tensors = load_model(path);
        const Tensor<float>& meta = model_tensor(tensors, "config");
        if (meta.rank() != 1 || meta.numel() != 6)
            throw std::runtime_error("malformed segmenter config in model file: " + path.string());
        UNetConfig cfg;
        cfg.depth = static_cast<int>(meta.values()[0]);
        cfg.base_filters = static_cast<int>(meta.values()[1]);
        cfg.kernel = static_cast<int>(meta.values()[2]);
        cfg.in_channels = static_cast<int>(meta.values()[3]);
        cfg.train_h = static_cast<int>(meta.values()[4]);
        cfg.train_w = static_cast<int>(meta.values()[5]);
        Rng rng(0);
        UNet<T> net(cfg, rng);
        for (auto& [name, param] : net.parameter_entries()) {
            const Tensor<float>& stored = model_tensor(tensors, name);
            if (stored.shape() != param->shape())
                throw std::runtime_error("model tensor " + name +
                                         " has unexpected shape: " + path.string());
            for (std::size_t i = 0; i < param->numel(); ++i)
                param->values()[i] = static_cast<T>(stored.values()[i]);
        }
        return net;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> parameter_entries() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        auto put_block = [&out](const std::string& prefix, Block& b) {
            out.emplace_back(prefix + "a.kernel", &b.k1);
            out.emplace_back(prefix + "a.bias", &b.b1);
            out.emplace_back(prefix + "b.kernel", &b.k2);
            out.emplace_back(prefix + "b.bias", &b.b2);
        };
        for (std::size_t d = 0; d < enc_.size(); ++d) put_block("enc" + std::to_string(d), enc_[d]);
        put_block("mid", mid_);
        for (std::size_t d = 0; d < dec_.size(); ++d) put_block("dec" + std::to_string(d), dec_[d]);
        out.emplace_back("out.kernel", &out_k_);
        out.emplace_back("out.bias", &out_b_);
        return out;
    }

private:
    struct Block {
        Tensor<T> k1{std::vector<int>{1}}, b1{std::vector<int>{1}};
        Tensor<T> k2{std::vector<int>{1}}, b2{std::vector<int>{1}};
    };

    static Tensor<T> he_uniform(Rng& rng, const std::vector<int>& shape) {
        Tensor<T> t(shape);
        std::size_t fan_in = 1;
        for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= static_cast<std::size_t>(shape[d]);
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (T& v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
        return t;
    }

    Block make_block(Rng& rng, int in_ch, int out_ch, int k) {
        Block b;
        b.k1 = he_uniform(rng, {out_ch, in_ch, k, k});
        b.b1 = Tensor<T>({out_ch});
        b.k2 = he_uniform(rng, {out_ch, out_ch, k, k});
        b.b2 = Tensor<T>({out_ch});
        return b;
    }

    Tensor<float> config_tensor() const {
        Tensor<float> t({6});
        t.values() = {static_cast<float>(cfg_.depth),      static_cast<float>(cfg_.base_filters),
                      static_cast<float>(cfg_.kernel),     static_cast<float>(cfg_.in_channels),
                      static_cast<float>(cfg_.train_h),    static_cast<float>(cfg_.train_w)};
        return t;
    }

    UNetConfig cfg_;
    std::vector<Block> enc_;
    Block mid_;
    std::vector<Block> dec_;  // deepest stage first
    Tensor<T> out_k_{std::vector<int>{1}};
    Tensor<T> out_b_{std::vector<int>{1}};
};

// Smoothed overlap ratio (2*sum(pred*gt) + 1) / (sum(pred) + sum(gt) + 1),
// evaluated in double. The +1 guards empty masks and vanishes at raster scale.
template <class T>
double dice_coefficient(const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.shape() != gt.shape())
        throw std::invalid_argument("dice needs matching prediction and ground-truth shapes");
    double inter = 0, psum = 0, gsum = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double p = static_cast<double>(pred.values()[i]);
        const double g = static_cast<double>(gt.values()[i]);
        inter += p * g;
        psum += p;
        gsum += g;
    }
    return (2.0 * inter + 1.0) / (psum + gsum + 1.0);
}

inline double dice_masks(const Mask& a, const Mask& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("dice needs matching mask sizes");
    double inter = 0, asum = 0, bsum = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        if (a.pixels[i] && b.pixels[i]) ++inter;
        if (a.pixels[i]) ++asum;
        if (b.pixels[i]) ++bsum;
    }
    return (2.0 * inter + 1.0) / (asum + bsum + 1.0);
}

// 1 - dice, built from tape ops so the gradient flows to the prediction.
template <class T>
Tensor<T> seg_loss(const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.shape() != gt.shape())
        throw std::invalid_argument("dice needs matching prediction and ground-truth shapes");
    Tensor<T> num = add_const(scale(sum_all(mul(pred, gt)), T(2)), T(1));
    Tensor<T> den = add_const(add(sum_all(pred), sum_all(gt)), T(1));
    return add_const(scale(div(num, den), T(-1)), T(1));
}

struct SegSample {
    Image image;  // at the configured train size
    Mask mask;
};

struct SegTrainOptions {
    int epochs = 10;
    float lr = 1e-3f;
    int batch = 2;
    std::uint64_t seed = 1;
    bool flip = false;  // random horizontal flips during training
};

struct SegTrainResult {
    UNet<float> model;
    std::vector<TrainHistoryRow> history;
    double best_val_dice = 0;
    int best_epoch = 0;
};

namespace detail {

inline void put_seg_sample(Tensor<float>& x, Tensor<float>& y, std::size_t slot,
                           const SegSample& sample, bool flip) {
    const int w = sample.image.width, h = sample.image.height;
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    float* xi = x.values().data() + slot * 3 * plane;
    float* yi = y.values().data() + slot * plane;
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
            const int sx = flip ? w - 1 - xx : xx;
            const std::size_t dst = static_cast<std::size_t>(yy) * w + xx;
            const std::uint8_t* px = sample.image.at(sx, yy);
            for (int c = 0; c < 3; ++c) xi[c * plane + dst] = static_cast<float>(px[c]) / 255.0f;
            yi[dst] = sample.mask.at(sx, yy) ? 1.0f : 0.0f;
        }
}

}  // namespace detail

// Minimizes the dice loss with Adam and returns the parameter snapshot with
// the best mean validation dice (soft dice of the probability map).
inline SegTrainResult train_segmenter(const UNetConfig& cfg, const std::vector<SegSample>& train,
                                      const std::vector<SegSample>& val,
                                      const SegTrainOptions& opt) {
    if (train.empty()) throw std::invalid_argument("training set is empty");
    if (val.empty()) throw std::invalid_argument("validation set is empty");
    if (opt.epochs < 1 || opt.batch < 1) throw std::invalid_argument("epochs and batch must be >= 1");
    for (const std::vector<SegSample>* set : {&train, &val})
        for (const SegSample& s : *set)
            if (s.image.width != cfg.train_w || s.image.height != cfg.train_h ||
                s.mask.width != cfg.train_w || s.mask.height != cfg.train_h)
                throw std::invalid_argument("segmentation samples must be at the configured train size");

    Rng rng(opt.seed);
    SegTrainResult result{UNet<float>(cfg, rng), {}, -1.0, 0};
    AdamOptimizer<float> adam(result.model.parameters(), opt.lr);

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::vector<float>> best_params;

    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0;
        for (std::size_t first = 0; first < train.size(); first += static_cast<std::size_t>(opt.batch)) {
            const std::size_t count =
                std::min(static_cast<std::size_t>(opt.batch), train.size() - first);
            Tensor<float> x({static_cast<int>(count), 3, cfg.train_h, cfg.train_w});
            Tensor<float> y({static_cast<int>(count), 1, cfg.train_h, cfg.train_w});
            for (std::size_t b = 0; b < count; ++b) {
                const bool flip = opt.flip && rng.uniform() < 0.5;
                detail::put_seg_sample(x, y, b, train[static_cast<std::size_t>(order[first + b])],
                                       flip);
            }
            adam.zero_grad();
            Tape<float> tape;
            Tensor<float> loss = seg_loss(result.model.forward(x), y);
            tape.backward(loss);
            adam.step();
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(count);
        }

        double val_dice = 0;
        for (const SegSample& s : val) {
            Tensor<float> x({1, 3, cfg.train_h, cfg.train_w});
            Tensor<float> y({1, 1, cfg.train_h, cfg.train_w});
            detail::put_seg_sample(x, y, 0, s, false);
            val_dice += dice_coefficient(result.model.forward(x), y);
        }
        val_dice /= static_cast<double>(val.size());
        result.history.push_back({epoch, loss_sum / static_cast<double>(train.size()), val_dice});
        if (val_dice > result.best_val_dice) {
            result.best_val_dice = val_dice;
            result.best_epoch = epoch;
            best_params.clear();
            for (Tensor<float>& p : result.model.parameters()) best_params.push_back(p.values());
        }
    }

    std::vector<Tensor<float>> params = result.model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].values() = best_params[i];
    return result;
}

// Native-resolution segmentation: bilinear downsample to the train size,
// forward pass, threshold at 0.5, nearest upscale back to the input size.
inline Mask segment(UNet<float>& model, const Image& image) {
    const UNetConfig& cfg = model.config();
    const Image small = resize_bilinear(image, cfg.train_w, cfg.train_h);
    Tensor<float> prob = model.forward(image_to_tensor(small));
    const Mask low = tensor_to_mask(prob, 0.5f);
    return resize_nearest(low, image.width, image.height);
}

}  // namespace capsdemm
