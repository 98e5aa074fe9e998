#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <capsdemm/capsdemm.hpp>

namespace fs = std::filesystem;
using namespace capsdemm;

namespace {

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) {
        RunConfig cfg;
        cfg.validate();
        return cfg;
    }
    return load_run_config(path);
}

std::uint64_t derive(std::uint64_t base, std::uint64_t tag) {
    return Rng::splitmix64(Rng::splitmix64(base) ^ Rng::splitmix64(tag));
}

struct SynthArgs {
    std::string out;
    std::string config;
    int num = 90;
    double positive_frac = 0.32;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool force = false;
};

int run_synth(const SynthArgs& a) {
    RunConfig cfg = load_config_or_default(a.config);
    if (a.seed_set) cfg.seed = a.seed;
    SynthConfig sc = cfg.synth;
    sc.seed = cfg.seed;
    const fs::path out(a.out);
    if (fs::exists(out) && fs::is_directory(out) && !fs::is_empty(out) && !a.force)
        throw std::runtime_error("output directory " + a.out +
                                 " is not empty; pass --force to overwrite");
    write_dataset(out, sc, a.num, a.positive_frac);
    std::cout << "wrote " << a.num << " images to " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string data;
    std::string config;
    std::string out;
    int holdout_fold = 2;
};

fs::path history_path(const fs::path& model_path) {
    fs::path p = model_path;
    p += ".history.csv";
    return p;
}

std::vector<int> training_pool(const std::vector<WsiSample>& dataset, int holdout_fold) {
    std::vector<int> pool;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        if (dataset[i].fold != holdout_fold) pool.push_back(static_cast<int>(i));
    if (pool.size() < 2) throw std::runtime_error("too few training images outside the holdout fold");
    return pool;
}

int run_train_seg(const TrainArgs& a) {
    const RunConfig cfg = load_config_or_default(a.config);
    const std::vector<WsiSample> dataset = load_dataset(a.data);
    std::vector<int> pool = training_pool(dataset, a.holdout_fold);
    Rng rng = Rng::stream(derive(cfg.seed, 7), 0);
    rng.shuffle(pool.begin(), pool.end());
    const int n_val = std::max(1, static_cast<int>(std::lround(0.1 * static_cast<double>(pool.size()))));
    if (n_val >= static_cast<int>(pool.size()))
        throw std::runtime_error("too few images to hold out segmentation validation");
    std::vector<SegSample> train, val;
    for (std::size_t idx = 0; idx < pool.size(); ++idx) {
        const WsiSample& s = dataset[static_cast<std::size_t>(pool[idx])];
        SegSample sample{resize_bilinear(s.image, cfg.seg.train_w, cfg.seg.train_h),
                         resize_nearest(s.gt_mask, cfg.seg.train_w, cfg.seg.train_h)};
        (idx < static_cast<std::size_t>(n_val) ? val : train).push_back(std::move(sample));
    }
    SegTrainOptions opt = cfg.seg_train;
    opt.seed = derive(cfg.seed, 8);
    SegTrainResult result = train_segmenter(cfg.seg, train, val, opt);
    result.model.save(a.out);
    write_history_csv(history_path(a.out), result.history);
    std::cout << "best_val_dice=" << format_metric(result.best_val_dice) << "\n";
    return 0;
}

int run_train_caps(const TrainArgs& a) {
    const RunConfig cfg = load_config_or_default(a.config);
    const std::vector<WsiSample> dataset = load_dataset(a.data);
    const std::vector<int> pool_wsis = training_pool(dataset, a.holdout_fold);
    std::vector<PatchRef> pool;
    for (int i : pool_wsis) {
        const std::vector<PatchRef> refs =
            gt_patch_refs(dataset, i, cfg.superpixels, cfg.compactness, cfg.patch_size);
        pool.insert(pool.end(), refs.begin(), refs.end());
    }
    const PatchSplit split = split_patch_pool(pool, 0.2, cfg.train_patches, 300,
                                              Rng::stream(derive(cfg.seed, 9), 0));
    CapsTrainOptions opt = cfg.caps_train;
    opt.seed = derive(cfg.seed, 10);
    CapsTrainResult result =
        train_patch_classifier(cfg.caps, materialize_patches(dataset, split.train),
                               materialize_patches(dataset, split.val), opt);
    result.model.save(a.out);
    write_history_csv(history_path(a.out), result.history);
    std::cout << "best_val_auc=" << format_metric(result.best_val_auc) << "\n";
    return 0;
}

struct DiagnoseArgs {
    std::string image;
    std::string seg_model;
    std::string caps_model;
    std::string overlay;
    int superpixels = 500;
    double compactness = 10.0;
    int patch_size = 224;
    int k = 5;
    double cutoff = 0.5;
    int threshold = 0;
};

int run_diagnose(const DiagnoseArgs& a) {
    UNet<float> seg = UNet<float>::load(a.seg_model);
    CapsNet<float> caps = CapsNet<float>::load(a.caps_model);
    const Image image = load_png(a.image);
    const std::string id = fs::path(a.image).stem().string();
    const WsiDiagnosis d = diagnose_wsi(image, seg, caps, a.superpixels, a.compactness,
                                        a.patch_size, a.k, a.cutoff, a.threshold, id);
    std::printf("id=%s patches=%d positive_patches=%d T=%d decision=%s empty_mask=%d\n",
                d.id.c_str(), d.patch_count, d.positive_patch_count, d.threshold,
                d.positive ? "positive" : "negative", d.empty_mask ? 1 : 0);
    if (!a.overlay.empty()) {
        std::vector<int> flags;
        flags.reserve(d.patch_probs.size());
        for (double p : d.patch_probs) flags.push_back(p >= a.cutoff ? 1 : 0);
        save_png(a.overlay, diagnosis_overlay(image, d.sc_mask, d.patches, flags));
    }
    return 0;
}

struct CrossvalArgs {
    std::string data;
    std::string config;
    std::string out;
    int jobs = 1;
};

int run_crossval_cmd(const CrossvalArgs& a) {
    const RunConfig cfg = load_config_or_default(a.config);
    const std::vector<WsiSample> dataset = load_dataset(a.data);
    const CrossvalOutcome outcome = run_crossval(dataset, cfg, a.jobs);
    fs::create_directories(a.out);
    write_crossval_outputs(a.out, outcome, cfg);
    std::cout << "chosen_k=" << outcome.chosen_k << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Skin-biopsy screening pipeline: band segmentation, superpixel patches, "
                 "capsule patch classifier, image-level decision"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic labeled dataset");
    synth->add_option("--out", synth_args.out, "Output dataset directory")->required();
    synth->add_option("--num", synth_args.num, "Number of images")->check(CLI::PositiveNumber);
    synth->add_option("--positive-frac", synth_args.positive_frac,
                      "Fraction of positive images");
    synth->add_option("--config", synth_args.config, "Config file for generator settings");
    CLI::Option* seed_opt = synth->add_option("--seed", synth_args.seed, "Generator seed");
    synth->add_flag("--force", synth_args.force, "Overwrite a non-empty output directory");

    TrainArgs seg_args;
    CLI::App* train_seg = app.add_subcommand("train-seg", "Train the band segmenter");
    train_seg->add_option("--data", seg_args.data, "Dataset directory")->required();
    train_seg->add_option("--config", seg_args.config, "Config file");
    train_seg->add_option("--out", seg_args.out, "Output model path")->required();
    train_seg->add_option("--holdout-fold", seg_args.holdout_fold, "Fold left untouched")
        ->check(CLI::Range(0, 2));

    TrainArgs caps_args;
    CLI::App* train_caps = app.add_subcommand("train-caps", "Train the patch classifier");
    train_caps->add_option("--data", caps_args.data, "Dataset directory")->required();
    train_caps->add_option("--config", caps_args.config, "Config file");
    train_caps->add_option("--out", caps_args.out, "Output model path")->required();
    train_caps->add_option("--holdout-fold", caps_args.holdout_fold, "Fold left untouched")
        ->check(CLI::Range(0, 2));

    DiagnoseArgs diag_args;
    CLI::App* diagnose = app.add_subcommand("diagnose", "Classify one whole-slide image");
    diagnose->add_option("--image", diag_args.image, "Input PNG")->required();
    diagnose->add_option("--seg", diag_args.seg_model, "Segmenter model")->required();
    diagnose->add_option("--caps", diag_args.caps_model, "Patch classifier model")->required();
    diagnose->add_option("--superpixels", diag_args.superpixels, "Superpixel count")
        ->check(CLI::PositiveNumber);
    diagnose->add_option("--compactness", diag_args.compactness, "Superpixel compactness");
    diagnose->add_option("--patch-size", diag_args.patch_size, "Patch window size")
        ->check(CLI::PositiveNumber);
    diagnose->add_option("--K", diag_args.k, "Top-K pooling size")->check(CLI::PositiveNumber);
    diagnose->add_option("--cutoff", diag_args.cutoff, "Patch probability cutoff");
    diagnose->add_option("--T", diag_args.threshold, "Positive-patch count threshold");
    diagnose->add_option("--overlay", diag_args.overlay, "Overlay PNG output path");

    CrossvalArgs cv_args;
    CLI::App* crossval = app.add_subcommand("crossval", "Run the three-fold evaluation");
    crossval->add_option("--data", cv_args.data, "Dataset directory")->required();
    crossval->add_option("--config", cv_args.config, "Config file");
    crossval->add_option("--out", cv_args.out, "Output directory")->required();
    crossval->add_option("--jobs", cv_args.jobs, "Concurrent fold workers")
        ->check(CLI::Range(1, 3));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        synth_args.seed_set = seed_opt->count() > 0;
        if (synth->parsed()) return run_synth(synth_args);
        if (train_seg->parsed()) return run_train_seg(seg_args);
        if (train_caps->parsed()) return run_train_caps(caps_args);
        if (diagnose->parsed()) return run_diagnose(diag_args);
        if (crossval->parsed()) return run_crossval_cmd(cv_args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
