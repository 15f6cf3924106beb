// Experiment driver: dataset generation, stage-wise training, sampling,
// evaluation, gradient checks and report formatting.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "moee/gradcheck.hpp"
#include "moee/harness.hpp"

using namespace moee;
namespace fs = std::filesystem;

namespace {

TrainConfig load_config(const std::string& path) {
    if (path.empty()) return TrainConfig{};
    return config_from_file(path);
}

int cmd_gen_data(const std::string& config_path, const std::string& out) {
    TrainConfig cfg = load_config(config_path);
    DatasetConfig dcfg = cfg.dataset;
    dcfg.H = cfg.image_hw;
    dcfg.W = cfg.image_hw;
    dcfg.seed = Rng::stream(cfg.seed, 1).next_u64();
    Dataset data = build_dataset(dcfg);
    write_dataset(data, out);

    // reproducible multimodal eval conditions alongside the images
    std::vector<EmotionCondition> conds;
    Rng crng(Rng::stream(cfg.seed, 55).next_u64());
    for (int emo = 0; emo < kNumBasicEmotions; ++emo) {
        conds.push_back(EmotionCondition::pure_label(static_cast<Emotion>(emo)));
        std::vector<double> w(kNumBasicEmotions, 0.0);
        w[static_cast<size_t>(emo)] = 1.0;
        const auto anchor = data.spec.anchors[static_cast<size_t>(emo)].vec();
        conds.push_back(EmotionCondition::text(
            synthetic_text_feature(w, cfg.e2l.d_text_raw, crng)));
        conds.push_back(EmotionCondition::audio(synthetic_audio_feature(
            {anchor[0], anchor[1], anchor[2], anchor[3]}, cfg.e2l.d_audio_raw, crng)));
    }
    write_condition_file((fs::path(out) / "eval_conditions.jsonl").string(), conds);
    std::cout << "wrote " << data.samples.size() << " samples and "
              << conds.size() << " eval conditions to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& stage,
              const std::string& variant, const std::string& resume, bool with_ablations) {
    TrainConfig cfg = load_config(config_path);
    fs::create_directories(cfg.out_dir);

    if (stage == "all") {
        EvalOptions ev;
        ev.ddim_steps = cfg.ddim_steps;
        auto res = run_experiment(cfg, with_ablations, ev);
        std::cout << "experiment written to " << res.out_dir << "\n";
        for (const auto& [name, rep] : res.reports)
            std::printf("  %-8s accuracy=%.3f compound_pass=%.3f separation=%.3f\n",
                        name.c_str(), rep.pure_accuracy, rep.compound_pass_fraction,
                        rep.latent_separation);
        return 0;
    }

    DatasetConfig dcfg = cfg.dataset;
    dcfg.H = cfg.image_hw;
    dcfg.W = cfg.image_hw;
    dcfg.seed = Rng::stream(cfg.seed, 1).next_u64();
    Dataset data = build_dataset(dcfg);

    const EmotionWiring wiring =
        variant == "wo-moee" ? EmotionWiring::PlainBlock : EmotionWiring::Moee;
    Model model = Model::init(cfg, wiring);
    if (!resume.empty()) model.load(resume, wiring == EmotionWiring::Moee);

    if (stage == "1") {
        Rng rng(Rng::stream(cfg.seed, 3).next_u64());
        write_metrics_csv((fs::path(cfg.out_dir) / "metrics_stage1.csv").string(),
                          train_stage1(model, data, rng));
        model.save((fs::path(cfg.out_dir) / "base.ckpt").string());
    } else if (stage == "2-experts") {
        Rng rng(Rng::stream(cfg.seed, 4).next_u64());
        const double p_noise = variant == "wo-mns" ? 0.0 : -1.0;
        write_metrics_csv((fs::path(cfg.out_dir) / "metrics_stage2_experts.csv").string(),
                          train_stage2_experts(model, data, rng, p_noise));
        model.save((fs::path(cfg.out_dir) / "experts.ckpt").string());
    } else if (stage == "2-gating") {
        Rng rng(Rng::stream(cfg.seed, 5).next_u64());
        write_metrics_csv((fs::path(cfg.out_dir) / "metrics_stage2_gating.csv").string(),
                          train_stage2_gating(model, data, rng, variant == "wo-gs"));
        model.save((fs::path(cfg.out_dir) / "full.ckpt").string());
    } else if (stage == "2-plain") {
        check(wiring == EmotionWiring::PlainBlock, "stage 2-plain requires --variant wo-moee");
        Rng rng(Rng::stream(cfg.seed, 10).next_u64());
        write_metrics_csv((fs::path(cfg.out_dir) / "metrics_stage2.csv").string(),
                          train_stage2_plain(model, data, rng));
        model.save((fs::path(cfg.out_dir) / "wo_moee.ckpt").string());
    } else {
        std::cerr << "unknown stage '" << stage << "'\n";
        return 1;
    }
    std::cout << "stage " << stage << " done, checkpoints in " << cfg.out_dir << "\n";
    return 0;
}

int cmd_sample(const std::string& config_path, const std::string& ckpt,
               const std::string& emotion, const std::string& compound, uint64_t seed,
               const std::string& out, int grid, const std::string& routing,
               const std::string& variant) {
    TrainConfig cfg = load_config(config_path);
    const EmotionWiring wiring =
        variant == "wo-moee" ? EmotionWiring::PlainBlock : EmotionWiring::Moee;
    Model model = Model::init(cfg, wiring);
    model.load(ckpt, wiring == EmotionWiring::Moee);

    std::vector<double> weights(kNumBasicEmotions, 0.0);
    int hard_index = -1;
    if (!compound.empty()) {
        // a:b:alpha
        const auto p1 = compound.find(':');
        const auto p2 = compound.find(':', p1 + 1);
        check(p1 != std::string::npos && p2 != std::string::npos,
              "--compound expects name:name:alpha");
        const int a = emotion_index(compound.substr(0, p1));
        const int b = emotion_index(compound.substr(p1 + 1, p2 - p1 - 1));
        const double alpha = std::stod(compound.substr(p2 + 1));
        check(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0,1]");
        weights[static_cast<size_t>(a)] = alpha;
        weights[static_cast<size_t>(b)] = 1.0 - alpha;
    } else {
        check(!emotion.empty(), "need --emotion or --compound");
        hard_index = emotion_index(emotion);
        weights[static_cast<size_t>(hard_index)] = 1.0;
    }

    RoutingMode mode = RoutingMode::soft();
    if (routing == "hard") {
        check(hard_index >= 0, "hard routing needs a pure --emotion");
        mode = RoutingMode::hard(hard_index);
    } else if (routing == "uniform") {
        mode = RoutingMode::uniform(cfg.num_experts);
    }

    const int n = grid * grid;
    const int px = cfg.image_hw * cfg.image_hw;
    Rng id_rng(Rng::stream(seed, 40).next_u64());
    std::vector<double> idf;
    for (int i = 0; i < n; ++i) {
        idf.push_back(id_rng.uniform(0.50, 0.68));
        idf.push_back(id_rng.uniform(0.50, 0.68));
        idf.push_back(id_rng.uniform(0.35, 0.65));
        idf.push_back(id_rng.uniform(0.35, 0.65));
    }
    Tensor ids = Tensor::from_data({n, 4}, idf);
    std::vector<double> cf;
    for (int i = 0; i < n; ++i) cf.insert(cf.end(), weights.begin(), weights.end());
    Tensor latent = model.e2l.forward_labels(Tensor::from_data({n, kNumBasicEmotions}, cf));

    EpsModel closure = [&](const Tensor& z, const std::vector<int>& t_idx) {
        return model.predict_eps(z, t_idx, ids, latent, mode);
    };
    Rng noise_rng(Rng::stream(seed, 41).next_u64());
    Tensor images =
        ddim_sample(closure, {n, px}, model.sched, cfg.ddim_steps, cfg.eta, noise_rng);

    std::vector<std::vector<double>> imgs;
    for (int i = 0; i < n; ++i) {
        std::vector<double> img(images.values().begin() + i * px,
                                images.values().begin() + (i + 1) * px);
        for (auto& v : img) v = std::min(1.0, std::max(0.0, v));
        imgs.push_back(std::move(img));
    }
    write_image_grid(out, imgs, cfg.image_hw, cfg.image_hw, grid);
    std::cout << "wrote " << n << " samples to " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt, const std::string& variant,
             const std::string& report_path, uint64_t seed, int n_per_emotion) {
    TrainConfig cfg = load_config(config_path);
    const EmotionWiring wiring =
        variant == "wo-moee" ? EmotionWiring::PlainBlock : EmotionWiring::Moee;
    Model model = Model::init(cfg, wiring);
    model.load(ckpt, wiring == EmotionWiring::Moee);

    EvalOptions opts;
    opts.seed = seed;
    opts.ddim_steps = cfg.ddim_steps;
    opts.n_per_emotion = n_per_emotion;
    opts.uniform_g = variant == "wo-gs";
    EvalReport rep = evaluate(model, EmotionSpec::standard(), opts);
    rep.variant = variant;

    std::printf("%-8s accuracy=%.3f residual=%.3f compound_pass=%.3f separation=%.3f id=%.3f\n",
                variant.c_str(), rep.pure_accuracy, rep.pure_residual_baseline,
                rep.compound_pass_fraction, rep.latent_separation, rep.identity_consistency);
    if (!report_path.empty()) {
        std::ofstream os(report_path, std::ios::trunc);
        os << rep.to_json().dump(2) << "\n";
        std::cout << "report written to " << report_path << "\n";
    }
    return 0;
}

int cmd_grad_check(int seeds) {
    GradCheckReport rep = run_grad_checks(seeds);
    for (const auto& b : rep.blocks)
        std::printf("%-28s max_rel_err=%.3e (%d partials)\n", b.name.c_str(), b.max_rel_err,
                    b.params_checked);
    std::printf("worst=%.3e over %d seeds/block in %.1fs -> %s\n", rep.worst, seeds, rep.seconds,
                rep.passed() ? "PASS" : "FAIL");
    return rep.passed() ? 0 : 1;
}

int cmd_report(const std::string& path) {
    std::ifstream is(path);
    check(is.good(), "cannot open report " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    if (j.contains("config_hash"))
        std::cout << "config hash: " << j["config_hash"] << "\n";
    const nlohmann::json variants = j.contains("variants") ? j["variants"] : nlohmann::json{{"single", j}};
    std::printf("%-8s %9s %9s %9s %9s %9s\n", "variant", "accuracy", "residual", "compound",
                "separation", "identity");
    for (auto it = variants.begin(); it != variants.end(); ++it) {
        const auto& v = it.value();
        std::printf("%-8s %9.3f %9.3f %9.3f %9.3f %9.3f\n", it.key().c_str(),
                    v.value("pure_accuracy", 0.0), v.value("pure_residual_baseline", 0.0),
                    v.value("compound_pass_fraction", 0.0), v.value("latent_separation", 0.0),
                    v.value("identity_consistency", 0.0));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mixture-of-emotion-experts diffusion experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "dataset";
    auto* gen = app.add_subcommand("gen-data", "render the synthetic face dataset");
    gen->add_option("--config", config_path, "config JSON");
    gen->add_option("--out", out_dir, "output directory")->required();

    std::string stage = "all", variant = "full", resume;
    bool with_ablations = false;
    auto* train = app.add_subcommand("train", "run training stages");
    train->add_option("--config", config_path, "config JSON");
    train->add_option("--stage", stage, "1 | 2-experts | 2-gating | 2-plain | all");
    train->add_option("--variant", variant, "full | wo-moee | wo-gs | wo-mns");
    train->add_option("--resume", resume, "checkpoint to start from");
    train->add_flag("--ablations", with_ablations, "stage all: also train the ablation variants");

    std::string ckpt, emotion, compound, out = "samples.pgm", routing = "soft";
    uint64_t seed = 7;
    int grid = 4;
    auto* sample = app.add_subcommand("sample", "generate image grids from a checkpoint");
    sample->add_option("--config", config_path, "config JSON");
    sample->add_option("--ckpt", ckpt, "checkpoint")->required();
    sample->add_option("--emotion", emotion, "pure emotion name");
    sample->add_option("--compound", compound, "a:b:alpha compound condition");
    sample->add_option("--seed", seed, "sampling seed");
    sample->add_option("--out", out, "output PGM");
    sample->add_option("--grid", grid, "grid side (grid^2 samples)");
    sample->add_option("--routing", routing, "soft | hard | uniform");
    sample->add_option("--variant", variant, "full | wo-moee");

    std::string report_path;
    int n_per_emotion = 64;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--config", config_path, "config JSON");
    eval->add_option("--ckpt", ckpt, "checkpoint")->required();
    eval->add_option("--variant", variant, "full | wo-moee | wo-gs | wo-mns");
    eval->add_option("--report", report_path, "write report JSON here");
    eval->add_option("--seed", seed, "evaluation seed");
    eval->add_option("--n-per-emotion", n_per_emotion, "samples per emotion");

    int seeds = 10;
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
    gc->add_option("--seeds", seeds, "seeds per block");

    std::string in_report;
    auto* rp = app.add_subcommand("report", "pretty-print a report JSON");
    rp->add_option("--in", in_report, "report JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir);
        if (train->parsed()) return cmd_train(config_path, stage, variant, resume, with_ablations);
        if (sample->parsed())
            return cmd_sample(config_path, ckpt, emotion, compound, seed, out, grid, routing,
                              variant);
        if (eval->parsed())
            return cmd_eval(config_path, ckpt, variant, report_path, seed, n_per_emotion);
        if (gc->parsed()) return cmd_grad_check(seeds);
        if (rp->parsed()) return cmd_report(in_report);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
