#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "vla/eval.hpp"
#include "vla/model.hpp"
#include "vla/train.hpp"

using namespace vla;

namespace {

std::unique_ptr<PolicyModel> load_policy(const std::string& ckpt_path, const std::string& data_path) {
    Dataset ds = read_dataset(data_path);
    Checkpoint ck = read_checkpoint(ckpt_path);
    ModelConfig mc;
    mc.use_visual_cot = ck.meta.at("config").value("use_visual_cot", true);
    mc.use_linguistic_cot = ck.meta.at("config").value("use_linguistic_cot", true);
    mc.init_seed = std::stoull(ck.meta.at("config").at("seed").get<std::string>(), nullptr, 16);
    mc.teacher_mu = ds.manifest.teacher_mu;
    mc.teacher_sigma = ds.manifest.teacher_sigma;
    auto model = PolicyModel::create(mc, Vocabulary::from_json(ds.manifest.vocab));
    load_model_params(*model, ck);
    return model;
}

void print_eval(const EvalResult& r) {
    const char* names[3] = {"place_single", "place_two", "place_three"};
    std::printf("%-14s %9s %9s %19s %10s\n", "template", "success", "rate", "wilson95", "steps");
    for (int t = 0; t < 3; ++t) {
        const auto& tr = r.per_template[static_cast<std::size_t>(t)];
        std::printf("%-14s %4d/%-4d %8.1f%% [%6.3f, %6.3f] %10.1f\n", names[t], tr.successes,
                    tr.episodes, tr.rate * 100.0, tr.interval.lo, tr.interval.hi, tr.mean_steps);
    }
    std::printf("%-14s %19.1f%%\n", "average", r.average * 100.0);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale vision-language-action policy with parallel latent reasoning"};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "Generate an expert demonstration dataset");
    std::uint64_t gen_seed = 0;
    int gen_episodes = 2000;
    std::string gen_out = "data.bin";
    gen->add_option("--seed", gen_seed, "Generation seed");
    gen->add_option("--episodes", gen_episodes, "Number of episode records");
    gen->add_option("--out", gen_out, "Output dataset path");

    // ---- pretrain-decoder ----
    auto* pre = app.add_subcommand("pretrain-decoder", "Pretrain and freeze the text decoder");
    std::uint64_t pre_seed = 0;
    int pre_rollouts = 2400, pre_steps = 4000;
    std::string pre_out = "decoder.bin";
    pre->add_option("--seed", pre_seed, "Seed");
    pre->add_option("--rollouts", pre_rollouts, "Corpus rollouts (>= 10k strings)");
    pre->add_option("--steps", pre_steps, "Max optimization steps");
    pre->add_option("--out", pre_out, "Output checkpoint path");

    // ---- train ----
    auto* tr = app.add_subcommand("train", "Joint training of the full policy");
    std::string tr_config;
    TrainConfig tc;
    tr->add_option("--config", tr_config, "key=value config file");
    tr->add_option("--data", tc.data, "Dataset path");
    tr->add_option("--out", tc.out, "Checkpoint output path");
    tr->add_option("--metrics-csv", tc.metrics_csv, "Metrics CSV path");
    tr->add_option("--decoder", tc.decoder_ckpt, "Pretrained frozen decoder checkpoint");
    tr->add_option("--resume", tc.resume, "Resume from checkpoint");
    tr->add_option("--steps", tc.steps, "Optimization steps");
    tr->add_option("--batch", tc.batch, "Batch size");
    tr->add_option("--lr", tc.lr, "Learning rate");
    tr->add_option("--seed", tc.seed, "Seed");
    tr->add_option("--lambda-vis", tc.lambda_vis, "Visual loss weight");
    tr->add_option("--lambda-lin", tc.lambda_lin, "Linguistic loss weight");
    tr->add_option("--lambda-act", tc.lambda_act, "Action loss weight");
    tr->add_flag("--no-visual-cot{false}", tc.use_visual_cot, "Disable the visual stream");
    tr->add_flag("--no-linguistic-cot{false}", tc.use_linguistic_cot,
                 "Disable the linguistic stream");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "Closed-loop success-rate evaluation");
    std::string ev_ckpt, ev_data, ev_policy = "model";
    int ev_episodes = 100, ev_sampler_steps = 10;
    std::uint64_t ev_seed = 9000;
    ev->add_option("--ckpt", ev_ckpt, "Model checkpoint");
    ev->add_option("--data", ev_data, "Dataset path (manifest/vocab source)");
    ev->add_option("--episodes", ev_episodes, "Episodes per template");
    ev->add_option("--seed", ev_seed, "Evaluation seed");
    ev->add_option("--policy", ev_policy, "model|expert|random");
    ev->add_option("--sampler-steps", ev_sampler_steps, "Euler integration steps");

    // ---- bench-latency ----
    auto* be = app.add_subcommand("bench-latency", "Parallel vs AR-CoT latency breakdown");
    BenchConfig bc;
    std::string be_out = "latency.json";
    int be_ar_k = 64;
    be->add_option("--reps", bc.reps, "Timed repetitions per variant");
    be->add_option("--warmup", bc.warmup, "Discarded warmup repetitions");
    be->add_option("--ar-reps", bc.ar_reps, "Timed repetitions per AR variant");
    be->add_option("--ar-k", be_ar_k, "Primary AR decode length");
    be->add_option("--seed", bc.seed, "Seed");
    be->add_option("--out", be_out, "Report JSON path");

    // ---- ablate ----
    auto* ab = app.add_subcommand("ablate", "Train and evaluate the four CoT variants");
    std::string ab_config;
    AblationConfig ac;
    ab->add_option("--config", ab_config, "key=value config file for the shared trainer");
    ab->add_option("--data", ac.base.data, "Dataset path");
    ab->add_option("--steps", ac.base.steps, "Training steps per variant");
    ab->add_option("--seed", ac.base.seed, "Shared seed");
    ab->add_option("--eval-episodes", ac.eval_episodes, "Episodes per template");
    ab->add_option("--eval-seed", ac.eval_seed, "Evaluation seed");
    ab->add_option("--out-dir", ac.out_dir, "Output directory");

    // ---- probe-viz ----
    auto* pv = app.add_subcommand("probe-viz", "Train the depth probe and export PGM maps");
    std::string pv_ckpt, pv_data, pv_holdout, pv_outdir = ".";
    int pv_episode = 0, pv_steps = 1500;
    pv->add_option("--ckpt", pv_ckpt, "Model checkpoint");
    pv->add_option("--data", pv_data, "Training dataset (probe fit)");
    pv->add_option("--holdout", pv_holdout, "Held-out dataset (correlation report)");
    pv->add_option("--episode", pv_episode, "Episode index to export");
    pv->add_option("--steps", pv_steps, "Probe optimization steps");
    pv->add_option("--out-dir", pv_outdir, "Output directory");

    // ---- decode-cot ----
    auto* dc = app.add_subcommand("decode-cot", "Greedy-decode the latent linguistic CoT");
    std::string dc_ckpt, dc_data;
    int dc_episode = 0;
    dc->add_option("--ckpt", dc_ckpt, "Model checkpoint");
    dc->add_option("--data", dc_data, "Dataset path");
    dc->add_option("--episode", dc_episode, "Episode index");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            Dataset ds = generate_dataset(gen_seed, gen_episodes);
            write_dataset(ds, gen_out);
            std::printf("wrote %d episodes to %s (templates %d/%d/%d)\n", ds.manifest.episodes,
                        gen_out.c_str(), ds.manifest.template_counts[0],
                        ds.manifest.template_counts[1], ds.manifest.template_counts[2]);
        } else if (pre->parsed()) {
            double ppl = pretrain_decoder_to_file(pre_seed, pre_rollouts, pre_steps, pre_out);
            std::printf("frozen decoder written to %s (held-out ppl %.4f)\n", pre_out.c_str(), ppl);
        } else if (tr->parsed()) {
            TrainConfig cfg = tc;
            if (!tr_config.empty()) {
                // File values fill in everything the command line left untouched.
                TrainConfig file_cfg = load_train_config(tr_config);
                if (tr->get_option("--data")->count() == 0) cfg.data = file_cfg.data;
                if (tr->get_option("--out")->count() == 0) cfg.out = file_cfg.out;
                if (tr->get_option("--metrics-csv")->count() == 0)
                    cfg.metrics_csv = file_cfg.metrics_csv;
                if (tr->get_option("--decoder")->count() == 0)
                    cfg.decoder_ckpt = file_cfg.decoder_ckpt;
                if (tr->get_option("--resume")->count() == 0) cfg.resume = file_cfg.resume;
                if (tr->get_option("--steps")->count() == 0) cfg.steps = file_cfg.steps;
                if (tr->get_option("--batch")->count() == 0) cfg.batch = file_cfg.batch;
                if (tr->get_option("--lr")->count() == 0) cfg.lr = file_cfg.lr;
                if (tr->get_option("--seed")->count() == 0) cfg.seed = file_cfg.seed;
                if (tr->get_option("--lambda-vis")->count() == 0)
                    cfg.lambda_vis = file_cfg.lambda_vis;
                if (tr->get_option("--lambda-lin")->count() == 0)
                    cfg.lambda_lin = file_cfg.lambda_lin;
                if (tr->get_option("--lambda-act")->count() == 0)
                    cfg.lambda_act = file_cfg.lambda_act;
                if (tr->get_option("--no-visual-cot")->count() == 0)
                    cfg.use_visual_cot = file_cfg.use_visual_cot;
                if (tr->get_option("--no-linguistic-cot")->count() == 0)
                    cfg.use_linguistic_cot = file_cfg.use_linguistic_cot;
            }
            TrainResult res = train(cfg);
            const MetricsRow& last = res.metrics.empty() ? MetricsRow{} : res.metrics.back();
            std::printf("trained %zu steps; final l_total %.6f; checkpoint %s\n",
                        res.metrics.size(), last.l_total, res.checkpoint.c_str());
        } else if (ev->parsed()) {
            PolicyKind kind = PolicyKind::model;
            if (ev_policy == "expert") kind = PolicyKind::expert;
            else if (ev_policy == "random") kind = PolicyKind::random;
            else if (ev_policy != "model") throw ConfigError("unknown policy: " + ev_policy);
            std::unique_ptr<PolicyModel> model;
            if (kind == PolicyKind::model) {
                if (ev_ckpt.empty() || ev_data.empty())
                    throw ConfigError("eval --policy model requires --ckpt and --data");
                model = load_policy(ev_ckpt, ev_data);
            }
            EvalResult r = closed_loop_eval(model.get(), kind, ev_episodes, ev_seed,
                                            SamplerConfig{ev_sampler_steps});
            print_eval(r);
        } else if (be->parsed()) {
            if (std::find(bc.ar_ks.begin(), bc.ar_ks.end(), be_ar_k) == bc.ar_ks.end())
                bc.ar_ks.push_back(be_ar_k);
            bc.primary_ar_k = be_ar_k;
            LatencyReport rep = bench_latency(bc);
            std::ofstream os(be_out);
            os << rep.to_json().dump(2) << "\n";
            std::printf("%-14s %14s %14s %12s %10s\n", "variant", "backbone_ms", "action_ms",
                        "total_ms", "forwards");
            auto row = [](const char* name, const VariantStats& v) {
                std::printf("%-14s %14.3f %14.3f %12.3f %10llu\n", name, v.backbone_ms_median,
                            v.action_ms_median, v.total_ms_median,
                            static_cast<unsigned long long>(v.forward_count));
            };
            row("non_cot", rep.non_cot);
            row("parallel_cot", rep.parallel_cot);
            for (const auto& [k, v] : rep.ar_cot)
                row(("ar_cot(K=" + std::to_string(k) + ")").c_str(), v);
            std::printf("AR fit: total_ms = %.4f*K + %.4f (R^2 %.4f)\n", rep.ar_slope_ms_per_token,
                        rep.ar_intercept_ms, rep.ar_fit_r2);
            std::printf("report written to %s\n", be_out.c_str());
        } else if (ab->parsed()) {
            if (!ab_config.empty()) {
                TrainConfig file_cfg = load_train_config(ab_config);
                if (ab->get_option("--data")->count() == 0) ac.base.data = file_cfg.data;
                if (ab->get_option("--steps")->count() == 0) ac.base.steps = file_cfg.steps;
                if (ab->get_option("--seed")->count() == 0) ac.base.seed = file_cfg.seed;
            }
            AblationResult res = run_ablation(ac);
            std::ofstream os(ac.out_dir + "/ablation.csv");
            os << res.csv;
            std::printf("%-8s %-11s %13s %10s %12s %9s\n", "visual", "linguistic", "place_single",
                        "place_two", "place_three", "average");
            for (const AblationRow& r : res.rows)
                std::printf("%-8d %-11d %12.1f%% %9.1f%% %11.1f%% %8.1f%%\n", r.visual ? 1 : 0,
                            r.linguistic ? 1 : 0, r.success[0] * 100, r.success[1] * 100,
                            r.success[2] * 100, r.average * 100);
            std::printf("table written to %s/ablation.csv\n", ac.out_dir.c_str());
        } else if (pv->parsed()) {
            if (pv_ckpt.empty() || pv_data.empty())
                throw ConfigError("probe-viz requires --ckpt and --data");
            auto model = load_policy(pv_ckpt, pv_data);
            Dataset ds = read_dataset(pv_data);
            ParamStore probe_store;
            Rng prng(7);
            DepthProbe probe = DepthProbe::create(probe_store, "probe", prng);
            ProbeTrainConfig pcfg;
            pcfg.steps = pv_steps;
            ProbeTrainResult res = train_probe(*model, ds, probe_store, probe, pcfg);
            std::printf("probe training MSE %.6f\n", res.train_mse);
            if (!pv_holdout.empty()) {
                Dataset hold = read_dataset(pv_holdout);
                std::printf("held-out depth correlation r = %.4f\n",
                            probe_pearson(*model, probe, hold));
            }
            const Episode& ep = ds.episodes.at(static_cast<std::size_t>(pv_episode));
            BatchItem it = episode_to_item(ep);
            std::vector<double> pred =
                probe_decode(model_h_vis_values(*model, it.image, it.instr_ids), probe);
            write_pgm(pv_outdir + "/probe_pred.pgm", pred, kImageHW, kImageHW);
            write_pgm(pv_outdir + "/probe_truth.pgm", it.depth, kImageHW, kImageHW);
            std::printf("wrote %s/probe_pred.pgm and %s/probe_truth.pgm\n", pv_outdir.c_str(),
                        pv_outdir.c_str());
        } else if (dc->parsed()) {
            if (dc_ckpt.empty() || dc_data.empty())
                throw ConfigError("decode-cot requires --ckpt and --data");
            auto model = load_policy(dc_ckpt, dc_data);
            Dataset ds = read_dataset(dc_data);
            const Episode& ep = ds.episodes.at(static_cast<std::size_t>(dc_episode));
            BatchItem it = episode_to_item(ep);
            std::vector<int> ids = greedy_decode(model_h_lin_values(*model, it.image, it.instr_ids),
                                                 kDvlm, model->pproj, model->decoder);
            std::printf("decoded:   %s\n", model->vocab.detokenize(ids).c_str());
            std::printf("reference: %s\n", model->vocab.detokenize(it.cot_ids).c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
