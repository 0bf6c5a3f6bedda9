#include "vla/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace vla {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string u64_hex(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t hex_u64(const std::string& s) { return std::stoull(s, nullptr, 16); }

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv_mix(std::uint64_t& h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xFF;
        h *= kFnvPrime;
    }
}

std::string format_row(const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.3f", r.step, r.l_vis, r.l_lin,
                  r.l_act, r.l_total, r.wall_ms);
    return buf;
}

}  // namespace

void TrainConfig::validate() const {
    if (data.empty()) throw ConfigError("train: data path is required");
    if (lambda_vis < 0 || lambda_lin < 0 || lambda_act < 0)
        throw ConfigError("train: loss weights must be non-negative");
    if (batch <= 0 || steps < 0) throw ConfigError("train: batch/steps must be positive");
}

std::vector<std::string> generate_cot_corpus(std::uint64_t seed, int rollouts) {
    std::vector<std::string> corpus;
    for (int r = 0; r < rollouts; ++r) {
        TaskTemplate tmpl = static_cast<TaskTemplate>(r % 3);
        Rng rng = Rng::stream(seed ^ 0xC07C0835ull, static_cast<std::uint64_t>(r));
        SceneSample s = sample_scene(rng, tmpl);
        Rollout ro = expert_rollout(s.scene, s.task);
        for (const RolloutFrame& f : ro.frames) corpus.push_back(f.cot);
    }
    return corpus;
}

double pretrain_decoder_to_file(std::uint64_t seed, int corpus_rollouts, int steps,
                                const std::string& out_path) {
    Vocabulary vocab = Vocabulary::standard();
    std::vector<std::string> corpus = generate_cot_corpus(seed, corpus_rollouts);
    ParamStore store;
    Rng rng = Rng::stream(seed, 0xDEC);
    FrozenDecoder dec = FrozenDecoder::create(store, "decoder", vocab.size(), rng);
    DecoderPretrainConfig cfg;
    cfg.steps = steps;
    cfg.seed = seed;
    DecoderPretrainResult res = pretrain_decoder(dec, corpus, vocab, cfg);

    Checkpoint ck;
    ck.meta["kind"] = "frozen_decoder";
    ck.meta["holdout_ppl"] = res.holdout_ppl;
    ck.meta["steps_run"] = res.steps_run;
    ck.meta["seed"] = u64_hex(seed);
    ck.meta["vocab"] = vocab.to_json();
    for (const Param* p : store.all()) ck.tensors.emplace(p->name, std::make_pair(p->shape, p->value));
    write_checkpoint(ck, out_path);
    return res.holdout_ppl;
}

namespace {

// Loads "decoder.*" tensors into the model store and freezes them.
void load_frozen_decoder(PolicyModel& model, const Checkpoint& ck) {
    for (Param* p : model.store.with_prefix("decoder")) {
        auto it = ck.tensors.find(p->name);
        if (it == ck.tensors.end()) throw FormatError("decoder checkpoint missing " + p->name);
        if (it->second.first != p->shape)
            throw FormatError("decoder tensor " + p->name + " shape mismatch");
        p->value = it->second.second;
        p->frozen = true;
    }
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
    cfg.validate();
    Dataset ds = read_dataset(cfg.data);
    if (ds.episodes.empty()) throw ContractError("train: dataset is empty");
    Vocabulary vocab = Vocabulary::from_json(ds.manifest.vocab);

    ModelConfig mc;
    mc.use_visual_cot = cfg.use_visual_cot;
    mc.use_linguistic_cot = cfg.use_linguistic_cot;
    mc.init_seed = cfg.seed;
    mc.teacher_mu = ds.manifest.teacher_mu;
    mc.teacher_sigma = ds.manifest.teacher_sigma;
    auto model = PolicyModel::create(mc, vocab);

    TrainResult result;
    int start_step = 0;
    Rng data_rng = Rng::stream(cfg.seed, 0xDA7A);
    Rng flow_rng = Rng::stream(cfg.seed, 0xF108);
    std::uint64_t data_hash = kFnvOffset;

    if (!cfg.resume.empty()) {
        Checkpoint ck = read_checkpoint(cfg.resume);
        load_model_params(*model, ck);
        start_step = ck.meta.at("step").get<int>();
        data_rng.set_state(hex_u64(ck.meta.at("data_rng").get<std::string>()));
        flow_rng.set_state(hex_u64(ck.meta.at("flow_rng").get<std::string>()));
        data_hash = hex_u64(ck.meta.at("data_hash").get<std::string>());
        result.decoder_ppl = ck.meta.value("decoder_ppl", 0.0);
        if (!model->decoder.frozen())
            throw ContractError("resume checkpoint lacks a frozen decoder");
    } else if (!cfg.decoder_ckpt.empty()) {
        load_frozen_decoder(*model, read_checkpoint(cfg.decoder_ckpt));
    } else if (cfg.use_linguistic_cot) {
        // Self-contained path: pretrain the frozen decoder from scratch.
        std::vector<std::string> corpus = generate_cot_corpus(cfg.seed, 2400);
        DecoderPretrainConfig dcfg;
        dcfg.steps = cfg.decoder_pretrain_steps;
        dcfg.seed = cfg.seed;
        DecoderPretrainResult res = pretrain_decoder(model->decoder, corpus, vocab, dcfg);
        result.decoder_ppl = res.holdout_ppl;
    } else {
        // The linguistic stream is off and no decoder was supplied: the
        // decoder is unused, freeze it as initialized so no optimizer sees it.
        for (Param* p : model->store.with_prefix("decoder")) p->frozen = true;
    }

    Adam opt(model->trainable_params(), AdamConfig{.lr = cfg.lr});
    if (!cfg.resume.empty()) {
        Checkpoint ck = read_checkpoint(cfg.resume);
        opt.set_t(ck.meta.at("adam_t").get<std::uint64_t>());
        const auto& ps = opt.params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            auto mit = ck.tensors.find("adam.m." + ps[i]->name);
            auto vit = ck.tensors.find("adam.v." + ps[i]->name);
            if (mit == ck.tensors.end() || vit == ck.tensors.end())
                throw FormatError("resume checkpoint missing Adam state for " + ps[i]->name);
            opt.m(i) = mit->second.second;
            opt.v(i) = vit->second.second;
        }
    }

    auto save = [&](int step, const std::string& path) {
        nlohmann::json meta;
        meta["step"] = step;
        meta["adam_t"] = opt.t();
        meta["data_rng"] = u64_hex(data_rng.state());
        meta["flow_rng"] = u64_hex(flow_rng.state());
        meta["data_hash"] = u64_hex(data_hash);
        meta["decoder_ppl"] = result.decoder_ppl;
        meta["config"] = {{"lambda_vis", cfg.lambda_vis}, {"lambda_lin", cfg.lambda_lin},
                          {"lambda_act", cfg.lambda_act}, {"lr", cfg.lr},
                          {"batch", cfg.batch},           {"steps", cfg.steps},
                          {"seed", u64_hex(cfg.seed)},    {"use_visual_cot", cfg.use_visual_cot},
                          {"use_linguistic_cot", cfg.use_linguistic_cot}};
        Checkpoint ck = model_checkpoint(*model, meta);
        const auto& ps = opt.params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            ck.tensors.emplace("adam.m." + ps[i]->name, std::make_pair(ps[i]->shape, opt.m(i)));
            ck.tensors.emplace("adam.v." + ps[i]->name, std::make_pair(ps[i]->shape, opt.v(i)));
        }
        write_checkpoint(ck, path);
    };

    std::ofstream csv;
    if (!cfg.metrics_csv.empty()) {
        csv.open(cfg.metrics_csv, start_step == 0 ? std::ios::trunc : std::ios::app);
        if (!csv) throw FormatError("cannot open metrics csv: " + cfg.metrics_csv);
        if (start_step == 0) csv << "step,l_vis,l_lin,l_act,l_total,wall_ms\n";
    }

    for (int step = start_step; step < cfg.steps; ++step) {
        auto t0 = Clock::now();
        std::vector<BatchItem> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch));
        for (int b = 0; b < cfg.batch; ++b) {
            std::uint64_t idx = data_rng.range(ds.episodes.size());
            fnv_mix(data_hash, idx);
            batch.push_back(episode_to_item(ds.episodes[idx]));
        }
        FlowDraws draws = draw_flow(flow_rng, cfg.batch);
        Tape tape;
        JointLossResult res =
            joint_loss(tape, *model, batch, draws, cfg.lambda_vis, cfg.lambda_lin, cfg.lambda_act);
        if (!std::isfinite(res.parts.l_total))
            throw TrainingError("non-finite loss at step " + std::to_string(step) + " (l_vis=" +
                                std::to_string(res.parts.l_vis) + ", l_lin=" +
                                std::to_string(res.parts.l_lin) + ", l_act=" +
                                std::to_string(res.parts.l_act) + ")");
        tape.backward(res.total);
        opt.step();

        MetricsRow row{step, res.parts.l_vis, res.parts.l_lin, res.parts.l_act, res.parts.l_total,
                       ms_since(t0)};
        result.metrics.push_back(row);
        if (csv.is_open()) csv << format_row(row) << "\n";
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
            step + 1 < cfg.steps)
            save(step + 1, cfg.out);
    }
    if (csv.is_open()) csv.flush();
    save(cfg.steps, cfg.out);
    result.checkpoint = cfg.out;
    result.data_order_hash = data_hash;
    return result;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::size_t a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        std::size_t b = line.find_last_not_of(" \t\r");
        line = line.substr(a, b - a + 1);
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        auto trim = [](std::string s) {
            std::size_t x = s.find_first_not_of(" \t");
            std::size_t y = s.find_last_not_of(" \t");
            return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
        };
        kv[trim(key)] = trim(value);
    }
    return kv;
}

void apply_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value) {
    auto as_bool = [&](const std::string& v) {
        if (v == "1" || v == "true") return true;
        if (v == "0" || v == "false") return false;
        throw ConfigError("bad boolean for " + key + ": " + v);
    };
    if (key == "data") cfg.data = value;
    else if (key == "out") cfg.out = value;
    else if (key == "metrics_csv") cfg.metrics_csv = value;
    else if (key == "decoder_ckpt") cfg.decoder_ckpt = value;
    else if (key == "resume") cfg.resume = value;
    else if (key == "lambda_vis") cfg.lambda_vis = std::stod(value);
    else if (key == "lambda_lin") cfg.lambda_lin = std::stod(value);
    else if (key == "lambda_act") cfg.lambda_act = std::stod(value);
    else if (key == "lr") cfg.lr = std::stod(value);
    else if (key == "batch") cfg.batch = std::stoi(value);
    else if (key == "steps") cfg.steps = std::stoi(value);
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "use_visual_cot") cfg.use_visual_cot = as_bool(value);
    else if (key == "use_linguistic_cot") cfg.use_linguistic_cot = as_bool(value);
    else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoi(value);
    else if (key == "decoder_pretrain_steps") cfg.decoder_pretrain_steps = std::stoi(value);
    else throw ConfigError("unknown config key: " + key);
}

TrainConfig load_train_config(const std::string& path) {
    TrainConfig cfg;
    for (const auto& [k, v] : parse_config_file(path)) apply_config_kv(cfg, k, v);
    return cfg;
}

std::string metrics_csv_string(const std::vector<MetricsRow>& rows) {
    std::string out = "step,l_vis,l_lin,l_act,l_total,wall_ms\n";
    for (const MetricsRow& r : rows) {
        out += format_row(r);
        out += "\n";
    }
    return out;
}

}  // namespace vla
