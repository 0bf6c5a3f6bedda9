#include "vla/linguistic_cot.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vla {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

Vocabulary Vocabulary::standard() {
    Vocabulary v;
    v.words_ = {"<pad>", "<bos>", "<eos>"};
    for (const std::string& w : grammar_words()) v.words_.push_back(w);
    for (std::size_t i = 0; i < v.words_.size(); ++i)
        v.ids_.emplace(v.words_[i], static_cast<int>(i));
    return v;
}

nlohmann::json Vocabulary::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [w, id] : ids_) j[w] = id;
    return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    Vocabulary v;
    v.words_.resize(j.size());
    for (auto it = j.begin(); it != j.end(); ++it) {
        int id = it.value().get<int>();
        if (id < 0 || id >= static_cast<int>(v.words_.size()))
            throw FormatError("vocabulary id " + std::to_string(id) + " out of range");
        v.words_[static_cast<std::size_t>(id)] = it.key();
        v.ids_.emplace(it.key(), id);
    }
    return v;
}

int Vocabulary::id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw VocabError("unknown word: '" + word + "'");
    return it->second;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size())
        throw VocabError("token id " + std::to_string(id) + " out of vocabulary");
    return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
    std::vector<int> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(id(w));
    return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == kPad || id == kBos || id == kEos) continue;
        if (!out.empty()) out += ' ';
        out += word(id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frozen decoder
// ---------------------------------------------------------------------------

FrozenDecoder FrozenDecoder::create(ParamStore& store, const std::string& prefix, int vocab,
                                    Rng& rng) {
    FrozenDecoder d;
    d.vocab = vocab;
    d.cfg = AttentionConfig{kDecDim, kDecHeads, true};
    d.embedder = TokenEmbedder::create(store, prefix + ".emb", vocab, kDecMaxPos, kDecDim, rng);
    for (int i = 0; i < kDecLayers; ++i)
        d.blocks.push_back(TransformerBlockParams::create(
            store, prefix + ".block" + std::to_string(i), kDecDim, rng));
    d.out_w = &store.create_normal(prefix + ".out.w", {kDecDim, vocab}, rng, 0.02);
    d.out_b = &store.create_zeros(prefix + ".out.b", {vocab});
    return d;
}

namespace {

std::vector<Param*> decoder_params(const FrozenDecoder& d) {
    std::vector<Param*> ps{d.embedder.table, d.embedder.pos, d.out_w, d.out_b};
    for (const TransformerBlockParams& b : d.blocks) {
        ps.push_back(b.ln1_gamma);
        ps.push_back(b.ln1_beta);
        ps.push_back(b.attn.wq);
        ps.push_back(b.attn.wk);
        ps.push_back(b.attn.wv);
        ps.push_back(b.attn.wo);
        ps.push_back(b.ln2_gamma);
        ps.push_back(b.ln2_beta);
        ps.push_back(b.w1);
        ps.push_back(b.w2);
    }
    return ps;
}

// [bos, y_0 .. y_{L-2}] padded to len, plus aligned targets/weights.
struct TeacherForced {
    std::vector<int> input_ids;
    std::vector<int> targets;
    std::vector<double> weights;
};

TeacherForced teacher_forcing(const std::vector<int>& y, int len) {
    TeacherForced tf;
    tf.input_ids.assign(static_cast<std::size_t>(len), Vocabulary::kPad);
    tf.targets.assign(static_cast<std::size_t>(len), Vocabulary::kPad);
    tf.weights.assign(static_cast<std::size_t>(len), 0.0);
    int l = static_cast<int>(y.size());
    tf.input_ids[0] = Vocabulary::kBos;
    for (int i = 0; i + 1 < l && i + 1 < len; ++i) tf.input_ids[static_cast<std::size_t>(i) + 1] = y[static_cast<std::size_t>(i)];
    for (int i = 0; i < l && i < len; ++i) {
        tf.targets[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)];
        tf.weights[static_cast<std::size_t>(i)] = 1.0;
    }
    return tf;
}

// Prefix rows carry positional rows 0..kPrefixLen-1 plus the given content
// (zeros during pretraining, projected h_lin during prefixed training).
Tensor prefix_positions(Tape& tape, const FrozenDecoder& dec, int batch) {
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(batch) * kPrefixLen);
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < kPrefixLen; ++i) ids.push_back(i);
    return tape.gather_rows(tape.leaf(*dec.embedder.pos), ids);
}

}  // namespace

Tensor decoder_logits(Tape& tape, const FrozenDecoder& dec, Tensor embs, int batch, int t) {
    Mask mask = causal_mask(t);
    Tensor h = embs;
    for (const TransformerBlockParams& b : dec.blocks)
        h = transformer_block_batched(tape, h, b, dec.cfg, mask, batch, t, false);
    return tape.add_bias(tape.matmul(h, tape.leaf(*dec.out_w)), tape.leaf(*dec.out_b));
}

namespace {

// Shared by pretraining (zero prefix) and prefixed training/eval.
// cot_ids rows are the stored strings; eos is appended here.
Tensor decoder_ce_batched(Tape& tape, const FrozenDecoder& dec, Tensor* prefix_content, int batch,
                          const std::vector<std::vector<int>>& cot_ids) {
    const int t_text = 1 + kCotMaxLen;              // bos + teacher-forced tokens
    const int t_total = kPrefixLen + t_text;
    Tensor prefix = prefix_positions(tape, dec, batch);
    if (prefix_content != nullptr) prefix = tape.add(prefix, *prefix_content);

    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(batch) * 2);
    std::vector<std::vector<int>> targets(static_cast<std::size_t>(batch));
    std::vector<std::vector<double>> weights(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        std::vector<int> y = cot_ids[static_cast<std::size_t>(b)];
        if (y.empty()) throw ContractError("linguistic loss: empty target sequence");
        y.push_back(Vocabulary::kEos);
        TeacherForced tf = teacher_forcing(y, t_text);
        targets[static_cast<std::size_t>(b)] = std::move(tf.targets);
        weights[static_cast<std::size_t>(b)] = std::move(tf.weights);
        rows.push_back(tape.row_slice(prefix, b * kPrefixLen, (b + 1) * kPrefixLen));
        rows.push_back(dec.embedder.embed(tape, tf.input_ids, kPrefixLen));
    }
    Tensor embs = tape.concat_rows(rows);
    Tensor logits = decoder_logits(tape, dec, embs, batch, t_total);

    std::vector<Tensor> losses;
    losses.reserve(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        Tensor text_logits =
            tape.row_slice(logits, b * t_total + kPrefixLen, (b + 1) * t_total);
        losses.push_back(tape.cross_entropy(text_logits, targets[static_cast<std::size_t>(b)],
                                            weights[static_cast<std::size_t>(b)]));
    }
    return tape.mean_all(tape.concat_rows(losses));
}

double holdout_perplexity(const FrozenDecoder& dec, const std::vector<std::vector<int>>& holdout) {
    // exp of the token-weighted mean CE over the held-out strings, zero prefix.
    double nll_sum = 0.0;
    std::size_t tok_sum = 0;
    const int chunk = 32;
    for (std::size_t at = 0; at < holdout.size(); at += chunk) {
        std::size_t hi = std::min(holdout.size(), at + chunk);
        std::vector<std::vector<int>> part(holdout.begin() + static_cast<std::ptrdiff_t>(at),
                                           holdout.begin() + static_cast<std::ptrdiff_t>(hi));
        Tape tape(false);
        // Per-element CE is a mean over that element's tokens; re-weight to a
        // token-level aggregate.
        const int t_text = 1 + kCotMaxLen;
        const int t_total = kPrefixLen + t_text;
        int batch = static_cast<int>(part.size());
        Tensor prefix = prefix_positions(tape, dec, batch);
        std::vector<Tensor> rows;
        std::vector<std::vector<int>> targets(part.size());
        std::vector<std::vector<double>> weights(part.size());
        for (int b = 0; b < batch; ++b) {
            std::vector<int> y = part[static_cast<std::size_t>(b)];
            y.push_back(Vocabulary::kEos);
            TeacherForced tf = teacher_forcing(y, t_text);
            targets[static_cast<std::size_t>(b)] = std::move(tf.targets);
            weights[static_cast<std::size_t>(b)] = std::move(tf.weights);
            rows.push_back(tape.row_slice(prefix, b * kPrefixLen, (b + 1) * kPrefixLen));
            rows.push_back(dec.embedder.embed(tape, tf.input_ids, kPrefixLen));
        }
        Tensor logits = decoder_logits(tape, dec, tape.concat_rows(rows), batch, t_total);
        for (int b = 0; b < batch; ++b) {
            Tensor text_logits = tape.row_slice(logits, b * t_total + kPrefixLen, (b + 1) * t_total);
            double ntok = 0.0;
            for (double w : weights[static_cast<std::size_t>(b)]) ntok += w;
            double ce = tape.cross_entropy(text_logits, targets[static_cast<std::size_t>(b)],
                                           weights[static_cast<std::size_t>(b)])
                            .item();
            nll_sum += ce * ntok;
            tok_sum += static_cast<std::size_t>(ntok);
        }
    }
    return std::exp(nll_sum / static_cast<double>(tok_sum));
}

}  // namespace

DecoderPretrainResult pretrain_decoder(FrozenDecoder& dec, const std::vector<std::string>& corpus,
                                       const Vocabulary& vocab, const DecoderPretrainConfig& cfg) {
    if (corpus.size() < 100)
        throw ContractError("pretrain_decoder: corpus too small (" + std::to_string(corpus.size()) +
                            " strings)");
    std::vector<std::vector<int>> ids;
    ids.reserve(corpus.size());
    for (const std::string& s : corpus) {
        std::vector<int> t = vocab.tokenize(s);
        if (static_cast<int>(t.size()) > kCotMaxLen)
            throw ContractError("pretrain_decoder: string longer than " +
                                std::to_string(kCotMaxLen) + " tokens");
        ids.push_back(std::move(t));
    }
    std::size_t n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                      static_cast<double>(ids.size()) *
                                                      cfg.holdout_fraction));
    std::vector<std::vector<int>> holdout(ids.end() - static_cast<std::ptrdiff_t>(n_hold), ids.end());
    ids.resize(ids.size() - n_hold);

    Adam opt(decoder_params(dec), AdamConfig{.lr = cfg.lr});
    Rng rng = Rng::stream(cfg.seed, 0xDEC0DE);
    DecoderPretrainResult res;
    double ppl = 1e9;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<int>> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch));
        for (int b = 0; b < cfg.batch; ++b)
            batch.push_back(ids[rng.range(ids.size())]);
        Tape tape;
        Tensor loss = decoder_ce_batched(tape, dec, nullptr, cfg.batch, batch);
        tape.backward(loss);
        opt.step();
        res.steps_run = step + 1;
        if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            ppl = holdout_perplexity(dec, holdout);
            if (ppl <= cfg.target_ppl * 0.98) break;
        }
    }
    res.holdout_ppl = ppl;
    if (ppl > cfg.target_ppl)
        throw TrainingError("decoder pretraining missed the perplexity target: held-out ppl " +
                            std::to_string(ppl) + " > " + std::to_string(cfg.target_ppl) +
                            " after " + std::to_string(res.steps_run) + " steps");
    for (Param* p : decoder_params(dec)) p->frozen = true;
    return res;
}

PrefixProjector PrefixProjector::create(ParamStore& store, const std::string& prefix, int d_vlm,
                                        int d_dec, Rng& rng, double init_std) {
    PrefixProjector p;
    p.w = &store.create_normal(prefix + ".w", {d_vlm, d_dec}, rng, init_std);
    p.b = &store.create_zeros(prefix + ".b", {d_dec});
    return p;
}

Tensor linguistic_loss_batched(Tape& tape, Tensor h_lin_all, int batch,
                               const std::vector<std::vector<int>>& cot_ids,
                               const PrefixProjector& proj, const FrozenDecoder& dec) {
    if (!dec.frozen()) throw ContractError("linguistic loss requires a frozen decoder");
    if (static_cast<int>(cot_ids.size()) != batch)
        throw ContractError("linguistic loss: batch size mismatch");
    const Shape& s = h_lin_all.shape();
    if (s.size() != 2 || s[0] != batch * kPrefixLen)
        throw ShapeError("linguistic loss: h_lin " + shape_str(s) + " vs batch " +
                         std::to_string(batch) + "x" + std::to_string(kPrefixLen));
    Tensor content =
        tape.add_bias(tape.matmul(h_lin_all, tape.leaf(*proj.w)), tape.leaf(*proj.b));
    return decoder_ce_batched(tape, dec, &content, batch, cot_ids);
}

Tensor linguistic_loss(Tape& tape, Tensor h_lin, const std::vector<int>& target_ids,
                       const PrefixProjector& proj, const FrozenDecoder& dec) {
    return linguistic_loss_batched(tape, h_lin, 1, {target_ids}, proj, dec);
}

std::vector<int> greedy_decode(const std::vector<double>& h_lin_values, int d_vlm,
                               const PrefixProjector& proj, const FrozenDecoder& dec, int max_len) {
    std::vector<int> out;
    if (max_len <= 0) return out;
    PrefixProjector p = proj;
    FrozenDecoder d = dec;  // shallow copies: same Param pointers
    while (static_cast<int>(out.size()) < max_len) {
        Tape tape(false);
        Tensor h_lin = tape.constant({kPrefixLen, d_vlm}, h_lin_values);
        Tensor content = tape.add_bias(tape.matmul(h_lin, tape.leaf(*p.w)), tape.leaf(*p.b));
        Tensor prefix = tape.add(prefix_positions(tape, d, 1), content);
        std::vector<int> in_ids{Vocabulary::kBos};
        in_ids.insert(in_ids.end(), out.begin(), out.end());
        Tensor text = d.embedder.embed(tape, in_ids, kPrefixLen);
        int t = kPrefixLen + static_cast<int>(in_ids.size());
        Tensor logits = decoder_logits(tape, d, tape.concat_rows({prefix, text}), 1, t);
        const auto& lv = logits.value();
        const double* last = lv.data() + static_cast<std::size_t>(t - 1) * d.vocab;
        int best = 0;
        for (int c = 1; c < d.vocab; ++c)
            if (last[c] > last[best]) best = c;
        if (best == Vocabulary::kEos) break;
        out.push_back(best);
    }
    return out;
}

}  // namespace vla
