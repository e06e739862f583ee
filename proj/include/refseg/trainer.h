// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_TRAINER_H
#define REFSEG_TRAINER_H

#include <cmath>
#include <omp.h>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "refseg/checkpoint.h"
#include "refseg/dataset.h"
#include "refseg/metrics.h"
#include "refseg/model.h"
#include "refseg/optimizer.h"
#include "refseg/vocab.h"

namespace refseg::train {

struct LoadedSet {
    std::vector<data::Sample> samples;
    std::vector<text::TokenSequence> tokens;
};

inline LoadedSet load_split(const std::string& manifest_path, const text::Vocab& vocab,
                            int max_tokens, const std::string& id_prefix) {
    LoadedSet set;
    for (auto& s : data::load_samples(manifest_path)) {
        if (!id_prefix.empty() && s.id.rfind(id_prefix, 0) != 0) continue;
        set.tokens.push_back(text::tokenize(s.expression, vocab, max_tokens));
        set.samples.push_back(std::move(s));
    }
    return set;
}

// Assembles a batch from dataset indices. In training mode one entity phrase
// per sentence is erased, chosen freshly per (seed, step, slot).
template <typename T>
model::Batch<T> make_batch(const LoadedSet& set, const std::vector<size_t>& idx,
                           const RunConfig& cfg, int64_t step, bool training) {
    const int B = static_cast<int>(idx.size());
    const int H = cfg.image_size, L = cfg.max_tokens;
    model::Batch<T> b;
    b.images = Tensor<T>({B, 3, H, H});
    b.tokens = Tensor<int>({B, L});
    b.tokens_erased = Tensor<int>({B, L});
    b.masks = Tensor<uint8_t>({B, H, H});
    b.valid_len.resize(static_cast<size_t>(B));
    b.delta.resize(static_cast<size_t>(B));
    b.has_erased = training;
    for (int i = 0; i < B; i++) {
        const auto& s = set.samples[idx[static_cast<size_t>(i)]];
        const auto& tok = set.tokens[idx[static_cast<size_t>(i)]];
        for (int64_t k = 0; k < b.images.numel() / B; k++)
            b.images.data[static_cast<size_t>(i * (b.images.numel() / B) + k)] =
                static_cast<T>(s.image.data[static_cast<size_t>(k)]);
        for (int l = 0; l < L; l++) b.tokens(i, l) = tok.ids[static_cast<size_t>(l)];
        b.valid_len[static_cast<size_t>(i)] = tok.valid_len;
        text::TokenSequence erased = tok;
        if (training && !s.entity_spans.empty())
            erased = text::erase_phrase(
                tok, s.entity_spans,
                mix_keys(cfg.seed, 0xe7a5e, static_cast<uint64_t>(step),
                         static_cast<uint64_t>(idx[static_cast<size_t>(i)])));
        for (int l = 0; l < L; l++) b.tokens_erased(i, l) = erased.ids[static_cast<size_t>(l)];
        for (int64_t k = 0; k < s.mask.numel(); k++)
            b.masks.data[static_cast<size_t>(i * s.mask.numel() + k)] =
                s.mask.data[static_cast<size_t>(k)];
        b.delta[static_cast<size_t>(i)] = static_cast<T>(s.delta);
    }
    return b;
}

// Epoch shuffles are pure functions of (seed, epoch): training order replays
// identically after a resume without any mutable RNG state in the loop.
inline std::vector<size_t> epoch_permutation(size_t n, uint64_t seed, int64_t epoch) {
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; i++) perm[i] = i;
    Rng rng(mix_keys(seed, 0xe90c, static_cast<uint64_t>(epoch)));
    rng.shuffle(perm.begin(), perm.end());
    return perm;
}

struct StepLoss {
    int64_t step;
    double lr, l_ce, l_sim, l_con, total;

    std::string to_json_line() const {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "{\"step\":%lld,\"lr\":%.9g,\"l_ce\":%.9g,\"l_sim\":%.9g,"
                      "\"l_con\":%.9g,\"total\":%.9g}",
                      static_cast<long long>(step), lr, l_ce, l_sim, l_con, total);
        return buf;
    }
};

class Trainer {
public:
    RunConfig cfg;
    text::Vocab vocab;
    model::Net<float> net;
    AdamW<float> opt;
    LoadedSet train_set;
    int64_t step = 0;

    explicit Trainer(const RunConfig& config)
        : cfg(config),
          vocab(text::Vocab::load(data_path("vocab.json"))),
          net(config, vocab.size()) {
        train_set = load_split(data_path("manifest.jsonl"), vocab, cfg.max_tokens, "train_");
        if (train_set.samples.empty())
            throw std::runtime_error("no training samples under " + cfg.data_dir);
        opt.weight_decay = cfg.weight_decay;
        opt.init(net.store);
    }

    std::string data_path(const std::string& name) const {
        return (std::filesystem::path(cfg.data_dir) / name).string();
    }

    void resume_from(const std::string& ckpt_path) {
        auto ckpt = read_checkpoint(ckpt_path);
        restore_checkpoint(ckpt, net.store, &opt);
        step = ckpt.step();
    }

    std::vector<size_t> batch_indices(int64_t step_index) const {
        const size_t n = train_set.samples.size();
        const int B = cfg.batch_size;
        std::vector<size_t> out(static_cast<size_t>(B));
        std::vector<size_t> perm;
        int64_t perm_epoch = -1;
        for (int j = 0; j < B; j++) {
            const int64_t global = step_index * B + j;
            const int64_t epoch = global / static_cast<int64_t>(n);
            const size_t off = static_cast<size_t>(global % static_cast<int64_t>(n));
            if (perm_epoch != epoch) {
                perm = epoch_permutation(n, cfg.seed, epoch);
                perm_epoch = epoch;
            }
            out[static_cast<size_t>(j)] = perm[off];
        }
        return out;
    }

    // Runs one optimization step; returns the logged losses.
    StepLoss train_step() {
        auto batch = make_batch<float>(train_set, batch_indices(step), cfg, step, true);
        net.store.zero_grads();
        ad::Tape<float> tape;
        auto out = net.forward_train(tape, batch);
        StepLoss log{step + 1, lr_schedule(step, cfg), tape.val(out.l_ce)(0),
                     tape.val(out.l_sim)(0), tape.val(out.l_con)(0), tape.val(out.total)(0)};
        if (!std::isfinite(log.total)) {
            dump_diagnostics(log);
            throw std::runtime_error("non-finite loss at step " + std::to_string(log.step));
        }
        tape.backward(out.total);
        opt.step(net.store, log.lr);
        step++;
        return log;
    }

    void train(std::ostream* loss_log) {
        namespace fs = std::filesystem;
        fs::create_directories(cfg.out_dir);
        while (step < cfg.total_steps) {
            StepLoss log = train_step();
            if (loss_log) (*loss_log) << log.to_json_line() << "\n";
            if (cfg.checkpoint_every > 0 && log.step % cfg.checkpoint_every == 0 &&
                log.step < cfg.total_steps)
                save(checkpoint_path("checkpoint_step" + std::to_string(log.step) + ".ckpt"));
        }
        save(checkpoint_path("checkpoint_final.ckpt"));
    }

    std::string checkpoint_path(const std::string& name) const {
        return (std::filesystem::path(cfg.out_dir) / name).string();
    }

    void save(const std::string& path) const {
        save_checkpoint<float>(path, net.store, const_cast<AdamW<float>*>(&opt), cfg.to_json(),
                               step, cfg.seed);
    }

private:
    void dump_diagnostics(const StepLoss& log) const {
        std::cerr << "diagnostic dump: " << log.to_json_line() << "\n";
        for (const auto& p : net.store.params) {
            double mx = 0;
            bool finite = true;
            for (auto v : p.value.data) {
                mx = std::max(mx, std::abs(static_cast<double>(v)));
                finite = finite && std::isfinite(static_cast<double>(v));
            }
            if (!finite) std::cerr << "  non-finite parameter: " << p.name << "\n";
        }
    }
};

// ---- evaluation / prediction ----

struct EvalOutput {
    metrics::Report report;
    std::vector<std::pair<std::string, std::vector<std::pair<int, int>>>> predictions;
};

template <typename T>
EvalOutput evaluate(model::Net<T>& net, const LoadedSet& set, const RunConfig& cfg,
                    bool keep_predictions) {
    EvalOutput out;
    metrics::Accumulator acc;
    for (size_t i = 0; i < set.samples.size(); i++) {
        auto batch = make_batch<T>(set, {i}, cfg, 0, false);
        ad::Tape<T> tape;
        int logits = net.forward_logits(tape, batch);
        Tensor<uint8_t> pred = model::logits_to_mask(tape.val(logits), 0);
        acc.add(metrics::score_sample(pred, set.samples[i].mask, set.samples[i].setting));
        if (keep_predictions)
            out.predictions.emplace_back(set.samples[i].id, data::encode_mask_rle(pred));
    }
    out.report = metrics::finalize(acc);
    return out;
}

// ---- gradient check ----

struct GradcheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    int coords = 0;
};

struct GradcheckReport {
    std::vector<GradcheckGroup> groups;
    double max_rel_err = 0.0;
    double probe_err = 0.0; // quadratic-probe sanity of the checker itself

    nlohmann::json to_json() const {
        nlohmann::json gs = nlohmann::json::array();
        for (const auto& g : groups)
            gs.push_back({{"group", g.name}, {"max_rel_err", g.max_rel_err}, {"coords", g.coords}});
        return {{"max_rel_err", max_rel_err}, {"probe_err", probe_err}, {"groups", gs}};
    }
};

// Builds a two-sample batch (one targeted, one one-to-zero) straight from the
// generator so the checked loss covers every term.
inline model::Batch<double> gradcheck_batch(const RunConfig& cfg, const text::Vocab& vocab,
                                            uint64_t seed) {
    model::Batch<double> b;
    const int H = cfg.image_size, L = cfg.max_tokens;
    b.images = Tensor<double>({2, 3, H, H});
    b.tokens = Tensor<int>({2, L});
    b.tokens_erased = Tensor<int>({2, L});
    b.masks = Tensor<uint8_t>({2, H, H});
    b.valid_len.resize(2);
    b.delta.resize(2);
    b.has_erased = true;
    for (int i = 0; i < 2; i++) {
        const auto setting = i == 0 ? data::Setting::one_to_one : data::Setting::one_to_zero;
        for (int attempt = 0;; attempt++) {
            if (attempt >= 64) throw std::runtime_error("gradcheck: could not build sample");
            Rng rng(mix_keys(seed, 0x6c4d, static_cast<uint64_t>(i), static_cast<uint64_t>(attempt)));
            auto scene = data::generate_scene(rng.next_u64(), 2, 2, 3, H, H);
            data::Expression expr;
            try {
                expr = data::compose_expression(scene, setting, rng.next_u64());
            } catch (const data::UnsatisfiableSetting&) {
                continue;
            }
            auto rendered = data::render(scene);
            auto tok = text::tokenize(expr.text, vocab, L);
            auto erased = text::erase_phrase(tok, expr.entity_spans, rng.next_u64());
            for (int64_t k = 0; k < rendered.image.numel(); k++)
                b.images.data[static_cast<size_t>(i * rendered.image.numel() + k)] =
                    rendered.image.data[static_cast<size_t>(k)];
            for (int l = 0; l < L; l++) {
                b.tokens(i, l) = tok.ids[static_cast<size_t>(l)];
                b.tokens_erased(i, l) = erased.ids[static_cast<size_t>(l)];
            }
            b.valid_len[static_cast<size_t>(i)] = tok.valid_len;
            for (int id : expr.target_ids) {
                const auto& m = rendered.masks.at(id);
                for (int64_t k = 0; k < m.numel(); k++)
                    b.masks.data[static_cast<size_t>(i * m.numel() + k)] |=
                        m.data[static_cast<size_t>(k)];
            }
            b.delta[static_cast<size_t>(i)] = setting == data::Setting::one_to_zero ? 0.0 : 1.0;
            break;
        }
    }
    return b;
}

// Central finite differences (64-bit) against backprop for every parameter
// group of the full training loss, the stop-gradient branch frozen at its
// base value. coords_per_group coordinates are sampled per group. Runs
// single-threaded: the tiny evaluations are bound by parallel-region
// overhead, not math.
inline GradcheckReport gradcheck(const RunConfig& cfg, uint64_t seed, int coords_per_group = 10,
                                 double h = 1e-5) {
    struct ThreadGuard {
        int saved = omp_get_max_threads();
        ThreadGuard() { omp_set_num_threads(1); }
        ~ThreadGuard() { omp_set_num_threads(saved); }
    } thread_guard;
    text::Vocab vocab = text::Vocab::builtin();
    model::Net<double> net(cfg, vocab.size());
    // move the fusion gates off their zero init so every path is live
    for (auto& p : net.store.params)
        if (p.name.find("gamma") != std::string::npos)
            for (auto& v : p.value.data) v = 0.01;
    auto batch = gradcheck_batch(cfg, vocab, seed);

    Tensor<double> frozen_ref;
    net.store.zero_grads();
    {
        ad::Tape<double> t;
        auto out = net.forward_train(t, batch);
        frozen_ref = t.val(out.sim_ref);
        t.backward(out.total);
    }
    typename model::Net<double>::TrainOptions opts;
    opts.frozen_sim_ref = &frozen_ref;
    auto eval = [&]() {
        ad::Tape<double> t;
        return t.val(net.forward_train(t, batch, opts).total)(0);
    };

    GradcheckReport report;
    Rng pick(mix_keys(seed, 0xfd));
    for (auto& p : net.store.params) {
        GradcheckGroup group{p.name, 0.0, 0};
        for (int k = 0; k < coords_per_group; k++) {
            const int64_t i =
                static_cast<int64_t>(pick.next_below(static_cast<uint64_t>(p.value.numel())));
            const double saved = p.value.data[static_cast<size_t>(i)];
            p.value.data[static_cast<size_t>(i)] = saved + h;
            const double f1 = eval();
            p.value.data[static_cast<size_t>(i)] = saved - h;
            const double f2 = eval();
            p.value.data[static_cast<size_t>(i)] = saved;
            const double fd = (f1 - f2) / (2.0 * h);
            const double an = p.grad.data[static_cast<size_t>(i)];
            const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            group.max_rel_err = std::max(group.max_rel_err, err);
            group.coords++;
        }
        report.max_rel_err = std::max(report.max_rel_err, group.max_rel_err);
        report.groups.push_back(std::move(group));
    }

    // checker sanity: a quadratic probe must agree to machine precision
    {
        auto& p = net.store.params.front();
        Tensor<double> coeff(p.value.shape);
        Rng crng(777);
        for (auto& c : coeff.data) c = crng.normal();
        net.store.zero_grads();
        {
            ad::Tape<double> t;
            int pn = t.param(p);
            int probe = t.sum_all(t.mul(t.mul(pn, pn), t.input(coeff)));
            t.backward(probe);
        }
        auto probe_eval = [&]() {
            ad::Tape<double> t;
            int pn = t.param(p);
            return t.val(t.sum_all(t.mul(t.mul(pn, pn), t.input(coeff))))(0);
        };
        for (int k = 0; k < coords_per_group; k++) {
            const int64_t i =
                static_cast<int64_t>(pick.next_below(static_cast<uint64_t>(p.value.numel())));
            const double saved = p.value.data[static_cast<size_t>(i)];
            p.value.data[static_cast<size_t>(i)] = saved + h;
            const double f1 = probe_eval();
            p.value.data[static_cast<size_t>(i)] = saved - h;
            const double f2 = probe_eval();
            p.value.data[static_cast<size_t>(i)] = saved;
            const double fd = (f1 - f2) / (2.0 * h);
            const double an = p.grad.data[static_cast<size_t>(i)];
            report.probe_err = std::max(
                report.probe_err, std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}));
        }
    }
    return report;
}

} // namespace refseg::train

#endif // REFSEG_TRAINER_H
