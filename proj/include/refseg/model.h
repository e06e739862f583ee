// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_MODEL_H
#define REFSEG_MODEL_H

#include <array>
#include <string>
#include <vector>

#include "refseg/config.h"
#include "refseg/decoders.h"
#include "refseg/fusion.h"
#include "refseg/text_encoder.h"

namespace refseg::model {

template <typename T>
struct Batch {
    Tensor<T> images;          // (B,3,H,W)
    Tensor<int> tokens;        // (B,L)
    Tensor<int> tokens_erased; // (B,L), one span masked per sentence
    std::vector<int> valid_len;
    Tensor<uint8_t> masks;     // (B,H,W)
    std::vector<T> delta;
    bool has_erased = false;

    int size() const { return images.dim(0); }
};

// The full dual-decoder network. Parameters live in `store`; every forward
// builds a fresh tape, so the same instance serves training (with gradients)
// and inference (forward only).
template <typename T>
class Net {
public:
    RunConfig cfg;
    ad::ParamStore<T> store;

    TextEncoder<T> text;
    Backbone<T> backbone;
    std::vector<FusionStage<T>> fusion;
    MergeSkip<T> phi3, phi2;
    DecoderLayer<T> psi3, psi2;
    PredictionHead<T> head;
    DecoderLayer<T> ccr;
    PooledPair<T> pool;

    Net(const RunConfig& config, int vocab_size) : cfg(config) {
        Rng rng(mix_keys(cfg.seed, 0x0de1));
        const auto& ch = cfg.stage_channels;
        const int dec3 = ch[2], dec2 = ch[1];
        text.build(store, "text", vocab_size, cfg.text_channels, cfg.max_tokens, cfg.text_blocks,
                   cfg.heads, cfg.ffn_mult, rng);
        backbone.build(store, "backbone", cfg.stem_channels, ch, rng);
        fusion.resize(4);
        for (int n = 0; n < 4; n++)
            fusion[static_cast<size_t>(n)].build(store, "fusion" + std::to_string(n + 1),
                                                 ch[static_cast<size_t>(n)], cfg.text_channels,
                                                 cfg.alpha_window_sides, cfg.beta_run_lengths, rng);
        phi3.build(store, "phi3", dec3, ch[3], ch[2], rng);
        psi3.build(store, "psi3", dec3, cfg.text_channels, cfg.heads, cfg.ffn_mult, rng);
        phi2.build(store, "phi2", dec2, dec3, ch[1], rng);
        psi2.build(store, "psi2", dec2, cfg.text_channels, cfg.heads, cfg.ffn_mult, rng);
        head.build(store, "head", dec2, std::max(16, dec2 / 2), rng);
        ccr.build(store, "ccr", cfg.text_channels, dec3, cfg.heads, cfg.ffn_mult, rng);
        pool.build(store, "pool", ch[3], dec3, dec2, cfg.text_channels, cfg.contrastive_dim, rng);
    }

    struct EncOut {
        std::array<int, 4> v_star{};
        int e_star4 = -1;
    };

    // Stem + four stages, each followed by one fusion step; the fused visual
    // map feeds the next stage and the fused text embedding the next fusion.
    EncOut encode(Tape<T>& t, int images, const Tensor<int>& tokens,
                  const std::vector<int>& valid_len) const {
        EncOut out;
        int e = text.apply(t, tokens, valid_len);
        int x = backbone.apply_stem(t, images);
        for (int n = 0; n < 4; n++) {
            x = backbone.apply_stage(t, x, n);
            auto fused = fusion[static_cast<size_t>(n)].apply(t, x, e, valid_len);
            out.v_star[static_cast<size_t>(n)] = fused.v_star;
            e = fused.e_star;
            x = fused.v_star;
        }
        out.e_star4 = e;
        return out;
    }

    struct DecOut {
        int y4 = -1, y3 = -1, y2 = -1;
        int logits = -1; // (B,2,H,W) at input resolution
    };

    DecOut decode(Tape<T>& t, const EncOut& enc, const std::vector<int>& valid_len) const {
        DecOut out;
        out.y4 = enc.v_star[3];
        out.y3 = apply_psi(t, psi3, phi3.apply(t, out.y4, enc.v_star[2]), enc.e_star4, valid_len);
        out.y2 = apply_psi(t, psi2, phi2.apply(t, out.y3, enc.v_star[1]), enc.e_star4, valid_len);
        out.logits = t.bilinear(head.apply(t, out.y2), cfg.image_size, cfg.image_size);
        return out;
    }

    // Recovers the erased-phrase embedding from the mid-decoder feature.
    int reconstruct(Tape<T>& t, int e_prime, int y3, const std::vector<int>& valid_len) const {
        const int B = t.val(y3).dim(0), C = t.val(y3).dim(1);
        const int n_tok = t.val(y3).dim(2) * t.val(y3).dim(3);
        int mem = t.reshape(y3, {B, C, n_tok});
        std::vector<int> mem_valid(static_cast<size_t>(B), n_tok);
        return ccr.apply(t, e_prime, mem, valid_len, mem_valid);
    }

    struct ForwardOut {
        int logits = -1;
        int l_ce = -1, l_sim = -1, l_con = -1, total = -1;
        int sim_ref = -1; // pooled gradient-stopped reference, (B,C_t)
    };

    struct TrainOptions {
        // When set, the sim loss compares against this constant instead of the
        // detached pooled embedding. Gradient checking uses it to freeze the
        // stop-gradient branch, so finite differences measure the same
        // function the analytic gradient differentiates.
        const Tensor<T>* frozen_sim_ref = nullptr;
    };

    // Training graph: text-to-image decoder with pixel supervision plus the
    // image-to-text branch (reconstruction similarity and contrastive pair).
    ForwardOut forward_train(Tape<T>& t, const Batch<T>& batch,
                             const TrainOptions& opts = {}) const {
        ForwardOut out;
        int images = t.input(batch.images);
        EncOut enc = encode(t, images, batch.tokens, batch.valid_len);
        DecOut dec = decode(t, enc, batch.valid_len);
        out.logits = dec.logits;
        out.l_ce = t.ce2(dec.logits, batch.masks);
        int total = out.l_ce;
        if (cfg.use_sim_loss && batch.has_erased) {
            int e_prime = text.apply(t, batch.tokens_erased, batch.valid_len);
            int e_hat = reconstruct(t, e_prime, dec.y3, batch.valid_len);
            int pooled_hat = t.mean_pool_valid(e_hat, batch.valid_len);
            out.sim_ref = opts.frozen_sim_ref
                              ? t.input(*opts.frozen_sim_ref)
                              : t.detach(t.mean_pool_valid(enc.e_star4, batch.valid_len));
            int cos = t.cosine_rows(out.sim_ref, pooled_hat);
            out.l_sim = t.delta_mean(t.affine(cos, T(-1), T(1)), batch.delta);
            total = t.add(total, out.l_sim);
        } else {
            out.l_sim = zero_scalar(t);
        }
        if (cfg.use_con_loss) {
            auto pooled = pool.apply(t, dec.y4, dec.y3, dec.y2, enc.e_star4, batch.valid_len);
            out.l_con = loss_con(t, pooled.v_o, pooled.e_o, batch.delta,
                                 static_cast<T>(cfg.temperature));
            total = t.add(total, out.l_con);
        } else {
            out.l_con = zero_scalar(t);
        }
        out.total = total;
        return out;
    }

    // Inference path: no erased branch, no contrastive pair. Produces the
    // same prediction the training graph computes for the same inputs.
    int forward_logits(Tape<T>& t, const Batch<T>& batch) const {
        int images = t.input(batch.images);
        EncOut enc = encode(t, images, batch.tokens, batch.valid_len);
        return decode(t, enc, batch.valid_len).logits;
    }

private:
    static int zero_scalar(Tape<T>& t) { return t.input(Tensor<T>({1}, T(0))); }

    static int apply_psi(Tape<T>& t, const DecoderLayer<T>& psi, int fmap, int e_star4,
                         const std::vector<int>& text_valid) {
        const int B = t.val(fmap).dim(0), C = t.val(fmap).dim(1);
        const int h = t.val(fmap).dim(2), w = t.val(fmap).dim(3);
        int tokens = t.reshape(fmap, {B, C, h * w});
        std::vector<int> self_valid(static_cast<size_t>(B), h * w);
        int refined = psi.apply(t, tokens, e_star4, self_valid, text_valid);
        return t.reshape(refined, {B, C, h, w});
    }
};

// Argmax of the two score maps for one batch element; ties go to background.
template <typename T>
Tensor<uint8_t> logits_to_mask(const Tensor<T>& logits, int b) {
    const int H = logits.dim(2), W = logits.dim(3);
    Tensor<uint8_t> mask({H, W});
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++)
            mask(y, x) = logits(b, 1, y, x) > logits(b, 0, y, x) ? 1 : 0;
    return mask;
}

} // namespace refseg::model

#endif // REFSEG_MODEL_H
