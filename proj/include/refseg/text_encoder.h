// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_TEXT_ENCODER_H
#define REFSEG_TEXT_ENCODER_H

#include <string>
#include <vector>

#include "refseg/blocks.h"

namespace refseg::model {

// Toy contextual text encoder: embedding + learned positions, then a short
// stack of self-attention blocks with pad keys masked out. Output (B,C_t,L).
template <typename T>
struct TextEncoder {
    Param<T>* embed = nullptr; // (vocab, C_t)
    Param<T>* pos = nullptr;   // (C_t, L)
    std::vector<EncoderBlock<T>> blocks;
    int channels = 0, max_len = 0;

    void build(ParamStore<T>& ps, const std::string& name, int vocab_size, int channels_,
               int max_len_, int n_blocks, int heads, int ffn_mult, Rng& rng) {
        channels = channels_;
        max_len = max_len_;
        embed = &ps.create(name + ".embed", {vocab_size, channels});
        init_normal(*embed, rng, 0.1);
        pos = &ps.create(name + ".pos", {channels, max_len});
        init_normal(*pos, rng, 0.1);
        blocks.resize(static_cast<size_t>(n_blocks));
        for (int i = 0; i < n_blocks; i++)
            blocks[static_cast<size_t>(i)].build(ps, name + ".b" + std::to_string(i), channels,
                                                 heads, ffn_mult, rng);
    }

    int apply(Tape<T>& t, const Tensor<int>& ids, const std::vector<int>& valid_len) const {
        const int B = ids.dim(0);
        int x = t.embedding(t.param(*embed), ids); // (B,C,L)
        int p = t.reshape(t.param(*pos), {1, channels, max_len});
        x = t.add(x, t.broadcast_b(p, B));
        for (const auto& blk : blocks) x = blk.apply(t, x, valid_len);
        return x;
    }
};

} // namespace refseg::model

#endif // REFSEG_TEXT_ENCODER_H
