#pragma once

#include <string>
#include <vector>

#include "mixdiff/layout.hpp"
#include "mixdiff/masked_diffusion.hpp"
#include "mixdiff/rectified_flow.hpp"
#include "mixdiff/rng.hpp"

namespace mixdiff {

// Deterministic synthetic world: class-coded "image" token blocks stand in
// for visual encoder outputs, low-dimensional Gaussians for VAE latents, and
// a fixed rule maps (image class, question) to a variable-length answer.
struct WorldSpec {
    int n_classes = 8;
    int n_questions = 6;
    int vis_len = 4;
    int n_lat_tokens = 4;
    int d_lat = 2;
    double sigma = 0.25;
    double mean_radius = 2.5;
    int vocab_size = 66;
    int mask_id = 64;
    int eos_id = 65;

    // content token id blocks
    int class_base = 0;  // [class_base, class_base + n_classes)
    int vis_base = 8;
    int q_base = 16;
    int ans_base = 24;  // 8 answer tokens

    void validate() const;
    std::string serialize() const;
    static WorldSpec deserialize(const std::string& text);
    uint64_t digest() const;

    // class-conditional latent component mean (first two dims on a circle)
    std::vector<double> class_mean(int cls) const;

    // deterministic answer rule; question 0 repeats the class token cls+1
    // times, the others emit patterned strings of increasing length so that
    // answer lengths cover 1..48 tokens.
    int answer_len(int cls, int q) const;
    std::vector<int> answer(int cls, int q) const;

    int vis_token(int cls) const { return vis_base + cls; }
    int question_token(int q) const { return q_base + q; }
    int class_token(int cls) const { return class_base + cls; }
};

struct UndSample {
    int cls = 0, question = 0;
    std::vector<int> vis_tokens;
    std::vector<int> prompt;
    std::vector<int> response;

    SegmentLayout layout(int sample_id = 0) const;
    std::vector<int> all_tokens() const;  // vis + prompt + response
};

struct GenSample {
    int cls = 0;
    std::vector<int> prompt;
    LatentSequence latent;  // [n_lat_tokens x d_lat]

    SegmentLayout layout(int sample_id = 0) const;
};

struct InterleavedSample {
    std::vector<int> classes;   // per turn prompt class
    std::vector<int> tokens;    // prompt tokens, turn order
    LatentSequence latents;     // stacked per-turn latent rows

    SegmentLayout layout(int n_lat_tokens, int sample_id = 0) const;
};

UndSample gen_und_sample(const WorldSpec& spec, Rng& rng);
GenSample gen_gen_sample(const WorldSpec& spec, Rng& rng);
InterleavedSample gen_interleaved_sample(const WorldSpec& spec, int turns, Rng& rng);

// Per-index stream so every sample is reproducible from (digest, seed, index).
Rng sample_rng(const WorldSpec& spec, uint64_t seed, uint64_t index);

struct Corpus {
    WorldSpec spec;
    uint64_t seed = 0;
    std::vector<UndSample> und;
    std::vector<GenSample> gen;
    std::vector<InterleavedSample> inter;
};

Corpus make_corpus(const WorldSpec& spec, int n_und, int n_gen, int n_inter, uint64_t seed);

// Directory of layout text plus flat numeric files with a manifest recording
// the spec digest and counts.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

}  // namespace mixdiff
