#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "coved/model.hpp"

#include "support/helpers.hpp"

using namespace coved;

namespace {

ModelDims beam_dims(std::size_t vocab) {
    ModelDims d;
    d.vocab = vocab;
    d.embed = 3;
    d.token_hidden = 4;
    d.context_hidden = 4;
    d.decoder_hidden = 4;
    d.latent = 3;
    d.mlp_hidden = 4;
    return d;
}

struct Scored {
    std::vector<int> tokens;
    double logp = 0.0;
};

// Exhaustive enumeration of every hypothesis: sequences over the allowed
// tokens in which the end-of-utterance token may appear only as the final
// token, ending either there or at exactly max_len tokens.
void enumerate(ModelRef& ref, const Tensor& c, const Tensor* z, std::vector<int>& prefix,
               double logp, const Tensor& state, std::size_t max_len, bool block_unk,
               Scored& best) {
    const std::size_t v = ref.model().dims().vocab;
    const int input = prefix.empty() ? Vocab::kSos : prefix.back();
    Tensor next_state = state;
    Tensor logits = ref.decoder_step(input, z, c, next_state);
    const double lse = detail::log_sum_exp(logits.data());
    for (std::size_t t = 0; t < v; ++t) {
        const int tok = static_cast<int>(t);
        if (tok == Vocab::kPad || tok == Vocab::kSos) continue;
        if (block_unk && tok == Vocab::kUnk) continue;
        const double lp = logp + logits.at(t) - lse;
        prefix.push_back(tok);
        if (tok == Vocab::kEou || prefix.size() >= max_len) {
            if (lp > best.logp || best.tokens.empty()) {
                best.tokens = prefix;
                best.logp = lp;
            }
        } else {
            enumerate(ref, c, z, prefix, lp, next_state, max_len, block_unk, best);
        }
        prefix.pop_back();
    }
}

std::vector<int> greedy_decode(ModelRef& ref, const Tensor& c, const Tensor* z,
                               std::size_t max_len, bool block_unk) {
    const std::size_t v = ref.model().dims().vocab;
    std::vector<int> out;
    Tensor h = ref.decoder_initial_state(z, c);
    for (std::size_t step = 0; step < max_len; ++step) {
        const int input = out.empty() ? Vocab::kSos : out.back();
        Tensor logits = ref.decoder_step(input, z, c, h);
        int best = -1;
        double best_lp = 0.0;
        for (std::size_t t = 0; t < v; ++t) {
            const int tok = static_cast<int>(t);
            if (tok == Vocab::kPad || tok == Vocab::kSos) continue;
            if (block_unk && tok == Vocab::kUnk) continue;
            if (best < 0 || logits.at(t) > best_lp) {
                best = tok;
                best_lp = logits.at(t);
            }
        }
        out.push_back(best);
        if (best == Vocab::kEou) break;
    }
    return out;
}

}  // namespace

TEST_CASE("beam size one equals greedy decoding") {
    for (std::uint64_t seed = 1; seed <= 30; ++seed) {
        ParameterStore store;
        Rng rng(seed);
        DialogueModel m(Architecture::kHred, beam_dims(9), store, rng);
        Graph g;
        ModelRef ref(g, m, kEvalOnly);
        Tensor c = g.full({4}, 0.2);

        BeamSearchConfig cfg;
        cfg.beam_size = 1;
        cfg.max_len = 6;
        std::vector<int> beam = beam_search(ref, c, nullptr, cfg);
        std::vector<int> greedy = greedy_decode(ref, c, nullptr, 6, true);
        CHECK(beam == greedy);
    }
}

TEST_CASE("large beams match exhaustive enumeration on a tiny vocabulary") {
    // vocab 5 leaves {__eou__, one word}; beam 25 covers the whole space
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        ParameterStore store;
        Rng rng(seed);
        DialogueModel m(Architecture::kHred, beam_dims(5), store, rng);
        Graph g;
        ModelRef ref(g, m, kEvalOnly);
        Tensor c = g.full({4}, -0.1);

        BeamSearchConfig cfg;
        cfg.beam_size = 25;
        cfg.max_len = 4;
        std::vector<int> found = beam_search(ref, c, nullptr, cfg);

        Scored best;
        std::vector<int> prefix;
        Tensor h0 = ref.decoder_initial_state(nullptr, c);
        enumerate(ref, c, nullptr, prefix, 0.0, h0, 4, true, best);
        CHECK(found == best.tokens);
    }
}

TEST_CASE("beam search is exhaustive on a wider vocabulary when the beam covers the space") {
    // vocab 7 leaves {__eou__, 3 words}: 40 finished-by-eou plus 27 length-4
    // open prefixes; beam 200 retains every candidate
    for (std::uint64_t seed = 100; seed < 120; ++seed) {
        ParameterStore store;
        Rng rng(seed);
        DialogueModel m(Architecture::kVhred, beam_dims(7), store, rng);
        Graph g;
        ModelRef ref(g, m, kEvalOnly);
        Tensor c = g.full({4}, 0.05);
        Rng zr(seed * 7 + 1);
        Tensor z = ref.sample_generative_latent(c, zr);

        BeamSearchConfig cfg;
        cfg.beam_size = 200;
        cfg.max_len = 4;
        std::vector<int> found = beam_search(ref, c, &z, cfg);

        Scored best;
        std::vector<int> prefix;
        Tensor h0 = ref.decoder_initial_state(&z, c);
        enumerate(ref, c, &z, prefix, 0.0, h0, 4, true, best);
        CHECK(found == best.tokens);
    }
}

TEST_CASE("the unk token is never generated when blocked, even when dominant") {
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        ParameterStore store;
        Rng rng(seed);
        DialogueModel m(Architecture::kHred, beam_dims(8), store, rng);
        // rig the output bias so unk would win without masking
        store.get("decoder.out_proj.b")->value[Vocab::kUnk] = 25.0;
        Graph g;
        ModelRef ref(g, m, kEvalOnly);
        Tensor c = g.full({4}, 0.0);
        BeamSearchConfig cfg;
        cfg.beam_size = 5;
        cfg.max_len = 8;
        std::vector<int> out = beam_search(ref, c, nullptr, cfg);
        CHECK_FALSE(out.empty());
        for (int tok : out) {
            CHECK(tok != Vocab::kUnk);
            CHECK(tok != Vocab::kPad);
            CHECK(tok != Vocab::kSos);
        }
    }
}

TEST_CASE("hypotheses end at the end-of-utterance token or max_len") {
    ParameterStore store;
    Rng rng(3);
    DialogueModel m(Architecture::kHred, beam_dims(9), store, rng);
    Graph g;
    ModelRef ref(g, m, kEvalOnly);
    Tensor c = g.full({4}, 0.3);
    BeamSearchConfig cfg;
    cfg.beam_size = 4;
    cfg.max_len = 5;
    std::vector<int> out = beam_search(ref, c, nullptr, cfg);
    CHECK_FALSE(out.empty());
    CHECK(out.size() <= 5);
    for (std::size_t i = 0; i + 1 < out.size(); ++i) CHECK(out[i] != Vocab::kEou);
}
