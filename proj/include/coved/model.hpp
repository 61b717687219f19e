#pragma once

// Hierarchical recurrent encoder-decoder with an optional latent path.
//
// Three architectures share the encoder/decoder stack:
//   hred   - no latent variable; the decoder is conditioned on context only.
//   vhred  - a diagonal-Gaussian latent per response; the decoder consumes a
//            reparameterized sample from the recognition posterior during
//            training and a prior sample at generation time.
//   co     - the collaborative setup: the utterance encoder's final state
//            z-tilde is the autoencoding target, and a separate latent module
//            (prior, recognition, generator MLPs over Gaussian noise) learns
//            to reproduce it. Training alternates an AE phase (theta) and a
//            CVAE phase (phi); scheduled sampling swaps z-tilde for the
//            generated latent as training proceeds.
//
// Parameter ownership: theta = embedding, GRUs, projections (and the BOW
// head); phi = prior, recognition and generator MLPs.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coved/corpus.hpp"
#include "coved/ops.hpp"
#include "coved/rng.hpp"

namespace coved {

enum class Architecture { kHred, kVhred, kCo };

inline Architecture architecture_from_string(const std::string& s) {
    if (s == "hred") return Architecture::kHred;
    if (s == "vhred") return Architecture::kVhred;
    if (s == "co") return Architecture::kCo;
    throw ConfigError("unknown architecture: " + s + " (expected hred, vhred or co)");
}

inline std::string to_string(Architecture a) {
    switch (a) {
        case Architecture::kHred: return "hred";
        case Architecture::kVhred: return "vhred";
        case Architecture::kCo: return "co";
    }
    return "?";
}

// log-variance outputs are clamped to [-kLogvarClamp, kLogvarClamp]
inline constexpr double kLogvarClamp = 10.0;

struct ModelDims {
    std::size_t vocab = 20000;
    std::size_t embed = 300;
    std::size_t token_hidden = 512;    // utterance encoder state; also dim of z-tilde
    std::size_t context_hidden = 1024;
    std::size_t decoder_hidden = 512;
    std::size_t latent = 512;          // Gaussian noise dimension
    std::size_t mlp_hidden = 0;        // hidden width of the 2-layer MLPs; 0 means latent

    std::size_t mlp_width() const { return mlp_hidden ? mlp_hidden : latent; }
};

// 2-layer feedforward estimator of a diagonal Gaussian.
struct GaussianMlpParams {
    LinearParams hidden, mean_head, logvar_head;
};

inline GaussianMlpParams make_gaussian_mlp(ParameterStore& store, const std::string& prefix,
                                           std::size_t in, std::size_t width, std::size_t out,
                                           Rng& rng) {
    GaussianMlpParams p;
    p.hidden = make_linear(store, prefix + ".hidden", in, width, rng);
    p.mean_head = make_linear(store, prefix + ".mean_head", width, out, rng);
    p.logvar_head = make_linear(store, prefix + ".logvar_head", width, out, rng);
    return p;
}

struct GaussianMlpRef {
    LinearRef hidden, mean_head, logvar_head;
};

inline GaussianMlpRef use_gaussian_mlp(Graph& g, const GaussianMlpParams& p, bool trainable) {
    return {use_linear(g, p.hidden, trainable), use_linear(g, p.mean_head, trainable),
            use_linear(g, p.logvar_head, trainable)};
}

inline GaussianParams apply_gaussian_mlp(Graph& g, const GaussianMlpRef& m, const Tensor& x) {
    Tensor h = tanh(g, apply_linear(g, m.hidden, x));
    Tensor mu = apply_linear(g, m.mean_head, h);
    Tensor lv = clamp(g, apply_linear(g, m.logvar_head, h), -kLogvarClamp, kLogvarClamp);
    return {mu, lv};
}

// 2-layer feedforward vector map (latent generator, BOW head).
struct Mlp2Params {
    LinearParams l1, l2;
};

inline Mlp2Params make_mlp2(ParameterStore& store, const std::string& prefix, std::size_t in,
                            std::size_t width, std::size_t out, Rng& rng) {
    return {make_linear(store, prefix + ".l1", in, width, rng),
            make_linear(store, prefix + ".l2", width, out, rng)};
}

struct Mlp2Ref {
    LinearRef l1, l2;
};

inline Mlp2Ref use_mlp2(Graph& g, const Mlp2Params& p, bool trainable) {
    return {use_linear(g, p.l1, trainable), use_linear(g, p.l2, trainable)};
}

inline Tensor apply_mlp2(Graph& g, const Mlp2Ref& m, const Tensor& x) {
    return apply_linear(g, m.l2, tanh(g, apply_linear(g, m.l1, x)));
}

// Which parameter group may receive gradients in the current graph.
struct PhaseTrainability {
    bool theta = false;
    bool phi = false;
};

inline constexpr PhaseTrainability kTrainTheta{true, false};
inline constexpr PhaseTrainability kTrainPhi{false, true};
inline constexpr PhaseTrainability kTrainBoth{true, true};
inline constexpr PhaseTrainability kEvalOnly{false, false};

class DialogueModel {
public:
    DialogueModel(Architecture arch, ModelDims dims, ParameterStore& store, Rng& init_rng,
                  bool with_bow_head = false, bool standard_normal_prior = false,
                  bool generator_uses_context = true)
        : arch_(arch),
          dims_(dims),
          standard_normal_prior_(standard_normal_prior),
          generator_uses_context_(generator_uses_context),
          with_bow_head_(with_bow_head) {
        embedding = store.create_uniform("encoder.embedding", {dims.vocab, dims.embed}, init_rng);
        token_gru = make_gru_params(store, "encoder.token_gru", dims.embed, dims.token_hidden,
                                    init_rng);
        context_gru = make_gru_params(store, "encoder.context_gru", dims.token_hidden,
                                      dims.context_hidden, init_rng);

        const std::size_t z_dim = latent_out_dim();
        decoder_gru = make_gru_params(store, "decoder.gru",
                                      dims.embed + z_dim + dims.context_hidden,
                                      dims.decoder_hidden, init_rng);
        init_proj = make_linear(store, "decoder.init_proj", z_dim + dims.context_hidden,
                                dims.decoder_hidden, init_rng);
        out_proj = make_linear(store, "decoder.out_proj", dims.decoder_hidden, dims.vocab,
                               init_rng);

        if (has_latent()) {
            prior_mlp = make_gaussian_mlp(store, "latent.prior", dims.context_hidden,
                                          dims.mlp_width(), dims.latent, init_rng);
            recognition_mlp = make_gaussian_mlp(store, "latent.recognition",
                                                dims.token_hidden + dims.context_hidden,
                                                dims.mlp_width(), dims.latent, init_rng);
        }
        if (arch == Architecture::kCo) {
            const std::size_t gen_in =
                dims.latent + (generator_uses_context_ ? dims.context_hidden : 0);
            generator_mlp = make_mlp2(store, "latent.generator", gen_in, dims.mlp_width(),
                                      dims.token_hidden, init_rng);
        }
        if (with_bow_head_) {
            if (arch != Architecture::kVhred)
                throw ConfigError("the bag-of-words head requires the vhred architecture");
            bow_mlp = make_mlp2(store, "decoder.bow", z_dim + dims.context_hidden,
                                dims.mlp_width(), dims.vocab, init_rng);
        }
    }

    Architecture arch() const { return arch_; }
    const ModelDims& dims() const { return dims_; }
    bool has_latent() const { return arch_ != Architecture::kHred; }
    bool has_bow_head() const { return with_bow_head_; }
    bool standard_normal_prior() const { return standard_normal_prior_; }
    bool generator_uses_context() const { return generator_uses_context_; }

    // dimension of the latent vector the decoder consumes
    std::size_t latent_out_dim() const {
        switch (arch_) {
            case Architecture::kHred: return 0;
            case Architecture::kVhred: return dims_.latent;
            case Architecture::kCo: return dims_.token_hidden;
        }
        return 0;
    }

    // encoder/decoder side (trained in the AE phase)
    std::vector<ParamPtr> theta_params() const {
        std::vector<ParamPtr> out;
        out.push_back(embedding);
        collect_params(token_gru, out);
        collect_params(context_gru, out);
        collect_params(decoder_gru, out);
        collect_params(init_proj, out);
        collect_params(out_proj, out);
        if (with_bow_head_) {
            collect_params(bow_mlp->l1, out);
            collect_params(bow_mlp->l2, out);
        }
        return out;
    }

    // latent networks (trained in the CVAE phase)
    std::vector<ParamPtr> phi_params() const {
        std::vector<ParamPtr> out;
        if (has_latent()) {
            collect_params(prior_mlp->hidden, out);
            collect_params(prior_mlp->mean_head, out);
            collect_params(prior_mlp->logvar_head, out);
            collect_params(recognition_mlp->hidden, out);
            collect_params(recognition_mlp->mean_head, out);
            collect_params(recognition_mlp->logvar_head, out);
        }
        if (generator_mlp) {
            collect_params(generator_mlp->l1, out);
            collect_params(generator_mlp->l2, out);
        }
        return out;
    }

    std::vector<ParamPtr> all_params() const {
        std::vector<ParamPtr> out = theta_params();
        auto phi = phi_params();
        out.insert(out.end(), phi.begin(), phi.end());
        return out;
    }

    ParamPtr embedding;
    GruParams token_gru;
    GruParams context_gru;
    GruParams decoder_gru;
    LinearParams init_proj;
    LinearParams out_proj;
    std::optional<GaussianMlpParams> prior_mlp;
    std::optional<GaussianMlpParams> recognition_mlp;
    std::optional<Mlp2Params> generator_mlp;
    std::optional<Mlp2Params> bow_mlp;

private:
    Architecture arch_;
    ModelDims dims_;
    bool standard_normal_prior_;
    bool generator_uses_context_;
    bool with_bow_head_;
};

inline Tensor gaussian_noise(Graph& g, std::size_t dim, Rng& rng) {
    std::vector<double> n(dim);
    for (double& v : n) v = rng.normal();
    return g.input({dim}, std::move(n));
}

// A model's weights bound into one graph with a phase's trainability.
class ModelRef {
public:
    ModelRef(Graph& g, const DialogueModel& m, PhaseTrainability t)
        : g_(&g), m_(&m), theta_(t.theta), phi_(t.phi) {
        token_gru_ = use_gru(g, m.token_gru, theta_);
        context_gru_ = use_gru(g, m.context_gru, theta_);
        decoder_gru_ = use_gru(g, m.decoder_gru, theta_);
        init_proj_ = use_linear(g, m.init_proj, theta_);
        out_proj_ = use_linear(g, m.out_proj, theta_);
        if (m.has_latent()) {
            prior_ = use_gaussian_mlp(g, *m.prior_mlp, phi_);
            recognition_ = use_gaussian_mlp(g, *m.recognition_mlp, phi_);
        }
        if (m.generator_mlp) generator_ = use_mlp2(g, *m.generator_mlp, phi_);
        if (m.bow_mlp) bow_ = use_mlp2(g, *m.bow_mlp, theta_);
    }

    Graph& graph() const { return *g_; }
    const DialogueModel& model() const { return *m_; }

    Tensor embed(int token_id) const {
        return embedding_row(*g_, m_->embedding, token_id, theta_);
    }

    // final hidden state of the token-level GRU over the utterance
    Tensor encode_utterance(std::span<const int> tokens) const {
        if (tokens.empty())
            throw DataError("encode_utterance: empty (all-masked) token span");
        Tensor h = g_->zeros({m_->dims().token_hidden});
        for (int id : tokens) h = gru_cell(*g_, token_gru_, embed(id), h);
        return h;
    }

    // one dialogue-GRU step over an utterance vector
    Tensor context_step(const Tensor& utterance_vec, const Tensor& c) const {
        return gru_cell(*g_, context_gru_, utterance_vec, c);
    }

    // dialogue-GRU state after consuming the given utterance vectors;
    // an empty history encodes to the zero state
    Tensor encode_context(std::span<const Tensor> utterance_vecs) const {
        Tensor c = g_->zeros({m_->dims().context_hidden});
        for (const Tensor& v : utterance_vecs) c = context_step(v, c);
        return c;
    }

    GaussianParams prior(const Tensor& c) const {
        if (m_->standard_normal_prior())
            return {g_->zeros({m_->dims().latent}), g_->zeros({m_->dims().latent})};
        return apply_gaussian_mlp(*g_, *prior_, c);
    }

    GaussianParams recognition(const Tensor& ztilde, const Tensor& c) const {
        return apply_gaussian_mlp(*g_, *recognition_, concat(*g_, ztilde, c));
    }

    // deterministic MLP map of (eps ++ c), dimension of z-tilde
    Tensor generate_latent(const Tensor& eps, const Tensor& c) const {
        Tensor in = m_->generator_uses_context() ? concat(*g_, eps, c) : eps;
        return apply_mlp2(*g_, *generator_, in);
    }

    // the latent the generative path feeds the decoder, using a prior draw
    Tensor sample_generative_latent(const Tensor& c, Rng& rng) const {
        Tensor eps = reparameterize(*g_, prior(c), gaussian_noise(*g_, m_->dims().latent, rng));
        if (m_->arch() == Architecture::kCo) return generate_latent(eps, c);
        return eps;
    }

    // same path but with noise drawn from the recognition posterior
    Tensor sample_posterior_latent(const Tensor& ztilde, const Tensor& c, Rng& rng) const {
        Tensor eps = reparameterize(*g_, recognition(ztilde, c),
                                    gaussian_noise(*g_, m_->dims().latent, rng));
        if (m_->arch() == Architecture::kCo) return generate_latent(eps, c);
        return eps;
    }

    Tensor decoder_initial_state(const Tensor* z, const Tensor& c) const {
        Tensor in = z ? concat(*g_, *z, c) : c;
        return tanh(*g_, apply_linear(*g_, init_proj_, in));
    }

    Tensor decoder_step(int input_token, const Tensor* z, const Tensor& c, Tensor& h) const {
        Tensor x = embed(input_token);
        if (z) x = concat(*g_, x, *z);
        x = concat(*g_, x, c);
        h = gru_cell(*g_, decoder_gru_, x, h);
        return apply_linear(*g_, out_proj_, h);
    }

    struct DecodeResult {
        Tensor nll_sum;
        std::size_t tokens = 0;
    };

    // Teacher-forced decode of one response. The input sequence is the target
    // shifted right behind a start token; word drop-out, when requested,
    // perturbs only these inputs.
    DecodeResult decode_teacher_forced(const Tensor* z, const Tensor& c,
                                       std::span<const int> target, double dropout_rate = 0.0,
                                       Rng* rng = nullptr) const {
        if (target.empty()) throw DataError("decode_teacher_forced: empty target");
        std::vector<int> inputs;
        inputs.reserve(target.size());
        inputs.push_back(Vocab::kSos);
        inputs.insert(inputs.end(), target.begin(), target.end() - 1);
        if (dropout_rate > 0.0) {
            if (!rng) throw ConfigError("word drop-out needs an rng");
            word_dropout(inputs, dropout_rate, *rng);
        }
        Tensor h = decoder_initial_state(z, c);
        Tensor nll = g_->zeros({1});
        for (std::size_t t = 0; t < target.size(); ++t) {
            Tensor logits = decoder_step(inputs[t], z, c, h);
            nll = add(*g_, nll, softmax_cross_entropy(*g_, logits, target[t]));
        }
        return {nll, target.size()};
    }

    // vocabulary logits of the bag-of-words head, produced once per response
    Tensor bow_logits(const Tensor& z, const Tensor& c) const {
        return apply_mlp2(*g_, *bow_, concat(*g_, z, c));
    }

private:
    Graph* g_;
    const DialogueModel* m_;
    bool theta_;
    bool phi_;
    GruRef token_gru_, context_gru_, decoder_gru_;
    LinearRef init_proj_, out_proj_;
    std::optional<GaussianMlpRef> prior_, recognition_;
    std::optional<Mlp2Ref> generator_, bow_;
};

// How the scheduled-sampling latent is mixed in the AE phase.
enum class SsMode { kCoin, kMix };

// Per-response latent bookkeeping for the collaborative architecture.
struct LatentBundle {
    Tensor ztilde;
    Tensor eps;
    Tensor z_gen;
    Tensor z_fed;
    double keep_prob = 1.0;
    bool used_ztilde = true;  // meaningful in coin mode only
};

// In coin mode a coin decides between z-tilde and the generated latent; in
// mix mode the decoder sees the convex combination (1-p)*z_gen + p*ztilde.
inline LatentBundle make_latent_bundle(Graph& g, const ModelRef& m, const Tensor& ztilde,
                                       const Tensor& eps, const Tensor& c, double keep_prob,
                                       SsMode mode, Rng& rng) {
    LatentBundle b;
    b.ztilde = ztilde;
    b.eps = eps;
    b.keep_prob = keep_prob;
    b.z_gen = m.generate_latent(eps, c);
    if (mode == SsMode::kCoin) {
        b.used_ztilde = rng.bernoulli(keep_prob);
        b.z_fed = b.used_ztilde ? ztilde : b.z_gen;
    } else {
        b.used_ztilde = false;
        b.z_fed = add(g, scale(g, b.z_gen, 1.0 - keep_prob), scale(g, ztilde, keep_prob));
    }
    return b;
}

enum class CoPhase { kAe, kCvae };

struct ForwardOptions {
    double dropout_rate = 0.0;  // word drop-out on decoder inputs (training only)
    bool bow = false;
    double keep_prob = 1.0;     // scheduled-sampling keeping rate (co, AE phase)
    SsMode ss_mode = SsMode::kCoin;
    CoPhase co_phase = CoPhase::kAe;
    Rng* rng = nullptr;         // required for latent architectures and drop-out
};

// Loss pieces of one slice, as graph tensors so objectives can be assembled.
struct SliceForward {
    Tensor recon_sum;                      // token NLL sum, or the CVAE-phase squared error
    std::vector<Tensor> kl_per_response;   // per-dimension KL vectors
    std::vector<Tensor> bow_per_response;  // BOW loss scalars when enabled
    std::size_t tokens = 0;
    std::size_t responses = 0;
};

// Runs one slice through the architecture bound in `m`. Each utterance
// segment is a response; all preceding segments in the slice are its context.
inline SliceForward forward_slice(ModelRef& m, std::span<const int> ids,
                                  std::span<const std::pair<std::size_t, std::size_t>> segments,
                                  const ForwardOptions& opt) {
    Graph& g = m.graph();
    const DialogueModel& model = m.model();
    if (model.has_latent() && !opt.rng)
        throw ConfigError("forward_slice: latent architectures need an rng");

    SliceForward out;
    out.recon_sum = g.zeros({1});

    Tensor c = m.encode_context({});  // zero state before the first segment
    for (const auto& [start, end] : segments) {
        std::span<const int> target = ids.subspan(start, end - start);
        Tensor ztilde = m.encode_utterance(target);
        ++out.responses;

        switch (model.arch()) {
            case Architecture::kHred: {
                auto dec = m.decode_teacher_forced(nullptr, c, target, opt.dropout_rate, opt.rng);
                out.recon_sum = add(g, out.recon_sum, dec.nll_sum);
                out.tokens += dec.tokens;
                break;
            }
            case Architecture::kVhred: {
                GaussianParams q = m.recognition(ztilde, c);
                GaussianParams p = m.prior(c);
                Tensor z = reparameterize(
                    g, q, gaussian_noise(g, model.dims().latent, *opt.rng));
                out.kl_per_response.push_back(gaussian_kl(g, q, p));
                auto dec = m.decode_teacher_forced(&z, c, target, opt.dropout_rate, opt.rng);
                out.recon_sum = add(g, out.recon_sum, dec.nll_sum);
                out.tokens += dec.tokens;
                if (opt.bow) {
                    Tensor logits = m.bow_logits(z, c);
                    std::vector<int> bag(target.begin(), target.end());
                    out.bow_per_response.push_back(
                        softmax_cross_entropy_multi(g, logits, bag));
                }
                break;
            }
            case Architecture::kCo: {
                if (opt.co_phase == CoPhase::kAe) {
                    GaussianParams q = m.recognition(ztilde, c);
                    GaussianParams p = m.prior(c);
                    out.kl_per_response.push_back(gaussian_kl(g, q, p));
                    Tensor eps = reparameterize(
                        g, q, gaussian_noise(g, model.dims().latent, *opt.rng));
                    LatentBundle bundle = make_latent_bundle(g, m, ztilde, eps, c,
                                                             opt.keep_prob, opt.ss_mode,
                                                             *opt.rng);
                    auto dec = m.decode_teacher_forced(&bundle.z_fed, c, target,
                                                       opt.dropout_rate, opt.rng);
                    out.recon_sum = add(g, out.recon_sum, dec.nll_sum);
                    out.tokens += dec.tokens;
                } else {
                    // CVAE phase: z-tilde and the context are fixed targets
                    Tensor zt = g.detach(ztilde);
                    Tensor cd = g.detach(c);
                    GaussianParams q = m.recognition(zt, cd);
                    GaussianParams p = m.prior(cd);
                    out.kl_per_response.push_back(gaussian_kl(g, q, p));
                    Tensor eps = reparameterize(
                        g, q, gaussian_noise(g, model.dims().latent, *opt.rng));
                    Tensor z_gen = m.generate_latent(eps, cd);
                    Tensor diff = sub(g, z_gen, zt);
                    Tensor sq = scale(g, sum(g, mul(g, diff, diff)), 0.5);
                    out.recon_sum = add(g, out.recon_sum, sq);
                }
                break;
            }
        }
        c = m.context_step(ztilde, c);
    }
    return out;
}

struct BeamSearchConfig {
    std::size_t beam_size = 5;
    std::size_t max_len = 40;
    bool block_unk = true;
};

// Beam search over total accumulated log-probability, no length
// normalization. Finished hypotheses (ending at the end-of-utterance token
// or at max_len) stay in the beam and compete by the same score, so
// beam_size 1 is exactly greedy decoding and a beam at least as large as the
// hypothesis space is exhaustive. <pad>, <sos> and (when blocked) <unk>
// are never generated.
inline std::vector<int> beam_search(ModelRef& m, const Tensor& c, const Tensor* z,
                                    const BeamSearchConfig& cfg) {
    const std::size_t v = m.model().dims().vocab;

    struct Hyp {
        std::vector<int> tokens;
        double logp = 0.0;
        Tensor state;
        bool done = false;
    };

    Hyp root;
    root.state = m.decoder_initial_state(z, c);
    std::vector<Hyp> beam = {root};

    for (std::size_t step = 0; step < cfg.max_len; ++step) {
        const bool any_open =
            std::any_of(beam.begin(), beam.end(), [](const Hyp& h) { return !h.done; });
        if (!any_open) break;
        std::vector<Hyp> candidates;
        for (Hyp& h : beam) {
            if (h.done) {
                candidates.push_back(std::move(h));
                continue;
            }
            const int input = h.tokens.empty() ? Vocab::kSos : h.tokens.back();
            Tensor state = h.state;
            Tensor logits = m.decoder_step(input, z, c, state);
            const double lse = detail::log_sum_exp(logits.data());
            for (std::size_t t = 0; t < v; ++t) {
                const int tok = static_cast<int>(t);
                if (tok == Vocab::kPad || tok == Vocab::kSos) continue;
                if (cfg.block_unk && tok == Vocab::kUnk) continue;
                Hyp next;
                next.tokens = h.tokens;
                next.tokens.push_back(tok);
                next.logp = h.logp + (logits.at(t) - lse);
                next.state = state;
                next.done = (tok == Vocab::kEou) || (next.tokens.size() >= cfg.max_len);
                candidates.push_back(std::move(next));
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Hyp& a, const Hyp& b) { return a.logp > b.logp; });
        if (candidates.size() > cfg.beam_size) candidates.resize(cfg.beam_size);
        beam = std::move(candidates);
    }

    const Hyp* best = nullptr;
    for (const Hyp& h : beam)
        if (!best || h.logp > best->logp) best = &h;
    return best->tokens;
}

}  // namespace coved
