#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "davqa/errors.hpp"
#include "davqa/hooks.hpp"
#include "davqa/rng.hpp"
#include "davqa/tensor.hpp"

namespace davqa {

struct BackboneConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t d_v = 64;          // vision hidden size
    std::size_t vision_layers = 12;
    std::size_t d_q = 64;          // text hidden size
    std::size_t decoder_layers = 4;
    std::size_t heads = 4;
    std::size_t vocab_size = 64;
    std::size_t max_answer_len = 8;
    std::size_t max_text_len = 72;  // prefix + question + answer positions
    std::size_t mlp_ratio = 2;      // transformer MLP width multiplier
    double ln_eps = 1e-5;

    std::size_t tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::size_t patch_dim() const { return patch_size * patch_size; }

    void validate() const {
        if (patch_size == 0 || image_size % patch_size != 0) {
            throw ConfigError("image_size " + std::to_string(image_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        }
        if (heads == 0 || d_v % heads != 0 || d_q % heads != 0) {
            throw ConfigError("d_v and d_q must be divisible by heads");
        }
        if (vision_layers == 0 || decoder_layers == 0 || vocab_size == 0) {
            throw ConfigError("layer and vocabulary counts must be positive");
        }
    }
};

// 32x32 grayscale image, values in [0,1], row-major.
using Image = std::vector<double>;

// Transform applied to each vision block's output; layer index is 1-based.
using LayerTransform = std::function<Tensor(std::size_t, Tensor)>;

inline std::string vision_site_name(std::size_t layer_1based) {
    return "vision.block." + std::to_string(layer_1based);
}

// Initial value of the residual-branch gates in every transformer block.
inline constexpr double kGateInit = 0.1;

// Miniature frozen vision-language model: ViT-style patch encoder, a linear
// vision-to-token projection, and a causal decoder generating answer tokens
// conditioned on the visual tokens. Hook sites sit after every vision block.
class Backbone {
public:
    explicit Backbone(BackboneConfig cfg = {}, std::uint64_t seed = 0x0ddba11) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(seed, "backbone-init"));
        const double sd = 0.02;

        auto w = [&](const std::string& name, Shape shape) {
            params_.add(name, Tensor::randn(std::move(shape), rng, sd));
        };
        auto zeros = [&](const std::string& name, Shape shape) {
            params_.add(name, Tensor::zeros(std::move(shape)));
        };
        auto block = [&](const std::string& p, std::size_t d) {
            params_.add(p + ".ln1.gamma", Tensor::full({d}, 1.0));
            zeros(p + ".ln1.beta", {d});
            for (const char* m : {"wq", "wk", "wv", "wo"}) w(p + ".attn." + m, {d, d});
            for (const char* m : {"bq", "bk", "bv", "bo"}) zeros(p + ".attn." + m, {d});
            // Residual branch gates start small, not zero: blocks begin close
            // to the identity map (train-stable at depth) while still passing
            // gradient to the branch weights from the first step.
            params_.add(p + ".attn.gate", Tensor::full({1}, kGateInit));
            params_.add(p + ".ln2.gamma", Tensor::full({d}, 1.0));
            zeros(p + ".ln2.beta", {d});
            w(p + ".mlp.w1", {cfg_.mlp_ratio * d, d});
            zeros(p + ".mlp.b1", {cfg_.mlp_ratio * d});
            w(p + ".mlp.w2", {d, cfg_.mlp_ratio * d});
            zeros(p + ".mlp.b2", {d});
            params_.add(p + ".mlp.gate", Tensor::full({1}, kGateInit));
        };

        w("vision.patch_proj", {cfg_.d_v, cfg_.patch_dim()});  // biasless by design
        w("vision.pos", {cfg_.tokens(), cfg_.d_v});
        for (std::size_t l = 1; l <= cfg_.vision_layers; ++l) block("vision.block." + std::to_string(l), cfg_.d_v);
        params_.add("vision.ln_out.gamma", Tensor::full({cfg_.d_v}, 1.0));
        zeros("vision.ln_out.beta", {cfg_.d_v});

        w("proj.w", {cfg_.d_q, cfg_.d_v});
        zeros("proj.b", {cfg_.d_q});

        w("text.tok", {cfg_.vocab_size, cfg_.d_q});
        w("text.pos", {cfg_.max_text_len, cfg_.d_q});
        for (std::size_t l = 1; l <= cfg_.decoder_layers; ++l) block("dec.block." + std::to_string(l), cfg_.d_q);
        params_.add("dec.ln_out.gamma", Tensor::full({cfg_.d_q}, 1.0));
        zeros("dec.ln_out.beta", {cfg_.d_q});
        w("dec.head.w", {cfg_.vocab_size, cfg_.d_q});
        zeros("dec.head.b", {cfg_.vocab_size});

        for (std::size_t l = 1; l <= cfg_.vision_layers; ++l) {
            hooks_.declare_site(vision_site_name(l), {cfg_.tokens(), cfg_.d_v});
        }
    }

    const BackboneConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    HookEngine& hooks() { return hooks_; }
    const HookEngine& hooks() const { return hooks_; }

    void freeze() { params_.freeze_all(); }
    bool frozen() const { return params_.all_frozen(); }

    // ---- vision ----

    Tensor embed_patches(const Image& image) const {
        const std::size_t side = cfg_.image_size, ps = cfg_.patch_size;
        if (image.size() != side * side) {
            throw ConfigError("image has " + std::to_string(image.size()) + " pixels, config wants " +
                              std::to_string(side * side));
        }
        double mean = 0.0;
        for (double v : image) {
            if (v < 0.0 || v > 1.0) throw ConfigError("image pixel outside [0,1]: " + std::to_string(v));
            mean += v;
        }
        mean /= static_cast<double>(image.size());
        const std::size_t grid = side / ps;
        // Center the pixels on the image mean: overall brightness varies per
        // sample but never carries answer information, and removing it up
        // front keeps the patch features aligned with shape structure.
        std::vector<double> flat(cfg_.tokens() * cfg_.patch_dim());
        for (std::size_t pr = 0; pr < grid; ++pr)
            for (std::size_t pc = 0; pc < grid; ++pc)
                for (std::size_t r = 0; r < ps; ++r)
                    for (std::size_t c = 0; c < ps; ++c)
                        flat[(pr * grid + pc) * cfg_.patch_dim() + r * ps + c] =
                            image[(pr * ps + r) * side + pc * ps + c] - mean;
        Tensor patches = Tensor::from({cfg_.tokens(), cfg_.patch_dim()}, std::move(flat));
        return add(linear(patches, params_.at("vision.patch_proj").tensor),
                   params_.at("vision.pos").tensor);
    }

    // Runs the vision stack with an arbitrary per-layer transform. The hooked
    // path and the hardcoded-inline path both call this, so their op sequence
    // is identical and outputs are bit-comparable.
    Tensor encode_vision_with(const Tensor& patch_tokens, const LayerTransform& transform) const {
        Tensor h = patch_tokens;
        for (std::size_t l = 1; l <= cfg_.vision_layers; ++l) {
            h = block_forward("vision.block." + std::to_string(l), h, nullptr);
            if (transform) h = transform(l, h);
        }
        return layer_norm(h, params_.at("vision.ln_out.gamma").tensor,
                          params_.at("vision.ln_out.beta").tensor, cfg_.ln_eps);
    }

    Tensor encode_vision(const Tensor& patch_tokens) const {
        return encode_vision_with(
            patch_tokens, [this](std::size_t l, Tensor out) { return hooks_.apply(vision_site_name(l), out); });
    }

    Tensor project_visual(const Tensor& z_v) const {
        return linear(z_v, params_.at("proj.w").tensor, params_.at("proj.b").tensor);
    }

    // ---- text / decoder ----

    Tensor embed_tokens(const std::vector<int>& ids) const {
        return embedding_rows(params_.at("text.tok").tensor, ids);
    }

    // Concatenates [visual; text], applies text position embeddings (visual
    // tokens deliberately get none), runs the decoder with visual tokens fully
    // visible to every text position and a causal mask among text positions.
    // Returns next-token logits for the m text rows.
    Tensor forward_logits(const Tensor& visual_tokens, const Tensor& text_embeddings) const {
        if (visual_tokens.cols() != cfg_.d_q || text_embeddings.cols() != cfg_.d_q) {
            throw ShapeError("forward_logits expects width " + std::to_string(cfg_.d_q) + ", got visual " +
                             shape_str(visual_tokens.shape()) + " and text " +
                             shape_str(text_embeddings.shape()));
        }
        const std::size_t t = visual_tokens.rows(), m = text_embeddings.rows();
        if (m > cfg_.max_text_len) {
            throw ConfigError("text stream of " + std::to_string(m) + " rows exceeds max_text_len " +
                              std::to_string(cfg_.max_text_len));
        }
        Tensor pos = slice_rows(params_.at("text.pos").tensor, 0, m);
        Tensor h = concat_rows({visual_tokens, add(text_embeddings, pos)});
        const Tensor mask = decoder_mask(t, m);
        for (std::size_t l = 1; l <= cfg_.decoder_layers; ++l) {
            h = block_forward("dec.block." + std::to_string(l), h, &mask);
        }
        h = layer_norm(h, params_.at("dec.ln_out.gamma").tensor, params_.at("dec.ln_out.beta").tensor,
                       cfg_.ln_eps);
        Tensor text_rows = slice_rows(h, t, m);
        return linear(text_rows, params_.at("dec.head.w").tensor, params_.at("dec.head.b").tensor);
    }

    // Text stream for one example: [bound prefix rows; token embeddings].
    Tensor text_stream(const std::vector<int>& ids) const {
        Tensor embs = embed_tokens(ids);
        const auto& prefix = hooks_.bound_prefix();
        if (!prefix) return embs;
        if (prefix->cols() != cfg_.d_q) {
            throw ShapeError("bound prefix width " + shape_str(prefix->shape()) + " does not match d_q " +
                             std::to_string(cfg_.d_q));
        }
        if (prefix->rows() == 0) return embs;
        return concat_rows({*prefix, embs});
    }

    // Greedy argmax decoding up to max_answer_len or the end token. Uses the
    // currently bound prefix and active visual hooks; asserts the hook set is
    // not mutated mid-episode.
    std::vector<int> generate_greedy(const Image& image, const std::vector<int>& question,
                                     int end_token) const {
        if (question.empty()) throw ContractError("generate_greedy requires a nonempty question");
        NoGradGuard no_grad;
        const std::uint64_t episode = hooks_.epoch();
        const Tensor visual = project_visual(encode_vision(embed_patches(image)));
        std::vector<int> ids = question;
        std::vector<int> answer;
        for (std::size_t step = 0; step < cfg_.max_answer_len; ++step) {
            Tensor logits = forward_logits(visual, text_stream(ids));
            const int next = static_cast<int>(argmax_row(logits, logits.rows() - 1));
            if (next == end_token) break;
            answer.push_back(next);
            ids.push_back(next);
        }
        hooks_.assert_epoch(episode, "generate_greedy");
        return answer;
    }

    // Teacher-forced mean cross-entropy over the answer tokens plus the end
    // token, conditioned on image, bound prefix and question.
    Tensor answer_loss(const Image& image, const std::vector<int>& question,
                       const std::vector<int>& answer, int end_token) const {
        if (question.empty()) throw ContractError("answer_loss requires a nonempty question");
        const std::uint64_t episode = hooks_.epoch();
        const Tensor visual = project_visual(encode_vision(embed_patches(image)));
        std::vector<int> ids = question;
        ids.insert(ids.end(), answer.begin(), answer.end());
        Tensor text = text_stream(ids);
        Tensor logits = forward_logits(visual, text);
        const std::size_t prefix_rows = text.rows() - ids.size();
        // row (prefix + question_len - 1 + i) predicts answer[i]; the final
        // answer row predicts the end token
        Tensor pred = slice_rows(logits, prefix_rows + question.size() - 1, answer.size() + 1);
        std::vector<int> targets = answer;
        targets.push_back(end_token);
        hooks_.assert_epoch(episode, "answer_loss");
        return softmax_cross_entropy(pred, targets);
    }

private:
    Tensor block_forward(const std::string& p, const Tensor& x, const Tensor* mask) const {
        Tensor a = layer_norm(x, params_.at(p + ".ln1.gamma").tensor, params_.at(p + ".ln1.beta").tensor,
                              cfg_.ln_eps);
        Tensor h = add(x, scale_by(attention(p + ".attn", a, mask), params_.at(p + ".attn.gate").tensor));
        Tensor m = layer_norm(h, params_.at(p + ".ln2.gamma").tensor, params_.at(p + ".ln2.beta").tensor,
                              cfg_.ln_eps);
        Tensor mlp = linear(gelu(linear(m, params_.at(p + ".mlp.w1").tensor, params_.at(p + ".mlp.b1").tensor)),
                            params_.at(p + ".mlp.w2").tensor, params_.at(p + ".mlp.b2").tensor);
        return add(h, scale_by(mlp, params_.at(p + ".mlp.gate").tensor));
    }

    Tensor attention(const std::string& p, const Tensor& x, const Tensor* mask) const {
        const std::size_t d = x.cols(), nh = cfg_.heads, dh = d / nh;
        Tensor q = linear(x, params_.at(p + ".wq").tensor, params_.at(p + ".bq").tensor);
        Tensor k = linear(x, params_.at(p + ".wk").tensor, params_.at(p + ".bk").tensor);
        Tensor v = linear(x, params_.at(p + ".wv").tensor, params_.at(p + ".bv").tensor);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> heads;
        heads.reserve(nh);
        for (std::size_t h = 0; h < nh; ++h) {
            Tensor qh = slice_cols(q, h * dh, dh);
            Tensor kh = slice_cols(k, h * dh, dh);
            Tensor vh = slice_cols(v, h * dh, dh);
            Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
            if (mask) scores = add(scores, *mask);
            heads.push_back(matmul(softmax_rows(scores), vh));
        }
        return linear(concat_cols(heads), params_.at(p + ".wo").tensor, params_.at(p + ".bo").tensor);
    }

    // 0 where attention is allowed, -1e9 where blocked: visual queries see
    // only visual tokens; text queries see all visual tokens plus text up to
    // and including their own position.
    static Tensor decoder_mask(std::size_t t, std::size_t m) {
        const std::size_t s = t + m;
        std::vector<double> mask(s * s, 0.0);
        for (std::size_t r = 0; r < s; ++r) {
            for (std::size_t c = 0; c < s; ++c) {
                const bool allowed = (r < t) ? (c < t) : (c < t || c <= r);
                if (!allowed) mask[r * s + c] = -1e9;
            }
        }
        return Tensor::from({s, s}, std::move(mask));
    }

    BackboneConfig cfg_;
    ParameterStore params_;
    HookEngine hooks_;
};

}  // namespace davqa
