#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pqvae/quantizer.hpp"
#include "pqvae/rng.hpp"
#include "pqvae/tensor.hpp"

namespace pqvae {

/// Desk-scale autoencoder dimensions. Temporal downsampling is realized by
/// frame stacking (each group of `downsample` consecutive frames is one
/// model input row), so the residual stacks are plain MLP units.
struct ModelConfig {
    int feature_dim = 32;
    int hidden_dim = 96;
    int embed_dim = 48;      // quantizer input width before any bottleneck
    int downsample = 4;      // input frames per latent frame
    int n_residual_units = 2;
    std::optional<int> bottleneck_dim;  // per-subspace projection width
    std::vector<int> sub_dims;          // embed_dim chunking (for the bottleneck)

    void validate() const {
        if (feature_dim < 1 || hidden_dim < 1 || embed_dim < 1)
            throw std::invalid_argument("model: dims must be >= 1");
        if (downsample < 1) throw std::invalid_argument("model: downsample must be >= 1");
        if (n_residual_units < 0) throw std::invalid_argument("model: n_residual_units < 0");
        if (bottleneck_dim) {
            if (*bottleneck_dim < 1) throw std::invalid_argument("model: bottleneck_dim < 1");
            if (sub_dims.empty())
                throw std::invalid_argument("model: bottleneck needs sub_dims chunking");
            int total = 0;
            for (int d : sub_dims) total += d;
            if (total != embed_dim)
                throw std::invalid_argument("model: sub_dims sum " + std::to_string(total) +
                                            " != embed_dim " + std::to_string(embed_dim));
        }
    }

    /// Width of the sequence fed to the quantizer (and to the decoder).
    int latent_dim() const {
        if (!bottleneck_dim) return embed_dim;
        return *bottleneck_dim * static_cast<int>(sub_dims.size());
    }
};

struct DualOutputs {
    Tensor xhat;    // decode(Z)
    Tensor xtilde;  // decode(E) through the same decoder weights
    Tensor e;       // encoder output (post-bottleneck)
    Tensor z;       // straight_through(E, quantized)
    Tensor zq;      // quantized sequence before straight-through
    QuantizeResult qr;
};

/// Encoder / decoder pair with shared-structure residual units:
///   unit(h) = a(h) + B(elu(A(a(h))))     (all affine layers)
/// The decoder mirrors the encoder and un-stacks frames at the output.
class Model {
public:
    Model() = default;

    Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const int stacked = cfg.downsample * cfg.feature_dim;
        enc_in_ = make_affine(stacked, cfg.hidden_dim, rng, "enc.in");
        for (int u = 0; u < cfg.n_residual_units; ++u)
            enc_units_.push_back(make_unit(cfg.hidden_dim, rng, "enc.unit" + std::to_string(u)));
        enc_out_ = make_affine(cfg.hidden_dim, cfg.embed_dim, rng, "enc.out");
        if (cfg.bottleneck_dim) {
            int off = 0;
            for (std::size_t s = 0; s < cfg.sub_dims.size(); ++s) {
                bottlenecks_.push_back(make_affine(cfg.sub_dims[s], *cfg.bottleneck_dim, rng,
                                                   "enc.bn" + std::to_string(s)));
                off += cfg.sub_dims[s];
            }
        }
        dec_in_ = make_affine(cfg.latent_dim(), cfg.hidden_dim, rng, "dec.in");
        for (int u = 0; u < cfg.n_residual_units; ++u)
            dec_units_.push_back(make_unit(cfg.hidden_dim, rng, "dec.unit" + std::to_string(u)));
        dec_out_ = make_affine(cfg.hidden_dim, stacked, rng, "dec.out");
    }

    const ModelConfig& config() const { return cfg_; }

    /// X:[T, feature_dim] -> E:[T/downsample, latent_dim]. T must be a
    /// multiple of downsample (the data layer pads and masks otherwise).
    Tensor encode(const Tensor& x) const {
        if (x.shape().size() != 2 || x.cols() != cfg_.feature_dim)
            throw std::invalid_argument("encode: expected [T," + std::to_string(cfg_.feature_dim) +
                                        "] input, got " + detail::shape_str(x.shape()));
        if (x.rows() % cfg_.downsample != 0)
            throw std::invalid_argument("encode: T=" + std::to_string(x.rows()) +
                                        " not divisible by downsample " +
                                        std::to_string(cfg_.downsample));
        const int t = x.rows() / cfg_.downsample;
        Tensor h = reshape(x, {t, cfg_.downsample * cfg_.feature_dim});
        h = affine(h, enc_in_.w, enc_in_.b);
        for (const auto& u : enc_units_) h = run_unit(u, h);
        Tensor e = affine(h, enc_out_.w, enc_out_.b);
        if (!bottlenecks_.empty()) {
            std::vector<Tensor> parts;
            int off = 0;
            for (std::size_t s = 0; s < bottlenecks_.size(); ++s) {
                Tensor chunk = slice_cols(e, off, off + cfg_.sub_dims[s]);
                parts.push_back(affine(chunk, bottlenecks_[s].w, bottlenecks_[s].b));
                off += cfg_.sub_dims[s];
            }
            e = parts.size() == 1 ? parts[0] : concat_cols(parts);
        }
        return e;
    }

    /// Z:[T', latent_dim] -> X:[T'*downsample, feature_dim].
    Tensor decode(const Tensor& z) const {
        if (z.shape().size() != 2 || z.cols() != cfg_.latent_dim())
            throw std::invalid_argument("decode: expected [T'," +
                                        std::to_string(cfg_.latent_dim()) + "] input, got " +
                                        detail::shape_str(z.shape()));
        Tensor h = affine(z, dec_in_.w, dec_in_.b);
        for (const auto& u : dec_units_) h = run_unit(u, h);
        Tensor y = affine(h, dec_out_.w, dec_out_.b);
        return reshape(y, {z.rows() * cfg_.downsample, cfg_.feature_dim});
    }

    /// Dual decoding: both reconstructions live in one graph so the combined
    /// loss is differentiable end to end.
    DualOutputs forward_dual(const Tensor& x, const Quantizer& quantizer) const {
        DualOutputs out;
        out.e = encode(x);
        out.qr = quantizer.quantize(out.e);
        out.zq = quantizer.quantized_graph(out.e, out.qr);
        out.z = straight_through(out.e, out.zq);
        out.xhat = decode(out.z);
        out.xtilde = decode(out.e);
        return out;
    }

    /// Named parameters in a stable order.
    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        auto push = [&out](const Affine& a) {
            out.emplace_back(a.name + ".w", a.w);
            out.emplace_back(a.name + ".b", a.b);
        };
        push(enc_in_);
        for (const auto& u : enc_units_) {
            push(u.pre);
            push(u.a);
            push(u.b);
        }
        push(enc_out_);
        for (const auto& bn : bottlenecks_) push(bn);
        push(dec_in_);
        for (const auto& u : dec_units_) {
            push(u.pre);
            push(u.a);
            push(u.b);
        }
        push(dec_out_);
        return out;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    long long param_count() const {
        long long n = 0;
        for (const Tensor& t : params()) n += t.numel();
        return n;
    }

private:
    struct Affine {
        std::string name;
        Tensor w, b;
    };
    struct Unit {
        Affine pre, a, b;
    };

    /// Weights uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)), zero biases.
    static Affine make_affine(int in, int out, Rng& rng, std::string name) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        Affine a;
        a.name = std::move(name);
        a.w = Tensor::uniform({in, out}, rng, -bound, bound, true);
        a.b = Tensor::zeros({out}, true);
        return a;
    }

    static Unit make_unit(int dim, Rng& rng, const std::string& name) {
        Unit u;
        u.pre = make_affine(dim, dim, rng, name + ".pre");
        u.a = make_affine(dim, dim, rng, name + ".a");
        u.b = make_affine(dim, dim, rng, name + ".b");
        return u;
    }

    static Tensor run_unit(const Unit& u, const Tensor& x) {
        Tensor h = affine(x, u.pre.w, u.pre.b);
        Tensor r = affine(elu(affine(h, u.a.w, u.a.b)), u.b.w, u.b.b);
        return add(h, r);
    }

    ModelConfig cfg_;
    Affine enc_in_, enc_out_, dec_in_, dec_out_;
    std::vector<Unit> enc_units_, dec_units_;
    std::vector<Affine> bottlenecks_;
};

}  // namespace pqvae
