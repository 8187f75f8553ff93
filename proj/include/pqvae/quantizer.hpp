#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pqvae/quantize.hpp"
#include "pqvae/rng.hpp"
#include "pqvae/tensor.hpp"

namespace pqvae {

enum class QuantKind { Identity, VQ, PQ, RVQ, FSQ };

inline const char* to_string(QuantKind k) {
    switch (k) {
        case QuantKind::Identity: return "identity";
        case QuantKind::VQ: return "vq";
        case QuantKind::PQ: return "pq";
        case QuantKind::RVQ: return "rvq";
        case QuantKind::FSQ: return "fsq";
    }
    return "?";
}

inline QuantKind quant_kind_from(const std::string& s) {
    if (s == "identity") return QuantKind::Identity;
    if (s == "vq") return QuantKind::VQ;
    if (s == "pq") return QuantKind::PQ;
    if (s == "rvq") return QuantKind::RVQ;
    if (s == "fsq") return QuantKind::FSQ;
    throw std::invalid_argument("unknown quantizer kind '" + s + "'");
}

struct QuantizerConfig {
    QuantKind kind = QuantKind::PQ;
    std::vector<int> sub_sizes;  // vq: {N}; pq: per-book sizes; rvq: per-stage sizes
    std::vector<int> sub_dims;   // pq chunk widths; empty = near-equal split
    std::vector<int> levels;     // fsq level counts
    double ema_decay = 0.999;
    bool ema = true;             // false: codebooks learn by gradient (beta path)
    bool dead_restart = false;   // optional random-restart replacement (vq baseline)
};

/// Stateful quantizer owned by one trainer. Lookup is read-only; EMA updates
/// require exclusive access. Books are data-initialized from the first
/// training batch via k-means++ style seeding (no Lloyd iterations).
class Quantizer {
public:
    Quantizer() = default;

    /// `dim` is the width of the sequence handed to quantize().
    static Quantizer create(const QuantizerConfig& cfg, int dim) {
        Quantizer q;
        q.cfg_ = cfg;
        q.dim_ = dim;
        switch (cfg.kind) {
            case QuantKind::Identity:
                q.initialized_ = true;
                break;
            case QuantKind::VQ: {
                if (cfg.sub_sizes.size() != 1)
                    throw std::invalid_argument("vq quantizer: expects exactly one size");
                q.pq_.sub_sizes = cfg.sub_sizes;
                q.pq_.sub_dims = {dim};
                break;
            }
            case QuantKind::PQ: {
                q.pq_.sub_sizes = cfg.sub_sizes;
                q.pq_.sub_dims = cfg.sub_dims.empty()
                                     ? PQConfig::near_equal_split(dim, static_cast<int>(cfg.sub_sizes.size()))
                                     : cfg.sub_dims;
                q.pq_.validate();
                if (q.pq_.dim() != dim)
                    throw std::invalid_argument("pq quantizer: sub_dims sum " +
                                                std::to_string(q.pq_.dim()) + " != dim " +
                                                std::to_string(dim));
                break;
            }
            case QuantKind::RVQ: {
                if (cfg.sub_sizes.empty())
                    throw std::invalid_argument("rvq quantizer: needs stage sizes");
                break;
            }
            case QuantKind::FSQ: {
                if (cfg.levels.empty())
                    throw std::invalid_argument("fsq quantizer: needs level counts");
                if (static_cast<int>(cfg.levels.size()) != dim)
                    throw std::invalid_argument("fsq quantizer: needs dim == number of levels (" +
                                                std::to_string(cfg.levels.size()) + " levels, dim " +
                                                std::to_string(dim) + ")");
                q.initialized_ = true;
                break;
            }
        }
        return q;
    }

    QuantKind kind() const { return cfg_.kind; }
    int dim() const { return dim_; }
    bool initialized() const { return initialized_; }
    bool ema_active() const { return cfg_.ema && learnable(); }

    bool learnable() const {
        return cfg_.kind == QuantKind::VQ || cfg_.kind == QuantKind::PQ ||
               cfg_.kind == QuantKind::RVQ;
    }

    int num_books() const {
        switch (cfg_.kind) {
            case QuantKind::Identity: return 0;
            case QuantKind::FSQ: return static_cast<int>(cfg_.levels.size());
            default: return static_cast<int>(cfg_.sub_sizes.size());
        }
    }

    std::vector<int> sub_sizes() const {
        if (cfg_.kind == QuantKind::FSQ) return cfg_.levels;
        return cfg_.sub_sizes;
    }

    long long composed_size() const {
        long long t = 1;
        for (int s : sub_sizes()) t *= s;
        return cfg_.kind == QuantKind::Identity ? 0 : t;
    }

    const std::vector<Codebook>& books() const { return books_; }
    std::vector<Codebook>& books() { return books_; }
    const PQConfig& pq_config() const { return pq_; }

    /// Data-dependent initialization from the first batch's encoder outputs.
    void init_from_batch(const Tensor& e, Rng& rng) {
        if (initialized_) return;
        switch (cfg_.kind) {
            case QuantKind::VQ:
            case QuantKind::PQ: {
                books_.clear();
                int off = 0;
                for (std::size_t b = 0; b < pq_.sub_sizes.size(); ++b) {
                    books_.push_back(seed_book(e, off, pq_.sub_dims[b], pq_.sub_sizes[b], rng));
                    off += pq_.sub_dims[b];
                }
                break;
            }
            case QuantKind::RVQ: {
                // Stage books are seeded from the residual stream each stage
                // actually sees at initialization time.
                books_.clear();
                Tensor residual = Tensor::from(e.data(), e.shape());
                for (int s : cfg_.sub_sizes) {
                    Codebook b = seed_book(residual, 0, dim_, s, rng);
                    auto& rv = residual.data();
                    for (int f = 0; f < residual.rows(); ++f) {
                        const int idx = nearest_codeword(
                            std::span<const double>(rv.data() + static_cast<std::size_t>(f) * dim_, dim_), b);
                        const double* c = b.row(idx);
                        for (int j = 0; j < dim_; ++j)
                            rv[static_cast<std::size_t>(f) * dim_ + j] -= c[j];
                    }
                    books_.push_back(std::move(b));
                }
                break;
            }
            default:
                break;
        }
        if (!cfg_.ema) {
            book_params_.clear();
            for (const Codebook& b : books_)
                book_params_.push_back(Tensor::from(b.codewords, {b.n, b.dim}, true));
        }
        initialized_ = true;
    }

    /// Value-level quantization of a [T, dim] sequence.
    QuantizeResult quantize(const Tensor& e) const {
        switch (cfg_.kind) {
            case QuantKind::Identity: {
                QuantizeResult r;
                r.frames = e.rows();
                r.num_books = 0;
                r.quantized = Tensor::from(e.data(), e.shape());
                return r;
            }
            case QuantKind::VQ:
            case QuantKind::PQ:
                return pq_quantize(e, current_books(), pq_);
            case QuantKind::RVQ:
                return rvq_quantize(e, current_books());
            case QuantKind::FSQ:
                return fsq_quantize(e, cfg_.levels);
        }
        throw std::logic_error("quantize: unreachable");
    }

    /// Quantized sequence as a graph tensor. Under EMA the codewords are a
    /// leaf (no gradient path); in gradient mode the selected rows are
    /// gathered from the learnable book tensors so the beta loss term can
    /// update them.
    Tensor quantized_graph(const Tensor& e, const QuantizeResult& r) const {
        if (cfg_.ema || !learnable() || book_params_.empty()) return r.quantized;
        const int t = r.frames;
        std::vector<Tensor> parts;
        if (cfg_.kind == QuantKind::RVQ) {
            Tensor acc;
            for (int b = 0; b < r.num_books; ++b) {
                std::vector<int> idx(t);
                for (int f = 0; f < t; ++f) idx[f] = r.sub_index(f, b);
                Tensor g = gather_rows(book_params_[b], idx);
                acc = b == 0 ? g : add(acc, g);
            }
            return acc;
        }
        for (int b = 0; b < r.num_books; ++b) {
            std::vector<int> idx(t);
            for (int f = 0; f < t; ++f) idx[f] = r.sub_index(f, b);
            parts.push_back(gather_rows(book_params_[b], idx));
        }
        return parts.size() == 1 ? parts[0] : concat_cols(parts);
    }

    /// EMA recurrence over this batch's assignments. `mask` (optional)
    /// excludes padded frames. `step_rng` only feeds the dead-restart policy.
    void ema_update_batch(const Tensor& e, const QuantizeResult& r,
                          const std::vector<std::uint8_t>* mask = nullptr,
                          Rng* step_rng = nullptr) {
        if (!ema_active()) return;
        const int t = r.frames;
        std::vector<int> keep;
        keep.reserve(t);
        for (int f = 0; f < t; ++f)
            if (!mask || (*mask)[f]) keep.push_back(f);

        if (cfg_.kind == QuantKind::RVQ) {
            for (std::size_t b = 0; b < books_.size(); ++b) {
                std::vector<int> idx(keep.size());
                std::vector<double> vecs(keep.size() * static_cast<std::size_t>(dim_));
                for (std::size_t k = 0; k < keep.size(); ++k) {
                    idx[k] = r.sub_index(keep[k], static_cast<int>(b));
                    const double* src =
                        r.stage_inputs[b].data() + static_cast<std::size_t>(keep[k]) * dim_;
                    std::copy(src, src + dim_, vecs.data() + k * static_cast<std::size_t>(dim_));
                }
                ema_update(books_[b], idx, vecs);
            }
        } else {
            int off = 0;
            for (std::size_t b = 0; b < books_.size(); ++b) {
                const int w = books_[b].dim;
                std::vector<int> idx(keep.size());
                std::vector<double> vecs(keep.size() * static_cast<std::size_t>(w));
                for (std::size_t k = 0; k < keep.size(); ++k) {
                    idx[k] = r.sub_index(keep[k], static_cast<int>(b));
                    const double* src =
                        e.data().data() + static_cast<std::size_t>(keep[k]) * dim_ + off;
                    std::copy(src, src + w, vecs.data() + k * static_cast<std::size_t>(w));
                }
                ema_update(books_[b], idx, vecs);
                off += w;
            }
        }
        // Restart policy reads chunk layouts, so it only applies to VQ/PQ.
        if (cfg_.dead_restart && cfg_.kind != QuantKind::RVQ && step_rng && !keep.empty())
            restart_dead(e, keep, *step_rng);
    }

    /// Gradient-mode book tensors (empty under EMA).
    const std::vector<Tensor>& book_params() const { return book_params_; }

    /// Sync Codebook mirrors from gradient-mode tensors (after optimizer steps).
    void sync_books_from_params() {
        for (std::size_t b = 0; b < book_params_.size(); ++b) {
            books_[b].codewords = book_params_[b].data();
            books_[b].ema_sum = books_[b].codewords;
            std::fill(books_[b].ema_count.begin(), books_[b].ema_count.end(), 1.0);
        }
    }

    const QuantizerConfig& config() const { return cfg_; }

    void set_books(std::vector<Codebook> books) {
        books_ = std::move(books);
        if (!cfg_.ema && learnable()) {
            book_params_.clear();
            for (const Codebook& b : books_)
                book_params_.push_back(Tensor::from(b.codewords, {b.n, b.dim}, true));
        }
        initialized_ = true;
    }

private:
    std::span<const Codebook> current_books() const {
        if (!initialized_) throw std::logic_error("quantizer: books not initialized");
        if (!cfg_.ema && !book_params_.empty()) {
            // Gradient mode: the tensors hold the live codewords.
            mirror_.resize(book_params_.size());
            for (std::size_t b = 0; b < book_params_.size(); ++b) {
                if (mirror_[b].n != book_params_[b].rows() ||
                    mirror_[b].dim != book_params_[b].cols())
                    mirror_[b] = Codebook(book_params_[b].rows(), book_params_[b].cols(),
                                          cfg_.ema_decay);
                mirror_[b].codewords = book_params_[b].data();
            }
            return mirror_;
        }
        return books_;
    }

    /// k-means++ seeding: first center uniform, later centers drawn with
    /// probability proportional to squared distance from chosen centers.
    /// With fewer frames than codewords the remainder are jittered copies.
    Codebook seed_book(const Tensor& e, int col_off, int width, int n, Rng& rng) const {
        const int t = e.rows();
        if (t < 1) throw std::invalid_argument("quantizer init: empty batch");
        auto frame = [&](int f) {
            return e.data().data() + static_cast<std::size_t>(f) * e.cols() + col_off;
        };
        std::vector<std::vector<double>> rows;
        rows.reserve(n);
        const int distinct = std::min(n, t);
        std::vector<double> d2(t, std::numeric_limits<double>::infinity());
        int first = static_cast<int>(rng.below(static_cast<std::uint64_t>(t)));
        rows.emplace_back(frame(first), frame(first) + width);
        for (int k = 1; k < distinct; ++k) {
            double total = 0.0;
            for (int f = 0; f < t; ++f) {
                const double* x = frame(f);
                const std::vector<double>& c = rows.back();
                double d = 0.0;
                for (int j = 0; j < width; ++j) {
                    const double u = x[j] - c[j];
                    d += u * u;
                }
                d2[f] = std::min(d2[f], d);
                total += d2[f];
            }
            int pick = 0;
            if (total > 0.0) {
                double target = rng.uniform() * total, acc = 0.0;
                for (int f = 0; f < t; ++f) {
                    acc += d2[f];
                    if (acc >= target) {
                        pick = f;
                        break;
                    }
                }
            } else {
                pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(t)));
            }
            rows.emplace_back(frame(pick), frame(pick) + width);
        }
        if (static_cast<int>(rows.size()) < n) {
            // Jitter scale follows the batch spread per dimension.
            std::vector<double> sd(width, 0.0), mu(width, 0.0);
            for (int f = 0; f < t; ++f)
                for (int j = 0; j < width; ++j) mu[j] += frame(f)[j];
            for (int j = 0; j < width; ++j) mu[j] /= t;
            for (int f = 0; f < t; ++f)
                for (int j = 0; j < width; ++j) {
                    const double u = frame(f)[j] - mu[j];
                    sd[j] += u * u;
                }
            for (int j = 0; j < width; ++j) sd[j] = std::sqrt(sd[j] / std::max(1, t - 1));
            int src = 0;
            while (static_cast<int>(rows.size()) < n) {
                std::vector<double> row = rows[src % distinct];
                for (int j = 0; j < width; ++j) row[j] += 0.01 * sd[j] * rng.normal();
                rows.push_back(std::move(row));
                ++src;
            }
        }
        return Codebook::from_rows(rows, cfg_.ema_decay);
    }

    /// Random-restart replacement for dying codewords (optional, off by
    /// default). A codeword whose smoothed count has decayed below the
    /// threshold is reseeded onto a random batch frame.
    void restart_dead(const Tensor& e, const std::vector<int>& keep, Rng& rng) {
        constexpr double kDeadCount = 1e-2;
        int off = 0;
        for (Codebook& b : books_) {
            for (int i = 0; i < b.n; ++i) {
                if (b.ema_count[i] >= kDeadCount) continue;
                const int f = keep[static_cast<std::size_t>(rng.below(keep.size()))];
                const double* src = e.data().data() + static_cast<std::size_t>(f) * dim_ + off;
                double* c = b.codewords.data() + static_cast<std::size_t>(i) * b.dim;
                double* s = b.ema_sum.data() + static_cast<std::size_t>(i) * b.dim;
                for (int j = 0; j < b.dim; ++j) {
                    c[j] = src[j];
                    s[j] = src[j];
                }
                b.ema_count[i] = 1.0;
            }
            off += b.dim;
        }
    }

    QuantizerConfig cfg_;
    PQConfig pq_;
    int dim_ = 0;
    bool initialized_ = false;
    std::vector<Codebook> books_;
    std::vector<Tensor> book_params_;     // gradient mode only
    mutable std::vector<Codebook> mirror_;  // gradient-mode lookup view
};

}  // namespace pqvae
