#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pqvae/rng.hpp"
#include "pqvae/tensor.hpp"

namespace pqvae {

/// Count floor when forming codewords from EMA state: prevents division
/// blow-up for dying codewords whose smoothed counts decay toward zero.
inline constexpr double kEmaCountFloor = 1e-5;

/// Default cap on materializing a composed codebook (rows).
inline constexpr long long kComposeCap = 1LL << 20;

// ---------------------------------------------------------------------------
// Codebook
// ---------------------------------------------------------------------------

/// N x dim codeword matrix plus the exponential-moving-average accumulator
/// state used to track assigned-embedding means without gradient descent.
struct Codebook {
    int n = 0;
    int dim = 0;
    std::vector<double> codewords;  // n * dim, row-major
    std::vector<double> ema_count;  // n
    std::vector<double> ema_sum;    // n * dim
    double decay = 0.999;

    Codebook() = default;

    Codebook(int n_, int dim_, double decay_ = 0.999)
        : n(n_),
          dim(dim_),
          codewords(static_cast<std::size_t>(n_) * dim_, 0.0),
          ema_count(n_, 1.0),
          ema_sum(static_cast<std::size_t>(n_) * dim_, 0.0),
          decay(decay_) {
        if (n_ < 2 || dim_ < 1) throw std::invalid_argument("Codebook: need n >= 2, dim >= 1");
    }

    /// Build from explicit rows; EMA state is seeded so the codeword
    /// invariant codewords[i] == ema_sum[i] / max(ema_count[i], floor) holds.
    static Codebook from_rows(const std::vector<std::vector<double>>& rows,
                              double decay = 0.999) {
        if (rows.size() < 2) throw std::invalid_argument("Codebook::from_rows: need >= 2 rows");
        Codebook b(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()), decay);
        for (int i = 0; i < b.n; ++i) {
            if (static_cast<int>(rows[i].size()) != b.dim)
                throw std::invalid_argument("Codebook::from_rows: ragged rows");
            for (int j = 0; j < b.dim; ++j) {
                b.codewords[static_cast<std::size_t>(i) * b.dim + j] = rows[i][j];
                b.ema_sum[static_cast<std::size_t>(i) * b.dim + j] = rows[i][j];
            }
        }
        return b;
    }

    const double* row(int i) const { return codewords.data() + static_cast<std::size_t>(i) * dim; }
};

// ---------------------------------------------------------------------------
// Nearest-codeword lookup (Eq. 1)
// ---------------------------------------------------------------------------

/// Index of the closest codeword under squared Euclidean distance.
/// Ties break to the lowest index so logs are reproducible.
inline int nearest_codeword(std::span<const double> e, const Codebook& book) {
    if (static_cast<int>(e.size()) != book.dim)
        throw std::invalid_argument("vq_lookup: embedding dim " + std::to_string(e.size()) +
                                    " != codebook dim " + std::to_string(book.dim));
    for (double v : e)
        if (!std::isfinite(v)) throw std::invalid_argument("vq_lookup: non-finite embedding");
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    const double* cw = book.codewords.data();
    for (int i = 0; i < book.n; ++i) {
        const double* c = cw + static_cast<std::size_t>(i) * book.dim;
        double d = 0.0;
        for (int j = 0; j < book.dim; ++j) {
            const double t = e[j] - c[j];
            d += t * t;
        }
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

struct VqLookup {
    int index;
    std::vector<double> z;
};

inline VqLookup vq_lookup(std::span<const double> e, const Codebook& book) {
    const int i = nearest_codeword(e, book);
    return {i, std::vector<double>(book.row(i), book.row(i) + book.dim)};
}

// ---------------------------------------------------------------------------
// EMA codebook update
// ---------------------------------------------------------------------------

/// Smoothed cluster-size / cluster-sum recurrence:
///   count[i] <- g*count[i] + (1-g)*n_i,  sum[i] <- g*sum[i] + (1-g)*s_i,
///   codeword[i] <- sum[i] / max(count[i], floor)
/// where n_i, s_i are this batch's assignment count and vector sum.
/// Codewords with no assignments keep their running mean (counts decay).
inline void ema_update(Codebook& book, std::span<const int> indices,
                       std::span<const double> vectors) {
    if (indices.size() * static_cast<std::size_t>(book.dim) != vectors.size())
        throw std::invalid_argument("ema_update: indices/vectors length mismatch");
    std::vector<double> batch_count(book.n, 0.0);
    std::vector<double> batch_sum(static_cast<std::size_t>(book.n) * book.dim, 0.0);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const int i = indices[k];
        if (i < 0 || i >= book.n)
            throw std::out_of_range("ema_update: index " + std::to_string(i) + " out of [0," +
                                    std::to_string(book.n) + ")");
        batch_count[i] += 1.0;
        const double* v = vectors.data() + k * book.dim;
        double* s = batch_sum.data() + static_cast<std::size_t>(i) * book.dim;
        for (int j = 0; j < book.dim; ++j) {
            if (!std::isfinite(v[j])) throw std::invalid_argument("ema_update: non-finite vector");
            s[j] += v[j];
        }
    }
    const double g = book.decay;
    for (int i = 0; i < book.n; ++i) {
        book.ema_count[i] = g * book.ema_count[i] + (1.0 - g) * batch_count[i];
        double* s = book.ema_sum.data() + static_cast<std::size_t>(i) * book.dim;
        const double* bs = batch_sum.data() + static_cast<std::size_t>(i) * book.dim;
        double* c = book.codewords.data() + static_cast<std::size_t>(i) * book.dim;
        const double denom = std::max(book.ema_count[i], kEmaCountFloor);
        for (int j = 0; j < book.dim; ++j) {
            s[j] = g * s[j] + (1.0 - g) * bs[j];
            c[j] = s[j] / denom;
        }
    }
}

// ---------------------------------------------------------------------------
// Composed-index arithmetic (Eq. 3)
// ---------------------------------------------------------------------------

/// i* = i_0 + sum_{j>=1} (prod_{k<j} N_k) * i_j. The first sub-index is the
/// least significant mixed-radix digit.
inline long long compose_index(std::span<const int> sub_indices, std::span<const int> sub_sizes) {
    if (sub_indices.size() != sub_sizes.size() || sub_indices.empty())
        throw std::invalid_argument("compose_index: index/size tuple mismatch");
    long long value = 0;
    long long weight = 1;
    for (std::size_t j = 0; j < sub_indices.size(); ++j) {
        if (sub_indices[j] < 0 || sub_indices[j] >= sub_sizes[j])
            throw std::out_of_range("compose_index: sub-index " + std::to_string(sub_indices[j]) +
                                    " out of [0," + std::to_string(sub_sizes[j]) + ")");
        value += weight * sub_indices[j];
        weight *= sub_sizes[j];
    }
    return value;
}

/// Exact inverse of compose_index.
inline std::vector<int> decompose_index(long long composed, std::span<const int> sub_sizes) {
    long long total = 1;
    for (int s : sub_sizes) total *= s;
    if (composed < 0 || composed >= total)
        throw std::out_of_range("decompose_index: value " + std::to_string(composed) +
                                " out of [0," + std::to_string(total) + ")");
    std::vector<int> out(sub_sizes.size());
    for (std::size_t j = 0; j < sub_sizes.size(); ++j) {
        out[j] = static_cast<int>(composed % sub_sizes[j]);
        composed /= sub_sizes[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// PQ configuration
// ---------------------------------------------------------------------------

struct PQConfig {
    std::vector<int> sub_sizes;            // codewords per sub-book
    std::vector<int> sub_dims;             // per-subspace widths, sum = embedding dim
    std::optional<int> bottleneck_dim;     // per-subspace projection width

    long long total_size() const {
        long long t = 1;
        for (int s : sub_sizes) t *= s;
        return t;
    }

    int dim() const {
        int d = 0;
        for (int s : sub_dims) d += s;
        return d;
    }

    void validate() const {
        if (sub_sizes.empty()) throw std::invalid_argument("PQConfig: need M >= 1 sub-books");
        for (int s : sub_sizes)
            if (s < 2) throw std::invalid_argument("PQConfig: every sub-size must be >= 2");
        if (sub_dims.size() != sub_sizes.size())
            throw std::invalid_argument("PQConfig: sub_dims/sub_sizes length mismatch");
        for (int d : sub_dims)
            if (d < 1) throw std::invalid_argument("PQConfig: every sub-dim must be >= 1");
    }

    /// Near-equal split of `dim` across `m` subspaces; earlier subspaces
    /// absorb the remainder.
    static std::vector<int> near_equal_split(int dim, int m) {
        if (m < 1 || dim < m) throw std::invalid_argument("near_equal_split: need dim >= m >= 1");
        std::vector<int> out(m, dim / m);
        for (int i = 0; i < dim % m; ++i) out[i] += 1;
        return out;
    }
};

// ---------------------------------------------------------------------------
// Quantization results
// ---------------------------------------------------------------------------

/// Per-frame sub-indices, composed indices, the quantized sequence, and the
/// two quantization loss terms (mean-squared, matching the training loss).
struct QuantizeResult {
    int frames = 0;
    int num_books = 0;
    std::vector<int> sub_indices;       // frames * num_books, row-major
    std::vector<long long> composed;    // frames
    Tensor quantized;                   // [frames, dim] leaf values
    double commit_term = 0.0;           // ||E - sg(Z)||^2 (mean-squared)
    double codebook_term = 0.0;         // ||sg(E) - Z||^2 (mean-squared)

    // RVQ keeps each stage's input (the residual it quantized) so EMA
    // updates can be driven from the same pass.
    std::vector<std::vector<double>> stage_inputs;

    int sub_index(int frame, int book) const { return sub_indices[static_cast<std::size_t>(frame) * num_books + book]; }
};

namespace detail {

inline void check_2d(const Tensor& e, const char* op) {
    if (!e.defined() || e.shape().size() != 2)
        throw std::invalid_argument(std::string(op) + ": expects a [T,d] tensor");
}

inline void fill_terms(const Tensor& e, QuantizeResult& r) {
    double acc = 0.0;
    const auto& ev = e.data();
    const auto& zv = r.quantized.data();
    for (std::size_t i = 0; i < ev.size(); ++i) {
        const double t = ev[i] - zv[i];
        acc += t * t;
    }
    const double ms = ev.empty() ? 0.0 : acc / static_cast<double>(ev.size());
    r.commit_term = ms;
    r.codebook_term = ms;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Product quantization
// ---------------------------------------------------------------------------

/// Chunk-wise nearest-codeword search; quantized frames are concatenations
/// of the selected sub-codewords and composed indices follow Eq.-style
/// mixed-radix composition.
inline QuantizeResult pq_quantize(const Tensor& e, std::span<const Codebook> books,
                                  const PQConfig& cfg) {
    detail::check_2d(e, "pq_quantize");
    cfg.validate();
    if (books.size() != cfg.sub_sizes.size())
        throw std::invalid_argument("pq_quantize: book count != config");
    for (std::size_t m = 0; m < books.size(); ++m)
        if (books[m].n != cfg.sub_sizes[m] || books[m].dim != cfg.sub_dims[m])
            throw std::invalid_argument("pq_quantize: book " + std::to_string(m) +
                                        " does not match config");
    const int t = e.rows(), d = e.cols();
    if (d != cfg.dim())
        throw std::invalid_argument("pq_quantize: embedding dim " + std::to_string(d) +
                                    " != sum of sub_dims " + std::to_string(cfg.dim()));
    const int m = static_cast<int>(books.size());
    QuantizeResult r;
    r.frames = t;
    r.num_books = m;
    r.sub_indices.resize(static_cast<std::size_t>(t) * m);
    r.composed.resize(t);
    std::vector<double> z(static_cast<std::size_t>(t) * d);
    for (int f = 0; f < t; ++f) {
        const double* row = e.data().data() + static_cast<std::size_t>(f) * d;
        int off = 0;
        for (int b = 0; b < m; ++b) {
            const int w = cfg.sub_dims[b];
            const int idx = nearest_codeword(std::span<const double>(row + off, w), books[b]);
            r.sub_indices[static_cast<std::size_t>(f) * m + b] = idx;
            const double* c = books[b].row(idx);
            std::copy(c, c + w, z.data() + static_cast<std::size_t>(f) * d + off);
            off += w;
        }
        r.composed[f] = compose_index(
            std::span<const int>(r.sub_indices.data() + static_cast<std::size_t>(f) * m, m),
            cfg.sub_sizes);
    }
    r.quantized = Tensor::from(std::move(z), {t, d});
    detail::fill_terms(e, r);
    return r;
}

/// Materialize the composed codebook C*: row i* is the concatenation of the
/// sub-codewords selected by decompose_index(i*).
inline Codebook compose_codebook(std::span<const Codebook> books,
                                 long long cap = kComposeCap) {
    if (books.empty()) throw std::invalid_argument("compose_codebook: no books");
    long long total = 1;
    int dim = 0;
    std::vector<int> sizes;
    for (const Codebook& b : books) {
        total *= b.n;
        dim += b.dim;
        sizes.push_back(b.n);
    }
    if (total > cap)
        throw std::length_error("compose_codebook: " + std::to_string(total) +
                                " rows exceeds cap " + std::to_string(cap));
    Codebook out(static_cast<int>(total), dim, books[0].decay);
    for (long long i = 0; i < total; ++i) {
        const std::vector<int> digits = decompose_index(i, sizes);
        double* row = out.codewords.data() + static_cast<std::size_t>(i) * dim;
        int off = 0;
        for (std::size_t b = 0; b < books.size(); ++b) {
            const double* c = books[b].row(digits[b]);
            std::copy(c, c + books[b].dim, row + off);
            off += books[b].dim;
        }
    }
    out.ema_sum = out.codewords;
    return out;
}

// ---------------------------------------------------------------------------
// Residual vector quantization
// ---------------------------------------------------------------------------

/// Stage 0 quantizes E, each later stage quantizes the residual left by the
/// stages before it; the quantized frame is the running sum of selected
/// stage codewords.
inline QuantizeResult rvq_quantize(const Tensor& e, std::span<const Codebook> books) {
    detail::check_2d(e, "rvq_quantize");
    if (books.empty()) throw std::invalid_argument("rvq_quantize: no books");
    const int t = e.rows(), d = e.cols();
    for (const Codebook& b : books)
        if (b.dim != d)
            throw std::invalid_argument("rvq_quantize: all stage books must have dim " +
                                        std::to_string(d));
    const int m = static_cast<int>(books.size());
    std::vector<int> sizes(m);
    for (int b = 0; b < m; ++b) sizes[b] = books[b].n;

    QuantizeResult r;
    r.frames = t;
    r.num_books = m;
    r.sub_indices.resize(static_cast<std::size_t>(t) * m);
    r.composed.resize(t);
    r.stage_inputs.assign(m, std::vector<double>(static_cast<std::size_t>(t) * d));
    std::vector<double> z(static_cast<std::size_t>(t) * d, 0.0);
    std::vector<double> residual(d);
    for (int f = 0; f < t; ++f) {
        const double* row = e.data().data() + static_cast<std::size_t>(f) * d;
        std::copy(row, row + d, residual.begin());
        double* zf = z.data() + static_cast<std::size_t>(f) * d;
        for (int b = 0; b < m; ++b) {
            std::copy(residual.begin(), residual.end(),
                      r.stage_inputs[b].begin() + static_cast<std::size_t>(f) * d);
            const int idx = nearest_codeword(residual, books[b]);
            r.sub_indices[static_cast<std::size_t>(f) * m + b] = idx;
            const double* c = books[b].row(idx);
            for (int j = 0; j < d; ++j) {
                zf[j] += c[j];
                residual[j] -= c[j];
            }
        }
        r.composed[f] = compose_index(
            std::span<const int>(r.sub_indices.data() + static_cast<std::size_t>(f) * m, m),
            sizes);
    }
    r.quantized = Tensor::from(std::move(z), {t, d});
    detail::fill_terms(e, r);
    return r;
}

// ---------------------------------------------------------------------------
// Finite scalar quantization
// ---------------------------------------------------------------------------

/// Fixed per-dimension level grids on tanh-bounded scalars: a PQ with
/// non-learnable 1-dim codebooks. Grid values are uniform on [-1, 1].
inline QuantizeResult fsq_quantize(const Tensor& e, std::span<const int> levels) {
    detail::check_2d(e, "fsq_quantize");
    if (levels.empty()) throw std::invalid_argument("fsq_quantize: no levels");
    for (int l : levels)
        if (l < 2) throw std::invalid_argument("fsq_quantize: every level count must be >= 2");
    const int t = e.rows(), d = e.cols();
    const int m = static_cast<int>(levels.size());
    if (d != m)
        throw std::invalid_argument("fsq_quantize: embedding dim " + std::to_string(d) +
                                    " != number of level specs " + std::to_string(m));
    QuantizeResult r;
    r.frames = t;
    r.num_books = m;
    r.sub_indices.resize(static_cast<std::size_t>(t) * m);
    r.composed.resize(t);
    std::vector<double> z(static_cast<std::size_t>(t) * d);
    std::vector<int> sizes(levels.begin(), levels.end());
    for (int f = 0; f < t; ++f) {
        for (int j = 0; j < m; ++j) {
            const double ev = e.data()[static_cast<std::size_t>(f) * d + j];
            if (!std::isfinite(ev)) throw std::invalid_argument("fsq_quantize: non-finite input");
            const double v = std::tanh(ev);
            const int span = levels[j] - 1;
            int idx = static_cast<int>(std::lround((v + 1.0) / 2.0 * span));
            idx = std::clamp(idx, 0, span);
            r.sub_indices[static_cast<std::size_t>(f) * m + j] = idx;
            z[static_cast<std::size_t>(f) * d + j] = 2.0 * idx / span - 1.0;
        }
        r.composed[f] = compose_index(
            std::span<const int>(r.sub_indices.data() + static_cast<std::size_t>(f) * m, m),
            sizes);
    }
    r.quantized = Tensor::from(std::move(z), {t, d});
    detail::fill_terms(e, r);
    return r;
}

/// The fixed FSQ grid for one dimension.
inline std::vector<double> fsq_grid(int levels) {
    std::vector<double> g(levels);
    for (int i = 0; i < levels; ++i) g[i] = 2.0 * i / (levels - 1) - 1.0;
    return g;
}

// ---------------------------------------------------------------------------
// Codebook quality metrics
// ---------------------------------------------------------------------------

/// |C|_u: number of distinct codewords observed on an index stream.
inline long long codebook_usage(std::span<const long long> stream, long long n) {
    std::unordered_set<long long> seen;
    for (long long i : stream) {
        if (i < 0 || i >= n)
            throw std::out_of_range("codebook_usage: index " + std::to_string(i) + " out of [0," +
                                    std::to_string(n) + ")");
        seen.insert(i);
    }
    return static_cast<long long>(seen.size());
}

/// |C|_p = 2^H(p) of the empirical codeword distribution, with 0*log0 := 0.
inline double codebook_perplexity(std::span<const long long> stream, long long n) {
    if (stream.empty()) throw std::invalid_argument("codebook_perplexity: empty stream");
    std::vector<long long> counts;
    std::unordered_set<long long> check;
    // Dense counting for small N, hashed otherwise.
    double entropy = 0.0;
    const double total = static_cast<double>(stream.size());
    if (n <= (1LL << 22)) {
        counts.assign(static_cast<std::size_t>(n), 0);
        for (long long i : stream) {
            if (i < 0 || i >= n)
                throw std::out_of_range("codebook_perplexity: index out of range");
            counts[static_cast<std::size_t>(i)] += 1;
        }
        for (long long c : counts) {
            if (c == 0) continue;
            const double p = static_cast<double>(c) / total;
            entropy -= p * std::log2(p);
        }
    } else {
        std::unordered_map<long long, long long> hist;
        for (long long i : stream) {
            if (i < 0 || i >= n)
                throw std::out_of_range("codebook_perplexity: index out of range");
            hist[i] += 1;
        }
        std::vector<std::pair<long long, long long>> items(hist.begin(), hist.end());
        std::sort(items.begin(), items.end());
        for (const auto& [idx, c] : items) {
            const double p = static_cast<double>(c) / total;
            entropy -= p * std::log2(p);
        }
    }
    return std::exp2(entropy);
}

inline long long codebook_usage(std::span<const int> stream, long long n) {
    std::vector<long long> s(stream.begin(), stream.end());
    return codebook_usage(std::span<const long long>(s), n);
}

inline double codebook_perplexity(std::span<const int> stream, long long n) {
    std::vector<long long> s(stream.begin(), stream.end());
    return codebook_perplexity(std::span<const long long>(s), n);
}

/// Usage, perplexity and RMSE for one evaluation pass. Sub-book entries are
/// present for multi-codebook quantizers. eval_frames is the size of the
/// stream the metrics were computed on.
struct MetricsReport {
    long long usage = 0;
    double perplexity = 1.0;
    double rmse = 0.0;
    std::vector<long long> per_subbook_usage;
    std::vector<double> per_subbook_perplexity;
    long long eval_frames = 0;
    bool has_indices = true;
};

}  // namespace pqvae
