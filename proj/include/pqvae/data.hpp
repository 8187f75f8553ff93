#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pqvae/rng.hpp"
#include "pqvae/tensor.hpp"

namespace pqvae {

// ---------------------------------------------------------------------------
// Binary feature files: magic "PQVF", version u32, dim u32, frames u32,
// then frames*dim float32 little-endian row-major.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFeatureVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("read error: truncated " + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, const std::vector<double>& v) {
    std::vector<float> f(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) f[i] = static_cast<float>(v[i]);
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(f.data()),
             static_cast<std::streamsize>(f.size() * 4));
}

inline std::vector<double> get_f32(std::istream& is, std::size_t count, const std::string& what) {
    std::vector<float> f(count);
    if (count &&
        !is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(count * 4)))
        throw std::runtime_error("read error: payload size mismatch in " + what);
    return std::vector<double>(f.begin(), f.end());
}

}  // namespace detail

/// Write a [frames, dim] sequence; values are stored as float32.
inline void write_features(const std::filesystem::path& path, const Tensor& frames) {
    if (frames.shape().size() != 2)
        throw std::invalid_argument("write_features: expects a [frames, dim] tensor");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_features: cannot open " + path.string());
    os.write("PQVF", 4);
    detail::put_u32(os, kFeatureVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(frames.cols()));
    detail::put_u32(os, static_cast<std::uint32_t>(frames.rows()));
    detail::put_f32(os, frames.data());
    if (!os) throw std::runtime_error("write_features: write failed for " + path.string());
}

/// Exact float32 round-trip; rejects wrong magic, version and truncation.
inline Tensor read_features(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw std::runtime_error("read_features: cannot open " + path.string());
    const auto file_size = static_cast<std::uint64_t>(is.tellg());
    is.seekg(0);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "PQVF", 4) != 0)
        throw std::runtime_error("read_features: bad magic in " + path.string());
    const std::uint32_t version = detail::get_u32(is, path.string());
    if (version != kFeatureVersion)
        throw std::runtime_error("read_features: unsupported version " + std::to_string(version));
    const std::uint32_t dim = detail::get_u32(is, path.string());
    const std::uint32_t frames = detail::get_u32(is, path.string());
    const std::uint64_t want = 16ULL + 4ULL * dim * frames;
    if (file_size != want)
        throw std::runtime_error("read_features: size mismatch in " + path.string() + " (have " +
                                 std::to_string(file_size) + " bytes, header implies " +
                                 std::to_string(want) + ")");
    std::vector<double> v =
        detail::get_f32(is, static_cast<std::size_t>(dim) * frames, path.string());
    return Tensor::from(std::move(v), {static_cast<int>(frames), static_cast<int>(dim)});
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "PQCK", version u32, count u32, then per entry
// (name length u32, name bytes, rank u32, dims u32 each, float32 payload).
// ---------------------------------------------------------------------------

/// Ordered name -> tensor map used for model params, codebooks, EMA state,
/// optimizer state and the step counter.
using NamedTensors = std::map<std::string, Tensor>;

inline void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_checkpoint: cannot open " + path.string());
    os.write("PQCK", 4);
    detail::put_u32(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
        for (int d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
        detail::put_f32(os, t.data());
    }
    if (!os) throw std::runtime_error("write_checkpoint: write failed for " + path.string());
}

inline NamedTensors read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_checkpoint: cannot open " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "PQCK", 4) != 0)
        throw std::runtime_error("read_checkpoint: bad magic in " + path.string());
    const std::uint32_t version = detail::get_u32(is, path.string());
    if (version != 1)
        throw std::runtime_error("read_checkpoint: unsupported version " +
                                 std::to_string(version));
    const std::uint32_t count = detail::get_u32(is, path.string());
    NamedTensors out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(is, path.string());
        std::string name(name_len, '\0');
        if (name_len && !is.read(name.data(), name_len))
            throw std::runtime_error("read_checkpoint: truncated name in " + path.string());
        const std::uint32_t rank = detail::get_u32(is, path.string());
        std::vector<int> shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            shape[r] = static_cast<int>(detail::get_u32(is, path.string()));
            numel *= static_cast<std::size_t>(shape[r]);
        }
        std::vector<double> data = detail::get_f32(is, numel, path.string());
        out.emplace(std::move(name), Tensor::from(std::move(data), std::move(shape)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Corpus manifest: one `<relative-path>\t<train|eval>\t<frames>` line per
// sequence, resolved against the manifest's directory.
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string rel_path;
    bool is_eval = false;
    long long frames = 0;
};

struct Manifest {
    std::filesystem::path dir;
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> split(bool eval) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (e.is_eval == eval) out.push_back(e);
        return out;
    }

    std::filesystem::path resolve(const ManifestEntry& e) const { return dir / e.rel_path; }
};

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_manifest: cannot open " + path.string());
    for (const auto& e : m.entries)
        os << e.rel_path << '\t' << (e.is_eval ? "eval" : "train") << '\t' << e.frames << '\n';
    if (!os) throw std::runtime_error("write_manifest: write failed for " + path.string());
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_manifest: cannot open " + path.string());
    Manifest m;
    m.dir = path.parent_path();
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestEntry e;
        std::string split;
        if (!std::getline(ss, e.rel_path, '\t') || !std::getline(ss, split, '\t') ||
            !(ss >> e.frames))
            throw std::runtime_error("read_manifest: malformed line " + std::to_string(line_no) +
                                     " in " + path.string());
        if (split != "train" && split != "eval")
            throw std::runtime_error("read_manifest: bad split '" + split + "' on line " +
                                     std::to_string(line_no));
        e.is_eval = split == "eval";
        m.entries.push_back(std::move(e));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Synthetic structured-sequence corpus
// ---------------------------------------------------------------------------

/// First-order Markov chain over latent states with geometric dwell times;
/// each state emits a fixed smooth spectral envelope plus Gaussian noise.
/// A mel-spectrogram stand-in with tunable difficulty.
struct SynthConfig {
    int n_states = 64;
    int feature_dim = 32;
    double frames_per_state = 10.0;   // mean dwell length
    int n_sequences = 256;
    int seq_len_min = 256;
    int seq_len_max = 512;
    double noise_std = 0.25;
    std::uint64_t seed = 1001;

    void validate() const {
        if (n_states < 2) throw std::invalid_argument("synth: n_states must be >= 2");
        if (feature_dim < 1) throw std::invalid_argument("synth: feature_dim must be >= 1");
        if (n_sequences < 1) throw std::invalid_argument("synth: n_sequences must be >= 1");
        if (seq_len_min < 1 || seq_len_max < seq_len_min)
            throw std::invalid_argument("synth: bad sequence length range");
        if (frames_per_state < 1.0)
            throw std::invalid_argument("synth: frames_per_state must be >= 1");
        if (noise_std < 0.0) throw std::invalid_argument("synth: noise_std must be >= 0");
    }
};

/// Per-state emission envelopes: white noise smoothed along the feature axis
/// (two box-filter passes) and rescaled to roughly unit amplitude. A pure
/// function of the config.
inline Tensor state_envelopes(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, 0xE57A7E5));
    const int k = std::max(1, cfg.feature_dim / 8);
    std::vector<double> env(static_cast<std::size_t>(cfg.n_states) * cfg.feature_dim);
    std::vector<double> raw(cfg.feature_dim), tmp(cfg.feature_dim);
    for (int s = 0; s < cfg.n_states; ++s) {
        for (double& v : raw) v = rng.normal();
        for (int pass = 0; pass < 2; ++pass) {
            for (int j = 0; j < cfg.feature_dim; ++j) {
                double acc = 0.0;
                int cnt = 0;
                for (int u = j - k; u <= j + k; ++u) {
                    if (u < 0 || u >= cfg.feature_dim) continue;
                    acc += raw[u];
                    ++cnt;
                }
                tmp[j] = acc / cnt;
            }
            raw = tmp;
        }
        double norm = 0.0;
        for (double v : raw) norm += v * v;
        norm = std::sqrt(norm / cfg.feature_dim);
        const double inv = norm > 0.0 ? 1.0 / norm : 1.0;
        for (int j = 0; j < cfg.feature_dim; ++j)
            env[static_cast<std::size_t>(s) * cfg.feature_dim + j] = raw[j] * inv;
    }
    return Tensor::from(std::move(env), {cfg.n_states, cfg.feature_dim});
}

/// Generate one sequence (pure function of config and sequence index).
inline Tensor synth_sequence(const SynthConfig& cfg, const Tensor& envelopes, int seq_index) {
    Rng rng(mix_seed(cfg.seed, 0x5EC5 + static_cast<std::uint64_t>(seq_index)));
    const int len =
        cfg.seq_len_min + static_cast<int>(rng.below(
                              static_cast<std::uint64_t>(cfg.seq_len_max - cfg.seq_len_min + 1)));
    const double stay = 1.0 - 1.0 / cfg.frames_per_state;
    int state = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_states)));
    std::vector<double> x(static_cast<std::size_t>(len) * cfg.feature_dim);
    for (int f = 0; f < len; ++f) {
        if (f > 0 && rng.uniform() >= stay) {
            // Jump to a uniformly random *other* state.
            const int hop =
                1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_states - 1)));
            state = (state + hop) % cfg.n_states;
        }
        const double* env = envelopes.data().data() + static_cast<std::size_t>(state) * cfg.feature_dim;
        double* row = x.data() + static_cast<std::size_t>(f) * cfg.feature_dim;
        for (int j = 0; j < cfg.feature_dim; ++j)
            row[j] = env[j] + (cfg.noise_std > 0.0 ? cfg.noise_std * rng.normal() : 0.0);
    }
    return Tensor::from(std::move(x), {len, cfg.feature_dim});
}

/// Write the corpus under out_dir and return the manifest (also written as
/// out_dir/manifest.tsv). Every 20th sequence lands in the eval split.
inline Manifest gen_synthetic_corpus(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    if (!std::filesystem::exists(out_dir)) {
        std::error_code ec;
        if (!std::filesystem::create_directory(out_dir, ec))
            throw std::runtime_error("gen_synthetic_corpus: cannot create " + out_dir.string() +
                                     " (" + ec.message() + ")");
    }
    const Tensor envelopes = state_envelopes(cfg);
    Manifest m;
    m.dir = out_dir;
    for (int i = 0; i < cfg.n_sequences; ++i) {
        const Tensor seq = synth_sequence(cfg, envelopes, i);
        char name[32];
        std::snprintf(name, sizeof(name), "seq_%05d.pqvf", i);
        write_features(out_dir / name, seq);
        ManifestEntry e;
        e.rel_path = name;
        e.is_eval = (i % 20) == 19;
        e.frames = seq.rows();
        m.entries.push_back(std::move(e));
    }
    write_manifest(out_dir / "manifest.tsv", m);
    return m;
}

// ---------------------------------------------------------------------------
// Deterministic batch iteration
// ---------------------------------------------------------------------------

/// One training batch: `x` stacks whole windows along time; frame_mask is 0
/// for right-padded frames (sequences shorter than the window are padded
/// with their last frame).
struct Batch {
    Tensor x;                             // [n_windows * window, feature_dim]
    std::vector<std::uint8_t> frame_mask; // per input frame, 1 = real
    int n_windows = 0;
    int window = 0;
};

/// Streams fixed-length windows from the train split, shuffled per epoch.
/// Iteration order is a pure function of (manifest, seed, epoch): resuming
/// at step k replays the same order as an uninterrupted run.
class BatchIterator {
public:
    BatchIterator(const Manifest& manifest, int window, int batch_frames, std::uint64_t seed)
        : manifest_(manifest),
          train_(manifest.split(false)),
          window_(window),
          per_batch_(std::max(1, batch_frames / window)),
          seed_(seed) {
        if (train_.empty()) throw std::invalid_argument("batch_iterator: manifest has no train split");
        if (window < 1) throw std::invalid_argument("batch_iterator: window must be >= 1");
    }

    /// Shuffle order of the train sequences for one epoch.
    std::vector<int> epoch_order(long long epoch) const {
        std::vector<int> order(train_.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        Rng rng(mix_seed(seed_, 0xBA7C4 + static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        return order;
    }

    Batch next() {
        std::vector<Tensor> windows;
        while (static_cast<int>(windows.size()) < per_batch_) windows.push_back(next_window());
        Batch b;
        b.n_windows = per_batch_;
        b.window = window_;
        const int dim = windows[0].cols();
        std::vector<double> x(static_cast<std::size_t>(per_batch_) * window_ * dim);
        b.frame_mask.assign(static_cast<std::size_t>(per_batch_) * window_, 1);
        for (int w = 0; w < per_batch_; ++w) {
            const Tensor& src = windows[w];
            const int real = src.rows();
            for (int f = 0; f < window_; ++f) {
                const int from = std::min(f, real - 1);
                const double* row = src.data().data() + static_cast<std::size_t>(from) * dim;
                std::copy(row, row + dim,
                          x.data() + (static_cast<std::size_t>(w) * window_ + f) * dim);
                if (f >= real) b.frame_mask[static_cast<std::size_t>(w) * window_ + f] = 0;
            }
        }
        b.x = Tensor::from(std::move(x), {per_batch_ * window_, dim});
        return b;
    }

    /// Jump to the state just after `batches` batches have been consumed.
    void skip_batches(long long batches) {
        long long windows = batches * per_batch_;
        while (windows > 0) {
            ensure_sequence();
            const long long here = remaining_windows_in_sequence();
            if (here <= windows) {
                windows -= here;
                advance_sequence();
            } else {
                window_pos_ += static_cast<int>(windows) * window_;
                windows = 0;
            }
        }
    }

    int window() const { return window_; }
    int windows_per_batch() const { return per_batch_; }

private:
    Tensor next_window() {
        ensure_sequence();
        const Tensor& seq = current_;
        const int len = seq.rows();
        const int start = window_pos_;
        const int stop = std::min(start + window_, len);
        const int dim = seq.cols();
        Tensor w = Tensor::from(
            std::vector<double>(seq.data().begin() + static_cast<std::size_t>(start) * dim,
                                seq.data().begin() + static_cast<std::size_t>(stop) * dim),
            {stop - start, dim});
        window_pos_ += window_;
        if (window_pos_ >= len) advance_sequence();
        return w;
    }

    long long remaining_windows_in_sequence() const {
        const int len = current_.rows();
        return (len - window_pos_ + window_ - 1) / window_;
    }

    void ensure_sequence() {
        if (!current_.defined()) {
            if (order_.empty() || order_pos_ >= order_.size()) {
                order_ = epoch_order(epoch_);
                order_pos_ = 0;
            }
            const ManifestEntry& e = train_[static_cast<std::size_t>(order_[order_pos_])];
            current_ = read_features(manifest_.resolve(e));
            if (current_.rows() == 0)
                throw std::runtime_error("batch_iterator: empty sequence " + e.rel_path);
            window_pos_ = 0;
        }
    }

    void advance_sequence() {
        current_ = Tensor();
        window_pos_ = 0;
        ++order_pos_;
        if (order_pos_ >= order_.size()) {
            ++epoch_;
            order_.clear();
            order_pos_ = 0;
        }
    }

    Manifest manifest_;
    std::vector<ManifestEntry> train_;
    int window_;
    int per_batch_;
    std::uint64_t seed_;

    std::vector<int> order_;
    std::size_t order_pos_ = 0;
    long long epoch_ = 0;
    Tensor current_;
    int window_pos_ = 0;
};

}  // namespace pqvae
