#pragma once

#include "kvcore/analysis.hpp"
#include "kvcore/compression.hpp"
#include "kvcore/metrics.hpp"
#include "kvcore/stream.hpp"
#include "kvcore/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

namespace kvcore {

/// Shape of the toy decoder. GQA with m_g key/value groups shared by m_h
/// query heads; m_g == m_h is MHA, m_g == 1 is MQA.
struct ModelConfig {
    std::uint32_t d_e = 64;
    std::uint32_t n_layers = 2;
    std::uint32_t m_h = 8;
    std::uint32_t m_g = 2;
    std::uint32_t d_h = 8;
    std::uint32_t vocab = 256;
    std::uint32_t d_ff = 256;
    std::uint64_t seed = 0;

    std::size_t query_width() const noexcept { return std::size_t{m_h} * d_h; }
    std::size_t kv_width() const noexcept { return std::size_t{m_g} * d_h; }
    /// Throws ArgumentError for zero sizes, m_h not divisible by m_g, or a
    /// vocabulary too large for u16 token ids.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    std::vector<double> attn_norm;  // d_e
    DenseMatrix wq;                 // d_e × m_h·d_h
    DenseMatrix wk;                 // d_e × m_g·d_h
    DenseMatrix wv;                 // d_e × m_g·d_h
    DenseMatrix wo;                 // m_h·d_h × d_e
    std::vector<double> mlp_norm;   // d_e
    DenseMatrix w_in;               // d_e × d_ff
    DenseMatrix w_out;              // d_ff × d_e

    const DenseMatrix& projection(Kind kind) const { return kind == Kind::Key ? wk : wv; }
};

/// Output head is tied to the embedding.
struct ModelWeights {
    DenseMatrix embedding;  // vocab × d_e
    std::vector<LayerWeights> layers;
    std::vector<double> final_norm;  // d_e
};

/// Seeded Gaussian init (norm gains = 1). Values are rounded to binary32 so
/// a saved and reloaded checkpoint is the same network bit for bit.
ModelWeights init_weights(const ModelConfig& cfg, double stddev = 0.02);

/// Same as init_weights but with a zero final norm gain: every logit is 0 and
/// the predictive distribution is uniform over the vocabulary, while keys and
/// values stay non-degenerate.
ModelWeights uniform_logit_weights(const ModelConfig& cfg);

/// Head i ∈ [1, m_h] → group ⌈i / (m_h/m_g)⌉ ∈ [1, m_g].
std::size_t group_map(std::size_t head, std::size_t m_h, std::size_t m_g);

/// Per-(layer, kind) replacement of the key or value projection by a
/// down/up factor pair. Missing entries run uncompressed.
using CompressedOverride = std::map<std::pair<std::uint32_t, Kind>, CompressionFactors>;

/// Activations recorded during a forward pass.
struct LayerCapture {
    DenseMatrix attn_input;  // post-norm attention input x_t (T × d_e)
    DenseMatrix keys;        // T × m_g·d_h
    DenseMatrix values;      // T × m_g·d_h
};

/// Causal forward pass without positional encoding. Returns logits (T × vocab).
DenseMatrix forward(const ModelConfig& cfg, const ModelWeights& weights, std::span<const std::uint32_t> tokens,
                    const CompressedOverride& override = {}, std::vector<LayerCapture>* capture = nullptr);

using TokenSequence = std::vector<std::uint32_t>;
using Corpus = std::vector<TokenSequence>;

/// exp of the mean next-token negative log-likelihood (natural log) over
/// every position that has a successor inside its sequence.
double perplexity(const ModelConfig& cfg, const ModelWeights& weights, const Corpus& corpus,
                  const CompressedOverride& override = {});

/// Writes layer{L}_{key|value}.kvcr for every layer; rows are x_t·W^K and
/// x_t·W^V with x_t the attention input. Returns the written paths.
std::vector<std::filesystem::path> dump_activations(const ModelConfig& cfg, const ModelWeights& weights,
                                                    const Corpus& corpus, const std::filesystem::path& out_dir);

using SpectrumSet = std::map<std::pair<std::uint32_t, Kind>, SpectralResult>;

/// Builds the override compressing every layer's keys at `key_ratio` and
/// values at `value_ratio`.
CompressedOverride uniform_override(const ModelConfig& cfg, const ModelWeights& weights, const SpectrumSet& spectra,
                                    double key_ratio, double value_ratio);

/// PPL over the cartesian product of ratios with uniform per-layer
/// compression. Grid points are evaluated on up to `threads` workers.
PplGrid ppl_grid(const ModelConfig& cfg, const ModelWeights& weights, const Corpus& corpus,
                 std::vector<double> key_ratios, std::vector<double> value_ratios, const SpectrumSet& spectra,
                 std::size_t threads = 1);

/// Synthetic token source: an order-n Markov chain in which every context
/// has `branching` possible successors with random weights.
struct MarkovSpec {
    std::uint32_t vocab = 256;
    std::uint32_t order = 1;
    std::uint32_t branching = 4;
    std::uint64_t tokens = 4096;
    std::uint64_t seed = 0;
};

std::vector<std::uint32_t> generate_markov_tokens(const MarkovSpec& spec);
/// Cuts a flat token stream into sequences of `seq_len` (the last may be shorter).
Corpus split_sequences(std::span<const std::uint32_t> tokens, std::size_t seq_len);
std::size_t total_tokens(const Corpus& corpus);

/// Raw u16 little-endian token ids.
void save_corpus(const std::filesystem::path& path, std::span<const std::uint32_t> tokens);
std::vector<std::uint32_t> load_corpus(const std::filesystem::path& path);

/// "KVCM", version u32, config (7 × u32 then seed u64), tensor count u32, then
/// tensors tagged (name length u16, name, rank u8, dims u32×rank, f32 payload).
void save_model(const std::filesystem::path& path, const ModelConfig& cfg, const ModelWeights& weights);
std::pair<ModelConfig, ModelWeights> load_model(const std::filesystem::path& path);

} // namespace kvcore
