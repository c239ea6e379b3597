#include "kvcore/model.hpp"

#include "kvcore/binary_io.hpp"
#include "kvcore/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <random>
#include <thread>

namespace kvcore {

namespace {

constexpr double kNormEps = 1e-5;

double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

DenseMatrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    DenseMatrix m(rows, cols);
    for (double& x : m.data()) x = round_f32(dist(rng));
    return m;
}

DenseMatrix layer_norm(const DenseMatrix& h, const std::vector<double>& gain) {
    DenseMatrix out(h.rows(), h.cols());
    const auto n = static_cast<double>(h.cols());
    for (std::size_t t = 0; t < h.rows(); ++t) {
        const auto row = h.row(t);
        double mean = 0.0;
        for (double x : row) mean += x;
        mean /= n;
        double var = 0.0;
        for (double x : row) var += (x - mean) * (x - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + kNormEps);
        auto o = out.row(t);
        for (std::size_t c = 0; c < h.cols(); ++c) o[c] = (row[c] - mean) * inv * gain[c];
    }
    return out;
}

double gelu(double x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

DenseMatrix project(const DenseMatrix& x, const LayerWeights& lw, std::uint32_t layer, Kind kind,
                    const CompressedOverride& override) {
    const auto it = override.find({layer, kind});
    if (it == override.end()) return matmul(x, lw.projection(kind));
    const auto& f = it->second;
    const auto& w = lw.projection(kind);
    if (f.down.rows() != w.rows() || f.up.cols() != w.cols()) {
        throw ShapeError("forward: override for layer " + std::to_string(layer) + " " + std::string(kind_name(kind)) +
                         " has down " + f.down.shape_string() + " / up " + f.up.shape_string() +
                         ", projection is " + w.shape_string());
    }
    return matmul(matmul(x, f.down), f.up);
}

// Causal grouped-query attention; output is T × m_h·d_h.
DenseMatrix attention(const ModelConfig& cfg, const DenseMatrix& q, const DenseMatrix& k, const DenseMatrix& v) {
    const std::size_t t_len = q.rows();
    const std::size_t dh = cfg.d_h;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    DenseMatrix out(t_len, cfg.query_width());
    std::vector<double> weights(t_len);
    for (std::size_t head = 0; head < cfg.m_h; ++head) {
        const std::size_t group = group_map(head + 1, cfg.m_h, cfg.m_g) - 1;
        const std::size_t qo = head * dh;
        const std::size_t ko = group * dh;
        for (std::size_t t = 0; t < t_len; ++t) {
            double top = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= t; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += q(t, qo + c) * k(j, ko + c);
                weights[j] = s * scale;
                top = std::max(top, weights[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
                weights[j] = std::exp(weights[j] - top);
                z += weights[j];
            }
            for (std::size_t j = 0; j <= t; ++j) {
                const double p = weights[j] / z;
                for (std::size_t c = 0; c < dh; ++c) out(t, qo + c) += p * v(j, ko + c);
            }
        }
    }
    return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

} // namespace

void ModelConfig::validate() const {
    if (d_e == 0 || n_layers == 0 || m_h == 0 || m_g == 0 || d_h == 0 || vocab == 0 || d_ff == 0) {
        throw ArgumentError("model config: all dimensions must be >= 1");
    }
    if (m_h % m_g != 0) {
        throw ArgumentError("model config: m_h=" + std::to_string(m_h) + " is not divisible by m_g=" + std::to_string(m_g));
    }
    if (vocab > 65536) throw ArgumentError("model config: vocab exceeds the u16 token range");
}

ModelWeights init_weights(const ModelConfig& cfg, double stddev) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    ModelWeights w;
    w.embedding = gaussian(cfg.vocab, cfg.d_e, stddev, rng);
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.attn_norm.assign(cfg.d_e, 1.0);
        lw.wq = gaussian(cfg.d_e, cfg.query_width(), stddev, rng);
        lw.wk = gaussian(cfg.d_e, cfg.kv_width(), stddev, rng);
        lw.wv = gaussian(cfg.d_e, cfg.kv_width(), stddev, rng);
        lw.wo = gaussian(cfg.query_width(), cfg.d_e, stddev, rng);
        lw.mlp_norm.assign(cfg.d_e, 1.0);
        lw.w_in = gaussian(cfg.d_e, cfg.d_ff, stddev, rng);
        lw.w_out = gaussian(cfg.d_ff, cfg.d_e, stddev, rng);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm.assign(cfg.d_e, 1.0);
    return w;
}

ModelWeights uniform_logit_weights(const ModelConfig& cfg) {
    auto w = init_weights(cfg);
    std::fill(w.final_norm.begin(), w.final_norm.end(), 0.0);
    return w;
}

std::size_t group_map(std::size_t head, std::size_t m_h, std::size_t m_g) {
    if (m_g == 0 || m_h % m_g != 0) throw ArgumentError("group_map: m_h must be a multiple of m_g");
    if (head < 1 || head > m_h) {
        throw ArgumentError("group_map: head " + std::to_string(head) + " outside [1, " + std::to_string(m_h) + "]");
    }
    const std::size_t per_group = m_h / m_g;
    return (head + per_group - 1) / per_group;
}

DenseMatrix forward(const ModelConfig& cfg, const ModelWeights& weights, std::span<const std::uint32_t> tokens,
                    const CompressedOverride& override, std::vector<LayerCapture>* capture) {
    if (tokens.empty()) throw ArgumentError("forward: empty token sequence");
    DenseMatrix h(tokens.size(), cfg.d_e);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] >= cfg.vocab) {
            throw ArgumentError("forward: token id " + std::to_string(tokens[t]) + " at position " + std::to_string(t) +
                                " outside vocab " + std::to_string(cfg.vocab));
        }
        std::copy_n(weights.embedding.row(tokens[t]).begin(), cfg.d_e, h.row(t).begin());
    }
    if (capture != nullptr) capture->clear();

    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = weights.layers[l];
        auto x = layer_norm(h, lw.attn_norm);
        const auto q = matmul(x, lw.wq);
        auto k = project(x, lw, l, Kind::Key, override);
        auto v = project(x, lw, l, Kind::Value, override);
        h = h + matmul(attention(cfg, q, k, v), lw.wo);
        if (capture != nullptr) capture->push_back({std::move(x), std::move(k), std::move(v)});

        auto hidden = matmul(layer_norm(h, lw.mlp_norm), lw.w_in);
        for (double& z : hidden.data()) z = gelu(z);
        h = h + matmul(hidden, lw.w_out);
    }
    return matmul_nt(layer_norm(h, weights.final_norm), weights.embedding);
}

double perplexity(const ModelConfig& cfg, const ModelWeights& weights, const Corpus& corpus,
                  const CompressedOverride& override) {
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& seq : corpus) {
        if (seq.size() < 2) continue;
        const auto logits = forward(cfg, weights, seq, override);
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            const auto row = logits.row(t);
            const double top = *std::max_element(row.begin(), row.end());
            double z = 0.0;
            for (double x : row) z += std::exp(x - top);
            nll += std::log(z) + top - row[seq[t + 1]];
            ++count;
        }
    }
    if (count == 0) throw ArgumentError("perplexity: corpus has no position with a successor");
    const double ppl = std::exp(nll / static_cast<double>(count));
    if (!std::isfinite(ppl)) throw NumericalError("perplexity: non-finite result");
    return ppl;
}

std::vector<std::filesystem::path> dump_activations(const ModelConfig& cfg, const ModelWeights& weights,
                                                    const Corpus& corpus, const std::filesystem::path& out_dir) {
    const auto n_tokens = total_tokens(corpus);
    if (n_tokens == 0) throw ArgumentError("dump_activations: empty corpus");
    std::filesystem::create_directories(out_dir);

    std::vector<std::filesystem::path> paths;
    std::vector<std::unique_ptr<StreamWriter>> writers;
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        for (Kind kind : {Kind::Key, Kind::Value}) {
            StreamHeader h;
            h.layer_index = l;
            h.feature_dim = static_cast<std::uint32_t>(cfg.kv_width());
            h.kind = kind;
            h.token_count = n_tokens;
            paths.push_back(out_dir / stream_filename(l, kind));
            writers.push_back(std::make_unique<StreamWriter>(paths.back(), h));
        }
    }
    std::vector<LayerCapture> capture;
    for (const auto& seq : corpus) {
        if (seq.empty()) continue;
        (void)forward(cfg, weights, seq, {}, &capture);
        for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
            writers[2 * l]->append(capture[l].keys);
            writers[2 * l + 1]->append(capture[l].values);
        }
    }
    for (auto& w : writers) w->finish();
    return paths;
}

CompressedOverride uniform_override(const ModelConfig& cfg, const ModelWeights& weights, const SpectrumSet& spectra,
                                    double key_ratio, double value_ratio) {
    CompressedOverride ov;
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        for (auto [kind, ratio] : {std::pair{Kind::Key, key_ratio}, std::pair{Kind::Value, value_ratio}}) {
            const auto it = spectra.find({l, kind});
            if (it == spectra.end()) {
                throw ArgumentError("missing spectrum for layer " + std::to_string(l) + " " + std::string(kind_name(kind)));
            }
            ov.emplace(std::pair{l, kind}, build_factors(weights.layers[l].projection(kind), it->second, RankSpec::ratio(ratio)));
        }
    }
    return ov;
}

PplGrid ppl_grid(const ModelConfig& cfg, const ModelWeights& weights, const Corpus& corpus,
                 std::vector<double> key_ratios, std::vector<double> value_ratios, const SpectrumSet& spectra,
                 std::size_t threads) {
    std::sort(key_ratios.begin(), key_ratios.end());
    std::sort(value_ratios.begin(), value_ratios.end());
    PplGrid grid{std::move(key_ratios), std::move(value_ratios), {}};
    grid.ppl = DenseMatrix(grid.key_ratios.size(), grid.value_ratios.size());
    if (grid.ppl.empty()) throw ArgumentError("ppl_grid: ratio lists must be non-empty");

    // Build all overrides up front so errors surface before any worker starts.
    std::vector<CompressedOverride> overrides;
    for (double k : grid.key_ratios)
        for (double v : grid.value_ratios) overrides.push_back(uniform_override(cfg, weights, spectra, k, v));

    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(overrides.size());
    auto worker = [&] {
        for (std::size_t i = next++; i < overrides.size(); i = next++) {
            try {
                grid.ppl.data()[i] = perplexity(cfg, weights, corpus, overrides[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_workers = std::clamp<std::size_t>(threads, 1, overrides.size());
    std::vector<std::jthread> pool;
    for (std::size_t i = 1; i < n_workers; ++i) pool.emplace_back(worker);
    worker();
    pool.clear();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    grid.validate();
    return grid;
}

std::vector<std::uint32_t> generate_markov_tokens(const MarkovSpec& spec) {
    if (spec.vocab == 0 || spec.order == 0 || spec.branching == 0) {
        throw ArgumentError("markov corpus: vocab, order and branching must be >= 1");
    }
    std::mt19937_64 rng(spec.seed);
    std::vector<std::uint32_t> out;
    out.reserve(spec.tokens);
    std::vector<std::uint32_t> context(spec.order);
    for (auto& c : context) c = static_cast<std::uint32_t>(rng() % spec.vocab);

    std::vector<std::uint32_t> successors(spec.branching);
    std::vector<double> weights(spec.branching);
    for (std::uint64_t i = 0; i < spec.tokens; ++i) {
        // Transition row for this context, regenerated from a hash of it.
        std::uint64_t h = splitmix64(spec.seed ^ 0xA5A5A5A5A5A5A5A5ull);
        for (auto c : context) h = splitmix64(h ^ c);
        std::mt19937_64 row_rng(h);
        std::exponential_distribution<double> expo(1.0);
        double total = 0.0;
        for (std::uint32_t b = 0; b < spec.branching; ++b) {
            successors[b] = static_cast<std::uint32_t>(row_rng() % spec.vocab);
            weights[b] = expo(row_rng);
            total += weights[b];
        }
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        std::uint32_t pick = successors.back();
        for (std::uint32_t b = 0; b < spec.branching; ++b) {
            if (u < weights[b]) {
                pick = successors[b];
                break;
            }
            u -= weights[b];
        }
        out.push_back(pick);
        std::rotate(context.begin(), context.begin() + 1, context.end());
        context.back() = pick;
    }
    return out;
}

Corpus split_sequences(std::span<const std::uint32_t> tokens, std::size_t seq_len) {
    if (seq_len == 0) throw ArgumentError("split_sequences: seq_len must be >= 1");
    Corpus corpus;
    for (std::size_t i = 0; i < tokens.size(); i += seq_len) {
        const auto n = std::min(seq_len, tokens.size() - i);
        corpus.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                            tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
    }
    return corpus;
}

std::size_t total_tokens(const Corpus& corpus) {
    std::size_t n = 0;
    for (const auto& s : corpus) n += s.size();
    return n;
}

void save_corpus(const std::filesystem::path& path, std::span<const std::uint32_t> tokens) {
    std::vector<unsigned char> out;
    out.reserve(tokens.size() * 2);
    for (auto t : tokens) {
        if (t > 0xFFFF) throw ArgumentError("save_corpus: token id " + std::to_string(t) + " exceeds u16");
        io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t));
    }
    io::write_file_atomic(path, std::span<const unsigned char>(out));
}

std::vector<std::uint32_t> load_corpus(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    if (bytes.size() % 2 != 0) {
        throw FormatError(path.string() + ": odd byte count " + std::to_string(bytes.size()) + " for u16 token ids");
    }
    std::vector<std::uint32_t> tokens(bytes.size() / 2);
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = io::get_le<std::uint16_t>(bytes.data() + 2 * i);
    return tokens;
}

namespace {

constexpr std::string_view kModelMagic = "KVCM";
constexpr std::uint32_t kModelVersion = 1;

void put_tensor(std::vector<unsigned char>& out, const std::string& name, std::vector<std::uint32_t> dims,
                std::span<const double> data) {
    io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    io::put_bytes(out, name);
    io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dims.size()));
    for (auto d : dims) io::put_le<std::uint32_t>(out, d);
    for (double x : data) io::put_f32(out, static_cast<float>(x));
}

struct TensorSlot {
    std::vector<std::uint32_t> dims;
    std::span<double> data;
    bool filled = false;
};

} // namespace

void save_model(const std::filesystem::path& path, const ModelConfig& cfg, const ModelWeights& w) {
    cfg.validate();
    std::vector<unsigned char> out;
    io::put_bytes(out, kModelMagic);
    io::put_le<std::uint32_t>(out, kModelVersion);
    for (auto v : {cfg.d_e, cfg.n_layers, cfg.m_h, cfg.m_g, cfg.d_h, cfg.vocab, cfg.d_ff}) io::put_le<std::uint32_t>(out, v);
    io::put_le<std::uint64_t>(out, cfg.seed);
    io::put_le<std::uint32_t>(out, 2 + 8 * cfg.n_layers);

    auto mat = [&](const std::string& name, const DenseMatrix& m) {
        put_tensor(out, name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, m.data());
    };
    auto vec = [&](const std::string& name, const std::vector<double>& v) {
        put_tensor(out, name, {static_cast<std::uint32_t>(v.size())}, v);
    };
    mat("embedding", w.embedding);
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        const auto p = "layers." + std::to_string(l) + ".";
        const auto& lw = w.layers.at(l);
        vec(p + "attn_norm", lw.attn_norm);
        mat(p + "wq", lw.wq);
        mat(p + "wk", lw.wk);
        mat(p + "wv", lw.wv);
        mat(p + "wo", lw.wo);
        vec(p + "mlp_norm", lw.mlp_norm);
        mat(p + "w_in", lw.w_in);
        mat(p + "w_out", lw.w_out);
    }
    vec("final_norm", w.final_norm);
    io::write_file_atomic(path, std::span<const unsigned char>(out));
}

std::pair<ModelConfig, ModelWeights> load_model(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    io::ByteReader r(bytes, path.string());
    r.expect_magic(kModelMagic);
    if (const auto v = r.read<std::uint32_t>(); v != kModelVersion) {
        throw FormatError(path.string() + ": unsupported version " + std::to_string(v) + " at byte offset 4");
    }
    ModelConfig cfg;
    cfg.d_e = r.read<std::uint32_t>();
    cfg.n_layers = r.read<std::uint32_t>();
    cfg.m_h = r.read<std::uint32_t>();
    cfg.m_g = r.read<std::uint32_t>();
    cfg.d_h = r.read<std::uint32_t>();
    cfg.vocab = r.read<std::uint32_t>();
    cfg.d_ff = r.read<std::uint32_t>();
    cfg.seed = r.read<std::uint64_t>();
    try {
        cfg.validate();
    } catch (const ArgumentError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    const auto de = cfg.d_e;
    const auto qw = static_cast<std::uint32_t>(cfg.query_width());
    const auto kw = static_cast<std::uint32_t>(cfg.kv_width());

    ModelWeights w;
    w.embedding = DenseMatrix(cfg.vocab, de);
    w.final_norm.assign(de, 0.0);
    w.layers.resize(cfg.n_layers);
    std::map<std::string, TensorSlot> slots;
    slots["embedding"] = {{cfg.vocab, de}, w.embedding.data()};
    slots["final_norm"] = {{de}, w.final_norm};
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        auto& lw = w.layers[l];
        const auto p = "layers." + std::to_string(l) + ".";
        lw.attn_norm.assign(de, 0.0);
        lw.mlp_norm.assign(de, 0.0);
        lw.wq = DenseMatrix(de, qw);
        lw.wk = DenseMatrix(de, kw);
        lw.wv = DenseMatrix(de, kw);
        lw.wo = DenseMatrix(qw, de);
        lw.w_in = DenseMatrix(de, cfg.d_ff);
        lw.w_out = DenseMatrix(cfg.d_ff, de);
        slots[p + "attn_norm"] = {{de}, lw.attn_norm};
        slots[p + "mlp_norm"] = {{de}, lw.mlp_norm};
        slots[p + "wq"] = {{de, qw}, lw.wq.data()};
        slots[p + "wk"] = {{de, kw}, lw.wk.data()};
        slots[p + "wv"] = {{de, kw}, lw.wv.data()};
        slots[p + "wo"] = {{qw, de}, lw.wo.data()};
        slots[p + "w_in"] = {{de, cfg.d_ff}, lw.w_in.data()};
        slots[p + "w_out"] = {{cfg.d_ff, de}, lw.w_out.data()};
    }

    const auto count = r.read<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto at = r.offset();
        const auto name = r.read_string(r.read<std::uint16_t>());
        const auto it = slots.find(name);
        if (it == slots.end()) {
            throw FormatError(path.string() + ": unexpected tensor \"" + name + "\" at byte offset " + std::to_string(at));
        }
        auto& slot = it->second;
        if (slot.filled) throw FormatError(path.string() + ": duplicate tensor \"" + name + "\"");
        std::vector<std::uint32_t> dims(r.read<std::uint8_t>());
        for (auto& d : dims) d = r.read<std::uint32_t>();
        if (dims != slot.dims) {
            throw FormatError(path.string() + ": tensor \"" + name + "\" has unexpected shape at byte offset " +
                              std::to_string(at));
        }
        r.require(slot.data.size() * 4);
        for (double& x : slot.data) {
            x = r.read_f32();
            if (!std::isfinite(x)) throw FormatError(path.string() + ": non-finite value in tensor \"" + name + "\"");
        }
        slot.filled = true;
    }
    for (const auto& [name, slot] : slots)
        if (!slot.filled) throw FormatError(path.string() + ": missing tensor \"" + name + "\"");
    if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes at byte offset " + std::to_string(r.offset()));
    return {cfg, std::move(w)};
}

} // namespace kvcore
