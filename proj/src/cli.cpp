#include "kvcore/cli.hpp"

#include "kvcore/analysis.hpp"
#include "kvcore/binary_io.hpp"
#include "kvcore/compression.hpp"
#include "kvcore/error.hpp"
#include "kvcore/metrics.hpp"
#include "kvcore/model.hpp"
#include "kvcore/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

namespace kvcore::cli {

using nlohmann::json;
namespace fs = std::filesystem;

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for hashing");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: digest init failed");
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
    return hex.str();
}

namespace {

// Per-run record of what was read and written. Paths are stored as given on
// the command line so two identical invocations produce identical bytes.
class Manifest {
public:
    Manifest(std::string command, json config) : command_(std::move(command)), config_(std::move(config)) {}

    void input(const fs::path& p) { inputs_.push_back(entry(p)); }
    void output(const fs::path& p) { outputs_.push_back(entry(p)); }
    json& summary() { return summary_; }

    json to_json() const {
        const auto canonical = config_.dump();
        const auto digest = sha256_text(canonical);
        json j{{"command", command_}, {"config", config_}, {"config_sha256", digest},
               {"inputs", inputs_}, {"outputs", outputs_}};
        if (!summary_.is_null()) j["summary"] = summary_;
        return j;
    }

    // Writes the manifest to `path` and echoes it on `out`.
    void finish(const fs::path& path, std::ostream& out) const {
        const auto text = to_json().dump(2) + "\n";
        io::write_file_atomic(path, std::string_view(text));
        out << text;
    }

private:
    static json entry(const fs::path& p) {
        return {{"path", p.generic_string()}, {"bytes", fs::file_size(p)}, {"sha256", sha256_file(p)}};
    }
    static std::string sha256_text(const std::string& text) {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr);
        std::ostringstream hex;
        for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
        return hex.str();
    }

    std::string command_;
    json config_;
    json inputs_ = json::array();
    json outputs_ = json::array();
    json summary_;
};

// Config file values fill options the command line left unset.
void apply_config(CLI::App& sub, const std::string& config_path) {
    if (config_path.empty()) return;
    std::ifstream in(config_path);
    if (!in) throw ArgumentError("cannot read config file " + config_path);
    json cfg;
    try {
        cfg = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ArgumentError("config " + config_path + ": " + e.what());
    }
    if (!cfg.is_object()) throw ArgumentError("config " + config_path + ": top level must be an object");

    auto scalar = [&](const std::string& key, const json& v) -> std::string {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        if (v.is_number()) return v.dump();
        throw ArgumentError("config " + config_path + ": key \"" + key + "\" has an unsupported value type");
    };
    for (const auto& [key, value] : cfg.items()) {
        std::string flag = key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        CLI::Option* opt = flag == "config" ? nullptr : sub.get_option_no_throw("--" + flag);
        if (opt == nullptr) throw ArgumentError("config " + config_path + ": unknown key \"" + key + "\"");
        if (opt->count() > 0) continue;
        if (value.is_array()) {
            std::vector<std::string> items;
            for (const auto& v : value) items.push_back(scalar(key, v));
            opt->add_result(items);
        } else {
            opt->add_result(scalar(key, value));
        }
        opt->run_callback();
    }
}

std::size_t resolve_threads(int flag) {
    if (flag > 0) return static_cast<std::size_t>(flag);
    if (flag < 0) throw ArgumentError("--threads must be >= 1");
    if (const char* env = std::getenv("KVCORE_THREADS"); env != nullptr && *env != '\0') {
        std::size_t n = 0;
        const std::string_view s(env);
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
        if (ec != std::errc{} || ptr != s.data() + s.size() || n == 0) {
            throw ArgumentError("KVCORE_THREADS must be a positive integer, got \"" + std::string(s) + "\"");
        }
        return n;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void require(const fs::path& p, const char* flag) {
    if (p.empty()) throw ArgumentError(std::string(flag) + " is required");
}

void check_ratios(const std::vector<double>& ratios, const char* flag) {
    if (ratios.empty()) throw ArgumentError(std::string(flag) + ": ratio list is empty");
    for (double r : ratios)
        if (!(r > 0.0 && r <= 1.0)) throw ArgumentError(std::string(flag) + ": ratio " + format_double(r) + " outside (0, 1]");
}

// Runs `job(i)` for i in [0, n) on up to `threads` workers. Exceptions are
// rethrown in index order so the reported failure does not depend on timing.
template <typename Job>
void parallel_for(std::size_t n, std::size_t threads, Job job) {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                job(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t i = 1; i < std::min(threads, n); ++i) pool.emplace_back(worker);
        worker();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

Corpus load_split_corpus(const fs::path& path, std::size_t seq_len) {
    const auto tokens = load_corpus(path);
    if (tokens.size() < 2) throw FormatError(path.string() + ": corpus needs at least 2 tokens");
    return split_sequences(tokens, seq_len);
}

SpectrumSet load_spectra(const fs::path& dir, const ModelConfig& cfg, Manifest& manifest) {
    SpectrumSet set;
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        for (Kind kind : {Kind::Key, Kind::Value}) {
            const auto p = dir / spectrum_filename(l, kind);
            if (!fs::exists(p)) throw IoError("missing spectrum " + p.string());
            auto s = load_spectrum(p);
            if (s.layer_index != l || s.kind != kind) throw FormatError(p.string() + ": header names a different layer/kind");
            if (s.dim() != cfg.kv_width()) {
                throw ShapeError(p.string() + ": spectrum dim " + std::to_string(s.dim()) + " but model kv width is " +
                                 std::to_string(cfg.kv_width()));
            }
            manifest.input(p);
            set.emplace(std::pair{l, kind}, std::move(s));
        }
    }
    return set;
}

// ---------------------------------------------------------------- commands

struct GenSynthetic {
    fs::path out;
    std::uint64_t seed = 0;
    std::uint64_t tokens = 4096;
    std::uint32_t seq_len = 64;
    std::uint32_t markov_order = 1;
    std::uint32_t branching = 4;
    std::uint32_t train_steps = 200;
    std::uint32_t train_batch = 4;
    double learning_rate = 3e-3;
    double init_std = 0.02;
    bool uniform_logits = false;
    ModelConfig model;

    void bind(CLI::App& app) {
        app.add_option("--out", out, "Output directory");
        app.add_option("--seed", seed, "Seed for model, corpus and training");
        app.add_option("--tokens", tokens, "Corpus length in tokens");
        app.add_option("--seq-len", seq_len, "Sequence length the corpus is cut into");
        app.add_option("--markov-order", markov_order, "Markov chain order");
        app.add_option("--branching", branching, "Successors per Markov context");
        app.add_option("--train-steps", train_steps, "Adam steps on the corpus (0 keeps the random init)");
        app.add_option("--train-batch", train_batch, "Sequences per training step");
        app.add_option("--learning-rate", learning_rate, "Adam learning rate");
        app.add_option("--init-std", init_std, "Stddev of the Gaussian weight init");
        app.add_flag("--uniform-logits", uniform_logits, "Zero the output norm gain so every prediction is uniform");
        app.add_option("--d-model", model.d_e, "Residual width");
        app.add_option("--layers", model.n_layers, "Decoder layers");
        app.add_option("--heads", model.m_h, "Query heads");
        app.add_option("--groups", model.m_g, "Key/value groups");
        app.add_option("--head-dim", model.d_h, "Per-head width");
        app.add_option("--vocab", model.vocab, "Vocabulary size");
        app.add_option("--ffn-dim", model.d_ff, "MLP hidden width");
    }

    json config() const {
        return {{"seed", seed}, {"tokens", tokens}, {"seq_len", seq_len}, {"markov_order", markov_order},
                {"branching", branching}, {"train_steps", train_steps}, {"train_batch", train_batch},
                {"learning_rate", learning_rate}, {"init_std", init_std}, {"uniform_logits", uniform_logits},
                {"d_model", model.d_e}, {"layers", model.n_layers}, {"heads", model.m_h}, {"groups", model.m_g},
                {"head_dim", model.d_h}, {"vocab", model.vocab}, {"ffn_dim", model.d_ff}};
    }

    void validate() {
        require(out, "--out");
        model.seed = seed;
        model.validate();
        if (tokens < 2) throw ArgumentError("--tokens must be >= 2");
        if (seq_len < 2) throw ArgumentError("--seq-len must be >= 2");
        if (markov_order == 0) throw ArgumentError("--markov-order must be >= 1");
        if (branching == 0 || branching > model.vocab) throw ArgumentError("--branching must be in [1, vocab]");
        if (train_batch == 0) throw ArgumentError("--train-batch must be >= 1");
        if (!(learning_rate > 0.0)) throw ArgumentError("--learning-rate must be > 0");
        if (!(init_std > 0.0)) throw ArgumentError("--init-std must be > 0");
    }

    void execute(std::ostream& out_stream, std::ostream& log) const {
        fs::create_directories(out);
        MarkovSpec ms;
        ms.vocab = model.vocab;
        ms.order = markov_order;
        ms.branching = branching;
        ms.tokens = tokens;
        ms.seed = seed + 1;
        const auto token_ids = generate_markov_tokens(ms);
        const auto corpus = split_sequences(token_ids, seq_len);

        auto weights = uniform_logits ? uniform_logit_weights(model) : init_weights(model, init_std);
        if (!uniform_logits && train_steps > 0) {
            TrainSpec ts;
            ts.steps = train_steps;
            ts.batch = train_batch;
            ts.learning_rate = learning_rate;
            ts.seed = seed + 2;
            const auto losses = train(model, weights, corpus, ts);
            log << "gen-synthetic: trained " << train_steps << " steps, loss " << format_double(losses.front()) << " -> "
                << format_double(losses.back()) << "\n";
        }

        Manifest manifest("gen-synthetic", config());
        const auto model_path = out / "model.kvcm";
        const auto corpus_path = out / "corpus.u16";
        save_model(model_path, model, weights);
        save_corpus(corpus_path, token_ids);
        manifest.output(model_path);
        manifest.output(corpus_path);
        for (const auto& p : dump_activations(model, weights, corpus, out / "streams")) {
            manifest.output(p);
            log << "gen-synthetic: wrote " << p.generic_string() << "\n";
        }
        manifest.summary() = {{"baseline_ppl", perplexity(model, weights, corpus)}};
        manifest.finish(out / "gen-synthetic.manifest.json", out_stream);
    }
};

struct Analyze {
    fs::path streams;
    fs::path out;
    std::size_t batch_size = 4096;
    double rank_tol = kDefaultRankTol;
    int sigma_top = -1;
    int threads = 0;

    void bind(CLI::App& app) {
        app.add_option("--streams", streams, "Directory of .kvcr stream files");
        app.add_option("--out", out, "Output directory");
        app.add_option("--batch-size", batch_size, "Rows read per batch");
        app.add_option("--rank-tol", rank_tol, "Relative tolerance for numerical rank");
        app.add_option("--sigma-top", sigma_top, "Leading singular values listed in ner.json (default all)");
        app.add_option("--threads", threads, "Worker threads (default KVCORE_THREADS or all cores)");
    }

    json config() const {
        json j{{"streams", streams.generic_string()}, {"batch_size", batch_size}, {"rank_tol", rank_tol}};
        if (sigma_top >= 0) j["sigma_top"] = sigma_top;
        return j;
    }

    void validate() const {
        require(streams, "--streams");
        require(out, "--out");
        if (batch_size == 0) throw ArgumentError("--batch-size must be >= 1");
        if (!(rank_tol > 0.0 && rank_tol < 1.0)) throw ArgumentError("--rank-tol must be in (0, 1)");
    }

    void execute(std::ostream& out_stream, std::ostream& log) const {
        const auto n_threads = resolve_threads(threads);
        if (!fs::is_directory(streams)) throw IoError("stream directory " + streams.string() + " does not exist");
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(streams))
            if (e.is_regular_file() && e.path().extension() == ".kvcr") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw FormatError("no .kvcr files in " + streams.string());

        std::map<std::pair<std::uint32_t, Kind>, fs::path> seen;
        for (const auto& f : files) {
            const auto h = ActivationStream::open(f).header();
            const auto [it, fresh] = seen.emplace(std::pair{h.layer_index, h.kind}, f);
            if (!fresh) {
                throw FormatError(f.string() + ": layer " + std::to_string(h.layer_index) + " " +
                                  std::string(kind_name(h.kind)) + " already provided by " + it->second.string());
            }
        }

        std::vector<SpectralResult> results(files.size());
        parallel_for(files.size(), n_threads, [&](std::size_t i) { results[i] = analyze_stream(files[i], batch_size, rank_tol); });
        std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) {
            return std::pair{a.layer_index, a.kind} < std::pair{b.layer_index, b.kind};
        });

        Manifest manifest("analyze", config());
        for (const auto& f : files) manifest.input(f);
        fs::create_directories(out / "spectra");
        std::vector<NerReport> reports;
        std::map<Kind, std::pair<double, std::size_t>> means;
        for (const auto& r : results) {
            const auto p = out / "spectra" / spectrum_filename(r.layer_index, r.kind);
            save_spectrum(p, r);
            manifest.output(p);
            reports.push_back(ner(r));
            auto& m = means[r.kind];
            m.first += reports.back().ner;
            ++m.second;
            log << "analyze: layer " << r.layer_index << " " << kind_name(r.kind) << " tokens=" << r.tokens_seen
                << " rank=" << r.numerical_rank << " ner=" << format_double(reports.back().ner) << "\n";
        }

        json layer_mean = json::object();
        for (const auto& [kind, m] : means) layer_mean[std::string(kind_name(kind))] = m.first / static_cast<double>(m.second);
        const json ner_json{
            {"reports", ner_reports_to_json(reports, sigma_top >= 0 ? std::optional<std::size_t>(sigma_top) : std::nullopt)},
            {"mean_ner_over_layers", layer_mean}};
        const auto json_path = out / "ner.json";
        const auto csv_path = out / "ner.csv";
        io::write_file_atomic(json_path, std::string_view(ner_json.dump(2) + "\n"));
        io::write_file_atomic(csv_path, std::string_view(ner_reports_to_csv(reports)));
        manifest.output(json_path);
        manifest.output(csv_path);
        manifest.finish(out / "analyze.manifest.json", out_stream);
    }
};

struct Compress {
    fs::path checkpoint;
    fs::path corpus;
    fs::path spectra;
    fs::path out;
    std::size_t seq_len = 64;
    std::vector<double> ratios;
    std::vector<std::size_t> ranks;

    void bind(CLI::App& app) {
        app.add_option("--checkpoint", checkpoint, "Model checkpoint (.kvcm)");
        app.add_option("--corpus", corpus, "Token corpus (u16)");
        app.add_option("--seq-len", seq_len, "Sequence length the corpus is cut into");
        app.add_option("--spectra", spectra, "Directory of .kvcs spectra from analyze");
        app.add_option("--ratios", ratios, "Retain ratios in (0, 1]")->delimiter(',');
        app.add_option("--ranks", ranks, "Absolute retained ranks (instead of --ratios)")->delimiter(',');
        app.add_option("--out", out, "Output directory");
    }

    json config() const {
        return {{"checkpoint", checkpoint.generic_string()}, {"corpus", corpus.generic_string()},
                {"spectra", spectra.generic_string()}, {"seq_len", seq_len}, {"ratios", ratios}, {"ranks", ranks}};
    }

    void validate() const {
        require(checkpoint, "--checkpoint");
        require(corpus, "--corpus");
        require(spectra, "--spectra");
        require(out, "--out");
        if (seq_len < 2) throw ArgumentError("--seq-len must be >= 2");
        if (ratios.empty() == ranks.empty()) throw ArgumentError("give exactly one non-empty list: --ratios or --ranks");
        if (!ratios.empty()) check_ratios(ratios, "--ratios");
        for (auto k : ranks)
            if (k == 0) throw ArgumentError("--ranks: rank must be >= 1");
    }

    void execute(std::ostream& out_stream, std::ostream& log) const {
        Manifest manifest("compress", config());
        const auto [cfg, weights] = load_model(checkpoint);
        manifest.input(checkpoint);
        const auto seqs = load_split_corpus(corpus, seq_len);
        manifest.input(corpus);
        const auto set = load_spectra(spectra, cfg, manifest);

        std::vector<RankSpec> specs;
        for (double r : ratios) specs.push_back(RankSpec::ratio(r));
        for (auto k : ranks) {
            if (k > cfg.kv_width()) {
                throw ArgumentError("--ranks: rank " + std::to_string(k) + " exceeds kv width " + std::to_string(cfg.kv_width()));
            }
            specs.push_back(RankSpec::absolute(k));
        }

        struct Job {
            std::uint32_t layer;
            Kind kind;
            std::size_t spec;
            CompressionFactors factors;
            ErrorMeter meter;
        };
        std::vector<Job> jobs;
        for (const auto& [key, spectrum] : set) {
            const auto& w = weights.layers[key.first].projection(key.second);
            for (std::size_t s = 0; s < specs.size(); ++s) {
                auto f = build_factors(w, spectrum, specs[s]);
                ErrorMeter meter(w, f);
                jobs.push_back({key.first, key.second, s, std::move(f), std::move(meter)});
            }
        }

        std::vector<LayerCapture> capture;
        for (const auto& seq : seqs) {
            (void)forward(cfg, weights, seq, {}, &capture);
            for (auto& j : jobs) j.meter.add(capture[j.layer].attn_input);
        }

        fs::create_directories(out / "factors");
        std::set<fs::path> written;  // two ratios can resolve to the same rank
        json rows = json::array();
        std::ostringstream csv;
        csv << "layer,kind,rank,ratio,predicted_frobenius,measured_frobenius,predicted_spectral,measured_spectral,"
               "relative_error,retained_energy\n";
        for (const auto& j : jobs) {
            const auto& spectrum = set.at({j.layer, j.kind});
            const auto rep = j.meter.report(&spectrum);
            const double pred_f = predicted_error(spectrum, j.factors.rank, ErrorNorm::Frobenius);
            const double pred_s = predicted_error(spectrum, j.factors.rank, ErrorNorm::Spectral);
            const auto p = out / "factors" / factor_filename(j.layer, j.kind, j.factors.rank);
            if (written.insert(p).second) {
                save_factors(p, j.factors);
                manifest.output(p);
            }
            json row{{"layer", j.layer}, {"kind", std::string(kind_name(j.kind))}, {"rank", j.factors.rank},
                     {"dim", spectrum.dim()}, {"predicted_frobenius", pred_f}, {"measured_frobenius", rep.frobenius_error},
                     {"predicted_spectral", pred_s}, {"measured_spectral", rep.spectral_error},
                     {"relative_error", rep.relative_error}, {"retained_energy", rep.retained_energy},
                     {"reference_norm", rep.reference_norm}, {"tokens", rep.rows}};
            const bool by_ratio = !ratios.empty();
            row["ratio"] = by_ratio ? json(ratios[j.spec]) : json(nullptr);
            rows.push_back(row);
            csv << j.layer << ',' << kind_name(j.kind) << ',' << j.factors.rank << ','
                << (by_ratio ? format_double(ratios[j.spec]) : std::string()) << ',' << format_double(pred_f) << ','
                << format_double(rep.frobenius_error) << ',' << format_double(pred_s) << ','
                << format_double(rep.spectral_error) << ',' << format_double(rep.relative_error) << ','
                << format_double(rep.retained_energy) << "\n";
            log << "compress: layer " << j.layer << " " << kind_name(j.kind) << " k=" << j.factors.rank
                << " predicted=" << format_double(pred_f) << " measured=" << format_double(rep.frobenius_error) << "\n";
        }
        const auto json_path = out / "compression.json";
        const auto csv_path = out / "compression.csv";
        io::write_file_atomic(json_path, std::string_view(json{{"reports", rows}}.dump(2) + "\n"));
        io::write_file_atomic(csv_path, std::string_view(csv.str()));
        manifest.output(json_path);
        manifest.output(csv_path);
        manifest.finish(out / "compress.manifest.json", out_stream);
    }
};

struct PplGridCmd {
    fs::path checkpoint;
    fs::path corpus;
    fs::path spectra;
    fs::path out;
    std::size_t seq_len = 64;
    std::vector<double> key_ratios{0.25, 0.5, 0.75, 1.0};
    std::vector<double> value_ratios{0.25, 0.5, 0.75, 1.0};
    int threads = 0;

    void bind(CLI::App& app) {
        app.add_option("--checkpoint", checkpoint, "Model checkpoint (.kvcm)");
        app.add_option("--corpus", corpus, "Token corpus (u16)");
        app.add_option("--seq-len", seq_len, "Sequence length the corpus is cut into");
        app.add_option("--spectra", spectra, "Directory of .kvcs spectra from analyze");
        app.add_option("--key-ratios", key_ratios, "Key retain ratios")->delimiter(',');
        app.add_option("--value-ratios", value_ratios, "Value retain ratios")->delimiter(',');
        app.add_option("--out", out, "Output CSV (k,v,ppl)");
        app.add_option("--threads", threads, "Worker threads (default KVCORE_THREADS or all cores)");
    }

    json config() const {
        return {{"checkpoint", checkpoint.generic_string()}, {"corpus", corpus.generic_string()},
                {"spectra", spectra.generic_string()}, {"seq_len", seq_len}, {"key_ratios", key_ratios},
                {"value_ratios", value_ratios}};
    }

    void validate() const {
        require(checkpoint, "--checkpoint");
        require(corpus, "--corpus");
        require(spectra, "--spectra");
        require(out, "--out");
        if (seq_len < 2) throw ArgumentError("--seq-len must be >= 2");
        check_ratios(key_ratios, "--key-ratios");
        check_ratios(value_ratios, "--value-ratios");
    }

    void execute(std::ostream& out_stream, std::ostream& log) const {
        const auto n_threads = resolve_threads(threads);
        Manifest manifest("pplgrid", config());
        const auto [cfg, weights] = load_model(checkpoint);
        manifest.input(checkpoint);
        const auto seqs = load_split_corpus(corpus, seq_len);
        manifest.input(corpus);
        const auto set = load_spectra(spectra, cfg, manifest);

        const double baseline = perplexity(cfg, weights, seqs);
        const auto grid = ppl_grid(cfg, weights, seqs, key_ratios, value_ratios, set, n_threads);
        log << "pplgrid: baseline ppl " << format_double(baseline) << ", " << grid.ppl.rows() * grid.ppl.cols()
            << " grid points\n";
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        io::write_file_atomic(out, std::string_view(format_ppl_grid_csv(grid)));
        manifest.output(out);
        manifest.summary() = {{"baseline_ppl", baseline}};
        manifest.finish(out.string() + ".manifest.json", out_stream);
    }
};

struct NdPplCmd {
    fs::path grid;
    fs::path out;

    void bind(CLI::App& app) {
        app.add_option("--grid", grid, "PPL grid CSV (k,v,ppl)");
        app.add_option("--out", out, "Output JSON");
    }

    json config() const { return {{"grid", grid.generic_string()}}; }

    void validate() const {
        require(grid, "--grid");
        require(out, "--out");
    }

    void execute(std::ostream& out_stream, std::ostream& log) const {
        Manifest manifest("ndppl", config());
        const auto report = nd_ppl(read_ppl_grid_csv(grid));
        manifest.input(grid);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        io::write_file_atomic(out, std::string_view(nd_ppl_to_json(report).dump(2) + "\n"));
        manifest.output(out);
        log << "ndppl: key " << (report.nd_ppl_key ? format_double(*report.nd_ppl_key) : "undefined") << ", value "
            << (report.nd_ppl_value ? format_double(*report.nd_ppl_value) : "undefined") << "\n";
        manifest.finish(out.string() + ".manifest.json", out_stream);
    }
};

template <typename Cmd>
struct Registered {
    Cmd cmd;
    CLI::App* app = nullptr;
    std::string config_path;

    void add(CLI::App& root, const char* name, const char* help) {
        app = root.add_subcommand(name, help);
        cmd.bind(*app);
        app->add_option("--config", config_path, "JSON config; command-line flags take precedence");
    }

    bool chosen() const { return app->parsed(); }

    void run(std::ostream& out, std::ostream& err) {
        apply_config(*app, config_path);
        cmd.validate();
        cmd.execute(out, err);
    }
};

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App root{"Streaming KV-cache rank analysis and low-rank compression", "kvcore"};
    root.require_subcommand(1);
    Registered<GenSynthetic> gen;
    Registered<Analyze> analyze;
    Registered<Compress> compress;
    Registered<PplGridCmd> pplgrid;
    Registered<NdPplCmd> ndppl;
    gen.add(root, "gen-synthetic", "Build a toy model, Markov corpus and key/value streams");
    analyze.add(root, "analyze", "Stream spectra and NER for every (layer, kind)");
    compress.add(root, "compress", "Build low-rank factors and report predicted vs measured error");
    pplgrid.add(root, "pplgrid", "Perplexity over a grid of key/value retain ratios");
    ndppl.add(root, "ndppl", "ND-PPL from a perplexity grid");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        root.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return root.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return root.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        root.exit(e, out, err);
        return kUsage;
    }

    try {
        if (gen.chosen()) gen.run(out, err);
        if (analyze.chosen()) analyze.run(out, err);
        if (compress.chosen()) compress.run(out, err);
        if (pplgrid.chosen()) pplgrid.run(out, err);
        if (ndppl.chosen()) ndppl.run(out, err);
        return kOk;
    } catch (const ArgumentError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        return kNumerical;
    } catch (const FormatError& e) {
        err << "input error: " << e.what() << "\n";
        return kInputFormat;
    } catch (const IoError& e) {
        err << "input error: " << e.what() << "\n";
        return kInputFormat;
    } catch (const ShapeError& e) {
        err << "input error: " << e.what() << "\n";
        return kInputFormat;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kInternal;
    }
}

} // namespace kvcore::cli
