#pragma once

#include "kvcore/analysis.hpp"
#include "kvcore/stream.hpp"
#include "kvcore/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kvcore {

/// exp(−Σ p_i ln p_i) with p_i = σ_i / Σ_{j<r} σ_j over the first `rank_r`
/// values. Zero p_i contribute 0. The result is clamped to [1, rank_r] to
/// absorb round-off at the extremes.
double effective_rank(std::span<const double> sigma, std::size_t rank_r);

struct NerReport {
    std::uint32_t layer_index = 0;
    Kind kind = Kind::Key;
    double erank = 0.0;
    std::size_t rank = 0;
    double ner = 0.0;  // erank / rank, in [1/rank, 1]
    std::vector<double> sigma;
};

/// Normalized effective rank over the spectrum's numerical rank.
NerReport ner(const SpectralResult& spectrum);

/// Array of {layer, kind, erank, rank, ner, sigma}; `sigma_top` keeps only the
/// leading values.
nlohmann::json ner_reports_to_json(std::span<const NerReport> reports, std::optional<std::size_t> sigma_top = {});
/// `layer,kind,ner,erank,rank` with one line per report.
std::string ner_reports_to_csv(std::span<const NerReport> reports);

/// PPL(k, v) over ascending key and value retain ratios. ppl(i, j) belongs
/// to (key_ratios[i], value_ratios[j]).
struct PplGrid {
    std::vector<double> key_ratios;
    std::vector<double> value_ratios;
    DenseMatrix ppl;

    /// Throws ArgumentError on unsorted/out-of-range ratios, shape mismatch or
    /// non-positive / non-finite perplexities.
    void validate() const;
};

struct NdPplReport {
    std::optional<double> nd_ppl_key;
    std::optional<double> nd_ppl_value;
    std::size_t key_pairs = 0;    // |K|(|K|−1)/2
    std::size_t value_pairs = 0;  // |V|(|V|−1)/2
    std::string key_error;        // set when the key side is undefined
    std::string value_error;
};

/// For each fixed value ratio, mean over key pairs k_i > k_j of
/// (PPL(k_j, v) − PPL(k_i, v)) / PPL(k_i, v); then mean over value ratios.
/// Needs at least two key ratios.
double nd_ppl_key(const PplGrid& grid);
/// Same with the roles of key and value ratios swapped.
double nd_ppl_value(const PplGrid& grid);
/// Both sides; a side with fewer than two ratios is reported as an error
/// string instead of failing the whole report.
NdPplReport nd_ppl(const PplGrid& grid);

nlohmann::json nd_ppl_to_json(const NdPplReport& report);

/// CSV with header `k,v,ppl`; the full cartesian product is required.
PplGrid parse_ppl_grid_csv(std::string_view text, const std::string& source);
PplGrid read_ppl_grid_csv(const std::filesystem::path& path);
/// Rows in ascending (k, v) order, shortest round-trip decimal formatting.
std::string format_ppl_grid_csv(const PplGrid& grid);

/// Shortest decimal string that round-trips to `x`.
std::string format_double(double x);

} // namespace kvcore
