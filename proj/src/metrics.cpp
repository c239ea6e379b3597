#include "kvcore/metrics.hpp"

#include "kvcore/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace kvcore {

double effective_rank(std::span<const double> sigma, std::size_t rank_r) {
    if (rank_r == 0) throw ArgumentError("effective_rank: rank must be >= 1");
    if (rank_r > sigma.size()) {
        throw ArgumentError("effective_rank: rank " + std::to_string(rank_r) + " exceeds spectrum length " +
                            std::to_string(sigma.size()));
    }
    if (!(sigma[0] > 0.0)) throw NumericalError("effective_rank: zero spectrum, effective rank undefined");
    double total = 0.0;
    for (std::size_t i = 0; i < rank_r; ++i) {
        if (sigma[i] < 0.0 || !std::isfinite(sigma[i])) throw ArgumentError("effective_rank: singular values must be finite and non-negative");
        total += sigma[i];
    }
    double entropy = 0.0;
    for (std::size_t i = 0; i < rank_r; ++i) {
        const double p = sigma[i] / total;
        if (p > 0.0) entropy -= p * std::log(p);
    }
    return std::clamp(std::exp(entropy), 1.0, static_cast<double>(rank_r));
}

NerReport ner(const SpectralResult& spectrum) {
    if (spectrum.numerical_rank == 0) {
        throw NumericalError("ner: layer " + std::to_string(spectrum.layer_index) + " " +
                             std::string(kind_name(spectrum.kind)) + " has a zero spectrum");
    }
    NerReport r;
    r.layer_index = spectrum.layer_index;
    r.kind = spectrum.kind;
    r.rank = spectrum.numerical_rank;
    r.erank = effective_rank(spectrum.sigma, r.rank);
    r.ner = r.erank / static_cast<double>(r.rank);
    r.sigma = spectrum.sigma;
    return r;
}

nlohmann::json ner_reports_to_json(std::span<const NerReport> reports, std::optional<std::size_t> sigma_top) {
    auto arr = nlohmann::json::array();
    for (const auto& r : reports) {
        const std::size_t n = sigma_top ? std::min(*sigma_top, r.sigma.size()) : r.sigma.size();
        arr.push_back({{"layer", r.layer_index},
                       {"kind", std::string(kind_name(r.kind))},
                       {"erank", r.erank},
                       {"rank", r.rank},
                       {"ner", r.ner},
                       {"sigma", std::vector<double>(r.sigma.begin(), r.sigma.begin() + static_cast<std::ptrdiff_t>(n))}});
    }
    return arr;
}

std::string ner_reports_to_csv(std::span<const NerReport> reports) {
    std::string out = "layer,kind,ner,erank,rank\n";
    for (const auto& r : reports) {
        out += std::to_string(r.layer_index) + "," + std::string(kind_name(r.kind)) + "," + format_double(r.ner) + "," +
               format_double(r.erank) + "," + std::to_string(r.rank) + "\n";
    }
    return out;
}

void PplGrid::validate() const {
    auto check_ratios = [](const std::vector<double>& ratios, const char* side) {
        for (std::size_t i = 0; i < ratios.size(); ++i) {
            if (!(ratios[i] > 0.0 && ratios[i] <= 1.0)) {
                throw ArgumentError(std::string(side) + " ratio " + format_double(ratios[i]) + " outside (0, 1]");
            }
            if (i > 0 && !(ratios[i] > ratios[i - 1])) {
                throw ArgumentError(std::string(side) + " ratios must be strictly increasing");
            }
        }
    };
    check_ratios(key_ratios, "key");
    check_ratios(value_ratios, "value");
    if (ppl.rows() != key_ratios.size() || ppl.cols() != value_ratios.size()) {
        throw ShapeError("PplGrid: ppl is " + ppl.shape_string() + ", expected " + std::to_string(key_ratios.size()) +
                         "x" + std::to_string(value_ratios.size()));
    }
    for (std::size_t i = 0; i < ppl.rows(); ++i)
        for (std::size_t j = 0; j < ppl.cols(); ++j)
            if (!(std::isfinite(ppl(i, j)) && ppl(i, j) > 0.0)) {
                throw ArgumentError("PplGrid: PPL(" + format_double(key_ratios[i]) + ", " +
                                    format_double(value_ratios[j]) + ") = " + format_double(ppl(i, j)) +
                                    " is not positive and finite");
            }
}

namespace {

// Mean normalized pairwise difference along one axis; `at(fixed, idx)` reads
// the grid with the varying ratio at position idx.
template <typename At>
double nd_ppl_side(std::size_t n_vary, std::size_t n_fixed, At at) {
    double outer = 0.0;
    for (std::size_t f = 0; f < n_fixed; ++f) {
        double inner = 0.0;
        std::size_t pairs = 0;
        for (std::size_t hi = 0; hi < n_vary; ++hi) {
            for (std::size_t lo = 0; lo < hi; ++lo) {
                // Ratios ascend, so index hi retains more rank than lo.
                inner += (at(f, lo) - at(f, hi)) / at(f, hi);
                ++pairs;
            }
        }
        outer += inner / static_cast<double>(pairs);
    }
    return outer / static_cast<double>(n_fixed);
}

} // namespace

double nd_ppl_key(const PplGrid& grid) {
    grid.validate();
    if (grid.key_ratios.size() < 2) throw ArgumentError("ND-PPL_K needs at least two key ratios");
    return nd_ppl_side(grid.key_ratios.size(), grid.value_ratios.size(),
                       [&](std::size_t v, std::size_t k) { return grid.ppl(k, v); });
}

double nd_ppl_value(const PplGrid& grid) {
    grid.validate();
    if (grid.value_ratios.size() < 2) throw ArgumentError("ND-PPL_V needs at least two value ratios");
    return nd_ppl_side(grid.value_ratios.size(), grid.key_ratios.size(),
                       [&](std::size_t k, std::size_t v) { return grid.ppl(k, v); });
}

NdPplReport nd_ppl(const PplGrid& grid) {
    grid.validate();
    NdPplReport r;
    const auto nk = grid.key_ratios.size();
    const auto nv = grid.value_ratios.size();
    r.key_pairs = nk * (nk - (nk > 0 ? 1 : 0)) / 2;
    r.value_pairs = nv * (nv - (nv > 0 ? 1 : 0)) / 2;
    try {
        r.nd_ppl_key = nd_ppl_key(grid);
    } catch (const ArgumentError& e) {
        r.key_error = e.what();
    }
    try {
        r.nd_ppl_value = nd_ppl_value(grid);
    } catch (const ArgumentError& e) {
        r.value_error = e.what();
    }
    return r;
}

nlohmann::json nd_ppl_to_json(const NdPplReport& r) {
    nlohmann::json j;
    j["nd_ppl_key"] = r.nd_ppl_key ? nlohmann::json(*r.nd_ppl_key) : nlohmann::json(nullptr);
    j["nd_ppl_value"] = r.nd_ppl_value ? nlohmann::json(*r.nd_ppl_value) : nlohmann::json(nullptr);
    j["key_pairs"] = r.key_pairs;
    j["value_pairs"] = r.value_pairs;
    if (!r.key_error.empty()) j["key_error"] = r.key_error;
    if (!r.value_error.empty()) j["value_error"] = r.value_error;
    return j;
}

std::string format_double(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

double parse_number(std::string_view field, const std::string& where) {
    field = trim(field);
    double v = 0.0;
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
        throw FormatError(where + ": cannot parse number \"" + std::string(field) + "\"");
    }
    return v;
}

} // namespace

PplGrid parse_ppl_grid_csv(std::string_view text, const std::string& source) {
    std::map<std::pair<double, double>, double> points;
    std::set<double> ks;
    std::set<double> vs;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        auto line = trim(text.substr(0, nl));
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        if (!header_seen) {
            if (line != "k,v,ppl") throw FormatError(where + ": expected header \"k,v,ppl\"");
            header_seen = true;
            continue;
        }
        std::vector<std::string_view> fields;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        if (fields.size() != 3) throw FormatError(where + ": expected 3 fields, got " + std::to_string(fields.size()));
        const double k = parse_number(fields[0], where);
        const double v = parse_number(fields[1], where);
        const double p = parse_number(fields[2], where);
        if (!points.emplace(std::make_pair(k, v), p).second) {
            throw FormatError(where + ": duplicate grid point (" + format_double(k) + ", " + format_double(v) + ")");
        }
        ks.insert(k);
        vs.insert(v);
    }
    if (!header_seen) throw FormatError(source + ": empty grid file");

    PplGrid grid;
    grid.key_ratios.assign(ks.begin(), ks.end());
    grid.value_ratios.assign(vs.begin(), vs.end());
    grid.ppl = DenseMatrix(ks.size(), vs.size());
    std::vector<std::string> missing;
    for (std::size_t i = 0; i < grid.key_ratios.size(); ++i) {
        for (std::size_t j = 0; j < grid.value_ratios.size(); ++j) {
            const auto it = points.find({grid.key_ratios[i], grid.value_ratios[j]});
            if (it == points.end()) {
                missing.push_back("(" + format_double(grid.key_ratios[i]) + ", " + format_double(grid.value_ratios[j]) + ")");
            } else {
                grid.ppl(i, j) = it->second;
            }
        }
    }
    if (!missing.empty()) {
        std::string msg = source + ": grid is not a full cartesian product; missing";
        for (const auto& m : missing) msg += " " + m;
        throw FormatError(msg);
    }
    try {
        grid.validate();
    } catch (const Error& e) {
        throw FormatError(source + ": " + e.what());
    }
    return grid;
}

PplGrid read_ppl_grid_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_ppl_grid_csv(ss.str(), path.string());
}

std::string format_ppl_grid_csv(const PplGrid& grid) {
    grid.validate();
    std::string out = "k,v,ppl\n";
    for (std::size_t i = 0; i < grid.key_ratios.size(); ++i)
        for (std::size_t j = 0; j < grid.value_ratios.size(); ++j)
            out += format_double(grid.key_ratios[i]) + "," + format_double(grid.value_ratios[j]) + "," +
                   format_double(grid.ppl(i, j)) + "\n";
    return out;
}

} // namespace kvcore
