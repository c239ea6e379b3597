#include "kvcore/analysis.hpp"
#include "kvcore/compression.hpp"
#include "kvcore/error.hpp"
#include "kvcore/linalg.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace kvcore;
using kvcore::testing::naive_matmul;
using kvcore::testing::projector;
using kvcore::testing::random_matrix;
using kvcore::testing::TempDir;

namespace {

SpectralResult spectrum_of(const DenseMatrix& k, std::uint32_t layer = 0, Kind kind = Kind::Key) {
    CovarianceAccumulator acc(k.cols());
    acc.ingest(k);
    return finalize(acc, layer, kind);
}

SpectralResult synthetic_spectrum(std::vector<double> sigma) {
    SpectralResult s;
    s.sigma = std::move(sigma);
    s.v = DenseMatrix::identity(s.sigma.size());
    s.numerical_rank = numerical_rank(s.sigma, kDefaultRankTol);
    return s;
}

double tail_from_oracle(const DenseMatrix& k, std::size_t keep) {
    const auto svd = svd_direct(k);
    double t = 0.0;
    for (std::size_t j = keep; j < svd.sigma.size(); ++j) t += svd.sigma[j] * svd.sigma[j];
    return std::sqrt(t);
}

// X with strongly anisotropic, correlated columns.
DenseMatrix anisotropic_inputs(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    auto g = random_matrix(rows, cols, seed);
    for (std::size_t c = 0; c < cols; ++c) {
        const double scale = std::pow(0.5, static_cast<double>(c));
        for (std::size_t r = 0; r < rows; ++r) g(r, c) *= scale;
    }
    return matmul(g, random_matrix(cols, cols, seed + 1));
}

} // namespace

TEST_CASE("RankSpec resolution") {
    CHECK(RankSpec::ratio(1.0).resolve(8) == 8);
    CHECK(RankSpec::ratio(0.25).resolve(16) == 4);
    CHECK(RankSpec::ratio(0.3).resolve(8) == 3);  // ceil(2.4)
    CHECK(RankSpec::ratio(0.1).resolve(30) == 3); // 0.1·30 rounds above 3 in binary
    CHECK(RankSpec::ratio(1e-6).resolve(8) == 1);
    CHECK(RankSpec::absolute(5).resolve(8) == 5);
    CHECK_THROWS_AS(RankSpec::ratio(0.0).resolve(8), ArgumentError);
    CHECK_THROWS_AS(RankSpec::ratio(1.5).resolve(8), ArgumentError);
    CHECK_THROWS_AS(RankSpec::absolute(0).resolve(8), ArgumentError);
    CHECK_THROWS_AS(RankSpec::absolute(9).resolve(8), ArgumentError);
}

TEST_CASE("full retain ratio reproduces W") {
    const auto x = random_matrix(40, 12, 1);
    const auto w = random_matrix(12, 6, 2);
    const auto f = build_factors(w, spectrum_of(matmul(x, w)), RankSpec::ratio(1.0));
    CHECK(f.rank == 6);
    CHECK(f.retain_ratio == 1.0);
    CHECK(frobenius_norm(f.effective_weight() - w) <= 1e-8 * frobenius_norm(w));
    const auto rep = measured_error(x, w, f);
    CHECK(rep.frobenius_error <= 1e-8 * rep.reference_norm);
}

TEST_CASE("exact at the true rank") {
    const auto x = random_matrix(30, 5, 3);
    const auto a = random_matrix(5, 1, 4);
    const auto b = random_matrix(1, 4, 5);
    const auto w = matmul(a, b);  // rank one
    const auto f = build_factors(w, spectrum_of(matmul(x, w)), RankSpec::absolute(1));
    const auto xw = matmul(x, w);
    CHECK(frobenius_norm(xw - matmul(matmul(x, f.down), f.up)) <= 1e-8 * frobenius_norm(xw));
}

TEST_CASE("measured error equals the spectral tail (Eckart–Young)") {
    const auto x = random_matrix(64, 16, 6);
    const auto w = random_matrix(16, 8, 7);
    const auto k = matmul(x, w);
    const auto spec = spectrum_of(k);
    const auto f = build_factors(w, spec, RankSpec::absolute(3));
    const auto rep = measured_error(x, w, f, &spec);
    const double oracle = tail_from_oracle(k, 3);
    CHECK(std::abs(rep.frobenius_error - oracle) <= 1e-8 * oracle);
    CHECK(std::abs(predicted_error(spec, 3, ErrorNorm::Frobenius) - oracle) <= 1e-8 * oracle);
    CHECK(rep.spectral_error == doctest::Approx(svd_direct(k).sigma[3]).epsilon(1e-8));
    CHECK(rep.relative_error == doctest::Approx(oracle / frobenius_norm(k)).epsilon(1e-8));
    CHECK(rep.retained_energy == doctest::Approx(1.0 - (oracle * oracle) / std::pow(frobenius_norm(k), 2)).epsilon(1e-8));
}

TEST_CASE("measured equals predicted for every k") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto x = random_matrix(128, 16, 100 + seed);
        const auto w = random_matrix(16, 8, 200 + seed);
        const auto spec = spectrum_of(matmul(x, w));
        for (std::size_t k = 1; k <= 8; ++k) {
            const auto f = build_factors(w, spec, RankSpec::absolute(k));
            const auto measured = measured_error(x, w, f).frobenius_error;
            const double predicted = predicted_error(spec, k, ErrorNorm::Frobenius);
            if (k == 8) {
                CHECK(measured <= 1e-8 * frobenius_norm(matmul(x, w)));
            } else {
                CHECK(std::abs(measured - predicted) <= 1e-7 * predicted);
            }
        }
    }
}

TEST_CASE("orthogonal W with identity inputs reduces to plain truncation") {
    const auto q = svd_direct(random_matrix(6, 6, 8)).u;  // orthogonal
    DenseMatrix w = q;
    const double scales[] = {5, 4, 3, 2, 1, 0.5};
    for (std::size_t c = 0; c < 6; ++c)
        for (std::size_t r = 0; r < 6; ++r) w(r, c) *= scales[c];
    const auto x = DenseMatrix::identity(6);
    const auto spec = spectrum_of(w);
    const auto sw = svd_direct(w).sigma;
    for (std::size_t k = 1; k < 6; ++k) {
        double t = 0.0;
        for (std::size_t j = k; j < 6; ++j) t += sw[j] * sw[j];
        const auto f = build_factors(w, spec, RankSpec::absolute(k));
        CHECK(measured_error(x, w, f).frobenius_error == doctest::Approx(std::sqrt(t)).epsilon(1e-9));
    }
}

TEST_CASE("predicted_error from a given spectrum") {
    const auto s = synthetic_spectrum({3.0, 2.0, 1.0});
    CHECK(predicted_error(s, 2, ErrorNorm::Spectral) == 1.0);
    CHECK(predicted_error(s, 2, ErrorNorm::Frobenius) == 1.0);
    CHECK(predicted_error(s, 1, ErrorNorm::Frobenius) == doctest::Approx(std::sqrt(5.0)));
    CHECK(predicted_error(s, 3, ErrorNorm::Spectral) == 0.0);
    CHECK(predicted_error(s, 3, ErrorNorm::Frobenius) == 0.0);
    CHECK_THROWS_AS(predicted_error(s, 0, ErrorNorm::Spectral), ArgumentError);
    CHECK_THROWS_AS(predicted_error(s, 4, ErrorNorm::Frobenius), ArgumentError);

    const auto zeros = synthetic_spectrum({2.0, 0.0, 0.0});
    CHECK(predicted_error(zeros, 1, ErrorNorm::Spectral) == 0.0);
}

TEST_CASE("predicted Frobenius error is non-increasing in k") {
    const auto spec = spectrum_of(random_matrix(50, 12, 9));
    for (std::size_t k = 1; k < 12; ++k)
        CHECK(predicted_error(spec, k + 1, ErrorNorm::Frobenius) <= predicted_error(spec, k, ErrorNorm::Frobenius));
}

TEST_CASE("factor invariants") {
    const auto x = random_matrix(50, 10, 11);
    const auto w = random_matrix(10, 7, 12);
    const auto spec = spectrum_of(matmul(x, w));
    for (std::size_t k = 1; k <= 7; ++k) {
        const auto f = build_factors(w, spec, RankSpec::absolute(k));
        CHECK(max_abs_diff(matmul_nt(f.up, f.up), DenseMatrix::identity(k)) <= 1e-8);
        CHECK(f.down.rows() == 10);
        CHECK(f.down.cols() == k);
        const auto p = projector(spec.v, k);
        CHECK(max_abs_diff(naive_matmul(p, p), p) <= 1e-9);
        // rank(down·up) <= k
        const auto sv = svd_direct(f.effective_weight()).sigma;
        for (std::size_t j = k; j < sv.size(); ++j) CHECK(sv[j] <= 1e-10 * sv[0]);
    }
    CHECK_THROWS_AS(build_factors(random_matrix(10, 6, 1), spec, RankSpec::absolute(2)), ShapeError);
}

TEST_CASE("measured_error error paths") {
    const auto w = random_matrix(4, 3, 1);
    const auto spec = spectrum_of(random_matrix(10, 3, 2));
    const auto f = build_factors(w, spec, RankSpec::absolute(2));
    CHECK_THROWS_AS(measured_error(DenseMatrix(0, 4), w, f), NumericalError);
    CHECK_THROWS_AS(measured_error(DenseMatrix(3, 5), w, f), ShapeError);
    CHECK_THROWS_AS(measured_error(DenseMatrix(3, 4), w, f), NumericalError);  // ‖XW‖ = 0
}

TEST_CASE("measured_error over an input stream") {
    TempDir dir("compression");
    auto x = random_matrix(300, 6, 21);
    for (double& v : x.data()) v = static_cast<double>(static_cast<float>(v));
    const auto w = random_matrix(6, 4, 22);
    const auto spec = spectrum_of(matmul(x, w));
    const auto f = build_factors(w, spec, RankSpec::absolute(2));
    StreamHeader h;
    h.feature_dim = 6;
    h.token_count = 300;
    write_stream(dir / "x.kvcr", h, x);
    auto stream = ActivationStream::open(dir / "x.kvcr");
    const auto streamed = measured_error(stream, w, f, &spec, 37);
    const auto direct = measured_error(x, w, f, &spec);
    CHECK(streamed.frobenius_error == doctest::Approx(direct.frobenius_error).epsilon(1e-12));
    CHECK(streamed.rows == 300);
}

TEST_CASE("optimality audit") {
    const auto x = random_matrix(64, 16, 31);
    const auto w = random_matrix(16, 8, 32);
    const auto spec = spectrum_of(matmul(x, w));
    const auto f = build_factors(w, spec, RankSpec::absolute(3));
    const auto rep = verify_optimality(x, w, f, 200, 1234);
    CHECK(rep.trials == 200);
    CHECK(rep.margins.size() == 200);
    CHECK(rep.min_margin >= -1e-9);
    CHECK(rep.baseline_margin >= -1e-9);

    // Self comparison.
    CHECK(std::abs(projection_error(x, w, spec.v.leading_columns(3)) - rep.factor_error) <= 1e-12 * rep.factor_error);
}

TEST_CASE("data-independent baseline loses on anisotropic inputs") {
    const auto x = anisotropic_inputs(128, 16, 41);
    const auto w = random_matrix(16, 8, 43);
    const auto spec = spectrum_of(matmul(x, w));
    const auto f = build_factors(w, spec, RankSpec::absolute(3));
    const auto rep = verify_optimality(x, w, f, 50, 7);
    CHECK(rep.baseline_margin > 0.0);
}

TEST_CASE("optimality audit flags non-optimal factors with seeds") {
    const auto x = anisotropic_inputs(64, 8, 51);
    const auto w = random_matrix(8, 6, 52);
    auto spec = spectrum_of(matmul(x, w));
    // Keep the weakest directions instead of the strongest.
    DenseMatrix reversed(6, 6);
    for (std::size_t c = 0; c < 6; ++c)
        for (std::size_t r = 0; r < 6; ++r) reversed(r, c) = spec.v(r, 5 - c);
    spec.v = reversed;
    const auto bad = build_factors(w, spec, RankSpec::absolute(2));
    try {
        (void)verify_optimality(x, w, bad, 20, 900);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("seeds 900") != std::string::npos);
    }
}

TEST_CASE("factor file round trip") {
    TempDir dir("compression");
    const auto spec = spectrum_of(random_matrix(30, 5, 61), 4, Kind::Value);
    const auto f = build_factors(random_matrix(9, 5, 62), spec, RankSpec::absolute(2));
    const auto p = dir / factor_filename(4, Kind::Value, 2);
    CHECK(p.filename() == "layer4_value_k2.kvcf");
    save_factors(p, f);
    CHECK(std::filesystem::file_size(p) == 28 + (9 * 2 + 2 * 5) * 4);
    const auto back = load_factors(p);
    CHECK(back.layer_index == 4);
    CHECK(back.kind == Kind::Value);
    CHECK(back.rank == 2);
    CHECK(max_abs_diff(back.down, f.down) <= 1e-6 * max_abs(f.down));
    CHECK(max_abs_diff(back.up, f.up) <= 1e-7);
    std::filesystem::resize_file(p, 40);
    CHECK_THROWS_AS(load_factors(p), FormatError);
}
