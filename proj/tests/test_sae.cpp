#include <doctest.h>

#include "insight/sae.hpp"
#include "test_util.hpp"

#include <cmath>
#include <set>

using namespace insight;
using namespace insight::testing;

namespace {

SaeModel random_model(Rng& rng, std::size_t d, std::size_t m, std::size_t k, std::vector<std::size_t> bounds) {
    SaeModel model;
    model.enc_weight = random_matrix(rng, static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m));
    model.enc_bias = random_vector(rng, static_cast<Eigen::Index>(m), 0.3);
    model.dec_weight = random_matrix(rng, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
    model.dec_bias = random_vector(rng, static_cast<Eigen::Index>(d), 0.3);
    model.shell_bounds = std::move(bounds);
    model.k = k;
    return model;
}

// Independent scalar evaluation of the shell-summed reconstruction loss for fixed codes z.
double scalar_matryoshka(const SaeModel& model, const Matrix& x, const Matrix& z) {
    double total = 0.0;
    for (const auto bound : model.shell_bounds) {
        double shell = 0.0;
        for (Eigen::Index b = 0; b < x.rows(); ++b) {
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                double recon = model.dec_bias(j);
                for (std::size_t i = 0; i < bound; ++i) {
                    recon += z(b, static_cast<Eigen::Index>(i)) * model.dec_weight(static_cast<Eigen::Index>(i), j);
                }
                shell += (recon - x(b, j)) * (recon - x(b, j));
            }
        }
        total += shell / static_cast<double>(x.rows());
    }
    return total;
}

Matrix scalar_pre(const SaeModel& model, const Matrix& x) {
    Matrix pre(x.rows(), model.enc_weight.cols());
    for (Eigen::Index b = 0; b < x.rows(); ++b) {
        for (Eigen::Index i = 0; i < pre.cols(); ++i) {
            double acc = model.enc_bias(i);
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                acc += model.enc_weight(j, i) * (x(b, j) - model.dec_bias(j));
            }
            pre(b, i) = acc;
        }
    }
    return pre;
}

double scalar_aux(const SaeModel& model, const Matrix& x, const Matrix& z, const Matrix& pre,
                  const std::vector<std::uint8_t>& dead) {
    const auto b = x.rows();
    const auto d = x.cols();
    const auto m = z.cols();
    Matrix r(b, d);
    for (Eigen::Index s = 0; s < b; ++s) {
        for (Eigen::Index j = 0; j < d; ++j) {
            double recon = model.dec_bias(j);
            for (Eigen::Index i = 0; i < m; ++i) {
                recon += z(s, i) * model.dec_weight(i, j);
            }
            r(s, j) = x(s, j) - recon;
        }
    }
    double numer = 0.0, denom = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
        double mean = 0.0;
        for (Eigen::Index s = 0; s < b; ++s) {
            mean += r(s, j);
        }
        mean /= static_cast<double>(b);
        for (Eigen::Index s = 0; s < b; ++s) {
            double dead_recon = 0.0;
            for (Eigen::Index i = 0; i < m; ++i) {
                if (dead[static_cast<std::size_t>(i)]) {
                    dead_recon += std::max(pre(s, i), 0.0) * model.dec_weight(i, j);
                }
            }
            numer += (r(s, j) - dead_recon) * (r(s, j) - dead_recon);
            denom += (r(s, j) - mean) * (r(s, j) - mean);
        }
    }
    return numer / denom;
}

Matrix row_matrix(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index r = 0;
    for (const auto& row : rows) {
        Eigen::Index c = 0;
        for (const double v : row) {
            m(r, c++) = v;
        }
        ++r;
    }
    return m;
}

} // namespace

TEST_CASE("shell bounds from ratios") {
    const auto defaults = shell_bounds_from_ratios(8192, kDefaultShellRatios);
    CHECK(defaults == std::vector<std::size_t>{66, 312, 804, 1787, 3753, 8192});
    CHECK(shell_bounds_from_ratios(32, kDefaultShellRatios) == std::vector<std::size_t>{1, 2, 4, 8, 16, 32});
    CHECK(shell_bounds_from_ratios(10, {1.0}) == std::vector<std::size_t>{10});
    CHECK_THROWS_AS(shell_bounds_from_ratios(3, kDefaultShellRatios), ConfigError);
}

TEST_CASE("encode_pre") {
    Rng rng(1);
    SUBCASE("identity embedding") {
        SaeModel model = SaeModel::initialize(3, 3, 1, {3}, 0);
        model.enc_weight = Matrix::Identity(3, 3);
        const Matrix x = random_matrix(rng, 2, 3);
        CHECK(encode_pre(model, x) == x);
    }
    SUBCASE("bias cancellation") {
        SaeModel model = SaeModel::initialize(3, 4, 1, {4}, 0);
        const Vector x = random_vector(rng, 3);
        model.dec_bias = x;
        model.enc_bias = random_vector(rng, 4);
        const Matrix out = encode_pre(model, x.transpose());
        CHECK((out.row(0).transpose() - model.enc_bias).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("random 2x3 -> 2x4 matches the scalar oracle") {
        const auto model = random_model(rng, 3, 4, 1, {4});
        const Matrix x = random_matrix(rng, 2, 3);
        CHECK((encode_pre(model, x) - scalar_pre(model, x)).cwiseAbs().maxCoeff() < 1e-6);
    }
    SUBCASE("shape mismatch") {
        const auto model = random_model(rng, 3, 4, 1, {4});
        CHECK_THROWS_AS(encode_pre(model, Matrix::Zero(2, 5)), DataError);
    }
}

TEST_CASE("batch_topk examples") {
    SUBCASE("B=1, k=2") {
        const auto codes = batch_topk(row_matrix({{3, 1, 2, -5}}), 2);
        CHECK(codes.patches[0] == std::vector<Activation>{{0, 3.0}, {2, 2.0}});
    }
    SUBCASE("batch-level budget lands in one sample") {
        const auto codes = batch_topk(row_matrix({{5, 4}, {1, 0}}), 1);
        CHECK(codes.patches[0] == std::vector<Activation>{{0, 5.0}, {1, 4.0}});
        CHECK(codes.patches[1].empty());
    }
    SUBCASE("ReLU after selection") {
        const auto codes = batch_topk(row_matrix({{-1, -2, 2, -3}}), 4);
        CHECK(codes.patches[0] == std::vector<Activation>{{2, 2.0}});
    }
    SUBCASE("ties broken by lower flat index") {
        const auto sel = select_batch_topk(row_matrix({{1, 2, 2}, {2, 0, 0}}), 1);
        CHECK(sel.kept(0, 1));
        CHECK(sel.kept(0, 2));
        CHECK_FALSE(sel.kept(1, 0));
        CHECK(sel.kth_value == 2.0);
    }
}

TEST_CASE("batch_topk invariant over random batches") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const auto b = static_cast<Eigen::Index>(1 + rng.below(6));
        const auto m = static_cast<Eigen::Index>(1 + rng.below(12));
        const auto k = 1 + rng.below(static_cast<std::uint64_t>(m));
        const Matrix pre = random_matrix(rng, b, m);
        const auto sel = select_batch_topk(pre, k);
        CHECK(sel.kept_count() == static_cast<std::size_t>(b) * k);
        CHECK(ConceptCodes::from_dense(apply_selection(pre, sel)).nonzero_count() <= static_cast<std::size_t>(b) * k);
    }
}

TEST_CASE("decode") {
    Rng rng(3);
    auto model = random_model(rng, 3, 4, 1, {2, 4});
    SUBCASE("empty codes give the decoder bias") {
        ConceptCodes codes{4, {{}, {}}};
        const Matrix out = decode(model, codes);
        CHECK(out.row(0).transpose() == model.dec_bias);
        CHECK(out.row(1).transpose() == model.dec_bias);
    }
    SUBCASE("single unit activation") {
        model.dec_weight.row(0) << 1, 0, 0;
        ConceptCodes codes{4, {{{0, 1.0}}}};
        const Vector expected = model.dec_bias + Vector::Unit(3, 0);
        CHECK((decode(model, codes).row(0).transpose() - expected).cwiseAbs().maxCoeff() < 1e-15);
    }
    SUBCASE("prefix masks everything above the bound") {
        ConceptCodes codes{4, {{{2, 1.5}, {3, 0.5}}}};
        CHECK(decode(model, codes, 2).row(0).transpose() == model.dec_bias);
    }
    SUBCASE("last shell equals full decode and dense agrees with sparse") {
        const Matrix z = random_matrix(rng, 5, 4).cwiseMax(0.0);
        const auto codes = ConceptCodes::from_dense(z);
        CHECK((decode(model, codes, 4) - decode(model, codes)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((decode_dense(model, z, 2) - decode(model, codes, 2)).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("invalid prefix bound") {
        CHECK_THROWS_WITH_AS(decode(model, ConceptCodes{4, {{}}}, 3), doctest::Contains("not a shell bound"), DataError);
    }
}

TEST_CASE("matryoshka_loss") {
    Rng rng(4);
    SUBCASE("perfect reconstruction at every shell gives zero") {
        auto model = SaeModel::initialize(3, 4, 1, {2, 4}, 1);
        model.dec_bias = random_vector(rng, 3);
        model.enc_bias = Vector::Constant(4, -100.0);
        const Matrix x = model.dec_bias.transpose().replicate(3, 1);
        CHECK(matryoshka_loss(model, x).rec == 0.0);
    }
    SUBCASE("single shell is the plain squared error") {
        const auto model = random_model(rng, 3, 4, 2, {4});
        const Matrix x = random_matrix(rng, 3, 3);
        const Matrix pre = encode_pre(model, x);
        const Matrix z = apply_selection(pre, select_batch_topk(pre, 2));
        const double plain = (decode_dense(model, z) - x).rowwise().squaredNorm().mean();
        CHECK(matryoshka_loss(model, x).rec == doctest::Approx(plain).epsilon(1e-12));
    }
    SUBCASE("tiny instance matches the scalar shell oracle") {
        const auto model = random_model(rng, 3, 4, 2, {2, 4});
        const Matrix x = random_matrix(rng, 2, 3);
        const Matrix pre = scalar_pre(model, x);
        const auto sel = select_batch_topk(pre, 2);
        const Matrix z = apply_selection(pre, sel);
        CHECK(std::abs(matryoshka_loss(model, x).rec - scalar_matryoshka(model, x, z)) < 1e-9);
    }
}

TEST_CASE("aux_loss") {
    Rng rng(5);
    SUBCASE("no dead concepts") {
        const auto model = random_model(rng, 3, 4, 1, {4});
        DeadTracker tracker(4, 100);
        CHECK(aux_loss(model, random_matrix(rng, 3, 3), tracker) == 0.0);
    }
    SUBCASE("dead concept reproducing the residual exactly") {
        SaeModel model = SaeModel::initialize(2, 2, 1, {2}, 0);
        model.enc_weight = Matrix::Identity(2, 2);
        model.dec_weight = Matrix::Identity(2, 2);
        DeadTracker tracker(2, 10);
        tracker.set_counter(1, 10);
        const Matrix x = row_matrix({{5, 1}, {6, 2}});
        CHECK(aux_loss(model, x, tracker) == doctest::Approx(0.0));
    }
    SUBCASE("tiny random instance matches the scalar oracle") {
        const auto model = random_model(rng, 3, 5, 1, {2, 5});
        const Matrix x = random_matrix(rng, 4, 3);
        const std::vector<std::uint8_t> dead{0, 1, 0, 1, 1};
        const Matrix pre = scalar_pre(model, x);
        const auto sel = select_batch_topk(pre, 1);
        const double got = aux_loss(model, x, sel, dead).aux;
        CHECK(std::abs(got - scalar_aux(model, x, apply_selection(pre, sel), pre, dead)) < 1e-9);
    }
    SUBCASE("constant residual is a degenerate batch") {
        SaeModel model = SaeModel::initialize(2, 2, 1, {2}, 0);
        model.enc_bias = Vector::Constant(2, -50.0);
        DeadTracker tracker(2, 0);
        CHECK(aux_loss(model, row_matrix({{1, 1}, {1, 1}}), tracker) == 0.0);
    }
}

TEST_CASE("analytic SAE gradients match central finite differences with the mask held fixed") {
    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        auto model = random_model(rng, 4, 8, 2, {2, 5, 8});
        const Matrix x = random_matrix(rng, 3, 4);
        const auto sel = select_batch_topk(encode_pre(model, x), model.k);
        std::vector<std::uint8_t> dead(8, 0);
        dead[1] = dead[4] = dead[6] = 1;
        const double aux_weight = 0.5;
        const auto analytic = sae_objective(model, x, sel, dead, 1.0, aux_weight);
        auto loss = [&] {
            const auto r = sae_objective(model, x, sel, dead, 1.0, aux_weight);
            return r.rec + aux_weight * r.aux;
        };
        CHECK(max_fd_error(model.enc_weight, analytic.grads.enc_weight, loss) < 1e-4);
        CHECK(max_fd_error(model.enc_bias, analytic.grads.enc_bias, loss) < 1e-4);
        CHECK(max_fd_error(model.dec_weight, analytic.grads.dec_weight, loss) < 1e-4);
        CHECK(max_fd_error(model.dec_bias, analytic.grads.dec_bias, loss) < 1e-4);
    }
}

TEST_CASE("fve") {
    Rng rng(7);
    const Matrix x = random_matrix(rng, 6, 3);
    CHECK(fve(x, x) == 1.0);
    const Matrix mean = x.colwise().mean().replicate(6, 1);
    CHECK(fve(x, mean) == doctest::Approx(0.0).scale(1.0));
    CHECK_THROWS_AS(fve(x.topRows(1), x.topRows(1)), DataError);
    CHECK_THROWS_AS(fve(Matrix::Ones(3, 2), Matrix::Ones(3, 2)), NumericError);
}

TEST_CASE("infer_codes") {
    Rng rng(8);
    auto model = random_model(rng, 3, 6, 2, {6});
    const Matrix x = random_matrix(rng, 4, 3);
    const Matrix pre = encode_pre(model, x);
    CHECK(infer_codes(model, x, pre.maxCoeff() + 1.0).nonzero_count() == 0);
    CHECK(infer_codes(model, x, 0.0).to_dense() == pre.cwiseMax(0.0));
    CHECK_THROWS_WITH_AS(infer_codes(model, x), doctest::Contains("untrained"), DataError);
    model.inference_threshold = 0.0;
    CHECK(infer_codes(model, x).to_dense() == pre.cwiseMax(0.0));
}

TEST_CASE("dead tracker counts samples since last firing") {
    DeadTracker tracker(3, 4);
    tracker.update(row_matrix({{1, 0, 0}, {0, 0, 0}}));
    CHECK(tracker.samples_since_fire() == std::vector<std::uint64_t>{0, 2, 2});
    tracker.update(row_matrix({{0, 0, 2}, {0, 0, 0}}));
    CHECK(tracker.samples_since_fire() == std::vector<std::uint64_t>{2, 4, 0});
    CHECK(tracker.dead_mask() == std::vector<std::uint8_t>{0, 1, 0});
    CHECK(tracker.dead_count() == 1);
}

namespace {

Matrix planted_data(Rng& rng, std::size_t samples, std::size_t d, std::size_t atoms, std::size_t active, Matrix& dict) {
    dict = random_matrix(rng, static_cast<Eigen::Index>(atoms), static_cast<Eigen::Index>(d));
    dict.rowwise().normalize();
    Matrix x = Matrix::Zero(static_cast<Eigen::Index>(samples), static_cast<Eigen::Index>(d));
    for (std::size_t s = 0; s < samples; ++s) {
        std::set<std::uint64_t> chosen;
        while (chosen.size() < active) {
            chosen.insert(rng.below(atoms));
        }
        for (const auto a : chosen) {
            x.row(static_cast<Eigen::Index>(s)) += rng.uniform(0.5, 1.5) * dict.row(static_cast<Eigen::Index>(a));
        }
    }
    return x;
}

} // namespace

TEST_CASE("train_sae") {
    Rng rng(9);
    Matrix dict;
    const Matrix x = planted_data(rng, 2000, 8, 6, 2, dict);
    SaeTrainConfig config;
    config.m = 12;
    config.k = 2;
    config.lr = 3e-3;
    config.batch_patches = 128;
    config.epochs = 2;
    config.seed = 42;

    SUBCASE("zero epochs returns the initialization") {
        auto zero = config;
        zero.epochs = 0;
        const auto result = train_sae(x, zero);
        Rng init(42);
        const auto expected = SaeModel::initialize(8, 12, 2, shell_bounds_from_ratios(12, kDefaultShellRatios), init.next_u64());
        CHECK(result.model.dec_weight == expected.dec_weight);
        CHECK(result.model.enc_weight == expected.enc_weight);
        CHECK_FALSE(result.model.inference_threshold.has_value());
    }
    SUBCASE("same seed gives bit-identical parameters") {
        const auto a = train_sae(x, config);
        const auto b = train_sae(x, config);
        CHECK(a.model.enc_weight == b.model.enc_weight);
        CHECK(a.model.dec_weight == b.model.dec_weight);
        CHECK(a.model.dec_bias == b.model.dec_bias);
        CHECK(a.model.inference_threshold == b.model.inference_threshold);
    }
    SUBCASE("unit-norm dictionary and a finite log after training") {
        const auto result = train_sae(x, config);
        CHECK((result.model.dec_weight.rowwise().norm().array() - 1.0).abs().maxCoeff() < 1e-5);
        CHECK(result.log.size() == 2 * ((2000 - 200) / 128));
        CHECK(result.holdout.rows() == 200);
        CHECK(std::isfinite(result.validation_fve));
        CHECK(result.model.inference_threshold.has_value());
    }
    SUBCASE("fewer patches than a batch") {
        auto big = config;
        big.batch_patches = 5000;
        CHECK_THROWS_AS(train_sae(x, big), DataError);
    }
}

TEST_CASE("checkpoint round trip") {
    TempDir tmp("sae");
    Rng rng(10);
    auto model = SaeModel::initialize(4, 8, 2, {2, 8}, 3);
    model.inference_threshold = 0.25;
    save_sae(tmp.path(), model);
    const auto back = load_sae(tmp.path());
    CHECK((back.dec_weight - model.dec_weight).cwiseAbs().maxCoeff() < 1e-7);
    CHECK(back.shell_bounds == model.shell_bounds);
    CHECK(back.k == 2);
    CHECK(back.inference_threshold == 0.25);
    CHECK_THROWS_AS(load_sae(tmp / "nothing"), DataError);
}
