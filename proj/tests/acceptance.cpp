// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the number of failures.

#include "insight/cli.hpp"
#include "insight/concept_naming.hpp"
#include "insight/downstream.hpp"
#include "insight/family_graph.hpp"
#include "insight/guided_pooling.hpp"
#include "insight/interp_metrics.hpp"
#include "insight/sae.hpp"
#include "test_util.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace insight;
using namespace insight::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            if (pass) {
                detail = what;
            }
            pass = false;
        }
    }
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& body, double budget_s) {
    const auto start = Clock::now();
    Outcome out;
    try {
        out = body();
    } catch (const std::exception& e) {
        out.pass = false;
        out.detail = std::string("exception: ") + e.what();
    }
    const double seconds = std::chrono::duration<double>(Clock::now() - start).count();
    if (out.pass && seconds >= budget_s) {
        out.pass = false;
        out.detail = "over time budget";
    }
    char timing[64];
    std::snprintf(timing, sizeof timing, "%.2fs / %.0fs", seconds, budget_s);
    std::cout << (out.pass ? "PASS " : "FAIL ") << name << " [" << timing << "] " << out.detail << std::endl;
    failures += out.pass ? 0 : 1;
}

std::string num(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

SaeModel random_sae(Rng& rng, Eigen::Index d, Eigen::Index m, std::size_t k, std::vector<std::size_t> bounds) {
    SaeModel model;
    model.enc_weight = random_matrix(rng, d, m);
    model.enc_bias = random_vector(rng, m, 0.3);
    model.dec_weight = random_matrix(rng, m, d);
    model.dec_bias = random_vector(rng, d, 0.3);
    model.shell_bounds = std::move(bounds);
    model.k = k;
    return model;
}

// --- gradients --------------------------------------------------------------

Outcome gradients() {
    Outcome out;
    Rng rng(101);
    double worst[4] = {0, 0, 0, 0};
    for (int trial = 0; trial < 8; ++trial) {
        {
            const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng.below(7));
            const Eigen::Index dp = 1 + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(d)));
            const PatchGrid grid{random_matrix(rng, 4, d), 2, 2};
            const Matrix target = random_matrix(rng, 4, 4, 0.5);
            AffinityHead head{random_matrix(rng, 9 * d, dp), random_vector(rng, dp)};
            HeadGradients g;
            affinity_loss_and_gradient(grid, target, head, kDefaultAffinityGamma, g);
            auto loss = [&] { return bce_affinity_loss(predict_affinity(grid, head), target); };
            worst[0] = std::max({worst[0], max_fd_error(head.kernel, g.kernel, loss),
                                 max_fd_error(head.bias, g.bias, loss)});
        }
        const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng.below(7));
        const Eigen::Index m = 4 + static_cast<Eigen::Index>(rng.below(13));
        const Eigen::Index b = 2 + static_cast<Eigen::Index>(rng.below(3));
        const std::size_t k = 1 + rng.below(3);
        auto model = random_sae(rng, d, m, k, shell_bounds_from_ratios(static_cast<std::size_t>(m), {0.25, 0.5, 1.0}));
        const Matrix x = random_matrix(rng, b, d);
        const auto sel = select_batch_topk(encode_pre(model, x), k);
        const auto check_all = [&](const SaeGradients& g, const std::function<double()>& loss) {
            return std::max({max_fd_error(model.enc_weight, g.enc_weight, loss),
                             max_fd_error(model.enc_bias, g.enc_bias, loss),
                             max_fd_error(model.dec_weight, g.dec_weight, loss),
                             max_fd_error(model.dec_bias, g.dec_bias, loss)});
        };
        {
            const auto r = matryoshka_loss(model, x, sel);
            worst[1] = std::max(worst[1], check_all(r.grads, [&] { return matryoshka_loss(model, x, sel).rec; }));
        }
        {
            std::vector<std::uint8_t> dead(static_cast<std::size_t>(m), 0);
            for (auto& v : dead) {
                v = rng.uniform() < 0.4 ? 1 : 0;
            }
            dead[0] = 1;
            const auto r = aux_loss(model, x, sel, dead);
            worst[2] = std::max(worst[2], check_all(r.grads, [&] { return aux_loss(model, x, sel, dead).aux; }));
        }
        {
            const Eigen::Index f = 2 + static_cast<Eigen::Index>(rng.below(7));
            const Eigen::Index c = 2 + static_cast<Eigen::Index>(rng.below(3));
            LinearProbe probe;
            probe.weights = random_matrix(rng, f, c);
            for (Eigen::Index i = 0; i < probe.weights.size(); ++i) {
                auto& w = probe.weights.data()[i];
                w = std::copysign(std::abs(w) + 0.05, w);
            }
            probe.bias = random_vector(rng, c);
            probe.l1 = 0.2;
            const Matrix feats = random_matrix(rng, 4, f);
            std::vector<std::size_t> y(4);
            for (auto& v : y) {
                v = rng.below(static_cast<std::uint64_t>(c));
            }
            const auto r = probe_loss_and_gradient(probe, feats, y);
            auto loss = [&] { return probe_loss_and_gradient(probe, feats, y).loss; };
            worst[3] = std::max({worst[3], max_fd_error(probe.weights, r.grad_weights, loss),
                                 max_fd_error(probe.bias, r.grad_bias, loss)});
        }
    }
    const char* names[4] = {"affinity", "matryoshka", "aux", "probe"};
    for (int i = 0; i < 4; ++i) {
        out.require(worst[i] < 1e-4, std::string(names[i]) + " max rel err " + num(worst[i]));
    }
    if (out.pass) {
        out.detail = "max rel err affinity " + num(worst[0]) + ", matryoshka " + num(worst[1]) + ", aux " +
                     num(worst[2]) + ", probe " + num(worst[3]);
    }
    return out;
}

// --- BatchTopK --------------------------------------------------------------

Outcome batch_topk_invariant() {
    Outcome out;
    Rng rng(202);
    for (int trial = 0; trial < 1000 && out.pass; ++trial) {
        const auto b = static_cast<Eigen::Index>(1 + rng.below(64));
        const auto m = static_cast<Eigen::Index>(1 + rng.below(64));
        const std::size_t k = 1 + rng.below(static_cast<std::uint64_t>(m));
        const Matrix pre = random_matrix(rng, b, m);
        const auto sel = select_batch_topk(pre, k);
        const std::size_t budget = static_cast<std::size_t>(b) * k;
        out.require(sel.kept_count() == budget, "kept " + std::to_string(sel.kept_count()) + " != B*k");
        const Matrix z = apply_selection(pre, sel);
        out.require(static_cast<std::size_t>((z.array() > 0.0).count()) <= budget, "strict positives exceed B*k");
        out.require(batch_topk(pre, k).nonzero_count() <= budget, "codes exceed B*k");
        // Every survivor dominates every dropped entry.
        double min_kept = std::numeric_limits<double>::infinity();
        double max_dropped = -std::numeric_limits<double>::infinity();
        for (Eigen::Index r = 0; r < b; ++r) {
            for (Eigen::Index c = 0; c < m; ++c) {
                if (sel.kept(r, c)) {
                    min_kept = std::min(min_kept, pre(r, c));
                } else {
                    max_dropped = std::max(max_dropped, pre(r, c));
                }
            }
        }
        out.require(min_kept >= max_dropped, "selection is not the global top B*k");
    }
    if (out.pass) {
        out.detail = "1000 batches, exactly B*k selected, strict positives <= B*k";
    }
    return out;
}

// --- planted dictionary -----------------------------------------------------

struct PlantedRun {
    Matrix truth;
    SaeTrainResult result;
};

const PlantedRun& planted_run() {
    static const PlantedRun run = [] {
        Rng rng(303);
        const Eigen::Index d = 32;
        const std::size_t atoms = 16;
        PlantedRun r;
        r.truth = random_matrix(rng, static_cast<Eigen::Index>(atoms), d);
        r.truth.rowwise().normalize();
        Matrix x = Matrix::Zero(50000, d);
        for (Eigen::Index s = 0; s < x.rows(); ++s) {
            std::set<std::uint64_t> chosen;
            while (chosen.size() < 3) {
                chosen.insert(rng.below(atoms));
            }
            for (const auto a : chosen) {
                x.row(s) += rng.uniform(0.5, 1.5) * r.truth.row(static_cast<Eigen::Index>(a));
            }
        }
        SaeTrainConfig config;
        config.m = 32;
        config.k = 3;
        config.lr = 3e-3;
        config.batch_patches = 256;
        config.epochs = 10;
        config.seed = 7;
        r.result = train_sae(x, config);
        return r;
    }();
    return run;
}

Outcome dictionary_recovery() {
    Outcome out;
    const auto& run = planted_run();
    Matrix learned = run.result.model.dec_weight;
    learned.rowwise().normalize();
    const Matrix cos = run.truth * learned.transpose();
    const double match = cos.rowwise().maxCoeff().mean();
    const double fve_holdout = fve(run.result.model, run.result.holdout);
    out.require(match >= 0.9, "atom match " + num(match));
    out.require(fve_holdout >= 0.9, "holdout FVE " + num(fve_holdout));
    out.detail = "atom match " + num(match) + ", holdout FVE " + num(fve_holdout);
    return out;
}

Outcome shell_monotonicity() {
    Outcome out;
    const auto& run = planted_run();
    const auto errors = shell_errors(run.result.model, run.result.holdout);
    std::string trace;
    for (std::size_t i = 0; i < errors.size(); ++i) {
        trace += (i ? " " : "") + num(errors[i]);
        if (i > 0) {
            out.require(errors[i] <= errors[i - 1] * 1.01, "shell " + std::to_string(i) + " error rose");
        }
    }
    out.detail = (out.pass ? "" : out.detail + "; ") + "errors " + trace;
    return out;
}

// --- confidence matrix ------------------------------------------------------

Outcome confidence_matrix() {
    Outcome out;
    Rng rng(404);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::Index m = 5;
        const Eigen::Index n = 20;
        Matrix a = Matrix::Zero(n, m);
        for (Eigen::Index i = 0; i < a.size(); ++i) {
            if (rng.uniform() < 0.35) {
                a.data()[i] = rng.uniform(0.01, 3.0);
            }
        }
        std::vector<ConceptCodes> stream;
        for (Eigen::Index start = 0; start < n;) {
            const Eigen::Index len = std::min<Eigen::Index>(n - start, 1 + static_cast<Eigen::Index>(rng.below(7)));
            auto chunk = ConceptCodes::from_dense(a.middleRows(start, len));
            chunk.concept_count = static_cast<std::size_t>(m);
            stream.push_back(std::move(chunk));
            start += len;
        }
        const auto cm = accumulate(stream, static_cast<std::size_t>(m));
        for (Eigen::Index j = 0; j < m; ++j) {
            double mass = 0.0;
            for (Eigen::Index p = 0; p < n; ++p) {
                mass += a(p, j);
            }
            if (mass == 0.0) {
                continue;
            }
            out.require(cm.values(j, j) == 1.0, "D_jj != 1");
            for (Eigen::Index jp = 0; jp < m; ++jp) {
                double numer = 0.0;
                for (Eigen::Index p = 0; p < n; ++p) {
                    numer += a(p, jp) > 0.0 ? a(p, j) : 0.0;
                }
                worst = std::max(worst, std::abs(cm.values(j, jp) - numer / mass));
            }
        }
        const auto graph = build_graph(cm, 0.75).graph;
        const auto order = graph.topological_order();
        std::map<std::size_t, std::size_t> position;
        for (std::size_t i = 0; i < order.size(); ++i) {
            position[order[i]] = i;
        }
        out.require(order.size() == graph.nodes().size(), "topological order incomplete");
        for (const auto& e : graph.edges()) {
            out.require(e.confidence >= 0.75, "edge below threshold");
            out.require(position.at(e.parent) < position.at(e.child), "edge violates topological order");
        }
    }
    out.require(worst <= 1e-12, "max deviation " + num(worst));
    if (out.pass) {
        out.detail = "200 tables, max deviation " + num(worst) + ", all graphs acyclic";
    }
    return out;
}

// --- metrics ----------------------------------------------------------------

// Independent pixel-level reference: every pixel samples the patch under its centre.
struct PixelImage {
    std::size_t h, w;
    std::vector<std::int64_t> labels;
    std::vector<std::vector<double>> magnitude; // per concept, per pixel
};

PixelImage rasterize(const MetricImage& im, std::size_t m) {
    PixelImage out{im.annotation.height, im.annotation.width, im.annotation.labels, {}};
    const Matrix dense = im.codes.to_dense();
    for (std::size_t c = 0; c < m; ++c) {
        std::vector<double> mag(out.h * out.w);
        for (std::size_t y = 0; y < out.h; ++y) {
            for (std::size_t x = 0; x < out.w; ++x) {
                const auto gy = static_cast<std::size_t>((y + 0.5) * static_cast<double>(im.grid_h) / out.h);
                const auto gx = static_cast<std::size_t>((x + 0.5) * static_cast<double>(im.grid_w) / out.w);
                mag[y * out.w + x] = dense(static_cast<Eigen::Index>(gy * im.grid_w + gx), static_cast<Eigen::Index>(c));
            }
        }
        out.magnitude.push_back(std::move(mag));
    }
    return out;
}

double ref_iou(const PixelImage& im, std::size_t c, std::int64_t l) {
    double inter = 0, uni = 0;
    for (std::size_t i = 0; i < im.labels.size(); ++i) {
        const bool a = im.magnitude[c][i] > 0.0;
        const bool b = im.labels[i] == l;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 0.0 : inter / uni;
}

std::set<std::int64_t> ref_labels(const PixelImage& im) {
    std::set<std::int64_t> out;
    for (const auto l : im.labels) {
        if (l >= 0) {
            out.insert(l);
        }
    }
    return out;
}

bool ref_active(const PixelImage& im, std::size_t c) {
    return std::any_of(im.magnitude[c].begin(), im.magnitude[c].end(), [](double v) { return v > 0.0; });
}

struct RefMetrics {
    double locality = 0, consistency = 0, impurity = 0;
};

RefMetrics reference_metrics(const std::vector<PixelImage>& ims, std::size_t m, std::size_t min_images) {
    RefMetrics r;
    double loc = 0;
    std::size_t loc_n = 0;
    std::set<std::int64_t> all;
    for (const auto& im : ims) {
        const auto labels = ref_labels(im);
        all.insert(labels.begin(), labels.end());
        if (labels.empty()) {
            continue;
        }
        double s = 0;
        for (const auto l : labels) {
            double best = 0;
            for (std::size_t c = 0; c < m; ++c) {
                best = std::max(best, ref_iou(im, c, l));
            }
            s += best;
        }
        loc += s / labels.size();
        ++loc_n;
    }
    r.locality = 100.0 * loc / loc_n;
    double cons = 0;
    for (const auto l : all) {
        double best = 0;
        for (std::size_t c = 0; c < m; ++c) {
            double s = 0;
            int n = 0;
            for (const auto& im : ims) {
                if (ref_labels(im).contains(l) && ref_active(im, c)) {
                    s += ref_iou(im, c, l);
                    ++n;
                }
            }
            best = n ? std::max(best, s / n) : best;
        }
        cons += best;
    }
    r.consistency = 100.0 * cons / all.size();
    double imp = 0;
    int counted = 0;
    for (std::size_t c = 0; c < m; ++c) {
        std::size_t active = 0;
        double h_sum = 0;
        for (const auto& im : ims) {
            if (!ref_active(im, c)) {
                continue;
            }
            ++active;
            std::map<std::int64_t, double> mass;
            double total = 0;
            for (std::size_t i = 0; i < im.labels.size(); ++i) {
                mass[im.labels[i]] += im.magnitude[c][i];
                total += im.magnitude[c][i];
            }
            for (const auto& [_, v] : mass) {
                if (v > 0) {
                    h_sum -= v / total * std::log(v / total);
                }
            }
        }
        if (active > 0 && active >= min_images) {
            imp += h_sum / active;
            ++counted;
        }
    }
    r.impurity = counted ? imp / counted : 0.0;
    return r;
}

AnnotationRaster raster(std::size_t h, std::size_t w, std::vector<std::int64_t> labels) {
    AnnotationRaster r{h, w, std::move(labels), {}};
    for (const auto l : r.labels) {
        if (l >= 0) {
            r.label_names[l] = "l" + std::to_string(l);
        }
    }
    return r;
}

ConceptCodes codes_of(std::size_t m, const Matrix& z) {
    auto c = ConceptCodes::from_dense(z);
    c.concept_count = m;
    return c;
}

Outcome metrics_oracle() {
    Outcome out;
    Rng rng(505);
    double worst = 0.0;
    int checked = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(3);
        const std::size_t m = 1 + rng.below(3);
        std::vector<MetricImage> images;
        bool labelled = false;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t gh = 1 + rng.below(3), gw = 1 + rng.below(3);
            const std::size_t h = gh + rng.below(6), w = gw + rng.below(6);
            Matrix z = Matrix::Zero(static_cast<Eigen::Index>(gh * gw), static_cast<Eigen::Index>(m));
            for (Eigen::Index k = 0; k < z.size(); ++k) {
                z.data()[k] = rng.uniform() < 0.4 ? rng.uniform(0.1, 3.0) : 0.0;
            }
            std::vector<std::int64_t> lab(h * w);
            for (auto& l : lab) {
                l = static_cast<std::int64_t>(rng.below(4)) - 1;
                labelled = labelled || l >= 0;
            }
            images.push_back({codes_of(m, z), gh, gw, raster(h, w, lab)});
        }
        if (!labelled) {
            continue;
        }
        std::vector<PixelImage> pix;
        for (const auto& im : images) {
            pix.push_back(rasterize(im, m));
        }
        const std::size_t min_images = 1 + rng.below(2);
        const auto ref = reference_metrics(pix, m, min_images);
        const auto got = evaluate_metrics(images, min_images);
        worst = std::max({worst, std::abs(got.locality - ref.locality), std::abs(got.consistency - ref.consistency),
                          std::abs(got.impurity - ref.impurity)});
        ++checked;
    }
    out.require(worst <= 1e-9, "max deviation " + num(worst));

    const std::vector<MetricImage> perfect{
        {codes_of(1, Matrix{{1.0}, {0.0}, {2.0}, {0.0}}), 2, 2, raster(4, 4, {0, 0, -1, -1, 0, 0, -1, -1,
                                                                             0, 0, -1, -1, 0, 0, -1, -1})}};
    const double loc = locality(perfect);
    out.require(loc == 100.0, "perfect-overlap locality " + num(loc));
    const std::vector<MetricImage> single{{codes_of(1, Matrix{{1.0}, {3.0}}), 1, 2, raster(2, 4, {2, 2, 2, 2, 2, 2, 2, 2})}};
    const double pure = impurity(single, 1);
    out.require(pure == 0.0, "single-label impurity " + num(pure));
    const std::vector<MetricImage> split{{codes_of(1, Matrix{{1.0}, {1.0}}), 1, 2, raster(1, 2, {0, 1})}};
    const double ln2 = impurity(split, 1);
    out.require(std::abs(ln2 - std::log(2.0)) <= 1e-12, "50/50 impurity " + num(ln2));
    if (out.pass) {
        out.detail = std::to_string(checked) + " instances, max deviation " + num(worst) +
                     "; anchors 100 / 0 / " + num(ln2);
    }
    return out;
}

// --- naming -----------------------------------------------------------------

VocabularyBank constant_bank(const std::vector<std::string>& names, const std::vector<Vector>& dirs) {
    std::vector<std::array<Matrix, kPosCount>> raw;
    for (const auto& u : dirs) {
        Matrix slab(static_cast<Eigen::Index>(kTemplatesPerPos), u.size());
        slab.rowwise() = u.transpose();
        raw.push_back({slab, slab, slab});
    }
    return VocabularyBank::build(names, std::vector<PosMask>(names.size(), PosMask{true, false, false}), raw);
}

Outcome naming() {
    Outcome out;
    Rng rng(606);
    const Eigen::Index d = 12;
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix dict = random_matrix(rng, 4, d);
        SaeModel model;
        model.enc_weight = Matrix::Zero(d, 4);
        model.enc_bias = Vector::Zero(4);
        model.dec_weight = dict;
        model.dec_bias = Vector::Zero(d);
        model.shell_bounds = {4};
        model.k = 1;
        std::vector<std::string> names;
        std::vector<Vector> dirs;
        for (int e = 0; e < 6; ++e) {
            names.push_back("w" + std::to_string(e));
            dirs.push_back(random_vector(rng, d));
        }
        const std::size_t target = rng.below(4);
        const std::size_t slot = rng.below(7);
        names.insert(names.begin() + static_cast<std::ptrdiff_t>(slot), "target");
        dirs.insert(dirs.begin() + static_cast<std::ptrdiff_t>(slot), dict.row(static_cast<Eigen::Index>(target)).transpose());
        const auto bank = constant_bank(names, dirs);

        std::vector<FamilyNode> nodes;
        for (std::size_t i = 0; i < 4; ++i) {
            nodes.push_back({i, "", 0.0});
        }
        const FamilyGraph flat(nodes, {});
        const ConceptWeights w{1.0, {}};
        const Vector v = concept_vector(model, flat, Matrix::Identity(4, 4), w, target, 1.33);
        const auto name = assign_label(v, bank);
        out.require(name.label == "target", "picked " + name.label);
        out.require(std::abs(name.score - 1.0) <= 1e-12, "score " + num(name.score));
    }

    // Two-level family: a detail concept that only fires with its parent.
    const Eigen::Index dd = 4;
    SaeModel model;
    model.enc_weight = Matrix::Zero(dd, 2);
    model.enc_bias = Vector::Zero(2);
    model.dec_weight = Matrix::Identity(2, dd);
    model.dec_bias = Vector::Zero(dd);
    model.shell_bounds = {2};
    model.k = 1;
    const Vector e0 = Vector::Unit(dd, 0), e1 = Vector::Unit(dd, 1);
    const auto bank = constant_bank({"texture", "vehicle", "wheel"}, {e1, e0, (1.33 * e1 + e0).normalized()});
    Matrix a = Matrix::Zero(20, 2);
    a.col(0).setOnes();
    a.block(0, 1, 5, 1).setOnes();
    const auto corpus = ConceptCodes::from_dense(a);
    const auto confidence = accumulate({corpus}, 2);
    const auto graph = build_graph(confidence).graph;
    const auto plain = assign_label(model.dec_weight.row(1).transpose(), bank);
    const auto named = name_all(model, graph, confidence.values, corpus, bank);
    out.require(graph.parents(1) == std::vector<std::size_t>{0}, "planted parent edge missing");
    out.require(plain.label == "texture", "plain match gave " + plain.label);
    out.require(named.size() == 2 && named[1].label == "wheel", "family-informed label wrong");
    if (out.pass) {
        out.detail = "50 banks with score 1 on the dictionary entry; planted child: '" + plain.label + "' -> '" +
                     named[1].label + "'";
    }
    return out;
}

// --- pooling ----------------------------------------------------------------

Outcome pooling() {
    Outcome out;
    Rng rng(707);
    double uniform_err = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t gh = 1 + rng.below(6), gw = 1 + rng.below(6);
        const auto n = static_cast<Eigen::Index>(gh * gw);
        const PatchGrid grid{random_matrix(rng, n, 1 + static_cast<Eigen::Index>(rng.below(16))), gh, gw};
        out.require(guided_pool(grid, Matrix::Identity(n, n)).features == grid.features, "identity affinity changed input");
        const Matrix pooled = guided_pool(grid, Matrix::Constant(n, n, rng.uniform(0.1, 2.0))).features;
        const Vector mean = grid.features.colwise().mean().transpose();
        for (Eigen::Index p = 0; p < n; ++p) {
            uniform_err = std::max(uniform_err, (pooled.row(p).transpose() - mean).cwiseAbs().maxCoeff());
        }
    }
    out.require(uniform_err <= 1e-6, "uniform max deviation " + num(uniform_err));
    if (out.pass) {
        out.detail = "identity exact; uniform max deviation " + num(uniform_err);
    }
    return out;
}

// --- probe ------------------------------------------------------------------

Outcome probe() {
    Outcome out;
    Rng rng(808);
    const std::size_t n = 600;
    Matrix x(static_cast<Eigen::Index>(n), 12);
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = rng.below(2);
        Matrix z = Matrix::Zero(5, 6);
        for (Eigen::Index p = 0; p < 5; ++p) {
            z(p, static_cast<Eigen::Index>(cls)) = rng.uniform(0.5, 2.0);
            for (Eigen::Index c = 2; c < 6; ++c) {
                z(p, c) = rng.uniform() < 0.5 ? rng.uniform(0.0, 1.0) : 0.0;
            }
        }
        x.row(static_cast<Eigen::Index>(i)) = pool(ConceptCodes::from_dense(z)).transpose();
        y[i] = cls;
    }
    const auto trained = train_probe(x, y, {});
    const double acc = probe_accuracy(trained.probe, x, y);
    out.require(acc >= 0.99, "accuracy " + num(acc));

    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        LinearProbe p;
        p.weights = random_matrix(rng, 12, 3);
        p.bias = random_vector(rng, 3);
        const Vector pooled = random_vector(rng, 12).cwiseAbs();
        const auto e = classify_explain(p, pooled);
        double sum = e.bias;
        for (const auto& c : e.contributions) {
            sum += c.contribution;
        }
        worst = std::max(worst, std::abs(sum - e.logits(static_cast<Eigen::Index>(e.predicted_class))));
    }
    out.require(worst <= 1e-9, "additivity deviation " + num(worst));
    if (out.pass) {
        out.detail = "separable accuracy " + num(acc) + ", additivity deviation " + num(worst);
    }
    return out;
}

// --- end to end -------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            out[fs::relative(e.path(), root).generic_string()] = read_text(e.path());
        }
    }
    return out;
}

void pipeline(const fs::path& out) {
    const fs::path toy = INSIGHT_TOY_DIR;
    const auto stage = [&](const std::string& command, const fs::path& manifest) {
        std::ostringstream sink_out, sink_err;
        const int code = cli::run({command, "--manifest", manifest.string(), "--config", (toy / "config.toml").string(),
                                   "--out", out.string()},
                                  sink_out, sink_err);
        if (code != 0) {
            throw std::runtime_error(command + " exited " + std::to_string(code) + ": " + sink_err.str());
        }
    };
    stage("train-affinity", toy / "manifest.tsv");
    stage("pool", toy / "manifest.tsv");
    for (const std::string command : {"train-sae", "encode", "graph", "name", "metrics", "probe", "segment",
                                      "export-graph", "report"}) {
        stage(command, out / "pooled" / "manifest.tsv");
    }
}

Outcome end_to_end() {
    Outcome out;
    TempDir a("accept_a"), b("accept_b");
    pipeline(a.path());
    pipeline(b.path());
    const auto first = snapshot(a.path());
    const auto second = snapshot(b.path());
    out.require(first.size() == second.size(), "different file sets");
    for (const auto& [name, bytes] : first) {
        const auto it = second.find(name);
        out.require(it != second.end() && it->second == bytes, name + " differs");
    }
    for (const char* required : {"sae/sae.json", "affinity_head/head.json", "probe/probe.json", "report.json",
                                 "metrics/metrics.json", "graph/graph.json"}) {
        out.require(first.contains(required), std::string("missing ") + required);
    }
    if (out.pass) {
        out.detail = std::to_string(first.size()) + " files byte-identical across two runs";
    }
    return out;
}

} // namespace

int main() {
    set_warnings_enabled(false);
    report("gradients: affinity BCE, matryoshka, aux, probe vs central differences", gradients, 10);
    report("batchtopk: 1000 random batches keep exactly B*k", batch_topk_invariant, 5);
    report("dictionary recovery: planted atoms and FVE", dictionary_recovery, 300);
    report("matryoshka shells: holdout error non-increasing", shell_monotonicity, 300);
    report("confidence matrix: brute-force oracle, unit diagonal, graph threshold and order", confidence_matrix, 60);
    report("metrics: brute-force references and anchors", metrics_oracle, 60);
    report("naming: exact dictionary match and family-informed label", naming, 60);
    report("pooling: identity and uniform affinity anchors", pooling, 60);
    report("probe: separable accuracy and contribution additivity", probe, 60);
    report("end-to-end: toy corpus pipeline is deterministic", end_to_end, 600);
    std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
    return failures;
}
