#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "encofa/backbone.hpp"
#include "encofa/losses.hpp"
#include "encofa/noise_identifier.hpp"
#include "encofa/osfeataug.hpp"
#include "encofa/trainer.hpp"

namespace fs = std::filesystem;
using namespace encofa;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double rel_err(double got, double want) { return std::abs(got - want) / std::max(std::abs(want), 1e-12); }

Matrix random_matrix(std::mt19937_64& gen, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> nd;
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(gen);
    return m;
}

std::vector<double> random_simplex(std::mt19937_64& gen, int k) {
    std::exponential_distribution<double> ed;
    std::vector<double> p(static_cast<std::size_t>(k));
    double s = 0;
    for (auto& v : p) s += v = ed(gen);
    for (auto& v : p) v /= s;
    return p;
}

// Brute-force references, written with plain loops.

std::vector<double> pseudo_label_ref(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(a.size());
    double s = 0;
    for (std::size_t c = 0; c < a.size(); ++c) {
        const double m = 0.5 * (a[c] + b[c]);
        out[c] = m * m;
        s += out[c];
    }
    for (auto& v : out) v /= s;
    return out;
}

double ensc_ref(const Matrix& z, const std::vector<int>& y, const std::vector<double>& w, double tau) {
    const int n = static_cast<int>(z.cols());
    double total = 0;
    int anchors = 0;
    for (int i = 0; i < n; ++i) {
        double denom = 0;
        for (int a = 0; a < n; ++a) {
            if (a == i) continue;
            double dot = 0;
            for (int d = 0; d < z.rows(); ++d) dot += z(d, i) * z(d, a);
            denom += w[i] * w[a] * std::exp(dot / tau);
        }
        double sum = 0;
        int np = 0;
        for (int p = 0; p < n; ++p) {
            if (p == i || y[p] != y[i]) continue;
            double dot = 0;
            for (int d = 0; d < z.rows(); ++d) dot += z(d, i) * z(d, p);
            sum += std::log(w[i] * w[p] * std::exp(dot / tau) / denom);
            ++np;
        }
        if (np == 0) continue;
        total += -sum / np;
        ++anchors;
    }
    return anchors ? total / anchors : 0.0;
}

double knn_ref(const Vector& f, const Matrix& refs, int k) {
    auto unit = [](const Vector& v) {
        const double n = v.norm();
        return n > 0 ? Vector(v / n) : v;
    };
    const Vector q = unit(f);
    std::vector<double> d;
    for (Eigen::Index j = 0; j < refs.cols(); ++j) {
        const Vector r = unit(refs.col(j));
        double s = 0;
        for (Eigen::Index c = 0; c < q.size(); ++c) s += (q[c] - r[c]) * (q[c] - r[c]);
        d.push_back(std::sqrt(s));
    }
    std::sort(d.begin(), d.end());
    return -d[static_cast<std::size_t>(std::min<Eigen::Index>(k, refs.cols()) - 1)];
}

std::vector<double> importance_ref(const Matrix& g) {
    std::vector<double> mean(static_cast<std::size_t>(g.rows()), 0.0);
    for (Eigen::Index c = 0; c < g.rows(); ++c) {
        for (Eigen::Index b = 0; b < g.cols(); ++b) mean[static_cast<std::size_t>(c)] += g(c, b);
        mean[static_cast<std::size_t>(c)] /= static_cast<double>(g.cols());
    }
    const double lo = *std::min_element(mean.begin(), mean.end());
    const double hi = *std::max_element(mean.begin(), mean.end());
    for (auto& v : mean) v = hi > lo ? (v - lo) / (hi - lo) : 1.0;
    return mean;
}

Outcome formula_oracles() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 gen(101);
    const int instances = 200;
    double worst = 0;
    for (int t = 0; t < instances; ++t) {
        const int k = 2 + static_cast<int>(gen() % 9);
        const auto a = random_simplex(gen, k), b = random_simplex(gen, k);
        const auto got = pseudo_label(a, b), want = pseudo_label_ref(a, b);
        for (std::size_t c = 0; c < got.size(); ++c) worst = std::max(worst, rel_err(got[c], want[c]));
    }
    const double worst_pseudo = worst;

    worst = 0;
    for (int t = 0; t < instances; ++t) {
        const int n = 2 + static_cast<int>(gen() % 10), d = 2 + static_cast<int>(gen() % 6);
        Matrix z = random_matrix(gen, d, n);
        z.colwise().normalize();
        std::vector<int> y(static_cast<std::size_t>(n));
        std::vector<double> w(static_cast<std::size_t>(n));
        std::uniform_real_distribution<double> ud(0.05, 1.0);
        for (int i = 0; i < n; ++i) {
            y[static_cast<std::size_t>(i)] = static_cast<int>(gen() % 4);
            w[static_cast<std::size_t>(i)] = ud(gen);
        }
        const double want = ensc_ref(z, y, w, 0.2);
        worst = std::max(worst, want == 0.0 ? std::abs(ensc_loss(z, y, w, 0.2).value) : rel_err(ensc_loss(z, y, w, 0.2).value, want));
    }
    const double worst_ensc = worst;

    worst = 0;
    for (int t = 0; t < instances; ++t) {
        const int n = 1 + static_cast<int>(gen() % 30), d = 2 + static_cast<int>(gen() % 8);
        const Matrix refs = random_matrix(gen, d, n);
        const Vector f = random_matrix(gen, d, 1);
        const int k = 1 + static_cast<int>(gen() % 40);
        worst = std::max(worst, rel_err(knn_ood_score(f, refs, k), knn_ref(f, refs, k)));
    }
    const double worst_knn = worst;

    worst = 0;
    for (int t = 0; t < instances; ++t) {
        const Matrix g = random_matrix(gen, 2 + static_cast<int>(gen() % 12), 1 + static_cast<int>(gen() % 20));
        const auto got = compute_channel_importance(g);
        const auto want = importance_ref(g);
        for (std::size_t c = 0; c < want.size(); ++c)
            worst = std::max(worst, want[c] == 0.0 ? std::abs(got.normalized[static_cast<Eigen::Index>(c)])
                                                   : rel_err(got.normalized[static_cast<Eigen::Index>(c)], want[c]));
    }
    const double worst_imp = worst;

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = std::max({worst_pseudo, worst_ensc, worst_knn, worst_imp}) <= 1e-9 && secs < 10.0;
    return {pass, fmt("%d instances each; max rel err pseudo %.1e ensc %.1e knn %.1e importance %.1e; %.2fs",
                      instances, worst_pseudo, worst_ensc, worst_knn, worst_imp, secs)};
}

// One training batch through the full loss: encoder, head, projector,
// feature augmentation with a fixed swap draw, classification and contrastive terms.
struct LossProbe {
    Backbone model;
    Matrix x;
    std::vector<SupervisionRecord> records;
    std::vector<int> labels;
    std::vector<double> weights;
    std::vector<std::size_t> members;
    ChannelMask mask;
    double lambda = 1.5, tau = 0.2, gamma_p = 0.7;
    std::uint64_t swap_seed = 5;

    BatchAugmentation augment(const Matrix& f) const {
        Rng rng(swap_seed);
        return augment_batch(f, members, mask, gamma_p, rng);
    }

    double value() const {
        const auto aug = augment(model.encode(x));
        const Matrix probs = model.probabilities(aug.features);
        const Matrix z = model.project(aug.features);
        return total_loss(classification_loss(records, probs).value, ensc_loss(z, labels, weights, tau).value, lambda);
    }

    // Loss with the projected features supplied directly.
    double value_at_z(const Matrix& z) const {
        const auto aug = augment(model.encode(x));
        return total_loss(classification_loss(records, model.probabilities(aug.features)).value,
                          ensc_loss(z, labels, weights, tau).value, lambda);
    }

    Matrix backward() {
        model.zero_grad();
        const Matrix f = model.encode(x, Pass::record);
        const auto aug = augment(f);
        const Matrix probs = softmax_columns(model.logits(aug.features, Pass::record));
        Matrix d = model.head_backward(classification_loss(records, probs).d_logits);
        const Matrix z = model.project(aug.features, Pass::record);
        const EnscLoss e = ensc_loss(z, labels, weights, tau);
        d += model.projector_backward(lambda * e.d_z);
        model.encoder_backward(route_gradient(d, aug, mask));
        return lambda * e.d_z;
    }
};

Outcome gradient_check() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 gen(202);
    BackboneSpec spec;
    spec.input = {16, 1, 1};
    spec.num_classes = 3;
    spec.hidden = {16};
    spec.feature_dim = 16;
    spec.projection_dim = 8;
    LossProbe probe{Backbone(spec, 202), random_matrix(gen, 16, 8)};
    const int K = 3;
    for (int b = 0; b < 8; ++b) {
        SupervisionRecord r;
        if (b < 3) {
            r = {b % K, b % K, 1.0, NoiseType::clean};
        } else if (b < 6) {
            const auto soft = random_simplex(gen, K);
            const int arg = static_cast<int>(std::max_element(soft.begin(), soft.end()) - soft.begin());
            r = {arg, soft, 0.3 + 0.1 * b, NoiseType::closed};
        } else {
            r = {K, b % K, 1.0, NoiseType::open};
            probe.members.push_back(static_cast<std::size_t>(b));
        }
        probe.records.push_back(r);
        probe.labels.push_back(r.refined_label);
        probe.weights.push_back(r.weight);
    }
    probe.mask.general.assign(16, false);
    for (int c = 0; c < 16; c += 3) probe.mask.general[static_cast<std::size_t>(c)] = true;

    const Matrix d_z = probe.backward();
    const auto swaps = probe.augment(probe.model.encode(probe.x)).swaps;
    const auto fired = std::count_if(swaps.begin(), swaps.end(), [](const SwapRecord& s) { return s.fired; });
    const double h = 1e-5;
    double worst = 0;
    auto relative = [](const Matrix& a, const Matrix& b) {
        return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
    };

    const Matrix z0 = probe.model.project(probe.augment(probe.model.encode(probe.x)).features);
    Matrix fd_z(z0.rows(), z0.cols());
    for (Eigen::Index i = 0; i < z0.size(); ++i) {
        Matrix up = z0, down = z0;
        up.data()[i] += h;
        down.data()[i] -= h;
        fd_z.data()[i] = (probe.value_at_z(up) - probe.value_at_z(down)) / (2 * h);
    }
    const double err_z = relative(d_z, fd_z);

    std::string worst_name = "-";
    int checked = 0;
    for (Parameter* p : probe.model.parameters()) {
        Matrix fd(p->value.rows(), p->value.cols());
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            const double saved = p->value.data()[i];
            p->value.data()[i] = saved + h;
            const double up = probe.value();
            p->value.data()[i] = saved - h;
            const double down = probe.value();
            p->value.data()[i] = saved;
            fd.data()[i] = (up - down) / (2 * h);
            ++checked;
        }
        const double e = relative(p->grad, fd);
        if (e > worst) {
            worst = e;
            worst_name = p->name;
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = err_z <= 1e-4 && worst <= 1e-4 && secs < 30.0;
    return {pass, fmt("%ld of %zu swaps fired; rel err z %.1e; %d parameters, worst %.1e (%s); %.2fs",
                      static_cast<long>(fired), swaps.size(), err_z, checked, worst, worst_name.c_str(), secs)};
}

Outcome em_recovery() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 gen(303);
    std::normal_distribution<double> lo(0.2, 0.1), hi(2.0, 0.1);
    std::vector<double> x;
    for (int i = 0; i < 500; ++i) {
        x.push_back(lo(gen));
        x.push_back(hi(gen));
    }
    const GmmFit fit = fit_gmm_em(x);
    bool increasing = fit.monotone;
    for (std::size_t i = 1; i < fit.trace.size(); ++i)
        increasing = increasing && fit.trace[i] >= fit.trace[i - 1] - 1e-9 * std::abs(fit.trace[i - 1]);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& m = fit.model.means;
    const bool pass = std::abs(m[0] - 0.2) <= 0.05 && std::abs(m[1] - 2.0) <= 0.05 && increasing && secs < 1.0;
    return {pass, fmt("means %.4f %.4f; %zu iterations monotone=%s; %.3fs", m[0], m[1], fit.trace.size(),
                      increasing ? "yes" : "no", secs)};
}

Outcome threshold_contract() {
    std::mt19937_64 gen(404);
    std::normal_distribution<double> nd(-1.0, 0.3);
    bool pass = true;
    std::string detail;
    for (double g : {0.9, 0.95, 0.99})
        for (int n : {50, 1000}) {
            std::vector<double> s(static_cast<std::size_t>(n));
            for (auto& v : s) v = nd(gen);
            const double thr = select_ood_threshold(s, g);
            const auto above = std::count_if(s.begin(), s.end(), [&](double v) { return v > thr; });
            const auto want = static_cast<long>(std::ceil(g * n));
            pass = pass && std::abs(above - want) <= 1;
            detail += fmt("%s%.2f/%d: %ld of %ld", detail.empty() ? "" : "; ", g, n, static_cast<long>(above), want);
        }
    return {pass, detail};
}

Outcome osfeataug_contracts() {
    std::mt19937_64 gen(505);
    Rng rng(505);
    const int d = 12;
    ChannelMask half;
    for (int c = 0; c < d; ++c) half.general.push_back(c % 2 == 0);
    const ChannelMask empty{std::vector<bool>(d, false)};

    bool identity = true, preserved = true;
    for (int t = 0; t < 1000; ++t) {
        const Vector a = random_matrix(gen, d, 1), b = random_matrix(gen, d, 1);
        identity = identity && augment_feature(a, b, half, 0.0, rng) == a;
        identity = identity && augment_feature(a, b, empty, 1.0, rng) == a;
        const Vector out = augment_feature(a, b, half, 0.5, rng);
        for (int c = 1; c < d; c += 2) preserved = preserved && std::memcmp(&out[c], &a[c], sizeof(double)) == 0;
    }

    const int trials = 10000;
    const double gamma_p = 0.7;
    int fired = 0;
    const Vector a = Vector::Zero(d), b = Vector::Ones(d);
    for (int t = 0; t < trials; ++t) {
        bool s = false;
        augment_feature(a, b, half, gamma_p, rng, &s);
        fired += s;
    }
    const double sigma = std::sqrt(trials * gamma_p * (1 - gamma_p));
    const double z = (fired - gamma_p * trials) / sigma;
    const bool pass = identity && preserved && std::abs(z) <= 3.0;
    return {pass, fmt("identity %s; swap rate %.4f (z %.2f); specific channels preserved %s", identity ? "yes" : "no",
                      static_cast<double>(fired) / trials, z, preserved ? "yes" : "no")};
}

RunConfig blob_preset() {
    RunConfig c = load_config(fs::path(ENCOFA_SOURCE_DIR) / "configs" / "blobs.toml");
    c.save_checkpoints = false;
    return c;
}

Outcome degeneration() {
    RunConfig ce = blob_preset();
    ce.epochs = 5;
    ce.method = Method::ce;
    RunConfig enc = ce;
    enc.method = Method::encofa;
    enc.triage = TriageMode::all_clean;
    enc.hp.lambda = 0.0;
    enc.hp.gamma_p = 0.0;
    const auto data = build_dataset(ce).splits;
    Trainer a(ce, data), b(enc, data);
    const FitResult ra = a.fit(std::nullopt), rb = b.fit(std::nullopt);
    double worst = 0;
    const bool same_len = ra.history.size() == rb.history.size() &&
                          a.warmup_history().size() == b.warmup_history().size();
    if (same_len) {
        for (std::size_t e = 0; e < ra.history.size(); ++e)
            worst = std::max(worst, std::abs(ra.history[e].loss_cls - rb.history[e].loss_cls) +
                                        std::abs(rb.history[e].loss_ensc));
        for (std::size_t e = 0; e < a.warmup_history().size(); ++e)
            worst = std::max(worst, std::abs(a.warmup_history()[e].loss_cls - b.warmup_history()[e].loss_cls));
    }
    return {same_len && worst <= 1e-6,
            fmt("%zu epochs; max per-epoch loss gap %.1e", ra.history.size() + a.warmup_history().size(), worst)};
}

struct MethodStats {
    double acc = 0, f1 = 0;
};

MethodStats run_seeds(RunConfig base, Method method) {
    MethodStats s;
    for (std::uint64_t seed : {0, 1, 2}) {
        RunConfig c = base;
        c.method = method;
        c.seed = seed;
        Trainer t(c, build_dataset(c).splits);
        const FitResult r = t.fit(std::nullopt);
        s.acc += r.acc_test_final / 3.0;
        s.f1 += r.history.back().f1_on_train / 3.0;
    }
    return s;
}

Outcome end_to_end_ordering() {
    const std::clock_t c0 = std::clock();
    const RunConfig base = blob_preset();
    const auto ce = run_seeds(base, Method::ce);
    const auto cls = run_seeds(base, Method::cls);
    const auto ensc = run_seeds(base, Method::cls_ensc);
    const auto enc = run_seeds(base, Method::encofa);
    const double cpu = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
    const bool margin = enc.acc >= ce.acc + 0.05;
    const bool ablation = enc.acc >= cls.acc;
    const bool f1 = ensc.f1 >= cls.f1;
    return {margin && ablation && f1 && cpu < 600.0,
            fmt("acc ce %.4f cls %.4f cls_ensc %.4f encofa %.4f; f1_on cls %.3f cls_ensc %.3f; "
                "margin %s ablation %s f1 %s; %.0fs cpu",
                ce.acc, cls.acc, ensc.acc, enc.acc, cls.f1, ensc.f1, margin ? "ok" : "no", ablation ? "ok" : "no",
                f1 ? "ok" : "no", cpu)};
}

Outcome no_harm_on_clean_data() {
    RunConfig base = blob_preset();
    base.alpha = 0.0;
    const auto ce = run_seeds(base, Method::ce);
    const auto enc = run_seeds(base, Method::encofa);
    return {std::abs(enc.acc - ce.acc) <= 0.01, fmt("alpha 0: acc ce %.4f encofa %.4f", ce.acc, enc.acc)};
}

std::string read_all(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism() {
    const auto dir = fs::temp_directory_path() / "encofa_acceptance_determinism";
    fs::remove_all(dir);
    const std::string cfg = (fs::path(ENCOFA_SOURCE_DIR) / "configs" / "blobs.toml").string();
    auto train = [&](const char* name) {
        const std::string cmd = std::string(ENCOFA_CLI) + " train --config " + cfg + " --seed 3 --epochs 10 --run-dir " +
                                (dir / name).string() + " > " + (dir.string() + "_" + name + ".log") + " 2>&1";
        return std::system(cmd.c_str()) == 0;
    };
    const bool ran = train("a") && train("b");
    const std::string a = read_all(dir / "a" / "metrics.csv"), b = read_all(dir / "b" / "metrics.csv");
    const bool same = ran && !a.empty() && a == b;
    return {same, fmt("exit ok %s; metrics.csv %zu bytes, identical %s", ran ? "yes" : "no", a.size(),
                      a == b ? "yes" : "no")};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"formula oracles", formula_oracles},
        {"gradient check", gradient_check},
        {"EM recovery", em_recovery},
        {"threshold contract", threshold_contract},
        {"feature augmentation contracts", osfeataug_contracts},
        {"degeneration to cross-entropy", degeneration},
        {"end-to-end ordering", end_to_end_ordering},
        {"no harm on clean data", no_harm_on_clean_data},
        {"determinism", determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("[%s] %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed ? EXIT_FAILURE : EXIT_SUCCESS;
}
