#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cimt/metrics.hpp"
#include "doctest.h"

using namespace cimt;

namespace {

// O(n^2) pair-counting AUC
double auc_pairs(const std::vector<double>& s, const std::vector<int>& l) {
    double num = 0, den = 0;
    for (size_t i = 0; i < s.size(); ++i)
        for (size_t j = 0; j < s.size(); ++j) {
            if (l[i] != 1 || l[j] != 0) continue;
            den += 1;
            if (s[i] > s[j]) num += 1;
            else if (s[i] == s[j]) num += 0.5;
        }
    return num / den;
}

void random_instance(Rng& rng, int n, std::vector<double>& s, std::vector<int>& l,
                     bool quantized) {
    s.resize(size_t(n));
    l.resize(size_t(n));
    bool pos = false, neg = false;
    for (int i = 0; i < n; ++i) {
        l[size_t(i)] = rng.bernoulli(0.5) ? 1 : 0;
        (l[size_t(i)] == 1 ? pos : neg) = true;
        double v = rng.uniform();
        if (quantized) v = std::round(v * 10.0) / 10.0;  // force ties
        s[size_t(i)] = v;
    }
    if (!pos) l[0] = 1;
    if (!neg) l[1] = 0;
}

}  // namespace

TEST_CASE("auc separates, ties at one half, and rejects one-class input") {
    CHECK(auc({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}) == 1.0);
    CHECK(auc({0.5, 0.5}, {1, 0}) == 0.5);
    CHECK(auc({0.1, 0.2, 0.9}, {0, 0, 1}) == 1.0);
    CHECK_THROWS_AS(auc({0.1, 0.2}, {1, 1}), DataError);
    CHECK_THROWS_AS(auc({0.1, 0.2}, {0, 0}), DataError);
    CHECK_THROWS_AS(auc({0.1}, {0, 1}), ShapeError);
    CHECK_THROWS_AS(auc({0.1, 0.2}, {0, 2}), DataError);
}

TEST_CASE("auc equals the pair-counting oracle, ties included") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed);
        std::vector<double> s;
        std::vector<int> l;
        random_instance(rng, 20, s, l, seed % 2 == 0);
        CHECK(auc(s, l) == doctest::Approx(auc_pairs(s, l)).epsilon(1e-12));
    }
}

TEST_CASE("auc flips under negation and ignores monotone transforms") {
    Rng rng(7);
    std::vector<double> s;
    std::vector<int> l;
    random_instance(rng, 40, s, l, false);  // continuous draws, no ties
    std::vector<double> neg(s), expd(s), affine(s);
    for (auto& v : neg) v = -v;
    for (auto& v : expd) v = std::exp(v);
    for (auto& v : affine) v = 3.5 * v - 2.0;
    const double a = auc(s, l);
    CHECK(auc(neg, l) == doctest::Approx(1.0 - a).epsilon(1e-15));
    CHECK(auc(expd, l) == a);
    CHECK(auc(affine, l) == a);
}

TEST_CASE("sensitivity and specificity count the confusion matrix") {
    std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
    std::vector<int> l = {0, 0, 1, 1};
    auto [sens_lo, spec_lo] = sens_spec(s, l, 0.0);
    CHECK(sens_lo == 1.0);
    CHECK(spec_lo == 0.0);
    auto [sens_hi, spec_hi] = sens_spec(s, l, 1.0);
    CHECK(sens_hi == 0.0);
    CHECK(spec_hi == 1.0);

    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed * 11);
        std::vector<double> ss;
        std::vector<int> ll;
        random_instance(rng, 15, ss, ll, true);
        const double thr = rng.uniform();
        int tp = 0, fn = 0, tn = 0, fp = 0;
        for (size_t i = 0; i < ss.size(); ++i) {
            if (ll[i] == 1) (ss[i] > thr ? tp : fn)++;
            else (ss[i] > thr ? fp : tn)++;
        }
        auto [sens, spec] = sens_spec(ss, ll, thr);
        CHECK(sens == doctest::Approx(double(tp) / (tp + fn)));
        CHECK(spec == doctest::Approx(double(tn) / (tn + fp)));
    }

    auto [sens_nan, spec_ok] = sens_spec({0.2, 0.7}, {0, 0}, 0.5);
    CHECK(std::isnan(sens_nan));
    CHECK(spec_ok == 0.5);
}

TEST_CASE("the youden threshold splits separable volumes at the midpoint") {
    std::vector<double> v = {120, 300, 0, 4};
    std::vector<int> l = {1, 1, 0, 0};
    CHECK(youden_threshold(v, l) == 62.0);

    std::vector<double> same = {7, 7, 7, 7};
    std::vector<int> sl = {1, 0, 1, 0};
    const double thr = youden_threshold(same, sl);
    CHECK(thr == 7.0);
    auto [sens, spec] = sens_spec(same, sl, thr);
    CHECK(sens == 0.0);
    CHECK(spec == 1.0);

    CHECK_THROWS_AS(youden_threshold({1, 2}, {1, 1}), DataError);
}

TEST_CASE("the youden threshold maximizes J against an exhaustive scan") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed * 3 + 1);
        std::vector<double> s;
        std::vector<int> l;
        random_instance(rng, 12, s, l, true);
        const double thr = youden_threshold(s, l);
        auto [sens, spec] = sens_spec(s, l, thr);
        const double got = sens + spec;

        // scan every achievable operating point
        std::vector<double> grid(s);
        std::sort(grid.begin(), grid.end());
        std::vector<double> probes = {grid.front() - 1.0, grid.back()};
        for (size_t i = 0; i + 1 < grid.size(); ++i)
            probes.push_back(0.5 * (grid[i] + grid[i + 1]));
        double best = -1;
        for (double p : probes) {
            auto [sn, sp] = sens_spec(s, l, p);
            best = std::max(best, sn + sp);
        }
        CHECK(got == doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("bootstrap intervals bracket the point and respect determinism") {
    std::vector<double> s;
    std::vector<int> l;
    Rng rng(99);
    random_instance(rng, 40, s, l, false);
    auto metric = [&](const std::vector<size_t>& idx) {
        std::vector<double> ss;
        std::vector<int> ll;
        bool pos = false, neg = false;
        for (size_t i : idx) {
            ss.push_back(s[i]);
            ll.push_back(l[i]);
            (l[i] == 1 ? pos : neg) = true;
        }
        if (!pos || !neg) return std::numeric_limits<double>::quiet_NaN();
        return auc(ss, ll);
    };
    CiTriple ci = bootstrap_ci(metric, l, 300, 0.05, 17);
    CHECK(ci.low <= ci.point);
    CHECK(ci.point <= ci.high);
    CHECK(ci.point == auc(s, l));
    CiTriple again = bootstrap_ci(metric, l, 300, 0.05, 17);
    CHECK(ci.low == again.low);
    CHECK(ci.high == again.high);
    CiTriple other = bootstrap_ci(metric, l, 300, 0.05, 18);
    CHECK((other.low != ci.low || other.high != ci.high));

    auto constant = [](const std::vector<size_t>&) { return 0.75; };
    CiTriple flat = bootstrap_ci(constant, l, 200, 0.05, 5);
    CHECK(flat.low == 0.75);
    CHECK(flat.point == 0.75);
    CHECK(flat.high == 0.75);

    CHECK_THROWS_AS(bootstrap_ci(constant, l, 99, 0.05, 1), ConfigError);
}

TEST_CASE("undefined replicas are redrawn or the bootstrap asks for strata") {
    // one positive in ten cases: plain resampling often drops it
    std::vector<int> l = {1, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    std::vector<double> s = {0.9, 0.5, 0.4, 0.3, 0.2, 0.1, 0.15, 0.25, 0.35, 0.45};
    auto metric = [&](const std::vector<size_t>& idx) {
        std::vector<double> ss;
        std::vector<int> ll;
        bool pos = false, neg = false;
        for (size_t i : idx) {
            ss.push_back(s[i]);
            ll.push_back(l[i]);
            (l[i] == 1 ? pos : neg) = true;
        }
        if (!pos || !neg) return std::numeric_limits<double>::quiet_NaN();
        return auc(ss, ll);
    };
    CiTriple ci = bootstrap_ci(metric, l, 150, 0.05, 3);
    CHECK(ci.low <= ci.high);  // every replica resolved via redraws

    // stratified resampling keeps both classes in every replica by construction
    auto count_pos = [&](const std::vector<size_t>& idx) {
        double c = 0;
        for (size_t i : idx) c += l[i] == 1;
        return c;
    };
    CiTriple strat = bootstrap_ci(count_pos, l, 150, 0.05, 3, true);
    CHECK(strat.low == 1.0);
    CHECK(strat.high == 1.0);

    // defined on the full sample only: every replica redraws until the cap trips
    std::vector<size_t> identity(l.size());
    std::iota(identity.begin(), identity.end(), size_t(0));
    auto only_full = [&](const std::vector<size_t>& idx) {
        if (idx == identity) return 0.5;
        return std::numeric_limits<double>::quiet_NaN();
    };
    CHECK_THROWS_WITH_AS(bootstrap_ci(only_full, l, 100, 0.05, 1),
                         doctest::Contains("stratified"), ConfigError);
}

TEST_CASE("bootstrap AUC coverage sits near the nominal level") {
    // pos ~ N(1,1), neg ~ N(0,1): true AUC = Phi(1/sqrt(2))
    const double true_auc = 0.5 * std::erfc(-1.0 / (std::sqrt(2.0) * std::sqrt(2.0)));
    const int worlds = 150, per_class = 60;
    int covered = 0;
    for (int w = 0; w < worlds; ++w) {
        Rng rng = Rng::keyed(424242, uint64_t(w));
        std::vector<double> s;
        std::vector<int> l;
        for (int i = 0; i < per_class; ++i) {
            s.push_back(rng.normal() + 1.0);
            l.push_back(1);
            s.push_back(rng.normal());
            l.push_back(0);
        }
        auto metric = [&](const std::vector<size_t>& idx) {
            std::vector<double> ss;
            std::vector<int> ll;
            bool pos = false, neg = false;
            for (size_t i : idx) {
                ss.push_back(s[i]);
                ll.push_back(l[i]);
                (l[i] == 1 ? pos : neg) = true;
            }
            if (!pos || !neg) return std::numeric_limits<double>::quiet_NaN();
            return auc(ss, ll);
        };
        CiTriple ci = bootstrap_ci(metric, l, 150, 0.05, mix_key(311, uint64_t(w)));
        if (ci.low <= true_auc && true_auc <= ci.high) ++covered;
    }
    const double coverage = double(covered) / worlds;
    CHECK(coverage >= 0.88);
    CHECK(coverage <= 0.99);
}

TEST_CASE("delong matches the hand-computed three-by-three case") {
    // placements give aucA = 7/9, aucB = 11/18, var = 1/27, z = sqrt(3)/2
    std::vector<double> a = {0.9, 0.6, 0.4, 0.7, 0.3, 0.1};
    std::vector<double> b = {0.8, 0.5, 0.2, 0.6, 0.5, 0.05};
    std::vector<int> l = {1, 1, 1, 0, 0, 0};
    DelongResult r = delong_test(a, b, l);
    CHECK(r.auc_a == doctest::Approx(7.0 / 9.0).epsilon(1e-12));
    CHECK(r.auc_b == doctest::Approx(11.0 / 18.0).epsilon(1e-12));
    CHECK(r.z == doctest::Approx(std::sqrt(3.0) / 2.0).epsilon(1e-12));
    CHECK(r.p == doctest::Approx(std::erfc(std::sqrt(3.0) / (2.0 * std::sqrt(2.0)))));
    CHECK_FALSE(r.degenerate);

    DelongResult flipped = delong_test(b, a, l);
    CHECK(flipped.z == doctest::Approx(-r.z).epsilon(1e-12));
    CHECK(flipped.p == doctest::Approx(r.p).epsilon(1e-12));
}

TEST_CASE("delong against itself is degenerate with p = 1") {
    std::vector<double> a = {0.9, 0.2, 0.8, 0.1};
    std::vector<int> l = {1, 0, 1, 0};
    DelongResult r = delong_test(a, a, l);
    CHECK(r.z == 0.0);
    CHECK(r.p == 1.0);
    CHECK(r.degenerate);

    CHECK_THROWS_AS(delong_test({0.1, 0.2}, {0.1}, {1, 0}), PairingError);
    CHECK_THROWS_AS(delong_test({0.1, 0.2}, {0.3, 0.4}, {1, 1}), DataError);
}

TEST_CASE("delong agrees with a large paired bootstrap") {
    Rng rng(5151);
    const int per_class = 50;
    std::vector<double> a, b;
    std::vector<int> l;
    for (int i = 0; i < 2 * per_class; ++i) {
        const int lab = i < per_class ? 1 : 0;
        const double base = lab ? 0.8 : 0.0;
        a.push_back(base + rng.normal());
        b.push_back(0.8 * base + rng.normal());
        l.push_back(lab);
    }
    DelongResult r = delong_test(a, b, l);

    const int R = 100000;
    int lower = 0, higher = 0, valid = 0;
    for (int rep = 0; rep < R; ++rep) {
        Rng rr = Rng::keyed(777, uint64_t(rep));
        std::vector<double> sa, sb;
        std::vector<int> sl;
        bool pos = false, neg = false;
        for (size_t k = 0; k < l.size(); ++k) {
            const size_t i = size_t(rr.uniform_int(int(l.size())));
            sa.push_back(a[i]);
            sb.push_back(b[i]);
            sl.push_back(l[i]);
            (l[i] == 1 ? pos : neg) = true;
        }
        if (!pos || !neg) continue;
        const double d = auc(sa, sl) - auc(sb, sl);
        ++valid;
        if (d <= 0) ++lower;
        if (d >= 0) ++higher;
    }
    const double p_boot =
        std::min(1.0, 2.0 * std::min(double(lower) / valid, double(higher) / valid));
    CHECK(std::abs(r.p - p_boot) < 0.02);
}

TEST_CASE("the permutation test is smoothed, deterministic, and matches enumeration") {
    std::vector<int> same = {1, 0, 1, 1, 0};
    std::vector<int> l5 = {1, 1, 0, 1, 0};
    CHECK(permutation_test(same, same, l5, RateKind::kSensitivity, 999, 1) == 1.0);

    // n = 10, exhaustive two-sided reference over all 2^10 swap patterns
    std::vector<int> pa = {1, 0, 1, 1, 0, 1, 0, 0, 1, 1};
    std::vector<int> pb = {0, 0, 1, 0, 1, 1, 0, 1, 0, 1};
    std::vector<int> l = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
    for (RateKind kind : {RateKind::kSensitivity, RateKind::kSpecificity}) {
        const int want_label = kind == RateKind::kSensitivity ? 1 : 0;
        const int want_pred = want_label;
        std::vector<size_t> stratum;
        for (size_t i = 0; i < l.size(); ++i)
            if (l[i] == want_label) stratum.push_back(i);
        auto diff = [&](const std::vector<int>& x, const std::vector<int>& y) {
            int cx = 0, cy = 0;
            for (size_t i : stratum) {
                cx += x[i] == want_pred;
                cy += y[i] == want_pred;
            }
            return std::abs(cx - cy);
        };
        const int observed = diff(pa, pb);
        int at_least = 0;
        const size_t m = stratum.size();
        for (size_t bits = 0; bits < (size_t(1) << m); ++bits) {
            std::vector<int> xa(pa), xb(pb);
            for (size_t k = 0; k < m; ++k)
                if (bits >> k & 1) std::swap(xa[stratum[k]], xb[stratum[k]]);
            if (diff(xa, xb) >= observed) ++at_least;
        }
        const double exact = double(at_least) / double(size_t(1) << m);
        const double mc = permutation_test(pa, pb, l, kind, 10000, 4242);
        CHECK(std::abs(mc - exact) < 0.015);
        CHECK(mc > 0.0);
        CHECK(mc <= 1.0);
        CHECK(permutation_test(pa, pb, l, kind, 10000, 4242) == mc);
    }

    CHECK_THROWS_AS(permutation_test({1}, {1, 0}, {1, 0}, RateKind::kSensitivity, 10, 1),
                    PairingError);
    CHECK_THROWS_AS(permutation_test({1, 0}, {1, 0}, {0, 0}, RateKind::kSensitivity, 10, 1),
                    DataError);
    CHECK_THROWS_AS(permutation_test({1, 2}, {1, 0}, {1, 0}, RateKind::kSensitivity, 10, 1),
                    DataError);
}

TEST_CASE("localization uses dice with a strict boundary") {
    std::vector<uint8_t> m(200, 0);
    for (int i = 0; i < 100; ++i) m[size_t(i)] = 1;
    LocResult same = localization_hit(m, m, 1);
    CHECK(same.dice == 1.0);
    CHECK(same.hit);

    std::vector<uint8_t> other(200, 0);
    for (int i = 100; i < 200; ++i) other[size_t(i)] = 1;
    LocResult miss = localization_hit(m, other, 1);
    CHECK(miss.dice == 0.0);
    CHECK_FALSE(miss.hit);

    // one shared voxel, |A| = |B| = 100: dice exactly 0.01 fails the strict test
    std::vector<uint8_t> shifted(200, 0);
    for (int i = 99; i < 199; ++i) shifted[size_t(i)] = 1;
    LocResult boundary = localization_hit(m, shifted, 1);
    CHECK(boundary.dice == 2.0 * 1.0 / 200.0);
    CHECK_FALSE(boundary.hit);

    std::vector<uint8_t> empty(200, 0);
    LocResult normal = localization_hit(empty, empty, 0);
    CHECK(normal.dice == 1.0);
    CHECK(normal.hit);
    LocResult missed_tumor = localization_hit(empty, empty, 1);
    CHECK_FALSE(missed_tumor.hit);

    CHECK_THROWS_AS(localization_hit(m, std::vector<uint8_t>(100, 0), 1), ShapeError);
}

TEST_CASE("roc curves run from the origin to the top-right corner") {
    std::vector<double> s = {0.9, 0.8, 0.7, 0.3, 0.2, 0.1};
    std::vector<int> l = {1, 1, 1, 0, 0, 0};
    std::vector<RocPoint> roc = roc_curve(s, l);
    CHECK(roc.front().fpr == 0.0);
    CHECK(roc.front().tpr == 0.0);
    CHECK(roc.back().fpr == 1.0);
    CHECK(roc.back().tpr == 1.0);
    bool hits_corner = false;
    for (size_t i = 1; i < roc.size(); ++i) {
        CHECK(roc[i].fpr >= roc[i - 1].fpr);
        CHECK(roc[i].tpr >= roc[i - 1].tpr);
        CHECK(roc[i].threshold < roc[i - 1].threshold);
        if (roc[i].fpr == 0.0 && roc[i].tpr == 1.0) hits_corner = true;
    }
    CHECK(hits_corner);  // perfect separation passes through (0, 1)

    const std::string csv = roc_to_csv(roc);
    CHECK(csv.substr(0, 18) == "fpr,tpr,threshold\n");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == long(roc.size()) + 1);
}

TEST_CASE("reports aggregate separable scores into perfect operating points") {
    std::vector<CaseScore> cases;
    for (int i = 0; i < 12; ++i) {
        CaseScore c;
        c.id = "case_" + std::to_string(i);
        c.label = i < 6 ? 1 : 0;
        c.score = c.label ? 0.7 + 0.04 * i : 0.1 + 0.03 * i;
        c.gt_tumor_voxels = c.label ? 50 + 30 * i : 0;
        c.tumor_voxels = c.label ? 40 + 30 * i : 0;
        c.dice = c.label ? 0.8 : 1.0;
        c.localization_hit = c.label == 1;
        cases.push_back(c);
    }
    EvalReport rep = build_report(cases, 200, 9, std::numeric_limits<double>::quiet_NaN());
    CHECK(rep.n_pos == 6);
    CHECK(rep.n_neg == 6);
    CHECK(rep.auc.point == 1.0);
    CHECK(rep.sens.point == 1.0);
    CHECK(rep.spec.point == 1.0);
    CHECK(rep.auc.low <= rep.auc.point);
    CHECK(rep.sens.low <= 1.0);
    CHECK(rep.localization_rate == 1.0);
    int strata_n = 0, strata_detected = 0;
    for (const StratumRate& s : rep.strata) {
        strata_n += s.n;
        strata_detected += s.detected;
        if (s.n > 0) CHECK(s.lo_volume <= s.hi_volume);
    }
    CHECK(strata_n == rep.n_pos);
    CHECK(strata_detected == 6);

    rep.p_values["unet-s4c.auc_delong"] = 0.03;
    const std::string text = report_to_json(rep);
    EvalReport back = report_from_json(text);
    CHECK(report_to_json(back) == text);
    CHECK(back.cases.size() == cases.size());
    CHECK(back.p_values.at("unet-s4c.auc_delong") == 0.03);

    CHECK_THROWS_AS(report_from_json("{not json"), DataError);
    CHECK_THROWS_AS(report_from_json("{\"version\": 1}"), DataError);

    CaseScore bad;
    bad.id = "case_x";
    bad.score = 1.5;
    bad.label = 1;
    CHECK_THROWS_AS(build_report({bad}, 100, 1, 0.5), DataError);
}
