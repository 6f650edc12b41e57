#include "cimt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace cimt {

using nlohmann::json;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

void check_paired(size_t a, size_t b, size_t l) {
    if (a != b || a != l)
        throw PairingError("paired inputs must cover identical cases (" + std::to_string(a) +
                           " vs " + std::to_string(b) + " vs " + std::to_string(l) + " labels)");
}

void check_labels(const std::vector<int>& labels) {
    for (int l : labels)
        if (l != 0 && l != 1) throw DataError("labels must be 0 or 1, got " + std::to_string(l));
}

double psi(double x, double y) { return x > y ? 1.0 : (x == y ? 0.5 : 0.0); }

// sample covariance, n-1 denominator; 0 when fewer than two observations
double sample_cov(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    if (n < 2) return 0.0;
    double ma = std::accumulate(a.begin(), a.end(), 0.0) / double(n);
    double mb = std::accumulate(b.begin(), b.end(), 0.0) / double(n);
    double s = 0;
    for (size_t i = 0; i < n; ++i) s += (a[i] - ma) * (b[i] - mb);
    return s / double(n - 1);
}

double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

}  // namespace

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ShapeError("auc: scores and labels differ in length");
    check_labels(labels);
    const size_t n = scores.size();
    size_t n_pos = 0;
    for (int l : labels) n_pos += size_t(l == 1);
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw DataError("auc is undefined when only one class is present");
    for (double s : scores)
        if (!std::isfinite(s)) throw DataError("auc: non-finite score");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * (double(i + 1) + double(j));  // ranks i+1 .. j share
        for (size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += midrank;
        i = j;
    }
    return (rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1)) /
           (double(n_pos) * double(n_neg));
}

std::pair<double, double> sens_spec(const std::vector<double>& scores,
                                    const std::vector<int>& labels, double threshold) {
    if (scores.size() != labels.size())
        throw ShapeError("sens_spec: scores and labels differ in length");
    check_labels(labels);
    int tp = 0, fn = 0, tn = 0, fp = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        const bool positive = scores[i] > threshold;
        if (labels[i] == 1)
            positive ? ++tp : ++fn;
        else
            positive ? ++fp : ++tn;
    }
    const double sens = tp + fn > 0 ? double(tp) / double(tp + fn) : kNan;
    const double spec = tn + fp > 0 ? double(tn) / double(tn + fp) : kNan;
    return {sens, spec};
}

double youden_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.empty()) throw DataError("youden_threshold: no cases");
    bool has_pos = false, has_neg = false;
    check_labels(labels);
    for (int l : labels) (l == 1 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
        throw DataError("youden_threshold needs both classes in the validation set");

    for (double s : scores)
        if (!std::isfinite(s)) throw DataError("youden_threshold: non-finite score");

    std::vector<double> uniq(scores);
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    std::vector<double> candidates;
    for (size_t i = 0; i + 1 < uniq.size(); ++i)
        candidates.push_back(0.5 * (uniq[i] + uniq[i + 1]));
    candidates.push_back(uniq.back());  // nobody positive: sens 0, spec 1

    double best_thr = candidates.front(), best_j = -1.0;
    for (double thr : candidates) {
        auto [sens, spec] = sens_spec(scores, labels, thr);
        const double j = sens + spec;
        if (j > best_j) {  // ties keep the earlier, lower threshold
            best_j = j;
            best_thr = thr;
        }
    }
    return best_thr;
}

CiTriple bootstrap_ci(const std::function<double(const std::vector<size_t>&)>& metric,
                      const std::vector<int>& labels, int B, double alpha, uint64_t seed,
                      bool stratified) {
    if (B < 100) throw ConfigError("bootstrap_ci needs B >= 100");
    if (!(alpha > 0 && alpha < 1)) throw ConfigError("bootstrap_ci: alpha must be in (0, 1)");
    const size_t n = labels.size();
    if (n == 0) throw DataError("bootstrap_ci: no cases");
    check_labels(labels);

    std::vector<size_t> identity(n);
    std::iota(identity.begin(), identity.end(), size_t(0));
    const double point = metric(identity);
    if (std::isnan(point)) throw DataError("bootstrap_ci: metric undefined on the full sample");

    std::vector<size_t> pos_idx, neg_idx;
    if (stratified) {
        for (size_t i = 0; i < n; ++i) (labels[i] == 1 ? pos_idx : neg_idx).push_back(i);
        if (pos_idx.empty() || neg_idx.empty())
            throw DataError("stratified bootstrap needs both classes");
    }

    const int64_t cap = 10LL * B;
    int64_t redraws = 0;
    std::vector<double> vals(static_cast<size_t>(B));
    std::vector<size_t> idx(n);
    for (int b = 0; b < B; ++b) {
        for (uint64_t attempt = 0;; ++attempt) {
            Rng rng = Rng::keyed(seed, uint64_t(b), attempt);
            if (stratified) {
                size_t k = 0;
                for (size_t d = 0; d < pos_idx.size(); ++d)
                    idx[k++] = pos_idx[size_t(rng.uniform_int(int(pos_idx.size())))];
                for (size_t d = 0; d < neg_idx.size(); ++d)
                    idx[k++] = neg_idx[size_t(rng.uniform_int(int(neg_idx.size())))];
            } else {
                for (size_t d = 0; d < n; ++d) idx[d] = size_t(rng.uniform_int(int(n)));
            }
            const double v = metric(idx);
            if (!std::isnan(v)) {
                vals[size_t(b)] = v;
                break;
            }
            if (++redraws > cap)
                throw ConfigError(
                    "bootstrap_ci: metric undefined on too many replicas; "
                    "enable stratified resampling");
        }
    }
    std::sort(vals.begin(), vals.end());
    const int lo_i = std::max(0, int(std::ceil(alpha / 2 * B)) - 1);
    const int hi_i = B - 1 - lo_i;
    CiTriple ci;
    ci.point = point;
    ci.low = std::min(vals[size_t(lo_i)], point);  // percentile interval, point included
    ci.high = std::max(vals[size_t(hi_i)], point);
    return ci;
}

DelongResult delong_test(const std::vector<double>& scores_a,
                         const std::vector<double>& scores_b, const std::vector<int>& labels) {
    check_paired(scores_a.size(), scores_b.size(), labels.size());
    check_labels(labels);
    std::vector<size_t> pos, neg;
    for (size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(i);
    if (pos.empty() || neg.empty())
        throw DataError("delong_test is undefined when only one class is present");

    auto placements = [&](const std::vector<double>& s, std::vector<double>& v10,
                          std::vector<double>& v01) {
        v10.assign(pos.size(), 0.0);
        v01.assign(neg.size(), 0.0);
        for (size_t i = 0; i < pos.size(); ++i)
            for (size_t j = 0; j < neg.size(); ++j) {
                const double w = psi(s[pos[i]], s[neg[j]]);
                v10[i] += w;
                v01[j] += w;
            }
        for (double& v : v10) v /= double(neg.size());
        for (double& v : v01) v /= double(pos.size());
    };
    std::vector<double> v10a, v01a, v10b, v01b;
    placements(scores_a, v10a, v01a);
    placements(scores_b, v10b, v01b);

    DelongResult r;
    r.auc_a = std::accumulate(v10a.begin(), v10a.end(), 0.0) / double(pos.size());
    r.auc_b = std::accumulate(v10b.begin(), v10b.end(), 0.0) / double(pos.size());
    const double var = (sample_cov(v10a, v10a) + sample_cov(v10b, v10b) -
                        2 * sample_cov(v10a, v10b)) / double(pos.size()) +
                       (sample_cov(v01a, v01a) + sample_cov(v01b, v01b) -
                        2 * sample_cov(v01a, v01b)) / double(neg.size());
    if (!(var > 0) || !std::isfinite(var)) {
        r.degenerate = true;
        if (r.auc_a == r.auc_b) {
            r.z = 0.0;
            r.p = 1.0;
        } else {
            r.z = r.auc_a > r.auc_b ? std::numeric_limits<double>::infinity()
                                    : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
        }
        return r;
    }
    r.z = (r.auc_a - r.auc_b) / std::sqrt(var);
    r.p = normal_two_sided_p(r.z);
    return r;
}

double permutation_test(const std::vector<int>& preds_a, const std::vector<int>& preds_b,
                        const std::vector<int>& labels, RateKind kind, int R, uint64_t seed) {
    check_paired(preds_a.size(), preds_b.size(), labels.size());
    check_labels(labels);
    for (size_t i = 0; i < preds_a.size(); ++i)
        if ((preds_a[i] != 0 && preds_a[i] != 1) || (preds_b[i] != 0 && preds_b[i] != 1))
            throw DataError("permutation_test: predictions must be 0 or 1");
    if (R < 1) throw ConfigError("permutation_test needs R >= 1");

    const int want_label = kind == RateKind::kSensitivity ? 1 : 0;
    const int want_pred = kind == RateKind::kSensitivity ? 1 : 0;
    std::vector<size_t> stratum;
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == want_label) stratum.push_back(i);
    if (stratum.empty())
        throw DataError("permutation_test: no cases carry the label the rate is defined over");

    auto rate_diff = [&](const std::vector<int>& pa, const std::vector<int>& pb) {
        int ca = 0, cb = 0;
        for (size_t i : stratum) {
            ca += pa[i] == want_pred;
            cb += pb[i] == want_pred;
        }
        return std::abs(double(ca) - double(cb)) / double(stratum.size());
    };
    const double observed = rate_diff(preds_a, preds_b);

    std::vector<int> pa(preds_a), pb(preds_b);
    int64_t count = 0;
    for (int r = 0; r < R; ++r) {
        Rng rng = Rng::keyed(seed, uint64_t(r));
        pa = preds_a;
        pb = preds_b;
        for (size_t i : stratum)
            if (rng.bernoulli(0.5)) std::swap(pa[i], pb[i]);
        if (rate_diff(pa, pb) >= observed - 1e-12) ++count;
    }
    return double(count + 1) / double(R + 1);
}

LocResult localization_hit(const std::vector<uint8_t>& pred_mask,
                           const std::vector<uint8_t>& gt_mask, int label) {
    if (pred_mask.size() != gt_mask.size())
        throw ShapeError("localization_hit: mask extents differ");
    int64_t a = 0, b = 0, inter = 0;
    for (size_t i = 0; i < pred_mask.size(); ++i) {
        const bool pa = pred_mask[i] != 0, pb = gt_mask[i] != 0;
        a += pa;
        b += pb;
        inter += pa && pb;
    }
    LocResult r;
    if (a + b == 0) {
        r.dice = 1.0;  // nothing predicted, nothing to find
        r.hit = label == 0;
        return r;
    }
    r.dice = 2.0 * double(inter) / double(a + b);
    r.hit = r.dice > 0.01;
    return r;
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ShapeError("roc_curve: scores and labels differ in length");
    check_labels(labels);
    double n_pos = 0, n_neg = 0;
    for (int l : labels) (l == 1 ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0)
        throw DataError("roc_curve is undefined when only one class is present");
    for (double s : scores)
        if (!std::isfinite(s)) throw DataError("roc_curve: non-finite score");

    std::vector<double> uniq(scores);
    std::sort(uniq.begin(), uniq.end(), std::greater<>());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    std::vector<double> thresholds(uniq);
    thresholds.push_back(uniq.back() - 1.0);  // everyone positive

    std::vector<RocPoint> roc;
    for (double thr : thresholds) {
        double tp = 0, fp = 0;
        for (size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] > thr) (labels[i] == 1 ? tp : fp) += 1;
        }
        roc.push_back({fp / n_neg, tp / n_pos, thr});
    }
    return roc;
}

EvalReport build_report(const std::vector<CaseScore>& cases, int bootstrap_b, uint64_t seed,
                        double threshold) {
    if (cases.empty()) throw DataError("build_report: no cases");
    std::vector<double> scores(cases.size());
    std::vector<int> labels(cases.size());
    for (size_t i = 0; i < cases.size(); ++i) {
        const CaseScore& c = cases[i];
        if (!std::isfinite(c.score) || c.score < 0.0 || c.score > 1.0)
            throw DataError("case " + c.id + ": score must be a probability in [0, 1]");
        if (c.label != 0 && c.label != 1)
            throw DataError("case " + c.id + ": label must be 0 or 1");
        scores[i] = c.score;
        labels[i] = c.label;
    }

    EvalReport rep;
    rep.cases = cases;
    for (int l : labels) (l == 1 ? rep.n_pos : rep.n_neg) += 1;
    if (rep.n_pos == 0 || rep.n_neg == 0)
        throw DataError("build_report needs both classes in the evaluated split");
    rep.threshold = std::isnan(threshold) ? youden_threshold(scores, labels) : threshold;

    auto gathered = [&](const std::vector<size_t>& idx, std::vector<double>& s,
                        std::vector<int>& l, bool& both) {
        s.resize(idx.size());
        l.resize(idx.size());
        bool pos = false, neg = false;
        for (size_t k = 0; k < idx.size(); ++k) {
            s[k] = scores[idx[k]];
            l[k] = labels[idx[k]];
            (l[k] == 1 ? pos : neg) = true;
        }
        both = pos && neg;
    };
    auto auc_metric = [&](const std::vector<size_t>& idx) {
        std::vector<double> s;
        std::vector<int> l;
        bool both;
        gathered(idx, s, l, both);
        return both ? auc(s, l) : kNan;
    };
    auto rate_metric = [&](bool sens) {
        return [&, sens](const std::vector<size_t>& idx) {
            std::vector<double> s;
            std::vector<int> l;
            bool both;
            gathered(idx, s, l, both);
            auto [sn, sp] = sens_spec(s, l, rep.threshold);
            return sens ? sn : sp;
        };
    };
    rep.auc = bootstrap_ci(auc_metric, labels, bootstrap_b, 0.05, mix_key(seed, 1));
    rep.sens = bootstrap_ci(rate_metric(true), labels, bootstrap_b, 0.05, mix_key(seed, 2));
    rep.spec = bootstrap_ci(rate_metric(false), labels, bootstrap_b, 0.05, mix_key(seed, 3));

    std::vector<size_t> pos_idx;
    int hits = 0;
    for (size_t i = 0; i < cases.size(); ++i)
        if (cases[i].label == 1) {
            pos_idx.push_back(i);
            hits += cases[i].localization_hit;
        }
    rep.localization_rate = double(hits) / double(pos_idx.size());

    // size strata: contiguous quartile groups of positives by GT tumor volume
    std::sort(pos_idx.begin(), pos_idx.end(), [&](size_t a, size_t b) {
        return cases[a].gt_tumor_voxels != cases[b].gt_tumor_voxels
                   ? cases[a].gt_tumor_voxels < cases[b].gt_tumor_voxels
                   : a < b;
    });
    const size_t np = pos_idx.size();
    for (int q = 0; q < 4; ++q) {
        const size_t lo = np * size_t(q) / 4, hi = np * size_t(q + 1) / 4;
        StratumRate st;
        st.n = int(hi - lo);
        if (st.n > 0) {
            st.lo_volume = double(cases[pos_idx[lo]].gt_tumor_voxels);
            st.hi_volume = double(cases[pos_idx[hi - 1]].gt_tumor_voxels);
            for (size_t k = lo; k < hi; ++k)
                st.detected += cases[pos_idx[k]].score > rep.threshold;
            st.rate = double(st.detected) / double(st.n);
        }
        rep.strata.push_back(st);
    }

    rep.roc = roc_curve(scores, labels);
    return rep;
}

namespace {

json ci_to_json(const CiTriple& ci) {
    return json{{"low", ci.low}, {"point", ci.point}, {"high", ci.high}};
}

CiTriple ci_from_json(const json& j) {
    return {j.at("low").get<double>(), j.at("point").get<double>(),
            j.at("high").get<double>()};
}

}  // namespace

std::string report_to_json(const EvalReport& rep) {
    json j;
    j["version"] = 1;
    j["kind"] = "cimt-eval-report";
    j["n_pos"] = rep.n_pos;
    j["n_neg"] = rep.n_neg;
    j["threshold"] = rep.threshold;
    j["auc"] = ci_to_json(rep.auc);
    j["sens"] = ci_to_json(rep.sens);
    j["spec"] = ci_to_json(rep.spec);
    j["localization_rate"] = rep.localization_rate;
    j["strata"] = json::array();
    for (const StratumRate& s : rep.strata)
        j["strata"].push_back(json{{"lo_volume", s.lo_volume},
                                   {"hi_volume", s.hi_volume},
                                   {"n", s.n},
                                   {"detected", s.detected},
                                   {"rate", s.rate}});
    j["roc"] = json::array();
    for (const RocPoint& p : rep.roc)
        j["roc"].push_back(json{{"fpr", p.fpr}, {"tpr", p.tpr}, {"threshold", p.threshold}});
    j["cases"] = json::array();
    for (const CaseScore& c : rep.cases)
        j["cases"].push_back(json{{"id", c.id},
                                  {"score", c.score},
                                  {"label", c.label},
                                  {"tumor_voxels", c.tumor_voxels},
                                  {"gt_tumor_voxels", c.gt_tumor_voxels},
                                  {"dice", c.dice},
                                  {"localization_hit", c.localization_hit}});
    j["p_values"] = rep.p_values;
    return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(std::string("eval report is not valid JSON: ") + e.what());
    }
    try {
        if (j.at("version").get<int>() != 1)
            throw DataError("unsupported eval report version");
        if (j.at("kind").get<std::string>() != "cimt-eval-report")
            throw DataError("not an eval report");
        EvalReport rep;
        rep.n_pos = j.at("n_pos").get<int>();
        rep.n_neg = j.at("n_neg").get<int>();
        rep.threshold = j.at("threshold").get<double>();
        rep.auc = ci_from_json(j.at("auc"));
        rep.sens = ci_from_json(j.at("sens"));
        rep.spec = ci_from_json(j.at("spec"));
        rep.localization_rate = j.at("localization_rate").get<double>();
        for (const json& s : j.at("strata")) {
            StratumRate st;
            st.lo_volume = s.at("lo_volume").get<double>();
            st.hi_volume = s.at("hi_volume").get<double>();
            st.n = s.at("n").get<int>();
            st.detected = s.at("detected").get<int>();
            st.rate = s.at("rate").get<double>();
            rep.strata.push_back(st);
        }
        for (const json& p : j.at("roc"))
            rep.roc.push_back({p.at("fpr").get<double>(), p.at("tpr").get<double>(),
                               p.at("threshold").get<double>()});
        for (const json& c : j.at("cases")) {
            CaseScore cs;
            cs.id = c.at("id").get<std::string>();
            cs.score = c.at("score").get<double>();
            cs.label = c.at("label").get<int>();
            cs.tumor_voxels = c.at("tumor_voxels").get<int64_t>();
            cs.gt_tumor_voxels = c.at("gt_tumor_voxels").get<int64_t>();
            cs.dice = c.at("dice").get<double>();
            cs.localization_hit = c.at("localization_hit").get<bool>();
            rep.cases.push_back(cs);
        }
        rep.p_values = j.at("p_values").get<std::map<std::string, double>>();
        return rep;
    } catch (const json::exception& e) {
        throw DataError(std::string("eval report is missing fields: ") + e.what());
    }
}

std::string roc_to_csv(const std::vector<RocPoint>& roc) {
    std::ostringstream os;
    os << "fpr,tpr,threshold\n";
    os.precision(17);
    for (const RocPoint& p : roc) os << p.fpr << "," << p.tpr << "," << p.threshold << "\n";
    return os.str();
}

}  // namespace cimt
