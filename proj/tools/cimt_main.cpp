// cimt: stomach-phantom segmentation + classification workbench.
// Subcommands: gen, train, eval, compare, gradcheck. Exit codes: 0 ok,
// 1 failed check, 2 config, 3 data/io, 4 divergence, 5 checkpoint, 6 pairing.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "cimt/checkpoint.hpp"
#include "cimt/config.hpp"
#include "cimt/train.hpp"
#include "json.hpp"

namespace {

using namespace cimt;
using nlohmann::json;
namespace fs = std::filesystem;

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("short write to " + path.string());
}

RunConfig load_or_default(const std::string& path) {
    return path.empty() ? config_from_json_text("{}") : load_config(path);
}

std::string fmt(double v, int prec = 4) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

std::string fmt_p(double p) {
    std::ostringstream os;
    os << std::setprecision(4) << p;
    return os.str();
}

// ---- gen ----

struct GenArgs {
    std::string config, out;
    uint64_t seed = 0;
    bool seed_set = false;
    bool dry_run = false;
};

int cmd_gen(const GenArgs& a) {
    RunConfig cfg = load_or_default(a.config);
    if (a.seed_set) cfg.data.base_seed = a.seed;
    DatasetIndex idx = make_splits(cfg.data.n_train, cfg.data.n_val, cfg.data.n_test,
                                   cfg.data.prevalence, cfg.data.base_seed,
                                   cfg.data.difficulty, cfg.data.extents);

    std::cout << std::left << std::setw(8) << "split" << std::right << std::setw(8) << "cases"
              << std::setw(10) << "positive" << std::setw(12) << "prevalence" << "\n";
    for (const char* name : {"train", "val", "test"}) {
        const auto entries = idx.split(name);
        int pos = 0;
        for (const DatasetEntry* e : entries) pos += e->label;
        const double prev = entries.empty() ? 0.0 : double(pos) / double(entries.size());
        std::cout << std::left << std::setw(8) << name << std::right << std::setw(8)
                  << entries.size() << std::setw(10) << pos << std::setw(12) << fmt(prev, 3)
                  << "\n";
    }

    if (a.dry_run) {
        std::cerr << "dry run: nothing written\n";
        return 0;
    }
    save_dataset(idx, a.out);
    write_text(fs::path(a.out) / "config.json", config_to_json_text(cfg));
    std::cerr << "wrote dataset to " << a.out << "\n";
    return 0;
}

// ---- train ----

struct TrainArgs {
    std::string config, data, out, preset;
    uint64_t seed = 0;
    bool seed_set = false;
    bool resume = false;
};

int cmd_train(const TrainArgs& a) {
    RunConfig cfg = load_or_default(a.config);
    if (!a.preset.empty()) cfg.train.preset = a.preset;
    if (a.seed_set) cfg.train.seed = a.seed;
    const std::string hash = config_hash(cfg);

    TrainResult r = train_model(a.data, cfg.model, cfg.train, a.out, hash, a.resume);
    write_text(fs::path(a.out) / "config.json", config_to_json_text(cfg));

    std::cout << "preset=" << cfg.train.preset << " config_hash=" << hash
              << " epochs_run=" << r.epochs_run << " best_val_auc=" << fmt(r.best_val_auc)
              << " final_val_auc=" << fmt(r.final_val_auc) << "\n";
    std::cerr << "checkpoints: " << r.last_dir << " " << r.best_dir << "\n";
    return 0;
}

// ---- eval ----

struct EvalArgs {
    std::string checkpoint, data, split = "test", out, config, preset;
    uint64_t seed = 0;
    bool seed_set = false;
    bool oracle_roi = false;
    bool all_negative = false;
    int jobs = 1;
};

std::vector<CaseScore> score_split(const std::string& data_dir, const DatasetIndex& idx,
                                   const std::string& split, const ParamStore& ps,
                                   const ModelDims& dims, const std::string& preset,
                                   bool oracle_roi, int jobs) {
    const auto entries = idx.split(split);
    std::vector<CaseScore> out(entries.size());
    const int workers = std::max(1, std::min<int>(jobs, int(entries.size())));
    if (workers == 1) {
        for (size_t i = 0; i < entries.size(); ++i)
            out[i] = infer_case(load_case(data_dir, idx, *entries[i]), ps, dims, preset,
                                oracle_roi);
        return out;
    }
    std::atomic<size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= entries.size()) return;
            try {
                out[i] = infer_case(load_case(data_dir, idx, *entries[i]), ps, dims, preset,
                                    oracle_roi);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    if (err) std::rethrow_exception(err);
    return out;
}

json case_json(const CaseScore& c) {
    return json{{"id", c.id},
                {"score", c.score},
                {"label", c.label},
                {"tumor_voxels", c.tumor_voxels},
                {"gt_tumor_voxels", c.gt_tumor_voxels},
                {"dice", c.dice},
                {"localization_hit", c.localization_hit}};
}

int cmd_eval(const EvalArgs& a) {
    LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
    if (!a.preset.empty() && a.preset != ck.meta.preset)
        throw CheckpointError("checkpoint was trained with preset " + ck.meta.preset +
                              ", not " + a.preset);

    RunConfig cfg = load_or_default(a.config);
    const uint64_t seed = a.seed_set ? a.seed : cfg.eval.seed;
    const bool oracle = a.oracle_roi || cfg.eval.oracle_roi;

    DatasetIndex idx = load_dataset_index(a.data);
    if (idx.split(a.split).empty()) throw ConfigError("split '" + a.split + "' is empty");
    std::vector<CaseScore> cases =
        score_split(a.data, idx, a.split, ck.params, ck.meta.dims, ck.meta.preset, oracle,
                    a.jobs);
    fs::create_directories(a.out);

    const auto thr_it = ck.meta.extra.find("threshold.score");
    const double thr =
        thr_it != ck.meta.extra.end() && std::isfinite(thr_it->second) ? thr_it->second : kNan;

    if (a.all_negative) {
        // specificity-only cohort: AUC and sensitivity are undefined by design
        for (const CaseScore& c : cases)
            if (c.label == 1)
                throw DataError("--all-negative-cohort: case " + c.id + " is positive");
        if (std::isnan(thr))
            throw DataError("checkpoint carries no finite operating threshold");
        std::vector<double> scores;
        std::vector<int> labels(cases.size(), 0);
        for (const CaseScore& c : cases) scores.push_back(c.score);
        auto spec_of = [&](const std::vector<size_t>& sel) {
            int tn = 0;
            for (size_t i : sel) tn += scores[i] <= thr;
            return double(tn) / double(sel.size());
        };
        CiTriple spec = bootstrap_ci(spec_of, labels, cfg.eval.bootstrap_b, cfg.eval.alpha,
                                     seed, false);

        json j;
        j["version"] = 1;
        j["kind"] = "cimt-eval-negative-cohort";
        j["preset"] = ck.meta.preset;
        j["config_hash"] = ck.meta.config_hash;
        j["split"] = a.split;
        j["oracle_roi"] = oracle;
        j["n_pos"] = 0;
        j["n_neg"] = int(cases.size());
        j["threshold"] = thr;
        j["auc"] = nullptr;
        j["sens"] = nullptr;
        j["spec"] = json{{"low", spec.low}, {"point", spec.point}, {"high", spec.high}};
        j["cases"] = json::array();
        for (const CaseScore& c : cases) j["cases"].push_back(case_json(c));
        write_text(fs::path(a.out) / "report.json", j.dump(2) + "\n");

        std::cout << "n_neg=" << cases.size() << " spec=" << fmt(spec.point) << " ["
                  << fmt(spec.low) << ", " << fmt(spec.high) << "] auc=undefined"
                  << " sens=undefined\n";
        std::cerr << "wrote " << (fs::path(a.out) / "report.json").string() << "\n";
        return 0;
    }

    EvalReport rep = build_report(cases, cfg.eval.bootstrap_b, seed, thr);
    json j = json::parse(report_to_json(rep));
    j["preset"] = ck.meta.preset;
    j["config_hash"] = ck.meta.config_hash;
    j["split"] = a.split;
    j["oracle_roi"] = oracle;
    write_text(fs::path(a.out) / "report.json", j.dump(2) + "\n");
    write_text(fs::path(a.out) / "roc.csv", roc_to_csv(rep.roc));

    std::cout << "n=" << cases.size() << " (" << rep.n_pos << " pos) auc=" << fmt(rep.auc.point)
              << " [" << fmt(rep.auc.low) << ", " << fmt(rep.auc.high) << "]"
              << " sens=" << fmt(rep.sens.point) << " spec=" << fmt(rep.spec.point)
              << " localization=" << fmt(rep.localization_rate)
              << " threshold=" << fmt(rep.threshold, 6) << "\n";
    std::cerr << "wrote " << (fs::path(a.out) / "report.json").string() << " and roc.csv\n";
    return 0;
}

// ---- compare ----

struct CompareArgs {
    std::string report_a, report_b;
    uint64_t seed = 2024;
    int permutations = 10000;
    bool csv = false;
};

int cmd_compare(const CompareArgs& a) {
    EvalReport ra = report_from_json(read_text(a.report_a));
    EvalReport rb = report_from_json(read_text(a.report_b));

    std::map<std::string, const CaseScore*> by_id;
    for (const CaseScore& c : rb.cases) by_id[c.id] = &c;
    if (ra.cases.size() != rb.cases.size() || by_id.size() != rb.cases.size())
        throw PairingError("reports cover different case sets (" +
                           std::to_string(ra.cases.size()) + " vs " +
                           std::to_string(rb.cases.size()) + " cases)");

    std::vector<const CaseScore*> sorted_a;
    for (const CaseScore& c : ra.cases) sorted_a.push_back(&c);
    std::sort(sorted_a.begin(), sorted_a.end(),
              [](const CaseScore* x, const CaseScore* y) { return x->id < y->id; });

    std::vector<double> sa, sb;
    std::vector<int> labels, pa, pb;
    for (const CaseScore* c : sorted_a) {
        const auto it = by_id.find(c->id);
        if (it == by_id.end()) throw PairingError("case " + c->id + " missing from report B");
        if (it->second->label != c->label)
            throw PairingError("case " + c->id + " has different labels in the two reports");
        sa.push_back(c->score);
        sb.push_back(it->second->score);
        labels.push_back(c->label);
        pa.push_back(c->score > ra.threshold ? 1 : 0);
        pb.push_back(it->second->score > rb.threshold ? 1 : 0);
    }

    const DelongResult dl = delong_test(sa, sb, labels);
    const double p_sens = permutation_test(pa, pb, labels, RateKind::kSensitivity,
                                           a.permutations, mix_key(a.seed, 1));
    const double p_spec = permutation_test(pa, pb, labels, RateKind::kSpecificity,
                                           a.permutations, mix_key(a.seed, 2));
    const auto [sens_a, spec_a] = sens_spec(sa, labels, ra.threshold);
    const auto [sens_b, spec_b] = sens_spec(sb, labels, rb.threshold);

    struct Row {
        const char* metric;
        double va, vb, p;
        const char* marker;  // Table-1-style flag, shown when p < 0.05
    };
    const Row rows[3] = {
        {"auc", dl.auc_a, dl.auc_b, dl.p, "\xe2\x80\xa0"},
        {"sensitivity", sens_a, sens_b, p_sens, "*"},
        {"specificity", spec_a, spec_b, p_spec, "*"},
    };

    if (a.csv) {
        std::cout << "metric,model_a,model_b,diff,p,significant\n";
        for (const Row& r : rows)
            std::cout << r.metric << "," << fmt(r.va, 6) << "," << fmt(r.vb, 6) << ","
                      << fmt(r.va - r.vb, 6) << "," << fmt_p(r.p) << ","
                      << (r.p < 0.05 ? 1 : 0) << "\n";
        return 0;
    }

    std::cout << std::left << std::setw(13) << "metric" << std::right << std::setw(10)
              << "model_a" << std::setw(10) << "model_b" << std::setw(10) << "diff"
              << std::setw(10) << "p" << "\n";
    for (const Row& r : rows) {
        std::cout << std::left << std::setw(13) << r.metric << std::right << std::setw(10)
                  << fmt(r.va) << std::setw(10) << fmt(r.vb) << std::setw(10)
                  << fmt(r.va - r.vb) << std::setw(10) << fmt_p(r.p);
        if (r.p < 0.05) std::cout << " " << r.marker;
        std::cout << "\n";
    }
    return 0;
}

// ---- gradcheck ----

struct GradcheckArgs {
    std::string preset = "all";
    uint64_t seed = 1;
};

struct CheckRow {
    std::string name;
    double err;
    double tol;
};

// central-difference step: truncation error is O(eps^2) and these composite
// losses carry large third derivatives, while f64 roundoff O(1e-16/eps) only
// bites below ~1e-9; 1e-7 sits comfortably between the two regimes
constexpr double kFdEps = 1e-7;

// micro-model scale: all presets share one tiny volume
ModelDims micro_dims() {
    ModelDims d;
    d.base_width = 2;
    d.embed_dim = 8;
    d.num_heads = 2;
    d.num_queries = 4;
    d.cls_hidden = 8;
    return d;
}

std::vector<uint8_t> micro_labels(Rng& rng, int64_t voxels) {
    std::vector<uint8_t> y(static_cast<size_t>(voxels));
    for (auto& v : y) v = uint8_t(rng.uniform_int(3));
    y[0] = 0;
    y[1] = 1;
    y[2] = 2;  // all classes present
    return y;
}

void check_param(std::vector<CheckRow>& rows, const std::string& label, double tol,
                 const ParamStore64& ps, const std::string& name,
                 const std::function<Tensor64(const ParamStore64&)>& loss) {
    auto f = [&](const Tensor64& w) {
        ParamStore64 p2 = ps;
        p2.get(name) = w;
        return loss(p2);
    };
    const double err = grad_check_scaled<double>(f, ps.get(name).clone(), kFdEps);
    rows.push_back({label + " d/d " + name, err, tol});
}

void gradcheck_unet(std::vector<CheckRow>& rows, bool joint, uint64_t seed) {
    const ModelDims dims = micro_dims();
    Rng rng = Rng::keyed(seed, joint ? 11 : 10);
    ParamStore64 ps;
    unet_init(ps, dims, rng);
    if (joint) {
        const int in = 8 * dims.base_width;
        auto glorot = [&](int out_n, int in_n) {
            return Tensor64::randn(Shape{out_n, in_n}, rng,
                                   std::sqrt(2.0 / (double(in_n) + double(out_n))));
        };
        ps.put("cls.fc1.w", glorot(dims.cls_hidden, in));
        ps.put("cls.fc1.b", Tensor64::zeros(Shape{dims.cls_hidden}));
        ps.put("cls.fc2.w", glorot(2, dims.cls_hidden));
        ps.put("cls.fc2.b", Tensor64::zeros(Shape{2}));
    }
    Tensor64 x = Tensor64::randn(Shape{1, 8, 8, 8}, rng);
    const std::vector<uint8_t> y = micro_labels(rng, 512);
    const Tensor64 onehot = onehot_labels<double>(y, dims.num_classes);

    auto loss = [&](const ParamStore64& p, const Tensor64& in) {
        auto [pyr, seg] = unet_forward(in, p, dims);
        auto [d, ce] = seg_loss(reshape(seg, Shape{dims.num_classes, 512}), onehot);
        Tensor64 total = add(d, ce);
        if (joint) {
            Tensor64 h = global_pool3(pyr.levels.front(), PoolKind::kAvg);
            Tensor64 row = reshape(h, Shape{1, h.extent(0)});
            Tensor64 hid = gelu(linear(row, p.get("cls.fc1.w"), p.get("cls.fc1.b")));
            Tensor64 logits = linear(hid, p.get("cls.fc2.w"), p.get("cls.fc2.b"));
            Tensor64 target = Tensor64::zeros(Shape{1, 2});
            target.values()[1] = 1.0;
            total = add(total, softmax_xent_mean(logits, target, 1));
        }
        return total;
    };

    const std::string tag = joint ? "unet-joint" : "unet-s4c";
    const double tol = 1e-3;
    const double err = grad_check_scaled<double>(
        [&](const Tensor64& in) { return loss(ps, in); }, x.clone(), kFdEps);
    rows.push_back({tag + " d/d input", err, tol});
    auto ploss = [&](const ParamStore64& p) { return loss(p, x); };
    check_param(rows, tag, tol, ps, "backbone.seghead.conv.w", ploss);
    check_param(rows, tag, tol, ps, "backbone.enc0.conv1.b", ploss);
    check_param(rows, tag, tol, ps, "backbone.dec0.norm2.g", ploss);
    if (joint) {
        check_param(rows, tag, tol, ps, "cls.fc1.w", ploss);
        check_param(rows, tag, tol, ps, "cls.fc2.b", ploss);
    }
}

void gradcheck_cimt(std::vector<CheckRow>& rows, uint64_t seed) {
    const ModelDims dims = micro_dims();
    Rng rng = Rng::keyed(seed, 12);
    ParamStore64 ps;
    unet_init(ps, dims, rng);
    maskformer_init(ps, dims, rng);
    Tensor64 x = Tensor64::randn(Shape{1, 8, 8, 8}, rng);
    const std::vector<uint8_t> y = micro_labels(rng, 512);

    LossWeights w;  // seg + cls + deep supervision
    auto loss = [&](const ParamStore64& p, const Tensor64& in) {
        auto [pyr, seg] = unet_forward(in, p, dims);
        MaskFormerOutT<double> out = maskformer_forward(pyr, p, dims);
        return joint_loss(out, p, dims, y, 1, w).total;
    };

    const double tol = 1e-3;
    const double err = grad_check_scaled<double>(
        [&](const Tensor64& in) { return loss(ps, in); }, x.clone(), kFdEps);
    rows.push_back({"cimt d/d input", err, tol});
    auto ploss = [&](const ParamStore64& p) { return loss(p, x); };
    check_param(rows, "cimt", tol, ps, "decoder.queries", ploss);
    check_param(rows, "cimt", tol, ps, "decoder.stage0.cross.v.w", ploss);
    check_param(rows, "cimt", tol, ps, "head.cls.fc1.w", ploss);
    check_param(rows, "cimt", tol, ps, "backbone.enc0.conv1.w", ploss);

    // hard cluster assignment: without deep supervision no path reaches Q/K
    ps.set_requires_grad_all(true);
    ps.zero_grad_all();
    LossWeights no_deep;
    no_deep.deep = 0.0;
    auto [pyr, seg] = unet_forward(x, ps, dims);
    MaskFormerOutT<double> out = maskformer_forward(pyr, ps, dims);
    backward(joint_loss(out, ps, dims, y, 1, no_deep).total);
    double qk_max = 0.0;
    for (const auto& [name, t] : ps) {
        const bool qk = name.find(".cross.q.") != std::string::npos ||
                        name.find(".cross.k.") != std::string::npos;
        if (!qk || !t.has_grad()) continue;
        for (double g : t.grad_values()) qk_max = std::max(qk_max, std::abs(g));
    }
    ps.zero_grad_all();
    rows.push_back({"cimt q/k grad via hard assignment (exact)", qk_max, 0.0});
}

int cmd_gradcheck(const GradcheckArgs& a) {
    if (a.preset != "all" && a.preset != "cimt" && a.preset != "unet-s4c" &&
        a.preset != "unet-joint")
        throw ConfigError("unknown preset: " + a.preset +
                          " (expected cimt, unet-s4c, unet-joint, or all)");
    std::vector<CheckRow> rows;
    if (a.preset == "all" || a.preset == "unet-s4c") gradcheck_unet(rows, false, a.seed);
    if (a.preset == "all" || a.preset == "unet-joint") gradcheck_unet(rows, true, a.seed);
    if (a.preset == "all" || a.preset == "cimt") gradcheck_cimt(rows, a.seed);

    int failures = 0;
    for (const CheckRow& r : rows) {
        const bool ok = r.err <= r.tol;
        failures += !ok;
        std::cout << (ok ? "PASS " : "FAIL ") << r.name << "  max_rel_err="
                  << std::setprecision(3) << std::scientific << r.err << std::defaultfloat
                  << "  tol=" << r.tol << "\n";
    }
    std::cout << (failures == 0 ? "all gradient checks passed"
                                : std::to_string(failures) + " gradient check(s) failed")
              << " (" << rows.size() << " checks)\n";
    return failures == 0 ? 0 : 1;
}

// ---- dispatch ----

int run(int argc, char** argv) {
    CLI::App app{"stomach-phantom segmentation + classification workbench"};
    app.require_subcommand(1);
    app.footer("exit codes: 0 ok, 1 failed check, 2 config error, 3 data/io error,\n"
               "4 training divergence, 5 checkpoint error, 6 report pairing error");
    std::string workdir;
    app.add_option("--workdir", workdir, "run with this working directory");

    GenArgs g;
    CLI::App* gen = app.add_subcommand("gen", "generate a phantom dataset");
    gen->add_option("--config", g.config, "run config JSON");
    gen->add_option("--out", g.out, "output dataset directory")->required();
    CLI::Option* g_seed =
        gen->add_option("--seed", g.seed, "override data.base_seed")->envname("CIMT_SEED");
    gen->add_flag("--dry-run", g.dry_run, "print the split summary and write nothing");

    TrainArgs t;
    CLI::App* train = app.add_subcommand("train", "train a model preset");
    train->add_option("--config", t.config, "run config JSON");
    train->add_option("--data", t.data, "dataset directory")->required();
    train->add_option("--out", t.out, "run output directory")->required();
    train->add_option("--preset", t.preset, "cimt | unet-s4c | unet-joint");
    CLI::Option* t_seed =
        train->add_option("--seed", t.seed, "override train.seed")->envname("CIMT_SEED");
    train->add_flag("--resume", t.resume, "continue from <out>/last");

    EvalArgs e;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    eval->add_option("--checkpoint", e.checkpoint, "checkpoint directory")->required();
    eval->add_option("--data", e.data, "dataset directory")->required();
    eval->add_option("--split", e.split, "train | val | test (default test)");
    eval->add_option("--out", e.out, "report output directory")->required();
    eval->add_option("--config", e.config, "run config JSON (eval section)");
    eval->add_option("--preset", e.preset, "assert the checkpoint preset");
    CLI::Option* e_seed =
        eval->add_option("--seed", e.seed, "override eval.seed")->envname("CIMT_SEED");
    eval->add_flag("--oracle-roi", e.oracle_roi, "crop at the ground-truth ROI box");
    eval->add_flag("--all-negative-cohort", e.all_negative,
                   "specificity-only report for a split with no positives");
    eval->add_option("--jobs", e.jobs, "parallel evaluation workers")
        ->check(CLI::Range(1, 256));

    CompareArgs c;
    CLI::App* compare = app.add_subcommand("compare", "significance tests between two reports");
    compare->add_option("--report-a", c.report_a, "first report.json")->required();
    compare->add_option("--report-b", c.report_b, "second report.json")->required();
    compare->add_option("--permutations", c.permutations, "permutation test replicas")
        ->check(CLI::Range(100, 10000000));
    compare->add_option("--seed", c.seed, "permutation seed")->envname("CIMT_SEED");
    compare->add_flag("--csv", c.csv, "emit CSV instead of the table");

    GradcheckArgs gc;
    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference checks on micro models");
    gradcheck->add_option("--preset", gc.preset, "cimt | unet-s4c | unet-joint | all");
    gradcheck->add_option("--seed", gc.seed, "micro-model seed")->envname("CIMT_SEED");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex);
        return code == 0 ? 0 : 2;  // bad usage is a config error
    }

    if (!workdir.empty()) {
        std::error_code ec;
        fs::current_path(workdir, ec);
        if (ec) throw IoError("cannot enter workdir " + workdir + ": " + ec.message());
    }

    g.seed_set = g_seed->count() > 0;
    t.seed_set = t_seed->count() > 0;
    e.seed_set = e_seed->count() > 0;
    if (gen->parsed()) return cmd_gen(g);
    if (train->parsed()) return cmd_train(t);
    if (eval->parsed()) return cmd_eval(e);
    if (compare->parsed()) return cmd_compare(c);
    if (gradcheck->parsed()) return cmd_gradcheck(gc);
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergedError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 4;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 5;
    } catch (const PairingError& e) {
        std::cerr << "pairing error: " << e.what() << "\n";
        return 6;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
