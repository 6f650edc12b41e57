#include "cimt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>

#include "json.hpp"

namespace cimt {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum class Preset { kCimt, kS4c, kJoint };

Preset parse_preset(const std::string& name) {
    if (name == "cimt") return Preset::kCimt;
    if (name == "unet-s4c") return Preset::kS4c;
    if (name == "unet-joint") return Preset::kJoint;
    throw ConfigError("unknown preset: " + name + " (expected cimt, unet-s4c, or unet-joint)");
}

void init_cls_head(ParamStore& ps, const ModelDims& dims, Rng& rng) {
    const int in = 8 * dims.base_width;
    const int hid = dims.cls_hidden;
    auto glorot = [&](int out_n, int in_n) {
        return Tensor::randn(Shape{out_n, in_n}, rng,
                             float(std::sqrt(2.0 / (double(in_n) + double(out_n)))));
    };
    ps.put("cls.fc1.w", glorot(hid, in));
    ps.put("cls.fc1.b", Tensor::zeros(Shape{hid}));
    ps.put("cls.fc2.w", glorot(2, hid));
    ps.put("cls.fc2.b", Tensor::zeros(Shape{2}));
}

Tensor joint_cls_logits(const FeaturePyramid& pyr, const ParamStore& ps) {
    Tensor h = global_pool3(pyr.levels.front(), PoolKind::kAvg);
    Tensor row = reshape(h, Shape{1, h.extent(0)});
    Tensor hid = gelu(linear(row, ps.get("cls.fc1.w"), ps.get("cls.fc1.b")));
    Tensor logits = linear(hid, ps.get("cls.fc2.w"), ps.get("cls.fc2.b"));
    return reshape(logits, Shape{2});
}

Tensor cls_ce_term(const Tensor& logits2, int label) {
    Tensor row = reshape(logits2, Shape{1, 2});
    Tensor target = Tensor::zeros(Shape{1, 2});
    target.values()[size_t(label)] = 1.0f;
    return softmax_xent_mean(row, target, 1);
}

// ROI box (ground truth or the model's own localization), crop, normalize.
VolumeSample roi_crop_normalized(const VolumeSample& s, const ParamStore& ps,
                                 const ModelDims& dims, bool oracle) {
    const Shape& xs = s.x.shape();
    const std::array<int, 3> ext{xs[1], xs[2], xs[3]};
    RoiBox box;
    if (oracle) {
        box = roi_from_labels(s.y, ext, dims.roi_margin);
    } else {
        NoGradGuard guard;
        box = locate_stomach(normalize_volume(s.x), ps, dims);
    }
    box = expand_to_multiple(box, ext, 8);
    VolumeSample c = crop_roi(s, box);
    c.x = normalize_volume(c.x);
    return c;
}

struct EpochStats {
    double total = 0, dice = 0, seg_ce = 0, cls_ce = 0, deep = 0;
    int cases = 0;
    int batches = 0;

    void norm() {
        if (cases == 0) return;
        total /= cases;
        dice /= cases;
        seg_ce /= cases;
        cls_ce /= cases;
        deep /= cases;
    }
};

// Loss for one prepared case under the epoch's stage.
Tensor case_loss(const VolumeSample& c, const ParamStore& ps, const ModelDims& dims,
                 Preset preset, const std::string& stage, const TrainConfig& cfg,
                 EpochStats* st) {
    auto [pyr, seg] = unet_forward(c.x, ps, dims);
    if (preset == Preset::kCimt && stage == "B") {
        MaskFormerOut out = maskformer_forward(pyr, ps, dims);
        LossWeights w;
        w.cls = cfg.cls_weight;
        w.deep = cfg.deep_weight;
        LossParts parts = joint_loss(out, ps, dims, c.y, c.label, w);
        st->total += double(parts.total.item());
        st->dice += parts.seg_dice;
        st->seg_ce += parts.seg_ce;
        st->cls_ce += parts.cls_ce;
        st->deep += parts.deep;
        return parts.total;
    }
    const Shape& ss = seg.shape();
    Tensor z2 = reshape(seg, Shape{ss[0], ss[1] * ss[2] * ss[3]});
    auto [d, ce] = seg_loss(z2, onehot_labels<float>(c.y, dims.num_classes));
    Tensor total = add(d, ce);
    st->dice += double(d.item());
    st->seg_ce += double(ce.item());
    if (preset == Preset::kJoint && cfg.cls_weight != 0) {
        Tensor cls = cls_ce_term(joint_cls_logits(pyr, ps), c.label);
        st->cls_ce += double(cls.item());
        total = add(total, scale(cls, float(cfg.cls_weight)));
    }
    st->total += double(total.item());
    return total;
}

std::string stage_of(const TrainConfig& cfg, Preset preset, int epoch) {
    if (epoch >= total_epochs(cfg)) return "done";
    if (preset == Preset::kS4c) return "A";
    if (preset == Preset::kJoint) return "B";
    return epoch < cfg.stage_a_epochs ? "A" : "B";
}

bool first_epoch_of_stage(const TrainConfig& cfg, Preset preset, int epoch) {
    if (epoch == 0) return true;
    return stage_of(cfg, preset, epoch) != stage_of(cfg, preset, epoch - 1);
}

std::vector<std::pair<std::string, std::vector<float>>> snapshot_prefix(const ParamStore& ps,
                                                                        const std::string& p) {
    std::vector<std::pair<std::string, std::vector<float>>> out;
    for (const auto& [name, t] : ps)
        if (name.rfind(p, 0) == 0)
            out.emplace_back(name, std::vector<float>(t.values().begin(), t.values().end()));
    return out;
}

void check_frozen(const ParamStore& ps,
                  const std::vector<std::pair<std::string, std::vector<float>>>& snap) {
    for (const auto& [name, vals] : snap) {
        auto cur = ps.get(name).values();
        if (cur.size() != vals.size() ||
            std::memcmp(cur.data(), vals.data(), vals.size() * sizeof(float)) != 0)
            throw ContractError("frozen backbone parameter moved: " + name);
    }
}

}  // namespace

void TrainConfig::validate() const {
    parse_preset(preset);
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (stage_a_epochs < 0) throw ConfigError("train.stage_a_epochs must be >= 0");
    if (freeze_epochs < 0 || freeze_epochs > epochs)
        throw ConfigError("train.freeze_epochs must be in [0, epochs]");
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
    if (!(backbone_lr_multiplier > 0) || !std::isfinite(backbone_lr_multiplier))
        throw ConfigError("train.backbone_lr_multiplier must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (cls_weight < 0 || deep_weight < 0)
        throw ConfigError("train loss weights must be >= 0");
}

int total_epochs(const TrainConfig& cfg) {
    return parse_preset(cfg.preset) == Preset::kCimt ? cfg.stage_a_epochs + cfg.epochs
                                                     : cfg.epochs;
}

VolumeSample augment_sample(const VolumeSample& s, Rng& rng, bool flips, bool intensity) {
    VolumeSample out = s;
    const Shape& xs = s.x.shape();
    const int D = xs[1], H = xs[2], W = xs[3];
    if (flips) {
        bool f[3] = {rng.bernoulli(0.5), rng.bernoulli(0.5), rng.bernoulli(0.5)};
        if (f[0] || f[1] || f[2]) {
            Tensor x = Tensor::zeros(xs);
            std::vector<uint8_t> y(out.y.size());
            auto src = out.x.values();
            auto dst = x.values();
            for (int z = 0; z < D; ++z)
                for (int yy = 0; yy < H; ++yy)
                    for (int xx = 0; xx < W; ++xx) {
                        const int sz = f[0] ? D - 1 - z : z;
                        const int sy = f[1] ? H - 1 - yy : yy;
                        const int sx = f[2] ? W - 1 - xx : xx;
                        const size_t di = size_t((z * H + yy) * W + xx);
                        const size_t si = size_t((sz * H + sy) * W + sx);
                        dst[di] = src[si];
                        y[di] = out.y[si];
                    }
            out.x = x;
            out.y = std::move(y);
        }
    }
    if (intensity) {
        const float k = float(rng.uniform(0.9, 1.1));
        Tensor x = Tensor::zeros(xs);
        auto src = out.x.values();
        auto dst = x.values();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] = src[i] * k;
        out.x = x;
    }
    return out;
}

double s4c_select_threshold(const std::vector<double>& volumes,
                            const std::vector<int>& labels) {
    return youden_threshold(volumes, labels);
}

S4cDecision s4c_classify(const std::vector<uint8_t>& pred_labels, double threshold) {
    S4cDecision d;
    for (uint8_t v : pred_labels) d.tumor_voxels += v == 2;
    d.label = double(d.tumor_voxels) > threshold ? 1 : 0;
    return d;
}

CaseScore infer_case(const VolumeSample& s, const ParamStore& ps, const ModelDims& dims,
                     const std::string& preset_name, bool oracle_roi) {
    NoGradGuard guard;
    const Preset preset = parse_preset(preset_name);
    const Shape& xs = s.x.shape();
    const std::array<int, 3> ext{xs[1], xs[2], xs[3]};

    RoiBox box;
    if (oracle_roi) {
        box = roi_from_labels(s.y, ext, dims.roi_margin);
    } else {
        box = locate_stomach(normalize_volume(s.x), ps, dims);
    }
    box = expand_to_multiple(box, ext, 8);
    VolumeSample c = crop_roi(s, box);
    c.x = normalize_volume(c.x);

    auto [pyr, seg] = unet_forward(c.x, ps, dims);
    const Shape& cs_ = c.x.shape();
    const int64_t vox = int64_t(cs_[1]) * cs_[2] * cs_[3];

    Tensor seg2;
    double score = 0;
    if (preset == Preset::kCimt) {
        MaskFormerOut out = maskformer_forward(pyr, ps, dims);
        seg2 = out.pred.seg_logits;
        auto zv = out.pred.cls_logits.values();
        score = 1.0 / (1.0 + std::exp(double(zv[0]) - double(zv[1])));
    } else {
        seg2 = reshape(seg, Shape{dims.num_classes, int(vox)});
        if (preset == Preset::kJoint) {
            auto zv = joint_cls_logits(pyr, ps).values();
            score = 1.0 / (1.0 + std::exp(double(zv[0]) - double(zv[1])));
        }
    }

    std::vector<uint8_t> pred(size_t(vox), 0);
    auto sv = seg2.values();
    for (int64_t v = 0; v < vox; ++v) {
        int arg = 0;
        float best = sv[size_t(v)];
        for (int k = 1; k < dims.num_classes; ++k) {
            const float val = sv[size_t(k) * size_t(vox) + size_t(v)];
            if (val > best) {
                best = val;
                arg = k;
            }
        }
        pred[size_t(v)] = uint8_t(arg);
    }

    int tumor_voxels = 0;
    for (uint8_t v : pred) tumor_voxels += v == 2;
    const int64_t full_vox = int64_t(ext[0]) * ext[1] * ext[2];
    if (preset == Preset::kS4c) score = double(tumor_voxels) / double(full_vox);

    std::vector<uint8_t> pred_full(size_t(full_vox), 0);
    const int d = cs_[1], h = cs_[2], w = cs_[3];
    for (int z = 0; z < d; ++z)
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) {
                const size_t ci = size_t((z * h + yy) * w + xx);
                if (pred[ci] != 2) continue;
                const size_t fi = size_t(((z + box.low[0]) * ext[1] + yy + box.low[1]) * ext[2] +
                                         xx + box.low[2]);
                pred_full[fi] = 1;
            }
    std::vector<uint8_t> gt_full(size_t(full_vox), 0);
    int gt_tumor = 0;
    for (size_t i = 0; i < s.y.size(); ++i) {
        gt_full[i] = s.y[i] == 2;
        gt_tumor += s.y[i] == 2;
    }
    const LocResult loc = localization_hit(pred_full, gt_full, s.label);

    CaseScore out;
    out.id = s.id;
    out.score = score;
    out.label = s.label;
    out.tumor_voxels = tumor_voxels;
    out.gt_tumor_voxels = gt_tumor;
    out.dice = loc.dice;
    out.localization_hit = loc.hit;
    return out;
}

std::vector<CaseScore> evaluate_cases(const std::string& data_dir, const DatasetIndex& index,
                                      const std::string& split, const ParamStore& ps,
                                      const ModelDims& dims, const std::string& preset,
                                      bool oracle_roi) {
    std::vector<CaseScore> out;
    for (const DatasetEntry* e : index.split(split))
        out.push_back(infer_case(load_case(data_dir, index, *e), ps, dims, preset, oracle_roi));
    return out;
}

TrainResult train_model(const std::string& data_dir, const ModelDims& dims,
                        const TrainConfig& cfg, const std::string& out_dir,
                        const std::string& config_hash, bool resume) {
    cfg.validate();
    dims.validate();
    const Preset preset = parse_preset(cfg.preset);
    const DatasetIndex index = load_dataset_index(data_dir);
    const auto train_entries = index.split("train");
    const auto val_entries = index.split("val");
    if (train_entries.empty()) throw ConfigError("train split is empty");
    if (val_entries.empty()) throw ConfigError("val split is empty");

    const int total = total_epochs(cfg);
    fs::create_directories(out_dir);
    TrainResult res;
    res.log_path = out_dir + "/log.jsonl";
    res.last_dir = out_dir + "/last";
    res.best_dir = out_dir + "/best";

    ParamStore ps;
    int epoch_next = 0;
    double best = -1.0;
    bool have_restore = false;
    int64_t restore_t = 0, restore_skips = 0;
    std::map<std::string, std::vector<float>> restore_m, restore_v;

    if (resume) {
        LoadedCheckpoint ck = load_checkpoint(res.last_dir);
        if (ck.meta.preset != cfg.preset)
            throw CheckpointError("resume preset mismatch: checkpoint has " + ck.meta.preset);
        if (ck.meta.config_hash != config_hash)
            throw CheckpointError("resume config mismatch: checkpoint hash " +
                                  ck.meta.config_hash);
        if (dims_to_json(ck.meta.dims) != dims_to_json(dims))
            throw CheckpointError("resume model dims mismatch");
        ps = std::move(ck.params);
        epoch_next = int(ck.meta.extra.at("epoch"));
        best = ck.meta.extra.at("best_val_auc");
        restore_t = int64_t(ck.meta.extra.at("t_step"));
        restore_skips = int64_t(ck.meta.extra.at("skips"));
        restore_m = std::move(ck.opt_m);
        restore_v = std::move(ck.opt_v);
        have_restore = true;
        res.best_val_auc = best;
        if (epoch_next >= total) return res;
    } else {
        Rng init_rng = Rng::keyed(cfg.seed, 1);
        unet_init(ps, dims, init_rng);
        if (preset == Preset::kJoint) {
            Rng cls_rng = Rng::keyed(cfg.seed, 3);
            init_cls_head(ps, dims, cls_rng);
        }
        std::ofstream truncate(res.log_path, std::ios::trunc);
    }

    std::ofstream log(res.log_path, std::ios::app);
    if (!log) throw IoError("cannot write " + res.log_path);

    std::optional<RAdam> opt;
    std::string cur_stage;
    std::vector<std::pair<std::string, std::vector<float>>> freeze_snap;

    for (int e = epoch_next; e < total; ++e) {
        const std::string stage = stage_of(cfg, preset, e);
        const bool stage_first = first_epoch_of_stage(cfg, preset, e);

        if (stage != cur_stage) {
            if (preset == Preset::kCimt && stage == "B" && !ps.has("decoder.queries")) {
                Rng dec_rng = Rng::keyed(cfg.seed, 2);
                maskformer_init(ps, dims, dec_rng);
            }
            OptimConfig oc;
            oc.lr = cfg.lr;
            opt.emplace(oc);
            if (preset == Preset::kCimt && stage == "B")
                opt->set_group_multiplier("backbone.", cfg.backbone_lr_multiplier);
            if (have_restore && !stage_first)
                opt->restore(restore_t, restore_skips, restore_m, restore_v);
            cur_stage = stage;
        }
        have_restore = false;

        const int eb = e - (preset == Preset::kCimt ? cfg.stage_a_epochs : 0);
        const bool frozen =
            preset == Preset::kCimt && stage == "B" && eb < cfg.freeze_epochs;
        ps.set_requires_grad_all(true);
        if (frozen) ps.set_requires_grad_prefix("backbone.", false);
        if (preset == Preset::kCimt && stage == "B")
            ps.set_requires_grad_prefix("backbone.seghead.", false);
        if (frozen && freeze_snap.empty()) freeze_snap = snapshot_prefix(ps, "backbone.");

        // one training epoch
        std::vector<size_t> order(train_entries.size());
        std::iota(order.begin(), order.end(), size_t(0));
        Rng shuffle_rng = Rng::keyed(mix_key(cfg.seed, 0xE0), uint64_t(e));
        for (size_t i = order.size() - 1; i > 0; --i) {
            const size_t j = size_t(shuffle_rng.uniform_int(int(i + 1)));
            std::swap(order[i], order[j]);
        }

        EpochStats st;
        const int64_t skips_before = opt->skips();
        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
            const size_t stop = std::min(order.size(), start + size_t(cfg.batch_size));
            const int m = int(stop - start);
            ps.zero_grad_all();
            for (size_t k = start; k < stop; ++k) {
                const DatasetEntry& ent = *train_entries[order[k]];
                VolumeSample c =
                    roi_crop_normalized(load_case(data_dir, index, ent), ps, dims, true);
                Rng aug_rng = Rng::keyed(mix_key(cfg.seed, 0xA9), uint64_t(e), order[k]);
                c = augment_sample(c, aug_rng, cfg.augment_flips, cfg.augment_intensity);
                Tensor loss = case_loss(c, ps, dims, preset, stage, cfg, &st);
                backward(scale(loss, 1.0f / float(m)));
                ++st.cases;
            }
            opt->step(ps);
            ++st.batches;
        }
        st.norm();
        if (opt->skips() - skips_before == st.batches)
            throw DivergedError("every optimizer step skipped in epoch " + std::to_string(e) +
                                "; training diverged");
        if (frozen) check_frozen(ps, freeze_snap);
        if (!frozen) freeze_snap.clear();

        // validation scores; cimt stage A is scored by segmented volume
        const std::string score_preset =
            (preset == Preset::kCimt && stage == "A") ? "unet-s4c" : cfg.preset;
        std::vector<CaseScore> vs =
            evaluate_cases(data_dir, index, "val", ps, dims, score_preset, true);
        std::vector<double> scores, volumes;
        std::vector<int> labels;
        bool finite = true;
        for (const CaseScore& v : vs) {
            scores.push_back(v.score);
            volumes.push_back(double(v.tumor_voxels));
            labels.push_back(v.label);
            finite = finite && std::isfinite(v.score);
        }
        const double nan = std::numeric_limits<double>::quiet_NaN();
        const double val_auc = finite ? auc(scores, labels) : nan;
        const double thr_score = finite ? youden_threshold(scores, labels) : nan;
        const double thr_volume = s4c_select_threshold(volumes, labels);

        json line;
        line["epoch"] = e;
        line["stage"] = stage;
        line["frozen"] = frozen;
        line["lr"] = cfg.lr;
        line["total"] = st.total;
        line["dice"] = st.dice;
        line["seg_ce"] = st.seg_ce;
        line["cls_ce"] = st.cls_ce;
        line["deep"] = st.deep;
        line["val_auc"] = val_auc;
        line["skips"] = opt->skips();
        log << line.dump() << "\n";
        log.flush();
        ++res.epochs_run;
        res.final_val_auc = val_auc;

        // checkpoints carry the state needed to continue from the next epoch
        const bool comparable = preset != Preset::kCimt || stage == "B";
        const bool improved = comparable && std::isfinite(val_auc) && val_auc > best;
        if (improved) best = val_auc;
        CheckpointMeta meta;
        meta.preset = cfg.preset;
        meta.config_hash = config_hash;
        meta.stage = stage_of(cfg, preset, e + 1);
        meta.dims = dims;
        meta.extra["epoch"] = double(e + 1);
        meta.extra["t_step"] = double(opt->t());
        meta.extra["skips"] = double(opt->skips());
        meta.extra["best_val_auc"] = best;
        meta.extra["val_auc"] = val_auc;
        meta.extra["threshold.score"] = thr_score;
        meta.extra["threshold.s4c_volume"] = thr_volume;
        const bool boundary = e + 1 < total && first_epoch_of_stage(cfg, preset, e + 1);
        if (boundary)
            save_checkpoint(res.last_dir, meta, ps);
        else
            save_checkpoint(res.last_dir, meta, ps, opt->moment1(), opt->moment2());
        if (improved) save_checkpoint(res.best_dir, meta, ps);
    }

    res.best_val_auc = best;
    return res;
}

}  // namespace cimt
