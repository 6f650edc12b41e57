#include "cimt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace cimt {

namespace fs = std::filesystem;
using nlohmann::json;

void DifficultyConfig::validate() const {
    if (contrast_delta < 0) throw ConfigError("contrast_delta must be >= 0");
    if (deform_amp < 0 || deform_amp > 0.5) throw ConfigError("deform_amp must be in [0, 0.5]");
    if (noise_std <= 0) throw ConfigError("noise_std must be > 0");
    if (lumen_content_prob < 0 || lumen_content_prob > 1)
        throw ConfigError("lumen_content_prob must be in [0, 1]");
    if (tumor_prob < 0 || tumor_prob > 1) throw ConfigError("tumor_prob must be in [0, 1]");
}

namespace {

struct Vec3 {
    double x, y, z;
};

Vec3 unit_vector(Rng& rng) {
    double a = rng.normal(), b = rng.normal(), c = rng.normal();
    double n = std::sqrt(a * a + b * b + c * c);
    if (n < 1e-12) return {1, 0, 0};
    return {a / n, b / n, c / n};
}

// rows of the rotation matrix Rz(a)Ry(b)Rx(c)
struct Rot {
    double m[3][3];
    Vec3 apply(double x, double y, double z) const {
        return {m[0][0] * x + m[0][1] * y + m[0][2] * z,
                m[1][0] * x + m[1][1] * y + m[1][2] * z,
                m[2][0] * x + m[2][1] * y + m[2][2] * z};
    }
};

Rot euler_rot(double a, double b, double c) {
    double ca = std::cos(a), sa = std::sin(a);
    double cb = std::cos(b), sb = std::sin(b);
    double cc = std::cos(c), sc = std::sin(c);
    Rot r;
    r.m[0][0] = ca * cb;
    r.m[0][1] = ca * sb * sc - sa * cc;
    r.m[0][2] = ca * sb * cc + sa * sc;
    r.m[1][0] = sa * cb;
    r.m[1][1] = sa * sb * sc + ca * cc;
    r.m[1][2] = sa * sb * cc - ca * sc;
    r.m[2][0] = -sb;
    r.m[2][1] = cb * sc;
    r.m[2][2] = cb * cc;
    return r;
}

constexpr double kBackground = 0.2;
constexpr double kWall = 0.55;
constexpr double kLumenFluid = 0.35;
constexpr double kLumenAir = 0.05;

}  // namespace

VolumeSample generate_sample(uint64_t seed, const DifficultyConfig& cfg,
                             const std::array<int, 3>& extents) {
    cfg.validate();
    for (int e : extents)
        if (e < 16) throw ConfigError("phantom extents must be >= 16 voxels per axis");

    const int D = extents[0], H = extents[1], W = extents[2];
    Rng geom = Rng::keyed(seed, 1);
    Rng noise = Rng::keyed(seed, 2);
    Rng blobs = Rng::keyed(seed, 3);

    // shell pose
    const double cz = D * 0.5 + geom.uniform(-1.5, 1.5);
    const double cy = H * 0.5 + geom.uniform(-1.5, 1.5);
    const double cx = W * 0.5 + geom.uniform(-1.5, 1.5);
    const double sz = D * geom.uniform(0.28, 0.38);
    const double sy = H * geom.uniform(0.28, 0.38);
    const double sx = W * geom.uniform(0.28, 0.38);
    const Rot rot = euler_rot(geom.uniform(0, 6.2831853), geom.uniform(0, 6.2831853),
                              geom.uniform(0, 6.2831853));
    const double h = geom.uniform(0.10, 0.16);  // wall half-thickness, rho units

    // smooth radial deformation: two cosine modes over the unit direction
    const Vec3 d0 = unit_vector(geom);
    const Vec3 d1 = unit_vector(geom);
    const double k0 = 2 + geom.uniform_int(3);
    const double k1 = 2 + geom.uniform_int(3);
    const double p0 = geom.uniform(0, 6.2831853);
    const double p1 = geom.uniform(0, 6.2831853);

    const double lumen_base = geom.bernoulli(0.5) ? kLumenFluid : kLumenAir;

    // tumor draw
    const bool want_tumor = geom.bernoulli(cfg.tumor_prob);
    Vec3 u0 = unit_vector(geom);
    const double frac = geom.log_uniform(0.02, 0.15);
    const double alpha = std::acos(1.0 - 2.0 * frac);
    const double thick = geom.uniform(0.8, 1.6);

    // lumen debris blobs (confounder); drawn regardless, applied if enabled
    const bool with_blobs = blobs.bernoulli(cfg.lumen_content_prob);
    const int n_blobs = 1 + blobs.uniform_int(3);
    struct Blob {
        Vec3 dir;
        double rho, radius, intensity;
    };
    std::vector<Blob> blob_list;
    for (int i = 0; i < n_blobs; ++i) {
        Blob bl;
        bl.dir = unit_vector(blobs);
        bl.rho = blobs.uniform(0.0, 0.65);
        bl.radius = blobs.uniform(1.5, 3.0);
        bl.intensity = 0.45 + 0.25 * blobs.uniform();
        blob_list.push_back(bl);
    }

    VolumeSample s;
    s.seed = seed;
    s.tumor_frac = want_tumor ? frac : 0.0;
    s.x = Tensor::zeros({1, D, H, W});
    s.y.assign(static_cast<size_t>(D) * H * W, 0);

    // blob centers in world coordinates (blob.dir scaled into the ellipsoid)
    std::vector<Vec3> blob_centers;
    for (const Blob& bl : blob_list) {
        // ellipsoid frame position, then rotate out and translate
        double ez = bl.dir.x * bl.rho * sz;
        double ey = bl.dir.y * bl.rho * sy;
        double ex = bl.dir.z * bl.rho * sx;
        // rot maps world->ellipsoid below; its transpose maps back
        Vec3 w{rot.m[0][0] * ez + rot.m[1][0] * ey + rot.m[2][0] * ex,
               rot.m[0][1] * ez + rot.m[1][1] * ey + rot.m[2][1] * ex,
               rot.m[0][2] * ez + rot.m[1][2] * ey + rot.m[2][2] * ex};
        blob_centers.push_back({w.x + cz, w.y + cy, w.z + cx});
    }

    float* img = s.x.values().data();
    const double cos_alpha = std::cos(alpha);

    // Fills labels and pre-noise intensities for a given tumor direction.
    // Pure in u0: no RNG inside, so re-aiming a clipped tumor is cheap.
    auto fill = [&](const Vec3& u0) {
        size_t v = 0;
        for (int z = 0; z < D; ++z) {
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x, ++v) {
                    const Vec3 q = rot.apply(z + 0.5 - cz, y + 0.5 - cy, x + 0.5 - cx);
                    const double uz = q.x / sz, uy = q.y / sy, ux = q.z / sx;
                    double rho = std::sqrt(uz * uz + uy * uy + ux * ux);
                    double dz = 0, dy = 0, dxx = 1;
                    if (rho > 1e-9) {
                        dz = uz / rho;
                        dy = uy / rho;
                        dxx = ux / rho;
                    }
                    const double bump =
                        1.0 + cfg.deform_amp * (0.6 * std::cos(k0 * (dz * d0.x + dy * d0.y + dxx * d0.z) * 3.1415926535 + p0) +
                                                0.4 * std::cos(k1 * (dz * d1.x + dy * d1.y + dxx * d1.z) * 3.1415926535 + p1));
                    rho *= bump;

                    double intensity = kBackground;
                    uint8_t label = 0;
                    const double inner = 1.0 - h, outer = 1.0 + h;

                    bool is_tumor = false;
                    if (want_tumor) {
                        const double cos_t = dz * u0.x + dy * u0.y + dxx * u0.z;
                        if (cos_t >= cos_alpha) {
                            const double theta = std::acos(std::clamp(cos_t, -1.0, 1.0));
                            const double falloff = 0.5 * (1.0 + std::cos(3.1415926535 * theta / alpha));
                            const double ht = h * (1.0 + thick * falloff);
                            if (std::abs(rho - 1.0) <= ht) is_tumor = true;
                        }
                    }

                    if (is_tumor) {
                        label = 2;
                        intensity = kWall + cfg.contrast_delta * cfg.noise_std;
                    } else if (rho <= outer) {
                        label = 1;
                        intensity = rho < inner ? lumen_base : kWall;
                        if (with_blobs && rho < inner) {
                            for (size_t bi = 0; bi < blob_list.size(); ++bi) {
                                const double bz = z + 0.5 - blob_centers[bi].x;
                                const double by = y + 0.5 - blob_centers[bi].y;
                                const double bx = x + 0.5 - blob_centers[bi].z;
                                if (bz * bz + by * by + bx * bx <
                                    blob_list[bi].radius * blob_list[bi].radius) {
                                    intensity = blob_list[bi].intensity;
                                    break;
                                }
                            }
                        }
                    }

                    s.y[v] = label;
                    img[v] = static_cast<float>(intensity);
                }
            }
        }

        // every tumor voxel must sit within Euclidean distance 2 of a stomach
        // voxel; interior voxels of over-thick tumors are relabeled to class 1
        // (witnesses are checked before any relabeling, and relabeling only adds
        // class-1 voxels, so one pass suffices)
        std::vector<size_t> demote;
        for (size_t i = 0; i < s.y.size(); ++i) {
            if (s.y[i] != 2) continue;
            const int z = static_cast<int>(i) / (H * W);
            const int y = (static_cast<int>(i) / W) % H;
            const int x = static_cast<int>(i) % W;
            bool ok = false;
            for (int oz = -2; oz <= 2 && !ok; ++oz)
                for (int oy = -2; oy <= 2 && !ok; ++oy)
                    for (int ox = -2; ox <= 2 && !ok; ++ox) {
                        if (oz * oz + oy * oy + ox * ox > 4) continue;
                        const int nz = z + oz, ny = y + oy, nx = x + ox;
                        if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                        if (s.y[(static_cast<size_t>(nz) * H + ny) * W + nx] == 1) ok = true;
                    }
            if (!ok) demote.push_back(i);
        }
        for (size_t i : demote) s.y[i] = 1;

        int tumor_count = 0;
        for (uint8_t c : s.y) tumor_count += c == 2;
        return tumor_count;
    };

    int tumor_count = fill(u0);
    // a tumor aimed at a boundary-clipped part of the shell can land entirely
    // outside the volume; re-aim deterministically until it takes
    Rng reaim = Rng::keyed(seed, 4);
    for (int attempt = 0; want_tumor && tumor_count == 0 && attempt < 16; ++attempt)
        tumor_count = fill(unit_vector(reaim));
    if (want_tumor && tumor_count == 0)
        throw DataError("phantom generation produced an empty tumor (seed " +
                        std::to_string(seed) + ")");
    s.tumor_voxels = tumor_count;
    s.label = tumor_count > 0 ? 1 : 0;

    for (size_t i = 0; i < s.y.size(); ++i)
        img[i] += static_cast<float>(noise.normal(0.0, cfg.noise_std));

    return s;
}

std::vector<const DatasetEntry*> DatasetIndex::split(const std::string& name) const {
    std::vector<const DatasetEntry*> out;
    for (const auto& e : entries)
        if (e.split == name) out.push_back(&e);
    return out;
}

DatasetIndex make_splits(int n_train, int n_val, int n_test, double prevalence,
                         uint64_t base_seed, const DifficultyConfig& cfg,
                         const std::array<int, 3>& extents) {
    cfg.validate();
    if (n_train < 0 || n_val < 0 || n_test < 0) throw ConfigError("split sizes must be >= 0");
    if (prevalence < 0 || prevalence > 1) throw ConfigError("prevalence must be in [0, 1]");

    DatasetIndex index;
    index.base_seed = base_seed;
    index.extents = extents;
    index.cfg = cfg;

    const std::array<std::pair<const char*, int>, 3> splits{
        {{"train", n_train}, {"val", n_val}, {"test", n_test}}};
    int global = 0;
    for (size_t si = 0; si < splits.size(); ++si) {
        const auto& [name, n] = splits[si];
        const int n_pos = static_cast<int>(std::llround(n * prevalence));
        if (n > 0 && prevalence > 0 && prevalence < 1 && (n_pos == 0 || n_pos == n))
            throw ConfigError(std::string("split '") + name + "' of size " + std::to_string(n) +
                              " cannot hold prevalence " + std::to_string(prevalence));
        std::vector<int> labels(static_cast<size_t>(n), 0);
        std::fill(labels.begin(), labels.begin() + n_pos, 1);
        Rng shuffle = Rng::keyed(base_seed, si, 77);
        for (int i = n - 1; i > 0; --i)
            std::swap(labels[static_cast<size_t>(i)],
                      labels[static_cast<size_t>(shuffle.uniform_int(i + 1))]);
        for (int i = 0; i < n; ++i, ++global) {
            DatasetEntry e;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "case_%06d", global);
            e.id = buf;
            e.seed = mix_key(base_seed, static_cast<uint64_t>(global));
            e.split = name;
            e.label = labels[static_cast<size_t>(i)];
            e.x_file = std::string("X_") + e.id + ".bin";
            e.y_file = std::string("Y_") + e.id + ".bin";
            index.entries.push_back(std::move(e));
        }
    }
    return index;
}

VolumeSample generate_from_entry(const DatasetIndex& index, const DatasetEntry& entry) {
    DifficultyConfig cfg = index.cfg;
    cfg.tumor_prob = entry.label ? 1.0 : 0.0;
    VolumeSample s = generate_sample(entry.seed, cfg, index.extents);
    s.id = entry.id;
    if (s.label != entry.label)
        throw DataError("generated label does not match plan for " + entry.id);
    return s;
}

namespace {

json difficulty_to_json(const DifficultyConfig& c) {
    return json{{"contrast_delta", c.contrast_delta},
                {"deform_amp", c.deform_amp},
                {"noise_std", c.noise_std},
                {"lumen_content_prob", c.lumen_content_prob},
                {"tumor_prob", c.tumor_prob}};
}

DifficultyConfig difficulty_from_json(const json& j) {
    DifficultyConfig c;
    c.contrast_delta = j.at("contrast_delta").get<double>();
    c.deform_amp = j.at("deform_amp").get<double>();
    c.noise_std = j.at("noise_std").get<double>();
    c.lumen_content_prob = j.at("lumen_content_prob").get<double>();
    c.tumor_prob = j.at("tumor_prob").get<double>();
    return c;
}

void write_file(const fs::path& p, const void* data, size_t bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + p.string());
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) throw IoError("short write: " + p.string());
}

std::vector<char> read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open: " + p.string());
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<char> buf(static_cast<size_t>(n));
    f.read(buf.data(), n);
    if (!f) throw IoError("short read: " + p.string());
    return buf;
}

}  // namespace

void save_dataset(DatasetIndex& index, const std::string& dir) {
    fs::create_directories(dir);
    const fs::path root(dir);
    json samples = json::array();
    for (auto& e : index.entries) {
        VolumeSample s = generate_from_entry(index, e);
        e.tumor_frac = s.tumor_frac;
        write_file(root / e.x_file, s.x.values().data(), s.x.values().size() * sizeof(float));
        write_file(root / e.y_file, s.y.data(), s.y.size());
        samples.push_back(json{{"id", e.id},
                               {"seed", e.seed},
                               {"split", e.split},
                               {"label", e.label},
                               {"tumor_frac", e.tumor_frac},
                               {"shape", {1, index.extents[0], index.extents[1], index.extents[2]}},
                               {"x_file", e.x_file},
                               {"y_file", e.y_file}});
    }
    json manifest{{"version", index.version},
                  {"kind", "cimt-phantom-dataset"},
                  {"base_seed", index.base_seed},
                  {"extents", {index.extents[0], index.extents[1], index.extents[2]}},
                  {"difficulty", difficulty_to_json(index.cfg)},
                  {"samples", samples}};
    const std::string text = manifest.dump(2) + "\n";
    write_file(root / "manifest.json", text.data(), text.size());
}

DatasetIndex load_dataset_index(const std::string& dir) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    json manifest;
    try {
        auto buf = read_file(mpath);
        manifest = json::parse(buf.begin(), buf.end());
    } catch (const json::exception& e) {
        throw DataError("corrupt dataset manifest " + mpath.string() + ": " + e.what());
    }
    DatasetIndex index;
    try {
        index.version = manifest.at("version").get<int>();
        if (index.version != 1)
            throw DataError("unsupported dataset version " + std::to_string(index.version));
        if (manifest.at("kind").get<std::string>() != "cimt-phantom-dataset")
            throw DataError("not a phantom dataset: " + mpath.string());
        index.base_seed = manifest.at("base_seed").get<uint64_t>();
        auto ex = manifest.at("extents");
        index.extents = {ex.at(0).get<int>(), ex.at(1).get<int>(), ex.at(2).get<int>()};
        index.cfg = difficulty_from_json(manifest.at("difficulty"));
        for (const auto& js : manifest.at("samples")) {
            DatasetEntry e;
            e.id = js.at("id").get<std::string>();
            e.seed = js.at("seed").get<uint64_t>();
            e.split = js.at("split").get<std::string>();
            e.label = js.at("label").get<int>();
            e.tumor_frac = js.at("tumor_frac").get<double>();
            e.x_file = js.at("x_file").get<std::string>();
            e.y_file = js.at("y_file").get<std::string>();
            index.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw DataError("bad field in dataset manifest " + mpath.string() + ": " + e.what());
    }
    return index;
}

VolumeSample load_case(const std::string& dir, const DatasetIndex& index,
                       const DatasetEntry& entry) {
    const fs::path root(dir);
    const int D = index.extents[0], H = index.extents[1], W = index.extents[2];
    const size_t nvox = static_cast<size_t>(D) * H * W;

    if (!fs::exists(root / entry.x_file))
        throw IoError("dataset manifest references missing file: " + (root / entry.x_file).string());
    if (!fs::exists(root / entry.y_file))
        throw IoError("dataset manifest references missing file: " + (root / entry.y_file).string());

    auto xbuf = read_file(root / entry.x_file);
    if (xbuf.size() != nvox * sizeof(float))
        throw DataError("wrong size for " + entry.x_file + ": got " +
                        std::to_string(xbuf.size()) + " bytes");
    auto ybuf = read_file(root / entry.y_file);
    if (ybuf.size() != nvox)
        throw DataError("wrong size for " + entry.y_file + ": got " +
                        std::to_string(ybuf.size()) + " bytes");

    VolumeSample s;
    s.id = entry.id;
    s.seed = entry.seed;
    s.label = entry.label;
    s.tumor_frac = entry.tumor_frac;
    s.x = Tensor::zeros({1, D, H, W});
    std::memcpy(s.x.values().data(), xbuf.data(), xbuf.size());
    s.y.assign(reinterpret_cast<const uint8_t*>(ybuf.data()),
               reinterpret_cast<const uint8_t*>(ybuf.data()) + ybuf.size());
    int tumor = 0;
    for (uint8_t c : s.y) {
        if (c > 2) throw DataError("label out of range in " + entry.y_file);
        tumor += c == 2;
    }
    s.tumor_voxels = tumor;
    if ((tumor > 0) != (entry.label == 1))
        throw DataError("label/mask mismatch for case " + entry.id);
    return s;
}

}  // namespace cimt
