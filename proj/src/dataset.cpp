// SPDX-License-Identifier: Apache-2.0

#include "refseg/dataset.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "refseg/rng.h"
#include "refseg/vocab.h"

namespace fs = std::filesystem;

namespace refseg::data {

const char* to_string(ObjShape s) {
    switch (s) {
        case ObjShape::square: return "square";
        case ObjShape::circle: return "circle";
        default: return "triangle";
    }
}

const char* to_string(ObjColor c) {
    switch (c) {
        case ObjColor::red: return "red";
        case ObjColor::green: return "green";
        case ObjColor::blue: return "blue";
        default: return "yellow";
    }
}

const char* to_string(Setting s) {
    switch (s) {
        case Setting::one_to_zero: return "one_to_zero";
        case Setting::one_to_one: return "one_to_one";
        default: return "one_to_many";
    }
}

Setting setting_from_string(const std::string& s) {
    if (s == "one_to_zero") return Setting::one_to_zero;
    if (s == "one_to_one") return Setting::one_to_one;
    if (s == "one_to_many") return Setting::one_to_many;
    throw std::runtime_error("unknown setting: " + s);
}

void SceneSpec::validate() const {
    for (size_t i = 0; i < objects.size(); i++) {
        const auto& o = objects[i];
        if (o.id != static_cast<int>(i))
            throw std::runtime_error("scene ids must be dense from 0");
        if (o.y0 < 0 || o.x0 < 0 || o.y0 + o.size > img_h || o.x0 + o.size > img_w)
            throw std::runtime_error("object outside image bounds");
        for (size_t j = i + 1; j < objects.size(); j++) {
            const auto& p = objects[j];
            const bool overlap = o.x0 < p.x0 + p.size && p.x0 < o.x0 + o.size &&
                                 o.y0 < p.y0 + p.size && p.y0 < o.y0 + o.size;
            if (overlap) throw std::runtime_error("object bounding boxes overlap");
        }
    }
}

SceneSpec generate_scene(uint64_t seed, int grid_rows, int grid_cols, int n_objects,
                         int img_h, int img_w) {
    if (n_objects > grid_rows * grid_cols)
        throw std::invalid_argument("generate_scene: n_objects exceeds grid capacity");
    Rng rng(mix_keys(seed, 0x5ce9e));
    SceneSpec scene;
    scene.grid_rows = grid_rows;
    scene.grid_cols = grid_cols;
    scene.img_h = img_h;
    scene.img_w = img_w;

    std::vector<int> cells(static_cast<size_t>(grid_rows * grid_cols));
    for (size_t i = 0; i < cells.size(); i++) cells[i] = static_cast<int>(i);
    rng.shuffle(cells.begin(), cells.end());

    const int cell_h = img_h / grid_rows;
    const int cell_w = img_w / grid_cols;
    const int cell = std::min(cell_h, cell_w);
    const int smax = std::max(6, cell - 6);
    const int smin = std::max(6, std::min(smax, cell * 55 / 100));

    for (int i = 0; i < n_objects; i++) {
        SceneObject o;
        o.id = i;
        o.row = cells[static_cast<size_t>(i)] / grid_cols;
        o.col = cells[static_cast<size_t>(i)] % grid_cols;
        o.shape = static_cast<ObjShape>(rng.next_int(0, 2));
        o.color = static_cast<ObjColor>(rng.next_int(0, 3));
        o.size = rng.next_int(smin, smax);
        const int free_y = cell_h - o.size;
        const int free_x = cell_w - o.size;
        const int jy = free_y >= 4 ? rng.next_int(2, free_y - 2) : free_y / 2;
        const int jx = free_x >= 4 ? rng.next_int(2, free_x - 2) : free_x / 2;
        o.y0 = o.row * cell_h + jy;
        o.x0 = o.col * cell_w + jx;
        scene.objects.push_back(o);
    }
    scene.validate();
    return scene;
}

namespace {

struct Rgb {
    float r, g, b;
};

Rgb color_value(ObjColor c) {
    switch (c) {
        case ObjColor::red: return {0.85f, 0.10f, 0.10f};
        case ObjColor::green: return {0.10f, 0.75f, 0.15f};
        case ObjColor::blue: return {0.12f, 0.20f, 0.85f};
        default: return {0.92f, 0.85f, 0.10f};
    }
}

constexpr Rgb kBackground{0.15f, 0.15f, 0.18f};

bool shape_covers(ObjShape shape, int size, int dy, int dx) {
    switch (shape) {
        case ObjShape::square:
            return true;
        case ObjShape::circle: {
            const double c = (size - 1) / 2.0;
            const double r = size / 2.0;
            const double ddy = dy - c, ddx = dx - c;
            return ddy * ddy + ddx * ddx <= r * r;
        }
        default: { // up-pointing isoceles triangle filling the box
            const double cx = (size - 1) / 2.0;
            const double half = dy / 2.0 + 0.5;
            return std::abs(dx - cx) <= half;
        }
    }
}

} // namespace

Rendered render(const SceneSpec& scene) {
    Rendered out;
    const int H = scene.img_h, W = scene.img_w;
    out.image = Tensor<float>({3, H, W});
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++) {
            out.image(0, y, x) = kBackground.r;
            out.image(1, y, x) = kBackground.g;
            out.image(2, y, x) = kBackground.b;
        }
    for (const auto& o : scene.objects) {
        Tensor<uint8_t> mask({H, W});
        const Rgb rgb = color_value(o.color);
        for (int dy = 0; dy < o.size; dy++)
            for (int dx = 0; dx < o.size; dx++) {
                if (!shape_covers(o.shape, o.size, dy, dx)) continue;
                const int y = o.y0 + dy, x = o.x0 + dx;
                mask(y, x) = 1;
                out.image(0, y, x) = rgb.r;
                out.image(1, y, x) = rgb.g;
                out.image(2, y, x) = rgb.b;
            }
        out.masks.emplace(o.id, std::move(mask));
    }
    return out;
}

namespace {

struct Query {
    std::optional<ObjColor> color;
    std::optional<ObjShape> shape;

    std::vector<int> matches(const SceneSpec& scene) const {
        std::vector<int> ids;
        for (const auto& o : scene.objects) {
            if (color && o.color != *color) continue;
            if (shape && o.shape != *shape) continue;
            ids.push_back(o.id);
        }
        return ids;
    }
};

std::vector<Query> all_queries() {
    std::vector<Query> qs;
    for (int c = 0; c < 4; c++)
        for (int s = 0; s < 3; s++)
            qs.push_back({static_cast<ObjColor>(c), static_cast<ObjShape>(s)});
    for (int s = 0; s < 3; s++) qs.push_back({std::nullopt, static_cast<ObjShape>(s)});
    for (int c = 0; c < 4; c++) qs.push_back({static_cast<ObjColor>(c), std::nullopt});
    return qs;
}

std::string noun_for(const Query& q, bool plural) {
    if (q.shape) {
        std::string n = to_string(*q.shape);
        return plural ? n + "s" : n;
    }
    return plural ? "objects" : "object";
}

} // namespace

Expression compose_expression(const SceneSpec& scene, Setting setting, uint64_t seed) {
    Rng rng(mix_keys(seed, 0xe4b));
    std::vector<Query> pool;
    for (const auto& q : all_queries()) {
        const auto m = q.matches(scene);
        const bool ok = (setting == Setting::one_to_zero && m.empty()) ||
                        (setting == Setting::one_to_one && m.size() == 1) ||
                        (setting == Setting::one_to_many && m.size() >= 2);
        if (ok) pool.push_back(q);
    }
    if (pool.empty())
        throw UnsatisfiableSetting(std::string("no query realizes setting ") + to_string(setting));
    const Query q = pool[rng.next_below(pool.size())];
    const auto target_ids = q.matches(scene);
    const bool plural = setting == Setting::one_to_many;

    std::vector<std::string> phrase;
    if (q.color) phrase.emplace_back(to_string(*q.color));
    phrase.push_back(noun_for(q, plural));

    std::vector<std::string> tokens = {"the"};
    tokens.insert(tokens.end(), phrase.begin(), phrase.end());
    const int span_end = static_cast<int>(tokens.size());
    if (rng.next_below(2) == 1) {
        tokens.push_back("in");
        tokens.push_back("the");
        tokens.push_back("picture");
    }

    Expression out;
    std::ostringstream text;
    for (size_t i = 0; i < tokens.size(); i++) {
        if (i) text << ' ';
        text << tokens[i];
    }
    out.text = text.str();
    out.target_ids = target_ids;
    out.entity_spans = {{1, span_end}};
    return out;
}

std::vector<std::pair<int, int>> encode_mask_rle(const Tensor<uint8_t>& mask) {
    std::vector<std::pair<int, int>> runs;
    const int64_t n = mask.numel();
    int64_t i = 0;
    while (i < n) {
        if (mask.data[static_cast<size_t>(i)]) {
            const int64_t start = i;
            while (i < n && mask.data[static_cast<size_t>(i)]) i++;
            runs.emplace_back(static_cast<int>(start), static_cast<int>(i - start));
        } else {
            i++;
        }
    }
    return runs;
}

Tensor<uint8_t> decode_mask_rle(const std::vector<std::pair<int, int>>& runs, int h, int w) {
    Tensor<uint8_t> mask({h, w});
    const int n = h * w;
    int prev_end = -1; // enforce sorted, non-overlapping, non-adjacent
    for (const auto& [start, len] : runs) {
        if (len <= 0 || start < 0 || start + len > n)
            throw std::runtime_error("rle run exceeds mask bounds");
        if (start <= prev_end)
            throw std::runtime_error("rle runs must be sorted, disjoint and maximal");
        prev_end = start + len;
        std::fill(mask.data.begin() + start, mask.data.begin() + start + len, uint8_t(1));
    }
    return mask;
}

namespace {

nlohmann::json record_to_json(const ManifestRecord& r) {
    nlohmann::json j;
    j["sample_id"] = r.sample_id;
    j["image_path"] = r.image_path;
    j["expression"] = r.expression;
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& [s, e] : r.entity_spans) spans.push_back({s, e});
    j["entity_spans"] = spans;
    j["setting"] = to_string(r.setting);
    j["delta"] = r.delta;
    nlohmann::json rle = nlohmann::json::array();
    for (const auto& [s, l] : r.mask_rle) rle.push_back({s, l});
    j["mask_rle"] = rle;
    j["image_size"] = {r.img_h, r.img_w};
    return j;
}

ManifestRecord record_from_json(const nlohmann::json& j) {
    ManifestRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.image_path = j.at("image_path").get<std::string>();
    r.expression = j.at("expression").get<std::string>();
    for (const auto& s : j.at("entity_spans")) r.entity_spans.emplace_back(s[0], s[1]);
    r.setting = setting_from_string(j.at("setting").get<std::string>());
    r.delta = j.at("delta").get<int>();
    for (const auto& s : j.at("mask_rle")) r.mask_rle.emplace_back(s[0], s[1]);
    r.img_h = j.at("image_size")[0];
    r.img_w = j.at("image_size")[1];
    return r;
}

void check_record_invariants(const ManifestRecord& r) {
    const bool zero = r.setting == Setting::one_to_zero;
    if ((r.delta == 0) != zero)
        throw std::runtime_error("record " + r.sample_id + ": delta inconsistent with setting");
    if (zero != r.mask_rle.empty())
        throw std::runtime_error("record " + r.sample_id + ": mask inconsistent with setting");
    if (r.entity_spans.empty())
        throw std::runtime_error("record " + r.sample_id + ": missing entity spans");
}

} // namespace

void write_manifest(const std::vector<ManifestRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    for (const auto& r : records) out << record_to_json(r).dump() << "\n";
}

std::vector<ManifestRecord> load_manifest(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot read manifest: " + manifest_path);
    std::vector<ManifestRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        records.push_back(record_from_json(nlohmann::json::parse(line)));
        check_record_invariants(records.back());
    }
    return records;
}

void write_ppm(const Tensor<float>& image, const std::string& path) {
    const int H = image.dim(1), W = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write image: " + path);
    out << "P6\n" << W << " " << H << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
    for (int y = 0; y < H; y++) {
        for (int x = 0; x < W; x++)
            for (int c = 0; c < 3; c++) {
                const float v = std::clamp(image(c, y, x), 0.0f, 1.0f);
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

Tensor<float> read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read image: " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255)
        throw std::runtime_error("unsupported image format: " + path);
    in.get(); // single whitespace after header
    Tensor<float> image({3, h, w});
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; y++) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!in) throw std::runtime_error("truncated image: " + path);
        for (int x = 0; x < w; x++)
            for (int c = 0; c < 3; c++)
                image(c, y, x) = static_cast<float>(row[static_cast<size_t>(x) * 3 + c]) / 255.0f;
    }
    return image;
}

std::vector<int> setting_quota(int total, double p_one, double p_many, double p_zero) {
    const double sum = p_one + p_many + p_zero;
    if (sum <= 0) throw std::invalid_argument("setting mix must have positive mass");
    const double fr[3] = {p_one / sum, p_many / sum, p_zero / sum};
    std::vector<int> quota(3);
    double rem[3];
    int assigned = 0;
    for (int i = 0; i < 3; i++) {
        const double exact = fr[i] * total;
        quota[static_cast<size_t>(i)] = static_cast<int>(std::floor(exact));
        rem[i] = exact - std::floor(exact);
        assigned += quota[static_cast<size_t>(i)];
    }
    while (assigned < total) { // largest remainder first, ties to lower index
        int best = 0;
        for (int i = 1; i < 3; i++)
            if (rem[i] > rem[best]) best = i;
        quota[static_cast<size_t>(best)]++;
        rem[best] = -1;
        assigned++;
    }
    return quota;
}

namespace {

struct Built {
    ManifestRecord record;
    Tensor<float> image;
};

Built build_one(const GenConfig& cfg, const std::string& split, int index, Setting setting) {
    const uint64_t split_key = split == "train" ? 1 : 2;
    const uint64_t sample_seed = mix_keys(cfg.seed, split_key, static_cast<uint64_t>(index));
    for (int attempt = 0; attempt < 64; attempt++) {
        Rng rng(mix_keys(sample_seed, 0xa77e, static_cast<uint64_t>(attempt)));
        const int n = rng.next_int(cfg.min_objects, cfg.max_objects);
        SceneSpec scene = generate_scene(rng.next_u64(), cfg.grid_rows, cfg.grid_cols, n,
                                         cfg.image_size, cfg.image_size);
        Expression expr;
        try {
            expr = compose_expression(scene, setting, rng.next_u64());
        } catch (const UnsatisfiableSetting&) {
            continue;
        }
        Rendered rendered = render(scene);
        Tensor<uint8_t> mask({cfg.image_size, cfg.image_size});
        for (int id : expr.target_ids) {
            const auto& m = rendered.masks.at(id);
            for (int64_t i = 0; i < mask.numel(); i++) mask.data[i] |= m.data[i];
        }
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%06d", split.c_str(), index);
        Built out;
        out.record.sample_id = name;
        out.record.image_path = std::string("images/") + name + ".ppm";
        out.record.expression = expr.text;
        out.record.entity_spans = expr.entity_spans;
        out.record.setting = setting;
        out.record.delta = setting == Setting::one_to_zero ? 0 : 1;
        out.record.mask_rle = encode_mask_rle(mask);
        out.record.img_h = cfg.image_size;
        out.record.img_w = cfg.image_size;
        check_record_invariants(out.record);
        out.image = std::move(rendered.image);
        return out;
    }
    throw std::runtime_error("could not realize setting " + std::string(to_string(setting)) +
                             " for sample " + split + "/" + std::to_string(index));
}

std::vector<Setting> split_settings(const GenConfig& cfg, const std::string& split, int count) {
    const auto quota = setting_quota(count, cfg.mix_one_to_one, cfg.mix_one_to_many,
                                     cfg.mix_one_to_zero);
    std::vector<Setting> settings;
    settings.insert(settings.end(), static_cast<size_t>(quota[0]), Setting::one_to_one);
    settings.insert(settings.end(), static_cast<size_t>(quota[1]), Setting::one_to_many);
    settings.insert(settings.end(), static_cast<size_t>(quota[2]), Setting::one_to_zero);
    Rng rng(mix_keys(cfg.seed, split == "train" ? 0x7a1 : 0x7e2));
    rng.shuffle(settings.begin(), settings.end());
    return settings;
}

} // namespace

std::vector<ManifestRecord> build_dataset(const GenConfig& cfg, const std::string& out_dir) {
    fs::create_directories(fs::path(out_dir) / "images");
    std::vector<ManifestRecord> all;
    for (const std::string split : {"train", "test"}) {
        const int count = split == "train" ? cfg.train_count : cfg.test_count;
        const auto settings = split_settings(cfg, split, count);
        std::vector<Built> built(static_cast<size_t>(count));
        // samples are pure functions of (seed, split, index): parallel build
        #pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < count; i++)
            built[static_cast<size_t>(i)] = build_one(cfg, split, i, settings[static_cast<size_t>(i)]);
        for (auto& b : built) {
            write_ppm(b.image, (fs::path(out_dir) / b.record.image_path).string());
            all.push_back(std::move(b.record));
        }
    }
    write_manifest(all, (fs::path(out_dir) / "manifest.jsonl").string());
    text::Vocab::builtin().save((fs::path(out_dir) / "vocab.json").string());
    return all;
}

std::vector<Sample> load_samples(const std::string& manifest_path) {
    const auto records = load_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<Sample> samples;
    samples.reserve(records.size());
    for (const auto& r : records) {
        Sample s;
        s.id = r.sample_id;
        s.image = read_ppm((base / r.image_path).string());
        s.expression = r.expression;
        s.entity_spans = r.entity_spans;
        s.mask = decode_mask_rle(r.mask_rle, r.img_h, r.img_w);
        s.setting = r.setting;
        s.delta = r.delta;
        samples.push_back(std::move(s));
    }
    return samples;
}

} // namespace refseg::data
