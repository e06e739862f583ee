// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_DATASET_H
#define REFSEG_DATASET_H

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "refseg/tensor.h"

namespace refseg::data {

enum class ObjShape { square, circle, triangle };
enum class ObjColor { red, green, blue, yellow };
enum class Setting { one_to_zero, one_to_one, one_to_many };

const char* to_string(ObjShape s);
const char* to_string(ObjColor c);
const char* to_string(Setting s);
Setting setting_from_string(const std::string& s);

struct SceneObject {
    int id = 0;
    ObjShape shape = ObjShape::square;
    ObjColor color = ObjColor::red;
    int size = 0;      // bounding-box side in pixels
    int row = 0, col = 0; // grid cell anchor
    int y0 = 0, x0 = 0;   // bounding-box top-left in pixels
};

struct SceneSpec {
    std::vector<SceneObject> objects;
    int grid_rows = 0, grid_cols = 0;
    int img_h = 0, img_w = 0;

    void validate() const; // throws on any broken invariant
};

struct UnsatisfiableSetting : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic scene draw: n distinct grid cells, one object per cell,
// jittered inside the cell so bounding boxes stay pairwise disjoint.
SceneSpec generate_scene(uint64_t seed, int grid_rows, int grid_cols, int n_objects,
                         int img_h = 64, int img_w = 64);

struct Rendered {
    Tensor<float> image;                    // (3,H,W), values in [0,1]
    std::map<int, Tensor<uint8_t>> masks;   // object id -> (H,W) binary
};

Rendered render(const SceneSpec& scene);

struct Expression {
    std::string text;
    std::vector<int> target_ids;
    std::vector<std::pair<int, int>> entity_spans; // half-open token spans
};

// Picks an attribute query (color and/or shape) whose match count realizes
// the requested setting, then fills a fixed template. Throws
// UnsatisfiableSetting when the scene offers no such query.
Expression compose_expression(const SceneSpec& scene, Setting setting, uint64_t seed);

// ---- mask run-length encoding (row-major, origin top-left) ----

std::vector<std::pair<int, int>> encode_mask_rle(const Tensor<uint8_t>& mask);
Tensor<uint8_t> decode_mask_rle(const std::vector<std::pair<int, int>>& runs, int h, int w);

// ---- on-disk benchmark ----

struct ManifestRecord {
    std::string sample_id;
    std::string image_path; // relative to the manifest directory
    std::string expression;
    std::vector<std::pair<int, int>> entity_spans;
    Setting setting = Setting::one_to_one;
    int delta = 1;
    std::vector<std::pair<int, int>> mask_rle;
    int img_h = 0, img_w = 0;
};

struct GenConfig {
    int train_count = 2000;
    int test_count = 400;
    double mix_one_to_one = 0.4;
    double mix_one_to_many = 0.4;
    double mix_one_to_zero = 0.2;
    int image_size = 64;
    int grid_rows = 2, grid_cols = 2;
    int min_objects = 3, max_objects = 4;
    uint64_t seed = 1;
};

// Writes images/, manifest.jsonl and vocab.json under out_dir. Returns the
// emitted records (train split first, then test).
std::vector<ManifestRecord> build_dataset(const GenConfig& cfg, const std::string& out_dir);

std::vector<ManifestRecord> load_manifest(const std::string& manifest_path);
void write_manifest(const std::vector<ManifestRecord>& records, const std::string& path);

// In-memory sample used by training and evaluation.
struct Sample {
    std::string id;
    Tensor<float> image;   // (3,H,W)
    std::string expression;
    std::vector<std::pair<int, int>> entity_spans;
    Tensor<uint8_t> mask;  // (H,W)
    Setting setting = Setting::one_to_one;
    int delta = 1;
};

std::vector<Sample> load_samples(const std::string& manifest_path);

// 8-bit binary PPM raster IO.
void write_ppm(const Tensor<float>& image, const std::string& path);
Tensor<float> read_ppm(const std::string& path);

// Exact per-setting counts for a split: largest-remainder rounding of the
// mix fractions, so e.g. 120 records at 40/40/20 give exactly 24 one-to-zero.
std::vector<int> setting_quota(int total, double p_one, double p_many, double p_zero);

} // namespace refseg::data

#endif // REFSEG_DATASET_H
