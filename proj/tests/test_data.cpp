// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "refseg/dataset.h"
#include "refseg/rng.h"

using namespace refseg;
using namespace refseg::data;

namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

SceneSpec make_scene(std::vector<SceneObject> objects, int grid = 2, int img = 64) {
    SceneSpec s;
    s.objects = std::move(objects);
    s.grid_rows = s.grid_cols = grid;
    s.img_h = s.img_w = img;
    return s;
}

} // namespace

TEST_CASE("generate_scene: empty, full grid, determinism, capacity error") {
    SceneSpec empty = generate_scene(0, 4, 4, 0);
    CHECK(empty.objects.empty());

    SceneSpec full = generate_scene(7, 4, 4, 16);
    CHECK(full.objects.size() == 16);
    // exhaustive pairwise bounding-box overlap oracle
    for (size_t i = 0; i < full.objects.size(); i++)
        for (size_t j = i + 1; j < full.objects.size(); j++) {
            const auto& a = full.objects[i];
            const auto& b = full.objects[j];
            const bool overlap = a.x0 < b.x0 + b.size && b.x0 < a.x0 + a.size &&
                                 a.y0 < b.y0 + b.size && b.y0 < a.y0 + a.size;
            CHECK_FALSE(overlap);
        }
    for (const auto& o : full.objects) {
        CHECK(o.y0 >= 0);
        CHECK(o.x0 >= 0);
        CHECK(o.y0 + o.size <= 64);
        CHECK(o.x0 + o.size <= 64);
    }

    SceneSpec again = generate_scene(7, 4, 4, 16);
    for (size_t i = 0; i < full.objects.size(); i++) {
        CHECK(full.objects[i].shape == again.objects[i].shape);
        CHECK(full.objects[i].color == again.objects[i].color);
        CHECK(full.objects[i].size == again.objects[i].size);
        CHECK(full.objects[i].y0 == again.objects[i].y0);
        CHECK(full.objects[i].x0 == again.objects[i].x0);
    }

    CHECK_THROWS_AS(generate_scene(0, 2, 2, 5), std::invalid_argument);
}

TEST_CASE("render: empty scene is uniform background with no masks") {
    Rendered r = render(make_scene({}));
    CHECK(r.masks.empty());
    for (int c = 0; c < 3; c++)
        for (int y = 0; y < 64; y++)
            for (int x = 0; x < 64; x++) CHECK(r.image(c, y, x) == r.image(c, 0, 0));
}

TEST_CASE("render: square mask has analytic pixel count, masks disjoint") {
    SceneObject sq{0, ObjShape::square, ObjColor::red, 8, 0, 0, 4, 4};
    SceneObject ci{1, ObjShape::circle, ObjColor::blue, 10, 1, 1, 40, 40};
    Rendered r = render(make_scene({sq, ci}));
    int64_t count = 0;
    for (auto v : r.masks.at(0).data) count += v;
    CHECK(count == 64); // side 8 -> exactly 64 pixels

    // brute-force elementwise AND between the two masks
    const auto& m0 = r.masks.at(0);
    const auto& m1 = r.masks.at(1);
    for (int64_t i = 0; i < m0.numel(); i++)
        CHECK((m0.data[static_cast<size_t>(i)] & m1.data[static_cast<size_t>(i)]) == 0);

    // mask covers exactly the drawn pixels
    for (int y = 0; y < 64; y++)
        for (int x = 0; x < 64; x++) {
            const bool drawn = r.image(0, y, x) != doctest::Approx(0.15f).epsilon(1e-6) ||
                               r.image(2, y, x) != doctest::Approx(0.18f).epsilon(1e-6);
            const bool masked = m0(y, x) || m1(y, x);
            CHECK(drawn == masked);
        }
}

TEST_CASE("compose_expression: one_to_many picks both matching circles") {
    // two red circles + one blue square; every many-query resolves to the circles
    SceneObject a{0, ObjShape::circle, ObjColor::red, 10, 0, 0, 2, 2};
    SceneObject b{1, ObjShape::circle, ObjColor::red, 10, 0, 1, 2, 40};
    SceneObject c{2, ObjShape::square, ObjColor::blue, 10, 1, 0, 40, 2};
    SceneSpec scene = make_scene({a, b, c});
    for (uint64_t seed = 0; seed < 16; seed++) {
        Expression e = compose_expression(scene, Setting::one_to_many, seed);
        CHECK(e.target_ids == std::vector<int>{0, 1});
        REQUIRE(e.entity_spans.size() == 1);
        CHECK(e.entity_spans[0].first == 1);
        CHECK(e.text.rfind("the ", 0) == 0);
        CHECK(e.text.find('s') != std::string::npos); // plural noun
    }
}

TEST_CASE("compose_expression: one_to_zero has no matches by construction") {
    SceneObject a{0, ObjShape::circle, ObjColor::red, 10, 0, 0, 2, 2};
    SceneSpec scene = make_scene({a});
    Expression e = compose_expression(scene, Setting::one_to_zero, 3);
    CHECK(e.target_ids.empty());
    CHECK(!e.entity_spans.empty());
}

TEST_CASE("compose_expression: one_to_one target is unique per the matching oracle") {
    SceneObject a{0, ObjShape::square, ObjColor::blue, 10, 0, 0, 2, 2};
    SceneObject b{1, ObjShape::circle, ObjColor::red, 10, 0, 1, 2, 40};
    SceneObject c{2, ObjShape::circle, ObjColor::red, 10, 1, 0, 40, 2};
    SceneSpec scene = make_scene({a, b, c});
    Expression e = compose_expression(scene, Setting::one_to_one, 11);
    REQUIRE(e.target_ids.size() == 1);
    CHECK(e.target_ids[0] == 0); // the blue square is the only unique match
}

TEST_CASE("compose_expression: unsatisfiable setting signals an error") {
    SceneSpec scene = make_scene({});
    CHECK_THROWS_AS(compose_expression(scene, Setting::one_to_one, 0), UnsatisfiableSetting);
    CHECK_THROWS_AS(compose_expression(scene, Setting::one_to_many, 0), UnsatisfiableSetting);
}

TEST_CASE("rle: trivial cases and property roundtrip") {
    Tensor<uint8_t> zero({4, 4});
    CHECK(encode_mask_rle(zero).empty());

    Tensor<uint8_t> tiny({1, 3});
    tiny.data = {1, 1, 0};
    auto runs = encode_mask_rle(tiny);
    REQUIRE(runs.size() == 1);
    CHECK(runs[0] == std::pair<int, int>{0, 2});

    Rng rng(99);
    for (int iter = 0; iter < 50; iter++) {
        Tensor<uint8_t> m({16, 16});
        for (auto& v : m.data) v = rng.next_below(2) ? 1 : 0;
        auto enc = encode_mask_rle(m);
        Tensor<uint8_t> dec = decode_mask_rle(enc, 16, 16);
        CHECK(dec.data == m.data);
        // runs maximal and sorted
        for (size_t i = 1; i < enc.size(); i++)
            CHECK(enc[i].first > enc[i - 1].first + enc[i - 1].second);
    }
}

TEST_CASE("rle: decode rejects malformed runs") {
    CHECK_THROWS(decode_mask_rle({{0, 17}}, 4, 4));
    CHECK_THROWS(decode_mask_rle({{-1, 2}}, 4, 4));
    CHECK_THROWS(decode_mask_rle({{0, 2}, {1, 2}}, 4, 4));  // overlap
    CHECK_THROWS(decode_mask_rle({{0, 2}, {2, 2}}, 4, 4));  // adjacent, not maximal
    CHECK_NOTHROW(decode_mask_rle({{0, 2}, {3, 2}}, 4, 4));
}

TEST_CASE("setting_quota: largest remainder is exact") {
    auto q = setting_quota(120, 0.4, 0.4, 0.2);
    CHECK(q == std::vector<int>{48, 48, 24});
    q = setting_quota(10, 0.0, 0.0, 1.0);
    CHECK(q == std::vector<int>{0, 0, 10});
    q = setting_quota(7, 1.0, 1.0, 1.0);
    CHECK(q[0] + q[1] + q[2] == 7);
}

TEST_CASE("build_dataset: counts, invariants, byte-identical regeneration") {
    const std::string dir = (fs::temp_directory_path() / "refseg_data_test").string();
    fs::remove_all(dir);
    GenConfig cfg;
    cfg.train_count = 100;
    cfg.test_count = 20;
    cfg.seed = 5;
    auto records = build_dataset(cfg, dir);
    CHECK(records.size() == 120);
    int zero = 0;
    std::set<std::string> ids;
    for (const auto& r : records) {
        ids.insert(r.sample_id);
        if (r.setting == Setting::one_to_zero) {
            zero++;
            CHECK(r.delta == 0);
            CHECK(r.mask_rle.empty());
        } else {
            CHECK(r.delta == 1);
            CHECK(!r.mask_rle.empty());
        }
        CHECK(!r.entity_spans.empty());
    }
    CHECK(zero == 24);
    CHECK(ids.size() == 120); // train/test disjoint by sample_id

    const std::string manifest1 = slurp(dir + "/manifest.jsonl");
    fs::remove_all(dir);
    build_dataset(cfg, dir);
    CHECK(slurp(dir + "/manifest.jsonl") == manifest1);

    // reload with zero field loss
    auto loaded = load_manifest(dir + "/manifest.jsonl");
    REQUIRE(loaded.size() == records.size());
    for (size_t i = 0; i < loaded.size(); i++) {
        CHECK(loaded[i].sample_id == records[i].sample_id);
        CHECK(loaded[i].expression == records[i].expression);
        CHECK(loaded[i].entity_spans == records[i].entity_spans);
        CHECK(loaded[i].setting == records[i].setting);
        CHECK(loaded[i].delta == records[i].delta);
        CHECK(loaded[i].mask_rle == records[i].mask_rle);
    }
    fs::remove_all(dir);
}

TEST_CASE("build_dataset: pure one_to_zero mix") {
    const std::string dir = (fs::temp_directory_path() / "refseg_data_zero").string();
    fs::remove_all(dir);
    GenConfig cfg;
    cfg.train_count = 10;
    cfg.test_count = 5;
    cfg.mix_one_to_one = 0;
    cfg.mix_one_to_many = 0;
    cfg.mix_one_to_zero = 1.0;
    auto records = build_dataset(cfg, dir);
    for (const auto& r : records) {
        CHECK(r.delta == 0);
        CHECK(r.mask_rle.empty());
    }
    fs::remove_all(dir);
}

TEST_CASE("ppm roundtrip is exact at 8 bits") {
    Rng rng(3);
    Tensor<float> img({3, 8, 6});
    for (auto& v : img.data) v = static_cast<float>(rng.next_below(256)) / 255.0f;
    const std::string path = (fs::temp_directory_path() / "refseg_img.ppm").string();
    write_ppm(img, path);
    Tensor<float> back = read_ppm(path);
    REQUIRE(back.shape == img.shape);
    for (int64_t i = 0; i < img.numel(); i++)
        CHECK(back.data[static_cast<size_t>(i)] == doctest::Approx(img.data[static_cast<size_t>(i)]).epsilon(1e-6));
    fs::remove(path);
}

TEST_CASE("load_samples: delta/mask/target coupling holds across a generated set") {
    const std::string dir = (fs::temp_directory_path() / "refseg_data_load").string();
    fs::remove_all(dir);
    GenConfig cfg;
    cfg.train_count = 30;
    cfg.test_count = 10;
    cfg.seed = 9;
    build_dataset(cfg, dir);
    auto samples = load_samples(dir + "/manifest.jsonl");
    CHECK(samples.size() == 40);
    for (const auto& s : samples) {
        int64_t fg = 0;
        for (auto v : s.mask.data) fg += v;
        CHECK((s.delta == 0) == (s.setting == Setting::one_to_zero));
        CHECK((fg == 0) == (s.delta == 0));
        CHECK(s.image.dim(1) == 64);
        CHECK(s.image.dim(2) == 64);
    }
    fs::remove_all(dir);
}
