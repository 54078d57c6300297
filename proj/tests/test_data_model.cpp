#include <doctest.h>

#include <functional>

#include <filesystem>
#include <set>

#include "mf2/data_model.hpp"

using namespace mf2;

namespace {

ErrKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrKind::Io;
}

std::string temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("mf2_test_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

}  // namespace

TEST_SUITE("data_model") {

TEST_CASE("class tables are ordered per the report layout") {
    CHECK(emotion_names()[0] == "Neutral");
    CHECK(emotion_names()[7] == "Other");
    CHECK(emotion_index("Happiness") == 4);
    CHECK(au_ids()[0] == 1);
    CHECK(au_ids()[11] == 26);
    CHECK(au_index(25) == 10);
    // Bijective both ways.
    for (int i = 0; i < kNumAus; ++i) CHECK(au_index(au_ids()[i]) == i);
    for (int i = 0; i < kNumEmotions; ++i) CHECK(emotion_index(emotion_names()[i]) == i);
    CHECK(kind_of([] { emotion_index("Joy"); }) == ErrKind::UnknownLabel);
    CHECK(kind_of([] { au_index(9); }) == ErrKind::UnknownLabel);
}

TEST_CASE("empty manifest file loads as zero samples with zero counts") {
    std::string dir = temp_dir("empty_manifest");
    write_text_file(dir + "/m.jsonl", "");
    DatasetManifest m = load_manifest(dir + "/m.jsonl");
    CHECK(m.samples.empty());
    for (const auto& [name, count] : m.class_counts()) CHECK(count == 0);
    for (const auto& [id, count] : m.au_counts()) CHECK(count == 0);
}

TEST_CASE("fixture counts match an independent hand tally") {
    // 16 records across 2 videos; the tally below walks records one by one.
    DatasetManifest m = make_fixture_dataset(2, 8, 3, {.image_size = 16, .generate_pixels = false});
    REQUIRE(m.samples.size() == 16);
    CHECK(m.video_ids().size() == 2);

    std::map<std::string, int> tally_emotion;
    std::map<int, int> tally_au;
    for (const auto& s : m.samples) {
        REQUIRE(s.emotion.has_value());
        REQUIRE(s.au_labels.has_value());
        tally_emotion[emotion_names()[*s.emotion]] += 1;
        for (int i = 0; i < kNumAus; ++i)
            if ((*s.au_labels)[i]) tally_au[au_ids()[i]] += 1;
    }
    auto counts = m.class_counts();
    int total = 0;
    for (const auto& [name, count] : counts) {
        CHECK(count == tally_emotion[name]);
        total += count;
    }
    CHECK(total == static_cast<int>(m.samples.size()));
    auto au_c = m.au_counts();
    for (const auto& [id, count] : au_c) CHECK(count == tally_au[id]);

    // Round-trips through JSONL byte for byte.
    std::string dir = temp_dir("roundtrip");
    save_manifest(dir + "/m.jsonl", m);
    DatasetManifest loaded = load_manifest(dir + "/m.jsonl");
    CHECK(serialize_manifest(loaded) == serialize_manifest(m));
}

TEST_CASE("loader rejects schema violations with the right kinds") {
    std::string dir = temp_dir("loader_errors");
    DatasetManifest m = make_fixture_dataset(1, 2, 1, {.image_size = 16, .generate_pixels = false});
    std::string good = serialize_manifest(m);

    // Out-of-vocabulary emotion.
    std::string joy = good;
    auto pos = joy.find("\"Neutral\"");
    REQUIRE(pos != std::string::npos);
    joy.replace(pos, 9, "\"Joy\"");
    write_text_file(dir + "/joy.jsonl", joy);
    CHECK(kind_of([&] { load_manifest(dir + "/joy.jsonl"); }) == ErrKind::UnknownLabel);

    // Duplicate (video_id, frame_index).
    std::string first_line = good.substr(0, good.find('\n') + 1);
    write_text_file(dir + "/dup.jsonl", first_line + first_line);
    CHECK(kind_of([&] { load_manifest(dir + "/dup.jsonl"); }) == ErrKind::DuplicateFrame);

    // Malformed JSON names the line.
    write_text_file(dir + "/bad.jsonl", first_line + "{not json\n");
    try {
        load_manifest(dir + "/bad.jsonl");
        FAIL("expected MalformedRecord");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrKind::MalformedRecord);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }

    CHECK(kind_of([&] { load_manifest(dir + "/absent.jsonl"); }) == ErrKind::MissingFile);
}

TEST_CASE("fixture generation is deterministic and label-complete") {
    DatasetManifest a = make_fixture_dataset(1, 1, 0, {.image_size = 16});
    DatasetManifest b = make_fixture_dataset(1, 1, 0, {.image_size = 16});
    CHECK(serialize_manifest(a) == serialize_manifest(b));
    REQUIRE(a.samples[0].pixels.has_value());
    REQUIRE(b.samples[0].pixels.has_value());
    CHECK(a.samples[0].pixels->hw3 == b.samples[0].pixels->hw3);

    DatasetManifest m = make_fixture_dataset(8, 4, 7, {.image_size = 16, .generate_pixels = false});
    CHECK(m.samples.size() == 32);
    std::set<int> seen;
    for (const auto& s : m.samples) seen.insert(*s.emotion);
    CHECK(seen.size() == kNumEmotions);

    CHECK(kind_of([] { make_fixture_dataset(0, 4, 0); }) == ErrKind::InvalidArgument);
}

TEST_CASE("landmarks stay in range and mouth sits below the eyes") {
    const int size = 48;
    auto pts = canonical_landmarks(size);
    REQUIRE(pts.size() == kNumLandmarks);
    for (const auto& p : pts) {
        CHECK(p[0] >= 0.0);
        CHECK(p[0] < size);
        CHECK(p[1] >= 0.0);
        CHECK(p[1] < size);
    }
    double eye_y = pts[36][1];
    double mouth_y = pts[62][1];
    double chin_y = pts[8][1];
    CHECK(eye_y < mouth_y);
    CHECK(mouth_y < chin_y);
}

TEST_CASE("ppm round-trip preserves quantized pixels") {
    std::string dir = temp_dir("ppm");
    Image img;
    img.size = 8;
    Rng rng(5);
    img.hw3.resize(8 * 8 * 3);
    for (auto& v : img.hw3) v = rng.uniform01();
    write_ppm(dir + "/x.ppm", img);
    Image back = read_ppm(dir + "/x.ppm");
    REQUIRE(back.size == 8);
    for (std::size_t i = 0; i < img.hw3.size(); ++i)
        CHECK(std::abs(back.hw3[i] - img.hw3[i]) <= 0.5 / 255.0 + 1e-9);
    // Quantization is idempotent.
    write_ppm(dir + "/y.ppm", back);
    Image again = read_ppm(dir + "/y.ppm");
    CHECK(again.hw3 == back.hw3);
}

TEST_CASE("ppm loader rejects missing and truncated files") {
    std::string dir = temp_dir("ppm_errors");
    CHECK(kind_of([&] { read_ppm(dir + "/missing.ppm"); }) == ErrKind::MissingFile);

    write_text_file(dir + "/short.ppm", "P6\n4 4\n255\nabc");
    CHECK(kind_of([&] { read_ppm(dir + "/short.ppm"); }) == ErrKind::MalformedRecord);

    write_text_file(dir + "/wrong.ppm", "P5\n4 4\n255\n");
    CHECK(kind_of([&] { read_ppm(dir + "/wrong.ppm"); }) == ErrKind::MalformedRecord);
}

TEST_CASE("missing-label fixtures really drop fields") {
    DatasetManifest m = make_fixture_dataset(3, 10, 11,
                                             {.image_size = 16,
                                              .generate_pixels = false,
                                              .missing_au_fraction = 0.4});
    int missing = 0;
    for (const auto& s : m.samples)
        if (!s.au_labels) ++missing;
    CHECK(missing > 0);
    CHECK(missing < static_cast<int>(m.samples.size()));
}

}  // TEST_SUITE
