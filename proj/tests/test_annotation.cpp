#include <doctest.h>

#include <functional>
#include <filesystem>

#include <algorithm>
#include <set>

#include "mf2/annotation.hpp"
#include "mf2/tokenizer.hpp"

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

DatasetManifest labeled_fixture(int videos, int frames, std::uint64_t seed) {
    return make_fixture_dataset(videos, frames, seed, {.image_size = 16, .generate_pixels = false});
}

struct EmptyClient : AnnotationClient {
    std::string generate(const FaceSample&, const PromptBundle&) override { return ""; }
};

}  // namespace

TEST_SUITE("annotation") {

TEST_CASE("filter keeps only fully labeled samples, order preserved") {
    DatasetManifest m = labeled_fixture(2, 5, 1);
    CHECK(filter_samples(m).samples.size() == m.samples.size());  // identity when labeled

    // Drop AU labels on 3 of 10 samples by hand.
    m.samples[1].au_labels.reset();
    m.samples[4].au_labels.reset();
    m.samples[8].au_labels.reset();
    DatasetManifest f = filter_samples(m);
    CHECK(f.samples.size() == 7);
    // Original relative order: positions 0,2,3,5,6,7,9.
    CHECK(f.samples[0].sample_id == m.samples[0].sample_id);
    CHECK(f.samples[1].sample_id == m.samples[2].sample_id);
    CHECK(f.samples[6].sample_id == m.samples[9].sample_id);

    DatasetManifest empty;
    CHECK(filter_samples(empty).samples.empty());
}

TEST_CASE("balance reduces the dominant class to the minimum at tolerance 0") {
    // Build counts {A:20, B:10, rest:10} by concatenating fixtures.
    DatasetManifest m;
    int next_frame = 0;
    auto push = [&](int emotion, int count) {
        for (int i = 0; i < count; ++i) {
            FaceSample s;
            s.video_id = "v0";
            s.frame_index = next_frame++;
            s.sample_id = "s" + std::to_string(s.frame_index);
            s.image_path = "none.ppm";
            s.landmarks = canonical_landmarks(16);
            s.au_labels = std::array<int, kNumAus>{};
            s.emotion = emotion;
            m.samples.push_back(std::move(s));
        }
    };
    push(0, 20);
    for (int c = 1; c < kNumEmotions; ++c) push(c, 10);

    DatasetManifest b = balance_classes(m, 0.0, 42);
    auto counts = b.class_counts();
    CHECK(counts["Neutral"] == 10);
    for (int c = 1; c < kNumEmotions; ++c) CHECK(counts[emotion_names()[c]] == 10);

    // Already balanced input is the identity, any tolerance.
    DatasetManifest b2 = balance_classes(b, 0.25, 7);
    CHECK(serialize_manifest(b2) == serialize_manifest(b));

    // Deterministic for a fixed seed.
    DatasetManifest b3 = balance_classes(m, 0.0, 42);
    CHECK(serialize_manifest(b3) == serialize_manifest(b));

    // Missing class.
    DatasetManifest no_fear;
    for (const auto& s : m.samples)
        if (*s.emotion != 3) no_fear.samples.push_back(s);
    CHECK(kind_of([&] { balance_classes(no_fear, 0.0, 1); }) == ErrKind::EmptyClass);
}

TEST_CASE("split is video-disjoint with the expected video counts") {
    DatasetManifest m = labeled_fixture(10, 3, 5);
    auto [train, val] = split_by_video(m, 0.8, 9);
    CHECK(train.samples.size() + val.samples.size() == m.samples.size());
    std::set<std::string> tv, vv;
    for (const auto& s : train.samples) tv.insert(s.video_id);
    for (const auto& s : val.samples) vv.insert(s.video_id);
    CHECK(tv.size() == 8);
    CHECK(vv.size() == 2);
    for (const auto& v : tv) CHECK(vv.count(v) == 0);
    CHECK(train.split == DatasetManifest::Split::Train);
    CHECK(val.split == DatasetManifest::Split::Val);

    DatasetManifest single = labeled_fixture(1, 4, 2);
    CHECK(kind_of([&] { split_by_video(single, 0.8, 0); }) == ErrKind::InsufficientVideos);
}

TEST_CASE("split tracks the image-count ratio with uneven videos") {
    // Video sizes 12, 6, 3, 3, 3, 3 (30 images): fraction 0.7 -> 21 target.
    DatasetManifest m;
    int sizes[] = {12, 6, 3, 3, 3, 3};
    for (int v = 0; v < 6; ++v)
        for (int f = 0; f < sizes[v]; ++f) {
            FaceSample s;
            s.video_id = "v" + std::to_string(v);
            s.frame_index = f;
            s.sample_id = s.video_id + "_" + std::to_string(f);
            s.image_path = "x.ppm";
            s.landmarks = canonical_landmarks(16);
            s.au_labels = std::array<int, kNumAus>{};
            s.emotion = f % kNumEmotions;
            m.samples.push_back(std::move(s));
        }
    auto [train, val] = split_by_video(m, 0.7, 3);
    // round(0.7*6)=4 train videos; greedy largest-first should land close to
    // the 21-image target.
    std::set<std::string> tv;
    for (const auto& s : train.samples) tv.insert(s.video_id);
    CHECK(tv.size() == 4);
    CHECK(std::abs(static_cast<int>(train.samples.size()) - 21) <= 3);
}

TEST_CASE("prompt bundles carry roles, formats, signals and ground truth") {
    DatasetManifest m = labeled_fixture(1, 8, 3);
    const FaceSample& s = m.samples[4];  // Happiness by construction

    PromptBundle emo = build_prompt(s, CaptionType::Emotion);
    CHECK(emo.initial_setup.find("emotion description expert") != std::string::npos);
    CHECK(!emo.output_format.empty());
    CHECK(!emo.output_signal.empty());
    CHECK(emo.ground_truth_payload.find("Happiness") != std::string::npos);

    PromptBundle au = build_prompt(s, CaptionType::Au);
    CHECK(au.initial_setup.find("AU description expert") != std::string::npos);

    PromptBundle key = build_prompt(s, CaptionType::KeyAu);
    CHECK(key.ground_truth_payload.find("Emotion label") != std::string::npos);
    CHECK(key.ground_truth_payload.find("Active action units") != std::string::npos);
    CHECK(key.output_signal.find("decisive") != std::string::npos);

    CHECK(kind_of([&] { caption_type_from_string("style"); }) == ErrKind::UnknownCaptionType);

    FaceSample unlabeled = s;
    unlabeled.au_labels.reset();
    CHECK(kind_of([&] { build_prompt(unlabeled, CaptionType::Au); }) == ErrKind::MissingLabel);
    CHECK(kind_of([&] { build_prompt(unlabeled, CaptionType::KeyAu); }) == ErrKind::MissingLabel);
    CHECK_NOTHROW(build_prompt(unlabeled, CaptionType::Emotion));
}

TEST_CASE("mock annotation is deterministic, complete and budget-clean") {
    DatasetManifest m = labeled_fixture(1, 2, 9);
    MockClient client(123);
    std::vector<CaptionType> types = {CaptionType::Au, CaptionType::Emotion, CaptionType::KeyAu};

    AnnotateResult r1 = annotate_dataset(m, client, types);
    AnnotateResult r2 = annotate_dataset(m, client, types);
    REQUIRE(r1.records.size() == 6);
    CHECK(r1.failed.empty());
    CHECK(serialize_captions(r1.records) == serialize_captions(r2.records));

    // Ordered by (sample_id, caption_type).
    for (std::size_t i = 1; i < r1.records.size(); ++i) {
        const auto& a = r1.records[i - 1];
        const auto& b = r1.records[i];
        CHECK((a.sample_id < b.sample_id ||
               (a.sample_id == b.sample_id &&
                static_cast<int>(a.caption_type) < static_cast<int>(b.caption_type))));
    }

    for (const auto& rec : r1.records) {
        CHECK(validate_caption(rec).empty());
        CHECK(rec.prompt_hash.size() == 64);
    }

    // The emotion caption names the class.
    const FaceSample& happy = m.samples[0].emotion == 4 ? m.samples[0] : m.samples[1];
    MockClient c2(7);
    std::string text = c2.generate(happy, build_prompt(happy, CaptionType::Emotion));
    CHECK(text.find(emotion_names()[*happy.emotion]) != std::string::npos);

    // A client that returns empty strings fails every (sample, type) pair.
    EmptyClient empty;
    AnnotateResult rf = annotate_dataset(m, empty, types);
    CHECK(rf.records.empty());
    CHECK(rf.failed.size() == 6);
}

TEST_CASE("caption validation enforces the per-type budgets") {
    CaptionRecord rec;
    rec.caption_type = CaptionType::Emotion;

    auto words = [](int n) {
        std::string out;
        for (int i = 0; i < n; ++i) out += (i ? " w" : "w") + std::to_string(i);
        return out;
    };
    rec.text = words(61);
    rec.token_count = 61;
    CHECK(validate_caption(rec).empty());

    rec.text = words(62);
    auto v = validate_caption(rec);
    REQUIRE(v.size() == 1);
    CHECK(v[0] == CaptionViolation::LengthExceeded);

    rec.text = "";
    v = validate_caption(rec);
    REQUIRE(v.size() == 1);
    CHECK(v[0] == CaptionViolation::EmptyCaption);

    rec.caption_type = CaptionType::Au;
    rec.text = words(169);
    CHECK(validate_caption(rec).empty());
    rec.text = words(170);
    CHECK(validate_caption(rec).size() == 1);

    // Key-AU budget is configurable.
    rec.caption_type = CaptionType::KeyAu;
    rec.text = words(50);
    CHECK(validate_caption(rec, 40).size() == 1);
    CHECK(validate_caption(rec, 50).empty());
}

TEST_CASE("au captions split into the twelve per-AU sentences") {
    DatasetManifest m = labeled_fixture(1, 1, 4);
    MockClient client(0);
    std::string text = client.generate(m.samples[0], build_prompt(m.samples[0], CaptionType::Au));
    auto parts = split_au_caption(text);
    REQUIRE(parts.size() == kNumAus);
    for (int i = 0; i < kNumAus; ++i) {
        std::string tag = "AU" + std::to_string(au_ids()[i]);
        CHECK(parts[i].find(tag) != std::string::npos);
    }
    CHECK(kind_of([] { split_au_caption("AU1 is active. nothing else."); }) ==
          ErrKind::MissingCaption);
}

TEST_CASE("caption records round-trip through JSONL") {
    DatasetManifest m = labeled_fixture(1, 2, 6);
    MockClient client(5);
    auto r = annotate_dataset(m, client, {CaptionType::Emotion});
    std::string dir = std::filesystem::temp_directory_path() / "mf2_captions_test";
    std::filesystem::create_directories(dir);
    save_captions(dir + "/c.jsonl", r.records);
    auto loaded = load_captions(dir + "/c.jsonl");
    CHECK(serialize_captions(loaded) == serialize_captions(r.records));
}

TEST_CASE("segmenter counts words and punctuation separately") {
    auto segs = segment_text("The face, clearly happy. AU12!");
    std::vector<std::string> expect = {"the", "face", ",", "clearly", "happy",
                                       ".", "au12", "!"};
    CHECK(segs == expect);

    Tokenizer tok = Tokenizer::build_from_corpus({"alpha beta", "beta gamma."});
    CHECK(tok.has_word("alpha"));
    CHECK(tok.has_word("."));
    // OOV words fall back to bytes, one id per byte.
    auto ids = tok.encode("alpha zz");
    CHECK(ids.size() == 3);  // "alpha" + 2 bytes
    CHECK(ids[1] >= Tokenizer::kFirstByteId);
    CHECK(ids[1] < Tokenizer::kFirstWordId);
}

}  // TEST_SUITE
