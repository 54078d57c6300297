#pragma once

// Dataset construction pipeline: labeled-sample filtering, emotion-class
// balancing, video-disjoint splitting, three-stage caption prompts, and a
// pluggable caption client (deterministic mock by default, HTTP remote
// available behind the same interface).

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mf2/data_model.hpp"
#include "mf2/tokenizer.hpp"

namespace mf2 {

struct PromptBundle {
    CaptionType caption_type = CaptionType::Emotion;
    std::string initial_setup;         // role assignment
    std::string output_format;         // example Q/A template
    std::string output_signal;         // final instruction
    std::string ground_truth_payload;  // labels rendered as text

    std::string digest() const;  // sha256 over all stages
};

struct CaptionRecord {
    std::string sample_id;
    CaptionType caption_type = CaptionType::Emotion;
    std::string text;
    int token_count = 0;
    std::string prompt_hash;
};

struct AnnotationClient {
    virtual ~AnnotationClient() = default;
    virtual std::string generate(const FaceSample& sample, const PromptBundle& prompt) = 0;
};

// Pure function of (labels, caption type, seed); produces the fixed sentence
// templates the toy model trains on. Emotion captions always contain the
// emotion class name; AU captions contain one sentence per AU.
class MockClient : public AnnotationClient {
public:
    explicit MockClient(std::uint64_t seed = 0) : seed_(seed) {}
    std::string generate(const FaceSample& sample, const PromptBundle& prompt) override;

private:
    std::uint64_t seed_;
};

// POSTs {prompt stages, payload} as JSON to the endpoint named by an
// environment variable; exercised only against stub servers.
class RemoteClient : public AnnotationClient {
public:
    explicit RemoteClient(const std::string& endpoint) : endpoint_(endpoint) {}
    std::string generate(const FaceSample& sample, const PromptBundle& prompt) override;

private:
    std::string endpoint_;
};

// ---- pipeline operations ----

// Keeps samples carrying both an AU annotation and an emotion label.
DatasetManifest filter_samples(const DatasetManifest& m);

// Seeded subsampling down to ceil(min_class * (1 + tolerance)); original
// sample order preserved.
DatasetManifest balance_classes(const DatasetManifest& m, double tolerance, std::uint64_t seed);

// Video-disjoint split; video count matches round(train_fraction * V) and
// image counts approach train_fraction via greedy largest-first assignment.
std::pair<DatasetManifest, DatasetManifest> split_by_video(const DatasetManifest& m,
                                                           double train_fraction,
                                                           std::uint64_t seed);

inline constexpr double kDefaultTrainFraction = 0.903;

PromptBundle build_prompt(const FaceSample& sample, CaptionType type);

struct AnnotationFailure {
    std::string sample_id;
    CaptionType caption_type;
};

struct AnnotateResult {
    std::vector<CaptionRecord> records;  // ordered by (sample_id, caption_type)
    std::vector<AnnotationFailure> failed;
};

struct AnnotateOptions {
    int key_au_budget = 169;
};

// One record per (sample, type); a caption failing validation is retried once
// and then reported as a failure entry rather than thrown.
AnnotateResult annotate_dataset(const DatasetManifest& m, AnnotationClient& client,
                                const std::vector<CaptionType>& types,
                                const AnnotateOptions& opts = {});

enum class CaptionViolation { EmptyCaption, LengthExceeded };

std::vector<CaptionViolation> validate_caption(const CaptionRecord& rec, int key_au_budget = 169);

// JSONL: {"sample_id", "caption_type", "text", "prompt_hash"}.
std::string serialize_captions(const std::vector<CaptionRecord>& records);
std::vector<CaptionRecord> load_captions(const std::string& path);
void save_captions(const std::string& path, const std::vector<CaptionRecord>& records);

// Splits an AU caption into its 12 per-AU sentences keyed by "AU<id>".
// Throws MissingCaption naming the first AU without a sentence.
std::vector<std::string> split_au_caption(const std::string& text);

}  // namespace mf2
