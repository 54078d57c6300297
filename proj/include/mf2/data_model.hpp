#pragma once

// Core domain types and dataset manifest IO. Manifests are JSON Lines with
// sorted keys so fixtures stay diffable; image pixels live in separate PPM
// files referenced by relative path.

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mf2/common.hpp"

namespace mf2 {

inline constexpr int kNumEmotions = 8;
inline constexpr int kNumAus = 12;
inline constexpr int kNumLandmarks = 68;

// Ordered class names (column order of the emotion report).
const std::array<std::string, kNumEmotions>& emotion_names();
// Ordered AU identifiers (column order of the AU report): 1,2,4,6,7,10,12,15,23,24,25,26.
const std::array<int, kNumAus>& au_ids();

int emotion_index(const std::string& name);  // throws UnknownLabel
int au_index(int au_id);                     // throws UnknownLabel

struct Image {
    int size = 0;                // square, H == W
    std::vector<double> hw3;     // row-major [H][W][3], values in [0,1]

    double at(int y, int x, int ch) const {
        return hw3[(static_cast<std::size_t>(y) * size + x) * 3 + ch];
    }
    double& at(int y, int x, int ch) {
        return hw3[(static_cast<std::size_t>(y) * size + x) * 3 + ch];
    }
};

// Binary PPM (P6), 8-bit; values quantized on write and mapped back to [0,1].
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

struct FaceSample {
    std::string sample_id;
    std::string video_id;
    int frame_index = 0;
    std::string image_path;
    std::vector<std::array<double, 2>> landmarks;        // 68 (x, y) pixel coords
    std::optional<std::array<int, kNumAus>> au_labels;   // 0/1 per AU, absent = unannotated
    std::optional<int> emotion;                          // index into emotion_names()

    std::optional<Image> pixels;  // in-memory only, never serialized

    bool fully_labeled() const { return au_labels.has_value() && emotion.has_value(); }
};

struct DatasetManifest {
    enum class Split { Unsplit, Train, Val };

    std::vector<FaceSample> samples;
    Split split = Split::Unsplit;

    std::map<std::string, int> class_counts() const;  // emotion name -> count
    std::map<int, int> au_counts() const;             // AU id -> active count
    std::vector<std::string> video_ids() const;       // distinct, in first-seen order
};

// JSONL schema per line:
// {"sample_id", "video_id", "frame_index", "image_path", "landmarks", "au_labels", "emotion"}
// with au_labels / emotion optional. Keys serialized sorted.
DatasetManifest load_manifest(const std::string& path);
std::string serialize_manifest(const DatasetManifest& m);
void save_manifest(const std::string& path, const DatasetManifest& m);

// Canonical 68-point face layout scaled to [0, image_size). Index convention:
// 0-16 jaw, 17-26 brows, 27-35 nose, 36-47 eyes, 48-59 outer lip, 60-67 inner lip.
std::vector<std::array<double, 2>> canonical_landmarks(int image_size);

// AUs most associated with each emotion; drives fixture label structure and
// the key-AU captions.
const std::map<int, std::vector<int>>& emotion_key_aus();  // emotion idx -> AU ids

struct FixtureOptions {
    int image_size = 32;
    bool generate_pixels = true;       // fill FaceSample::pixels
    double missing_au_fraction = 0.0;  // fraction of samples with no AU annotation
    double missing_emotion_fraction = 0.0;
};

// Deterministic synthetic dataset: procedural noise plus label-dependent
// structure (emotion-tinted gradient, bright patches at active-AU landmarks).
DatasetManifest make_fixture_dataset(int n_videos, int frames_per_video, std::uint64_t seed,
                                     const FixtureOptions& opts = {});

// Writes manifest.jsonl plus images/<sample_id>.ppm under dir; updates image
// paths to be dir-relative. Requires pixels to be present.
void materialize_fixture(DatasetManifest& m, const std::string& dir);

// Loads pixel data for every sample lacking it, resolving image_path against
// base_dir.
void ensure_pixels(DatasetManifest& m, const std::string& base_dir);

}  // namespace mf2
