#include "mf2/data_model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace mf2 {

using nlohmann::json;

const std::array<std::string, kNumEmotions>& emotion_names() {
    static const std::array<std::string, kNumEmotions> names = {
        "Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other"};
    return names;
}

const std::array<int, kNumAus>& au_ids() {
    static const std::array<int, kNumAus> ids = {1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26};
    return ids;
}

int emotion_index(const std::string& name) {
    const auto& names = emotion_names();
    for (int i = 0; i < kNumEmotions; ++i)
        if (names[i] == name) return i;
    fail(ErrKind::UnknownLabel, "emotion '" + name + "'");
}

int au_index(int au_id) {
    const auto& ids = au_ids();
    for (int i = 0; i < kNumAus; ++i)
        if (ids[i] == au_id) return i;
    fail(ErrKind::UnknownLabel, "AU" + std::to_string(au_id));
}

void write_ppm(const std::string& path, const Image& img) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrKind::Io, "cannot write " + path);
    out << "P6\n" << img.size << " " << img.size << "\n255\n";
    for (double v : img.hw3) {
        double clamped = std::min(std::max(v, 0.0), 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
    }
    if (!out) fail(ErrKind::Io, "short write " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrKind::MissingFile, path);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    in >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255 || w != h || w <= 0)
        fail(ErrKind::MalformedRecord, "unsupported PPM: " + path);
    in.get();  // single whitespace after header
    Image img;
    img.size = w;
    img.hw3.resize(static_cast<std::size_t>(w) * h * 3);
    std::vector<char> buf(img.hw3.size());
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        fail(ErrKind::MalformedRecord, "truncated PPM: " + path);
    for (std::size_t i = 0; i < buf.size(); ++i)
        img.hw3[i] = static_cast<unsigned char>(buf[i]) / 255.0;
    return img;
}

std::map<std::string, int> DatasetManifest::class_counts() const {
    std::map<std::string, int> counts;
    for (const auto& name : emotion_names()) counts[name] = 0;
    for (const auto& s : samples)
        if (s.emotion) counts[emotion_names()[*s.emotion]] += 1;
    return counts;
}

std::map<int, int> DatasetManifest::au_counts() const {
    std::map<int, int> counts;
    for (int id : au_ids()) counts[id] = 0;
    for (const auto& s : samples) {
        if (!s.au_labels) continue;
        for (int i = 0; i < kNumAus; ++i)
            if ((*s.au_labels)[i]) counts[au_ids()[i]] += 1;
    }
    return counts;
}

std::vector<std::string> DatasetManifest::video_ids() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& s : samples)
        if (seen.insert(s.video_id).second) out.push_back(s.video_id);
    return out;
}

namespace {

FaceSample parse_record(const json& j, int line_no) {
    auto malformed = [line_no](const std::string& why) -> void {
        fail(ErrKind::MalformedRecord, "line " + std::to_string(line_no) + ": " + why);
    };
    if (!j.is_object()) malformed("not an object");

    FaceSample s;
    if (!j.contains("sample_id") || !j["sample_id"].is_string()) malformed("sample_id missing");
    if (!j.contains("video_id") || !j["video_id"].is_string()) malformed("video_id missing");
    if (!j.contains("frame_index") || !j["frame_index"].is_number_integer())
        malformed("frame_index missing");
    if (!j.contains("image_path") || !j["image_path"].is_string()) malformed("image_path missing");
    s.sample_id = j["sample_id"].get<std::string>();
    s.video_id = j["video_id"].get<std::string>();
    s.frame_index = j["frame_index"].get<int>();
    if (s.frame_index < 0) malformed("negative frame_index");
    s.image_path = j["image_path"].get<std::string>();

    if (!j.contains("landmarks") || !j["landmarks"].is_array() ||
        j["landmarks"].size() != kNumLandmarks)
        malformed("landmarks must be 68 points");
    for (const auto& pt : j["landmarks"]) {
        if (!pt.is_array() || pt.size() != 2 || !pt[0].is_number() || !pt[1].is_number())
            malformed("landmark point must be [x, y]");
        double x = pt[0].get<double>(), y = pt[1].get<double>();
        if (!std::isfinite(x) || !std::isfinite(y) || x < 0.0 || y < 0.0)
            malformed("landmark out of range");
        s.landmarks.push_back({x, y});
    }

    if (j.contains("au_labels")) {
        if (!j["au_labels"].is_array() || j["au_labels"].size() != kNumAus)
            malformed("au_labels must have 12 entries");
        std::array<int, kNumAus> au{};
        for (int i = 0; i < kNumAus; ++i) {
            if (!j["au_labels"][i].is_number_integer()) malformed("au_labels entry not integer");
            int v = j["au_labels"][i].get<int>();
            if (v != 0 && v != 1)
                fail(ErrKind::UnknownLabel,
                     "line " + std::to_string(line_no) + ": AU value " + std::to_string(v));
            au[i] = v;
        }
        s.au_labels = au;
    }
    if (j.contains("emotion")) {
        if (!j["emotion"].is_string()) malformed("emotion not a string");
        try {
            s.emotion = emotion_index(j["emotion"].get<std::string>());
        } catch (const Error&) {
            fail(ErrKind::UnknownLabel, "line " + std::to_string(line_no) + ": emotion '" +
                                            j["emotion"].get<std::string>() + "'");
        }
    }
    return s;
}

json record_to_json(const FaceSample& s) {
    json j;
    j["sample_id"] = s.sample_id;
    j["video_id"] = s.video_id;
    j["frame_index"] = s.frame_index;
    j["image_path"] = s.image_path;
    json lm = json::array();
    for (const auto& p : s.landmarks) lm.push_back({p[0], p[1]});
    j["landmarks"] = lm;
    if (s.au_labels) {
        json au = json::array();
        for (int v : *s.au_labels) au.push_back(v);
        j["au_labels"] = au;
    }
    if (s.emotion) j["emotion"] = emotion_names()[*s.emotion];
    return j;
}

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrKind::MissingFile, path);
    DatasetManifest m;
    std::set<std::pair<std::string, int>> keys;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            fail(ErrKind::MalformedRecord, "line " + std::to_string(line_no) + ": invalid JSON");
        FaceSample s = parse_record(j, line_no);
        if (!keys.insert({s.video_id, s.frame_index}).second)
            fail(ErrKind::DuplicateFrame,
                 s.video_id + "#" + std::to_string(s.frame_index));
        m.samples.push_back(std::move(s));
    }
    return m;
}

std::string serialize_manifest(const DatasetManifest& m) {
    std::ostringstream out;
    for (const auto& s : m.samples) out << record_to_json(s).dump() << "\n";
    return out.str();
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
    write_text_file(path, serialize_manifest(m));
}

std::vector<std::array<double, 2>> canonical_landmarks(int image_size) {
    // Unit-square layout, y grows downward; scaled by (image_size - 1) so all
    // coordinates stay inside [0, image_size).
    std::vector<std::array<double, 2>> pts;
    pts.reserve(kNumLandmarks);
    const double pi = 3.14159265358979323846;

    // 0-16 jaw: half ellipse from left temple over the chin to right temple.
    for (int i = 0; i <= 16; ++i) {
        double t = static_cast<double>(i) / 16.0;
        pts.push_back({0.5 - 0.4 * std::cos(pi * t), 0.55 + 0.38 * std::sin(pi * t)});
    }
    // 17-21 left brow, 22-26 right brow.
    for (int i = 0; i < 5; ++i)
        pts.push_back({0.18 + 0.06 * i, 0.30 - 0.02 * std::sin(pi * i / 4.0)});
    for (int i = 0; i < 5; ++i)
        pts.push_back({0.58 + 0.06 * i, 0.30 - 0.02 * std::sin(pi * i / 4.0)});
    // 27-30 nose bridge, 31-35 nostril line.
    for (int i = 0; i < 4; ++i) pts.push_back({0.5, 0.38 + 0.06 * i});
    for (int i = 0; i < 5; ++i) pts.push_back({0.40 + 0.05 * i, 0.62});
    // 36-41 left eye hexagon, 42-47 right eye hexagon.
    auto push_eye = [&](double cx) {
        pts.push_back({cx - 0.05, 0.40});
        pts.push_back({cx - 0.025, 0.375});
        pts.push_back({cx + 0.025, 0.375});
        pts.push_back({cx + 0.05, 0.40});
        pts.push_back({cx + 0.025, 0.425});
        pts.push_back({cx - 0.025, 0.425});
    };
    push_eye(0.30);
    push_eye(0.70);
    // 48-59 outer lip ellipse (rx 0.20, ry 0.05), clockwise from left corner.
    const double lip_y = 0.72;
    pts.push_back({0.30, lip_y});                       // 48
    for (int i = 1; i <= 5; ++i)                        // 49-53 upper arc
        pts.push_back({0.30 + 0.40 * i / 6.0, lip_y - 0.05 * std::sin(pi * i / 6.0)});
    pts.push_back({0.70, lip_y});                       // 54
    for (int i = 1; i <= 5; ++i)                        // 55-59 lower arc
        pts.push_back({0.70 - 0.40 * i / 6.0, lip_y + 0.05 * std::sin(pi * i / 6.0)});
    // 60-67 inner lip: 60/64 corners, 61-63 upper, 65-67 lower.
    pts.push_back({0.36, lip_y});                       // 60
    pts.push_back({0.44, lip_y - 0.02});                // 61
    pts.push_back({0.50, lip_y - 0.02});                // 62
    pts.push_back({0.56, lip_y - 0.02});                // 63
    pts.push_back({0.64, lip_y});                       // 64
    pts.push_back({0.56, lip_y + 0.02});                // 65
    pts.push_back({0.50, lip_y + 0.02});                // 66
    pts.push_back({0.44, lip_y + 0.02});                // 67

    const double scale = image_size - 1;
    for (auto& p : pts) {
        p[0] *= scale;
        p[1] *= scale;
    }
    return pts;
}

const std::map<int, std::vector<int>>& emotion_key_aus() {
    static const std::map<int, std::vector<int>> table = {
        {0, {}},                    // Neutral
        {1, {4, 7, 23, 24}},        // Anger
        {2, {4, 10, 15}},           // Disgust
        {3, {1, 2, 4, 7, 25, 26}},  // Fear
        {4, {6, 12}},               // Happiness
        {5, {1, 4, 15}},            // Sadness
        {6, {1, 2, 25, 26}},        // Surprise
        {7, {7, 10}},               // Other
    };
    return table;
}

namespace {

Image render_fixture_image(int image_size, int emotion, const std::array<int, kNumAus>& au,
                           const std::vector<std::array<double, 2>>& landmarks, Rng& rng) {
    Image img;
    img.size = image_size;
    img.hw3.resize(static_cast<std::size_t>(image_size) * image_size * 3);
    // Base noise, kept low so the label structure dominates.
    for (auto& v : img.hw3) v = 0.08 + 0.15 * rng.uniform01();
    // Emotion-dependent structure: a tilted grating plus a strong localized
    // patch whose position encodes the class, mirroring how expressions
    // concentrate in specific facial regions.
    const double pi = 3.14159265358979323846;
    double angle = pi * emotion / kNumEmotions;
    double freq = 2.0 + (emotion % 4);
    for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
            double u = (x * std::cos(angle) + y * std::sin(angle)) / image_size;
            double wave = 0.35 * (0.5 + 0.5 * std::sin(2.0 * pi * freq * u));
            for (int ch = 0; ch < 3; ++ch) {
                double gain = (ch == emotion % 3) ? 1.0 : 0.25;
                img.at(y, x, ch) += wave * gain;
            }
        }
    }
    {
        double badge_angle = 2.0 * pi * emotion / kNumEmotions;
        int bx = static_cast<int>((0.5 + 0.33 * std::cos(badge_angle)) * (image_size - 1));
        int by = static_cast<int>((0.5 + 0.33 * std::sin(badge_angle)) * (image_size - 1));
        int radius = std::max(2, image_size / 8);
        for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
                int x = bx + dx, y = by + dy;
                if (x < 0 || y < 0 || x >= image_size || y >= image_size) continue;
                if (dx * dx + dy * dy > radius * radius) continue;
                img.at(y, x, emotion % 3) += 0.55;
                img.at(y, x, (emotion + 1) % 3) -= 0.2;
            }
        }
    }
    // Bright disc at the landmark cluster of each active AU.
    const auto& ids = au_ids();
    for (int i = 0; i < kNumAus; ++i) {
        if (!au[i]) continue;
        // Reuse the brow/eye/mouth geometry: pick an anchor landmark per AU.
        static const std::map<int, int> anchor = {{1, 21}, {2, 17}, {4, 19},  {6, 36},
                                                  {7, 38}, {10, 50}, {12, 48}, {15, 54},
                                                  {23, 51}, {24, 62}, {25, 62}, {26, 8}};
        const auto& lm = landmarks[anchor.at(ids[i])];
        int cx = static_cast<int>(lm[0]);
        int cy = static_cast<int>(lm[1]);
        int radius = std::max(1, image_size / 12);
        for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
                int x = cx + dx, y = cy + dy;
                if (x < 0 || y < 0 || x >= image_size || y >= image_size) continue;
                if (dx * dx + dy * dy > radius * radius) continue;
                for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) += 0.4;
            }
        }
    }
    for (auto& v : img.hw3) v = std::clamp(v, 0.0, 0.999);
    return img;
}

}  // namespace

DatasetManifest make_fixture_dataset(int n_videos, int frames_per_video, std::uint64_t seed,
                                     const FixtureOptions& opts) {
    if (n_videos < 1 || frames_per_video < 1)
        fail(ErrKind::InvalidArgument, "fixture sizes must be >= 1");
    if (opts.image_size < 8) fail(ErrKind::InvalidArgument, "image_size too small");

    Rng rng(seed ^ 0x6d663266ULL);
    DatasetManifest m;
    const auto base_landmarks = canonical_landmarks(opts.image_size);
    int global = 0;
    for (int v = 0; v < n_videos; ++v) {
        for (int f = 0; f < frames_per_video; ++f, ++global) {
            FaceSample s;
            s.video_id = "vid" + std::to_string(v);
            s.frame_index = f;
            s.sample_id = s.video_id + "_f" + std::to_string(f);
            s.image_path = "images/" + s.sample_id + ".ppm";

            int emotion = global % kNumEmotions;
            std::array<int, kNumAus> au{};
            const auto& keys = emotion_key_aus().at(emotion);
            for (int i = 0; i < kNumAus; ++i) {
                bool is_key = std::find(keys.begin(), keys.end(), au_ids()[i]) != keys.end();
                double p = is_key ? 0.85 : 0.12;
                au[i] = rng.uniform01() < p ? 1 : 0;
            }

            s.landmarks = base_landmarks;
            double jitter = opts.image_size * 0.01;
            for (auto& p : s.landmarks) {
                p[0] = std::clamp(p[0] + rng.uniform(-jitter, jitter), 0.0, opts.image_size - 1.0);
                p[1] = std::clamp(p[1] + rng.uniform(-jitter, jitter), 0.0, opts.image_size - 1.0);
            }

            bool drop_au = rng.uniform01() < opts.missing_au_fraction;
            bool drop_emotion = rng.uniform01() < opts.missing_emotion_fraction;
            if (!drop_au) s.au_labels = au;
            if (!drop_emotion) s.emotion = emotion;

            if (opts.generate_pixels) {
                Rng img_rng = rng.fork("img:" + s.sample_id);
                s.pixels = render_fixture_image(opts.image_size, emotion, au, s.landmarks, img_rng);
            }
            m.samples.push_back(std::move(s));
        }
    }
    return m;
}

void materialize_fixture(DatasetManifest& m, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (auto& s : m.samples) {
        if (!s.pixels) fail(ErrKind::InvalidArgument, "sample lacks pixels: " + s.sample_id);
        write_ppm(dir + "/" + s.image_path, *s.pixels);
    }
    save_manifest(dir + "/manifest.jsonl", m);
}

void ensure_pixels(DatasetManifest& m, const std::string& base_dir) {
    for (auto& s : m.samples) {
        if (s.pixels) continue;
        s.pixels = read_ppm(base_dir.empty() ? s.image_path : base_dir + "/" + s.image_path);
    }
}

}  // namespace mf2
