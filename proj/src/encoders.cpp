#include "mf2/encoders.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace mf2 {

using ag::Var;

const AULandmarkMap& default_au_landmark_map() {
    // Brows drive AU1/2/4, eye region AU6/7, upper lip AU10, mouth corners
    // AU12/15, lips AU23/24/25, jaw AU26. Offsets are in patch units.
    static const AULandmarkMap m = {
        {1, {{21, 22}, 0, 0}},          {2, {{17, 26}, 0, 0}},
        {4, {{19, 24}, 0, 0}},          {6, {{36, 45}, 0, 1}},
        {7, {{38, 44}, 0, 0}},          {10, {{50, 52}, 0, 0}},
        {12, {{48, 54}, 0, 0}},         {15, {{48, 54}, 0, 1}},
        {23, {{51, 57}, 0, 0}},         {24, {{62, 66}, 0, 0}},
        {25, {{61, 63, 65, 67}, 0, 0}}, {26, {{7, 8, 9}, 0, 0}},
    };
    return m;
}

AULandmarkMap load_au_landmark_map(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(read_text_file(path));
    AULandmarkMap m;
    for (auto it = j.begin(); it != j.end(); ++it) {
        AuRegionSpec spec;
        for (const auto& v : it.value().at("landmarks")) spec.landmark_indices.push_back(v.get<int>());
        if (it.value().contains("offset")) {
            spec.offset_x = it.value()["offset"][0].get<int>();
            spec.offset_y = it.value()["offset"][1].get<int>();
        }
        for (int idx : spec.landmark_indices)
            if (idx < 0 || idx >= kNumLandmarks)
                fail(ErrKind::BadAUMap, "landmark index " + std::to_string(idx));
        m[std::stoi(it.key())] = std::move(spec);
    }
    return m;
}

std::vector<std::array<int, 2>> au_region_centers(
    const std::vector<std::array<double, 2>>& landmarks, const AULandmarkMap& au_map,
    int patch_size, int grid_h, int grid_w) {
    std::vector<std::array<int, 2>> centers;
    centers.reserve(kNumAus);
    for (int id : au_ids()) {
        auto it = au_map.find(id);
        if (it == au_map.end()) fail(ErrKind::BadAUMap, "AU" + std::to_string(id) + " unmapped");
        const auto& spec = it->second;
        if (spec.landmark_indices.empty())
            fail(ErrKind::BadAUMap, "AU" + std::to_string(id) + " has no landmarks");
        double mx = 0.0, my = 0.0;
        for (int idx : spec.landmark_indices) {
            if (idx < 0 || idx >= static_cast<int>(landmarks.size()))
                fail(ErrKind::BadAUMap, "landmark index " + std::to_string(idx));
            mx += landmarks[idx][0];
            my += landmarks[idx][1];
        }
        mx /= spec.landmark_indices.size();
        my /= spec.landmark_indices.size();
        int col = static_cast<int>(std::floor(mx / patch_size)) + spec.offset_x;
        int row = static_cast<int>(std::floor(my / patch_size)) + spec.offset_y;
        centers.push_back({std::clamp(row, 0, grid_h - 1), std::clamp(col, 0, grid_w - 1)});
    }
    return centers;
}

AURegionSet extract_au_regions(const VisualFeatureMap& fm,
                               const std::vector<std::array<double, 2>>& landmarks,
                               const AULandmarkMap& au_map, int k) {
    const int gh = fm.grid_h, gw = fm.grid_w;
    if (k < 1 || k > gh || k > gw)
        fail(ErrKind::InvalidArgument, "region k=" + std::to_string(k) + " vs grid " +
                                           std::to_string(gh) + "x" + std::to_string(gw));
    AURegionSet out;
    out.centers = au_region_centers(landmarks, au_map, fm.patch_size, gh, gw);
    out.regions.reserve(kNumAus);
    for (const auto& center : out.centers) {
        int r0 = std::clamp(center[0] - k / 2, 0, gh - k);
        int c0 = std::clamp(center[1] - k / 2, 0, gw - k);
        std::vector<int> rows;
        rows.reserve(static_cast<std::size_t>(k) * k);
        for (int dr = 0; dr < k; ++dr)
            for (int dc = 0; dc < k; ++dc)
                rows.push_back(1 + (r0 + dr) * gw + (c0 + dc));  // +1 skips CLS
        out.regions.push_back(ag::gather_rows(fm.tokens, rows));
    }
    return out;
}

// ---------------------------------------------------------------------------

VisualEncoder::VisualEncoder(ag::ParamStore& store, const EncoderConfig& cfg, Rng& rng)
    : cfg_(cfg) {
    if (cfg.image_size % cfg.patch_size != 0)
        fail(ErrKind::InvalidArgument, "image_size must be a multiple of patch_size");
    grid_ = cfg.image_size / cfg.patch_size;
    const int P = grid_ * grid_;
    const int patch_in = cfg.patch_size * cfg.patch_size * 3;

    patch_w_ = store.add("vis.patch.w", patch_in, cfg.embed_dim, nn::init_normal, rng);
    patch_b_ = store.add_zeros("vis.patch.b", 1, cfg.embed_dim);
    cls_ = store.add("vis.cls", 1, cfg.embed_dim, nn::init_normal, rng);
    pos_ = store.add("vis.pos", P + 1, cfg.embed_dim, nn::init_normal, rng);
    for (int i = 0; i < cfg.vit_depth; ++i)
        blocks_.emplace_back(store, "vis.block" + std::to_string(i), cfg.embed_dim, cfg.n_heads,
                             cfg.ffn_dim, rng);
    final_ln_ = nn::LayerNorm(store, "vis.final_ln", cfg.embed_dim);

    patch_gather_.reserve(static_cast<std::size_t>(P) * patch_in / 3);
    for (int p = 0; p < P; ++p) {
        int pr = p / grid_, pc = p % grid_;
        for (int dy = 0; dy < cfg.patch_size; ++dy)
            for (int dx = 0; dx < cfg.patch_size; ++dx)
                patch_gather_.push_back((pr * cfg.patch_size + dy) * cfg.image_size +
                                        pc * cfg.patch_size + dx);
    }
}

Var VisualEncoder::image_to_var(const Image& img, bool requires_grad) {
    return Var::leaf(img.size * img.size, 3, img.hw3, requires_grad);
}

VisualFeatureMap VisualEncoder::encode(const Var& image) const {
    const int expect_rows = cfg_.image_size * cfg_.image_size;
    if (image.rows() != expect_rows || image.cols() != 3)
        fail(ErrKind::ShapeMismatch, "image must be [" + std::to_string(cfg_.image_size) + "x" +
                                         std::to_string(cfg_.image_size) + ", 3]");
    if (!ag::all_finite(image)) fail(ErrKind::ShapeMismatch, "image has non-finite values");

    const int P = grid_ * grid_;
    Var pixels = ag::gather_rows(image, patch_gather_);                  // [P*ps*ps, 3]
    Var patches = ag::reshape(pixels, P, cfg_.patch_size * cfg_.patch_size * 3);
    Var emb = ag::add_rowvec(ag::matmul(patches, patch_w_), patch_b_);   // [P, D]
    Var x = ag::concat_rows({cls_, emb});
    x = ag::add(x, pos_);
    for (const auto& b : blocks_) x = b.forward(x, nullptr);
    x = final_ln_(x);

    VisualFeatureMap fm;
    fm.tokens = x;
    fm.grid_h = grid_;
    fm.grid_w = grid_;
    fm.patch_size = cfg_.patch_size;
    return fm;
}

VisualFeatureMap VisualEncoder::encode(const Image& img) const {
    if (img.size != cfg_.image_size)
        fail(ErrKind::ShapeMismatch, "image size " + std::to_string(img.size) + " != configured " +
                                         std::to_string(cfg_.image_size));
    return encode(image_to_var(img));
}

// ---------------------------------------------------------------------------

TextEncoder::TextEncoder(ag::ParamStore& store, const EncoderConfig& cfg,
                         std::shared_ptr<Tokenizer> tok, Rng& rng, int vocab_size_override)
    : cfg_(cfg), tok_(std::move(tok)) {
    vocab_size_ = vocab_size_override > 0 ? vocab_size_override
                                          : (tok_ ? tok_->vocab_size() : 0);
    if (vocab_size_ <= 0) fail(ErrKind::InvalidArgument, "text encoder needs a vocabulary size");
    tok_emb_ = store.add("txt.emb", vocab_size_, cfg.embed_dim, nn::init_normal, rng);
    pos_ = store.add("txt.pos", cfg.max_text_len, cfg.embed_dim, nn::init_normal, rng);
    for (int i = 0; i < cfg.text_depth; ++i)
        blocks_.emplace_back(store, "txt.block" + std::to_string(i), cfg.embed_dim, cfg.n_heads,
                             cfg.ffn_dim, rng);
    final_ln_ = nn::LayerNorm(store, "txt.final_ln", cfg.embed_dim);
}

TextEncoder::Tokenized TextEncoder::tokenize(const std::string& text, CaptionType type) const {
    ++calls_;
    if (!tok_) fail(ErrKind::InvalidArgument, "text encoder built without a tokenizer");
    if (text.empty()) fail(ErrKind::EmptyText, "cannot encode empty text");
    Tokenized t;
    t.ids.push_back(Tokenizer::kClsId);
    for (int id : tok_->encode(text)) t.ids.push_back(id);
    const int budget = std::min(caption_max_tokens(type, cfg_.key_au_budget), cfg_.max_text_len);
    if (static_cast<int>(t.ids.size()) > budget) {
        t.ids.resize(budget);
        t.truncated = true;
    }
    return t;
}

TextEmbedding TextEncoder::encode_ids(const std::vector<int>& ids, int real_len) const {
    ++calls_;
    if (ids.empty()) fail(ErrKind::EmptyText, "empty id sequence");
    const int L = static_cast<int>(ids.size());
    if (real_len <= 0 || real_len > L) real_len = L;
    if (L > cfg_.max_text_len) fail(ErrKind::DimMismatch, "sequence longer than position table");

    TextEmbedding emb;
    emb.ids = ids;
    emb.attention_mask.assign(L, 1.0);
    for (int i = real_len; i < L; ++i) emb.attention_mask[i] = 0.0;

    for (int id : ids)
        if (id < 0 || id >= vocab_size_) fail(ErrKind::DimMismatch, "token id out of range");

    Var x = ag::gather_rows(tok_emb_, ids);
    std::vector<int> pos_idx(L);
    for (int i = 0; i < L; ++i) pos_idx[i] = i;
    x = ag::add(x, ag::gather_rows(pos_, pos_idx));

    // Pad columns are hidden from every query; pad rows get zeroed afterwards
    // so a pad position's id can never leak into any output.
    const bool has_pad = real_len < L;
    std::vector<double> mask;
    if (has_pad) {
        mask.assign(static_cast<std::size_t>(L) * L, 0.0);
        for (int r = 0; r < L; ++r)
            for (int c = 0; c < L; ++c)
                if (emb.attention_mask[c] == 0.0) mask[static_cast<std::size_t>(r) * L + c] = nn::kMaskOff;
    }
    for (const auto& b : blocks_) x = b.forward(x, has_pad ? &mask : nullptr);
    x = final_ln_(x);
    if (has_pad) {
        std::vector<double> row_mask(static_cast<std::size_t>(L) * cfg_.embed_dim, 1.0);
        for (int r = 0; r < L; ++r)
            if (emb.attention_mask[r] == 0.0)
                for (int c = 0; c < cfg_.embed_dim; ++c)
                    row_mask[static_cast<std::size_t>(r) * cfg_.embed_dim + c] = 0.0;
        x = ag::mul_mask(x, row_mask);
    }
    emb.tokens = x;
    return emb;
}

TextEmbedding TextEncoder::encode(const std::string& text, CaptionType type) const {
    Tokenized t = tokenize(text, type);
    TextEmbedding emb = encode_ids(t.ids);
    emb.truncated = t.truncated;
    return emb;
}

}  // namespace mf2
