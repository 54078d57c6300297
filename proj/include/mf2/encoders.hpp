#pragma once

// Toy-scale visual and text encoders behind pluggable-config interfaces, plus
// landmark-driven AU region extraction from the visual feature grid.

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mf2/data_model.hpp"
#include "mf2/nn.hpp"
#include "mf2/tokenizer.hpp"

namespace mf2 {

struct EncoderConfig {
    int image_size = 224;
    int patch_size = 16;
    int embed_dim = 64;
    int n_heads = 4;
    int ffn_dim = 128;
    int vit_depth = 2;
    int text_depth = 2;
    int region_k = 3;
    int max_text_len = 169;  // position table length; budgets cap below this
    int key_au_budget = 169;
    std::string au_map_path;  // empty = built-in default mapping
};

struct VisualFeatureMap {
    ag::Var tokens;  // [P+1, D], CLS at row 0
    int grid_h = 0;
    int grid_w = 0;
    int patch_size = 0;
};

struct TextEmbedding {
    ag::Var tokens;                     // [L, D], CLS at row 0
    std::vector<double> attention_mask; // 1 real, 0 pad
    std::vector<int> ids;
    bool truncated = false;

    int length() const { return tokens.rows(); }
};

// AU id -> defining landmarks and a patch-unit offset for the region center.
struct AuRegionSpec {
    std::vector<int> landmark_indices;
    int offset_x = 0;
    int offset_y = 0;
};
using AULandmarkMap = std::map<int, AuRegionSpec>;

const AULandmarkMap& default_au_landmark_map();
AULandmarkMap load_au_landmark_map(const std::string& path);

struct AURegionSet {
    std::vector<ag::Var> regions;              // kNumAus entries of [k*k, D]
    std::vector<std::array<int, 2>> centers;   // (row, col) on the patch grid
};

// Patch-grid centers per AU: floor(mean(landmarks)/patch) + offset, clamped.
std::vector<std::array<int, 2>> au_region_centers(
    const std::vector<std::array<double, 2>>& landmarks, const AULandmarkMap& au_map,
    int patch_size, int grid_h, int grid_w);

// Copies a clamped k x k token window around each AU center. Throws BadAUMap
// if any of the 12 AUs is unmapped.
AURegionSet extract_au_regions(const VisualFeatureMap& fm,
                               const std::vector<std::array<double, 2>>& landmarks,
                               const AULandmarkMap& au_map, int k);

class VisualEncoder {
public:
    VisualEncoder(ag::ParamStore& store, const EncoderConfig& cfg, Rng& rng);

    // image var is [H*W, 3]; use image_to_var for plain images.
    VisualFeatureMap encode(const ag::Var& image) const;
    VisualFeatureMap encode(const Image& img) const;

    static ag::Var image_to_var(const Image& img, bool requires_grad = false);

    int num_patches() const { return grid_ * grid_; }
    int grid() const { return grid_; }

private:
    EncoderConfig cfg_;
    int grid_ = 0;
    ag::Var patch_w_, patch_b_, cls_, pos_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LayerNorm final_ln_;
    std::vector<int> patch_gather_;  // pixel-row indices per patch, precomputed
};

class TextEncoder {
public:
    // vocab_size_override > 0 sizes the embedding table without a tokenizer
    // (parameter-count planning); text APIs then require a tokenizer.
    TextEncoder(ag::ParamStore& store, const EncoderConfig& cfg, std::shared_ptr<Tokenizer> tok,
                Rng& rng, int vocab_size_override = 0);

    struct Tokenized {
        std::vector<int> ids;  // CLS + text ids, truncated to the type budget
        bool truncated = false;
    };

    Tokenized tokenize(const std::string& text, CaptionType type) const;

    // Positions >= real_len (0 = all real) are padding: hidden from every
    // attention query and zeroed in the output, whatever ids they carry.
    TextEmbedding encode_ids(const std::vector<int>& ids, int real_len = 0) const;
    TextEmbedding encode(const std::string& text, CaptionType type) const;

    const Tokenizer& tokenizer() const { return *tok_; }
    ag::Var token_table() const { return tok_emb_; }

    // Counts every encode/tokenize; evaluation paths must leave it at zero.
    std::uint64_t call_count() const { return calls_; }
    void reset_call_count() { calls_ = 0; }

private:
    EncoderConfig cfg_;
    std::shared_ptr<Tokenizer> tok_;
    int vocab_size_ = 0;
    ag::Var tok_emb_, pos_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LayerNorm final_ln_;
    mutable std::uint64_t calls_ = 0;
};

}  // namespace mf2
