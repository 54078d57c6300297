#include "mf2/common.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mf2 {

const char* err_kind_name(ErrKind k) {
    switch (k) {
        case ErrKind::MalformedRecord: return "MalformedRecord";
        case ErrKind::DuplicateFrame: return "DuplicateFrame";
        case ErrKind::UnknownLabel: return "UnknownLabel";
        case ErrKind::InvalidArgument: return "InvalidArgument";
        case ErrKind::EmptyClass: return "EmptyClass";
        case ErrKind::InsufficientVideos: return "InsufficientVideos";
        case ErrKind::MissingLabel: return "MissingLabel";
        case ErrKind::UnknownCaptionType: return "UnknownCaptionType";
        case ErrKind::AnnotationFailed: return "AnnotationFailed";
        case ErrKind::ShapeMismatch: return "ShapeMismatch";
        case ErrKind::BadAUMap: return "BadAUMap";
        case ErrKind::EmptyText: return "EmptyText";
        case ErrKind::DimMismatch: return "DimMismatch";
        case ErrKind::UnknownMode: return "UnknownMode";
        case ErrKind::DegenerateBatch: return "DegenerateBatch";
        case ErrKind::LabelMismatch: return "LabelMismatch";
        case ErrKind::EmptyMask: return "EmptyMask";
        case ErrKind::BatchTooSmall: return "BatchTooSmall";
        case ErrKind::MissingCaption: return "MissingCaption";
        case ErrKind::UnlabeledSample: return "UnlabeledSample";
        case ErrKind::AlreadyAttached: return "AlreadyAttached";
        case ErrKind::ConfigMismatch: return "ConfigMismatch";
        case ErrKind::NotAttached: return "NotAttached";
        case ErrKind::NaNLoss: return "NaNLoss";
        case ErrKind::UnknownClassId: return "UnknownClassId";
        case ErrKind::NonBinary: return "NonBinary";
        case ErrKind::UnknownKey: return "UnknownKey";
        case ErrKind::ConfigType: return "ConfigType";
        case ErrKind::MissingFile: return "MissingFile";
        case ErrKind::Io: return "Io";
    }
    return "Unknown";
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

double Rng::normal(double mean, double stddev) {
    // Box-Muller on two fresh uniforms; u1 kept away from zero.
    double u1 = 0.0;
    do {
        u1 = uniform01();
    } while (u1 <= 0.0);
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) fail(ErrKind::InvalidArgument, "Rng::below(0)");
    // Rejection sampling to remove modulo bias.
    std::uint64_t limit = ~0ULL - (~0ULL % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
}

int Rng::int_range(int lo_inclusive, int hi_exclusive) {
    if (hi_exclusive <= lo_inclusive) fail(ErrKind::InvalidArgument, "Rng::int_range empty");
    return lo_inclusive + static_cast<int>(below(static_cast<std::uint64_t>(hi_exclusive - lo_inclusive)));
}

Rng Rng::fork(std::string_view purpose) const {
    std::uint64_t mixed = state_ ^ fnv1a64(purpose);
    std::uint64_t tmp = mixed;
    return Rng(splitmix64(tmp));
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

// Compact SHA-256 (FIPS 180-4).
struct Sha256 {
    std::uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                          0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
    std::array<unsigned char, 64> block{};
    std::size_t block_len = 0;
    std::uint64_t total_bits = 0;

    static std::uint32_t rotr(std::uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

    void process(const unsigned char* p) {
        static const std::uint32_t K[64] = {
            0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
            0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
            0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
            0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
            0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
            0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
            0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
            0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
            0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
            0xc67178f2};
        std::uint32_t w[64];
        for (int i = 0; i < 16; ++i) {
            w[i] = (std::uint32_t(p[i * 4]) << 24) | (std::uint32_t(p[i * 4 + 1]) << 16) |
                   (std::uint32_t(p[i * 4 + 2]) << 8) | std::uint32_t(p[i * 4 + 3]);
        }
        for (int i = 16; i < 64; ++i) {
            std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7];
        for (int i = 0; i < 64; ++i) {
            std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            std::uint32_t ch = (e & f) ^ (~e & g);
            std::uint32_t t1 = hh + s1 + ch + K[i] + w[i];
            std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            std::uint32_t t2 = s0 + maj;
            hh = g; g = f; f = e; e = d + t1; d = c; c = b; b = a; a = t1 + t2;
        }
        h[0] += a; h[1] += b; h[2] += c; h[3] += d;
        h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
    }

    void update(const unsigned char* data, std::size_t len) {
        total_bits += std::uint64_t(len) * 8;
        while (len > 0) {
            std::size_t take = std::min(len, block.size() - block_len);
            std::memcpy(block.data() + block_len, data, take);
            block_len += take;
            data += take;
            len -= take;
            if (block_len == block.size()) {
                process(block.data());
                block_len = 0;
            }
        }
    }

    std::string finish() {
        std::uint64_t bits = total_bits;
        unsigned char pad = 0x80;
        update(&pad, 1);
        unsigned char zero = 0;
        while (block_len != 56) update(&zero, 1);
        unsigned char len_be[8];
        for (int i = 0; i < 8; ++i) len_be[i] = static_cast<unsigned char>(bits >> (56 - 8 * i));
        update(len_be, 8);
        static const char* hexd = "0123456789abcdef";
        std::string out;
        out.reserve(64);
        for (std::uint32_t v : h) {
            for (int shift = 28; shift >= 0; shift -= 4) out.push_back(hexd[(v >> shift) & 0xf]);
        }
        return out;
    }
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    Sha256 s;
    s.update(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
    return s.finish();
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrKind::MissingFile, path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, std::string_view content) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrKind::Io, "cannot open for write: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) fail(ErrKind::Io, "short write: " + path);
}

}  // namespace mf2
