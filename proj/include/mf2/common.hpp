#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mf2 {

// Domain error kinds. Every throwing operation names the kind it raises so
// callers (and tests) can branch on it instead of parsing messages.
enum class ErrKind {
    MalformedRecord,
    DuplicateFrame,
    UnknownLabel,
    InvalidArgument,
    EmptyClass,
    InsufficientVideos,
    MissingLabel,
    UnknownCaptionType,
    AnnotationFailed,
    ShapeMismatch,
    BadAUMap,
    EmptyText,
    DimMismatch,
    UnknownMode,
    DegenerateBatch,
    LabelMismatch,
    EmptyMask,
    BatchTooSmall,
    MissingCaption,
    UnlabeledSample,
    AlreadyAttached,
    ConfigMismatch,
    NotAttached,
    NaNLoss,
    UnknownClassId,
    NonBinary,
    UnknownKey,
    ConfigType,
    MissingFile,
    Io,
};

const char* err_kind_name(ErrKind k);

class Error : public std::runtime_error {
public:
    Error(ErrKind kind, const std::string& what)
        : std::runtime_error(std::string(err_kind_name(kind)) + ": " + what), kind_(kind) {}

    ErrKind kind() const { return kind_; }

private:
    ErrKind kind_;
};

[[noreturn]] inline void fail(ErrKind kind, const std::string& what) { throw Error(kind, what); }

// Deterministic RNG. Wraps a SplitMix64-seeded xoshiro-style generator with
// hand-rolled distributions so streams are stable across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    std::uint64_t next_u64();
    // Uniform in [0, 1) with 53 bits of randomness.
    double uniform01();
    double uniform(double lo, double hi);
    // Box-Muller, no spare caching (keeps the stream position predictable).
    double normal(double mean, double stddev);
    // Uniform integer in [0, n), n > 0.
    std::uint64_t below(std::uint64_t n);
    int int_range(int lo_inclusive, int hi_exclusive);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    // Derives an independent deterministic stream for a named purpose.
    Rng fork(std::string_view purpose) const;

private:
    std::uint64_t state_;
};

// Stable 64-bit string hash (FNV-1a), used for seed derivation.
std::uint64_t fnv1a64(std::string_view s);

// SHA-256 of a byte string, hex-encoded. Used for content addressing of
// configs, prompts, checkpoints, and parameter checksums.
std::string sha256_hex(std::string_view bytes);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);

}  // namespace mf2
