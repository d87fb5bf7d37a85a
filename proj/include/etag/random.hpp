#pragma once

#include <cstdint>
#include <random>

namespace etag {

using Rng = std::mt19937_64;

/// What a random stream is used for. Each (seed, task, purpose) triple gets
/// its own independent engine so that adding draws in one phase never shifts
/// another phase's sequence.
enum class Purpose : std::uint32_t {
    Data = 1,
    TaskSplit,
    SolverInit,
    GeneratorInit,
    Shuffle,
    Replay,
    VaeNoise,
    Evaluation,
    Test,
};

inline Rng make_stream(std::uint64_t seed, std::uint64_t task, Purpose purpose) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(task), static_cast<std::uint32_t>(purpose)};
    return Rng(seq);
}

}  // namespace etag
