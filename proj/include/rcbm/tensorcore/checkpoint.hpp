#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rcbm/tensorcore/ops.hpp"
#include "rcbm/tensorcore/tape.hpp"

namespace rcbm {

// A region body must be a pure function of its inputs and the RNG stream it
// is handed: every tensor it touches comes through `inputs`, and all
// randomness is drawn from `rng`.
using RegionBody =
    std::function<std::vector<Tensor>(Tape& tape, std::span<const Tensor> inputs,
                                      ops::RngStream& rng)>;

// Runs `body` on a private tape and keeps only its outputs on `tape`. The
// intermediates are freed immediately; backward() re-runs the body with the
// same seed, checks the recomputed outputs are bit-identical (TapeError
// otherwise), then differentiates through the replay.
std::vector<Tensor> checkpoint_region(Tape& tape, std::vector<Tensor> inputs,
                                      std::uint64_t rng_seed, const RegionBody& body);

}  // namespace rcbm
