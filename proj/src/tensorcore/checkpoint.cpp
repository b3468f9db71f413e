#include "rcbm/tensorcore/checkpoint.hpp"

#include <algorithm>
#include <cstring>

#include "rcbm/tensorcore/error.hpp"

namespace rcbm {

std::vector<Tensor> checkpoint_region(Tape& tape, std::vector<Tensor> inputs,
                                      std::uint64_t rng_seed, const RegionBody& body) {
  const bool record = tape.should_record(inputs);

  std::vector<Tensor> kept;
  {
    Tape inner;
    inner.set_recording(false);
    ops::RngStream rng(rng_seed);
    const std::vector<Tensor> produced = body(inner, inputs, rng);
    kept.reserve(produced.size());
    for (const Tensor& t : produced) {
      Tensor copy = Tensor::intermediate(t.shape(), record);
      std::copy(t.values().begin(), t.values().end(), copy.mutable_values().begin());
      kept.push_back(std::move(copy));
    }
  }
  if (!record) return kept;

  const std::size_t input_count = inputs.size();
  const std::size_t node = tape.record(
      OpKind::kCheckpoint, std::move(inputs), kept,
      [body, rng_seed](std::span<const Tensor> in, std::span<const Tensor> outs) {
        Tape replay_tape;
        ops::RngStream rng(rng_seed);
        std::vector<Tensor> replay = body(replay_tape, in, rng);
        if (replay.size() != outs.size()) {
          throw TapeError("checkpoint replay produced a different number of outputs");
        }
        for (std::size_t i = 0; i < outs.size(); ++i) {
          const auto a = replay[i].values();
          const auto b = outs[i].values();
          if (a.size() != b.size() ||
              std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) {
            throw TapeError("checkpoint replay mismatch: region output " + std::to_string(i) +
                            " differs from the original forward pass");
          }
        }
        for (std::size_t i = 0; i < outs.size(); ++i) {
          if (outs[i].has_grad() && replay[i].requires_grad()) {
            replay[i].accumulate_grad(outs[i].grad());
          }
        }
        replay.clear();
        replay_tape.backward_from_seeded();
      });
  tape.add_checkpoint(node, input_count, rng_seed);
  return kept;
}

}  // namespace rcbm
