#ifndef KELAB_CHECKPOINT_HPP_
#define KELAB_CHECKPOINT_HPP_

#include <cstdint>
#include <string>

#include "kelab/model.hpp"

namespace kelab {

// Checkpoint layout, little-endian throughout:
//   bytes 0..5   magic "KELAB1"
//   u32          format version (currently 1)
//   u64          header length in bytes
//   header       UTF-8 JSON {"config": {...}, "tokens": [...]}
//   tensors      raw row-major f64 values, in order:
//                  emb, pos,
//                  per layer: wq, wk, wv, wo, ln1_g, ln1_b,
//                             w_fc, w_proj, ln2_g, ln2_b,
//                  decode
//   u32          CRC-32 (IEEE 802.3 polynomial) of everything after the magic
// Shapes come from the config, so tensors carry no individual headers.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

std::uint32_t crc32(const unsigned char* data, std::size_t len,
                    std::uint32_t seed = 0);

}  // namespace kelab

#endif  // KELAB_CHECKPOINT_HPP_
