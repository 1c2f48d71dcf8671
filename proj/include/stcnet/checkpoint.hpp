#pragma once

#include <string>
#include <vector>

#include "stcnet/model.hpp"

namespace stcnet::ckpt {

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

// Container codec: magic "STCK", version, tensor table, trailing CRC32.
std::string encode_stck(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_stck(const std::string& bytes);

// Full model state: every parameter and buffer exactly once, plus the model
// configuration and the training epoch under reserved "meta/" names.
void save_checkpoint(const std::string& path, const model::StcNet<float>& net, int epoch);
model::StcNet<float> load_checkpoint(const std::string& path, int* epoch_out = nullptr);

}  // namespace stcnet::ckpt
