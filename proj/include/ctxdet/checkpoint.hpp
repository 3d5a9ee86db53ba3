#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ctxdet/tensor.hpp"

namespace ctxdet {

/// Versioned little-endian binary container of named tensors. Values round
/// trip bit-exactly.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& named);

/// Loads into an existing parameter set; every stored tensor must match an
/// entry by name and shape, and vice versa.
void load_checkpoint(const std::string& path,
                     std::vector<std::pair<std::string, Tensor>>& named);

}  // namespace ctxdet
