#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "qp/autodiff.hpp"
#include "qp/tensor.hpp"

namespace qp {

// Versioned binary container mapping path strings to tensors, with a JSON
// metadata block. Entries are written sorted by path so identical contents
// produce identical bytes. Exact layout is documented in docs/formats.md.
struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, Tensor> entries;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Copies parameter values into / out of a checkpoint under "param/<path>".
// Restore is strict: a missing entry or shape mismatch is a DataError.
void put_params(Checkpoint& ckpt, const std::vector<NamedParam>& params);
void restore_params(const Checkpoint& ckpt, const std::vector<NamedParam>& params);

}  // namespace qp
