#pragma once

#include <string>
#include <vector>

#include "etta/nets.hpp"

namespace etta::ckpt {

// Checkpoint file: magic "ETTM", format version u16, count u32, then per
// entry (name length u16, name bytes, rank u32, dims u32..., f32 payload),
// all little-endian. Stores parameters and BatchNorm running statistics;
// round-trips are bitwise exact.

void save(const std::string& path, const std::vector<StateEntry>& entries);

// Strict by-name load into an existing model's state: every model entry must
// appear in the file with a matching shape, and the file may not contain
// entries the model does not know. Errors name the offending entry.
void load(const std::string& path, const std::vector<StateEntry>& entries);

}  // namespace etta::ckpt
