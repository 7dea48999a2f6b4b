#pragma once

#include <string>

#include "soupforge/attack.hpp"

namespace soupforge {

// AdvBatch archive: magic "AESADV1", session spec as canonical text, raw
// little-endian float images. Round-trips are bit-exact.
void write_advbatch(const std::string& path, const AdvBatch& batch);
AdvBatch read_advbatch(const std::string& path);

}  // namespace soupforge
