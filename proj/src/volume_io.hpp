#pragma once

#include <string>

#include "volume.hpp"

namespace vce {

// .ctvol container: magic "CTVL", little-endian u32 header length, UTF-8
// JSON header {"shape":[D,H,W],"spacing_mm":[z,y,x],"dtype":"f32"|"u8",
// "phase":...,"kind":"hu"|"label"}, then raw voxels little-endian C-order
// (D slowest). Round-trips are bitwise.

void write_ctvol(const std::string& path, const Volume& vol);
void write_ctvol(const std::string& path, const LabelVolume& labels);

Volume read_volume(const std::string& path);
LabelVolume read_labels(const std::string& path);

// "hu" or "label", without reading the payload.
std::string peek_kind(const std::string& path);

}  // namespace vce
