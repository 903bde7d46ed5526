#pragma once

#include <string_view>

namespace mulm::prompts {

// Compiled in from prompts/*.txt at build time; the files are the source of
// truth and are kept byte-for-byte.
std::string_view continuation();
std::string_view mode_explicit();
std::string_view mode_natural();
std::string_view mode_humor();

}  // namespace mulm::prompts
