#pragma once

#include <cstdint>
#include <ostream>

namespace crossmodal::tools {

// Runs a fast subset of the library's invariants and prints one line per
// check. Returns the number of failed checks.
int run_doctor(std::uint64_t seed, std::ostream& out);

}  // namespace crossmodal::tools
