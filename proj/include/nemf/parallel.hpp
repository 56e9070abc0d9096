#pragma once

#include <cstddef>

namespace nemf {

// Upper bound on worker threads used by internal kernels. Every kernel
// assigns each output element to exactly one worker and reduces in a fixed
// order, so results do not depend on this setting.
void set_num_threads(int threads);
int num_threads();

}  // namespace nemf
