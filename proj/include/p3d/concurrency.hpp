#pragma once

namespace p3d {

// Worker count for parallel kernels. Resolved once from the P3D_THREADS
// environment variable, falling back to the hardware thread count.
int thread_count();

}  // namespace p3d
