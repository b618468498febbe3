#pragma once

namespace clmr {

/// Keeps large tensor buffers on the heap instead of fresh mmap pages and
/// stops the allocator from returning memory between iterations. Training
/// allocates and frees the same few hundred buffers every step; without this
/// each step pays for page faults and zeroing. No-op outside glibc.
void tune_allocator();

}  // namespace clmr
