#pragma once

namespace tdm {

/// Keeps large freed buffers in the heap instead of returning them to the OS.
/// Episode graphs allocate and free the same multi-megabyte tensors every
/// step; without this each allocation pays fresh page faults. No-op off glibc.
void configure_allocator();

}  // namespace tdm
