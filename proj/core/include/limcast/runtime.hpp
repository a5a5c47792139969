#pragma once

namespace limcast {

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Training allocates many short-lived megabyte-sized matrices, and glibc's
/// defaults turn each one into fresh page faults. No-op off glibc.
void configure_allocator() noexcept;

}  // namespace limcast
