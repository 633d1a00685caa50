#pragma once

namespace angie {

// Keeps large tensor buffers on the heap instead of fresh mmap/munmap pairs
// and stops glibc from trimming after every step. Training loops allocate
// and free many multi-megabyte buffers, which otherwise spend most of their
// time in page faults.
void TuneAllocator();

}  // namespace angie
