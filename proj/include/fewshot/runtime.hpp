#pragma once

namespace fewshot {

// Keeps large tensor buffers on the heap instead of fresh mappings per allocation.
// Call once at program start; a no-op where the allocator offers no such knobs.
void tune_allocator();

} // namespace fewshot
