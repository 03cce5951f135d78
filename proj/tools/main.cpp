#include <malloc.h>

#include "commands.hpp"

int main(int argc, char** argv) {
  // Training frees and reallocates the same large buffers every step; keep
  // them in the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return jointdyn::cli::run(argc, argv);
}
