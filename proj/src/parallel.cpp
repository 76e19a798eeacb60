#include "qsvd/parallel.hpp"

namespace qsvd {

namespace {
std::atomic<unsigned> g_thread_limit{1};
}

void set_thread_limit(unsigned n) { g_thread_limit.store(n == 0 ? 1 : n); }

unsigned thread_limit() { return g_thread_limit.load(); }

}  // namespace qsvd
