#include "s2rd/common.hpp"
#include "s2rd/tensor.hpp"

namespace s2rd {

namespace {
bool g_debug_validation = false;
thread_local bool g_grad_enabled = true;
}  // namespace

bool debug_validation_enabled() { return g_debug_validation; }
void set_debug_validation(bool on) { g_debug_validation = on; }

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

}  // namespace s2rd
