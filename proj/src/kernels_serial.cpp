#include <cmath>

#include "hemotrack/kernels.hpp"

#define HEMO_OMP_FOR

namespace hemo::kern::serial {
#include "kernels_body.inc"
}  // namespace hemo::kern::serial
