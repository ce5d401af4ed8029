#include <cmath>

#include "hemotrack/kernels.hpp"

#define HEMO_OMP_FOR _Pragma("omp parallel for schedule(static)")

namespace hemo::kern::par {
#include "kernels_body.inc"
}  // namespace hemo::kern::par
