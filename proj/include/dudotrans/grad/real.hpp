#pragma once

namespace dudotrans {

// Scalar type for model parameters and activations. Float64 builds exist for
// tight gradient verification.
#ifdef DUDOTRANS_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

}  // namespace dudotrans
