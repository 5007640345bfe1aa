#pragma once

#include <vector>

#include "dudotrans/tomo/arrays.hpp"

namespace dudotrans::tomo {

// Every operator here is linear. Each one that takes part in reconstruction
// has an `_adjoint` partner that applies the exact transpose of the same
// discretization, so <A x, y> == <x, A^T y> up to rounding.

/// Fan-beam line integrals. Ray (view v, detector d) is the line with normal
/// angle theta = beta_v + gamma_d at signed offset s = source_to_iso * sin(gamma_d);
/// it is sampled every pixel_spacing / 2 with bilinear interpolation.
Sinogram forward_project(const CtImage& image);

/// Pixel-driven parallel projection on the rebinned grid. Each pixel spreads
/// its value onto the two nearest offset bins (linear weights) scaled by
/// pixel_area / offset_spacing. Its transpose is the unweighted backprojection.
Sinogram project_parallel(const CtImage& image);
CtImage project_parallel_adjoint(const Sinogram& sino);

/// Resample fan data onto the parallel grid: theta = beta + gamma,
/// s = source_to_iso * sin(gamma). The line (theta, s) is measured twice over a
/// full turn, at (beta, gamma) and (beta + pi + 2 gamma, -gamma); both samples
/// are read bilinearly in (beta, gamma) and averaged. Samples falling outside
/// the detector arc read as zero.
Sinogram rebin_fan_to_parallel(const Sinogram& fan);
Sinogram rebin_fan_to_parallel_adjoint(const Sinogram& parallel);

enum class RampWindow { ram_lak, hann };

/// Row-wise Ram-Lak filter applied through the FFT, zero padded to the next
/// power of two >= 2 * offsets so the circular convolution equals the linear
/// one on the row. The spatial Ram-Lak kernel is transformed, giving a real
/// even response with near-zero DC gain; the Hann option tapers it to zero at
/// Nyquist. Output is scaled so that backproject(ramp_filter(p)) inverts the
/// parallel Radon transform.
Sinogram ramp_filter(const Sinogram& parallel, RampWindow window = RampWindow::ram_lak);
/// The filter matrix is symmetric; provided for symmetry of the API.
Sinogram ramp_filter_adjoint(const Sinogram& parallel, RampWindow window = RampWindow::ram_lak);

/// pixel(x, y) = (pi / num_angles) * sum over angles of the linearly
/// interpolated sample at s = x cos(theta) + y sin(theta).
CtImage backproject(const Sinogram& parallel);
Sinogram backproject_adjoint(const CtImage& image);

/// Real gains of the ramp filter at DFT bins 0..padded/2 for a row of
/// `offsets` samples spaced `offset_spacing` apart.
std::vector<double> ramp_response(std::size_t offsets, double offset_spacing, RampWindow window = RampWindow::ram_lak);

/// backproject . ramp_filter . rebin_fan_to_parallel
CtImage fbp(const Sinogram& fan, RampWindow window = RampWindow::ram_lak);
/// Transpose of fbp: rebin^T . ramp^T . backproject^T.
Sinogram fbp_adjoint(const CtImage& image_grad, RampWindow window = RampWindow::ram_lak);

/// Sum of elementwise products; helper for adjoint checks.
double dot(const Array2D& a, const Array2D& b);

}  // namespace dudotrans::tomo
