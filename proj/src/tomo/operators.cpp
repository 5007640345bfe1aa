#include "dudotrans/tomo/operators.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <tuple>

namespace dudotrans::tomo {

namespace {

constexpr double kPi = std::numbers::pi;

void require_kind(const Sinogram& sino, SinogramKind kind, const char* op) {
  if (sino.kind != kind) {
    throw std::invalid_argument(std::string(op) + ": expected a " +
                                (kind == SinogramKind::fan ? "fan" : "parallel") + " sinogram");
  }
  sino.check_shape();
}

/// Bilinear taps of a point (x, y) on the image grid. Taps outside the grid are
/// dropped, i.e. the image is zero outside its support.
template <typename Visit>
inline void for_each_bilinear_tap(const ScanGeometry& g, double x, double y, Visit&& visit) {
  const double fc = x / g.pixel_spacing + 0.5 * static_cast<double>(g.image_cols) - 0.5;
  const double fr = 0.5 * static_cast<double>(g.image_rows) - 0.5 - y / g.pixel_spacing;
  const double c0f = std::floor(fc);
  const double r0f = std::floor(fr);
  const double wc = fc - c0f;
  const double wr = fr - r0f;
  const auto c0 = static_cast<long>(c0f);
  const auto r0 = static_cast<long>(r0f);
  const auto rows = static_cast<long>(g.image_rows);
  const auto cols = static_cast<long>(g.image_cols);
  const double w[2][2] = {{(1 - wr) * (1 - wc), (1 - wr) * wc}, {wr * (1 - wc), wr * wc}};
  for (int dr = 0; dr < 2; ++dr) {
    const long r = r0 + dr;
    if (r < 0 || r >= rows) continue;
    for (int dc = 0; dc < 2; ++dc) {
      const long c = c0 + dc;
      if (c < 0 || c >= cols) continue;
      visit(static_cast<std::size_t>(r) * g.image_cols + static_cast<std::size_t>(c), w[dr][dc]);
    }
  }
}

/// Linear taps on the parallel offset axis for offset s.
template <typename Visit>
inline void for_each_offset_tap(const ScanGeometry& g, double s, Visit&& visit) {
  const double fj = (s + 1.0) / g.offset_spacing() - 0.5;
  const double j0f = std::floor(fj);
  const double w = fj - j0f;
  const auto j0 = static_cast<long>(j0f);
  const auto n = static_cast<long>(g.parallel_offsets());
  if (j0 >= 0 && j0 < n) visit(static_cast<std::size_t>(j0), 1.0 - w);
  if (j0 + 1 >= 0 && j0 + 1 < n) visit(static_cast<std::size_t>(j0 + 1), w);
}

/// Pixel-driven pairing between image pixels and parallel bins; both the
/// parallel projector and the backprojector are built from this one loop.
template <typename Visit>
void for_each_pixel_bin_pair(const ScanGeometry& g, Visit&& visit) {
  const std::size_t angles = g.parallel_angles();
  const std::size_t offsets = g.parallel_offsets();
  for (std::size_t a = 0; a < angles; ++a) {
    const double theta = g.parallel_angle(a);
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    for (std::size_t r = 0; r < g.image_rows; ++r) {
      const double y = g.pixel_y(r);
      for (std::size_t c = 0; c < g.image_cols; ++c) {
        const double s = g.pixel_x(c) * ct + y * st;
        const std::size_t pixel = r * g.image_cols + c;
        for_each_offset_tap(g, s, [&](std::size_t j, double w) { visit(pixel, a * offsets + j, w); });
      }
    }
  }
}

/// Bilinear (beta, gamma) taps for one rebinned sample. The view axis is
/// periodic; the detector axis reads zero outside the arc.
template <typename Visit>
inline void for_each_fan_tap(const ScanGeometry& g, double beta, double gamma, double weight,
                             Visit&& visit) {
  const double dbeta = g.view_spacing();
  const auto views = static_cast<long>(g.num_views);
  const auto dets = static_cast<long>(g.num_detectors);
  double fv = beta / dbeta;
  fv -= std::floor(fv / static_cast<double>(views)) * static_cast<double>(views);
  const double v0f = std::floor(fv);
  const double wv = fv - v0f;
  const long v0 = static_cast<long>(v0f) % views;
  const long v1 = (v0 + 1) % views;
  const double fd = (gamma + g.fan_half_angle()) / g.detector_spacing() - 0.5;
  const double d0f = std::floor(fd);
  const double wd = fd - d0f;
  const auto d0 = static_cast<long>(d0f);
  const long vs[2] = {v0, v1};
  const double wvs[2] = {1.0 - wv, wv};
  const double wds[2] = {1.0 - wd, wd};
  for (int i = 0; i < 2; ++i) {
    for (int k = 0; k < 2; ++k) {
      const long d = d0 + k;
      if (d < 0 || d >= dets) continue;
      visit(static_cast<std::size_t>(vs[i] * dets + d), weight * wvs[i] * wds[k]);
    }
  }
}

template <typename Visit>
void for_each_rebin_tap(const ScanGeometry& g, Visit&& visit) {
  const std::size_t angles = g.parallel_angles();
  const std::size_t offsets = g.parallel_offsets();
  for (std::size_t a = 0; a < angles; ++a) {
    const double theta = g.parallel_angle(a);
    for (std::size_t j = 0; j < offsets; ++j) {
      const double ratio = g.offset(j) / g.source_to_iso;
      if (std::abs(ratio) >= 1.0) continue;
      const double gamma = std::asin(ratio);
      const std::size_t out = a * offsets + j;
      auto tap = [&](std::size_t fan_index, double w) { visit(out, fan_index, w); };
      for_each_fan_tap(g, theta - gamma, gamma, 0.5, tap);
      for_each_fan_tap(g, theta + kPi + gamma, -gamma, 0.5, tap);
    }
  }
}

// Ramp filter plans. fftw's planner is not re-entrant, so plans are created
// under a lock and executed with the new-array interface on private buffers.
struct RampPlan {
  std::size_t padded = 0;
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
  std::vector<double> response;  // padded/2 + 1 real gains, already divided by padded

  ~RampPlan() {
    if (forward) fftw_destroy_plan(forward);
    if (inverse) fftw_destroy_plan(inverse);
  }
};

struct FftwRealDeleter {
  void operator()(double* p) const { fftw_free(p); }
};
struct FftwComplexDeleter {
  void operator()(fftw_complex* p) const { fftw_free(p); }
};

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

const RampPlan& ramp_plan(std::size_t offsets, double spacing, RampWindow window) {
  static std::mutex mutex;
  static std::map<std::tuple<std::size_t, double, int>, std::unique_ptr<RampPlan>> cache;
  std::lock_guard lock(mutex);
  auto key = std::make_tuple(offsets, spacing, static_cast<int>(window));
  auto it = cache.find(key);
  if (it != cache.end()) return *it->second;

  auto plan = std::make_unique<RampPlan>();
  const std::size_t n = next_pow2(2 * offsets);
  plan->padded = n;
  std::unique_ptr<double, FftwRealDeleter> real(fftw_alloc_real(n));
  std::unique_ptr<fftw_complex, FftwComplexDeleter> spec(fftw_alloc_complex(n / 2 + 1));
  plan->forward = fftw_plan_dft_r2c_1d(static_cast<int>(n), real.get(), spec.get(), FFTW_ESTIMATE);
  plan->inverse = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec.get(), real.get(), FFTW_ESTIMATE);
  if (!plan->forward || !plan->inverse) throw std::runtime_error("fftw planning failed");

  // Band-limited Ram-Lak kernel sampled in space: h[0] = 1/(4 tau^2),
  // h[n odd] = -1/(pi n tau)^2, h[n even] = 0, laid out circularly. Its DFT is
  // real and even. Sampling |f| directly instead would leave a DC deficit.
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<long>(i <= n / 2 ? i : n - i);
    double h = 0.0;
    if (k == 0) {
      h = 0.25 / (spacing * spacing);
    } else if (k % 2 == 1) {
      const double d = kPi * static_cast<double>(k) * spacing;
      h = -1.0 / (d * d);
    }
    real.get()[i] = h * spacing;
  }
  fftw_execute(plan->forward);
  const double nyquist = static_cast<double>(n / 2);
  plan->response.resize(n / 2 + 1);
  for (std::size_t k = 0; k <= n / 2; ++k) {
    double gain = spec.get()[k][0];
    if (window == RampWindow::hann) gain *= 0.5 * (1.0 + std::cos(kPi * static_cast<double>(k) / nyquist));
    plan->response[k] = gain / static_cast<double>(n);
  }
  auto& ref = *plan;
  cache.emplace(key, std::move(plan));
  return ref;
}

}  // namespace

std::vector<double> ramp_response(std::size_t offsets, double offset_spacing, RampWindow window) {
  const RampPlan& plan = ramp_plan(offsets, offset_spacing, window);
  std::vector<double> gains(plan.response);
  for (double& g : gains) g *= static_cast<double>(plan.padded);
  return gains;
}

double dot(const Array2D& a, const Array2D& b) {
  if (a.data.size() != b.data.size()) throw std::invalid_argument("dot: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

Sinogram forward_project(const CtImage& image) {
  image.geometry.validate();
  image.check_shape();
  const ScanGeometry& g = image.geometry;
  Sinogram out = Sinogram::zeros(g, SinogramKind::fan);

  const double half_w = 0.5 * static_cast<double>(g.image_cols) * g.pixel_spacing;
  const double half_h = 0.5 * static_cast<double>(g.image_rows) * g.pixel_spacing;
  const double reach = std::hypot(half_w, half_h) + g.pixel_spacing;
  const double nominal_step = 0.5 * g.pixel_spacing;
  const auto samples = static_cast<std::size_t>(std::ceil(2.0 * reach / nominal_step));
  const double step = 2.0 * reach / static_cast<double>(samples);
  const double* pixels = image.pixels.data.data();

  for (std::size_t v = 0; v < g.num_views; ++v) {
    const double beta = g.view_angle(v);
    for (std::size_t d = 0; d < g.num_detectors; ++d) {
      const double gamma = g.detector_angle(d);
      const double theta = beta + gamma;
      const double s = g.source_to_iso * std::sin(gamma);
      const double nx = std::cos(theta);
      const double ny = std::sin(theta);
      // Direction along the ray, perpendicular to the normal.
      const double dx = ny;
      const double dy = -nx;
      double acc = 0.0;
      for (std::size_t k = 0; k < samples; ++k) {
        const double t = -reach + (static_cast<double>(k) + 0.5) * step;
        const double x = s * nx + t * dx;
        const double y = s * ny + t * dy;
        if (std::abs(x) > half_w + g.pixel_spacing || std::abs(y) > half_h + g.pixel_spacing) continue;
        for_each_bilinear_tap(g, x, y, [&](std::size_t p, double w) { acc += w * pixels[p]; });
      }
      out.bins(v, d) = acc * step;
    }
  }
  return out;
}

Sinogram project_parallel(const CtImage& image) {
  image.geometry.validate();
  image.check_shape();
  const ScanGeometry& g = image.geometry;
  Sinogram out = Sinogram::zeros(g, SinogramKind::parallel);
  const double scale = g.pixel_spacing * g.pixel_spacing / g.offset_spacing();
  const double* src = image.pixels.data.data();
  double* dst = out.bins.data.data();
  for_each_pixel_bin_pair(g, [&](std::size_t pixel, std::size_t bin, double w) {
    dst[bin] += scale * w * src[pixel];
  });
  return out;
}

CtImage project_parallel_adjoint(const Sinogram& sino) {
  require_kind(sino, SinogramKind::parallel, "project_parallel_adjoint");
  const ScanGeometry& g = sino.geometry;
  CtImage out = CtImage::zeros(g);
  const double scale = g.pixel_spacing * g.pixel_spacing / g.offset_spacing();
  const double* src = sino.bins.data.data();
  double* dst = out.pixels.data.data();
  for_each_pixel_bin_pair(g, [&](std::size_t pixel, std::size_t bin, double w) {
    dst[pixel] += scale * w * src[bin];
  });
  return out;
}

Sinogram rebin_fan_to_parallel(const Sinogram& fan) {
  require_kind(fan, SinogramKind::fan, "rebin_fan_to_parallel");
  Sinogram out = Sinogram::zeros(fan.geometry, SinogramKind::parallel);
  const double* src = fan.bins.data.data();
  double* dst = out.bins.data.data();
  for_each_rebin_tap(fan.geometry, [&](std::size_t par, std::size_t f, double w) { dst[par] += w * src[f]; });
  return out;
}

Sinogram rebin_fan_to_parallel_adjoint(const Sinogram& parallel) {
  require_kind(parallel, SinogramKind::parallel, "rebin_fan_to_parallel_adjoint");
  Sinogram out = Sinogram::zeros(parallel.geometry, SinogramKind::fan);
  const double* src = parallel.bins.data.data();
  double* dst = out.bins.data.data();
  for_each_rebin_tap(parallel.geometry, [&](std::size_t par, std::size_t f, double w) { dst[f] += w * src[par]; });
  return out;
}

Sinogram ramp_filter(const Sinogram& parallel, RampWindow window) {
  require_kind(parallel, SinogramKind::parallel, "ramp_filter");
  const ScanGeometry& g = parallel.geometry;
  const std::size_t width = parallel.bins.cols;
  const RampPlan& plan = ramp_plan(width, g.offset_spacing(), window);
  const std::size_t n = plan.padded;

  std::unique_ptr<double, FftwRealDeleter> real(fftw_alloc_real(n));
  std::unique_ptr<fftw_complex, FftwComplexDeleter> spec(fftw_alloc_complex(n / 2 + 1));
  Sinogram out = Sinogram::zeros(g, SinogramKind::parallel);
  for (std::size_t r = 0; r < parallel.bins.rows; ++r) {
    auto in_row = parallel.bins.row(r);
    std::fill(real.get(), real.get() + n, 0.0);
    std::copy(in_row.begin(), in_row.end(), real.get());
    fftw_execute_dft_r2c(plan.forward, real.get(), spec.get());
    for (std::size_t k = 0; k <= n / 2; ++k) {
      spec.get()[k][0] *= plan.response[k];
      spec.get()[k][1] *= plan.response[k];
    }
    fftw_execute_dft_c2r(plan.inverse, spec.get(), real.get());
    auto out_row = out.bins.row(r);
    std::copy(real.get(), real.get() + width, out_row.begin());
  }
  return out;
}

Sinogram ramp_filter_adjoint(const Sinogram& parallel, RampWindow window) {
  return ramp_filter(parallel, window);
}

CtImage backproject(const Sinogram& parallel) {
  require_kind(parallel, SinogramKind::parallel, "backproject");
  const ScanGeometry& g = parallel.geometry;
  CtImage out = CtImage::zeros(g);
  const double scale = kPi / static_cast<double>(g.parallel_angles());
  const double* src = parallel.bins.data.data();
  double* dst = out.pixels.data.data();
  for_each_pixel_bin_pair(g, [&](std::size_t pixel, std::size_t bin, double w) {
    dst[pixel] += scale * w * src[bin];
  });
  return out;
}

Sinogram backproject_adjoint(const CtImage& image) {
  image.check_shape();
  const ScanGeometry& g = image.geometry;
  Sinogram out = Sinogram::zeros(g, SinogramKind::parallel);
  const double scale = kPi / static_cast<double>(g.parallel_angles());
  const double* src = image.pixels.data.data();
  double* dst = out.bins.data.data();
  for_each_pixel_bin_pair(g, [&](std::size_t pixel, std::size_t bin, double w) {
    dst[bin] += scale * w * src[pixel];
  });
  return out;
}

CtImage fbp(const Sinogram& fan, RampWindow window) {
  require_kind(fan, SinogramKind::fan, "fbp");
  return backproject(ramp_filter(rebin_fan_to_parallel(fan), window));
}

Sinogram fbp_adjoint(const CtImage& image_grad, RampWindow window) {
  image_grad.check_shape();
  return rebin_fan_to_parallel_adjoint(ramp_filter_adjoint(backproject_adjoint(image_grad), window));
}

}  // namespace dudotrans::tomo
