#pragma once

// Scalar-diffraction wavefront shaping: a phase-only modulator followed by
// Rayleigh-Sommerfeld free-space propagation, evaluated as a zero-padded FFT
// convolution with the sampled impulse response.

#include "gradpie/blackbox.hpp"

#include <fftw3.h>
#include <nlohmann/json.hpp>

#include <complex>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

namespace gradpie {

using Complex = std::complex<double>;
/// n x n field; row index is y, column index is x.
using Field = Eigen::Array<Complex, Eigen::Dynamic, Eigen::Dynamic>;

struct GaussianSpot {
  double cx = 0.0;
  double cy = 0.0;
  double waist = 30e-6;
  double amplitude = 1.0;
};

struct OpticalConfig {
  Index grid = 16;
  double pitch = 10e-6;
  double wavelength = 700e-9;
  double waist = 70e-6;
  double distance = 10e-3;
  std::vector<GaussianSpot> target = {{-35e-6, 0.0, 25e-6, 1.8}, {35e-6, 0.0, 25e-6, 1.8}};

  void validate() const {
    if (grid < 1) throw std::invalid_argument("optics: grid must be >= 1");
    if (!(pitch > 0.0)) throw std::invalid_argument("optics: pitch must be > 0");
    if (!(wavelength > 0.0)) throw std::invalid_argument("optics: wavelength must be > 0");
    if (!(waist > 0.0)) throw std::invalid_argument("optics: waist must be > 0");
    if (!(distance > 0.0)) throw std::invalid_argument("optics: propagation distance z must be > 0");
  }
};

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(fftw_complex* p) const { fftw_free(p); }
};
struct FftwPlanDestroy {
  void operator()(fftw_plan_s* p) const {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(p);
  }
};

using FftwBuffer = std::unique_ptr<fftw_complex[], FftwFree>;
using FftwPlan = std::unique_ptr<fftw_plan_s, FftwPlanDestroy>;

inline FftwBuffer fftw_buffer(std::size_t n) {
  auto* p = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
  if (!p) throw std::bad_alloc();
  return FftwBuffer(p);
}

/// Square 2-D DFT pair of side p. Plans are built once; execution on fresh
/// fftw_malloc buffers is reentrant.
class Fft2d {
 public:
  explicit Fft2d(int side) : side_(side) {
    auto in = fftw_buffer(size());
    auto out = fftw_buffer(size());
    std::lock_guard lock(fftw_planner_mutex());
    forward_.reset(fftw_plan_dft_2d(side, side, in.get(), out.get(), FFTW_FORWARD, FFTW_ESTIMATE));
    backward_.reset(fftw_plan_dft_2d(side, side, in.get(), out.get(), FFTW_BACKWARD, FFTW_ESTIMATE));
    if (!forward_ || !backward_) throw std::runtime_error("fftw: plan creation failed");
  }

  int side() const { return side_; }
  std::size_t size() const { return std::size_t(side_) * std::size_t(side_); }
  void forward(fftw_complex* in, fftw_complex* out) const { fftw_execute_dft(forward_.get(), in, out); }
  void backward(fftw_complex* in, fftw_complex* out) const { fftw_execute_dft(backward_.get(), in, out); }

 private:
  int side_;
  FftwPlan forward_;
  FftwPlan backward_;
};

inline Complex* as_complex(fftw_complex* p) { return reinterpret_cast<Complex*>(p); }

}  // namespace detail

class OpticalSystem {
 public:
  explicit OpticalSystem(OpticalConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const Index n = cfg_.grid;
    pad_ = int(2 * n);
    fft_ = std::make_shared<detail::Fft2d>(pad_);

    input_ = Field(n, n);
    target_ = Field::Zero(n, n);
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < n; ++c) {
        const double x = coord(c);
        const double y = coord(r);
        input_(r, c) = std::exp(-(x * x + y * y) / (cfg_.waist * cfg_.waist));
        for (const auto& s : cfg_.target) {
          const double dx = x - s.cx;
          const double dy = y - s.cy;
          target_(r, c) += s.amplitude * std::exp(-(dx * dx + dy * dy) / (s.waist * s.waist));
        }
      }
    }
    build_transfer();
  }

  const OpticalConfig& config() const { return cfg_; }
  Index grid() const { return cfg_.grid; }
  double pixel_area() const { return cfg_.pitch * cfg_.pitch; }
  double wavenumber() const { return 2.0 * std::numbers::pi / cfg_.wavelength; }
  double rayleigh_range() const { return std::numbers::pi * cfg_.waist * cfg_.waist / cfg_.wavelength; }
  /// Pixel-center coordinate, grid centered on the optical axis.
  double coord(Index i) const { return (double(i) - 0.5 * double(cfg_.grid - 1)) * cfg_.pitch; }

  const Field& input_field() const { return input_; }
  const Field& target_field() const { return target_; }

  /// h_z(dx, dy) = z / (i lambda d^2) (1 + i / (k d)) exp(i k d).
  Complex impulse_response(double dx, double dy) const {
    const double z = cfg_.distance;
    const double d = std::sqrt(dx * dx + dy * dy + z * z);
    const double k = wavenumber();
    const Complex i(0.0, 1.0);
    return z / (i * cfg_.wavelength * d * d) * (1.0 + i / (k * d)) * std::exp(i * (k * d));
  }

  Field propagate(const Field& field) const {
    const Index n = cfg_.grid;
    if (field.rows() != n || field.cols() != n) throw DimensionError("propagate: field does not match grid");
    auto buf = detail::fftw_buffer(fft_->size());
    auto spec = detail::fftw_buffer(fft_->size());
    Complex* b = detail::as_complex(buf.get());
    std::fill(b, b + fft_->size(), Complex(0.0));
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < n; ++c) b[std::size_t(r) * std::size_t(pad_) + std::size_t(c)] = field(r, c);
    }
    fft_->forward(buf.get(), spec.get());
    Complex* s = detail::as_complex(spec.get());
    for (std::size_t k = 0; k < fft_->size(); ++k) s[k] *= transfer_[k];
    fft_->backward(spec.get(), buf.get());
    const double scale = 1.0 / double(fft_->size());
    Field out(n, n);
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < n; ++c) out(r, c) = b[std::size_t(r) * std::size_t(pad_) + std::size_t(c)] * scale;
    }
    return out;
  }

  /// Output field for per-pixel phases (row-major, length n*n).
  Field modulate_and_propagate(const Vector& phase) const {
    const Index n = cfg_.grid;
    require_dim(phase.size(), n * n, "optical phase vector");
    Field f(n, n);
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < n; ++c) f(r, c) = std::polar(1.0, phase[r * n + c]) * input_(r, c);
    }
    return propagate(f);
  }

 private:
  void build_transfer() {
    const Index n = cfg_.grid;
    auto buf = detail::fftw_buffer(fft_->size());
    auto spec = detail::fftw_buffer(fft_->size());
    Complex* b = detail::as_complex(buf.get());
    std::fill(b, b + fft_->size(), Complex(0.0));
    // Offsets -(n-1)..(n-1) wrap into [0, 2n); index n stays zero.
    for (Index oy = -(n - 1); oy <= n - 1; ++oy) {
      for (Index ox = -(n - 1); ox <= n - 1; ++ox) {
        const std::size_t r = std::size_t((oy + pad_) % pad_);
        const std::size_t c = std::size_t((ox + pad_) % pad_);
        b[r * std::size_t(pad_) + c] =
            impulse_response(double(ox) * cfg_.pitch, double(oy) * cfg_.pitch) * pixel_area();
      }
    }
    fft_->forward(buf.get(), spec.get());
    const Complex* s = detail::as_complex(spec.get());
    transfer_.assign(s, s + fft_->size());
  }

  OpticalConfig cfg_;
  int pad_ = 0;
  std::shared_ptr<const detail::Fft2d> fft_;
  std::vector<Complex> transfer_;
  Field input_;
  Field target_;
};

inline Field propagate(const Field& field, const OpticalSystem& system) { return system.propagate(field); }

/// sum |psi|^2 * pixel area
inline double field_power(const Field& f, double pixel_area) { return f.abs2().sum() * pixel_area; }

/// 1/e^2 intensity radius along x from the second moment: w = 2 sqrt(<x^2>).
inline double beam_waist_x(const Field& f, const OpticalSystem& sys) {
  const Eigen::ArrayXXd intensity = f.abs2();
  double total = 0.0;
  double mx = 0.0;
  for (Index r = 0; r < f.rows(); ++r) {
    for (Index c = 0; c < f.cols(); ++c) {
      total += intensity(r, c);
      mx += intensity(r, c) * sys.coord(c);
    }
  }
  mx /= total;
  double m2 = 0.0;
  for (Index r = 0; r < f.rows(); ++r) {
    for (Index c = 0; c < f.cols(); ++c) {
      const double dx = sys.coord(c) - mx;
      m2 += intensity(r, c) * dx * dx;
    }
  }
  return 2.0 * std::sqrt(m2 / total);
}

/// Phase-only modulator + propagation. Input: n*n phases (row-major); output:
/// n*n field moduli |psi_out|.
class OwmsBlackBox final : public BlackBox {
 public:
  explicit OwmsBlackBox(OpticalConfig cfg) : sys_(std::move(cfg)) {
    const Index n = sys_.grid();
    target_modulus_.resize(n * n);
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < n; ++c) target_modulus_[r * n + c] = std::abs(sys_.target_field()(r, c));
    }
  }

  Index input_dim() const override { return sys_.grid() * sys_.grid(); }
  Index output_dim() const override { return sys_.grid() * sys_.grid(); }
  std::string name() const override { return "owms"; }
  const OpticalSystem& system() const { return sys_; }
  const Vector& target_modulus() const { return target_modulus_; }
  void set_target_modulus(Vector t) {
    require_dim(t.size(), output_dim(), "owms target");
    target_modulus_ = std::move(t);
  }

 protected:
  Vector compute(const Vector& phase) const override {
    const Field out = sys_.modulate_and_propagate(phase);
    const Index n = sys_.grid();
    Vector y(n * n);
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < n; ++c) y[r * n + c] = std::abs(out(r, c));
    }
    return y;
  }

 private:
  OpticalSystem sys_;
  Vector target_modulus_;
};

/// || |psi_out| - |psi_target| ||_1 over the grid; one black-box query.
inline double owms_objective(const Vector& phase, OwmsBlackBox& box) {
  return (box.evaluate(phase) - box.target_modulus()).lpNorm<1>();
}

// ---- system definition files ----

inline nlohmann::json to_json(const OpticalConfig& c) {
  nlohmann::json j;
  j["grid"] = c.grid;
  j["pitch"] = c.pitch;
  j["wavelength"] = c.wavelength;
  j["waist"] = c.waist;
  j["z"] = c.distance;
  auto& t = j["target"] = nlohmann::json::array();
  for (const auto& s : c.target) t.push_back({s.cx, s.cy, s.waist, s.amplitude});
  return j;
}

/// {grid, pitch, wavelength, waist, z, target: [[cx, cy, waist, amplitude], ...]}
inline OpticalConfig optical_config_from_json(const nlohmann::json& j) {
  OpticalConfig c;
  c.grid = j.value("grid", c.grid);
  c.pitch = j.value("pitch", c.pitch);
  c.wavelength = j.value("wavelength", c.wavelength);
  c.waist = j.value("waist", c.waist);
  c.distance = j.value("z", c.distance);
  if (j.contains("target")) {
    c.target.clear();
    for (const auto& t : j.at("target")) {
      const auto v = t.get<std::vector<double>>();
      if (v.size() != 4) throw std::invalid_argument("optics json: target spots are [cx, cy, waist, amplitude]");
      c.target.push_back({v[0], v[1], v[2], v[3]});
    }
  }
  c.validate();
  return c;
}

}  // namespace gradpie
