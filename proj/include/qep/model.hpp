#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace qep {

/// Speed of light in vacuum, m/s (exact by SI definition).
inline constexpr double kSpeedOfLight = 299792458.0;

/// Speed of light in m/ps, convenient for time-of-flight arithmetic.
inline constexpr double kSpeedOfLightMPerPs = kSpeedOfLight * 1e-12;

/// Gaussian FWHM / sigma.
inline constexpr double kFwhmPerSigma = 2.3548200450309493;

/// Picoseconds, integer: the time-tag granularity.
using Picoseconds = std::int64_t;

class DomainError : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

/// A frequency (THz) and wavelength (nm) held together; construct through
/// the named factories so the two fields cannot drift apart.
class SpectralPoint {
  public:
    static SpectralPoint from_wavelength(double wavelength_nm);
    static SpectralPoint from_frequency(double frequency_thz);

    double frequency_thz() const { return frequency_; }
    double wavelength_nm() const { return wavelength_; }

  private:
    SpectralPoint(double f, double l) : frequency_(f), wavelength_(l) {}
    double frequency_;
    double wavelength_;
};

double wavelength_to_frequency(double wavelength_nm);
double frequency_to_wavelength(double frequency_thz);

/// First-order bandwidth conversion c * dl / l0^2, returned in GHz.
/// A zero width maps to zero.
double bandwidth_wavelength_to_frequency(double width_nm, double center_nm);

/// Inverse of bandwidth_wavelength_to_frequency: GHz -> nm.
double bandwidth_frequency_to_wavelength(double width_ghz, double center_nm);

}  // namespace qep
