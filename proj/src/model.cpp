#include "qep/model.hpp"

#include <cmath>

namespace qep {

namespace {
// c in nm*THz.
constexpr double kCNmThz = kSpeedOfLight * 1e-3;
}  // namespace

double wavelength_to_frequency(double wavelength_nm)
{
    if (!(wavelength_nm > 0.0) || !std::isfinite(wavelength_nm))
        throw DomainError("wavelength must be positive, got " + std::to_string(wavelength_nm));
    return kCNmThz / wavelength_nm;
}

double frequency_to_wavelength(double frequency_thz)
{
    if (!(frequency_thz > 0.0) || !std::isfinite(frequency_thz))
        throw DomainError("frequency must be positive, got " + std::to_string(frequency_thz));
    return kCNmThz / frequency_thz;
}

SpectralPoint SpectralPoint::from_wavelength(double wavelength_nm)
{
    return SpectralPoint(wavelength_to_frequency(wavelength_nm), wavelength_nm);
}

SpectralPoint SpectralPoint::from_frequency(double frequency_thz)
{
    return SpectralPoint(frequency_thz, frequency_to_wavelength(frequency_thz));
}

double bandwidth_wavelength_to_frequency(double width_nm, double center_nm)
{
    if (!(center_nm > 0.0))
        throw DomainError("center wavelength must be positive");
    if (width_nm < 0.0 || !std::isfinite(width_nm))
        throw DomainError("bandwidth must be non-negative");
    // THz -> GHz
    return kCNmThz * width_nm / (center_nm * center_nm) * 1e3;
}

double bandwidth_frequency_to_wavelength(double width_ghz, double center_nm)
{
    if (!(center_nm > 0.0))
        throw DomainError("center wavelength must be positive");
    if (width_ghz < 0.0 || !std::isfinite(width_ghz))
        throw DomainError("bandwidth must be non-negative");
    return width_ghz * 1e-3 * center_nm * center_nm / kCNmThz;
}

}  // namespace qep
