//! Unit constants and conversions used at module boundaries.
//!
//! Positions on the focal plane are in µm, wavelengths in nm, wavelength
//! shifts in pm, frequencies in MHz (GHz for the free spectral range) and
//! optical lengths in mm. Everything is converted to SI inside the formulas.

/// Speed of light in vacuum, m/s (exact).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// FWHM of a Gaussian in units of its standard deviation, 2·sqrt(2 ln 2).
pub const GAUSSIAN_FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

pub const MM: f64 = 1e-3;
pub const UM: f64 = 1e-6;
pub const NM: f64 = 1e-9;
pub const PM: f64 = 1e-12;
pub const MHZ: f64 = 1e6;
pub const GHZ: f64 = 1e9;

/// First-order conversion of a wavelength shift into a frequency shift,
/// Δν = −cΔλ/λ0².
pub fn wavelength_shift_to_frequency(delta_lambda_pm: f64, lambda0_nm: f64) -> f64 {
    let lambda0 = lambda0_nm * NM;
    -SPEED_OF_LIGHT * (delta_lambda_pm * PM) / (lambda0 * lambda0) / MHZ
}

/// Inverse of [`wavelength_shift_to_frequency`].
pub fn frequency_shift_to_wavelength(delta_nu_mhz: f64, lambda0_nm: f64) -> f64 {
    let lambda0 = lambda0_nm * NM;
    -(delta_nu_mhz * MHZ) * lambda0 * lambda0 / SPEED_OF_LIGHT / PM
}

/// Wavelength (nm) of light detuned by `detuning_mhz` from `lambda0_nm`,
/// exact in frequency: λ = c / (c/λ0 + Δν).
pub fn detuned_wavelength(lambda0_nm: f64, detuning_mhz: f64) -> f64 {
    let nu0 = SPEED_OF_LIGHT / (lambda0_nm * NM);
    SPEED_OF_LIGHT / (nu0 + detuning_mhz * MHZ) / NM
}

pub fn nm_to_pm(nm: f64) -> f64 {
    nm * 1e3
}

pub fn pm_to_nm(pm: f64) -> f64 {
    pm * 1e-3
}

pub fn deg(rad: f64) -> f64 {
    rad.to_degrees()
}

pub fn rad(deg: f64) -> f64 {
    deg.to_radians()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_constant() {
        let expected = 2.0 * (2.0 * std::f64::consts::LN_2).sqrt();
        assert!((GAUSSIAN_FWHM_PER_SIGMA - expected).abs() < 1e-15);
    }

    #[test]
    fn detuned_wavelength_matches_first_order() {
        let l0 = 605.9773;
        let exact = detuned_wavelength(l0, 120.0) - l0;
        let first = pm_to_nm(frequency_shift_to_wavelength(120.0, l0));
        assert!((exact - first).abs() / first.abs() < 1e-6);
        assert!(exact < 0.0);
    }

    proptest! {
        #[test]
        fn nm_pm_mhz_round_trip(dl_nm in -1e-3f64..1e-3, l0 in 400.0f64..1700.0) {
            let pm = nm_to_pm(dl_nm);
            let mhz = wavelength_shift_to_frequency(pm, l0);
            let back = pm_to_nm(frequency_shift_to_wavelength(mhz, l0));
            let scale = dl_nm.abs().max(1e-300);
            prop_assert!((back - dl_nm).abs() / scale <= 1e-12);
        }
    }
}
