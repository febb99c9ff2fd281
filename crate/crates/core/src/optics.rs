//! Forward model of a VIPA spectrometer focused by two cylindrical lenses.
//!
//! The focal-plane intensity is the product of a y Gaussian envelope, an x
//! Gaussian envelope and the finite-N multiple-beam interference factor of the
//! tilted etalon. Dispersion, free spectral range and the frequency resolution
//! follow from the same phase.
//!
//! Conventions: focal-plane positions in µm, wavelengths in nm, wavelength
//! shifts in pm, frequencies in MHz (FSR in GHz), lengths in mm. The external
//! incidence angle is θ = n_r·θ_in. Positive `x` points toward shorter
//! wavelength (higher frequency).

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{self, GHZ, MHZ, MM, NM, PM, SPEED_OF_LIGHT, UM};

/// Largest internal angle for which the paraxial model is used.
pub const MAX_THETA_IN_RAD: f64 = 0.1;

/// Upper bound on the number of virtual sources accepted as physical.
pub const MAX_VIRTUAL_SOURCES: u64 = 1_000_000;

/// Etalon geometry and coatings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VipaSpec {
    /// Reflectivity of the highly reflective input side, R.
    pub reflectivity_in: f64,
    /// Reflectivity of the partially transmitting output side, r.
    pub reflectivity_out: f64,
    pub refractive_index: f64,
    pub thickness_mm: f64,
    pub length_mm: f64,
}

impl VipaSpec {
    /// The etalon used in the single-photon experiment (LightMachinery solid VIPA).
    pub fn experiment() -> Self {
        VipaSpec {
            reflectivity_in: 0.996,
            reflectivity_out: 0.945,
            refractive_index: 1.46,
            thickness_mm: 6.74,
            length_mm: 18.0,
        }
    }

    pub fn with_thickness(self, thickness_mm: f64) -> Self {
        VipaSpec {
            thickness_mm,
            ..self
        }
    }

    /// Product of the two reflectivities, Rr.
    pub fn rr(&self) -> f64 {
        self.reflectivity_in * self.reflectivity_out
    }

    pub fn validate(&self) -> Result<()> {
        let (big_r, r) = (self.reflectivity_in, self.reflectivity_out);
        if !(big_r.is_finite() && big_r > 0.0 && big_r < 1.0) {
            return Err(Error::param("reflectivity_in", format!("{big_r} not in (0, 1)")));
        }
        if !(r.is_finite() && r > 0.0 && r <= big_r) {
            return Err(Error::param(
                "reflectivity_out",
                format!("{r} not in (0, reflectivity_in]"),
            ));
        }
        if !(self.refractive_index.is_finite() && self.refractive_index >= 1.0) {
            return Err(Error::param("refractive_index", "must be >= 1"));
        }
        if !(self.thickness_mm.is_finite() && self.thickness_mm > 0.0) {
            return Err(Error::param("thickness_mm", "must be > 0"));
        }
        if !(self.length_mm.is_finite() && self.length_mm > 0.0) {
            return Err(Error::param("length_mm", "must be > 0"));
        }
        Ok(())
    }

    /// Finesse π√(Rr)/(1−Rr).
    pub fn finesse(&self) -> f64 {
        let rr = self.rr();
        PI * rr.sqrt() / (1.0 - rr)
    }

    /// Fractional resonance order 2 t n_r cosθ_in / λ0 at the focal-plane origin.
    pub fn resonance_order(&self, lambda0_nm: f64, theta_in_rad: f64) -> f64 {
        2.0 * self.thickness_mm * MM * self.refractive_index * theta_in_rad.cos()
            / (lambda0_nm * NM)
    }

    /// Thickness trimmed to the nearest integer order so that `lambda0_nm` is
    /// exactly resonant at `theta_in_rad`. Returns the order and the new spec.
    ///
    /// The trim is at most λ0/(4 n_r), a fraction of a micrometre.
    pub fn tuned_to_resonance(&self, lambda0_nm: f64, theta_in_rad: f64) -> (u64, VipaSpec) {
        let m = self.resonance_order(lambda0_nm, theta_in_rad).round().max(1.0);
        let t = m * lambda0_nm * NM / (2.0 * self.refractive_index * theta_in_rad.cos()) / MM;
        (m as u64, self.with_thickness(t))
    }
}

/// Beam and lens parameters of one concrete spectrometer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalLayout {
    pub lambda0_nm: f64,
    /// Collimated beam radius at 1/e² intensity.
    pub beam_radius_mm: f64,
    /// Internal incidence angle θ_in.
    pub theta_in_rad: f64,
    pub f_in_mm: f64,
    pub f_x_mm: f64,
    pub f_y_mm: f64,
}

impl OpticalLayout {
    /// Lens choice of the experiment: θ_in ≈ 0.68°, f_in = 400 mm, f_x = 1000 mm, f_y = 40 mm.
    pub fn experiment() -> Self {
        OpticalLayout {
            lambda0_nm: 605.9773,
            beam_radius_mm: 1.0,
            theta_in_rad: 0.68f64.to_radians(),
            f_in_mm: 400.0,
            f_x_mm: 1000.0,
            f_y_mm: 40.0,
        }
    }

    /// Thick-etalon redesign: θ_in ≈ 0.30°, f_in = 498 mm, f_x = 449 mm.
    pub fn redesign() -> Self {
        OpticalLayout {
            theta_in_rad: 0.30f64.to_radians(),
            f_in_mm: 498.0,
            f_x_mm: 449.0,
            ..Self::experiment()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda0_nm", self.lambda0_nm),
            ("beam_radius_mm", self.beam_radius_mm),
            ("f_in_mm", self.f_in_mm),
            ("f_x_mm", self.f_x_mm),
            ("f_y_mm", self.f_y_mm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("{v} must be > 0")));
            }
        }
        let th = self.theta_in_rad;
        if !(th.is_finite() && th > 0.0) {
            return Err(Error::param("theta_in_rad", format!("{th} must be > 0")));
        }
        if th > MAX_THETA_IN_RAD {
            return Err(Error::InvalidLayout(format!(
                "theta_in = {th} rad exceeds the small-angle model limit of {MAX_THETA_IN_RAD} rad"
            )));
        }
        Ok(())
    }

    /// External incidence angle θ = n_r·θ_in.
    pub fn theta_ext(&self, vipa: &VipaSpec) -> f64 {
        vipa.refractive_index * self.theta_in_rad
    }
}

/// Number of virtual sources, floor(L / (2 t tanθ_in)).
pub fn virtual_source_count(vipa: &VipaSpec, layout: &OpticalLayout) -> Result<u64> {
    let th = layout.theta_in_rad;
    if !(th > 0.0) {
        return Err(Error::InvalidLayout("theta_in must be > 0".into()));
    }
    let n = (vipa.length_mm / (2.0 * vipa.thickness_mm * th.tan())).floor();
    if !(n >= 1.0) {
        return Err(Error::InvalidLayout(format!(
            "fewer than one virtual source (L / (2 t tan theta_in) = {n})"
        )));
    }
    if n > MAX_VIRTUAL_SOURCES as f64 {
        return Err(Error::InvalidLayout(format!(
            "{n} virtual sources exceeds the bound of {MAX_VIRTUAL_SOURCES}"
        )));
    }
    Ok(n as u64)
}

/// Round-trip phase between successive virtual sources at focal-plane
/// position `x_um` for wavelength `lambda_nm`.
pub fn phase(vipa: &VipaSpec, layout: &OpticalLayout, x_um: f64, lambda_nm: f64) -> f64 {
    let t = vipa.thickness_mm * MM;
    let n = vipa.refractive_index;
    let th_in = layout.theta_in_rad;
    let th = n * th_in;
    let lambda = lambda_nm * NM;
    let fx = layout.f_x_mm * MM;
    let x = x_um * UM;
    4.0 * PI * t * n * th_in.cos() / lambda
        - 4.0 * PI * t * th_in.tan() * th.cos() * x / (lambda * fx)
        - 2.0 * PI * t * th_in.cos() * x * x / (n * lambda * fx * fx)
}

/// Finite-N interference factor
/// ([1−(Rr)^{N+1}]² + 4(Rr)^{N+1} sin²((N+1)φ/2)) / ((1−Rr)² + 4Rr sin²(φ/2)).
pub fn interference_factor(phi: f64, rr: f64, n_sources: u64) -> f64 {
    // The factor is 2π-periodic in φ; reducing first keeps (N+1)φ/2 small.
    let phi = phi - 2.0 * PI * (phi / (2.0 * PI)).round();
    let k = (n_sources + 1) as f64;
    let rr_k = rr.powf(k);
    let s_half = (phi / 2.0).sin();
    let s_k = (k * phi / 2.0).sin();
    let num = (1.0 - rr_k).powi(2) + 4.0 * rr_k * s_k * s_k;
    let den = (1.0 - rr).powi(2) + 4.0 * rr * s_half * s_half;
    num / den
}

/// Validated, pre-computed forward model for one (etalon, layout) pair.
#[derive(Debug, Clone, Copy)]
pub struct Spectrometer {
    pub vipa: VipaSpec,
    pub layout: OpticalLayout,
    n_sources: u64,
}

impl Spectrometer {
    pub fn new(vipa: VipaSpec, layout: OpticalLayout) -> Result<Self> {
        vipa.validate()?;
        layout.validate()?;
        let n_sources = virtual_source_count(&vipa, &layout)?;
        Ok(Spectrometer {
            vipa,
            layout,
            n_sources,
        })
    }

    pub fn n_sources(&self) -> u64 {
        self.n_sources
    }

    pub fn phase(&self, x_um: f64, lambda_nm: f64) -> f64 {
        phase(&self.vipa, &self.layout, x_um, lambda_nm)
    }

    pub fn envelope_x(&self, x_um: f64) -> f64 {
        let x = x_um * UM;
        let fin = self.layout.f_in_mm * MM;
        let fx = self.layout.f_x_mm * MM;
        let w = self.layout.beam_radius_mm * MM;
        (-2.0 * fin * fin * x * x / (fx * fx * w * w)).exp()
    }

    pub fn envelope_y(&self, y_um: f64, lambda_nm: f64) -> f64 {
        let y = y_um * UM;
        let w = self.layout.beam_radius_mm * MM;
        let fy = self.layout.f_y_mm * MM;
        let lambda = lambda_nm * NM;
        (-2.0 * w * w * PI * y * y / (lambda * lambda * fy * fy)).exp()
    }

    /// Relative intensity at (x, y) on the focal plane.
    pub fn intensity(&self, x_um: f64, y_um: f64, lambda_nm: f64) -> f64 {
        let phi = self.phase(x_um, lambda_nm);
        self.envelope_y(y_um, lambda_nm)
            * self.envelope_x(x_um)
            * interference_factor(phi, self.vipa.rr(), self.n_sources)
    }

    pub fn intensity_at_detuning(&self, x_um: f64, detuning_mhz: f64) -> f64 {
        let lambda = units::detuned_wavelength(self.layout.lambda0_nm, detuning_mhz);
        self.intensity(x_um, 0.0, lambda)
    }

    /// Focal-plane position where the first-order dispersion relation puts
    /// light detuned by `detuning_mhz`.
    pub fn position_for_detuning(&self, detuning_mhz: f64) -> f64 {
        position_for_detuning(&self.vipa, &self.layout, detuning_mhz)
    }

    /// Peak position of the y=0 intensity for `lambda_nm` inside `[lo, hi]` µm:
    /// a scan at `step_um` followed by golden-section refinement.
    pub fn peak_position(&self, lambda_nm: f64, lo: f64, hi: f64, step_um: f64) -> Result<f64> {
        let xs = axis(lo, hi, step_um)?;
        let f = |x: f64| self.intensity(x, 0.0, lambda_nm);
        let (imax, _) = xs
            .iter()
            .map(|&x| f(x))
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let a = xs[imax.saturating_sub(1)];
        let b = xs[(imax + 1).min(xs.len() - 1)];
        Ok(golden_section_max(f, a, b, 1e-7))
    }
}

/// Relative output intensity at (x µm, y µm) for wavelength `lambda_nm`.
pub fn output_intensity(
    vipa: &VipaSpec,
    layout: &OpticalLayout,
    x_um: f64,
    y_um: f64,
    lambda_nm: f64,
) -> Result<f64> {
    Ok(Spectrometer::new(*vipa, *layout)?.intensity(x_um, y_um, lambda_nm))
}

/// Free spectral range c / (2 n_r t cosθ), GHz.
pub fn fsr(vipa: &VipaSpec, layout: &OpticalLayout) -> f64 {
    let th = layout.theta_ext(vipa);
    SPEED_OF_LIGHT / (2.0 * vipa.refractive_index * vipa.thickness_mm * MM * th.cos()) / GHZ
}

/// Frequency resolution c(1−Rr) / (2π n_r t cosθ √(Rr)), MHz.
pub fn fwhm_freq(vipa: &VipaSpec, layout: &OpticalLayout) -> f64 {
    fwhm_freq_at(vipa, layout.theta_ext(vipa).cos())
}

pub(crate) fn fwhm_freq_at(vipa: &VipaSpec, cos_theta: f64) -> f64 {
    let rr = vipa.rr();
    SPEED_OF_LIGHT * (1.0 - rr)
        / (2.0 * PI * vipa.refractive_index * vipa.thickness_mm * MM * cos_theta * rr.sqrt())
        / MHZ
}

/// Linear dispersion coefficient tanθ_in cosθ / (n_r cosθ_in).
pub(crate) fn linear_dispersion_coeff(vipa: &VipaSpec, theta_in_rad: f64) -> f64 {
    let n = vipa.refractive_index;
    theta_in_rad.tan() * (n * theta_in_rad).cos() / (n * theta_in_rad.cos())
}

/// Wavelength shift (pm) of the intensity maximum at focal-plane position `x_um`.
pub fn dispersion_shift(vipa: &VipaSpec, layout: &OpticalLayout, x_um: f64) -> f64 {
    let n = vipa.refractive_index;
    let a = linear_dispersion_coeff(vipa, layout.theta_in_rad);
    let xf = x_um * UM / (layout.f_x_mm * MM);
    let lambda0 = layout.lambda0_nm * NM;
    -lambda0 * (a * xf + xf * xf / (2.0 * n * n)) / PM
}

/// Frequency shift (MHz) mapped to `x_um`; the frequency form of [`dispersion_shift`].
pub fn dispersion_frequency_shift(vipa: &VipaSpec, layout: &OpticalLayout, x_um: f64) -> f64 {
    units::wavelength_shift_to_frequency(dispersion_shift(vipa, layout, x_um), layout.lambda0_nm)
}

/// Inverse of [`dispersion_frequency_shift`]: the root nearest x = 0.
pub fn position_for_detuning(vipa: &VipaSpec, layout: &OpticalLayout, detuning_mhz: f64) -> f64 {
    let n = vipa.refractive_index;
    let a = linear_dispersion_coeff(vipa, layout.theta_in_rad);
    // a·s + s²/(2n²) = D with s = x/f_x and D = λ0 Δν / c.
    let d = layout.lambda0_nm * NM * detuning_mhz * MHZ / SPEED_OF_LIGHT;
    let q = 1.0 / (2.0 * n * n);
    let disc = (a * a + 4.0 * q * d).max(0.0);
    let s = 2.0 * d / (a + disc.sqrt());
    s * layout.f_x_mm * MM / UM
}

/// Evenly spaced axis from `lo` with spacing `step`, ending at or before `hi`.
pub(crate) fn axis(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("resolution {step} must be > 0")));
    }
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate range [{lo}, {hi}]")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if n > 50_000_000 {
        return Err(Error::InvalidArgument(format!("{n} samples requested")));
    }
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

/// Golden-section search for the maximum of a unimodal `f` on `[a, b]`.
pub(crate) fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Sampled focal-plane intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityGrid {
    pub x_coords: Vec<f64>,
    pub y_coords: Vec<f64>,
    /// `values[iy][ix]`
    pub values: Vec<Vec<f64>>,
}

impl IntensityGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_um,y_um,intensity\n");
        for (iy, y) in self.y_coords.iter().enumerate() {
            for (ix, x) in self.x_coords.iter().enumerate() {
                let _ = writeln!(out, "{x:.16e},{y:.16e},{:.16e}", self.values[iy][ix]);
            }
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.values.iter().flatten().sum()
    }
}

/// y = 0 slice of the focal-plane intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityProfile {
    pub x_coords: Vec<f64>,
    pub values: Vec<f64>,
}

impl IntensityProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_um,intensity\n");
        for (x, v) in self.x_coords.iter().zip(&self.values) {
            let _ = writeln!(out, "{x:.16e},{v:.16e}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("x_um,intensity") => {}
            other => {
                return Err(Error::MalformedInput(format!("unexpected header {other:?}")));
            }
        }
        let mut x_coords = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut it = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                    Error::MalformedInput(format!("line {}: cannot parse {line:?}", i + 2))
                })
            };
            x_coords.push(parse(it.next())?);
            values.push(parse(it.next())?);
        }
        Ok(IntensityProfile { x_coords, values })
    }

    /// Position of the largest sample.
    pub fn argmax(&self) -> f64 {
        let (i, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.x_coords[i]
    }

    /// Full width at half maximum, with linear interpolation of the crossings.
    pub fn fwhm(&self) -> Result<f64> {
        profile_fwhm(&self.x_coords, &self.values)
    }
}

/// FWHM of a sampled single-peaked profile.
pub fn profile_fwhm(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let (imax, &ymax) = ys
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::InvalidArgument("empty profile".into()))?;
    let half = ymax / 2.0;
    let cross = |i0: usize, i1: usize| xs[i0] + (half - ys[i0]) * (xs[i1] - xs[i0]) / (ys[i1] - ys[i0]);
    let left = (1..=imax).rev().find(|&i| ys[i - 1] < half).map(|i| cross(i - 1, i));
    let right = (imax..ys.len() - 1).find(|&i| ys[i + 1] < half).map(|i| cross(i, i + 1));
    match (left, right) {
        (Some(l), Some(r)) => Ok(r - l),
        _ => Err(Error::InvalidArgument(
            "profile does not fall below half maximum on both sides".into(),
        )),
    }
}

/// Output intensity on a rectangular grid with spacing `resolution_um` on both axes.
pub fn intensity_grid(
    vipa: &VipaSpec,
    layout: &OpticalLayout,
    lambda_nm: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution_um: f64,
) -> Result<IntensityGrid> {
    let model = Spectrometer::new(*vipa, *layout)?;
    let x_coords = axis(x_range.0, x_range.1, resolution_um)?;
    let y_coords = axis(y_range.0, y_range.1, resolution_um)?;
    let values = y_coords
        .iter()
        .map(|&y| x_coords.iter().map(|&x| model.intensity(x, y, lambda_nm)).collect())
        .collect();
    Ok(IntensityGrid {
        x_coords,
        y_coords,
        values,
    })
}

/// y = 0 intensity profile over `x_range` at spacing `resolution_um`.
pub fn intensity_profile(
    vipa: &VipaSpec,
    layout: &OpticalLayout,
    lambda_nm: f64,
    x_range: (f64, f64),
    resolution_um: f64,
) -> Result<IntensityProfile> {
    let model = Spectrometer::new(*vipa, *layout)?;
    let x_coords = axis(x_range.0, x_range.1, resolution_um)?;
    let values = x_coords
        .iter()
        .map(|&x| model.intensity(x, 0.0, lambda_nm))
        .collect();
    Ok(IntensityProfile { x_coords, values })
}
