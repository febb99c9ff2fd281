//! Inversion of the spectrometer design relations.
//!
//! Given an etalon and design targets this module picks the incidence angle
//! and resonance order, the x focusing length that maps one mode spacing onto
//! one detector pitch, the input focal lengths that avoid clipping at the
//! entrance window, the largest y focal length that keeps the spot inside one
//! element row, and the etalon thickness needed for a target resolution.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{
    self, linear_dispersion_coeff, OpticalLayout, Spectrometer, VipaSpec, MAX_THETA_IN_RAD,
};
use crate::units::{MHZ, MM, NM, SPEED_OF_LIGHT, UM};

/// Default bisection tolerance for the f_in endpoints, mm.
pub const FIN_TOLERANCE_MM: f64 = 0.1;

/// How the resonance condition m·λ0 = 2 t n_r cosθ_in is met.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ResonanceMode {
    /// Keep the target angle and trim the etalon thickness (by at most
    /// λ0/(4 n_r)) to the nearest integer order.
    #[default]
    TrimThickness,
    /// Keep the nominal thickness and move the angle to the exact order
    /// closest to the target, searching within ±`half_width_rad`.
    Snap { half_width_rad: f64 },
}

/// Targets for one spectrometer design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignGoal {
    pub lambda0_nm: f64,
    /// Frequency spacing between neighbouring modes.
    pub delta_nu_mhz: f64,
    /// Focal-plane shift wanted per mode spacing.
    pub pitch_um: f64,
    pub fwhm_target_mhz: Option<f64>,
    pub beam_radius_mm: f64,
    /// Detector element height the y spot has to fit into.
    pub y_element_um: f64,
    pub theta_in_target_rad: f64,
    #[serde(default)]
    pub resonance: ResonanceMode,
    /// A concrete f_in to check against the clipping interval.
    pub f_in_candidate_mm: Option<f64>,
}

impl DesignGoal {
    /// Targets of the 6.74 mm etalon experiment: 120 MHz per 30 µm element.
    pub fn experiment() -> Self {
        DesignGoal {
            lambda0_nm: 605.9773,
            delta_nu_mhz: 120.0,
            pitch_um: 30.0,
            fwhm_target_mhz: None,
            beam_radius_mm: 1.0,
            y_element_um: 30.0,
            theta_in_target_rad: 0.68f64.to_radians(),
            resonance: ResonanceMode::TrimThickness,
            f_in_candidate_mm: Some(400.0),
        }
    }

    /// Targets of the 16.5 mm redesign.
    pub fn redesign() -> Self {
        DesignGoal {
            theta_in_target_rad: 0.30f64.to_radians(),
            f_in_candidate_mm: Some(498.0),
            ..Self::experiment()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda0_nm", self.lambda0_nm),
            ("delta_nu_mhz", self.delta_nu_mhz),
            ("pitch_um", self.pitch_um),
            ("beam_radius_mm", self.beam_radius_mm),
            ("y_element_um", self.y_element_um),
            ("theta_in_target", self.theta_in_target_rad),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("{v} must be > 0")));
            }
        }
        if self.theta_in_target_rad > MAX_THETA_IN_RAD {
            return Err(Error::InvalidLayout(format!(
                "theta_in target {} rad exceeds {MAX_THETA_IN_RAD} rad",
                self.theta_in_target_rad
            )));
        }
        if let Some(f) = self.fwhm_target_mhz {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::param("fwhm_target_mhz", "must be > 0"));
            }
        }
        if let ResonanceMode::Snap { half_width_rad } = self.resonance {
            if !(half_width_rad > 0.0) {
                return Err(Error::param("resonance.half_width", "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Admissible input focal lengths, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinInterval {
    pub min_mm: f64,
    pub max_mm: f64,
}

impl FinInterval {
    pub fn contains(&self, f_in_mm: f64) -> bool {
        f_in_mm >= self.min_mm && f_in_mm <= self.max_mm
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min_mm + self.max_mm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignResult {
    pub theta_in_rad: f64,
    /// Resonance order at the focal-plane origin.
    pub m: u64,
    pub f_x_mm: f64,
    pub f_in_interval: FinInterval,
    pub f_y_max_mm: f64,
    /// Thickness for the requested frequency resolution, if one was given.
    pub t_required_mm: Option<f64>,
    /// Etalon for which the returned (θ_in, m) satisfies resonance exactly.
    pub vipa: VipaSpec,
    pub diagnostics: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct DesignJson<'a> {
    theta_in_deg: f64,
    m: u64,
    f_x_mm: f64,
    f_in_min_mm: f64,
    f_in_max_mm: f64,
    f_y_max_mm: f64,
    t_mm: Option<f64>,
    diagnostics: BTreeMap<&'a str, f64>,
}

impl DesignResult {
    pub fn diagnostic(&self, name: &str) -> Option<f64> {
        self.diagnostics
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }

    /// Relative residual of m·λ0 = 2 t n_r cosθ_in for the returned pair.
    pub fn resonance_residual(&self, lambda0_nm: f64) -> f64 {
        resonance_residual(&self.vipa, lambda0_nm, self.theta_in_rad, self.m)
    }

    /// Layout that realises this design with the given input focal length.
    pub fn layout(&self, goal: &DesignGoal, f_in_mm: f64) -> OpticalLayout {
        OpticalLayout {
            lambda0_nm: goal.lambda0_nm,
            beam_radius_mm: goal.beam_radius_mm,
            theta_in_rad: self.theta_in_rad,
            f_in_mm,
            f_x_mm: self.f_x_mm,
            f_y_mm: self.f_y_max_mm,
        }
    }

    pub fn to_json(&self) -> String {
        let doc = DesignJson {
            theta_in_deg: self.theta_in_rad.to_degrees(),
            m: self.m,
            f_x_mm: self.f_x_mm,
            f_in_min_mm: self.f_in_interval.min_mm,
            f_in_max_mm: self.f_in_interval.max_mm,
            f_y_max_mm: self.f_y_max_mm,
            t_mm: self.t_required_mm,
            diagnostics: self
                .diagnostics
                .iter()
                .map(|(k, v)| (k.as_str(), *v))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("design result is always serialisable")
    }
}

pub fn resonance_residual(vipa: &VipaSpec, lambda0_nm: f64, theta_in_rad: f64, m: u64) -> f64 {
    let lhs = m as f64 * lambda0_nm * NM;
    let rhs = 2.0 * vipa.thickness_mm * MM * vipa.refractive_index * theta_in_rad.cos();
    (lhs - rhs).abs() / lhs
}

/// Angle at which order `m` is resonant: arccos(m/M0), with M0 = 2 t n_r / λ0,
/// evaluated through the half-angle form to keep precision near θ = 0.
fn order_angle(m0: f64, m: f64) -> f64 {
    let delta = (m0 - m) / m0;
    2.0 * (delta / 2.0).sqrt().asin()
}

/// Incidence angle in `[theta_min, theta_max]` at which `lambda0_nm` is
/// exactly resonant, together with its order `m`.
///
/// When several orders fall inside the bracket the one whose angle is
/// closest to the bracket midpoint wins; ties go to the smaller angle.
pub fn solve_incident_angle(
    vipa: &VipaSpec,
    lambda0_nm: f64,
    theta_min: f64,
    theta_max: f64,
) -> Result<(f64, u64)> {
    vipa.validate()?;
    if !(theta_min > 0.0 && theta_min < theta_max && theta_max <= MAX_THETA_IN_RAD) {
        return Err(Error::InvalidArgument(format!(
            "angle bracket [{theta_min}, {theta_max}] must satisfy 0 < min < max <= {MAX_THETA_IN_RAD}"
        )));
    }
    let m0 = 2.0 * vipa.thickness_mm * MM * vipa.refractive_index / (lambda0_nm * NM);
    let m_hi = (m0 * theta_min.cos()).floor();
    let m_lo = (m0 * theta_max.cos()).ceil();
    if m_lo > m_hi {
        let below = if m_hi + 1.0 <= m0 {
            format!("{:.4} deg (m = {})", order_angle(m0, m_hi + 1.0).to_degrees(), m_hi + 1.0)
        } else {
            "none".to_string()
        };
        let above = format!("{:.4} deg (m = {})", order_angle(m0, m_hi).to_degrees(), m_hi);
        return Err(Error::infeasible(
            "resonance order",
            format!(
                "no integer order resonates between {:.4} and {:.4} deg; nearest candidates {below} and {above}",
                theta_min.to_degrees(),
                theta_max.to_degrees()
            ),
        ));
    }
    let mid = 0.5 * (theta_min + theta_max);
    let m_mid = m0 * mid.cos();
    let mut best: Option<(f64, f64)> = None;
    for m in [m_mid.floor(), m_mid.ceil()] {
        let m = m.clamp(m_lo, m_hi);
        let th = order_angle(m0, m);
        let better = match best {
            None => true,
            Some((bt, _)) => {
                let (d, bd) = ((th - mid).abs(), (bt - mid).abs());
                d < bd || (d == bd && th < bt)
            }
        };
        if better {
            best = Some((th, m));
        }
    }
    let (theta, m) = best.expect("at least one candidate");
    Ok((theta, m as u64))
}

/// Focal length f_x that maps `delta_nu_mhz` onto a shift of `pitch_um`.
///
/// The dispersion relation is quadratic in 1/f_x; for a positive pitch and
/// angle it has exactly one positive root, returned here.
pub fn solve_fx(
    vipa: &VipaSpec,
    theta_in_rad: f64,
    lambda0_nm: f64,
    delta_nu_mhz: f64,
    pitch_um: f64,
) -> Result<f64> {
    if !(delta_nu_mhz > 0.0 && pitch_um > 0.0) {
        return Err(Error::InvalidArgument(
            "delta_nu and pitch must be positive".into(),
        ));
    }
    let n = vipa.refractive_index;
    let x = pitch_um * UM;
    let target = lambda0_nm * NM * delta_nu_mhz * MHZ / SPEED_OF_LIGHT;
    // a u² + b u − target = 0 with u = 1/f_x.
    let a = x * x / (2.0 * n * n);
    let b = linear_dispersion_coeff(vipa, theta_in_rad) * x;
    let disc = b * b + 4.0 * a * target;
    let denom = b + disc.sqrt();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::infeasible(
            "x focal length",
            "dispersion relation has no positive root",
        ));
    }
    let u = 2.0 * target / denom;
    Ok(1.0 / u / MM)
}

/// Clipping margin t·tanθ_in − w0·sqrt(1 + λ²t²/(π² w0⁴ n_r²)) in mm, where
/// w0 = f_in λ/(π W) is the waist on the input plate. Non-negative means the
/// beam passes the entrance window unclipped.
pub fn clipping_margin(
    vipa: &VipaSpec,
    theta_in_rad: f64,
    lambda0_nm: f64,
    beam_radius_mm: f64,
    f_in_mm: f64,
) -> f64 {
    let t = vipa.thickness_mm * MM;
    let n = vipa.refractive_index;
    let lambda = lambda0_nm * NM;
    let w0 = f_in_mm * MM * lambda / (PI * beam_radius_mm * MM);
    let k = lambda * t / (PI * n);
    let rhs = w0 * (1.0 + k * k / (w0 * w0 * w0 * w0)).sqrt();
    (t * theta_in_rad.tan() - rhs) / MM
}

/// Interval of input focal lengths satisfying the clipping condition,
/// bisected to [`FIN_TOLERANCE_MM`]. `None` when no f_in works.
pub fn solve_fin_interval(
    vipa: &VipaSpec,
    theta_in_rad: f64,
    lambda0_nm: f64,
    beam_radius_mm: f64,
) -> Result<Option<FinInterval>> {
    solve_fin_interval_with_tol(vipa, theta_in_rad, lambda0_nm, beam_radius_mm, FIN_TOLERANCE_MM)
}

pub fn solve_fin_interval_with_tol(
    vipa: &VipaSpec,
    theta_in_rad: f64,
    lambda0_nm: f64,
    beam_radius_mm: f64,
    tol_mm: f64,
) -> Result<Option<FinInterval>> {
    if !(beam_radius_mm > 0.0) {
        return Err(Error::param("beam_radius_mm", "must be > 0"));
    }
    if !(tol_mm > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be > 0".into()));
    }
    let g = |f: f64| clipping_margin(vipa, theta_in_rad, lambda0_nm, beam_radius_mm, f);
    // The right-hand side is minimal at w0² = λt/(π n_r); the margin is
    // unimodal in f_in around the corresponding focal length.
    let lambda = lambda0_nm * NM;
    let k = lambda * vipa.thickness_mm * MM / (PI * vipa.refractive_index);
    let f_star = PI * beam_radius_mm * MM * k.sqrt() / lambda / MM;
    if g(f_star) < 0.0 {
        return Ok(None);
    }
    let mut lo = f_star / 2.0;
    while g(lo) >= 0.0 {
        lo /= 2.0;
    }
    let mut hi = f_star * 2.0;
    while g(hi) >= 0.0 {
        hi *= 2.0;
    }
    // Stop at a quarter of the tolerance and report the midpoint, so the
    // endpoints are within tol/8 of the roots.
    let bisect = |mut infeasible: f64, mut feasible: f64| {
        while (feasible - infeasible).abs() > tol_mm / 4.0 {
            let mid = 0.5 * (feasible + infeasible);
            if g(mid) >= 0.0 {
                feasible = mid;
            } else {
                infeasible = mid;
            }
        }
        0.5 * (feasible + infeasible)
    };
    Ok(Some(FinInterval {
        min_mm: bisect(lo, f_star),
        max_mm: bisect(hi, f_star),
    }))
}

/// Thickness that gives the frequency resolution `fwhm_target_mhz`. The
/// thickness field of `vipa` is ignored.
pub fn solve_thickness(vipa: &VipaSpec, theta_in_rad: f64, fwhm_target_mhz: f64) -> Result<f64> {
    if !(fwhm_target_mhz > 0.0) {
        return Err(Error::param("fwhm_target_mhz", "must be > 0"));
    }
    let rr = vipa.rr();
    if !(rr < 1.0) {
        return Err(Error::param("reflectivity", "Rr must be < 1"));
    }
    let cos_theta = (vipa.refractive_index * theta_in_rad).cos();
    Ok(SPEED_OF_LIGHT * (1.0 - rr)
        / (2.0 * PI * vipa.refractive_index * cos_theta * rr.sqrt() * fwhm_target_mhz * MHZ)
        / MM)
}

/// Largest y focal length whose 1/e² spot (radius λ f_y/(√π W) from the y
/// envelope of the intensity model) fits inside `y_element_um`.
pub fn f_y_max(lambda0_nm: f64, beam_radius_mm: f64, y_element_um: f64) -> f64 {
    let half = 0.5 * y_element_um * UM;
    half * PI.sqrt() * beam_radius_mm * MM / (lambda0_nm * NM) / MM
}

/// Complete design for `goal` on the etalon `vipa`.
pub fn full_design(vipa: &VipaSpec, goal: &DesignGoal) -> Result<DesignResult> {
    vipa.validate()?;
    goal.validate()?;
    let lambda0 = goal.lambda0_nm;

    let (theta_in, m, vipa_res) = match goal.resonance {
        ResonanceMode::TrimThickness => {
            let (m, tuned) = vipa.tuned_to_resonance(lambda0, goal.theta_in_target_rad);
            (goal.theta_in_target_rad, m, tuned)
        }
        ResonanceMode::Snap { half_width_rad } => {
            let lo = (goal.theta_in_target_rad - half_width_rad).max(1e-6);
            let hi = (goal.theta_in_target_rad + half_width_rad).min(MAX_THETA_IN_RAD);
            let (th, m) = solve_incident_angle(vipa, lambda0, lo, hi)?;
            (th, m, *vipa)
        }
    };

    let probe = OpticalLayout {
        lambda0_nm: lambda0,
        beam_radius_mm: goal.beam_radius_mm,
        theta_in_rad: theta_in,
        f_in_mm: 1.0,
        f_x_mm: 1.0,
        f_y_mm: 1.0,
    };
    let fsr_mhz = optics::fsr(&vipa_res, &probe) * 1e3;
    if goal.delta_nu_mhz >= fsr_mhz {
        return Err(Error::infeasible(
            "free spectral range",
            format!(
                "mode spacing {} MHz is not below the FSR of {:.1} MHz",
                goal.delta_nu_mhz, fsr_mhz
            ),
        ));
    }

    let f_x = solve_fx(&vipa_res, theta_in, lambda0, goal.delta_nu_mhz, goal.pitch_um)?;
    let interval = solve_fin_interval(&vipa_res, theta_in, lambda0, goal.beam_radius_mm)?
        .ok_or_else(|| {
            Error::infeasible(
                "clipping",
                format!(
                    "no input focal length passes the entrance window at theta_in = {:.4} deg",
                    theta_in.to_degrees()
                ),
            )
        })?;
    let f_y = f_y_max(lambda0, goal.beam_radius_mm, goal.y_element_um);
    let t_required = goal
        .fwhm_target_mhz
        .map(|f| solve_thickness(vipa, theta_in, f))
        .transpose()?;

    let f_in = goal
        .f_in_candidate_mm
        .filter(|f| interval.contains(*f))
        .unwrap_or_else(|| interval.midpoint());
    let layout = OpticalLayout {
        f_in_mm: f_in,
        f_x_mm: f_x,
        f_y_mm: f_y,
        ..probe
    };
    let model = Spectrometer::new(vipa_res, layout)?;
    let fwhm_mhz = optics::fwhm_freq(&vipa_res, &layout);
    let (beam_fwhm, crosstalk) = beam_diagnostics(&model, goal.pitch_um, fwhm_mhz, goal.delta_nu_mhz)?;

    let mut diagnostics = vec![
        ("fwhm_freq_mhz".to_string(), fwhm_mhz),
        ("fsr_ghz".to_string(), fsr_mhz / 1e3),
        ("finesse".to_string(), vipa_res.finesse()),
        ("virtual_sources".to_string(), model.n_sources() as f64),
        ("beam_fwhm_x_um".to_string(), beam_fwhm),
        ("crosstalk_fraction".to_string(), crosstalk),
        ("theta_ext_deg".to_string(), (vipa_res.refractive_index * theta_in).to_degrees()),
        ("resonant_thickness_mm".to_string(), vipa_res.thickness_mm),
        (
            "thickness_trim_nm".to_string(),
            (vipa_res.thickness_mm - vipa.thickness_mm) * 1e6,
        ),
        (
            "resonance_residual".to_string(),
            resonance_residual(&vipa_res, lambda0, theta_in, m),
        ),
        ("f_in_used_mm".to_string(), f_in),
    ];
    if let Some(c) = goal.f_in_candidate_mm {
        diagnostics.push(("f_in_candidate_mm".to_string(), c));
        diagnostics.push((
            "f_in_candidate_within_interval".to_string(),
            if interval.contains(c) { 1.0 } else { 0.0 },
        ));
    }

    Ok(DesignResult {
        theta_in_rad: theta_in,
        m,
        f_x_mm: f_x,
        f_in_interval: interval,
        f_y_max_mm: f_y,
        t_required_mm: t_required,
        vipa: vipa_res,
        diagnostics,
    })
}

/// x-FWHM of the λ0 spot and the fraction of its power outside the central
/// element, both from a y = 0 scan over ±6 pitches.
fn beam_diagnostics(
    model: &Spectrometer,
    pitch_um: f64,
    fwhm_mhz: f64,
    delta_nu_mhz: f64,
) -> Result<(f64, f64)> {
    let expected_fwhm = pitch_um * fwhm_mhz / delta_nu_mhz;
    let half_span = (6.0 * pitch_um).max(4.0 * expected_fwhm);
    let step = (expected_fwhm / 400.0).min(pitch_um / 100.0);
    let lambda = model.layout.lambda0_nm;
    let profile = optics::intensity_profile(
        &model.vipa,
        &model.layout,
        lambda,
        (-half_span, half_span),
        step,
    )?;
    let fwhm = profile.fwhm()?;

    let window = 6.0 * pitch_um;
    let (mut total, mut central) = (0.0, 0.0);
    for (w, pair) in profile.x_coords.windows(2).zip(profile.values.windows(2)) {
        let mid = 0.5 * (w[0] + w[1]);
        if mid.abs() > window {
            continue;
        }
        let area = 0.5 * (pair[0] + pair[1]) * (w[1] - w[0]);
        total += area;
        if mid.abs() <= pitch_um / 2.0 {
            central += area;
        }
    }
    Ok((fwhm, 1.0 - central / total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::dispersion_frequency_shift;
    use crate::units::rad;
    use proptest::prelude::*;

    /// Every integer order whose angle lies in the bracket, by brute-force
    /// enumeration over all m up to M0.
    fn enumerate_orders(vipa: &VipaSpec, lambda0_nm: f64, lo: f64, hi: f64) -> Vec<(u64, f64)> {
        let m0 = 2.0 * vipa.thickness_mm * 1e-3 * vipa.refractive_index / (lambda0_nm * 1e-9);
        let top = m0.floor() as u64;
        (top.saturating_sub(2000)..=top)
            .filter_map(|m| {
                let c = m as f64 / m0;
                let th = c.acos();
                (th >= lo && th <= hi).then_some((m, th))
            })
            .collect()
    }

    #[test]
    fn incident_angle_bracket() {
        let vipa = VipaSpec::experiment();
        let (th, m) = solve_incident_angle(&vipa, 605.9773, rad(0.2), rad(1.2)).unwrap();
        assert!((th.to_degrees() - 0.68).abs() <= 0.1, "{}", th.to_degrees());
        assert!(resonance_residual(&vipa, 605.9773, th, m) < 1e-12);
        let orders = enumerate_orders(&vipa, 605.9773, rad(0.2), rad(1.2));
        assert!(orders.iter().any(|&(mm, _)| mm == m));
    }

    #[test]
    fn incident_angle_constructed_resonance() {
        let vipa = VipaSpec::experiment();
        let m = 32_000u64;
        let lambda0 = 2.0 * 6.74e-3 * 1.46 * rad(0.5).cos() / m as f64 * 1e9;
        let (th, got_m) = solve_incident_angle(&vipa, lambda0, rad(0.45), rad(0.55)).unwrap();
        assert_eq!(got_m, m);
        assert!((th - rad(0.5)).abs() < 1e-9);
    }

    #[test]
    fn incident_angle_matches_enumeration_oracle() {
        let vipa = VipaSpec::experiment();
        let orders = enumerate_orders(&vipa, 605.9773, rad(0.2), rad(1.2));
        // Frozen from the enumeration: orders 32477..32471 fall in the bracket.
        assert_eq!(orders.first().unwrap().0, 32471);
        assert_eq!(orders.last().unwrap().0, 32477);
        for &(m, th) in &orders {
            assert!(resonance_residual(&vipa, 605.9773, th, m) < 1e-12);
            let (th2, m2) = solve_incident_angle(&vipa, 605.9773, th - 1e-5, th + 1e-5).unwrap();
            assert_eq!(m2, m);
            assert!((th2 - th).abs() < 1e-10);
        }
    }

    #[test]
    fn incident_angle_infeasible_names_candidates() {
        let vipa = VipaSpec::experiment();
        // Between the m=32476 (0.6006°) and m=32475 (0.7502°) orders.
        let err = solve_incident_angle(&vipa, 605.9773, rad(0.62), rad(0.70)).unwrap_err();
        match err {
            Error::Infeasible { constraint, detail } => {
                assert_eq!(constraint, "resonance order");
                assert!(detail.contains("32476") && detail.contains("32475"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fx_reference_value() {
        let vipa = VipaSpec::experiment();
        let f = solve_fx(&vipa, rad(0.68), 605.9773, 120.0, 30.0).unwrap();
        assert!((f - 1016.0).abs() / 1016.0 < 0.02, "{f}");
    }

    #[test]
    fn fx_round_trip_and_linear_scaling() {
        let vipa = VipaSpec::experiment();
        let f1 = solve_fx(&vipa, rad(0.68), 605.9773, 120.0, 30.0).unwrap();
        let f2 = solve_fx(&vipa, rad(0.68), 605.9773, 120.0, 60.0).unwrap();
        assert!((f2 / f1 - 2.0).abs() < 0.005);
        let layout = OpticalLayout {
            f_x_mm: f1,
            theta_in_rad: rad(0.68),
            ..OpticalLayout::experiment()
        };
        let nu = dispersion_frequency_shift(&vipa, &layout, 30.0);
        assert!((nu - 120.0).abs() / 120.0 < 1e-9);
    }

    #[test]
    fn fx_decreases_with_spacing() {
        let vipa = VipaSpec::experiment();
        let fs: Vec<f64> = (1..=10)
            .map(|k| solve_fx(&vipa, rad(0.68), 605.9773, 30.0 * k as f64, 30.0).unwrap())
            .collect();
        assert!(fs.windows(2).all(|w| w[1] < w[0]));
    }

    /// Closed-form roots of the clipping condition: with K = λt/(π n_r) and
    /// H = t tanθ_in, the boundary is w0⁴ − H² w0² + K² = 0.
    fn fin_closed_form(vipa: &VipaSpec, th: f64, l_nm: f64, w_mm: f64) -> (f64, f64) {
        let l = l_nm * 1e-9;
        let t = vipa.thickness_mm * 1e-3;
        let h = t * th.tan();
        let k = l * t / (PI * vipa.refractive_index);
        let d = (h.powi(4) - 4.0 * k * k).sqrt();
        let to_f = |w2: f64| PI * w_mm * 1e-3 * w2.sqrt() / l * 1e3;
        (to_f((h * h - d) / 2.0), to_f((h * h + d) / 2.0))
    }

    #[test]
    fn fin_interval_reference_values() {
        let vipa = VipaSpec::experiment();
        let iv = solve_fin_interval(&vipa, rad(0.68), 605.9773, 1.0).unwrap().unwrap();
        assert!((iv.min_mm - 57.0).abs() / 57.0 < 0.10, "{iv:?}");
        assert!((iv.max_mm - 415.0).abs() / 415.0 < 0.10, "{iv:?}");
        let (a, b) = fin_closed_form(&vipa, rad(0.68), 605.9773, 1.0);
        assert!((iv.min_mm - a).abs() < FIN_TOLERANCE_MM);
        assert!((iv.max_mm - b).abs() < FIN_TOLERANCE_MM);
    }

    #[test]
    fn fin_interval_brackets_scan_sign_changes() {
        let vipa = VipaSpec::experiment();
        for w in [0.5, 1.0, 2.0, 5.0] {
            let scan: Vec<bool> = (1..=2000)
                .map(|f| clipping_margin(&vipa, rad(0.68), 605.9773, w, f as f64) >= 0.0)
                .collect();
            let changes: Vec<usize> = scan.windows(2).enumerate().filter(|(_, p)| p[0] != p[1]).map(|(i, _)| i + 1).collect();
            match solve_fin_interval(&vipa, rad(0.68), 605.9773, w).unwrap() {
                Some(iv) => {
                    // Scan points are f = index + 1 mm.
                    let first_ok = scan.iter().position(|&b| b).unwrap() + 1;
                    let last_ok = scan.iter().rposition(|&b| b).unwrap() + 1;
                    assert!(iv.min_mm > (first_ok - 1) as f64 && iv.min_mm <= first_ok as f64 + 0.05, "W={w} {iv:?} {first_ok}");
                    if last_ok < 2000 {
                        assert!(iv.max_mm >= last_ok as f64 - 0.05 && iv.max_mm < (last_ok + 1) as f64, "W={w} {iv:?} {last_ok}");
                    }
                    assert!(changes.len() <= 2);
                }
                None => assert!(scan.iter().all(|&b| !b)),
            }
        }
    }

    #[test]
    fn fin_interval_finer_bisection_is_stable() {
        let vipa = VipaSpec::experiment();
        let coarse = solve_fin_interval(&vipa, rad(0.68), 605.9773, 1.0).unwrap().unwrap();
        let fine = solve_fin_interval_with_tol(&vipa, rad(0.68), 605.9773, 1.0, FIN_TOLERANCE_MM / 10.0)
            .unwrap()
            .unwrap();
        assert!((coarse.min_mm - fine.min_mm).abs() < 0.05);
        assert!((coarse.max_mm - fine.max_mm).abs() < 0.05);
    }

    #[test]
    fn fin_interval_shrinks_with_smaller_lhs() {
        let vipa = VipaSpec::experiment();
        let full = solve_fin_interval(&vipa, rad(0.68), 605.9773, 1.0).unwrap().unwrap();
        // Halving t·tanθ_in through the angle.
        let th_half = (rad(0.68).tan() * 0.5).atan();
        match solve_fin_interval(&vipa, th_half, 605.9773, 1.0).unwrap() {
            Some(iv) => assert!(iv.min_mm >= full.min_mm && iv.max_mm <= full.max_mm),
            None => {}
        }
        assert!(solve_fin_interval(&vipa, rad(0.1), 605.9773, 1.0).unwrap().is_none());
    }

    #[test]
    fn thickness_reference_values_and_round_trip() {
        let vipa = VipaSpec::experiment();
        let t120 = solve_thickness(&vipa, 0.0, 120.0).unwrap();
        assert!((t120 - 16.5).abs() / 16.5 < 0.01, "{t120}");
        let t294 = solve_thickness(&vipa, 0.0, 294.0).unwrap();
        assert!((t294 - 6.74).abs() / 6.74 < 0.01, "{t294}");
    }

    #[test]
    fn f_y_bound_admits_lab_choice() {
        let f = f_y_max(605.9773, 1.0, 30.0);
        assert!(f >= 40.0, "{f}");
        // The 1/e² diameter at f_y_max equals the element height.
        let model = Spectrometer::new(
            VipaSpec::experiment(),
            OpticalLayout {
                f_y_mm: f,
                ..OpticalLayout::experiment()
            },
        )
        .unwrap();
        let e = model.envelope_y(15.0, 605.9773);
        assert!((e - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn full_design_current_setup() {
        let r = full_design(&VipaSpec::experiment(), &DesignGoal::experiment()).unwrap();
        assert!((r.theta_in_rad.to_degrees() - 0.68).abs() <= 0.1);
        assert!((r.f_x_mm - 1016.0).abs() / 1016.0 <= 0.02);
        assert!(r.resonance_residual(605.9773) < 1e-12);
        assert_eq!(r.diagnostic("f_in_candidate_within_interval"), Some(1.0));
        let fwhm_x = r.diagnostic("beam_fwhm_x_um").unwrap();
        assert!((fwhm_x - 73.0).abs() < 5.0, "{fwhm_x}");
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["theta_in_deg", "m", "f_x_mm", "f_in_min_mm", "f_in_max_mm", "f_y_max_mm", "t_mm", "diagnostics"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn full_design_snap_mode_uses_nominal_thickness() {
        let goal = DesignGoal {
            resonance: ResonanceMode::Snap {
                half_width_rad: rad(0.1),
            },
            ..DesignGoal::experiment()
        };
        let r = full_design(&VipaSpec::experiment(), &goal).unwrap();
        assert_eq!(r.vipa.thickness_mm, 6.74);
        // Exact orders near 0.68° at the nominal thickness: 0.6006° and 0.7502°.
        assert!((r.theta_in_rad.to_degrees() - 0.7502).abs() < 1e-3);
        assert!(r.resonance_residual(605.9773) < 1e-12);
    }

    #[test]
    fn full_design_flags_redesign_f_in() {
        let r = full_design(&VipaSpec::experiment().with_thickness(16.5), &DesignGoal::redesign()).unwrap();
        assert_eq!(r.diagnostic("f_in_candidate_within_interval"), Some(0.0));
    }

    #[test]
    fn full_design_rejects_spacing_above_fsr() {
        let goal = DesignGoal {
            delta_nu_mhz: 20_000.0,
            ..DesignGoal::experiment()
        };
        match full_design(&VipaSpec::experiment(), &goal) {
            Err(Error::Infeasible { constraint, .. }) => assert_eq!(constraint, "free spectral range"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_design_reports_required_thickness() {
        let goal = DesignGoal {
            fwhm_target_mhz: Some(120.0),
            ..DesignGoal::experiment()
        };
        let r = full_design(&VipaSpec::experiment(), &goal).unwrap();
        let t = r.t_required_mm.unwrap();
        assert!((t - 16.5).abs() / 16.5 < 0.01);
    }

    proptest! {
        #[test]
        fn thickness_inverts_fwhm(target in 20.0f64..2000.0, th_deg in 0.1f64..2.0) {
            let vipa = VipaSpec::experiment();
            let t = solve_thickness(&vipa, rad(th_deg), target).unwrap();
            let layout = OpticalLayout { theta_in_rad: rad(th_deg), ..OpticalLayout::experiment() };
            let back = optics::fwhm_freq(&vipa.with_thickness(t), &layout);
            prop_assert!((back - target).abs() / target < 1e-12);
        }

        #[test]
        fn fx_forward_residual(
            th_deg in 0.1f64..3.0,
            dnu in 10.0f64..2000.0,
            pitch in 5.0f64..200.0,
            t in 2.0f64..30.0,
        ) {
            let vipa = VipaSpec::experiment().with_thickness(t);
            let f = solve_fx(&vipa, rad(th_deg), 605.9773, dnu, pitch).unwrap();
            let layout = OpticalLayout { f_x_mm: f, theta_in_rad: rad(th_deg), ..OpticalLayout::experiment() };
            let nu = dispersion_frequency_shift(&vipa, &layout, pitch);
            prop_assert!((nu - dnu).abs() / dnu < 1e-9);
        }

        #[test]
        fn incident_angle_residual(lo_deg in 0.1f64..4.0, width in 0.2f64..1.5, t in 1.0f64..25.0) {
            let vipa = VipaSpec::experiment().with_thickness(t);
            let hi_deg = (lo_deg + width).min(5.7);
            if let Ok((th, m)) = solve_incident_angle(&vipa, 605.9773, rad(lo_deg), rad(hi_deg)) {
                prop_assert!(resonance_residual(&vipa, 605.9773, th, m) < 1e-12);
                prop_assert!(th >= rad(lo_deg) - 1e-12 && th <= rad(hi_deg) + 1e-12);
            }
        }
    }
}
