//! Reduction of detection events to time histograms, windowed spatial
//! profiles, Lorentzian fits, spatial shifts and single-shot mode decisions.

use std::fmt::Write as _;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{DetectionEvent, SpadArraySpec};

/// Integration window used for the spatial profiles, ns.
pub const DEFAULT_WINDOW_NS: (f64, f64) = (200.0, 650.0);
/// Floor (dB) reported when the cross term of [`crosstalk_metric`] is zero.
pub const CROSSTALK_FLOOR_DB: f64 = -300.0;

const MAX_ITERATIONS: usize = 500;
const REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeHistogram {
    pub element: usize,
    pub bin_width_ns: u32,
    /// Raw counts per bin; bin `i` starts at `i · bin_width_ns`.
    pub counts: Vec<u64>,
    pub n_pulses: usize,
}

impl TimeHistogram {
    pub fn bin_start(&self, i: usize) -> f64 {
        (i as u64 * self.bin_width_ns as u64) as f64
    }

    pub fn counts_per_pulse(&self) -> Vec<f64> {
        let n = self.n_pulses as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-element histograms with bins of one time-resolution step over
/// `[0, record_ns)`, normalized by `n_pulses` on read.
pub fn build_time_histograms(
    events: &[DetectionEvent],
    n_pulses: usize,
    array: &SpadArraySpec,
    record_ns: f64,
) -> Result<Vec<TimeHistogram>> {
    if n_pulses == 0 {
        return Err(Error::InvalidArgument("n_pulses must be >= 1".into()));
    }
    array.validate()?;
    let width = array.time_resolution_ns;
    let n_bins = (record_ns / width as f64).ceil() as usize;
    let mut hists: Vec<TimeHistogram> = (0..array.n_elements)
        .map(|element| TimeHistogram {
            element,
            bin_width_ns: width,
            counts: vec![0; n_bins],
            n_pulses,
        })
        .collect();
    for (i, e) in events.iter().enumerate() {
        if e.element >= array.n_elements {
            return Err(Error::MalformedInput(format!(
                "event {i}: element {} outside array of {}",
                e.element, array.n_elements
            )));
        }
        let bin = (e.time_tag_ns / width as u64) as usize;
        if bin >= n_bins {
            return Err(Error::MalformedInput(format!(
                "event {i}: time tag {} ns outside the {record_ns} ns record",
                e.time_tag_ns
            )));
        }
        if e.pulse_index >= n_pulses as u64 {
            return Err(Error::MalformedInput(format!(
                "event {i}: pulse index {} but only {n_pulses} pulses",
                e.pulse_index
            )));
        }
        hists[e.element].counts[bin] += 1;
    }
    Ok(hists)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialProfile {
    pub elements: Vec<usize>,
    pub mean_counts_per_pulse: Vec<f64>,
    pub window: (f64, f64),
}

impl SpatialProfile {
    pub fn new(elements: Vec<usize>, mean_counts_per_pulse: Vec<f64>, window: (f64, f64)) -> Result<Self> {
        if elements.len() != mean_counts_per_pulse.len() {
            return Err(Error::InvalidArgument("profile lengths differ".into()));
        }
        Ok(SpatialProfile {
            elements,
            mean_counts_per_pulse,
            window,
        })
    }

    /// Element with the largest value; the first on ties.
    pub fn peak_element(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.mean_counts_per_pulse.iter().enumerate() {
            if v > self.mean_counts_per_pulse[best] {
                best = i;
            }
        }
        self.elements[best]
    }

    pub fn value_at(&self, element: usize) -> f64 {
        self.elements
            .iter()
            .position(|&e| e == element)
            .map_or(0.0, |i| self.mean_counts_per_pulse[i])
    }

    pub fn total(&self) -> f64 {
        self.mean_counts_per_pulse.iter().sum()
    }

    /// Same profile moved by `k` elements.
    pub fn shifted(&self, k: usize) -> Self {
        SpatialProfile {
            elements: self.elements.iter().map(|e| e + k).collect(),
            ..self.clone()
        }
    }
}

fn window_bins(h: &TimeHistogram, window: (f64, f64)) -> impl Iterator<Item = usize> + '_ {
    (0..h.counts.len()).filter(move |&i| {
        let t = h.bin_start(i);
        t >= window.0 && t < window.1
    })
}

fn check_window(histograms: &[TimeHistogram], window: (f64, f64)) -> Result<f64> {
    if histograms.is_empty() {
        return Err(Error::InvalidArgument("no histograms".into()));
    }
    if !(window.0 < window.1) {
        return Err(Error::InvalidArgument(format!("inverted window [{}, {})", window.0, window.1)));
    }
    let h = &histograms[0];
    let record = h.counts.len() as f64 * h.bin_width_ns as f64;
    if window.0 < 0.0 || window.1 > record {
        return Err(Error::InvalidArgument(format!(
            "window [{}, {}) outside the {record} ns record",
            window.0, window.1
        )));
    }
    Ok(record)
}

/// Per-element counts per pulse over bins starting in `[window.0, window.1)`.
pub fn integrate_window(histograms: &[TimeHistogram], window: (f64, f64)) -> Result<SpatialProfile> {
    check_window(histograms, window)?;
    let elements = histograms.iter().map(|h| h.element).collect();
    let values = histograms
        .iter()
        .map(|h| window_bins(h, window).map(|i| h.counts[i]).sum::<u64>() as f64 / h.n_pulses as f64)
        .collect();
    SpatialProfile::new(elements, values, window)
}

/// [`integrate_window`] minus a constant per-bin floor estimated from all
/// bins outside the window, pooled over elements.
pub fn integrate_window_dark_subtracted(histograms: &[TimeHistogram], window: (f64, f64)) -> Result<SpatialProfile> {
    let raw = integrate_window(histograms, window)?;
    let (mut outside_counts, mut outside_bins) = (0u64, 0usize);
    let mut inside_bins = 0usize;
    for h in histograms {
        for (i, &c) in h.counts.iter().enumerate() {
            let t = h.bin_start(i);
            if t >= window.0 && t < window.1 {
                inside_bins += 1;
            } else {
                outside_counts += c;
                outside_bins += 1;
            }
        }
    }
    if outside_bins == 0 {
        return Err(Error::InsufficientData("window covers the whole record, no bins left for the dark floor".into()));
    }
    let n_pulses = histograms[0].n_pulses as f64;
    let per_bin = outside_counts as f64 / outside_bins as f64 / n_pulses;
    let per_element = per_bin * inside_bins as f64 / histograms.len() as f64;
    let values = raw.mean_counts_per_pulse.iter().map(|v| v - per_element).collect();
    SpatialProfile::new(raw.elements, values, window)
}

/// Histograms and window in one step.
pub fn spatial_profile(
    events: &[DetectionEvent],
    n_pulses: usize,
    array: &SpadArraySpec,
    record_ns: f64,
    window: (f64, f64),
) -> Result<SpatialProfile> {
    integrate_window(&build_time_histograms(events, n_pulses, array, record_ns)?, window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Weights 1/max(y, y_min) with y_min the smallest positive value.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    /// Fractional element coordinate of the peak.
    pub center: f64,
    /// Half width at half maximum, elements.
    pub gamma: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub sse: f64,
    pub converged: bool,
    pub iterations: usize,
    pub center_stderr: f64,
    pub gamma_stderr: f64,
    pub amplitude_stderr: f64,
    pub offset_stderr: f64,
    /// SSE after each accepted step, starting with the initial guess.
    #[serde(skip)]
    pub sse_history: Vec<f64>,
}

impl LorentzianFit {
    pub fn eval(&self, e: f64) -> f64 {
        lorentzian(&Vector4::new(self.center, self.gamma, self.amplitude, self.offset), e)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit serializes")
    }
}

fn lorentzian(p: &Vector4<f64>, e: f64) -> f64 {
    let d = e - p[0];
    p[2] * p[1] * p[1] / (d * d + p[1] * p[1]) + p[3]
}

fn gradient(p: &Vector4<f64>, e: f64) -> Vector4<f64> {
    let (c, g, a) = (p[0], p[1], p[2]);
    let d = e - c;
    let den = d * d + g * g;
    let den2 = den * den;
    Vector4::new(
        2.0 * a * g * g * d / den2,
        2.0 * a * g * d * d / den2,
        g * g / den,
        1.0,
    )
}

fn weighted_sse(p: &Vector4<f64>, xs: &[f64], ys: &[f64], ws: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .zip(ws)
        .map(|((&x, &y), &w)| {
            let r = y - lorentzian(p, x);
            w * r * r
        })
        .sum()
}

fn normal_equations(p: &Vector4<f64>, xs: &[f64], ys: &[f64], ws: &[f64]) -> (Matrix4<f64>, Vector4<f64>) {
    let mut jtj = Matrix4::zeros();
    let mut jtr = Vector4::zeros();
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        let j = gradient(p, x);
        jtj += w * j * j.transpose();
        jtr += w * (y - lorentzian(p, x)) * j;
    }
    (jtj, jtr)
}

/// Least-squares fit of `A·γ²/((e−c)² + γ²) + b` to the profile.
pub fn fit_lorentzian(profile: &SpatialProfile, weighting: Weighting) -> Result<LorentzianFit> {
    let xs: Vec<f64> = profile.elements.iter().map(|&e| e as f64).collect();
    fit_lorentzian_xy(&xs, &profile.mean_counts_per_pulse, weighting)
}

pub fn fit_lorentzian_xy(xs: &[f64], ys: &[f64], weighting: Weighting) -> Result<LorentzianFit> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument("x and y lengths differ".into()));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::MalformedInput("non-finite profile value".into()));
    }
    let nonzero = ys.iter().filter(|&&y| y != 0.0).count();
    if nonzero < 5 {
        return Err(Error::InsufficientData(format!("{nonzero} nonzero elements, need 5")));
    }
    let ws: Vec<f64> = match weighting {
        Weighting::Uniform => vec![1.0; ys.len()],
        Weighting::Poisson => {
            let floor = ys.iter().copied().filter(|&y| y > 0.0).fold(f64::INFINITY, f64::min);
            ys.iter().map(|&y| 1.0 / y.max(floor)).collect()
        }
    };

    let (mut imax, mut ymin) = (0, f64::INFINITY);
    for (i, &y) in ys.iter().enumerate() {
        if y > ys[imax] {
            imax = i;
        }
        ymin = ymin.min(y);
    }
    let mut p = Vector4::new(xs[imax], 1.0, ys[imax] - ymin, ymin);
    let mut sse = weighted_sse(&p, xs, ys, &ws);
    let mut history = vec![sse];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if sse == 0.0 {
            converged = true;
            break;
        }
        let (jtj, jtr) = normal_equations(&p, xs, ys, &ws);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let step = a.cholesky().map(|c| c.solve(&jtr));
            if let Some(step) = step {
                let trial = p + step;
                if trial[1] > 0.0 && trial[2] >= 0.0 && trial.iter().all(|v| v.is_finite()) {
                    let trial_sse = weighted_sse(&trial, xs, ys, &ws);
                    if trial_sse < sse {
                        let rel = (sse - trial_sse) / sse;
                        p = trial;
                        sse = trial_sse;
                        history.push(sse);
                        lambda = (lambda / 3.0).max(1e-12);
                        accepted = true;
                        if rel < REL_TOL {
                            converged = true;
                        }
                        break;
                    }
                }
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No damped step lowers the SSE: stationary point.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let stderr = parameter_stderr(&p, xs, ys, &ws);
    Ok(LorentzianFit {
        center: p[0],
        gamma: p[1],
        amplitude: p[2],
        offset: p[3],
        sse,
        converged: converged && sse.is_finite(),
        iterations,
        center_stderr: stderr[0],
        gamma_stderr: stderr[1],
        amplitude_stderr: stderr[2],
        offset_stderr: stderr[3],
        sse_history: history,
    })
}

/// Standard errors from the Gauss–Newton sandwich covariance
/// H⁻¹ (Σ wᵢ² rᵢ² jᵢjᵢᵀ / (1 − hᵢ)) H⁻¹ with H = JᵀWJ and leverages
/// hᵢ = wᵢ jᵢᵀH⁻¹jᵢ. Unlike s²H⁻¹ it stays honest when the noise varies
/// across elements, as counting noise does.
fn parameter_stderr(p: &Vector4<f64>, xs: &[f64], ys: &[f64], ws: &[f64]) -> [f64; 4] {
    let n = xs.len();
    if n <= 4 {
        return [f64::INFINITY; 4];
    }
    let (h, _) = normal_equations(p, xs, ys, ws);
    let Some(h_inv) = h.try_inverse() else {
        return [f64::INFINITY; 4];
    };
    let mut meat = Matrix4::zeros();
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        let j = gradient(p, x);
        let r = y - lorentzian(p, x);
        let leverage = (w * (j.transpose() * h_inv * j)[(0, 0)]).min(1.0 - 1e-9);
        let scale = 1.0 / (1.0 - leverage);
        meat += (w * w * r * r * scale) * j * j.transpose();
    }
    let cov = h_inv * meat * h_inv;
    std::array::from_fn(|k| cov[(k, k)].max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub detuning_mhz: f64,
    /// Center relative to the reference fit, elements.
    pub shift: f64,
    pub stderr: f64,
    /// Set when this fit or the reference did not converge.
    pub flagged: bool,
}

/// Center shifts relative to the fit at detuning 0 (the lowest detuning if
/// 0 is absent).
pub fn estimate_shifts(fits: &[LorentzianFit], detunings_mhz: &[f64]) -> Result<Vec<ShiftEstimate>> {
    if fits.len() < 2 {
        return Err(Error::InsufficientData("need at least two fits".into()));
    }
    if fits.len() != detunings_mhz.len() {
        return Err(Error::InvalidArgument("fits and detunings differ in length".into()));
    }
    let reference = detunings_mhz.iter().position(|&d| d == 0.0).unwrap_or_else(|| {
        (0..detunings_mhz.len())
            .min_by(|&a, &b| detunings_mhz[a].total_cmp(&detunings_mhz[b]))
            .unwrap()
    });
    let r = &fits[reference];
    Ok(fits
        .iter()
        .zip(detunings_mhz)
        .enumerate()
        .map(|(i, (f, &d))| {
            let flagged = !f.converged || !r.converged;
            let stderr = if flagged {
                f64::INFINITY
            } else if i == reference {
                0.0
            } else {
                f.center_stderr.hypot(r.center_stderr)
            };
            ShiftEstimate {
                detuning_mhz: d,
                shift: f.center - r.center,
                stderr,
                flagged,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDecision {
    pub index: usize,
    pub assigned_detuning_mhz: f64,
    pub confidence: f64,
    /// Normalized posterior for each template.
    pub per_mode_likelihoods: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModeOutcome {
    NoDetection,
    Decision(ModeDecision),
}

impl ModeOutcome {
    pub fn decision(&self) -> Option<&ModeDecision> {
        match self {
            ModeOutcome::Decision(d) => Some(d),
            ModeOutcome::NoDetection => None,
        }
    }
}

/// Lower bound on template rates so that empty template elements do not
/// give −∞ log-likelihoods.
const RATE_FLOOR: f64 = 1e-12;

/// Maximum-likelihood mode for the events of one pulse. Each template holds
/// the expected counts per pulse of one mode; element counts are modelled as
/// independent Poisson variables with those rates. Only events inside the
/// first template's window are counted.
pub fn classify_mode(
    pulse_events: &[DetectionEvent],
    templates: &[SpatialProfile],
    detunings_mhz: &[f64],
) -> Result<ModeOutcome> {
    if templates.is_empty() {
        return Err(Error::InvalidArgument("no templates".into()));
    }
    if templates.len() != detunings_mhz.len() {
        return Err(Error::InvalidArgument("templates and detunings differ in length".into()));
    }
    let axis = &templates[0].elements;
    if templates.iter().any(|t| &t.elements != axis) {
        return Err(Error::InvalidArgument("templates on different element axes".into()));
    }
    let window = templates[0].window;
    let mut counts: std::collections::BTreeMap<usize, u64> = Default::default();
    for e in pulse_events {
        let t = e.time_tag_ns as f64;
        if t >= window.0 && t < window.1 {
            *counts.entry(e.element).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Ok(ModeOutcome::NoDetection);
    }

    let log_l: Vec<f64> = templates
        .iter()
        .map(|tpl| {
            let total: f64 = tpl.mean_counts_per_pulse.iter().map(|v| v.max(RATE_FLOOR)).sum();
            let observed: f64 = counts
                .iter()
                .map(|(&el, &n)| n as f64 * tpl.value_at(el).max(RATE_FLOOR).ln())
                .sum();
            observed - total
        })
        .collect();
    let best = log_l
        .iter()
        .enumerate()
        .fold(0, |b, (i, &l)| if l > log_l[b] { i } else { b });
    let weights: Vec<f64> = log_l.iter().map(|l| (l - log_l[best]).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let posterior: Vec<f64> = weights.iter().map(|w| w / norm).collect();
    Ok(ModeOutcome::Decision(ModeDecision {
        index: best,
        assigned_detuning_mhz: detunings_mhz[best],
        confidence: posterior[best],
        per_mode_likelihoods: posterior,
    }))
}

/// Leakage of mode b into mode a's peak element relative to b's own peak, dB.
pub fn crosstalk_metric(profile_a: &SpatialProfile, profile_b: &SpatialProfile) -> Result<f64> {
    if profile_a.elements != profile_b.elements {
        return Err(Error::InvalidArgument("profiles on different element axes".into()));
    }
    let peak_a = profile_a.peak_element();
    let own = profile_b.value_at(profile_b.peak_element());
    if !(own > 0.0) || !(profile_a.value_at(peak_a) > 0.0) {
        return Err(Error::UndefinedMetric("zero peak counts".into()));
    }
    let cross = profile_b.value_at(peak_a);
    if cross <= 0.0 {
        return Ok(CROSSTALK_FLOOR_DB);
    }
    Ok((10.0 * (cross / own).log10()).max(CROSSTALK_FLOOR_DB))
}

/// `element,time_ns,counts_per_pulse` rows for the selected elements.
pub fn time_histograms_csv(histograms: &[TimeHistogram], elements: &[usize]) -> String {
    let mut out = String::from("element,time_ns,counts_per_pulse\n");
    for h in histograms.iter().filter(|h| elements.contains(&h.element)) {
        for (i, v) in h.counts_per_pulse().iter().enumerate() {
            let _ = writeln!(out, "{},{},{v:e}", h.element, h.bin_start(i));
        }
    }
    out
}

/// `element,mean_counts_per_pulse,fit_value`; the fit column is empty
/// without a fit.
pub fn spatial_profile_csv(profile: &SpatialProfile, fit: Option<&LorentzianFit>) -> String {
    let mut out = String::from("element,mean_counts_per_pulse,fit_value\n");
    for (&e, v) in profile.elements.iter().zip(&profile.mean_counts_per_pulse) {
        match fit {
            Some(f) => {
                let _ = writeln!(out, "{e},{v:e},{:e}", f.eval(e as f64));
            }
            None => {
                let _ = writeln!(out, "{e},{v:e},");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Origin;
    use proptest::prelude::*;

    fn ev(pulse: u64, element: usize, t: u64) -> DetectionEvent {
        DetectionEvent {
            pulse_index: pulse,
            element,
            time_tag_ns: t,
            origin: Origin::Photon,
        }
    }

    fn synthetic(c: f64, g: f64, a: f64, b: f64, lo: usize, hi: usize) -> SpatialProfile {
        let elements: Vec<usize> = (lo..=hi).collect();
        let p = Vector4::new(c, g, a, b);
        let values = elements.iter().map(|&e| lorentzian(&p, e as f64)).collect();
        SpatialProfile::new(elements, values, DEFAULT_WINDOW_NS).unwrap()
    }

    #[test]
    fn empty_events_give_zero_histograms() {
        let array = SpadArraySpec::line_array(0.5);
        let h = build_time_histograms(&[], 2550, &array, 1000.0).unwrap();
        assert_eq!(h.len(), 192);
        assert!(h.iter().all(|h| h.total() == 0 && h.counts.len() == 1000));
    }

    #[test]
    fn single_event_histogram() {
        let array = SpadArraySpec::line_array(0.5);
        let h = build_time_histograms(&[ev(0, 5, 300)], 2550, &array, 1000.0).unwrap();
        assert_eq!(h[5].counts_per_pulse()[300], 1.0 / 2550.0);
        assert_eq!(h[5].bin_start(300), 300.0);
    }

    #[test]
    fn malformed_events_rejected() {
        let array = SpadArraySpec::line_array(0.5);
        for bad in [ev(0, 192, 1), ev(0, 1, 1000), ev(10, 1, 1)] {
            assert!(matches!(
                build_time_histograms(&[bad], 10, &array, 1000.0),
                Err(Error::MalformedInput(_))
            ));
        }
    }

    #[test]
    fn window_checks() {
        let array = SpadArraySpec::line_array(0.5);
        let h = build_time_histograms(&[ev(0, 5, 300)], 1, &array, 1000.0).unwrap();
        assert!(integrate_window(&h, (650.0, 200.0)).is_err());
        assert!(integrate_window(&h, (-1.0, 200.0)).is_err());
        let full = integrate_window(&h, (0.0, 1000.0)).unwrap();
        assert_eq!(full.value_at(5), 1.0);
        assert_eq!(integrate_window(&h, (0.0, 300.0)).unwrap().value_at(5), 0.0);
        assert_eq!(integrate_window(&h, (300.0, 301.0)).unwrap().value_at(5), 1.0);
    }

    #[test]
    fn dark_subtraction_removes_flat_floor() {
        let array = SpadArraySpec::line_array(0.5);
        // One count in every 10th bin on every element: a flat floor.
        let events: Vec<_> = (0..192)
            .flat_map(|el| (0..100).map(move |k| ev(0, el, k * 10)))
            .collect();
        let h = build_time_histograms(&events, 1, &array, 1000.0).unwrap();
        let p = integrate_window_dark_subtracted(&h, (200.0, 650.0)).unwrap();
        assert!(p.mean_counts_per_pulse.iter().all(|v| v.abs() < 1e-12), "{:?}", &p.mean_counts_per_pulse[..3]);
    }

    #[test]
    fn noiseless_recovery() {
        let p = synthetic(103.0, 1.2, 0.05, 0.0, 95, 115);
        let f = fit_lorentzian(&p, Weighting::Uniform).unwrap();
        assert!(f.converged);
        assert!((f.center - 103.0).abs() < 1e-6);
        assert!((f.gamma - 1.2).abs() < 1e-6);
        assert!((f.amplitude - 0.05).abs() < 1e-6);
        assert!(f.offset.abs() < 1e-6);
    }

    #[test]
    fn noiseless_recovery_off_grid_poisson_weights() {
        let p = synthetic(101.37, 2.1, 0.3, 0.01, 90, 115);
        let f = fit_lorentzian(&p, Weighting::Poisson).unwrap();
        assert!((f.center - 101.37).abs() < 1e-6);
        assert!((f.gamma - 2.1).abs() < 1e-6);
    }

    #[test]
    fn sse_monotone() {
        let mut p = synthetic(100.4, 1.7, 1.0, 0.05, 90, 112);
        for (i, v) in p.mean_counts_per_pulse.iter_mut().enumerate() {
            *v += 0.02 * ((i * 7919 % 13) as f64 / 13.0 - 0.5);
        }
        let f = fit_lorentzian(&p, Weighting::Uniform).unwrap();
        assert!(f.sse_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(f.converged);
    }

    #[test]
    fn too_few_points() {
        let p = SpatialProfile::new(vec![1, 2, 3, 4, 5, 6], vec![0.0, 1.0, 2.0, 1.0, 0.5, 0.0], DEFAULT_WINDOW_NS).unwrap();
        assert!(matches!(fit_lorentzian(&p, Weighting::Uniform), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn shifts_of_identical_profiles_are_zero() {
        let f = fit_lorentzian(&synthetic(103.0, 1.2, 0.05, 0.0, 95, 115), Weighting::Uniform).unwrap();
        let s = estimate_shifts(&[f.clone(), f.clone(), f], &[0.0, 120.0, 240.0]).unwrap();
        assert!(s.iter().all(|s| s.shift == 0.0 && !s.flagged));
    }

    #[test]
    fn unconverged_fit_is_flagged() {
        let f = fit_lorentzian(&synthetic(103.0, 1.2, 0.05, 0.0, 95, 115), Weighting::Uniform).unwrap();
        let mut g = f.clone();
        g.converged = false;
        let s = estimate_shifts(&[f, g], &[120.0, 0.0]).unwrap();
        assert!(s.iter().all(|s| s.flagged && s.stderr.is_infinite()));
    }

    #[test]
    fn shifts_need_two_fits() {
        let f = fit_lorentzian(&synthetic(100.0, 1.0, 1.0, 0.0, 95, 105), Weighting::Uniform).unwrap();
        assert!(matches!(estimate_shifts(&[f], &[0.0]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn classifier_peak_and_symmetry() {
        let tpls: Vec<_> = [100.0, 101.0, 102.0]
            .iter()
            .map(|&c| synthetic(c, 0.8, 0.3, 0.0, 90, 112))
            .collect();
        let d = classify_mode(&[ev(0, 102, 400)], &tpls, &[0.0, 120.0, 240.0]).unwrap();
        assert_eq!(d.decision().unwrap().index, 2);
        let same = vec![tpls[0].clone(); 3];
        let d = classify_mode(&[ev(0, 102, 400)], &same, &[0.0, 120.0, 240.0]).unwrap();
        let d = d.decision().unwrap();
        assert_eq!(d.index, 0);
        assert!(d.per_mode_likelihoods.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(
            classify_mode(&[ev(0, 102, 50)], &tpls, &[0.0, 120.0, 240.0]).unwrap(),
            ModeOutcome::NoDetection
        );
    }

    #[test]
    fn crosstalk_cases() {
        let a = synthetic(100.0, 1.0, 1.0, 0.0, 90, 110);
        assert_eq!(crosstalk_metric(&a, &a).unwrap(), 0.0);
        let delta = |k: usize| {
            let mut v = vec![0.0; 21];
            v[k] = 1.0;
            SpatialProfile::new((90..=110).collect(), v, DEFAULT_WINDOW_NS).unwrap()
        };
        assert_eq!(crosstalk_metric(&delta(3), &delta(8)).unwrap(), CROSSTALK_FLOOR_DB);
        let zero = SpatialProfile::new((90..=110).collect(), vec![0.0; 21], DEFAULT_WINDOW_NS).unwrap();
        assert!(matches!(crosstalk_metric(&a, &zero), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn csv_headers() {
        let array = SpadArraySpec::line_array(0.5);
        let h = build_time_histograms(&[ev(0, 101, 300)], 2, &array, 1000.0).unwrap();
        let csv = time_histograms_csv(&h, &[101]);
        assert!(csv.starts_with("element,time_ns,counts_per_pulse\n"));
        assert_eq!(csv.lines().count(), 1001);
        assert!(csv.contains("\n101,300,5e-1\n"));
        let p = synthetic(103.0, 1.2, 0.05, 0.0, 95, 115);
        let f = fit_lorentzian(&p, Weighting::Uniform).unwrap();
        let csv = spatial_profile_csv(&p, Some(&f));
        assert_eq!(csv.lines().count(), 22);
        let json: serde_json::Value = serde_json::from_str(&f.to_json()).unwrap();
        for k in ["center", "gamma", "amplitude", "offset", "sse", "converged", "center_stderr"] {
            assert!(json.get(k).is_some(), "{k}");
        }
    }

    proptest! {
        #[test]
        fn translation_equivariance(c in 99.0f64..105.0, g in 0.6f64..3.0, k in 1usize..40) {
            let p = synthetic(c, g, 0.2, 0.001, 92, 112);
            let f0 = fit_lorentzian(&p, Weighting::Uniform).unwrap();
            let fk = fit_lorentzian(&p.shifted(k), Weighting::Uniform).unwrap();
            prop_assert!((fk.center - f0.center - k as f64).abs() < 1e-9);
        }
    }
}
