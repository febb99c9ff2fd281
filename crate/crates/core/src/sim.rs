//! Seeded Monte Carlo of weak coherent pulses detected by a SPAD line array.
//!
//! Each pulse carries a Poisson number of photons (mean photon number thinned
//! by the chain transmission and the detection efficiency). Photon positions
//! are drawn from the normalized y = 0 focal-plane intensity, binned onto the
//! element row, and time-stamped from the Gaussian pulse envelope. Dark counts
//! are uniform in time and over elements.
//!
//! Every pulse gets its own RNG stream derived from `(seed, pulse_index)`, so
//! the output does not depend on how many worker threads run it.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{OpticalLayout, Spectrometer, VipaSpec};
use crate::units::GAUSSIAN_FWHM_PER_SIGMA;

/// Half-width of the sampled focal-plane window, in element pitches.
pub const PDF_HALF_WINDOW_PITCHES: f64 = 6.0;
/// Number of samples of the focal-plane density.
pub const PDF_SAMPLES: usize = 4097;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpadArraySpec {
    pub n_elements: usize,
    pub element_pitch_um: f64,
    pub pixels_per_element: u32,
    /// Dark counts per element per second.
    pub dcr_cps: f64,
    /// Photon detection efficiency.
    pub pde: f64,
    pub time_resolution_ns: u32,
    /// Per-element dead time; 0 disables it.
    pub dead_time_ns: f64,
}

impl SpadArraySpec {
    /// One active 1×192 row of 3×3-pixel elements (10.08 µm pixels).
    pub fn line_array(pde: f64) -> Self {
        SpadArraySpec {
            n_elements: 192,
            element_pitch_um: 3.0 * 10.08,
            pixels_per_element: 9,
            dcr_cps: 10.0,
            pde,
            time_resolution_ns: 1,
            dead_time_ns: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_elements == 0 {
            return Err(Error::param("n_elements", "must be >= 1"));
        }
        if !(self.element_pitch_um.is_finite() && self.element_pitch_um > 0.0) {
            return Err(Error::param("element_pitch_um", "must be > 0"));
        }
        if !(self.pde > 0.0 && self.pde <= 1.0) {
            return Err(Error::param("pde", format!("{} not in (0, 1]", self.pde)));
        }
        if !(self.dcr_cps.is_finite() && self.dcr_cps >= 0.0) {
            return Err(Error::param("dcr_cps", "must be >= 0"));
        }
        if self.time_resolution_ns == 0 {
            return Err(Error::param("time_resolution_ns", "must be >= 1"));
        }
        if !(self.dead_time_ns.is_finite() && self.dead_time_ns >= 0.0) {
            return Err(Error::param("dead_time_ns", "must be >= 0"));
        }
        Ok(())
    }

    pub fn width_um(&self) -> f64 {
        self.n_elements as f64 * self.element_pitch_um
    }

    /// Element hit at array coordinate `u_um` (0 at the outer edge of element 0).
    /// Element k covers (k·pitch, (k+1)·pitch]; a shared boundary belongs to
    /// the lower element.
    pub fn element_of(&self, u_um: f64) -> Option<usize> {
        if !(u_um > 0.0) || u_um > self.width_um() {
            return None;
        }
        let k = (u_um / self.element_pitch_um).ceil() as usize;
        Some(k.saturating_sub(1).min(self.n_elements - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    pub fwhm_ns: f64,
    pub mean_photons: f64,
    pub n_pulses: usize,
    /// Length of the record taken per pulse.
    pub period_ns: f64,
    pub center_time_ns: f64,
}

impl PulseSpec {
    /// 180 ns FWHM, one photon on average, 2550 pulses, 1 µs records.
    pub fn experiment() -> Self {
        PulseSpec {
            fwhm_ns: 180.0,
            mean_photons: 1.0,
            n_pulses: 2550,
            period_ns: 1000.0,
            center_time_ns: 400.0,
        }
    }

    pub fn sigma_ns(&self) -> f64 {
        self.fwhm_ns / GAUSSIAN_FWHM_PER_SIGMA
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fwhm_ns.is_finite() && self.fwhm_ns > 0.0) {
            return Err(Error::param("fwhm_ns", "must be > 0"));
        }
        if !(self.mean_photons.is_finite() && self.mean_photons >= 0.0) {
            return Err(Error::param("mean_photons", "must be >= 0"));
        }
        if !(self.period_ns.is_finite() && self.period_ns > 0.0) {
            return Err(Error::param("period_ns", "must be > 0"));
        }
        if !(self.center_time_ns > 0.0 && self.center_time_ns < self.period_ns) {
            return Err(Error::param("center_time_ns", "must lie inside (0, period)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Photon,
    Dark,
    /// Read back from an export that carries no ground truth.
    Unknown,
}

impl Origin {
    pub fn as_str(&self) -> &'static str {
        match self {
            Origin::Photon => "photon",
            Origin::Dark => "dark",
            Origin::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DetectionEvent {
    pub pulse_index: u64,
    pub element: usize,
    /// Start of the time bin, a multiple of the time resolution.
    pub time_tag_ns: u64,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub vipa: VipaSpec,
    pub layout: OpticalLayout,
    pub array: SpadArraySpec,
    pub pulse: PulseSpec,
    pub detunings_mhz: Vec<f64>,
    /// Offset between the optical axis and the element grid.
    pub alignment_offset_um: f64,
    /// Element whose centre the optical axis (x = 0) hits.
    pub center_element: usize,
    /// Transmission before the detector (VIPA, y acceptance, ...).
    pub eta_chain: f64,
    pub seed: u64,
}

impl SimScenario {
    /// Three-mode experiment on the 6.74 mm etalon with the lenses actually
    /// used, the etalon thickness trimmed so that λ0 is resonant on axis.
    pub fn experiment(pde: f64, seed: u64) -> Self {
        let layout = OpticalLayout::experiment();
        let (_, vipa) = VipaSpec::experiment().tuned_to_resonance(layout.lambda0_nm, layout.theta_in_rad);
        SimScenario {
            vipa,
            layout,
            array: SpadArraySpec::line_array(pde),
            pulse: PulseSpec::experiment(),
            detunings_mhz: vec![0.0, 120.0, 240.0],
            alignment_offset_um: 0.0,
            center_element: 103,
            eta_chain: 0.69,
            seed,
        }
    }

    /// Same pulses and detector on the 16.5 mm redesign.
    pub fn redesign(pde: f64, seed: u64) -> Self {
        let layout = OpticalLayout::redesign();
        let (_, vipa) = VipaSpec::experiment()
            .with_thickness(16.5)
            .tuned_to_resonance(layout.lambda0_nm, layout.theta_in_rad);
        SimScenario {
            vipa,
            layout,
            ..Self::experiment(pde, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vipa.validate()?;
        self.layout.validate()?;
        self.array.validate()?;
        self.pulse.validate()?;
        if !(self.eta_chain > 0.0 && self.eta_chain <= 1.0) {
            return Err(Error::param("eta_chain", format!("{} not in (0, 1]", self.eta_chain)));
        }
        if !self.alignment_offset_um.is_finite() {
            return Err(Error::param("alignment_offset_um", "must be finite"));
        }
        if self.center_element >= self.array.n_elements {
            return Err(Error::param("center_element", "outside the array"));
        }
        if let Some(d) = self.detunings_mhz.iter().find(|d| !d.is_finite()) {
            return Err(Error::param("detunings_mhz", format!("{d} is not finite")));
        }
        Ok(())
    }

    /// Mean number of detected photons per pulse.
    pub fn effective_mean(&self) -> f64 {
        self.pulse.mean_photons * self.eta_chain * self.array.pde
    }

    /// Array coordinate of focal-plane position `x_um`.
    pub fn array_coordinate(&self, x_um: f64) -> f64 {
        x_um + self.alignment_offset_um + (self.center_element as f64 + 0.5) * self.array.element_pitch_um
    }
}

/// Normalized focal-plane density over a finite window, piecewise linear
/// between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialPdf {
    pub xs: Vec<f64>,
    pub density: Vec<f64>,
    cdf: Vec<f64>,
}

impl SpatialPdf {
    pub fn from_samples(xs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != values.len() {
            return Err(Error::InvalidArgument("need at least two matching samples".into()));
        }
        let mut cdf = Vec::with_capacity(xs.len());
        cdf.push(0.0);
        for i in 1..xs.len() {
            let area = 0.5 * (values[i - 1] + values[i]) * (xs[i] - xs[i - 1]);
            cdf.push(cdf[i - 1] + area);
        }
        let total = *cdf.last().unwrap();
        if !(total > 1e-300) || !total.is_finite() {
            return Err(Error::DegenerateProfile(format!("total intensity {total}")));
        }
        let density = values.iter().map(|v| v / total).collect();
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(SpatialPdf { xs, density, cdf })
    }

    pub fn integral(&self) -> f64 {
        *self.cdf.last().unwrap()
    }

    /// Position of the largest density sample.
    pub fn mode(&self) -> f64 {
        let (i, _) = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.xs[i]
    }

    pub fn step(&self) -> f64 {
        self.xs[1] - self.xs[0]
    }

    /// Cumulative probability up to `x`.
    pub fn cdf_at(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return 0.0;
        }
        if x >= *self.xs.last().unwrap() {
            return 1.0;
        }
        let i = self.xs.partition_point(|&v| v <= x) - 1;
        let h = self.xs[i + 1] - self.xs[i];
        let s = x - self.xs[i];
        let (d0, d1) = (self.density[i], self.density[i + 1]);
        self.cdf[i] + d0 * s + (d1 - d0) * s * s / (2.0 * h)
    }

    /// Inverse CDF at `p ∈ [0, 1)`, exact for the piecewise-linear density.
    pub fn quantile(&self, p: f64) -> f64 {
        let target = p * self.integral();
        let i = (self.cdf.partition_point(|&c| c <= target).max(1) - 1).min(self.xs.len() - 2);
        let h = self.xs[i + 1] - self.xs[i];
        let r = (target - self.cdf[i]).max(0.0);
        let (d0, d1) = (self.density[i], self.density[i + 1]);
        let a = (d1 - d0) / (2.0 * h);
        let disc = (d0 * d0 + 4.0 * a * r).max(0.0);
        let denom = d0 + disc.sqrt();
        let s = if denom > 0.0 { 2.0 * r / denom } else { 0.0 };
        self.xs[i] + s.clamp(0.0, h)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }

    /// Probability of each element for the given scenario geometry.
    /// The remainder (1 − sum) falls outside the array.
    pub fn element_probabilities(&self, scenario: &SimScenario) -> Vec<f64> {
        let pitch = scenario.array.element_pitch_um;
        let origin = scenario.array_coordinate(0.0);
        (0..scenario.array.n_elements)
            .map(|k| {
                let lo = k as f64 * pitch - origin;
                let hi = lo + pitch;
                self.cdf_at(hi) - self.cdf_at(lo)
            })
            .collect()
    }
}

/// Normalized y = 0 intensity at λ0 + `detuning_mhz`, sampled over
/// ±6 element pitches around the position predicted by the dispersion relation.
pub fn spatial_pdf(scenario: &SimScenario, detuning_mhz: f64) -> Result<SpatialPdf> {
    let model = Spectrometer::new(scenario.vipa, scenario.layout)?;
    let center = model.position_for_detuning(detuning_mhz);
    let half = PDF_HALF_WINDOW_PITCHES * scenario.array.element_pitch_um;
    let step = 2.0 * half / (PDF_SAMPLES - 1) as f64;
    let xs: Vec<f64> = (0..PDF_SAMPLES).map(|i| center - half + i as f64 * step).collect();
    let values: Vec<f64> = xs
        .iter()
        .map(|&x| model.intensity_at_detuning(x, detuning_mhz))
        .collect();
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::DegenerateProfile(format!("non-finite intensity {v}")));
    }
    SpatialPdf::from_samples(xs, values)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decorrelated seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream ^ 0x5DEE_CE66_D1CE_4E5B))
}

fn pulse_rng(seed: u64, pulse_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, pulse_index))
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

/// Detection events for every pulse at one detuning, sorted by
/// `(pulse_index, time_tag)`.
pub fn simulate(scenario: &SimScenario, detuning_mhz: f64) -> Result<Vec<DetectionEvent>> {
    scenario.validate()?;
    if !detuning_mhz.is_finite() {
        return Err(Error::InvalidArgument("detuning must be finite".into()));
    }
    let mu = scenario.effective_mean();
    let pdf = if mu > 0.0 && scenario.pulse.n_pulses > 0 {
        Some(spatial_pdf(scenario, detuning_mhz)?)
    } else {
        None
    };
    let array = scenario.array;
    let pulse = scenario.pulse;
    let dark_mean = array.n_elements as f64 * array.dcr_cps * pulse.period_ns * 1e-9;
    let timing = Normal::new(pulse.center_time_ns, pulse.sigma_ns()).expect("valid pulse width");
    let res = array.time_resolution_ns as f64;
    let quantize = |t: f64| ((t / res).floor() * res) as u64;

    let per_pulse: Vec<Vec<DetectionEvent>> = (0..pulse.n_pulses as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = pulse_rng(scenario.seed, p);
            let mut events = Vec::new();
            if let Some(pdf) = &pdf {
                for _ in 0..poisson(mu, &mut rng) {
                    let x = pdf.sample(&mut rng);
                    let t = loop {
                        let t = timing.sample(&mut rng);
                        if t >= 0.0 && t < pulse.period_ns {
                            break t;
                        }
                    };
                    if let Some(element) = array.element_of(scenario.array_coordinate(x)) {
                        events.push(DetectionEvent {
                            pulse_index: p,
                            element,
                            time_tag_ns: quantize(t),
                            origin: Origin::Photon,
                        });
                    }
                }
            }
            for _ in 0..poisson(dark_mean, &mut rng) {
                let element = rng.random_range(0..array.n_elements);
                let t = rng.random::<f64>() * pulse.period_ns;
                events.push(DetectionEvent {
                    pulse_index: p,
                    element,
                    time_tag_ns: quantize(t),
                    origin: Origin::Dark,
                });
            }
            events.sort_by_key(|e| (e.time_tag_ns, e.element, e.origin));
            if array.dead_time_ns > 0.0 {
                apply_dead_time(&mut events, array.dead_time_ns);
            }
            events
        })
        .collect();
    Ok(per_pulse.into_iter().flatten().collect())
}

/// Drops events that fall within `dead_time_ns` after the last kept event on
/// the same element. `events` must be one pulse record sorted by time.
fn apply_dead_time(events: &mut Vec<DetectionEvent>, dead_time_ns: f64) {
    let mut last: std::collections::HashMap<usize, u64> = Default::default();
    events.retain(|e| match last.get(&e.element) {
        Some(&t) if ((e.time_tag_ns - t) as f64) < dead_time_ns => false,
        _ => {
            last.insert(e.element, e.time_tag_ns);
            true
        }
    });
}

/// Simulates every detuning of the scenario. Detunings are processed in
/// ascending order and detuning number `i` of that order uses sub-seed
/// `derive_seed(seed, i)`, so the input order does not matter.
pub fn run_experiment(scenario: &SimScenario) -> Result<Vec<(f64, Vec<DetectionEvent>)>> {
    scenario.validate()?;
    if scenario.detunings_mhz.is_empty() {
        return Err(Error::InvalidArgument("no detunings given".into()));
    }
    let mut detunings = scenario.detunings_mhz.clone();
    detunings.sort_by(f64::total_cmp);
    if detunings.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::param("detunings_mhz", "duplicate detuning"));
    }
    detunings
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let sub = SimScenario {
                seed: derive_seed(scenario.seed, i as u64),
                ..scenario.clone()
            };
            Ok((d, simulate(&sub, d)?))
        })
        .collect()
}

/// Event export: one `pulse_index,element,time_tag_ns` record per line.
pub fn events_to_csv(events: &[DetectionEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 16);
    for e in events {
        let _ = writeln!(out, "{},{},{}", e.pulse_index, e.element, e.time_tag_ns);
    }
    out
}

/// Ground-truth sidecar: the export record plus the origin column.
pub fn events_to_truth_csv(events: &[DetectionEvent]) -> String {
    let mut out = String::from("pulse_index,element,time_tag_ns,origin\n");
    for e in events {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            e.pulse_index,
            e.element,
            e.time_tag_ns,
            e.origin.as_str()
        );
    }
    out
}

/// Parses an event export. Errors name the 1-based line number.
pub fn parse_events(text: &str) -> Result<Vec<DetectionEvent>> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::MalformedInput(format!("line {}: expected `pulse_index,element,time_tag_ns`, got {line:?}", i + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad());
        }
        events.push(DetectionEvent {
            pulse_index: fields[0].parse().map_err(|_| bad())?,
            element: fields[1].parse().map_err(|_| bad())?,
            time_tag_ns: fields[2].parse().map_err(|_| bad())?,
            origin: Origin::Unknown,
        });
    }
    Ok(events)
}
