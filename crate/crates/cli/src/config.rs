//! Run configuration: one TOML file with a section per stage.
//!
//! Every key is optional except `[array].pde`; omitted keys take the values
//! of the 6.74 mm etalon experiment. A subcommand refuses to run when a
//! section it needs is missing.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use spectro_core::analysis::{Weighting, DEFAULT_WINDOW_NS};
use spectro_core::design::{DesignGoal, ResonanceMode};
use spectro_core::herald::{reference_scenarios, LinkParams};
use spectro_core::optics::{OpticalLayout, VipaSpec};
use spectro_core::sim::{PulseSpec, SimScenario, SpadArraySpec};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub vipa: Option<VipaSection>,
    pub layout: Option<LayoutSection>,
    pub design: Option<DesignSection>,
    pub profile: Option<ProfileSection>,
    pub array: Option<ArraySection>,
    pub pulse: Option<PulseSection>,
    pub simulation: Option<SimulationSection>,
    pub analysis: Option<AnalysisSection>,
    pub herald: Option<HeraldSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VipaSection {
    pub reflectivity_in: f64,
    pub reflectivity_out: f64,
    pub refractive_index: f64,
    pub thickness_mm: f64,
    pub length_mm: f64,
}

impl Default for VipaSection {
    fn default() -> Self {
        let v = VipaSpec::experiment();
        VipaSection {
            reflectivity_in: v.reflectivity_in,
            reflectivity_out: v.reflectivity_out,
            refractive_index: v.refractive_index,
            thickness_mm: v.thickness_mm,
            length_mm: v.length_mm,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    pub lambda0_nm: f64,
    pub beam_radius_mm: f64,
    pub theta_in_deg: f64,
    pub f_in_mm: f64,
    pub f_x_mm: f64,
    pub f_y_mm: f64,
    /// Trim the etalon thickness so that λ0 is resonant on axis.
    pub tune_to_resonance: bool,
}

impl Default for LayoutSection {
    fn default() -> Self {
        let l = OpticalLayout::experiment();
        LayoutSection {
            lambda0_nm: l.lambda0_nm,
            beam_radius_mm: l.beam_radius_mm,
            theta_in_deg: l.theta_in_rad.to_degrees(),
            f_in_mm: l.f_in_mm,
            f_x_mm: l.f_x_mm,
            f_y_mm: l.f_y_mm,
            tune_to_resonance: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResonanceChoice {
    #[default]
    TrimThickness,
    Snap,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSection {
    pub delta_nu_mhz: f64,
    pub pitch_um: f64,
    pub y_element_um: f64,
    pub fwhm_target_mhz: Option<f64>,
    pub resonance: ResonanceChoice,
    pub snap_half_width_deg: f64,
    /// Input focal length checked against the clipping interval; defaults
    /// to `[layout].f_in_mm`.
    pub f_in_candidate_mm: Option<f64>,
}

impl Default for DesignSection {
    fn default() -> Self {
        let g = DesignGoal::experiment();
        DesignSection {
            delta_nu_mhz: g.delta_nu_mhz,
            pitch_um: g.pitch_um,
            y_element_um: g.y_element_um,
            fwhm_target_mhz: None,
            resonance: ResonanceChoice::TrimThickness,
            snap_half_width_deg: 0.2,
            f_in_candidate_mm: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub detunings_mhz: Vec<f64>,
    pub x_min_um: f64,
    pub x_max_um: f64,
    pub resolution_um: f64,
    /// Half height of the optional 2-D grid; 0 writes only the y = 0 slice.
    pub y_half_um: f64,
    pub grid_resolution_um: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            detunings_mhz: vec![0.0, 120.0, 240.0],
            x_min_um: -150.0,
            x_max_um: 200.0,
            resolution_um: 0.5,
            y_half_um: 0.0,
            grid_resolution_um: 2.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySection {
    #[serde(default = "defaults::n_elements")]
    pub n_elements: usize,
    #[serde(default = "defaults::element_pitch_um")]
    pub element_pitch_um: f64,
    #[serde(default = "defaults::pixels_per_element")]
    pub pixels_per_element: u32,
    #[serde(default = "defaults::dcr_cps")]
    pub dcr_cps: f64,
    /// Photon detection efficiency. Required: there is no trustworthy default.
    pub pde: f64,
    #[serde(default = "defaults::time_resolution_ns")]
    pub time_resolution_ns: u32,
    #[serde(default)]
    pub dead_time_ns: f64,
}

mod defaults {
    use spectro_core::sim::SpadArraySpec;

    fn line() -> SpadArraySpec {
        SpadArraySpec::line_array(0.5)
    }
    pub fn n_elements() -> usize {
        line().n_elements
    }
    pub fn element_pitch_um() -> f64 {
        line().element_pitch_um
    }
    pub fn pixels_per_element() -> u32 {
        line().pixels_per_element
    }
    pub fn dcr_cps() -> f64 {
        line().dcr_cps
    }
    pub fn time_resolution_ns() -> u32 {
        line().time_resolution_ns
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseSection {
    pub fwhm_ns: f64,
    pub mean_photons: f64,
    pub n_pulses: usize,
    pub period_ns: f64,
    pub center_time_ns: f64,
}

impl Default for PulseSection {
    fn default() -> Self {
        let p = PulseSpec::experiment();
        PulseSection {
            fwhm_ns: p.fwhm_ns,
            mean_photons: p.mean_photons,
            n_pulses: p.n_pulses,
            period_ns: p.period_ns,
            center_time_ns: p.center_time_ns,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub detunings_mhz: Vec<f64>,
    pub alignment_offset_um: f64,
    pub center_element: usize,
    pub eta_chain: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            detunings_mhz: vec![0.0, 120.0, 240.0],
            alignment_offset_um: 0.0,
            center_element: 103,
            eta_chain: 0.69,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub window_ns: [f64; 2],
    pub weighting: Weighting,
    pub dark_subtract: bool,
    /// Elements written to the time-histogram CSV.
    pub histogram_elements: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            window_ns: [DEFAULT_WINDOW_NS.0, DEFAULT_WINDOW_NS.1],
            weighting: Weighting::Uniform,
            dark_subtract: false,
            histogram_elements: (100..=109).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub p: f64,
    pub eta_det: f64,
    #[serde(default = "one")]
    pub eta_vipa: f64,
    #[serde(default = "one")]
    pub eta_wc: f64,
    pub alpha_db_per_km: f64,
    pub link_km: f64,
}

fn one() -> f64 {
    1.0
}

impl LinkSection {
    fn from_params(p: &LinkParams) -> Self {
        LinkSection {
            p: p.p,
            eta_det: p.eta_det,
            eta_vipa: p.eta_vipa,
            eta_wc: p.eta_wc,
            alpha_db_per_km: p.alpha_db_per_km,
            link_km: p.link_km,
        }
    }

    pub fn params(&self) -> LinkParams {
        LinkParams {
            p: self.p,
            eta_det: self.eta_det,
            eta_vipa: self.eta_vipa,
            eta_wc: self.eta_wc,
            alpha_db_per_km: self.alpha_db_per_km,
            link_km: self.link_km,
            modes: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeraldSection {
    pub m_min: u64,
    pub m_max: u64,
    /// Trial time for rates; probabilities only when absent.
    pub trial_time_s: Option<f64>,
    pub baseline: LinkSection,
    pub scenario: Vec<LinkSection>,
}

impl Default for HeraldSection {
    fn default() -> Self {
        let (single, multi) = reference_scenarios();
        HeraldSection {
            m_min: 1,
            m_max: 300,
            trial_time_s: None,
            baseline: LinkSection::from_params(&single),
            scenario: multi.iter().map(LinkSection::from_params).collect(),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("missing [{section}] section"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section that is present against the invariants of the
    /// type it feeds.
    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(v) = &self.vipa {
            v.spec().validate().map_err(invalid)?;
        }
        if self.layout.is_some() {
            self.optical_layout()?.validate().map_err(invalid)?;
        }
        if self.design.is_some() {
            self.design_goal(None)?.validate().map_err(invalid)?;
        }
        if let Some(p) = &self.profile {
            if p.detunings_mhz.is_empty() {
                return Err(invalid("[profile] needs at least one detuning"));
            }
            if p.detunings_mhz.iter().any(|d| !d.is_finite()) {
                return Err(invalid("[profile] detunings must be finite"));
            }
            if !(p.x_min_um < p.x_max_um) {
                return Err(invalid("[profile] x_min_um must be below x_max_um"));
            }
            if !(p.resolution_um > 0.0) || !(p.grid_resolution_um > 0.0) {
                return Err(invalid("[profile] resolutions must be > 0"));
            }
            if !(p.y_half_um >= 0.0) {
                return Err(invalid("[profile] y_half_um must be >= 0"));
            }
        }
        if let Some(a) = &self.array {
            a.spec().validate().map_err(invalid)?;
        }
        if let Some(p) = &self.pulse {
            p.spec().validate().map_err(invalid)?;
        }
        if self.simulation.is_some() {
            let s = self.scenario(None, None)?;
            s.validate().map_err(invalid)?;
            if s.detunings_mhz.is_empty() {
                return Err(invalid("[simulation] needs at least one detuning"));
            }
            let mut d = s.detunings_mhz.clone();
            d.sort_by(f64::total_cmp);
            if d.windows(2).any(|w| w[0] == w[1]) {
                return Err(invalid("[simulation] detunings must be distinct"));
            }
        }
        if let Some(a) = &self.analysis {
            let [lo, hi] = a.window_ns;
            if !(lo < hi) || lo < 0.0 {
                return Err(invalid(format!("[analysis] window [{lo}, {hi}) is empty or negative")));
            }
            if let Some(p) = &self.pulse {
                if hi > p.period_ns {
                    return Err(invalid("[analysis] window extends past the pulse record"));
                }
            }
        }
        if let Some(h) = &self.herald {
            if h.m_min == 0 || h.m_min > h.m_max {
                return Err(invalid("[herald] needs 1 <= m_min <= m_max"));
            }
            if h.scenario.is_empty() {
                return Err(invalid("[herald] needs at least one [[herald.scenario]]"));
            }
            if let Some(t) = h.trial_time_s {
                if !(t > 0.0) {
                    return Err(invalid("[herald] trial_time_s must be > 0"));
                }
            }
            h.baseline.params().validate().map_err(invalid)?;
            for s in &h.scenario {
                s.params().validate().map_err(invalid)?;
            }
        }
        Ok(())
    }

    pub fn vipa_spec(&self) -> Result<VipaSpec, CliError> {
        Ok(self.vipa.as_ref().ok_or_else(|| missing("vipa"))?.spec())
    }

    pub fn optical_layout(&self) -> Result<OpticalLayout, CliError> {
        let l = self.layout.as_ref().ok_or_else(|| missing("layout"))?;
        Ok(OpticalLayout {
            lambda0_nm: l.lambda0_nm,
            beam_radius_mm: l.beam_radius_mm,
            theta_in_rad: l.theta_in_deg.to_radians(),
            f_in_mm: l.f_in_mm,
            f_x_mm: l.f_x_mm,
            f_y_mm: l.f_y_mm,
        })
    }

    /// Etalon as used by the forward model: trimmed to resonance when asked.
    pub fn model_vipa(&self) -> Result<VipaSpec, CliError> {
        let vipa = self.vipa_spec()?;
        let layout = self.optical_layout()?;
        let tune = self.layout.as_ref().is_some_and(|l| l.tune_to_resonance);
        Ok(if tune {
            vipa.tuned_to_resonance(layout.lambda0_nm, layout.theta_in_rad).1
        } else {
            vipa
        })
    }

    pub fn design_goal(&self, fwhm_override: Option<f64>) -> Result<DesignGoal, CliError> {
        let d = self.design.as_ref().ok_or_else(|| missing("design"))?;
        let l = self.layout.as_ref().ok_or_else(|| missing("layout"))?;
        Ok(DesignGoal {
            lambda0_nm: l.lambda0_nm,
            delta_nu_mhz: d.delta_nu_mhz,
            pitch_um: d.pitch_um,
            fwhm_target_mhz: fwhm_override.or(d.fwhm_target_mhz),
            beam_radius_mm: l.beam_radius_mm,
            y_element_um: d.y_element_um,
            theta_in_target_rad: l.theta_in_deg.to_radians(),
            resonance: match d.resonance {
                ResonanceChoice::TrimThickness => ResonanceMode::TrimThickness,
                ResonanceChoice::Snap => ResonanceMode::Snap {
                    half_width_rad: d.snap_half_width_deg.to_radians(),
                },
            },
            f_in_candidate_mm: Some(d.f_in_candidate_mm.unwrap_or(l.f_in_mm)),
        })
    }

    pub fn profile_section(&self) -> Result<&ProfileSection, CliError> {
        self.profile.as_ref().ok_or_else(|| missing("profile"))
    }

    pub fn scenario(&self, seed: Option<u64>, pulses: Option<usize>) -> Result<SimScenario, CliError> {
        let sim = self.simulation.as_ref().ok_or_else(|| missing("simulation"))?;
        let array = self.array.as_ref().ok_or_else(|| missing("array"))?.spec();
        let mut pulse = self.pulse.as_ref().ok_or_else(|| missing("pulse"))?.spec();
        if let Some(n) = pulses {
            pulse.n_pulses = n;
        }
        Ok(SimScenario {
            vipa: self.model_vipa()?,
            layout: self.optical_layout()?,
            array,
            pulse,
            detunings_mhz: sim.detunings_mhz.clone(),
            alignment_offset_um: sim.alignment_offset_um,
            center_element: sim.center_element,
            eta_chain: sim.eta_chain,
            seed: seed.unwrap_or(self.seed),
        })
    }

    pub fn analysis_section(&self) -> AnalysisSection {
        self.analysis.clone().unwrap_or_default()
    }

    pub fn herald_section(&self) -> Result<&HeraldSection, CliError> {
        self.herald.as_ref().ok_or_else(|| missing("herald"))
    }
}

impl VipaSection {
    pub fn spec(&self) -> VipaSpec {
        VipaSpec {
            reflectivity_in: self.reflectivity_in,
            reflectivity_out: self.reflectivity_out,
            refractive_index: self.refractive_index,
            thickness_mm: self.thickness_mm,
            length_mm: self.length_mm,
        }
    }
}

impl ArraySection {
    pub fn spec(&self) -> SpadArraySpec {
        SpadArraySpec {
            n_elements: self.n_elements,
            element_pitch_um: self.element_pitch_um,
            pixels_per_element: self.pixels_per_element,
            dcr_cps: self.dcr_cps,
            pde: self.pde,
            time_resolution_ns: self.time_resolution_ns,
            dead_time_ns: self.dead_time_ns,
        }
    }
}

impl PulseSection {
    pub fn spec(&self) -> PulseSpec {
        PulseSpec {
            fwhm_ns: self.fwhm_ns,
            mean_photons: self.mean_photons,
            n_pulses: self.n_pulses,
            period_ns: self.period_ns,
            center_time_ns: self.center_time_ns,
        }
    }
}
