use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use spectro_core::analysis::{
    build_time_histograms, estimate_shifts, fit_lorentzian, integrate_window,
    integrate_window_dark_subtracted, spatial_profile_csv, time_histograms_csv, LorentzianFit,
};
use spectro_core::design::{full_design, DesignResult};
use spectro_core::herald::{crossover_modes, heralding_rate, p_single, sweep, sweep_csv};
use spectro_core::optics::{intensity_grid, intensity_profile, Spectrometer};
use spectro_core::sim::{events_to_csv, events_to_truth_csv, parse_events, run_experiment};
use spectro_core::units::detuned_wavelength;

use crate::config::RunConfig;
use crate::CliError;

/// Files produced by a subcommand, written only after all of them exist.
#[derive(Default)]
pub struct Outputs(Vec<(String, String)>);

impl Outputs {
    fn add(&mut self, name: impl Into<String>, contents: String) {
        self.0.push((name.into(), contents));
    }

    pub fn write(self, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        self.0
            .into_iter()
            .map(|(name, contents)| {
                let path = dir.join(name);
                std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
                Ok(path)
            })
            .collect()
    }
}

/// File-name label of a detuning: `0MHz`, `+120MHz`, `-60.5MHz`.
pub fn detuning_label(mhz: f64) -> String {
    if mhz == 0.0 {
        "0MHz".into()
    } else {
        format!("{mhz:+}MHz")
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn core(e: spectro_core::Error) -> CliError {
    match e {
        spectro_core::Error::Infeasible { .. } => CliError::Infeasible(e.to_string()),
        spectro_core::Error::InvalidParameter { .. } | spectro_core::Error::InvalidLayout(_) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Runtime(other.into()),
    }
}

pub fn design(cfg: &RunConfig, fwhm_target: Option<f64>) -> Result<Outputs, CliError> {
    let vipa = cfg.vipa_spec()?;
    let goal = cfg.design_goal(fwhm_target)?;
    goal.validate().map_err(core)?;
    let result = full_design(&vipa, &goal).map_err(core)?;
    let mut out = Outputs::default();
    out.add("design.json", result.to_json() + "\n");
    out.add("design_report.txt", design_report(&result, goal.f_in_candidate_mm));
    Ok(out)
}

fn design_report(d: &DesignResult, f_in: Option<f64>) -> String {
    let mut r = String::new();
    let diag = |k: &str| d.diagnostic(k).unwrap_or(f64::NAN);
    let _ = writeln!(r, "incidence angle theta_in : {:.2} deg (order m = {})", d.theta_in_rad.to_degrees(), d.m);
    let _ = writeln!(r, "x focal length f_x       : {:.0} mm", d.f_x_mm);
    let _ = writeln!(
        r,
        "input focal length f_in  : {:.0} to {:.0} mm",
        d.f_in_interval.min_mm, d.f_in_interval.max_mm
    );
    if let Some(f) = f_in {
        let verdict = if d.f_in_interval.contains(f) { "inside" } else { "outside" };
        let _ = writeln!(r, "  candidate f_in {f:.0} mm  : {verdict} the interval");
    }
    let _ = writeln!(r, "y focal length f_y       : at most {:.1} mm", d.f_y_max_mm);
    let _ = writeln!(r, "resonant thickness       : {:.6} mm", diag("resonant_thickness_mm"));
    let _ = writeln!(r, "free spectral range      : {:.1} GHz", diag("fsr_ghz"));
    let _ = writeln!(r, "resolution FWHM_freq     : {:.0} MHz", diag("fwhm_freq_mhz"));
    let _ = writeln!(r, "finesse                  : {:.0}", diag("finesse"));
    let _ = writeln!(r, "virtual sources N        : {:.0}", diag("virtual_sources"));
    let _ = writeln!(r, "x spot FWHM              : {:.0} um", diag("beam_fwhm_x_um"));
    if let Some(t) = d.t_required_mm {
        let _ = writeln!(r, "thickness for target     : {t:.1} mm");
    }
    r
}

pub fn profile(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let p = cfg.profile_section()?;
    let vipa = cfg.model_vipa()?;
    let layout = cfg.optical_layout()?;
    let model = Spectrometer::new(vipa, layout).map_err(core)?;
    let mut out = Outputs::default();
    let mut summary = String::from("detuning_mhz,peak_x_um,fwhm_x_um\n");
    for &d in &p.detunings_mhz {
        let lambda = detuned_wavelength(layout.lambda0_nm, d);
        let label = detuning_label(d);
        let prof = intensity_profile(&vipa, &layout, lambda, (p.x_min_um, p.x_max_um), p.resolution_um).map_err(core)?;
        let guess = model.position_for_detuning(d);
        let peak = model
            .peak_position(lambda, guess - 30.0, guess + 30.0, p.resolution_um)
            .map_err(core)?;
        let width = prof.fwhm().map_or(f64::NAN, |w| w);
        let _ = writeln!(summary, "{d},{peak:e},{width:e}");
        out.add(format!("profile_{label}.csv"), prof.to_csv());
        if p.y_half_um > 0.0 {
            let grid = intensity_grid(
                &vipa,
                &layout,
                lambda,
                (p.x_min_um, p.x_max_um),
                (-p.y_half_um, p.y_half_um),
                p.grid_resolution_um,
            )
            .map_err(core)?;
            out.add(format!("grid_{label}.csv"), grid.to_csv());
        }
    }
    out.add("profile_summary.csv", summary);
    Ok(out)
}

pub fn simulate(cfg: &RunConfig, seed: Option<u64>, pulses: Option<usize>, truth: bool) -> Result<Outputs, CliError> {
    let scenario = cfg.scenario(seed, pulses)?;
    scenario.validate().map_err(core)?;
    let runs = run_experiment(&scenario).map_err(core)?;
    let mut out = Outputs::default();
    let mut manifest = String::from("detuning_mhz,file,events\n");
    for (d, events) in &runs {
        let label = detuning_label(*d);
        let name = format!("events_{label}.csv");
        let _ = writeln!(manifest, "{d},{name},{}", events.len());
        out.add(name, events_to_csv(events));
        if truth {
            out.add(format!("truth_{label}.csv"), events_to_truth_csv(events));
        }
    }
    let _ = writeln!(
        manifest,
        "# seed {} pulses {} mean_photons {}",
        scenario.seed, scenario.pulse.n_pulses, scenario.pulse.mean_photons
    );
    out.add("simulation.csv", manifest);
    Ok(out)
}

pub fn analyze(cfg: &RunConfig, events_dir: &Path, pulses: Option<usize>) -> Result<Outputs, CliError> {
    let scenario = cfg.scenario(None, pulses)?;
    let a = cfg.analysis_section();
    let window = (a.window_ns[0], a.window_ns[1]);
    if window.1 > scenario.pulse.period_ns {
        return Err(CliError::Config("[analysis] window extends past the pulse record".into()));
    }
    let n_pulses = scenario.pulse.n_pulses;
    if n_pulses == 0 {
        return Err(CliError::Config("analysis needs at least one pulse".into()));
    }
    let mut detunings = scenario.detunings_mhz.clone();
    detunings.sort_by(f64::total_cmp);

    let mut out = Outputs::default();
    let mut fits: Vec<LorentzianFit> = Vec::new();
    for &d in &detunings {
        let label = detuning_label(d);
        let path = events_dir.join(format!("events_{label}.csv"));
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(runtime)?;
        let events = parse_events(&text)
            .with_context(|| path.display().to_string())
            .map_err(runtime)?;
        let hists = build_time_histograms(&events, n_pulses, &scenario.array, scenario.pulse.period_ns)
            .with_context(|| path.display().to_string())
            .map_err(runtime)?;
        let profile = if a.dark_subtract {
            integrate_window_dark_subtracted(&hists, window)
        } else {
            integrate_window(&hists, window)
        }
        .map_err(core)?;
        let fit = fit_lorentzian(&profile, a.weighting)
            .with_context(|| format!("fitting {label}"))
            .map_err(runtime)?;
        out.add(format!("histograms_{label}.csv"), time_histograms_csv(&hists, &a.histogram_elements));
        out.add(format!("spatial_{label}.csv"), spatial_profile_csv(&profile, Some(&fit)));
        out.add(format!("fit_{label}.json"), fit.to_json() + "\n");
        fits.push(fit);
    }

    let mut report = String::new();
    let mut csv = String::from("detuning_mhz,center,shift,stderr,flagged\n");
    let shifts = if fits.len() >= 2 {
        estimate_shifts(&fits, &detunings).map_err(core)?
    } else {
        Vec::new()
    };
    for (f, s) in fits.iter().zip(&shifts) {
        let _ = writeln!(csv, "{},{:e},{:e},{:e},{}", s.detuning_mhz, f.center, s.shift, s.stderr, s.flagged);
        let _ = writeln!(
            report,
            "{:>+8} MHz: center {:.2} el., shift {:.2} ± {:.2} el.{}",
            s.detuning_mhz,
            f.center,
            s.shift,
            s.stderr,
            if s.flagged { " (fit not converged)" } else { "" }
        );
    }
    if shifts.is_empty() {
        let _ = writeln!(report, "one detuning only: no shifts");
    }
    out.add("shifts.csv", csv);
    out.add("analysis_report.txt", report);
    Ok(out)
}

pub fn herald(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let h = cfg.herald_section()?;
    let single = h.baseline.params();
    let scenarios: Vec<_> = h.scenario.iter().map(|s| s.params()).collect();
    let rows = sweep(&single, &scenarios, h.m_min..=h.m_max).map_err(core)?;
    let ps = p_single(&single).map_err(core)?;
    let mut report = String::new();
    let _ = writeln!(report, "single-mode success probability: {ps:.3e}");
    if let Some(tau) = h.trial_time_s {
        let _ = writeln!(report, "single-mode heralding rate: {:.3e} /s", heralding_rate(ps, tau).map_err(core)?);
    }
    for (k, s) in scenarios.iter().enumerate() {
        let term = s.per_mode_term();
        let line = match crossover_modes(&single, s) {
            Ok(m) => format!("multi-mode wins from M = {m}"),
            Err(e) => e.to_string(),
        };
        let _ = writeln!(
            report,
            "scenario {} (eta_vipa*eta_det = {:.3}, per-mode {term:.2e}): {line}",
            k + 2,
            s.eta_vipa * s.eta_det
        );
    }
    let mut out = Outputs::default();
    out.add("herald_sweep.csv", sweep_csv(&rows));
    out.add("herald_report.txt", report);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        assert_eq!(detuning_label(0.0), "0MHz");
        assert_eq!(detuning_label(-0.0), "0MHz");
        assert_eq!(detuning_label(120.0), "+120MHz");
        assert_eq!(detuning_label(-60.5), "-60.5MHz");
    }
}
