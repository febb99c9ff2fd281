//! Heralding probabilities of a single-photon-interference elementary link,
//! single-mode versus frequency-multiplexed, and the mode count at which
//! multiplexing wins.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// Photon generation probability per mode.
    pub p: f64,
    pub eta_det: f64,
    pub eta_vipa: f64,
    pub eta_wc: f64,
    pub alpha_db_per_km: f64,
    pub link_km: f64,
    pub modes: u64,
}

fn unit(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} not in [0, 1]")))
    }
}

impl LinkParams {
    /// Single-mode baseline: SSPD with η_det = 0.9, no spectrometer or
    /// wavelength conversion in the path.
    pub fn baseline() -> Self {
        LinkParams {
            p: 0.01,
            eta_det: 0.9,
            eta_vipa: 1.0,
            eta_wc: 1.0,
            alpha_db_per_km: 0.2,
            link_km: 100.0,
            modes: 1,
        }
    }

    /// Multiplexed link with the given spectrometer-plus-detector efficiency
    /// (stored in `eta_vipa`, `eta_det` = 1) and η_WC = 0.6.
    pub fn multiplexed(eta_vipa_det: f64, modes: u64) -> Self {
        LinkParams {
            eta_det: 1.0,
            eta_vipa: eta_vipa_det,
            eta_wc: 0.6,
            modes,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        unit("p", self.p)?;
        unit("eta_det", self.eta_det)?;
        unit("eta_vipa", self.eta_vipa)?;
        unit("eta_wc", self.eta_wc)?;
        if !(self.alpha_db_per_km.is_finite() && self.alpha_db_per_km >= 0.0) {
            return Err(Error::param("alpha_db_per_km", "must be >= 0"));
        }
        if !(self.link_km.is_finite() && self.link_km >= 0.0) {
            return Err(Error::param("link_km", "must be >= 0"));
        }
        if self.modes == 0 {
            return Err(Error::param("modes", "must be >= 1"));
        }
        Ok(())
    }

    /// Transmission over half the link.
    pub fn channel_transmission(&self) -> f64 {
        10f64.powf(-(self.alpha_db_per_km * self.link_km / 2.0) / 10.0)
    }

    /// Success probability of one mode of the multiplexed link.
    pub fn per_mode_term(&self) -> f64 {
        2.0 * self.p * self.eta_vipa * self.eta_det * self.eta_wc * self.channel_transmission()
    }

    pub fn with_modes(self, modes: u64) -> Self {
        LinkParams { modes, ..self }
    }
}

/// The four scenarios compared in the link study: the single-mode baseline
/// and multiplexed links at η_VIPA·η_det = 0.008, 0.09 and 0.35.
pub fn reference_scenarios() -> (LinkParams, Vec<LinkParams>) {
    (
        LinkParams::baseline(),
        [0.008, 0.09, 0.35].iter().map(|&e| LinkParams::multiplexed(e, 1)).collect(),
    )
}

/// 2 p η_det 10^(−αL/20).
pub fn p_single(params: &LinkParams) -> Result<f64> {
    params.validate()?;
    let v = 2.0 * params.p * params.eta_det * params.channel_transmission();
    if v > 1.0 {
        return Err(Error::InvalidRegime(format!("single-mode success probability {v} > 1")));
    }
    Ok(v)
}

/// 1 − (1 − q)^M with q the per-mode term.
pub fn p_multi(params: &LinkParams) -> Result<f64> {
    params.validate()?;
    let q = params.per_mode_term();
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidRegime(format!("per-mode success probability {q} outside [0, 1]")));
    }
    Ok(p_multi_from_term(q, params.modes))
}

fn p_multi_from_term(q: f64, modes: u64) -> f64 {
    if q >= 1.0 {
        return 1.0;
    }
    -(modes as f64 * (-q).ln_1p()).exp_m1()
}

/// Smallest M with p_multi(M) > p_single.
pub fn crossover_modes(single: &LinkParams, multi: &LinkParams) -> Result<u64> {
    let ps = p_single(single)?;
    p_multi(multi)?;
    let q = multi.per_mode_term();
    if q == 0.0 {
        return Err(Error::NeverCrosses("per-mode success probability is 0".into()));
    }
    if ps >= 1.0 {
        return Err(Error::NeverCrosses("single-mode success probability is 1".into()));
    }
    let pm = |m: u64| p_multi_from_term(q, m);
    let ratio = (-ps).ln_1p() / (-q).ln_1p();
    let mut m = if ratio.is_finite() { ratio.ceil().max(1.0) as u64 } else { 1 };
    while m > 1 && pm(m - 1) > ps {
        m -= 1;
    }
    while pm(m) <= ps {
        m += 1;
    }
    Ok(m)
}

/// Heralding rate for a trial time `tau_s`.
pub fn heralding_rate(probability: f64, tau_s: f64) -> Result<f64> {
    if !(tau_s.is_finite() && tau_s > 0.0) {
        return Err(Error::InvalidArgument("trial time must be > 0".into()));
    }
    Ok(probability / tau_s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub modes: u64,
    pub p_single: f64,
    pub p_multi: Vec<f64>,
}

/// Success probabilities for every M in `modes`, one column per scenario.
pub fn sweep(single: &LinkParams, scenarios: &[LinkParams], modes: RangeInclusive<u64>) -> Result<Vec<SweepRow>> {
    if modes.is_empty() || *modes.start() == 0 {
        return Err(Error::InvalidArgument("mode range must be nonempty and start at >= 1".into()));
    }
    let ps = p_single(single)?;
    modes
        .map(|m| {
            let p_multi = scenarios
                .iter()
                .map(|s| p_multi(&s.with_modes(m)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                modes: m,
                p_single: ps,
                p_multi,
            })
        })
        .collect()
}

/// `M,p_single,p_multi_s2,...`; multiplexed scenarios are numbered from 2.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let n = rows.first().map_or(0, |r| r.p_multi.len());
    let mut out = String::from("M,p_single");
    for k in 0..n {
        let _ = write!(out, ",p_multi_s{}", k + 2);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{:e}", r.modes, r.p_single);
        for v in &r.p_multi {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}
