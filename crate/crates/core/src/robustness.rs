//! Stability margins of black-box loops, found by bisecting over injected
//! gain and delay, plus the series unmodeled-dynamics test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::Controller;
use crate::lti::{discretize_zoh, tf_to_ss, LtiError, Series, StateSpace, TransferFunction};
use crate::metrics::{
    compute_all, find_step, settled_to_reference, MetricOptions, MetricsReport, Verdict,
};
use crate::sim::{
    run_closed_loop, InjectionKind, LoopTopology, Reference, SimError, TrajectoryLog,
};

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("nominal loop is unstable; margins are undefined")]
    NominalUnstable,
    #[error("invalid search parameters: {0}")]
    Search(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Lti(#[from] LtiError),
}

/// Growth factor on the tail RMS that counts as a growing oscillation.
pub const ENVELOPE_GROWTH: f64 = 1.2;
/// Share of the log in each envelope window.
pub const ENVELOPE_WINDOW: f64 = 0.2;
/// Peak error rate, per unit step per second, below which a probe is at rest.
pub const AT_REST: f64 = 1e-6;
/// Minimum peak shrink between the last two windows for an unsettled probe
/// to count as decaying.
pub const PROBE_DECAY: f64 = 1.05;

/// RMS of `e` about its mean over the last 20% of samples and over the
/// 20% before that, or `None` when too short.
fn envelope_pair(e: &[f64]) -> Option<(f64, f64)> {
    let w = (e.len() as f64 * ENVELOPE_WINDOW).floor() as usize;
    if w < 2 {
        return None;
    }
    let both = &e[e.len() - 2 * w..];
    let mean = both.iter().sum::<f64>() / both.len() as f64;
    let rms =
        |s: &[f64]| (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
    Some((rms(&both[..w]), rms(&both[w..])))
}

/// True when the RMS of `e` (about its mean) over the last 20% of samples
/// exceeds 1.2 times that over the preceding 20%, and is above `floor`.
pub fn envelope_growing(e: &[f64], floor: f64) -> bool {
    envelope_pair(e).is_some_and(|(prev, last)| last > floor && last > ENVELOPE_GROWTH * prev)
}

fn envelope_floor(log: &TrajectoryLog) -> f64 {
    let scale = find_step(log).map_or(1.0, |s| s.amplitude().abs().max(1.0));
    1e-6 * scale
}

/// Time of the last change in what drives the loop: reference steps and
/// injector on/off edges. Envelope windows start after it, so that noise
/// switching on is not mistaken for growth.
pub fn last_excitation(topology: &LoopTopology, reference: &Reference) -> f64 {
    topology
        .injectors
        .iter()
        .flat_map(|i| std::iter::once(i.start).chain(i.stop))
        .fold(reference.at, f64::max)
}

/// Envelope rule applied to the part of the log after `quiet_from`.
pub fn growing_after(log: &TrajectoryLog, quiet_from: f64) -> bool {
    let k0 = log.t.partition_point(|&t| t < quiet_from);
    envelope_growing(&log.e[k0..], envelope_floor(log))
}

pub fn is_unstable(log: &TrajectoryLog, quiet_from: f64) -> bool {
    log.diverged || growing_after(log, quiet_from)
}

/// Stability as judged by margin probes: bounded, not growing, and either
/// settled, at rest, or with the peak rate of change of the error still
/// shrinking by `PROBE_DECAY`. Judging convergence rather than tracking keeps
/// loops with a steady offset, and lightly damped loops that need longer
/// than the horizon to enter the band, from counting as unstable. Sustained
/// limit cycles keep a constant peak rate and fail.
pub fn probe_stable(log: &TrajectoryLog, opts: &MetricOptions, quiet_from: f64) -> bool {
    if is_unstable(log, quiet_from) {
        return false;
    }
    if settled_to_reference(log, opts) {
        return true;
    }
    let k0 = log.t.partition_point(|&t| t < quiet_from);
    let rate: Vec<f64> = log.e[k0..]
        .windows(2)
        .map(|p| ((p[1] - p[0]) / log.dt).abs())
        .collect();
    let w = (rate.len() as f64 * ENVELOPE_WINDOW).floor() as usize;
    if w < 2 {
        return false;
    }
    let peak = |s: &[f64]| s.iter().fold(0.0f64, |m, &v| m.max(v));
    let (prev, last) = (
        peak(&rate[rate.len() - 2 * w..rate.len() - w]),
        peak(&rate[rate.len() - w..]),
    );
    let scale = find_step(log).map_or(1.0, |s| s.amplitude().abs());
    last <= AT_REST * scale || last * PROBE_DECAY < prev
}

/// Diverged or growing; otherwise split on whether it settled.
pub fn stability_verdict(log: &TrajectoryLog, opts: &MetricOptions, quiet_from: f64) -> Verdict {
    if is_unstable(log, quiet_from) {
        Verdict::Diverged
    } else if settled_to_reference(log, opts) {
        Verdict::StableSettled
    } else {
        Verdict::StableNotSettled
    }
}

/// One loop configuration that margin searches perturb.
#[derive(Debug, Clone)]
pub struct Probe {
    pub topology: LoopTopology,
    pub reference: Reference,
    pub tf: f64,
    pub dt: f64,
    /// With no seeds, sensor noise is removed. Otherwise every noise
    /// injector is reseeded per entry and the worst outcome counts.
    pub noise_seeds: Vec<u64>,
    pub options: MetricOptions,
}

impl Probe {
    pub fn new(topology: LoopTopology, reference: Reference, tf: f64) -> Self {
        let dt = topology.dt();
        Self {
            topology,
            reference,
            tf,
            dt,
            noise_seeds: Vec::new(),
            options: MetricOptions::default(),
        }
    }

    fn variants(&self, gain: f64, extra_delay: usize) -> Vec<LoopTopology> {
        let mut base = self.topology.clone();
        base.input_gain *= gain;
        base.actuator.delay_steps += extra_delay;
        if self.noise_seeds.is_empty() {
            return vec![base.without_noise()];
        }
        self.noise_seeds
            .iter()
            .map(|&seed| {
                let mut t = base.clone();
                let noisy = t
                    .injectors
                    .iter_mut()
                    .filter(|i| i.kind == InjectionKind::SensorNoise);
                for (k, inj) in noisy.enumerate() {
                    inj.seed = seed.wrapping_add(k as u64);
                }
                t
            })
            .collect()
    }

    /// Whether the loop with `gain` and `extra_delay` samples fails to
    /// stay bounded and settle.
    pub fn unstable(
        &self,
        ctrl: &mut dyn Controller,
        gain: f64,
        extra_delay: usize,
    ) -> Result<bool, SimError> {
        let quiet_from = last_excitation(&self.topology, &self.reference);
        for topo in self.variants(gain, extra_delay) {
            let log = run_closed_loop(&topo, ctrl, &self.reference, self.tf, self.dt)?;
            if !probe_stable(&log, &self.options, quiet_from) {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSearch {
    pub k_max: f64,
    pub k_min: f64,
    pub tol_db: f64,
}

impl Default for GainSearch {
    fn default() -> Self {
        Self {
            k_max: 64.0,
            k_min: 1.0 / 64.0,
            tol_db: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySearch {
    /// Longest delay tried, seconds.
    pub d_max: f64,
}

impl Default for DelaySearch {
    fn default() -> Self {
        Self { d_max: 5.0 }
    }
}

/// A margin with the pair of values that straddle the stability boundary.
/// `unstable` is `None` when the search cap was reached without losing
/// stability; `value` is then a bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracketed {
    pub value: f64,
    pub stable: f64,
    pub unstable: Option<f64>,
}

impl Bracketed {
    pub fn at_bound(&self) -> bool {
        self.unstable.is_none()
    }
}

pub fn to_db(k: f64) -> f64 {
    20.0 * k.log10()
}

/// Largest `k >= 1` (`upper`) and smallest `k <= 1` (`lower`) input gains
/// that keep the loop stable, by bisection on `log k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainMargins {
    pub upper: Bracketed,
    pub lower: Bracketed,
}

impl GainMargins {
    pub fn upper_db(&self) -> f64 {
        to_db(self.upper.value)
    }
    pub fn lower_db(&self) -> f64 {
        to_db(self.lower.value)
    }
}

fn bisect_log(
    probe: &Probe,
    ctrl: &mut dyn Controller,
    mut stable: f64,
    mut unstable: f64,
    tol_db: f64,
) -> Result<(f64, f64), SimError> {
    while (to_db(unstable) - to_db(stable)).abs() > tol_db {
        let mid = (stable * unstable).sqrt();
        if probe.unstable(ctrl, mid, 0)? {
            unstable = mid;
        } else {
            stable = mid;
        }
    }
    Ok((stable, unstable))
}

pub fn empirical_gain_margin(
    probe: &Probe,
    ctrl: &mut dyn Controller,
    search: &GainSearch,
) -> Result<GainMargins, RobustnessError> {
    if !(search.k_max > 1.0 && search.k_min > 0.0 && search.k_min < 1.0 && search.tol_db > 0.0) {
        return Err(RobustnessError::Search(format!("{search:?}")));
    }
    if probe.unstable(ctrl, 1.0, 0)? {
        return Err(RobustnessError::NominalUnstable);
    }
    let upper = if probe.unstable(ctrl, search.k_max, 0)? {
        let (s, u) = bisect_log(probe, ctrl, 1.0, search.k_max, search.tol_db)?;
        Bracketed {
            value: s,
            stable: s,
            unstable: Some(u),
        }
    } else {
        Bracketed {
            value: search.k_max,
            stable: search.k_max,
            unstable: None,
        }
    };
    let lower = if probe.unstable(ctrl, search.k_min, 0)? {
        let (s, u) = bisect_log(probe, ctrl, 1.0, search.k_min, search.tol_db)?;
        Bracketed {
            value: s,
            stable: s,
            unstable: Some(u),
        }
    } else {
        Bracketed {
            value: search.k_min,
            stable: search.k_min,
            unstable: None,
        }
    };
    Ok(GainMargins { upper, lower })
}

/// Longest added input delay, in whole samples, that keeps the loop stable.
pub fn empirical_delay_margin(
    probe: &Probe,
    ctrl: &mut dyn Controller,
    search: &DelaySearch,
) -> Result<Bracketed, RobustnessError> {
    if !(search.d_max > 0.0) {
        return Err(RobustnessError::Search(format!("{search:?}")));
    }
    if probe.unstable(ctrl, 1.0, 0)? {
        return Err(RobustnessError::NominalUnstable);
    }
    let max_steps = (search.d_max / probe.dt).round() as usize;
    if !probe.unstable(ctrl, 1.0, max_steps)? {
        let d = max_steps as f64 * probe.dt;
        return Ok(Bracketed {
            value: d,
            stable: d,
            unstable: None,
        });
    }
    let (mut lo, mut hi) = (0usize, max_steps);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if probe.unstable(ctrl, 1.0, mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (s, u) = (lo as f64 * probe.dt, hi as f64 * probe.dt);
    Ok(Bracketed {
        value: s,
        stable: s,
        unstable: Some(u),
    })
}

/// The delay margin acceptance rule: DM above a tenth of the rise time.
pub fn dm_rule(dm_s: f64, t_r: f64) -> bool {
    dm_s > 0.1 * t_r
}

#[derive(Debug, Clone, PartialEq)]
pub struct RohrsOutcome {
    pub pass: bool,
    pub report: MetricsReport,
    pub warning: Option<String>,
}

/// Insert `gu` in series at the plant input (replacing any existing series
/// block) and check that the loop still settles onto the reference.
pub fn rohrs_test(
    topology: &LoopTopology,
    ctrl: &mut dyn Controller,
    gu: &TransferFunction,
    reference: &Reference,
    tf: f64,
    opts: &MetricOptions,
) -> Result<RohrsOutcome, RobustnessError> {
    let dc = gu.dc_gain();
    let warning = ((dc - 1.0).abs() > 1e-9).then(|| format!("series block DC gain is {dc}, not 1"));
    let mut topo = topology.clone();
    topo.series_uncertainty = Some(discretize_zoh(&tf_to_ss(gu)?, topo.dt())?);
    let log = run_closed_loop(&topo, ctrl, reference, tf, topo.dt())?;
    let verdict = stability_verdict(&log, opts, last_excitation(&topo, reference));
    let mut report = compute_all(&log, opts);
    report.verdict = Some(verdict);
    let pass = verdict == Verdict::StableSettled;
    report.rohrs_pass = Some(pass);
    Ok(RohrsOutcome {
        pass,
        report,
        warning,
    })
}

/// Open loop `C(s) k G_u(s) P(s) e^{-s tau}` for the analytic cross-check.
pub fn analytic_open_loop(
    controller: &TransferFunction,
    plant: &StateSpace,
    series: Option<&TransferFunction>,
    gain: f64,
    delay_s: f64,
) -> Series {
    let mut l = Series::new()
        .then(controller.clone())
        .then(plant.clone())
        .with_gain(gain)
        .with_delay(delay_s);
    if let Some(g) = series {
        l = l.then(g.clone());
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::{Pid, PidConfig};

    fn sine_log(growth: f64) -> TrajectoryLog {
        let dt = 0.01;
        let n = 3000;
        let t: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let e: Vec<f64> = t
            .iter()
            .map(|&t| (growth * t).exp() * (2.0 * t).sin())
            .collect();
        TrajectoryLog {
            dt,
            r: vec![1.0; t.len()],
            y: e.iter().map(|e| 1.0 - e).collect(),
            y_m: e.iter().map(|e| 1.0 - e).collect(),
            u_c: vec![0.0; t.len()],
            u_ac: vec![0.0; t.len()],
            e,
            t,
            diverged: false,
        }
    }

    #[test]
    fn envelope_rule_against_known_growth() {
        // Windows are 6 s apart, so RMS ratio is exp(6 sigma).
        let threshold = ENVELOPE_GROWTH.ln() / 6.0;
        assert!(is_unstable(&sine_log(threshold * 1.2), 0.0));
        assert!(!is_unstable(&sine_log(threshold * 0.8), 0.0));
        assert!(!is_unstable(&sine_log(-0.1), 0.0));
        assert_eq!(
            stability_verdict(&sine_log(0.05), &MetricOptions::default(), 0.0),
            Verdict::Diverged
        );
    }

    #[test]
    fn verdict_splits_settled_and_offset() {
        let settled = sine_log(-1.0);
        assert_eq!(
            stability_verdict(&settled, &MetricOptions::default(), 0.0),
            Verdict::StableSettled
        );
        let mut offset = sine_log(-1.0);
        offset.y.iter_mut().for_each(|y| *y -= 0.5);
        offset.e.iter_mut().for_each(|e| *e += 0.5);
        assert_eq!(
            stability_verdict(&offset, &MetricOptions::default(), 0.0),
            Verdict::StableNotSettled
        );
    }

    fn integrator_probe(dt: f64, tf: f64) -> Probe {
        let tf_int = TransferFunction::new(vec![1.0], vec![1.0, 0.0]).unwrap();
        let plant = discretize_zoh(&tf_to_ss(&tf_int).unwrap(), dt).unwrap();
        let mut topo = LoopTopology::new(plant);
        topo.actuator.delay_steps = (1.0 / dt).round() as usize;
        Probe::new(topo, Reference::step(1.0, 0.0), tf)
    }

    #[test]
    fn gain_margin_of_delayed_integrator() {
        let dt = 0.001;
        let probe = integrator_probe(dt, 60.0);
        let mut p = Pid::new("p", PidConfig::pd(1.0, 0.0), dt).unwrap();
        let gm = empirical_gain_margin(&probe, &mut p, &GainSearch::default()).unwrap();
        let analytic = to_db(std::f64::consts::FRAC_PI_2);
        assert!(
            (gm.upper_db() - analytic).abs() < 0.5,
            "{} vs {analytic}",
            gm.upper_db()
        );
        let b = gm.upper;
        assert!(to_db(b.unstable.unwrap()) - to_db(b.stable) <= 0.1 + 1e-12);
        assert!(gm.lower.at_bound());
    }

    #[test]
    fn margins_refuse_unstable_nominal() {
        let dt = 0.001;
        let probe = integrator_probe(dt, 30.0);
        let mut p = Pid::new("p", PidConfig::pd(3.0, 0.0), dt).unwrap();
        assert!(matches!(
            empirical_gain_margin(&probe, &mut p, &GainSearch::default()),
            Err(RobustnessError::NominalUnstable)
        ));
        assert!(matches!(
            empirical_delay_margin(&probe, &mut p, &DelaySearch::default()),
            Err(RobustnessError::NominalUnstable)
        ));
    }

    #[test]
    fn delay_margin_is_whole_samples() {
        let dt = 0.01;
        let mut probe = integrator_probe(dt, 60.0);
        probe.topology.actuator.delay_steps = 0;
        let mut p = Pid::new("p", PidConfig::pd(1.0, 0.0), dt).unwrap();
        let dm = empirical_delay_margin(&probe, &mut p, &DelaySearch::default()).unwrap();
        let steps = dm.value / dt;
        assert!((steps - steps.round()).abs() < 1e-9);
        assert!(
            (dm.value - std::f64::consts::FRAC_PI_2).abs() < 0.05 * std::f64::consts::FRAC_PI_2
        );
        assert!((dm.unstable.unwrap() - dm.stable - dt).abs() < 1e-12);
    }

    #[test]
    fn identity_series_block_matches_nominal() {
        let dt = 0.01;
        let mut probe = integrator_probe(dt, 20.0);
        probe.topology.actuator.delay_steps = 0;
        let mut p = Pid::new("p", PidConfig::pd(1.0, 0.0), dt).unwrap();
        let one = TransferFunction::gain(1.0);
        let out = rohrs_test(
            &probe.topology,
            &mut p,
            &one,
            &probe.reference,
            20.0,
            &MetricOptions::default(),
        )
        .unwrap();
        let nominal = run_closed_loop(&probe.topology, &mut p, &probe.reference, 20.0, dt).unwrap();
        let direct = compute_all(&nominal, &MetricOptions::default());
        assert!(out.pass);
        assert!(out.warning.is_none());
        assert_eq!(out.report.ise, direct.ise);
        let half = TransferFunction::gain(0.5);
        let warned = rohrs_test(
            &probe.topology,
            &mut p,
            &half,
            &probe.reference,
            20.0,
            &MetricOptions::default(),
        )
        .unwrap();
        assert!(warned.warning.is_some());
    }

    #[test]
    fn dm_rule_threshold() {
        assert!(dm_rule(0.3, 2.79));
        assert!(!dm_rule(0.2, 2.79));
    }
}
