//! Tracking and control-effort criteria computed from a trajectory log.

use serde::de::{Deserializer, IgnoredAny, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::sim::TrajectoryLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    /// Settling band as a fraction of the step size.
    pub band: f64,
    /// Rise is declared when `y` comes within this fraction of the step
    /// size from `y_ss`. `0` demands reaching `y_ss` itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rise_tolerance: Option<f64>,
    /// Fraction of samples averaged for the steady-state value.
    pub ss_window: f64,
    /// Step-response metrics ignore samples at or after this time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_window_end: Option<f64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            band: 0.02,
            rise_tolerance: None,
            ss_window: 0.02,
            step_window_end: None,
        }
    }
}

impl MetricOptions {
    pub fn rise_tolerance(&self) -> f64 {
        self.rise_tolerance.unwrap_or(self.band)
    }
}

/// The reference step found in a log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub index: usize,
    pub time: f64,
    pub before: f64,
    pub after: f64,
}

impl StepInfo {
    pub fn amplitude(&self) -> f64 {
        self.after - self.before
    }
}

/// First change of the reference. A nonzero reference at the first sample
/// counts as a step from rest at that instant.
pub fn find_step(log: &TrajectoryLog) -> Option<StepInfo> {
    let r = &log.r;
    let first = *r.first()?;
    if first != 0.0 {
        return Some(StepInfo {
            index: 0,
            time: log.t[0],
            before: 0.0,
            after: first,
        });
    }
    let k = r.iter().position(|&v| v != first)?;
    Some(StepInfo {
        index: k,
        time: log.t[k],
        before: first,
        after: r[k],
    })
}

/// Mean of the final `fraction` of samples (at least one).
pub fn tail_mean(x: &[f64], fraction: f64) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let n = ((x.len() as f64 * fraction).ceil() as usize).clamp(1, x.len());
    let tail = &x[x.len() - n..];
    Some(tail.iter().sum::<f64>() / n as f64)
}

pub fn trapezoid(dt: f64, f: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut prev: Option<f64> = None;
    for v in f {
        if let Some(p) = prev {
            sum += 0.5 * (p + v) * dt;
        }
        prev = Some(v);
    }
    sum
}

/// Normalized integrals, each divided by the log span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrals {
    pub ise: f64,
    pub itae: f64,
    pub iace: f64,
    pub iacer: f64,
}

/// ISE, ITAE (time measured from `t0`), IACE and IACER (total variation).
pub fn integral_metrics(log: &TrajectoryLog, t0: f64) -> Integrals {
    let tf = log.span();
    if log.len() < 2 || tf <= 0.0 {
        return Integrals {
            ise: 0.0,
            itae: 0.0,
            iace: 0.0,
            iacer: 0.0,
        };
    }
    let dt = log.dt;
    let ise = trapezoid(dt, log.e.iter().map(|e| e * e));
    let start = log
        .t
        .iter()
        .position(|&t| t >= t0 - 0.5 * dt)
        .unwrap_or(log.len());
    let itae = trapezoid(
        dt,
        log.t[start..]
            .iter()
            .zip(&log.e[start..])
            .map(|(t, e)| (t - t0).max(0.0) * e.abs()),
    );
    let iace = trapezoid(dt, log.u_c.iter().map(|u| u.abs()));
    let iacer: f64 = log.u_c.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Integrals {
        ise: ise / tf,
        itae: itae / tf,
        iace: iace / tf,
        iacer: iacer / tf,
    }
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

// Linear interpolation of the crossing of `level` between samples k-1 and k.
fn crossing_time(t: &[f64], y: &[f64], k: usize, level: f64) -> f64 {
    if k == 0 {
        return t[0];
    }
    let (y0, y1) = (y[k - 1], y[k]);
    if y1 == y0 {
        return t[k];
    }
    let frac = ((level - y0) / (y1 - y0)).clamp(0.0, 1.0);
    t[k - 1] + frac * (t[k] - t[k - 1])
}

/// Step-response shape over a window of samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepShape {
    pub y_ss: Option<f64>,
    pub t_r: Option<f64>,
    pub m_p: Option<f64>,
    pub m_u: Option<f64>,
    pub t_s: Option<f64>,
}

/// Rise, overshoot, undershoot and settling on `t`, `y` for a step of size
/// `dr` at `t[0]`. Times are relative to `t[0]`.
pub fn step_shape(t: &[f64], y: &[f64], dr: f64, opts: &MetricOptions) -> StepShape {
    let mut out = StepShape::default();
    if t.is_empty() || dr == 0.0 || !dr.is_finite() {
        return out;
    }
    let Some(y_ss) = tail_mean(y, opts.ss_window) else {
        return out;
    };
    out.y_ss = Some(y_ss);
    let t0 = t[0];
    let s = dr.signum();
    let mag = dr.abs();
    let y0 = y[0];

    // Rise: first entry to within rise_tolerance of y_ss, in the step
    // direction.
    let level = y_ss - s * opts.rise_tolerance() * mag;
    let rise_idx = y
        .iter()
        .position(|&v| s * (v - level) >= 0.0)
        .map(|k| (k, level));
    if let Some((k, level)) = rise_idx {
        out.t_r = Some(crossing_time(t, y, k, level) - t0);
    }

    let peak = y.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(s * v));
    out.m_p = Some(((peak - s * y_ss) / mag * 100.0).max(0.0));

    let upto = rise_idx.map_or(y.len(), |(k, _)| k + 1);
    let dip = y[..upto].iter().fold(0.0f64, |m, &v| m.max(s * (y0 - v)));
    out.m_u = Some(dip / mag * 100.0);

    let half = opts.band * mag;
    let outside = |v: f64| (v - y_ss).abs() > half;
    out.t_s = match y.iter().rposition(|&v| outside(v)) {
        None => Some(0.0),
        Some(k) if k + 1 == y.len() => None,
        Some(k) => {
            let edge = if y[k] > y_ss {
                y_ss + half
            } else {
                y_ss - half
            };
            Some(crossing_time(t, y, k + 1, edge) - t0)
        }
    };
    out
}

/// Three-way outcome of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    StableSettled,
    StableNotSettled,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticMargins {
    pub gm_db: f64,
    pub pm_deg: f64,
    pub dm_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Units;

const UNITS: [(&str, &str); 20] = [
    ("t_r_unit", "s"),
    ("m_p_unit", "%"),
    ("m_u_unit", "%"),
    ("t_s_unit", "s"),
    ("e_ss_unit", "signal"),
    ("e_ss_point_unit", "signal"),
    ("y_ss_unit", "signal"),
    ("ise_unit", "signal^2"),
    ("itae_unit", "signal*s"),
    ("iace_unit", "input"),
    ("iacer_unit", "input/s"),
    ("uc_max_unit", "input"),
    ("uac_max_unit", "input"),
    ("gm_db_upper_unit", "dB"),
    ("gm_db_lower_unit", "dB"),
    ("gm_linear_upper_unit", "1"),
    ("gm_linear_lower_unit", "1"),
    ("dm_s_unit", "s"),
    ("step_time_unit", "s"),
    ("t_f_unit", "s"),
];

impl Serialize for Units {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(UNITS.len()))?;
        for (k, v) in UNITS {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for Units {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Units;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("unit annotations")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Units, A::Error> {
                while let Some(key) = map.next_key::<String>()? {
                    if !key.ends_with("_unit") {
                        return Err(serde::de::Error::custom(format!("unknown field `{key}`")));
                    }
                    map.next_value::<IgnoredAny>()?;
                }
                Ok(Units)
            }
        }
        d.deserialize_map(V)
    }
}

/// Per-controller scores. Undefined metrics are `None` (JSON `null`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub diverged: bool,
    pub verdict: Option<Verdict>,
    pub step_time: f64,
    pub step_amplitude: f64,
    pub t_f: f64,
    pub t_r: Option<f64>,
    pub m_p: Option<f64>,
    pub m_u: Option<f64>,
    pub t_s: Option<f64>,
    pub e_ss: Option<f64>,
    pub e_ss_point: Option<f64>,
    pub y_ss: Option<f64>,
    pub ise: Option<f64>,
    pub itae: Option<f64>,
    pub iace: Option<f64>,
    pub iacer: Option<f64>,
    pub uc_max: Option<f64>,
    pub uac_max: Option<f64>,
    pub gm_db_upper: Option<f64>,
    pub gm_db_lower: Option<f64>,
    pub gm_linear_upper: Option<f64>,
    pub gm_linear_lower: Option<f64>,
    /// The gain search hit its cap; the upper margin is at least this value.
    pub gm_upper_at_bound: Option<bool>,
    pub gm_lower_at_bound: Option<bool>,
    pub dm_s: Option<f64>,
    pub dm_at_bound: Option<bool>,
    pub dm_rule_pass: Option<bool>,
    pub rohrs_pass: Option<bool>,
    pub analytic: Option<AnalyticMargins>,
    pub latency_mean_s: Option<f64>,
    /// Human-readable notes on undefined metrics or failed probes.
    pub notes: Vec<String>,
    #[serde(flatten)]
    units: Units,
}

impl MetricsReport {
    /// Named numeric value, used for table rows.
    pub fn value(&self, key: &str) -> Option<f64> {
        match key {
            "t_r" => self.t_r,
            "m_p" => self.m_p,
            "m_u" => self.m_u,
            "t_s" => self.t_s,
            "e_ss" => self.e_ss,
            "e_ss_point" => self.e_ss_point,
            "ise" => self.ise,
            "itae" => self.itae,
            "iace" => self.iace,
            "iacer" => self.iacer,
            "uc_max" => self.uc_max,
            "uac_max" => self.uac_max,
            "gm_db_upper" => self.gm_db_upper,
            "gm_db_lower" => self.gm_db_lower,
            "gm_linear_upper" => self.gm_linear_upper,
            "gm_linear_lower" => self.gm_linear_lower,
            "dm_s" => self.dm_s,
            "rohrs_pass" => self.rohrs_pass.map(|p| if p { 1.0 } else { 0.0 }),
            "dm_rule_pass" => self.dm_rule_pass.map(|p| if p { 1.0 } else { 0.0 }),
            _ => None,
        }
    }

    /// A report for a run that produced no usable log.
    pub fn failed(note: impl Into<String>) -> Self {
        Self {
            diverged: true,
            verdict: Some(Verdict::Diverged),
            notes: vec![note.into()],
            ..Self::default()
        }
    }
}

/// Whether every sample in the steady-state window lies within the band
/// around the final reference. A sustained oscillation fails even when its
/// mean is on target.
pub fn settled_to_reference(log: &TrajectoryLog, opts: &MetricOptions) -> bool {
    let band = opts.band * find_step(log).map_or(1.0, |s| s.amplitude().abs());
    let n = log.len();
    if n == 0 {
        return false;
    }
    let w = ((n as f64 * opts.ss_window).ceil() as usize).clamp(1, n);
    let r_end = log.r[n - 1];
    log.y[n - w..].iter().all(|y| (r_end - y).abs() <= band)
}

/// CR1-CR9 plus undershoot and actuator peak. Robustness fields stay empty.
pub fn compute_all(log: &TrajectoryLog, opts: &MetricOptions) -> MetricsReport {
    let mut rep = MetricsReport {
        diverged: log.diverged,
        t_f: log.span(),
        ..MetricsReport::default()
    };
    let step = find_step(log);
    if let Some(s) = &step {
        rep.step_time = s.time;
        rep.step_amplitude = s.amplitude();
    }
    if log.diverged {
        rep.verdict = Some(Verdict::Diverged);
        rep.notes
            .push("run diverged; tracking metrics undefined".into());
        rep.uc_max = Some(max_abs(&log.u_c));
        rep.uac_max = Some(max_abs(&log.u_ac));
        return rep;
    }
    if log.is_empty() {
        rep.notes.push("empty log".into());
        return rep;
    }

    let t0 = step.map_or(log.t[0], |s| s.time);
    let ints = integral_metrics(log, t0);
    rep.ise = Some(ints.ise);
    rep.itae = Some(ints.itae);
    rep.iace = Some(ints.iace);
    rep.iacer = Some(ints.iacer);
    rep.uc_max = Some(max_abs(&log.u_c));
    rep.uac_max = Some(max_abs(&log.u_ac));

    let y_ss = tail_mean(&log.y, opts.ss_window);
    rep.y_ss = y_ss;
    let r_end = *log.r.last().expect("nonempty");
    rep.e_ss = y_ss.map(|y| r_end - y);
    rep.e_ss_point = log.y.last().map(|y| r_end - y);

    match step {
        None => rep
            .notes
            .push("no reference step; step-response metrics undefined".into()),
        Some(s) => {
            let end = opts.step_window_end.map_or(log.len(), |te| {
                log.t
                    .iter()
                    .position(|&t| t >= te - 0.5 * log.dt)
                    .unwrap_or(log.len())
            });
            if end <= s.index + 1 {
                rep.notes
                    .push("step window holds fewer than two samples".into());
            } else {
                let shape = step_shape(
                    &log.t[s.index..end],
                    &log.y[s.index..end],
                    s.amplitude(),
                    opts,
                );
                rep.t_r = shape.t_r;
                rep.m_p = shape.m_p;
                rep.m_u = shape.m_u;
                rep.t_s = shape.t_s;
                if shape.t_r.is_none() {
                    rep.notes.push(
                        "response never rises to the steady-state value; t_r undefined".into(),
                    );
                }
                if shape.t_s.is_none() {
                    rep.notes
                        .push("response does not settle inside the band; t_s undefined".into());
                }
            }
        }
    }
    rep.verdict = Some(if settled_to_reference(log, opts) {
        Verdict::StableSettled
    } else {
        Verdict::StableNotSettled
    });
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_from(
        dt: f64,
        tf: f64,
        r: impl Fn(f64) -> f64,
        y: impl Fn(f64) -> f64,
        u: impl Fn(f64) -> f64,
    ) -> TrajectoryLog {
        let n = (tf / dt).round() as usize;
        let t: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let rv: Vec<f64> = t.iter().map(|&t| r(t)).collect();
        let yv: Vec<f64> = t.iter().map(|&t| y(t)).collect();
        TrajectoryLog {
            dt,
            e: rv.iter().zip(&yv).map(|(r, y)| r - y).collect(),
            u_c: t.iter().map(|&t| u(t)).collect(),
            u_ac: t.iter().map(|&t| u(t)).collect(),
            y_m: yv.clone(),
            r: rv,
            y: yv,
            t,
            diverged: false,
        }
    }

    #[test]
    fn constant_output_steady_state() {
        let log = log_from(0.01, 1.0, |_| 1.0, |_| 1.0, |_| 0.0);
        let rep = compute_all(&log, &MetricOptions::default());
        assert_eq!(rep.y_ss, Some(1.0));
        assert_eq!(rep.e_ss, Some(0.0));
        assert_eq!(rep.t_r, Some(0.0));
        assert_eq!(rep.t_s, Some(0.0));
        assert_eq!(rep.verdict, Some(Verdict::StableSettled));
    }

    #[test]
    fn unit_error_integrals() {
        // e = 1 on [0, 1]: ISE = 1, ITAE = 1/2.
        let log = log_from(0.001, 1.0, |_| 1.0, |_| 0.0, |_| 0.0);
        let i = integral_metrics(&log, 0.0);
        assert!((i.ise - 1.0).abs() < 1e-12);
        assert!((i.itae - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ramp_total_variation() {
        let log = log_from(0.01, 3.0, |_| 0.0, |_| 0.0, |t| t.min(2.0) * 1.5);
        let i = integral_metrics(&log, 0.0);
        assert!((i.iacer - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_order_rise_matches_inversion() {
        // y = 1 - exp(-t), T_f = 10. Rise level is y_ss - 0.02.
        let log = log_from(0.001, 10.0, |_| 1.0, |t| 1.0 - (-t).exp(), |_| 0.0);
        let opts = MetricOptions::default();
        let rep = compute_all(&log, &opts);
        let y_ss = rep.y_ss.unwrap();
        let expect = -(1.0 - (y_ss - 0.02)).ln();
        assert!(
            (rep.t_r.unwrap() - expect).abs() < 1e-6,
            "{:?} vs {expect}",
            rep.t_r
        );
        // The strict reading (tolerance 0) lands near the end of the log.
        let strict = compute_all(
            &log,
            &MetricOptions {
                rise_tolerance: Some(0.0),
                ..opts
            },
        );
        assert!(strict.t_r.unwrap() > 9.5);
    }

    #[test]
    fn overshoot_and_undershoot() {
        let dt = 0.001;
        let log = log_from(
            dt,
            10.0,
            |_| 1.0,
            |t| 1.0 - (-t).exp() * (3.0 * t).cos(),
            |_| 0.0,
        );
        let rep = compute_all(&log, &MetricOptions::default());
        // Peak of 1 - e^-t cos 3t where tan 3t = -1/3.
        let tp = (std::f64::consts::PI - (1.0f64 / 3.0).atan()) / 3.0;
        let peak = 1.0 - (-tp).exp() * (3.0 * tp).cos();
        assert!((rep.m_p.unwrap() - (peak - rep.y_ss.unwrap()) * 100.0).abs() < 1e-3);
        assert_eq!(rep.m_u, Some(0.0));

        let dip = log_from(
            dt,
            5.0,
            |_| 1.0,
            |t| {
                if t < 0.5 {
                    -0.2 * t
                } else {
                    1.0 - (-(t - 0.5) * 5.0).exp() * 1.1
                }
            },
            |_| 0.0,
        );
        let rep = compute_all(&dip, &MetricOptions::default());
        assert!((rep.m_u.unwrap() - 10.0).abs() < 0.05);
    }

    #[test]
    fn settling_edge_cases() {
        let log = log_from(0.01, 4.0, |_| 1.0, |t| 1.0 - (-t).exp(), |_| 0.0);
        let wide = compute_all(
            &log,
            &MetricOptions {
                band: 1.0,
                ..MetricOptions::default()
            },
        );
        assert_eq!(wide.t_s, Some(0.0));
        let sine = log_from(0.01, 4.0, |_| 1.0, |t| 1.0 + (20.0 * t).sin(), |_| 0.0);
        let rep = compute_all(&sine, &MetricOptions::default());
        assert_eq!(rep.t_s, None);
        assert!(!rep.notes.is_empty());
    }

    #[test]
    fn delayed_step_measures_from_the_step() {
        let at = 1.0;
        let log = log_from(
            0.001,
            10.0,
            |t| if t >= at { 1.0 } else { 0.0 },
            |t| {
                if t >= at {
                    1.0 - (-(t - at)).exp()
                } else {
                    0.0
                }
            },
            |_| 0.0,
        );
        let base = log_from(0.001, 9.0, |_| 1.0, |t| 1.0 - (-t).exp(), |_| 0.0);
        let (a, b) = (
            compute_all(&log, &Default::default()),
            compute_all(&base, &Default::default()),
        );
        assert!((a.step_time - 1.0).abs() < 1e-12);
        assert!((a.t_r.unwrap() - b.t_r.unwrap()).abs() < 1e-3);
        assert!((a.t_s.unwrap() - b.t_s.unwrap()).abs() < 1e-3);
    }

    #[test]
    fn step_window_excludes_late_disturbance() {
        let log = log_from(
            0.001,
            10.0,
            |_| 1.0,
            |t| 1.0 - (-3.0 * t).exp() + if t >= 6.0 { 0.5 } else { 0.0 },
            |_| 0.0,
        );
        let full = compute_all(&log, &Default::default());
        assert!(full.t_s.unwrap() > 5.9);
        let windowed = compute_all(
            &log,
            &MetricOptions {
                step_window_end: Some(6.0),
                ..Default::default()
            },
        );
        assert!(windowed.t_s.unwrap() < 2.0);
    }

    #[test]
    fn offset_response_is_not_settled() {
        let log = log_from(0.01, 10.0, |_| 1.0, |t| 0.5 * (1.0 - (-t).exp()), |_| 0.0);
        let rep = compute_all(&log, &Default::default());
        assert_eq!(rep.verdict, Some(Verdict::StableNotSettled));
        assert!(rep.t_s.is_some());
    }

    #[test]
    fn diverged_log_has_no_tracking_metrics() {
        let mut log = log_from(0.01, 1.0, |_| 1.0, |t| t, |_| 2.0);
        log.diverged = true;
        let rep = compute_all(&log, &Default::default());
        assert!(rep.diverged);
        assert_eq!(rep.verdict, Some(Verdict::Diverged));
        assert!(rep.t_r.is_none() && rep.ise.is_none());
    }

    #[test]
    fn zero_log_zero_integrals() {
        let log = log_from(0.01, 2.0, |_| 0.0, |_| 0.0, |_| 0.0);
        let rep = compute_all(&log, &Default::default());
        assert_eq!(
            (rep.ise, rep.itae, rep.iace, rep.iacer),
            (Some(0.0), Some(0.0), Some(0.0), Some(0.0))
        );
        assert_eq!(rep.uc_max, Some(0.0));
    }

    #[test]
    fn report_json_carries_units_and_round_trips() {
        let log = log_from(0.01, 2.0, |_| 1.0, |t| 1.0 - (-t).exp(), |t| -3.0 * t);
        let rep = compute_all(&log, &Default::default());
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["t_r_unit"], "s");
        assert_eq!(json["m_p_unit"], "%");
        assert!(json["gm_db_upper"].is_null());
        let back: MetricsReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, rep);
        let mut bad = serde_json::to_value(&rep).unwrap();
        bad["typo_field"] = 1.into();
        assert!(serde_json::from_value::<MetricsReport>(bad).is_err());
    }
}
