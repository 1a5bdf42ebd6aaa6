//! Fixed-step closed-loop simulation.
//!
//! Per sample: measure, update the controller on its own grid, push the
//! command through rate limit, saturation, transport delay, input gain and
//! the optional series block, then advance the plant one step.

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{Controller, ControllerError, ControllerInput};
use crate::lti::DiscreteModel;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid loop configuration: {0}")]
    Config(String),
    #[error("controller `{name}` failed at t = {t}: {source}")]
    Controller {
        name: String,
        t: f64,
        #[source]
        source: ControllerError,
    },
    #[error("controller `{name}` returned non-finite command {value} at t = {t}")]
    NonFiniteCommand { name: String, t: f64, value: f64 },
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("trajectory has {0} samples; need at least 2")]
    TooShort(usize),
    #[error("time column is not uniformly spaced near t = {0}")]
    NonUniform(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `u_prev + clamp(u_cmd - u_prev, +-du_max*dt)`.
pub fn rate_limit(u_prev: f64, u_cmd: f64, du_max: f64, dt: f64) -> f64 {
    let step = du_max * dt;
    u_prev + (u_cmd - u_prev).clamp(-step, step)
}

pub fn saturate(u: f64, u_max: f64) -> f64 {
    u.clamp(-u_max, u_max)
}

/// Seeded white Gaussian samples. `sigma = 0` yields exact zeros.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    dist: Option<Normal<f64>>,
}

impl NoiseStream {
    pub fn new(seed: u64, sigma: f64) -> Self {
        let dist = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma checked positive"));
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist,
        }
    }

    pub fn sample(&mut self) -> f64 {
        match &self.dist {
            Some(d) => d.sample(&mut self.rng),
            None => 0.0,
        }
    }
}

pub fn gaussian_noise(seed: u64, sigma: f64, n: usize) -> Vec<f64> {
    let mut s = NoiseStream::new(seed, sigma);
    (0..n).map(|_| s.sample()).collect()
}

/// Fixed-length FIFO with a zero-filled prefix.
#[derive(Debug, Clone)]
pub struct DelayLine {
    buf: VecDeque<f64>,
}

impl DelayLine {
    pub fn new(steps: usize) -> Self {
        Self {
            buf: std::iter::repeat(0.0).take(steps).collect(),
        }
    }

    pub fn push(&mut self, u: f64) -> f64 {
        if self.buf.is_empty() {
            return u;
        }
        self.buf.push_back(u);
        self.buf.pop_front().unwrap_or(0.0)
    }

    pub fn reset(&mut self) {
        self.buf.iter_mut().for_each(|v| *v = 0.0);
    }
}

pub fn delay_buffer(input: &[f64], steps: usize) -> Vec<f64> {
    let mut line = DelayLine::new(steps);
    input.iter().map(|&u| line.push(u)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actuator {
    #[serde(default)]
    pub u_max: Option<f64>,
    #[serde(default)]
    pub du_max: Option<f64>,
    #[serde(default)]
    pub delay_steps: usize,
}

impl Actuator {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [("u_max", self.u_max), ("du_max", self.du_max)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(SimError::Config(format!(
                        "actuator.{name} must be > 0, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    InputDisturbance,
    OutputDisturbance,
    SensorNoise,
    ReferenceStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionEvent {
    pub kind: InjectionKind,
    pub start: f64,
    /// Absent means active until the end of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<f64>,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl InjectionEvent {
    pub fn step(kind: InjectionKind, start: f64, amplitude: f64) -> Self {
        Self {
            kind,
            start,
            stop: None,
            amplitude,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn noise(start: f64, sigma: f64, seed: u64) -> Self {
        Self {
            kind: InjectionKind::SensorNoise,
            start,
            stop: None,
            amplitude: 0.0,
            sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.start.is_finite() || self.start < 0.0 {
            return Err(SimError::Config(format!(
                "injector start must be finite and >= 0, got {}",
                self.start
            )));
        }
        if let Some(stop) = self.stop {
            if !(stop > self.start) {
                return Err(SimError::Config(format!(
                    "injector needs start < stop, got {} >= {stop}",
                    self.start
                )));
            }
        }
        if !self.amplitude.is_finite() {
            return Err(SimError::Config("injector amplitude must be finite".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(SimError::Config(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Active on `[start, stop)`. The half-sample slack keeps the switch
    /// instant robust to accumulated rounding in `k * dt`.
    pub fn active(&self, t: f64, dt: f64) -> bool {
        let eps = 0.5 * dt;
        t > self.start - eps && self.stop.map_or(true, |s| t < s - eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub amplitude: f64,
    #[serde(default)]
    pub at: f64,
}

impl Reference {
    pub fn step(amplitude: f64, at: f64) -> Self {
        Self { amplitude, at }
    }

    pub fn value(&self, t: f64, dt: f64) -> f64 {
        if t > self.at - 0.5 * dt {
            self.amplitude
        } else {
            0.0
        }
    }
}

/// Everything in the loop except the controller.
#[derive(Debug, Clone)]
pub struct LoopTopology {
    pub plant: DiscreteModel,
    pub actuator: Actuator,
    pub series_uncertainty: Option<DiscreteModel>,
    pub input_gain: f64,
    pub injectors: Vec<InjectionEvent>,
    /// Defaults to `50 * max(1, |r_step|)`.
    pub divergence_threshold: Option<f64>,
}

impl LoopTopology {
    pub fn new(plant: DiscreteModel) -> Self {
        Self {
            plant,
            actuator: Actuator::default(),
            series_uncertainty: None,
            input_gain: 1.0,
            injectors: Vec::new(),
            divergence_threshold: None,
        }
    }

    pub fn dt(&self) -> f64 {
        self.plant.dt()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.actuator.validate()?;
        if self.plant.ninputs() != 1 || self.plant.noutputs() != 1 {
            return Err(SimError::Config("plant must be SISO".into()));
        }
        if let Some(u) = &self.series_uncertainty {
            if u.ninputs() != 1 || u.noutputs() != 1 {
                return Err(SimError::Config("series uncertainty must be SISO".into()));
            }
            if (u.dt() - self.dt()).abs() > 1e-12 * self.dt() {
                return Err(SimError::Config(
                    "series uncertainty must share the plant sample time".into(),
                ));
            }
        }
        if !self.input_gain.is_finite() {
            return Err(SimError::Config("input_gain must be finite".into()));
        }
        for inj in &self.injectors {
            inj.validate()?;
        }
        Ok(())
    }

    /// Copy without sensor-noise injectors.
    pub fn without_noise(&self) -> Self {
        let mut t = self.clone();
        t.injectors.retain(|i| i.kind != InjectionKind::SensorNoise);
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub dt: f64,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub e: Vec<f64>,
    pub u_c: Vec<f64>,
    pub u_ac: Vec<f64>,
    pub y: Vec<f64>,
    pub y_m: Vec<f64>,
    pub diverged: bool,
}

pub const LOG_HEADER: [&str; 7] = ["t", "r", "e", "u_c", "u_ac", "y", "y_m"];

impl TrajectoryLog {
    fn with_capacity(dt: f64, n: usize) -> Self {
        let v = || Vec::with_capacity(n);
        Self {
            dt,
            t: v(),
            r: v(),
            e: v(),
            u_c: v(),
            u_ac: v(),
            y: v(),
            y_m: v(),
            diverged: false,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Duration covered, `t_last - t_first`.
    pub fn span(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    fn push(&mut self, row: [f64; 7]) {
        self.t.push(row[0]);
        self.r.push(row[1]);
        self.e.push(row[2]);
        self.u_c.push(row[3]);
        self.u_ac.push(row[4]);
        self.y.push(row[5]);
        self.y_m.push(row[6]);
    }

    pub fn row(&self, k: usize) -> [f64; 7] {
        [
            self.t[k],
            self.r[k],
            self.e[k],
            self.u_c[k],
            self.u_ac[k],
            self.y[k],
            self.y_m[k],
        ]
    }

    /// CSV with a fixed header and round-trip exact floats.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), LogError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(LOG_HEADER).map_err(csv_io)?;
        for k in 0..self.len() {
            wr.write_record(self.row(k).iter().map(|v| format!("{v:.16e}")))
                .map_err(csv_io)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is ascii")
    }

    /// Parse a log. Errors carry the 1-based line number. A non-finite
    /// sample marks the log diverged.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, LogError> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rd
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        let got: Vec<&str> = header.iter().map(str::trim).collect();
        if got != LOG_HEADER {
            return Err(parse_err(
                1,
                format!(
                    "expected header `{}`, got `{}`",
                    LOG_HEADER.join(","),
                    got.join(",")
                ),
            ));
        }
        let mut log = Self::with_capacity(0.0, 0);
        for rec in rd.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 7 {
                return Err(parse_err(
                    line,
                    format!("expected 7 fields, got {}", rec.len()),
                ));
            }
            let mut row = [0.0; 7];
            for (slot, (field, name)) in row.iter_mut().zip(rec.iter().zip(LOG_HEADER)) {
                *slot = field.trim().parse::<f64>().map_err(|_| {
                    parse_err(
                        line,
                        format!("column `{name}`: cannot parse `{field}` as a number"),
                    )
                })?;
            }
            if row.iter().any(|v| !v.is_finite()) {
                log.diverged = true;
            }
            log.push(row);
        }
        if log.len() < 2 {
            return Err(LogError::TooShort(log.len()));
        }
        let dt = (log.t[log.len() - 1] - log.t[0]) / (log.len() - 1) as f64;
        if !(dt > 0.0) {
            return Err(LogError::NonUniform(log.t[0]));
        }
        for w in log.t.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.max(1e-9) + 1e-9 {
                return Err(LogError::NonUniform(w[0]));
            }
        }
        log.dt = dt;
        Ok(log)
    }
}

fn parse_err(line: u64, msg: String) -> LogError {
    LogError::Parse { line, msg }
}

fn csv_io(e: csv::Error) -> LogError {
    LogError::Io(std::io::Error::other(e))
}

/// Number of `dt` steps in `span`, if `span` is an integer multiple.
pub fn steps_in(span: f64, dt: f64) -> Option<usize> {
    let n = (span / dt).round();
    ((n * dt - span).abs() <= 1e-9 * span.abs().max(dt) && n >= 0.0).then_some(n as usize)
}

/// Simulate `[0, tf]` at step `dt` (which must equal the plant's sample
/// time). The controller is reset first.
pub fn run_closed_loop(
    topology: &LoopTopology,
    controller: &mut dyn Controller,
    reference: &Reference,
    tf: f64,
    dt: f64,
) -> Result<TrajectoryLog, SimError> {
    topology.validate()?;
    if !(dt > 0.0) || (dt - topology.dt()).abs() > 1e-12 * dt {
        return Err(SimError::Config(format!(
            "dt = {dt} does not match plant sample time {}",
            topology.dt()
        )));
    }
    if !(tf > 0.0) {
        return Err(SimError::Config(format!("Tf must be > 0, got {tf}")));
    }
    let n_steps = steps_in(tf, dt)
        .ok_or_else(|| SimError::Config(format!("dt = {dt} does not divide Tf = {tf}")))?;
    let ratio = steps_in(controller.rate(), dt)
        .filter(|&r| r >= 1)
        .ok_or_else(|| {
            SimError::Config(format!(
                "controller rate {} is not a multiple of dt = {dt}",
                controller.rate()
            ))
        })?;

    let name = controller.name().to_string();
    controller.reset().map_err(|source| SimError::Controller {
        name: name.clone(),
        t: 0.0,
        source,
    })?;

    let r_scale = reference.amplitude.abs().max(
        topology
            .injectors
            .iter()
            .filter(|i| i.kind == InjectionKind::ReferenceStep)
            .map(|i| i.amplitude.abs())
            .fold(0.0, f64::max),
    );
    let threshold = topology
        .divergence_threshold
        .unwrap_or(50.0 * r_scale.max(1.0));

    let plant = &topology.plant;
    let mut x = DVector::zeros(plant.nstates());
    let mut x_scratch = DVector::zeros(plant.nstates());
    let mut z = topology
        .series_uncertainty
        .as_ref()
        .map(|m| DVector::zeros(m.nstates()));
    let mut z_scratch = z.clone();
    let mut delay = DelayLine::new(topology.actuator.delay_steps);
    let mut noise: Vec<(usize, NoiseStream)> = topology
        .injectors
        .iter()
        .enumerate()
        .filter(|(_, i)| i.kind == InjectionKind::SensorNoise)
        .map(|(k, i)| (k, NoiseStream::new(i.seed, i.sigma)))
        .collect();

    let mut log = TrajectoryLog::with_capacity(dt, n_steps + 1);
    let mut u_plant_prev = 0.0;
    let mut u_lim_prev = 0.0;
    let mut u_c = 0.0;

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        let mut r = reference.value(t, dt);
        let (mut d_i, mut d_o) = (0.0, 0.0);
        for inj in &topology.injectors {
            if inj.kind != InjectionKind::SensorNoise && inj.active(t, dt) {
                match inj.kind {
                    InjectionKind::InputDisturbance => d_i += inj.amplitude,
                    InjectionKind::OutputDisturbance => d_o += inj.amplitude,
                    InjectionKind::ReferenceStep => r += inj.amplitude,
                    InjectionKind::SensorNoise => {}
                }
            }
        }
        let mut n = 0.0;
        for (idx, stream) in &mut noise {
            if topology.injectors[*idx].active(t, dt) {
                n += stream.sample();
            }
        }

        let y = plant.output_siso(&x, u_plant_prev) + d_o;
        let y_m = y + n;
        let e = r - y_m;

        if !y.is_finite() || y.abs() > threshold {
            log.diverged = true;
            break;
        }

        if k % ratio == 0 {
            let input = ControllerInput {
                t,
                r,
                y_m,
                e,
                u_applied: u_lim_prev,
            };
            u_c = controller
                .step(&input)
                .map_err(|source| SimError::Controller {
                    name: name.clone(),
                    t,
                    source,
                })?;
            if !u_c.is_finite() {
                return Err(SimError::NonFiniteCommand {
                    name,
                    t,
                    value: u_c,
                });
            }
        }

        let mut u = u_c;
        if let Some(du_max) = topology.actuator.du_max {
            u = rate_limit(u_lim_prev, u, du_max, dt);
        }
        if let Some(u_max) = topology.actuator.u_max {
            u = saturate(u, u_max);
        }
        u_lim_prev = u;
        let u_ac = topology.input_gain * delay.push(u);

        let mut u_p = u_ac;
        if let (Some(m), Some(z), Some(zs)) =
            (&topology.series_uncertainty, z.as_mut(), z_scratch.as_mut())
        {
            u_p = m.output_siso(z, u_ac);
            m.advance_siso(z, zs, u_ac);
        }
        u_p += d_i;

        log.push([t, r, e, u_c, u_ac, y, y_m]);
        plant.advance_siso(&mut x, &mut x_scratch, u_p);
        u_plant_prev = u_p;
    }
    Ok(log)
}
