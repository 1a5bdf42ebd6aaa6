//! Built-in controllers behind one stateful interface: `reset`, then `step`
//! at the controller rate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeConfig, BridgeError};
use crate::lti::{DiscreteModel, TransferFunction};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("unknown controller preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

/// Signals available to a controller at one update instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerInput {
    pub t: f64,
    pub r: f64,
    pub y_m: f64,
    pub e: f64,
    /// Modeled actuator output after rate limiting and saturation, before
    /// any transport delay, as of the previous simulation sample.
    pub u_applied: f64,
}

pub trait Controller: Send {
    fn name(&self) -> &str;

    /// Update period in seconds.
    fn rate(&self) -> f64;

    fn reset(&mut self) -> Result<(), ControllerError>;

    fn step(&mut self, input: &ControllerInput) -> Result<f64, ControllerError>;

    /// Linear map from loop error `e = r - y` to `u_c`, when one exists.
    fn lti_form(&self) -> Option<TransferFunction> {
        None
    }

    /// Mean wall-clock seconds per step for out-of-process controllers.
    fn mean_step_latency(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Positive error drives a positive command.
    #[default]
    Direct,
    /// For plants with negative gain: the command sign is flipped.
    Reverse,
}

impl Action {
    fn sign(self) -> f64 {
        match self {
            Action::Direct => 1.0,
            Action::Reverse => -1.0,
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_filter_tau() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidConfig {
    pub kp: f64,
    #[serde(default)]
    pub ki: f64,
    #[serde(default)]
    pub kd: f64,
    /// Back-calculation anti-windup gain.
    #[serde(default)]
    pub kaw: f64,
    #[serde(default = "default_true")]
    pub deriv_on_measurement: bool,
    #[serde(default = "default_filter_tau")]
    pub deriv_filter_tau: f64,
    #[serde(default)]
    pub action: Action,
}

impl PidConfig {
    pub fn pd(kp: f64, kd: f64) -> Self {
        Self {
            kp,
            ki: 0.0,
            kd,
            kaw: 0.0,
            deriv_on_measurement: true,
            deriv_filter_tau: default_filter_tau(),
            action: Action::Direct,
        }
    }

    pub fn validate(&self, dt_c: f64) -> Result<(), ControllerError> {
        let gains = [self.kp, self.ki, self.kd, self.kaw, self.deriv_filter_tau];
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(ControllerError::Config("PID gains must be finite".into()));
        }
        if self.deriv_filter_tau < 0.0 {
            return Err(ControllerError::Config(
                "deriv_filter_tau must be >= 0".into(),
            ));
        }
        // Small relative slack so that tau = 2*dt_c written in decimal passes.
        if self.kd != 0.0 && self.deriv_filter_tau < 2.0 * dt_c * (1.0 - 1e-9) {
            return Err(ControllerError::Config(format!(
                "deriv_filter_tau = {} must be >= 2*dt_c = {} when kd != 0",
                self.deriv_filter_tau,
                2.0 * dt_c
            )));
        }
        Ok(())
    }
}

/// Parallel PID with first-order filtered derivative and back-calculation
/// anti-windup.
#[derive(Debug, Clone)]
pub struct Pid {
    name: String,
    cfg: PidConfig,
    dt_c: f64,
    integral: f64,
    d_filt: f64,
    prev_signal: Option<f64>,
    u_prev: f64,
}

impl Pid {
    pub fn new(
        name: impl Into<String>,
        cfg: PidConfig,
        dt_c: f64,
    ) -> Result<Self, ControllerError> {
        check_rate(dt_c)?;
        cfg.validate(dt_c)?;
        Ok(Self {
            name: name.into(),
            cfg,
            dt_c,
            integral: 0.0,
            d_filt: 0.0,
            prev_signal: None,
            u_prev: 0.0,
        })
    }

    pub fn config(&self) -> &PidConfig {
        &self.cfg
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }
}

fn check_rate(dt_c: f64) -> Result<(), ControllerError> {
    if dt_c.is_finite() && dt_c > 0.0 {
        Ok(())
    } else {
        Err(ControllerError::Config(format!(
            "controller rate must be > 0, got {dt_c}"
        )))
    }
}

impl Controller for Pid {
    fn name(&self) -> &str {
        &self.name
    }

    fn rate(&self) -> f64 {
        self.dt_c
    }

    fn reset(&mut self) -> Result<(), ControllerError> {
        self.integral = 0.0;
        self.d_filt = 0.0;
        self.prev_signal = None;
        self.u_prev = 0.0;
        Ok(())
    }

    fn step(&mut self, input: &ControllerInput) -> Result<f64, ControllerError> {
        let sign = self.cfg.action.sign();
        let dt = self.dt_c;

        self.integral +=
            (sign * self.cfg.ki * input.e + self.cfg.kaw * (input.u_applied - self.u_prev)) * dt;

        // Derivative of -y_m (no kick on reference steps) or of e.
        let signal = if self.cfg.deriv_on_measurement {
            -input.y_m
        } else {
            input.e
        };
        let prev = self.prev_signal.unwrap_or(signal);
        let raw = (signal - prev) / dt;
        self.prev_signal = Some(signal);
        let alpha = dt / (self.cfg.deriv_filter_tau + dt);
        self.d_filt += alpha * (raw - self.d_filt);

        let u = sign * (self.cfg.kp * input.e + self.cfg.kd * self.d_filt) + self.integral;
        self.u_prev = u;
        Ok(u)
    }

    fn lti_form(&self) -> Option<TransferFunction> {
        // sign * (kp + ki/s + kd s / (tau s + 1)) over the common
        // denominator s (tau s + 1).
        let s = self.cfg.action.sign();
        let (kp, ki, kd, tau) = (
            self.cfg.kp,
            self.cfg.ki,
            self.cfg.kd,
            self.cfg.deriv_filter_tau,
        );
        let num = vec![s * (kp * tau + kd), s * (kp + ki * tau), s * ki];
        let den = vec![tau, 1.0, 0.0];
        let tf = TransferFunction::new(num, den).ok()?;
        Some(simplify_origin(tf))
    }
}

// Cancel a shared root at s = 0 (PD without integral action).
fn simplify_origin(tf: TransferFunction) -> TransferFunction {
    let (num, den) = (tf.num(), tf.den());
    if num.len() > 1 && num.last() == Some(&0.0) && den.last() == Some(&0.0) {
        let num = num[..num.len() - 1].to_vec();
        let den = den[..den.len() - 1].to_vec();
        return TransferFunction::new(num, den).unwrap_or(tf);
    }
    tf
}

fn default_ny() -> usize {
    120
}
fn default_nu() -> usize {
    1
}
fn default_lambda() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    #[serde(default = "default_ny")]
    pub ny: usize,
    #[serde(default = "default_nu")]
    pub nu: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub constrained: bool,
    /// Symmetric amplitude bound on `u_c`.
    #[serde(default)]
    pub u_bound: Option<f64>,
    /// Symmetric rate bound on `u_c`, per second.
    #[serde(default)]
    pub du_bound: Option<f64>,
}

impl MpcConfig {
    pub fn unconstrained(ny: usize, nu: usize, lambda: f64) -> Self {
        Self {
            ny,
            nu,
            lambda,
            constrained: false,
            u_bound: None,
            du_bound: None,
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.nu < 1 || self.nu > self.ny {
            return Err(ControllerError::Config(format!(
                "need 1 <= nu <= ny, got nu={} ny={}",
                self.nu, self.ny
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ControllerError::Config(
                "lambda must be finite and >= 0".into(),
            ));
        }
        for b in [self.u_bound, self.du_bound].into_iter().flatten() {
            if !(b > 0.0) {
                return Err(ControllerError::Config("MPC bounds must be > 0".into()));
            }
        }
        if self.constrained && self.nu > 1 {
            return Err(ControllerError::Config(
                "constrained MPC supports nu = 1 only".into(),
            ));
        }
        Ok(())
    }
}

/// Feasible interval for a single move `du` given `u_prev` and bounds.
pub fn move_interval(u_prev: f64, u_bound: Option<f64>, du_step_bound: Option<f64>) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    if let Some(b) = du_step_bound {
        lo = lo.max(-b);
        hi = hi.min(b);
    }
    if let Some(b) = u_bound {
        lo = lo.max(-b - u_prev);
        hi = hi.min(b - u_prev);
    }
    if lo > hi {
        // u_prev already outside the amplitude band: move toward it as far
        // as the rate bound allows.
        let mid = if hi < 0.0 { hi } else { lo };
        return (mid, mid);
    }
    (lo, hi)
}

/// Minimizer of `sum_i (res_i - g_i du)^2 + lambda du^2` over `[lo, hi]`.
/// The cost is a convex scalar quadratic, so clamping the free optimum is
/// exact.
pub fn solve_single_move(g: &[f64], residual: &[f64], lambda: f64, interval: (f64, f64)) -> f64 {
    let num: f64 = g.iter().zip(residual).map(|(g, r)| g * r).sum();
    let den: f64 = g.iter().map(|g| g * g).sum::<f64>() + lambda;
    (num / den).clamp(interval.0, interval.1)
}

/// Dynamic-matrix MPC with measured output bias correction.
///
/// Predictions over `ny` steps come from the internal model started at its
/// current state with the input held at `u_prev`; the bias `y_m - y_model`
/// shifts the whole prediction.
#[derive(Debug, Clone)]
pub struct Mpc {
    name: String,
    cfg: MpcConfig,
    model: DiscreteModel,
    /// Step-response coefficients g_1..g_ny.
    g: Vec<f64>,
    /// Rows C Ad^i for i = 1..ny.
    phi: DMatrix<f64>,
    /// Precomputed (G'G + lambda I)^-1 G' for nu > 1.
    gain_rows: Option<DMatrix<f64>>,
    x: DVector<f64>,
    scratch: DVector<f64>,
    u_prev: f64,
}

impl Mpc {
    /// `model` must be discretized at the controller rate.
    pub fn new(
        name: impl Into<String>,
        cfg: MpcConfig,
        model: DiscreteModel,
    ) -> Result<Self, ControllerError> {
        cfg.validate()?;
        if model.ninputs() != 1 || model.noutputs() != 1 {
            return Err(ControllerError::Config(
                "MPC internal model must be SISO".into(),
            ));
        }
        let n = model.nstates();
        let ny = cfg.ny;
        let mut phi = DMatrix::zeros(ny, n);
        let mut g = Vec::with_capacity(ny);
        let mut power = DMatrix::<f64>::identity(n, n);
        let mut acc = 0.0;
        for i in 0..ny {
            // g_{i+1} = sum_{j=0..i} C Ad^j Bd (+ D is ignored for the move).
            acc += (model.cd() * &power * model.bd())[(0, 0)];
            g.push(acc);
            power = model.ad() * power;
            phi.row_mut(i).copy_from(&(model.cd() * &power).row(0));
        }
        let den = g.iter().map(|v| v * v).sum::<f64>() + cfg.lambda;
        if den == 0.0 || !den.is_finite() {
            return Err(ControllerError::Config(
                "degenerate MPC: sum g_i^2 + lambda = 0".into(),
            ));
        }
        let gain_rows = if cfg.nu > 1 {
            let big_g = DMatrix::from_fn(ny, cfg.nu, |i, j| if i >= j { g[i - j] } else { 0.0 });
            let h = big_g.transpose() * &big_g + DMatrix::identity(cfg.nu, cfg.nu) * cfg.lambda;
            let inv = h
                .try_inverse()
                .ok_or_else(|| ControllerError::Config("singular MPC Hessian".into()))?;
            Some(inv * big_g.transpose())
        } else {
            None
        };
        Ok(Self {
            name: name.into(),
            cfg,
            g,
            phi,
            gain_rows,
            x: DVector::zeros(n),
            scratch: DVector::zeros(n),
            model,
            u_prev: 0.0,
        })
    }

    pub fn step_response(&self) -> &[f64] {
        &self.g
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    /// Residual `r - y_free(i) - bias` over the horizon.
    fn residual(&self, r: f64, y_m: f64) -> Vec<f64> {
        let bias = y_m - self.model.output_siso(&self.x, self.u_prev);
        let free = &self.phi * &self.x;
        free.iter()
            .zip(&self.g)
            .map(|(f, g)| r - (f + g * self.u_prev) - bias)
            .collect()
    }
}

impl Controller for Mpc {
    fn name(&self) -> &str {
        &self.name
    }

    fn rate(&self) -> f64 {
        self.model.dt()
    }

    fn reset(&mut self) -> Result<(), ControllerError> {
        self.x.fill(0.0);
        self.u_prev = 0.0;
        Ok(())
    }

    fn step(&mut self, input: &ControllerInput) -> Result<f64, ControllerError> {
        let residual = self.residual(input.r, input.y_m);
        let du = match &self.gain_rows {
            Some(k) => k.row(0).iter().zip(&residual).map(|(k, r)| k * r).sum(),
            None => {
                let interval = if self.cfg.constrained {
                    let dt = self.model.dt();
                    move_interval(
                        self.u_prev,
                        self.cfg.u_bound,
                        self.cfg.du_bound.map(|b| b * dt),
                    )
                } else {
                    (f64::NEG_INFINITY, f64::INFINITY)
                };
                solve_single_move(&self.g, &residual, self.cfg.lambda, interval)
            }
        };
        let u = self.u_prev + du;
        self.model.advance_siso(&mut self.x, &mut self.scratch, u);
        self.u_prev = u;
        Ok(u)
    }
}

/// Serializable controller description, as found in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    Pid {
        #[serde(flatten)]
        config: PidConfig,
        #[serde(default)]
        dt_c: Option<f64>,
    },
    Mpc {
        #[serde(flatten)]
        config: MpcConfig,
        #[serde(default)]
        dt_c: Option<f64>,
    },
    External {
        #[serde(flatten)]
        config: BridgeConfig,
    },
}

impl ControllerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ControllerSpec::Pid { .. } => "pid",
            ControllerSpec::Mpc { .. } => "mpc",
            ControllerSpec::External { .. } => "external",
        }
    }

    pub fn rate(&self, default_dt_c: f64) -> f64 {
        match self {
            ControllerSpec::Pid { dt_c, .. } | ControllerSpec::Mpc { dt_c, .. } => {
                dt_c.unwrap_or(default_dt_c)
            }
            ControllerSpec::External { config } => config.dt_c,
        }
    }

    /// Instantiate. `model_at` discretizes the nominal plant at a given rate
    /// for model-based controllers.
    pub fn build<F>(
        &self,
        name: &str,
        default_dt_c: f64,
        model_at: F,
    ) -> Result<Box<dyn Controller>, ControllerError>
    where
        F: FnOnce(f64) -> Result<DiscreteModel, ControllerError>,
    {
        let dt_c = self.rate(default_dt_c);
        Ok(match self {
            ControllerSpec::Pid { config, .. } => Box::new(Pid::new(name, config.clone(), dt_c)?),
            ControllerSpec::Mpc { config, .. } => {
                check_rate(dt_c)?;
                Box::new(Mpc::new(name, config.clone(), model_at(dt_c)?)?)
            }
            ControllerSpec::External { config } => Box::new(
                crate::bridge::BridgedController::launch(name, config.clone())?,
            ),
        })
    }
}

pub const PRESET_NAMES: [&str; 5] = ["C1", "C2", "C3", "C5", "C6"];

/// The comparison suite. PD presets are reverse-acting because the stock
/// yaw plant has a negative rudder-to-heading gain.
pub fn preset(name: &str) -> Result<ControllerSpec, ControllerError> {
    let pd = |kp: f64, kd: f64, kaw: f64| ControllerSpec::Pid {
        config: PidConfig {
            kaw,
            action: Action::Reverse,
            ..PidConfig::pd(kp, kd)
        },
        dt_c: None,
    };
    let spec = match name.to_ascii_uppercase().as_str() {
        "C1" => pd(6.0, 4.0, 0.0),
        "C2" => pd(2.0, 4.0, 0.0),
        "C3" => ControllerSpec::Mpc {
            config: MpcConfig::unconstrained(120, 1, 0.1),
            dt_c: None,
        },
        "C5" => ControllerSpec::Mpc {
            config: MpcConfig {
                constrained: true,
                u_bound: Some(20.0),
                du_bound: Some(30.0),
                ..MpcConfig::unconstrained(120, 1, 0.1)
            },
            dt_c: None,
        },
        "C6" => pd(6.0, 4.0, 4.0),
        _ => return Err(ControllerError::UnknownPreset(name.to_string())),
    };
    Ok(spec)
}
