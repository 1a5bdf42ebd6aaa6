//! Scenarios, batch runs across controllers, report rendering and
//! comparison against reference tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{preset, Controller, ControllerError, ControllerSpec};
use crate::lti::{discretize_zoh, tf_to_ss, DiscreteModel, LtiError, StateSpace, TransferFunction};
use crate::metrics::{compute_all, AnalyticMargins, MetricOptions, MetricsReport, Verdict};
use crate::robustness::{
    analytic_open_loop, dm_rule, empirical_delay_margin, empirical_gain_margin, last_excitation,
    stability_verdict, DelaySearch, GainSearch, Probe,
};
use crate::sim::{
    run_closed_loop, steps_in, Actuator, InjectionEvent, InjectionKind, LoopTopology, Reference,
    TrajectoryLog,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("scenario schema error at `{path}`: {msg}")]
    Schema { path: String, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown scenario preset `{0}`")]
    UnknownPreset(String),
    #[error("unknown reference table `{0}`")]
    UnknownReference(String),
    #[error("reference does not match result: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Parse strict JSON, reporting the path of the offending field.
pub fn from_json_strict<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, BenchError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        BenchError::Schema {
            path,
            msg: e.into_inner().to_string(),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    StateSpace(StateSpace),
    TransferFunction(TransferFunction),
}

impl PlantSpec {
    pub fn state_space(&self) -> Result<StateSpace, LtiError> {
        match self {
            PlantSpec::StateSpace(ss) => Ok(ss.clone()),
            PlantSpec::TransferFunction(tf) => tf_to_ss(tf),
        }
    }

    /// Plant dead time, carried by transfer-function plants only.
    pub fn delay(&self) -> f64 {
        match self {
            PlantSpec::StateSpace(_) => 0.0,
            PlantSpec::TransferFunction(tf) => tf.delay(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    Step {
        amplitude: f64,
        #[serde(default)]
        at: f64,
    },
}

impl ReferenceSpec {
    pub fn reference(&self) -> Reference {
        match *self {
            ReferenceSpec::Step { amplitude, at } => Reference::step(amplitude, at),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySpec {
    /// Block in series at the plant input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<TransferFunction>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub input_gain: f64,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        Self {
            series: None,
            input_gain: 1.0,
        }
    }
}

fn default_probe_tf() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginProbes {
    #[serde(default)]
    pub enabled: bool,
    /// Horizon of each probe run. Longer than the test itself so that slow
    /// growth near the stability boundary is detectable.
    #[serde(default = "default_probe_tf")]
    pub tf: f64,
    #[serde(default)]
    pub gain: GainSearch,
    #[serde(default)]
    pub delay: DelaySearch,
    /// Also evaluate classical margins for controllers with a linear form.
    #[serde(default)]
    pub analytic: bool,
}

impl Default for MarginProbes {
    fn default() -> Self {
        Self {
            enabled: false,
            tf: default_probe_tf(),
            gain: GainSearch::default(),
            delay: DelaySearch::default(),
            analytic: false,
        }
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub plant: PlantSpec,
    pub dt: f64,
    pub tf: f64,
    pub controller_dt: f64,
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub actuator: Actuator,
    #[serde(default)]
    pub uncertainty: UncertaintySpec,
    #[serde(default)]
    pub injectors: Vec<InjectionEvent>,
    /// Metric settings. Without an explicit `step_window_end`, step metrics
    /// stop at the first non-reference injector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricOptions>,
    #[serde(default)]
    pub margin_probes: MarginProbes,
    /// Seeds for noisy margin probes. Empty: probes run without noise.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Scenario-local controller definitions, looked up before presets.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub controllers: BTreeMap<String, ControllerSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub default_controllers: Vec<String>,
}

pub const PRESET_SCENARIOS: [&str; 2] = ["t1", "t2"];

const T1_JSON: &str = include_str!("../presets/t1.json");
const T2_JSON: &str = include_str!("../presets/t2.json");

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let spec: Self = from_json_strict(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn preset(name: &str) -> Result<Self, BenchError> {
        let text = match name.to_ascii_lowercase().as_str() {
            "t1" => T1_JSON,
            "t2" => T2_JSON,
            _ => return Err(BenchError::UnknownPreset(name.to_string())),
        };
        Self::from_json(text)
    }

    /// A preset name or a path to a scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Self, BenchError> {
        let p = Path::new(name_or_path);
        if p.exists() {
            Self::load(p)
        } else {
            Self::preset(name_or_path)
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Invalid(m));
        if self.schema != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                self.schema
            ));
        }
        if !(self.dt > 0.0 && self.tf > 0.0 && self.controller_dt > 0.0) {
            return bad("dt, tf and controller_dt must be > 0".into());
        }
        if steps_in(self.tf, self.dt).is_none() {
            return bad(format!("dt = {} does not divide tf = {}", self.dt, self.tf));
        }
        if steps_in(self.controller_dt, self.dt).is_none_or(|n| n == 0) {
            return bad(format!(
                "controller_dt = {} is not a multiple of dt = {}",
                self.controller_dt, self.dt
            ));
        }
        let ss = self.plant.state_space()?;
        if ss.ninputs() != 1 || ss.noutputs() != 1 {
            return bad("plant must be single-input single-output".into());
        }
        if self.plant.delay() > 0.0 && steps_in(self.plant.delay(), self.dt).is_none() {
            return bad("plant delay must be a multiple of dt".into());
        }
        self.actuator
            .validate()
            .map_err(|e| BenchError::Invalid(e.to_string()))?;
        for inj in &self.injectors {
            inj.validate()
                .map_err(|e| BenchError::Invalid(e.to_string()))?;
            if inj.start >= self.tf {
                return bad(format!(
                    "injector starting at {} is not before tf = {}",
                    inj.start, self.tf
                ));
            }
        }
        if !self.uncertainty.input_gain.is_finite() {
            return bad("uncertainty.input_gain must be finite".into());
        }
        if let Some(m) = &self.metrics {
            if !(m.band > 0.0 && m.ss_window > 0.0 && m.ss_window <= 1.0) {
                return bad("metrics.band and metrics.ss_window must be in (0, 1]".into());
            }
        }
        if self.margin_probes.enabled
            && !(self.margin_probes.tf > 0.0 && steps_in(self.margin_probes.tf, self.dt).is_some())
        {
            return bad("margin_probes.tf must be a positive multiple of dt".into());
        }
        Ok(())
    }

    pub fn metric_options(&self) -> MetricOptions {
        let mut opts = self.metrics.unwrap_or_default();
        if opts.step_window_end.is_none() {
            opts.step_window_end = self
                .injectors
                .iter()
                .filter(|i| i.kind != InjectionKind::ReferenceStep)
                .map(|i| i.start)
                .filter(|&s| s > 0.0)
                .min_by(f64::total_cmp);
        }
        opts
    }

    pub fn reference(&self) -> Reference {
        self.reference.reference()
    }

    pub fn step_amplitude(&self) -> f64 {
        match self.reference {
            ReferenceSpec::Step { amplitude, .. } => amplitude,
        }
    }

    /// Discretized plant at rate `dt`.
    pub fn plant_at(&self, dt: f64) -> Result<DiscreteModel, LtiError> {
        discretize_zoh(&self.plant.state_space()?, dt)
    }

    pub fn topology(&self) -> Result<LoopTopology, BenchError> {
        let mut topo = LoopTopology::new(self.plant_at(self.dt)?);
        topo.actuator = self.actuator;
        topo.actuator.delay_steps += steps_in(self.plant.delay(), self.dt).unwrap_or(0);
        topo.input_gain = self.uncertainty.input_gain;
        if let Some(g) = &self.uncertainty.series {
            topo.series_uncertainty = Some(discretize_zoh(&tf_to_ss(g)?, self.dt)?);
        }
        topo.injectors = self.injectors.clone();
        Ok(topo)
    }

    /// Give every noise injector a seed derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        let mut k = 0u64;
        for inj in &mut self.injectors {
            if inj.kind == InjectionKind::SensorNoise {
                inj.seed = seed.wrapping_add(k);
                k += 1;
            }
        }
    }

    pub fn noise_seeds(&self) -> Vec<u64> {
        self.injectors
            .iter()
            .filter(|i| i.kind == InjectionKind::SensorNoise)
            .map(|i| i.seed)
            .collect()
    }

    /// Look up a controller: scenario-local definitions, then presets.
    pub fn controller(&self, name: &str) -> Result<ControllerSpec, ControllerError> {
        match self.controllers.get(name) {
            Some(spec) => Ok(spec.clone()),
            None => preset(name),
        }
    }

    pub fn build_controller(
        &self,
        name: &str,
        spec: &ControllerSpec,
    ) -> Result<Box<dyn Controller>, ControllerError> {
        spec.build(name, self.controller_dt, |dt_c| {
            self.plant_at(dt_c)
                .map_err(|e| ControllerError::Config(format!("internal model: {e}")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnStatus {
    Ok,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnResult {
    pub controller: String,
    pub kind: String,
    pub status: ColumnStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub report: MetricsReport,
    #[serde(skip)]
    pub trajectory: Option<TrajectoryLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Better {
    Lower,
    LowerAbs,
    Higher,
    PassFail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowDef {
    pub id: &'static str,
    pub key: &'static str,
    pub label: &'static str,
    pub unit: &'static str,
    pub better: Better,
}

/// Report rows: CR1..CR12 in order, then supplementary rows.
pub const ROWS: [RowDef; 16] = [
    RowDef {
        id: "CR1",
        key: "t_r",
        label: "t_r",
        unit: "s",
        better: Better::Lower,
    },
    RowDef {
        id: "CR2",
        key: "m_p",
        label: "M_p",
        unit: "%",
        better: Better::Lower,
    },
    RowDef {
        id: "CR3",
        key: "t_s",
        label: "t_s",
        unit: "s",
        better: Better::Lower,
    },
    RowDef {
        id: "CR4",
        key: "e_ss",
        label: "e_ss",
        unit: "signal",
        better: Better::LowerAbs,
    },
    RowDef {
        id: "CR5",
        key: "ise",
        label: "ISE",
        unit: "signal^2",
        better: Better::Lower,
    },
    RowDef {
        id: "CR6",
        key: "itae",
        label: "ITAE",
        unit: "signal*s",
        better: Better::Lower,
    },
    RowDef {
        id: "CR7",
        key: "iace",
        label: "IACE",
        unit: "input",
        better: Better::Lower,
    },
    RowDef {
        id: "CR8",
        key: "iacer",
        label: "IACER",
        unit: "input/s",
        better: Better::Lower,
    },
    RowDef {
        id: "CR9",
        key: "uc_max",
        label: "u_c^max",
        unit: "input",
        better: Better::Lower,
    },
    RowDef {
        id: "CR10",
        key: "gm_db_upper",
        label: "GM",
        unit: "dB",
        better: Better::Higher,
    },
    RowDef {
        id: "CR11",
        key: "dm_s",
        label: "DM",
        unit: "s",
        better: Better::Higher,
    },
    RowDef {
        id: "CR12",
        key: "rohrs_pass",
        label: "Rohrs",
        unit: "",
        better: Better::PassFail,
    },
    RowDef {
        id: "M_u",
        key: "m_u",
        label: "M_u",
        unit: "%",
        better: Better::Lower,
    },
    RowDef {
        id: "u_ac^max",
        key: "uac_max",
        label: "u_ac^max",
        unit: "input",
        better: Better::Lower,
    },
    RowDef {
        id: "GM_lower",
        key: "gm_db_lower",
        label: "GM lower",
        unit: "dB",
        better: Better::Lower,
    },
    RowDef {
        id: "DM_rule",
        key: "dm_rule_pass",
        label: "DM > 0.1 t_r",
        unit: "",
        better: Better::PassFail,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: String,
    pub key: String,
    pub unit: String,
    pub values: BTreeMap<String, Option<f64>>,
    pub best: Vec<String>,
    pub worst: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub dt: f64,
    pub tf: f64,
    pub controller_dt: f64,
    pub step_amplitude: f64,
    pub step_time: f64,
    pub noise_seeds: Vec<u64>,
    pub metric_options: MetricOptions,
    pub margin_probes: MarginProbes,
    #[serde(default)]
    pub overrides: Vec<String>,
    /// Seconds since the Unix epoch. Excluded from reproducibility checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_unix_s: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub scenario: String,
    pub provenance: Provenance,
    pub columns: Vec<ColumnResult>,
    pub rows: Vec<Row>,
}

impl BenchmarkResult {
    pub fn column(&self, name: &str) -> Option<&ColumnResult> {
        self.columns.iter().find(|c| c.controller == name)
    }

    pub fn report(&self, name: &str) -> Option<&MetricsReport> {
        self.column(name).map(|c| &c.report)
    }

    pub fn any_unstable(&self) -> bool {
        self.columns.iter().any(|c| c.status != ColumnStatus::Ok)
    }

    /// JSON with the timestamp removed, suitable for hashing or diffing.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.provenance.timestamp_unix_s = None;
        serde_json::to_string_pretty(&c).expect("result serializes")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    pub keep_trajectories: bool,
    pub timestamp: bool,
    pub overrides: Vec<String>,
}

/// Run every named controller on the scenario. Failures stay confined to
/// their own column.
pub fn run_benchmark(
    spec: &ScenarioSpec,
    controllers: &[(String, ControllerSpec)],
    opts: &RunOptions,
) -> Result<BenchmarkResult, BenchError> {
    spec.validate()?;
    let topology = spec.topology()?;
    let metric_opts = spec.metric_options();
    let run_all = || -> Vec<ColumnResult> {
        controllers
            .par_iter()
            .map(|(name, cs)| {
                run_column(
                    spec,
                    &topology,
                    &metric_opts,
                    name,
                    cs,
                    opts.keep_trajectories,
                )
            })
            .collect()
    };
    let columns = match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| BenchError::Invalid(format!("thread pool: {e}")))?
            .install(run_all),
        None => run_all(),
    };
    let timestamp_unix_s = opts.timestamp.then(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    });
    let reference = spec.reference();
    let provenance = Provenance {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dt: spec.dt,
        tf: spec.tf,
        controller_dt: spec.controller_dt,
        step_amplitude: reference.amplitude,
        step_time: reference.at,
        noise_seeds: spec.noise_seeds(),
        metric_options: metric_opts,
        margin_probes: spec.margin_probes.clone(),
        overrides: opts.overrides.clone(),
        timestamp_unix_s,
    };
    let rows = annotate(&columns);
    Ok(BenchmarkResult {
        scenario: spec.name.clone(),
        provenance,
        columns,
        rows,
    })
}

fn run_column(
    spec: &ScenarioSpec,
    topology: &LoopTopology,
    opts: &MetricOptions,
    name: &str,
    cs: &ControllerSpec,
    keep: bool,
) -> ColumnResult {
    let failed = |msg: String| ColumnResult {
        controller: name.to_string(),
        kind: cs.kind().to_string(),
        status: ColumnStatus::Failed,
        error: Some(msg.clone()),
        report: MetricsReport::failed(msg),
        trajectory: None,
    };
    let mut ctrl = match spec.build_controller(name, cs) {
        Ok(c) => c,
        Err(e) => return failed(e.to_string()),
    };
    let reference = spec.reference();
    let log = match run_closed_loop(topology, ctrl.as_mut(), &reference, spec.tf, spec.dt) {
        Ok(l) => l,
        Err(e) => return failed(e.to_string()),
    };
    let mut report = compute_all(&log, opts);
    let verdict = stability_verdict(&log, opts, last_excitation(topology, &reference));
    report.verdict = Some(verdict);
    report.latency_mean_s = ctrl.mean_step_latency();
    let unstable = verdict == Verdict::Diverged;
    if unstable && !log.diverged {
        report
            .notes
            .push("oscillation envelope grows after the last excitation".into());
    }
    if topology.series_uncertainty.is_some() {
        report.rohrs_pass = Some(verdict == Verdict::StableSettled);
    }

    if spec.margin_probes.enabled && !unstable {
        fill_margins(spec, topology, opts, ctrl.as_mut(), &mut report);
    }
    if spec.margin_probes.analytic {
        if let Some(c_tf) = ctrl.lti_form() {
            if let Ok(ss) = spec.plant.state_space() {
                let delay = topology.actuator.delay_steps as f64 * spec.dt;
                let l = analytic_open_loop(
                    &c_tf,
                    &ss,
                    spec.uncertainty.series.as_ref(),
                    topology.input_gain,
                    delay,
                );
                let m = crate::lti::analytic_margins(&l);
                report.analytic = Some(AnalyticMargins {
                    gm_db: m.gm_db,
                    pm_deg: m.pm_deg,
                    dm_s: m.dm_s,
                });
            }
        }
    }

    ColumnResult {
        controller: name.to_string(),
        kind: cs.kind().to_string(),
        status: if unstable {
            ColumnStatus::Diverged
        } else {
            ColumnStatus::Ok
        },
        error: None,
        report,
        trajectory: keep.then_some(log),
    }
}

fn fill_margins(
    spec: &ScenarioSpec,
    topology: &LoopTopology,
    opts: &MetricOptions,
    ctrl: &mut dyn Controller,
    report: &mut MetricsReport,
) {
    let mp = &spec.margin_probes;
    let mut probe = Probe::new(topology.clone(), spec.reference(), mp.tf);
    probe.noise_seeds = spec.seeds.clone();
    probe.options = *opts;
    match empirical_gain_margin(&probe, ctrl, &mp.gain) {
        Ok(g) => {
            report.gm_linear_upper = Some(g.upper.value);
            report.gm_db_upper = Some(g.upper_db());
            report.gm_upper_at_bound = Some(g.upper.at_bound());
            report.gm_linear_lower = Some(g.lower.value);
            report.gm_db_lower = Some(g.lower_db());
            report.gm_lower_at_bound = Some(g.lower.at_bound());
        }
        Err(e) => report.notes.push(format!("gain margin probe: {e}")),
    }
    match empirical_delay_margin(&probe, ctrl, &mp.delay) {
        Ok(d) => {
            report.dm_s = Some(d.value);
            report.dm_at_bound = Some(d.at_bound());
            report.dm_rule_pass = report.t_r.map(|tr| dm_rule(d.value, tr));
        }
        Err(e) => report.notes.push(format!("delay margin probe: {e}")),
    }
}

fn ranking_value(c: &ColumnResult, row: &RowDef) -> Option<f64> {
    let v = c.report.value(row.key)?;
    Some(match row.better {
        Better::LowerAbs => v.abs(),
        _ => v,
    })
}

/// Best and worst markers per row. Diverged or failed columns are the worst
/// wherever they exist; ranking covers only the remaining columns.
pub fn annotate(columns: &[ColumnResult]) -> Vec<Row> {
    ROWS.iter()
        .map(|def| {
            let values: BTreeMap<String, Option<f64>> = columns
                .iter()
                .map(|c| (c.controller.clone(), c.report.value(def.key)))
                .collect();
            let bad: Vec<String> = columns
                .iter()
                .filter(|c| c.status != ColumnStatus::Ok)
                .map(|c| c.controller.clone())
                .collect();
            let ranked: Vec<(&str, f64)> = columns
                .iter()
                .filter(|c| c.status == ColumnStatus::Ok)
                .filter_map(|c| ranking_value(c, def).map(|v| (c.controller.as_str(), v)))
                .collect();
            let (mut best, mut worst) = (Vec::new(), Vec::new());
            if ranked.len() >= 2 {
                let lo = ranked.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
                let hi = ranked.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
                let pick = |target: f64| {
                    ranked
                        .iter()
                        .filter(|r| r.1 == target)
                        .map(|r| r.0.to_string())
                        .collect::<Vec<_>>()
                };
                match def.better {
                    Better::Lower | Better::LowerAbs => {
                        best = pick(lo);
                        worst = pick(hi);
                    }
                    Better::Higher => {
                        best = pick(hi);
                        worst = pick(lo);
                    }
                    Better::PassFail => worst = pick(0.0),
                }
                if lo == hi {
                    best.clear();
                    worst.clear();
                }
            }
            if !bad.is_empty() {
                worst = bad;
            }
            Row {
                id: def.id.to_string(),
                key: def.key.to_string(),
                unit: def.unit.to_string(),
                values,
                best,
                worst,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    #[serde(alias = "markdown")]
    Md,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "md" | "markdown" => Ok(Self::Md),
            other => Err(format!("unknown format `{other}` (csv, json, md)")),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
            Self::Md => "md",
        }
    }
}

fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        "0.00".into()
    } else if !(1e-2..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn cell_text(row: &Row, def: &RowDef, col: &ColumnResult) -> String {
    if col.status != ColumnStatus::Ok {
        return match col.status {
            ColumnStatus::Diverged => "diverged".into(),
            _ => "failed".into(),
        };
    }
    let Some(v) = row.values.get(&col.controller).copied().flatten() else {
        return "n/a".into();
    };
    match def.better {
        Better::PassFail => (if v != 0.0 { "p." } else { "f." }).into(),
        _ => {
            let at_bound = match def.key {
                "gm_db_upper" => col.report.gm_upper_at_bound == Some(true),
                "gm_db_lower" => col.report.gm_lower_at_bound == Some(true),
                "dm_s" => col.report.dm_at_bound == Some(true),
                _ => false,
            };
            let prefix = match (at_bound, def.key) {
                (true, "gm_db_lower") => "<= ",
                (true, _) => ">= ",
                _ => "",
            };
            format!("{prefix}{}", fmt_num(v))
        }
    }
}

/// Render the result. Markdown marks the best cell `**v**` and the worst
/// `~v~`.
pub fn emit_report(result: &BenchmarkResult, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(result).expect("result serializes") + "\n"
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "row",
                "metric",
                "unit",
                "controller",
                "status",
                "value",
                "best",
                "worst",
            ])
            .expect("in-memory write");
            for row in &result.rows {
                for col in &result.columns {
                    let v = row.values.get(&col.controller).copied().flatten();
                    let status = snake(&col.status);
                    w.write_record([
                        row.id.as_str(),
                        row.key.as_str(),
                        row.unit.as_str(),
                        col.controller.as_str(),
                        status.as_str(),
                        &v.map(|v| format!("{v:.16e}")).unwrap_or_default(),
                        if row.best.contains(&col.controller) {
                            "1"
                        } else {
                            "0"
                        },
                        if row.worst.contains(&col.controller) {
                            "1"
                        } else {
                            "0"
                        },
                    ])
                    .expect("in-memory write");
                }
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
        }
        ReportFormat::Md => {
            let mut out = String::new();
            let _ = writeln!(out, "### {}\n", result.scenario);
            let names: Vec<&str> = result
                .columns
                .iter()
                .map(|c| c.controller.as_str())
                .collect();
            let _ = writeln!(out, "| No. | Criterion | {} |", names.join(" | "));
            let _ = writeln!(out, "|---|---|{}", "---|".repeat(names.len()));
            for (row, def) in result.rows.iter().zip(ROWS.iter()) {
                let label = if def.unit.is_empty()
                    || def.unit == "signal^2"
                    || def.unit.contains('*')
                    || def.unit.contains('/')
                    || def.unit == "input"
                {
                    def.label.to_string()
                } else {
                    format!("{} ({})", def.label, def.unit)
                };
                let cells: Vec<String> = result
                    .columns
                    .iter()
                    .map(|col| {
                        let text = cell_text(row, def, col);
                        if row.best.contains(&col.controller) {
                            format!("**{text}**")
                        } else if row.worst.contains(&col.controller) {
                            format!("~{text}~")
                        } else {
                            text
                        }
                    })
                    .collect();
                let _ = writeln!(out, "| {} | {} | {} |", def.id, label, cells.join(" | "));
            }
            let _ = writeln!(
                out,
                "\ndt = {} s, controller dt = {} s, T_f = {} s, step = {} at {} s, noise seeds = {:?}",
                result.provenance.dt,
                result.provenance.controller_dt,
                result.provenance.tf,
                result.provenance.step_amplitude,
                result.provenance.step_time,
                result.provenance.noise_seeds
            );
            for col in &result.columns {
                if let Some(err) = &col.error {
                    let _ = writeln!(out, "\n{}: {}", col.controller, err);
                }
            }
            out
        }
    }
}

fn default_tolerance() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRow {
    pub key: String,
    /// Tabulated values; `null` where the source gives none.
    pub values: BTreeMap<String, Option<f64>>,
    /// Multiplier taking tabulated values to this tool's convention.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub scale: f64,
    /// Relative tolerance for value checks.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "claim", rename_all = "snake_case", deny_unknown_fields)]
pub enum Claim {
    /// `controller` has the largest value of `metric` among `among`.
    Largest {
        metric: String,
        controller: String,
        among: Vec<String>,
    },
    Smallest {
        metric: String,
        controller: String,
        among: Vec<String>,
    },
    /// `metric(lower) < metric(higher)`.
    Less {
        metric: String,
        lower: String,
        higher: String,
    },
    AtMost {
        metric: String,
        controller: String,
        value: f64,
    },
    Above {
        metric: String,
        controller: String,
        value: f64,
    },
    Within {
        metric: String,
        controller: String,
        value: f64,
        tol: f64,
    },
    /// Values ascend in the listed order (ties allowed).
    Ranking {
        metric: String,
        order: Vec<String>,
    },
    Outcome {
        controller: String,
        expect: Expect,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    Diverged,
    Stable,
    Settled,
    RohrsPass,
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl Claim {
    fn controllers(&self) -> Vec<&str> {
        match self {
            Claim::Largest {
                controller, among, ..
            }
            | Claim::Smallest {
                controller, among, ..
            } => std::iter::once(controller.as_str())
                .chain(among.iter().map(String::as_str))
                .collect(),
            Claim::Less { lower, higher, .. } => vec![lower, higher],
            Claim::AtMost { controller, .. }
            | Claim::Above { controller, .. }
            | Claim::Within { controller, .. }
            | Claim::Outcome { controller, .. } => vec![controller],
            Claim::Ranking { order, .. } => order.iter().map(String::as_str).collect(),
        }
    }

    fn metric(&self) -> Option<&str> {
        match self {
            Claim::Largest { metric, .. }
            | Claim::Smallest { metric, .. }
            | Claim::Less { metric, .. }
            | Claim::AtMost { metric, .. }
            | Claim::Above { metric, .. }
            | Claim::Within { metric, .. }
            | Claim::Ranking { metric, .. } => Some(metric),
            Claim::Outcome { .. } => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Claim::Largest {
                metric,
                controller,
                among,
            } => format!("{metric}({controller}) largest among {}", among.join(",")),
            Claim::Smallest {
                metric,
                controller,
                among,
            } => format!("{metric}({controller}) smallest among {}", among.join(",")),
            Claim::Less {
                metric,
                lower,
                higher,
            } => format!("{metric}({lower}) < {metric}({higher})"),
            Claim::AtMost {
                metric,
                controller,
                value,
            } => format!("{metric}({controller}) <= {value}"),
            Claim::Above {
                metric,
                controller,
                value,
            } => format!("{metric}({controller}) > {value}"),
            Claim::Within {
                metric,
                controller,
                value,
                tol,
            } => format!("{metric}({controller}) = {value} +- {tol}"),
            Claim::Ranking { metric, order } => {
                format!("{metric} ascending {}", order.join(" <= "))
            }
            Claim::Outcome { controller, expect } => format!(
                "{controller} {}",
                match expect {
                    Expect::Diverged => "diverges",
                    Expect::Stable => "stays stable",
                    Expect::Settled => "settles",
                    Expect::RohrsPass => "passes the Rohrs test",
                }
            ),
        }
    }

    /// Evaluate against a result; `Err` explains why the claim fails.
    pub fn check(&self, result: &BenchmarkResult) -> Result<(), String> {
        let val = |metric: &str, c: &str| -> Result<f64, String> {
            let col = result.column(c).ok_or_else(|| format!("{c} missing"))?;
            if col.status != ColumnStatus::Ok {
                return Err(format!("{c} is {}", snake(&col.status)));
            }
            col.report
                .value(metric)
                .ok_or_else(|| format!("{metric}({c}) undefined"))
        };
        let show = |metric: &str, names: &[String]| {
            names
                .iter()
                .map(|n| {
                    format!(
                        "{n}={}",
                        val(metric, n).map_or_else(|e| e, |v| format!("{v:.4}"))
                    )
                })
                .collect::<Vec<_>>()
                .join(", ")
        };
        match self {
            Claim::Largest {
                metric,
                controller,
                among,
            }
            | Claim::Smallest {
                metric,
                controller,
                among,
            } => {
                let want_max = matches!(self, Claim::Largest { .. });
                let me = val(metric, controller)?;
                for other in among.iter().filter(|o| *o != controller) {
                    let v = val(metric, other)?;
                    if (want_max && v >= me) || (!want_max && v <= me) {
                        return Err(show(metric, among));
                    }
                }
                Ok(())
            }
            Claim::Less {
                metric,
                lower,
                higher,
            } => {
                let (a, b) = (val(metric, lower)?, val(metric, higher)?);
                if a < b {
                    Ok(())
                } else {
                    Err(show(metric, &[lower.clone(), higher.clone()]))
                }
            }
            Claim::AtMost {
                metric,
                controller,
                value,
            } => {
                let v = val(metric, controller)?;
                if v <= *value {
                    Ok(())
                } else {
                    Err(format!("{v:.4}"))
                }
            }
            Claim::Above {
                metric,
                controller,
                value,
            } => {
                let v = val(metric, controller)?;
                if v > *value {
                    Ok(())
                } else {
                    Err(format!("{v:.4}"))
                }
            }
            Claim::Within {
                metric,
                controller,
                value,
                tol,
            } => {
                let v = val(metric, controller)?;
                if (v - value).abs() <= *tol {
                    Ok(())
                } else {
                    Err(format!("{v:.4}"))
                }
            }
            Claim::Ranking { metric, order } => {
                let vals = order
                    .iter()
                    .map(|c| val(metric, c))
                    .collect::<Result<Vec<_>, _>>()?;
                if vals.windows(2).all(|w| w[0] <= w[1]) {
                    Ok(())
                } else {
                    Err(show(metric, order))
                }
            }
            Claim::Outcome { controller, expect } => {
                let col = result
                    .column(controller)
                    .ok_or_else(|| format!("{controller} missing"))?;
                let verdict = col.report.verdict;
                let ok = match expect {
                    Expect::Diverged => col.status == ColumnStatus::Diverged,
                    Expect::Stable => col.status == ColumnStatus::Ok,
                    Expect::Settled => verdict == Some(Verdict::StableSettled),
                    Expect::RohrsPass => col.report.rohrs_pass == Some(true),
                };
                if ok {
                    Ok(())
                } else {
                    let tail = col
                        .report
                        .e_ss
                        .map_or(String::new(), |e| format!(", e_ss={e:.4}"));
                    let verdict = verdict.map_or("none".to_string(), |v| snake(&v));
                    Err(format!(
                        "status={}, verdict={verdict}{tail}",
                        snake(&col.status)
                    ))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTable {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub controllers: Vec<String>,
    pub rows: Vec<ReferenceRow>,
    #[serde(default)]
    pub claims: Vec<Claim>,
}

const T1_REF: &str = include_str!("../reference/t1.json");
const T2_REF: &str = include_str!("../reference/t2.json");

pub const PRESET_REFERENCES: [&str; 2] = ["t1", "t2"];

impl ReferenceTable {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let t: Self = from_json_strict(text)?;
        if t.schema != SCHEMA_VERSION {
            return Err(BenchError::Invalid(format!(
                "unsupported reference schema {}",
                t.schema
            )));
        }
        Ok(t)
    }

    pub fn preset(name: &str) -> Result<Self, BenchError> {
        match name.to_ascii_lowercase().as_str() {
            "t1" => Self::from_json(T1_REF),
            "t2" => Self::from_json(T2_REF),
            _ => Err(BenchError::UnknownReference(name.to_string())),
        }
    }

    pub fn resolve(name_or_path: &str) -> Result<Self, BenchError> {
        let p = Path::new(name_or_path);
        if p.exists() {
            Self::from_json(&std::fs::read_to_string(p)?)
        } else {
            Self::preset(name_or_path)
        }
    }

    /// A table reproducing `result` exactly, with rankings as claims.
    pub fn from_result(result: &BenchmarkResult) -> Self {
        let controllers: Vec<String> = result
            .columns
            .iter()
            .map(|c| c.controller.clone())
            .collect();
        let mut rows = Vec::new();
        let mut claims = Vec::new();
        for def in ROWS.iter().filter(|d| d.better != Better::PassFail) {
            let values: BTreeMap<String, Option<f64>> = controllers
                .iter()
                .map(|c| (c.clone(), result.report(c).and_then(|r| r.value(def.key))))
                .collect();
            let mut ok: Vec<(String, f64)> = result
                .columns
                .iter()
                .filter(|c| c.status == ColumnStatus::Ok)
                .filter_map(|c| c.report.value(def.key).map(|v| (c.controller.clone(), v)))
                .collect();
            if ok.len() >= 2 {
                ok.sort_by(|a, b| a.1.total_cmp(&b.1));
                claims.push(Claim::Ranking {
                    metric: def.key.to_string(),
                    order: ok.into_iter().map(|p| p.0).collect(),
                });
            }
            rows.push(ReferenceRow {
                key: def.key.to_string(),
                values,
                scale: 1.0,
                tolerance: default_tolerance(),
                note: String::new(),
            });
        }
        for c in &result.columns {
            let expect = if c.status == ColumnStatus::Ok {
                Expect::Stable
            } else {
                Expect::Diverged
            };
            if c.status != ColumnStatus::Failed {
                claims.push(Claim::Outcome {
                    controller: c.controller.clone(),
                    expect,
                });
            }
        }
        Self {
            schema: SCHEMA_VERSION,
            name: result.scenario.clone(),
            description: String::new(),
            controllers,
            rows,
            claims,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueCheck {
    pub metric: String,
    pub controller: String,
    pub reference: f64,
    pub actual: Option<f64>,
    pub rel_error: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimCheck {
    pub claim: String,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conformance {
    pub reference: String,
    pub values: Vec<ValueCheck>,
    pub claims: Vec<ClaimCheck>,
    /// Reference columns absent from the result; their cells were skipped.
    pub skipped_controllers: Vec<String>,
}

impl Conformance {
    pub fn claims_pass(&self) -> bool {
        self.claims.iter().all(|c| c.pass)
    }

    pub fn value_failures(&self) -> usize {
        self.values.iter().filter(|v| !v.pass).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "reference: {}", self.reference);
        for c in &self.claims {
            let _ = writeln!(
                out,
                "[{}] {}{}",
                if c.pass { "PASS" } else { "FAIL" },
                c.claim,
                if c.detail.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", c.detail)
                }
            );
        }
        let _ = writeln!(
            out,
            "value checks: {} of {} within tolerance",
            self.values.len() - self.value_failures(),
            self.values.len()
        );
        for v in self.values.iter().filter(|v| !v.pass) {
            let actual = v
                .actual
                .map_or("undefined".to_string(), |a| format!("{a:.4}"));
            let rel = v.rel_error.map_or(String::new(), |r| {
                format!(", rel. error {:+.1}%", r * 100.0)
            });
            let _ = writeln!(
                out,
                "  delta {}({}): reference {:.4}, actual {actual}{rel}",
                v.metric, v.controller, v.reference
            );
        }
        if !self.skipped_controllers.is_empty() {
            let _ = writeln!(
                out,
                "not in result (skipped): {}",
                self.skipped_controllers.join(", ")
            );
        }
        out
    }
}

fn known_metric(key: &str) -> bool {
    ROWS.iter().any(|r| r.key == key)
        || ["gm_linear_upper", "gm_linear_lower", "e_ss_point"].contains(&key)
}

/// Value checks per cell (relative tolerance) and claim checks, reported
/// separately.
pub fn compare_to_reference(
    result: &BenchmarkResult,
    table: &ReferenceTable,
) -> Result<Conformance, BenchError> {
    let present: HashSet<&str> = result
        .columns
        .iter()
        .map(|c| c.controller.as_str())
        .collect();
    for row in &table.rows {
        if !known_metric(&row.key) {
            return Err(BenchError::ShapeMismatch(format!(
                "unknown metric `{}`",
                row.key
            )));
        }
    }
    for claim in &table.claims {
        if let Some(m) = claim.metric() {
            if !known_metric(m) {
                return Err(BenchError::ShapeMismatch(format!("unknown metric `{m}`")));
            }
        }
        if let Some(c) = claim
            .controllers()
            .into_iter()
            .find(|c| !present.contains(c))
        {
            return Err(BenchError::ShapeMismatch(format!(
                "claim `{}` needs controller `{c}`",
                claim.describe()
            )));
        }
    }
    let skipped: Vec<String> = table
        .controllers
        .iter()
        .filter(|c| !present.contains(c.as_str()))
        .cloned()
        .collect();
    let mut values = Vec::new();
    for row in &table.rows {
        for (c, v) in &row.values {
            let (Some(v), true) = (v, present.contains(c.as_str())) else {
                continue;
            };
            let reference = v * row.scale;
            let actual = result.report(c).and_then(|r| r.value(&row.key));
            let rel_error = actual.map(|a| {
                if reference == 0.0 {
                    a - reference
                } else {
                    (a - reference) / reference.abs()
                }
            });
            let pass = rel_error.is_some_and(|r| r.abs() <= row.tolerance);
            values.push(ValueCheck {
                metric: row.key.clone(),
                controller: c.clone(),
                reference,
                actual,
                rel_error,
                pass,
            });
        }
    }
    let claims = table
        .claims
        .iter()
        .map(|cl| match cl.check(result) {
            Ok(()) => ClaimCheck {
                claim: cl.describe(),
                pass: true,
                detail: String::new(),
            },
            Err(detail) => ClaimCheck {
                claim: cl.describe(),
                pass: false,
                detail,
            },
        })
        .collect();
    Ok(Conformance {
        reference: table.name.clone(),
        values,
        claims,
        skipped_controllers: skipped,
    })
}
