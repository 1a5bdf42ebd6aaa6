//! Continuous LTI models, exact zero-order-hold discretization, frequency
//! response and classical stability margins.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LtiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("improper transfer function: numerator degree {num} exceeds denominator degree {den}")]
    Improper { num: usize, den: usize },
    #[error("transfer function denominator is zero")]
    ZeroDenominator,
    #[error("delay must be finite and non-negative, got {0}")]
    BadDelay(f64),
    #[error("sample time must be finite and positive, got {0}")]
    BadSampleTime(f64),
    #[error("zero-order-hold discretization overflowed at dt = {0}")]
    Overflow(f64),
    #[error("frequency grid must be strictly positive and ascending")]
    BadGrid,
}

/// Continuous-time model `x' = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateSpaceDoc", into = "StateSpaceDoc")]
pub struct StateSpace {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    state_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateSpaceDoc {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    #[serde(default)]
    d: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_names: Option<Vec<String>>,
}

fn rows_to_matrix(
    rows: &[Vec<f64>],
    cols_hint: usize,
    what: &str,
) -> Result<DMatrix<f64>, LtiError> {
    let ncols = rows.first().map_or(cols_hint, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(LtiError::Dimension(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl TryFrom<StateSpaceDoc> for StateSpace {
    type Error = LtiError;

    fn try_from(doc: StateSpaceDoc) -> Result<Self, Self::Error> {
        let a = rows_to_matrix(&doc.a, 0, "a")?;
        let b = rows_to_matrix(&doc.b, 0, "b")?;
        let c = rows_to_matrix(&doc.c, a.nrows(), "c")?;
        let d = match doc.d {
            Some(rows) => rows_to_matrix(&rows, b.ncols(), "d")?,
            None => DMatrix::zeros(c.nrows(), b.ncols()),
        };
        let mut ss = StateSpace::new(a, b, c, d)?;
        if let Some(names) = doc.state_names {
            ss = ss.with_state_names(names)?;
        }
        Ok(ss)
    }
}

impl From<StateSpace> for StateSpaceDoc {
    fn from(ss: StateSpace) -> Self {
        StateSpaceDoc {
            a: matrix_to_rows(&ss.a),
            b: matrix_to_rows(&ss.b),
            c: matrix_to_rows(&ss.c),
            d: Some(matrix_to_rows(&ss.d)),
            state_names: ss.state_names,
        }
    }
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<(), LtiError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LtiError::NonFinite(what))
    }
}

impl StateSpace {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self, LtiError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LtiError::Dimension(format!(
                "A is {}x{}, must be square",
                n,
                a.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(LtiError::Dimension(format!(
                "B has {} rows, expected {n}",
                b.nrows()
            )));
        }
        if c.ncols() != n {
            return Err(LtiError::Dimension(format!(
                "C has {} columns, expected {n}",
                c.ncols()
            )));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(LtiError::Dimension(format!(
                "D is {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        check_finite(&a, "A")?;
        check_finite(&b, "B")?;
        check_finite(&c, "C")?;
        check_finite(&d, "D")?;
        Ok(Self {
            a,
            b,
            c,
            d,
            state_names: None,
        })
    }

    pub fn with_state_names(mut self, names: Vec<String>) -> Result<Self, LtiError> {
        if names.len() != self.nstates() {
            return Err(LtiError::Dimension(format!(
                "{} state names for {} states",
                names.len(),
                self.nstates()
            )));
        }
        self.state_names = Some(names);
        Ok(self)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn state_names(&self) -> Option<&[String]> {
        self.state_names.as_deref()
    }
    pub fn nstates(&self) -> usize {
        self.a.nrows()
    }
    pub fn ninputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn noutputs(&self) -> usize {
        self.c.nrows()
    }

    /// Steady-state gain `D - C A^-1 B`, or `None` when A is singular.
    pub fn dc_gain(&self) -> Option<DMatrix<f64>> {
        if self.nstates() == 0 {
            return Some(self.d.clone());
        }
        let x = self.a.clone().lu().solve(&self.b)?;
        Some(&self.d - &self.c * x)
    }

    /// Similarity transform `x = T z`.
    pub fn transformed(&self, t: &DMatrix<f64>) -> Option<Self> {
        let t_inv = t.clone().try_inverse()?;
        Some(Self {
            a: &t_inv * &self.a * t,
            b: &t_inv * &self.b,
            c: &self.c * t,
            d: self.d.clone(),
            state_names: None,
        })
    }
}

/// Rational transfer function with optional input dead time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransferFunctionDoc", into = "TransferFunctionDoc")]
pub struct TransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
    delay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferFunctionDoc {
    num: Vec<f64>,
    den: Vec<f64>,
    #[serde(default)]
    delay: f64,
}

impl TryFrom<TransferFunctionDoc> for TransferFunction {
    type Error = LtiError;
    fn try_from(doc: TransferFunctionDoc) -> Result<Self, Self::Error> {
        TransferFunction::new(doc.num, doc.den)?.with_delay(doc.delay)
    }
}

impl From<TransferFunction> for TransferFunctionDoc {
    fn from(tf: TransferFunction) -> Self {
        TransferFunctionDoc {
            num: tf.num,
            den: tf.den,
            delay: tf.delay,
        }
    }
}

fn strip_leading_zeros(mut p: Vec<f64>) -> Vec<f64> {
    while p.len() > 1 && p[0] == 0.0 {
        p.remove(0);
    }
    p
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

fn poly_eval(p: &[f64], s: Complex64) -> Complex64 {
    p.iter()
        .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * s + c)
}

impl TransferFunction {
    /// Coefficients in descending powers of `s`.
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self, LtiError> {
        if num.is_empty() || den.is_empty() {
            return Err(LtiError::Dimension("empty coefficient list".into()));
        }
        if num.iter().chain(den.iter()).any(|c| !c.is_finite()) {
            return Err(LtiError::NonFinite("transfer function coefficients"));
        }
        let num = strip_leading_zeros(num);
        let den = strip_leading_zeros(den);
        if den[0] == 0.0 {
            return Err(LtiError::ZeroDenominator);
        }
        let (dn, dd) = (num.len() - 1, den.len() - 1);
        if dn > dd && !(num.len() == 1 && num[0] == 0.0) {
            return Err(LtiError::Improper { num: dn, den: dd });
        }
        Ok(Self {
            num,
            den,
            delay: 0.0,
        })
    }

    pub fn gain(k: f64) -> Self {
        Self {
            num: vec![k],
            den: vec![1.0],
            delay: 0.0,
        }
    }

    pub fn with_delay(mut self, delay: f64) -> Result<Self, LtiError> {
        if !delay.is_finite() || delay < 0.0 {
            return Err(LtiError::BadDelay(delay));
        }
        self.delay = delay;
        Ok(self)
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }
    pub fn den(&self) -> &[f64] {
        &self.den
    }
    pub fn delay(&self) -> f64 {
        self.delay
    }

    /// Rational part evaluated at complex `s` (dead time excluded).
    pub fn eval(&self, s: Complex64) -> Complex64 {
        poly_eval(&self.num, s) / poly_eval(&self.den, s)
    }

    pub fn dc_gain(&self) -> f64 {
        self.num.last().unwrap() / self.den.last().unwrap()
    }

    pub fn series(&self, other: &TransferFunction) -> TransferFunction {
        TransferFunction {
            num: strip_leading_zeros(poly_mul(&self.num, &other.num)),
            den: strip_leading_zeros(poly_mul(&self.den, &other.den)),
            delay: self.delay + other.delay,
        }
    }

    pub fn scaled(&self, k: f64) -> TransferFunction {
        TransferFunction {
            num: self.num.iter().map(|c| c * k).collect(),
            den: self.den.clone(),
            delay: self.delay,
        }
    }
}

/// Controllable-canonical realization. The dead time is dropped; loop
/// simulation realizes it with a sample delay line.
pub fn tf_to_ss(tf: &TransferFunction) -> Result<StateSpace, LtiError> {
    let lead = tf.den[0];
    let den: Vec<f64> = tf.den.iter().map(|c| c / lead).collect();
    let n = den.len() - 1;
    let mut num = vec![0.0; n + 1 - tf.num.len()];
    num.extend(tf.num.iter().map(|c| c / lead));

    let d0 = num[0];
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        a[(0, j)] = -den[j + 1];
    }
    for i in 1..n {
        a[(i, i - 1)] = 1.0;
    }
    let mut b = DMatrix::zeros(n, 1);
    if n > 0 {
        b[(0, 0)] = 1.0;
    }
    let c = DMatrix::from_fn(1, n, |_, j| num[j + 1] - d0 * den[j + 1]);
    let d = DMatrix::from_element(1, 1, d0);
    StateSpace::new(a, b, c, d)
}

/// Sampled-data image of a [`StateSpace`] under a zero-order hold.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    ad: DMatrix<f64>,
    bd: DMatrix<f64>,
    cd: DMatrix<f64>,
    dd: DMatrix<f64>,
    dt: f64,
}

impl DiscreteModel {
    pub fn new(
        ad: DMatrix<f64>,
        bd: DMatrix<f64>,
        cd: DMatrix<f64>,
        dd: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self, LtiError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(LtiError::BadSampleTime(dt));
        }
        // Reuse the continuous-model dimension checks.
        let ss = StateSpace::new(ad, bd, cd, dd)?;
        Ok(Self {
            ad: ss.a,
            bd: ss.b,
            cd: ss.c,
            dd: ss.d,
            dt,
        })
    }

    pub fn ad(&self) -> &DMatrix<f64> {
        &self.ad
    }
    pub fn bd(&self) -> &DMatrix<f64> {
        &self.bd
    }
    pub fn cd(&self) -> &DMatrix<f64> {
        &self.cd
    }
    pub fn dd(&self) -> &DMatrix<f64> {
        &self.dd
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn nstates(&self) -> usize {
        self.ad.nrows()
    }
    pub fn ninputs(&self) -> usize {
        self.bd.ncols()
    }
    pub fn noutputs(&self) -> usize {
        self.cd.nrows()
    }

    /// One sample: returns `(A x + B u, C x + D u)`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let x_next = &self.ad * x + &self.bd * u;
        let y = &self.cd * x + &self.dd * u;
        (x_next, y)
    }

    /// SISO output `C x + D u` without allocating.
    pub fn output_siso(&self, x: &DVector<f64>, u: f64) -> f64 {
        self.cd
            .row(0)
            .iter()
            .zip(x.iter())
            .map(|(c, x)| c * x)
            .sum::<f64>()
            + self.dd[(0, 0)] * u
    }

    /// SISO state update in place; `scratch` must have the state dimension.
    pub fn advance_siso(&self, x: &mut DVector<f64>, scratch: &mut DVector<f64>, u: f64) {
        scratch.gemv(1.0, &self.ad, x, 0.0);
        for (s, b) in scratch.iter_mut().zip(self.bd.column(0).iter()) {
            *s += b * u;
        }
        x.copy_from(scratch);
    }
}

/// Exact ZOH discretization using the exponential of the augmented matrix
/// `[[A, B], [0, 0]] dt`.
pub fn discretize_zoh(m: &StateSpace, dt: f64) -> Result<DiscreteModel, LtiError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(LtiError::BadSampleTime(dt));
    }
    let n = m.nstates();
    let k = m.ninputs();
    let mut aug = DMatrix::zeros(n + k, n + k);
    aug.view_mut((0, 0), (n, n)).copy_from(&(m.a() * dt));
    aug.view_mut((0, n), (n, k)).copy_from(&(m.b() * dt));
    let e = if n + k == 0 { aug } else { aug.exp() };
    if e.iter().any(|v| !v.is_finite()) {
        return Err(LtiError::Overflow(dt));
    }
    let ad = e.view((0, 0), (n, n)).into_owned();
    let bd = e.view((0, n), (n, k)).into_owned();
    DiscreteModel::new(ad, bd, m.c().clone(), m.d().clone(), dt)
}

/// Eigenvalues of A, sorted by real then imaginary part.
pub fn poles(m: &StateSpace) -> Vec<Complex64> {
    if m.nstates() == 0 {
        return Vec::new();
    }
    let mut p: Vec<Complex64> = m.a().complex_eigenvalues().iter().copied().collect();
    p.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    p
}

/// Anything with a SISO frequency response.
pub trait Frequency: Send + Sync {
    /// Rational part at `s = jw`, dead time excluded.
    fn rational_at(&self, w: f64) -> Complex64;

    fn dead_time(&self) -> f64 {
        0.0
    }

    fn at(&self, w: f64) -> Complex64 {
        self.rational_at(w) * Complex64::from_polar(1.0, -w * self.dead_time())
    }
}

impl Frequency for TransferFunction {
    fn rational_at(&self, w: f64) -> Complex64 {
        self.eval(Complex64::new(0.0, w))
    }
    fn dead_time(&self) -> f64 {
        self.delay
    }
}

impl Frequency for StateSpace {
    /// Input 0 to output 0. Non-finite when `jw` is a pole.
    fn rational_at(&self, w: f64) -> Complex64 {
        let n = self.nstates();
        let d = Complex64::new(self.d[(0, 0)], 0.0);
        if n == 0 {
            return d;
        }
        let jw = Complex64::new(0.0, w);
        let m = DMatrix::from_fn(n, n, |i, j| {
            let diag = if i == j { jw } else { Complex64::new(0.0, 0.0) };
            diag - self.a[(i, j)]
        });
        let b = DVector::from_fn(n, |i, _| Complex64::new(self.b[(i, 0)], 0.0));
        match m.lu().solve(&b) {
            Some(x) if x.iter().all(|v| v.re.is_finite() && v.im.is_finite()) => {
                self.c
                    .row(0)
                    .iter()
                    .zip(x.iter())
                    .map(|(c, x)| x * *c)
                    .sum::<Complex64>()
                    + d
            }
            _ => Complex64::new(f64::NAN, f64::NAN),
        }
    }
}

/// Series connection of frequency-domain blocks, an extra static gain and an
/// extra dead time.
#[derive(Clone, Default)]
pub struct Series {
    parts: Vec<Arc<dyn Frequency>>,
    gain: f64,
    delay: f64,
}

impl std::fmt::Debug for Series {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Series")
            .field("blocks", &self.parts.len())
            .field("gain", &self.gain)
            .field("delay", &self.delay)
            .finish()
    }
}

impl Series {
    pub fn new() -> Self {
        Self {
            parts: Vec::new(),
            gain: 1.0,
            delay: 0.0,
        }
    }

    pub fn then<F: Frequency + 'static>(mut self, block: F) -> Self {
        self.parts.push(Arc::new(block));
        self
    }

    pub fn with_gain(mut self, k: f64) -> Self {
        self.gain *= k;
        self
    }

    pub fn with_delay(mut self, tau: f64) -> Self {
        self.delay += tau;
        self
    }
}

impl Frequency for Series {
    fn rational_at(&self, w: f64) -> Complex64 {
        self.parts
            .iter()
            .fold(Complex64::new(self.gain, 0.0), |acc, p| {
                acc * p.rational_at(w)
            })
    }
    fn dead_time(&self) -> f64 {
        self.delay + self.parts.iter().map(|p| p.dead_time()).sum::<f64>()
    }
}

/// `L(jw)` on a grid. Points where `jw` hits a pole come back non-finite.
pub fn freq_response(sys: &dyn Frequency, w: &[f64]) -> Result<Vec<Complex64>, LtiError> {
    if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) || w.windows(2).any(|p| p[1] <= p[0]) {
        return Err(LtiError::BadGrid);
    }
    Ok(w.iter().map(|&x| sys.at(x)).collect())
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub w: f64,
    /// Gain margin in dB at a phase crossover, phase margin in degrees at a
    /// gain crossover.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Smallest positive gain margin; infinite when no phase crossover has |L| < 1.
    pub gm_db: f64,
    /// Gain-reduction margin for conditionally stable loops (negative dB).
    pub gm_lower_db: Option<f64>,
    pub pm_deg: f64,
    pub wpc: Option<f64>,
    pub wcg: Option<f64>,
    pub dm_s: f64,
    pub phase_crossovers: Vec<Crossover>,
    pub gain_crossovers: Vec<Crossover>,
    pub no_phase_crossover: bool,
    pub no_gain_crossover: bool,
}

impl Margins {
    pub fn gm_linear(&self) -> f64 {
        10f64.powf(self.gm_db / 20.0)
    }
}

pub const MARGIN_GRID_LO: f64 = 1e-3;
pub const MARGIN_GRID_HI: f64 = 1e3;
pub const MARGIN_GRID_POINTS: usize = 2000;

fn wrap_deg(x: f64) -> f64 {
    let mut v = (x + 180.0).rem_euclid(360.0) - 180.0;
    if v == -180.0 {
        v = 180.0;
    }
    v
}

fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    // Bisection in log w; f(lo) and f(hi) have opposite signs.
    let mut flo = f(lo);
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Gain, phase and delay margins from the open-loop frequency response.
///
/// Crossovers are bracketed on a log grid over [1e-3, 1e3] rad/s and
/// refined by bisection. The rational phase is unwrapped along the grid and
/// the dead time enters as the exact term `-w tau`.
pub fn analytic_margins(sys: &dyn Frequency) -> Margins {
    let grid = log_grid(MARGIN_GRID_LO, MARGIN_GRID_HI, MARGIN_GRID_POINTS);
    let tau = sys.dead_time();
    let rational: Vec<Complex64> = grid.iter().map(|&w| sys.rational_at(w)).collect();

    let mut unwrapped = Vec::with_capacity(grid.len());
    let mut prev: Option<f64> = None;
    for r in &rational {
        let raw = r.arg().to_degrees();
        let ph = match prev {
            Some(p) if raw.is_finite() => p + wrap_deg(raw - p),
            _ => raw,
        };
        unwrapped.push(ph);
        if ph.is_finite() {
            prev = Some(ph);
        }
    }

    // Rational phase at an arbitrary w, continued from a known grid value.
    let phase_near = |w: f64, anchor: f64| -> f64 {
        let raw = sys.rational_at(w).arg().to_degrees();
        anchor + wrap_deg(raw - anchor) - (w * tau).to_degrees()
    };

    let mut phase_crossovers = Vec::new();
    let mut gain_crossovers = Vec::new();
    for i in 0..grid.len() - 1 {
        let (w0, w1) = (grid[i], grid[i + 1]);
        let (m0, m1) = (rational[i].norm(), rational[i + 1].norm());
        if !(m0.is_finite()
            && m1.is_finite()
            && unwrapped[i].is_finite()
            && unwrapped[i + 1].is_finite())
        {
            continue;
        }
        let anchor = unwrapped[i];
        let p0 = unwrapped[i] - (w0 * tau).to_degrees();
        let p1 = unwrapped[i + 1] - (w1 * tau).to_degrees();

        let q0 = ((p0 + 180.0) / 360.0).floor();
        let q1 = ((p1 + 180.0) / 360.0).floor();
        if q0 != q1 {
            let level = 360.0 * q0.max(q1) - 180.0;
            let w = bisect(|w| phase_near(w, anchor) - level, w0, w1);
            let gm = -20.0 * sys.rational_at(w).norm().log10();
            phase_crossovers.push(Crossover { w, margin: gm });
        }

        let (l0, l1) = (m0.ln(), m1.ln());
        if (l0 > 0.0) != (l1 > 0.0) {
            let w = bisect(|w| sys.rational_at(w).norm().ln(), w0, w1);
            let pm = wrap_deg(180.0 + phase_near(w, anchor));
            gain_crossovers.push(Crossover { w, margin: pm });
        }
    }

    let upper = phase_crossovers
        .iter()
        .filter(|c| c.margin > 0.0)
        .min_by(|a, b| a.margin.total_cmp(&b.margin));
    let lower = phase_crossovers
        .iter()
        .filter(|c| c.margin < 0.0)
        .max_by(|a, b| a.margin.total_cmp(&b.margin));
    let (gm_db, wpc) = match upper {
        Some(c) => (c.margin, Some(c.w)),
        None => (f64::INFINITY, None),
    };

    let worst_pm = gain_crossovers
        .iter()
        .min_by(|a, b| a.margin.total_cmp(&b.margin));
    let dm_s = gain_crossovers
        .iter()
        .map(|c| c.margin.to_radians() / c.w)
        .fold(f64::INFINITY, f64::min);
    let (pm_deg, wcg) = match worst_pm {
        Some(c) => (c.margin, Some(c.w)),
        None => (f64::INFINITY, None),
    };

    Margins {
        gm_db,
        gm_lower_db: lower.map(|c| c.margin),
        pm_deg,
        wpc,
        wcg,
        dm_s,
        no_phase_crossover: upper.is_none(),
        no_gain_crossover: gain_crossovers.is_empty(),
        phase_crossovers,
        gain_crossovers,
    }
}

/// Delay margin convention shared with the robustness probes: `PM / w_cg`.
pub fn delay_margin_from_phase(pm_deg: f64, wcg: f64) -> f64 {
    pm_deg * PI / 180.0 / wcg
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(a: f64, b: f64) -> StateSpace {
        StateSpace::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap()
    }

    /// Truncated Taylor series of e^x, independent of the Pade path.
    fn exp_series(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..40 {
            term *= x / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn first_order_canonical_form() {
        let ss = tf_to_ss(&TransferFunction::new(vec![1.0], vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(ss.a()[(0, 0)], -1.0);
        assert_eq!(ss.b()[(0, 0)], 1.0);
        assert_eq!(ss.c()[(0, 0)], 1.0);
        assert_eq!(ss.d()[(0, 0)], 0.0);
    }

    #[test]
    fn second_order_realization_has_expected_poles() {
        let tf = TransferFunction::new(vec![225.0], vec![1.0, 12.0, 225.0]).unwrap();
        let p = poles(&tf_to_ss(&tf).unwrap());
        // Quadratic formula: (-12 +- sqrt(144 - 900)) / 2 = -6 +- j sqrt(189)
        let im = (900.0f64 - 144.0).sqrt() / 2.0;
        assert_eq!(p.len(), 2);
        assert_relative_eq!(p[0].re, -6.0, epsilon = 1e-10);
        assert_relative_eq!(p[0].im, -im, epsilon = 1e-10);
        assert_relative_eq!(p[1].im, 189f64.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn realization_preserves_dc_gain_and_frequency_response() {
        let tf = TransferFunction::new(vec![2.0], vec![0.5, 1.0]).unwrap();
        let ss = tf_to_ss(&tf).unwrap();
        assert_relative_eq!(ss.dc_gain().unwrap()[(0, 0)], 2.0, epsilon = 1e-12);

        let tf = TransferFunction::new(vec![3.0, 1.0, 4.0], vec![1.0, 5.0, 9.0, 2.0]).unwrap();
        let ss = tf_to_ss(&tf).unwrap();
        for w in [0.1, 1.0, 7.0] {
            let (a, b) = (tf.at(w), ss.at(w));
            assert_relative_eq!(a.re, b.re, epsilon = 1e-10);
            assert_relative_eq!(a.im, b.im, epsilon = 1e-10);
        }
    }

    #[test]
    fn biproper_realization_carries_feedthrough() {
        let tf = TransferFunction::new(vec![2.0, 3.0], vec![1.0, 1.0]).unwrap();
        let ss = tf_to_ss(&tf).unwrap();
        assert_eq!(ss.d()[(0, 0)], 2.0);
        assert_relative_eq!(ss.dc_gain().unwrap()[(0, 0)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn improper_tf_rejected() {
        let err = TransferFunction::new(vec![1.0, 0.0, 0.0], vec![1.0, 1.0]).unwrap_err();
        assert_eq!(err, LtiError::Improper { num: 2, den: 1 });
        assert_eq!(
            TransferFunction::new(vec![1.0], vec![0.0]).unwrap_err(),
            LtiError::ZeroDenominator
        );
    }

    #[test]
    fn state_space_dimension_checks() {
        let err = StateSpace::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
        );
        assert!(matches!(err, Err(LtiError::Dimension(_))));
        let err = StateSpace::new(
            DMatrix::from_element(1, 1, f64::NAN),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
        );
        assert_eq!(err.unwrap_err(), LtiError::NonFinite("A"));
    }

    #[test]
    fn zoh_of_scalar_decay_matches_series() {
        let dm = discretize_zoh(&scalar(-1.0, 1.0), 0.1).unwrap();
        assert_relative_eq!(dm.ad()[(0, 0)], exp_series(-0.1), epsilon = 1e-14);
        assert_relative_eq!(dm.ad()[(0, 0)], 0.904_837, epsilon = 1e-6);
        // Bd = (1 - e^-dt) for a = -1, b = 1
        assert_relative_eq!(dm.bd()[(0, 0)], 1.0 - exp_series(-0.1), epsilon = 1e-14);
    }

    #[test]
    fn zoh_of_integrator() {
        let dm = discretize_zoh(&scalar(0.0, 1.0), 0.01).unwrap();
        assert_eq!(dm.ad()[(0, 0)], 1.0);
        assert_relative_eq!(dm.bd()[(0, 0)], 0.01, epsilon = 1e-16);
    }

    #[test]
    fn zoh_rejects_bad_dt_and_overflow() {
        assert_eq!(
            discretize_zoh(&scalar(-1.0, 1.0), 0.0).unwrap_err(),
            LtiError::BadSampleTime(0.0)
        );
        assert!(matches!(
            discretize_zoh(&scalar(1.0, 1.0), 1e6),
            Err(LtiError::Overflow(_))
        ));
    }

    #[test]
    fn discrete_step_basics() {
        let dm = discretize_zoh(&scalar(0.0, 1.0), 0.01).unwrap();
        let zero = DVector::zeros(1);
        let (x, y) = dm.step(&zero, &zero);
        assert_eq!((x[0], y[0]), (0.0, 0.0));
        let one = DVector::from_element(1, 1.0);
        let (x, y) = dm.step(&one, &zero);
        assert_eq!((x[0], y[0]), (1.0, 1.0));
    }

    #[test]
    fn frequency_response_points() {
        let integ = TransferFunction::new(vec![1.0], vec![1.0, 0.0]).unwrap();
        let g = integ.at(1.0);
        assert_relative_eq!(g.norm(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.arg().to_degrees(), -90.0, epsilon = 1e-12);

        let lag = TransferFunction::new(vec![1.0], vec![1.0, 1.0]).unwrap();
        let g = lag.at(1.0);
        assert_relative_eq!(g.norm(), 0.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(g.arg().to_degrees(), -45.0, epsilon = 1e-12);

        let delayed = integ.clone().with_delay(1.0).unwrap();
        let g = delayed.at(1.0);
        // -90 - 57.29578 deg = -147.29578 deg
        assert_relative_eq!(
            g.arg().to_degrees(),
            -90.0 - 1f64.to_degrees(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn frequency_response_flags_pole_points() {
        let integ =
            tf_to_ss(&TransferFunction::new(vec![1.0], vec![1.0, 0.0, 1.0]).unwrap()).unwrap();
        let out = freq_response(&integ, &[0.5, 1.0, 2.0]).unwrap();
        assert!(out[0].re.is_finite());
        assert!(!out[1].re.is_finite() || out[1].norm() > 1e12);
        assert!(freq_response(&integ, &[1.0, 0.5]).is_err());
        assert!(freq_response(&integ, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn margins_of_integrator() {
        let l = TransferFunction::new(vec![1.0], vec![1.0, 0.0]).unwrap();
        let m = analytic_margins(&l);
        assert!(m.gm_db.is_infinite());
        assert!(m.no_phase_crossover);
        assert_relative_eq!(m.pm_deg, 90.0, epsilon = 1e-9);
        assert_relative_eq!(m.wcg.unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(m.dm_s, PI / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn margins_of_delayed_integrator() {
        let l = TransferFunction::new(vec![1.0], vec![1.0, 0.0])
            .unwrap()
            .with_delay(1.0)
            .unwrap();
        let m = analytic_margins(&l);
        // Phase -90 - w*180/pi reaches -180 at w = pi/2, where |L| = 2/pi.
        assert_relative_eq!(m.wpc.unwrap(), PI / 2.0, epsilon = 1e-9);
        assert_relative_eq!(m.gm_db, 20.0 * (PI / 2.0).log10(), epsilon = 1e-9);
        assert_relative_eq!(m.gm_db, 3.922, epsilon = 1e-3);
        // PM = 180 - 90 - 57.2958 at w = 1
        assert_relative_eq!(m.pm_deg, 90.0 - 1f64.to_degrees(), epsilon = 1e-7);
        assert_relative_eq!(m.dm_s, PI / 2.0 - 1.0, epsilon = 1e-9);
    }

    #[test]
    fn margins_scale_with_gain() {
        // Starts with ~16 dB so that the doubled loop is still stable.
        let l = TransferFunction::new(vec![0.25], vec![1.0, 0.0])
            .unwrap()
            .with_delay(1.0)
            .unwrap();
        let base = analytic_margins(&l).gm_db;
        let doubled = analytic_margins(&l.scaled(2.0)).gm_db;
        assert_relative_eq!(base - doubled, 20.0 * 2f64.log10(), epsilon = 1e-9);
    }

    #[test]
    fn margins_of_third_order_lag() {
        // 4/(s+1)^3: phase -180 at w = sqrt(3), |L| = 4/8.
        let l = TransferFunction::new(vec![4.0], vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        let m = analytic_margins(&l);
        assert_relative_eq!(m.wpc.unwrap(), 3f64.sqrt(), epsilon = 1e-9);
        assert_relative_eq!(m.gm_db, 20.0 * 2f64.log10(), epsilon = 1e-9);
    }

    #[test]
    fn tf_serde_round_trip() {
        let tf = TransferFunction::new(vec![225.0], vec![1.0, 12.0, 225.0]).unwrap();
        let s = serde_json::to_string(&tf).unwrap();
        let back: TransferFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(tf, back);
        let bad: Result<TransferFunction, _> =
            serde_json::from_str(r#"{"num":[1,0,0],"den":[1,1]}"#);
        assert!(bad.is_err());
    }
}
