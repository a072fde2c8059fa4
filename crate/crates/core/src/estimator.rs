//! External-wrench regression and its static/periodic decomposition.
//!
//! Every control step the one-step residual of the nominal model is mapped to
//! the wrench that explains it,
//!
//! ```text
//! ξ* = (Q_dᵀ S Q_d)⁻¹ Q_dᵀ S (x_{k+1} − A_d x_k − B_d u_k − G_d)
//! ```
//!
//! Samples go into a fixed-length window. Each channel of the window is
//! fitted with `d + A·sin(2πft + φ)`: `f` is the argmax of a least-squares
//! periodogram over a fixed grid, then `(d, a, b)` come from linear least
//! squares against `[1, sin, cos]` at that frequency.

use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DiscreteModel, Disturbance, State};

pub const CHANNELS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("Q_dᵀ S Q_d is not invertible")]
    RankDeficient,
    #[error("input length {got} does not match model input dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sample time {t} is not after the previous sample at {last}")]
    NonMonotonicTime { t: f64, last: f64 },
    #[error("window is empty")]
    EmptyWindow,
    #[error("window spans {span} s, need at least {needed} s")]
    InsufficientWindow { span: f64, needed: f64 },
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
}

/// Which disturbance forecast the MPC receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationMode {
    Off,
    Static,
    Periodic,
}

impl CompensationMode {
    pub const ALL: [CompensationMode; 3] = [
        CompensationMode::Off,
        CompensationMode::Static,
        CompensationMode::Periodic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompensationMode::Off => "off",
            CompensationMode::Static => "static",
            CompensationMode::Periodic => "periodic",
        }
    }
}

impl std::fmt::Display for CompensationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CompensationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(CompensationMode::Off),
            "static" => Ok(CompensationMode::Static),
            "periodic" => Ok(CompensationMode::Periodic),
            other => Err(format!("unknown mode '{other}' (expected off|static|periodic)")),
        }
    }
}

/// How the static-compensation estimate evolves over an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticPolicy {
    /// Mean over the first `static_window` seconds, then held. Nothing is
    /// compensated before that.
    #[default]
    Frozen,
    /// Mean of the current sliding window, updated every step.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Residual weighting `S` over the (ω, v) rows, row-major.
    pub weight: [[f64; CHANNELS]; CHANNELS],
    /// Window length, samples.
    pub window: usize,
    /// Sample period, s.
    pub dt: f64,
    /// Frequency grid, Hz.
    pub f_min: f64,
    pub f_max: f64,
    pub df: f64,
    /// Amplitudes below these collapse a channel to static (N, N·m).
    pub min_amplitude_force: f64,
    pub min_amplitude_torque: f64,
    /// Seconds between periodic refits.
    pub refit_interval: f64,
    /// Length of the static-estimate window, s.
    pub static_window: f64,
    pub static_policy: StaticPolicy,
    /// Channels (fx, fy, fz, tx, ty, tz) that are forwarded to the MPC.
    pub compensate: [bool; CHANNELS],
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let mut weight = [[0.0; CHANNELS]; CHANNELS];
        for (i, row) in weight.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        EstimatorConfig {
            weight,
            window: 300,
            dt: 0.03,
            f_min: 0.25,
            f_max: 2.0,
            df: 0.01,
            min_amplitude_force: 1.0,
            min_amplitude_torque: 0.1,
            refit_interval: 0.1,
            static_window: 6.0,
            static_policy: StaticPolicy::Frozen,
            compensate: [true, true, true, false, false, false],
        }
    }
}

impl EstimatorConfig {
    pub fn weight_matrix(&self) -> Matrix6<f64> {
        Matrix6::from_fn(|i, j| self.weight[i][j])
    }

    /// Shortest window span that admits a periodic fit: two periods of `f_min`.
    pub fn min_span(&self) -> f64 {
        2.0 / self.f_min
    }

    pub fn frequency_grid(&self) -> Vec<f64> {
        let count = ((self.f_max - self.f_min) / self.df + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.f_min + i as f64 * self.df).collect()
    }

    pub fn amplitude_threshold(&self, channel: usize) -> f64 {
        if channel < 3 {
            self.min_amplitude_force
        } else {
            self.min_amplitude_torque
        }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let s = self.weight_matrix();
        if (s - s.transpose()).amax() > 0.0 || s.cholesky().is_none() {
            return Err(EstimatorError::InvalidConfig(
                "weight must be symmetric positive definite".into(),
            ));
        }
        if !(self.dt > 0.0) || !(self.df > 0.0) || !(self.f_min > 0.0) || !(self.f_max >= self.f_min) {
            return Err(EstimatorError::InvalidConfig(
                "need dt > 0, df > 0 and 0 < f_min ≤ f_max".into(),
            ));
        }
        let needed = 2 * (1.0 / (self.f_min * self.dt)).ceil() as usize;
        if self.window < needed {
            return Err(EstimatorError::InvalidConfig(format!(
                "window of {} samples cannot span two periods of f_min (need {needed})",
                self.window
            )));
        }
        Ok(())
    }
}

/// Closed-form weighted least-squares wrench from one transition.
///
/// Only the ω and v rows carry `Q_d`, so `S` weights those six rows of the
/// residual.
pub fn estimate_instant(
    x_next: &State,
    x: &State,
    u: &nalgebra::DVector<f64>,
    model: &DiscreteModel,
    weight: &Matrix6<f64>,
) -> Result<Disturbance, EstimatorError> {
    if u.len() != model.input_dim() {
        return Err(EstimatorError::DimensionMismatch {
            expected: model.input_dim(),
            got: u.len(),
        });
    }
    let residual = x_next.to_vector() - model.a * x.to_vector() - &model.b * u - model.g;
    let q = model.q.fixed_rows::<6>(6).into_owned();
    let r = residual.fixed_rows::<6>(6).into_owned();
    let qts = q.transpose() * weight;
    let normal = qts * q;
    let chol = normal.cholesky().ok_or(EstimatorError::RankDeficient)?;
    let xi = chol.solve(&(qts * r));
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(EstimatorError::RankDeficient);
    }
    Ok(Disturbance::from_vector(&xi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSample {
    pub t: f64,
    pub xi: Vector6<f64>,
}

/// Most recent `capacity` samples in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualHistory {
    samples: VecDeque<ResidualSample>,
    capacity: usize,
}

impl ResidualHistory {
    pub fn new(capacity: usize) -> Self {
        ResidualHistory {
            samples: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push_sample(&mut self, t: f64, xi: Vector6<f64>) -> Result<(), EstimatorError> {
        if let Some(last) = self.samples.back() {
            if !(t > last.t) {
                return Err(EstimatorError::NonMonotonicTime { t, last: last.t });
            }
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(ResidualSample { t, xi });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &ResidualSample> {
        self.samples.iter()
    }

    /// Time covered by the window assuming each sample stands for `dt`.
    pub fn span(&self, dt: f64) -> f64 {
        match (self.samples.front(), self.samples.back()) {
            (Some(first), Some(last)) => last.t - first.t + dt,
            _ => 0.0,
        }
    }

    /// Dumps the window as `t,xi1,…,xi6`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "xi1", "xi2", "xi3", "xi4", "xi5", "xi6"])?;
        for s in &self.samples {
            let mut record = vec![s.t.to_string()];
            record.extend(s.xi.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-channel mean of the window.
pub fn fit_static(history: &ResidualHistory) -> Result<Vector6<f64>, EstimatorError> {
    if history.is_empty() {
        return Err(EstimatorError::EmptyWindow);
    }
    let sum = history.iter().fold(Vector6::zeros(), |acc, s| acc + s.xi);
    Ok(sum / history.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelFit {
    pub d_static: f64,
    /// Zero when the channel collapsed to static.
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    /// rad, in [0, 2π).
    pub phase: f64,
}

impl ChannelFit {
    pub fn eval(&self, t: f64) -> f64 {
        if self.amplitude == 0.0 {
            self.d_static
        } else {
            self.d_static + self.amplitude * (TAU * self.frequency * t + self.phase).sin()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PeriodicModel {
    pub channels: [ChannelFit; CHANNELS],
    /// Plain window mean, used by static compensation.
    pub window_mean: Vector6<f64>,
}

impl PeriodicModel {
    /// Static-only model around `mean`.
    pub fn constant(mean: Vector6<f64>) -> Self {
        PeriodicModel {
            channels: std::array::from_fn(|c| ChannelFit {
                d_static: mean[c],
                ..Default::default()
            }),
            window_mean: mean,
        }
    }

    pub fn eval(&self, t: f64) -> Vector6<f64> {
        Vector6::from_fn(|c, _| self.channels[c].eval(t))
    }
}

/// Sums needed for a `[1, sin, cos]` least-squares fit at one frequency.
struct Basis {
    gram: Matrix3<f64>,
    sin: Vec<f64>,
    cos: Vec<f64>,
}

impl Basis {
    fn new(times: &[f64], frequency: f64) -> Self {
        let w = TAU * frequency;
        let (mut sin, mut cos) = (Vec::with_capacity(times.len()), Vec::with_capacity(times.len()));
        let (mut ss, mut sc, mut cc, mut s1, mut c1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &t in times {
            let (s, c) = (w * t).sin_cos();
            ss += s * s;
            sc += s * c;
            cc += c * c;
            s1 += s;
            c1 += c;
            sin.push(s);
            cos.push(c);
        }
        let n = times.len() as f64;
        Basis {
            gram: Matrix3::new(n, s1, c1, s1, ss, sc, c1, sc, cc),
            sin,
            cos,
        }
    }

    /// `(β, βᵀXᵀy)` for the signal `y`.
    fn solve(&self, y: &[f64]) -> Option<(Vector3<f64>, f64)> {
        let mut rhs = Vector3::zeros();
        for ((&v, &s), &c) in y.iter().zip(&self.sin).zip(&self.cos) {
            rhs.x += v;
            rhs.y += v * s;
            rhs.z += v * c;
        }
        let beta = self.gram.cholesky()?.solve(&rhs);
        Some((beta, beta.dot(&rhs)))
    }
}

/// Fits `d + A·sin(2πft + φ)` to every channel of the window.
pub fn fit_periodic(
    history: &ResidualHistory,
    config: &EstimatorConfig,
) -> Result<PeriodicModel, EstimatorError> {
    if history.is_empty() {
        return Err(EstimatorError::EmptyWindow);
    }
    let span = history.span(config.dt);
    let needed = config.min_span();
    if span + 1e-9 < needed || history.len() < 3 {
        return Err(EstimatorError::InsufficientWindow { span, needed });
    }
    let mean = fit_static(history)?;
    let times: Vec<f64> = history.iter().map(|s| s.t).collect();
    let signals: Vec<Vec<f64>> = (0..CHANNELS)
        .map(|c| history.iter().map(|s| s.xi[c]).collect())
        .collect();
    let n = times.len() as f64;
    let mean_power: Vec<f64> = (0..CHANNELS).map(|c| mean[c] * mean[c] * n).collect();

    // (power, frequency) of the best grid point per channel
    let mut best: [Option<(f64, f64)>; CHANNELS] = [None; CHANNELS];
    for f in config.frequency_grid() {
        let basis = Basis::new(&times, f);
        for c in 0..CHANNELS {
            let Some((_, explained)) = basis.solve(&signals[c]) else {
                continue;
            };
            let power = explained - mean_power[c];
            if best[c].is_none_or(|(p, _)| power > p) {
                best[c] = Some((power, f));
            }
        }
    }

    let mut model = PeriodicModel::constant(mean);
    for c in 0..CHANNELS {
        let Some((_, f)) = best[c] else { continue };
        let basis = Basis::new(&times, f);
        let Some((beta, _)) = basis.solve(&signals[c]) else {
            continue;
        };
        let amplitude = beta.y.hypot(beta.z);
        if amplitude < config.amplitude_threshold(c) {
            continue;
        }
        model.channels[c] = ChannelFit {
            d_static: beta.x,
            amplitude,
            frequency: f,
            phase: beta.z.atan2(beta.y).rem_euclid(TAU),
        };
    }
    Ok(model)
}

/// Disturbance sequence for steps `t0 + i·dt`, `i = 0..k`.
pub fn forecast(
    model: &PeriodicModel,
    t0: f64,
    k: usize,
    dt: f64,
    mode: CompensationMode,
) -> Vec<Disturbance> {
    (0..k)
        .map(|i| {
            let xi = match mode {
                CompensationMode::Off => Vector6::zeros(),
                CompensationMode::Static => model.window_mean,
                CompensationMode::Periodic => model.eval(t0 + i as f64 * dt),
            };
            Disturbance::from_vector(&xi)
        })
        .collect()
}

/// Estimator state owned by one control loop.
#[derive(Debug, Clone)]
pub struct DisturbanceEstimator {
    config: EstimatorConfig,
    weight: Matrix6<f64>,
    history: ResidualHistory,
    periodic: Option<PeriodicModel>,
    last_fit: Option<f64>,
    static_sum: Vector6<f64>,
    static_count: usize,
    frozen: Option<Vector6<f64>>,
    latest: Vector6<f64>,
}

impl DisturbanceEstimator {
    pub fn new(config: EstimatorConfig) -> Result<Self, EstimatorError> {
        config.validate()?;
        Ok(DisturbanceEstimator {
            weight: config.weight_matrix(),
            history: ResidualHistory::new(config.window),
            config,
            periodic: None,
            last_fit: None,
            static_sum: Vector6::zeros(),
            static_count: 0,
            frozen: None,
            latest: Vector6::zeros(),
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn history(&self) -> &ResidualHistory {
        &self.history
    }

    /// Latest instantaneous estimate.
    pub fn latest(&self) -> Vector6<f64> {
        self.latest
    }

    pub fn periodic_model(&self) -> Option<&PeriodicModel> {
        self.periodic.as_ref()
    }

    /// Regresses the transition `x → x_next` under `u` and stores the sample
    /// at `t`, the midpoint of the step.
    pub fn ingest(
        &mut self,
        t: f64,
        x_next: &State,
        x: &State,
        u: &nalgebra::DVector<f64>,
        model: &DiscreteModel,
    ) -> Result<Disturbance, EstimatorError> {
        let xi = estimate_instant(x_next, x, u, model, &self.weight)?;
        self.push(t, xi.to_vector())?;
        Ok(xi)
    }

    pub fn push(&mut self, t: f64, xi: Vector6<f64>) -> Result<(), EstimatorError> {
        self.history.push_sample(t, xi)?;
        self.latest = xi;
        if self.frozen.is_none() && t < self.config.static_window {
            self.static_sum += xi;
            self.static_count += 1;
        }
        Ok(())
    }

    /// Freezes the static estimate once `now` passes the static window and
    /// refits the periodic model on the refit cadence.
    pub fn update(&mut self, now: f64) -> Result<(), EstimatorError> {
        if self.frozen.is_none() && now >= self.config.static_window && self.static_count > 0 {
            self.frozen = Some(self.static_sum / self.static_count as f64);
        }
        let due = self
            .last_fit
            .is_none_or(|last| now - last >= self.config.refit_interval - 1e-9);
        if due && self.history.span(self.config.dt) + 1e-9 >= self.config.min_span() {
            self.periodic = Some(fit_periodic(&self.history, &self.config)?);
            self.last_fit = Some(now);
        }
        Ok(())
    }

    /// Static estimate under the configured policy, if one exists yet.
    pub fn static_estimate(&self) -> Option<Vector6<f64>> {
        match self.config.static_policy {
            StaticPolicy::Frozen => self.frozen,
            StaticPolicy::Continuous => fit_static(&self.history).ok(),
        }
    }

    /// Forecast over `k` steps starting at `t0`. Periodic mode falls back to
    /// the static estimate until a fit exists; static falls back to zero.
    pub fn forecast(&self, mode: CompensationMode, t0: f64, k: usize, dt: f64) -> Vec<Disturbance> {
        let static_model = || PeriodicModel::constant(self.static_estimate().unwrap_or_default());
        let raw = match mode {
            CompensationMode::Off => forecast(&PeriodicModel::default(), t0, k, dt, mode),
            CompensationMode::Static => forecast(&static_model(), t0, k, dt, mode),
            CompensationMode::Periodic => match &self.periodic {
                Some(model) => forecast(model, t0, k, dt, mode),
                None => forecast(&static_model(), t0, k, dt, CompensationMode::Static),
            },
        };
        raw.into_iter()
            .map(|d| {
                let mut xi = d.to_vector();
                for (c, keep) in self.config.compensate.iter().enumerate() {
                    if !keep {
                        xi[c] = 0.0;
                    }
                }
                Disturbance::from_vector(&xi)
            })
            .collect()
    }
}

/// Wraps a phase difference into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}
