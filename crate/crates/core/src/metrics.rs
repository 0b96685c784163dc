//! Power-quality and tracking metrics over sampled windows.

use std::f64::consts::PI;

use serde::Serialize;

use crate::sim::SimulationTrace;
use crate::{Error, Result};

pub const DEFAULT_HARMONICS: usize = 40;
/// Relative fundamental magnitude below which THD is undefined.
const FUNDAMENTAL_FLOOR: f64 = 1e-12;

/// Sample range `[start, start + len)` spanning an integer number of periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyWindow {
    pub start: usize,
    pub len: usize,
    pub sample_rate: f64,
    pub f0: f64,
}

impl SteadyWindow {
    pub fn new(start: usize, len: usize, sample_rate: f64, f0: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && f0 > 0.0) {
            return Err(Error::param("window", "sample rate and f0 must be positive"));
        }
        if len == 0 {
            return Err(Error::param("window", "empty window"));
        }
        let periods = len as f64 * f0 / sample_rate;
        if (periods - periods.round()).abs() > 1e-9 * periods.max(1.0) || periods.round() < 1.0 {
            return Err(Error::NonIntegerWindow { periods });
        }
        Ok(Self {
            start,
            len,
            sample_rate,
            f0,
        })
    }

    /// The last `periods` fundamental periods of a trace.
    pub fn last_periods(trace: &SimulationTrace, f0: f64, periods: usize) -> Result<Self> {
        let fs = 1.0 / trace.sample_interval();
        let len = (periods as f64 * fs / f0).round() as usize;
        if len > trace.len() {
            return Err(Error::param("window", "trace shorter than the requested window"));
        }
        Self::new(trace.len() - len, len, fs, f0)
    }

    pub fn start_time(&self) -> f64 {
        self.start as f64 / self.sample_rate
    }

    pub fn end_time(&self) -> f64 {
        (self.start + self.len) as f64 / self.sample_rate
    }

    pub fn periods(&self) -> f64 {
        (self.len as f64 * self.f0 / self.sample_rate).round()
    }

    pub fn slice<'a>(&self, signal: &'a [f64]) -> Result<&'a [f64]> {
        signal
            .get(self.start..self.start + self.len)
            .ok_or_else(|| Error::param("window", "window lies outside the signal"))
    }
}

/// Complex DFT coefficient of `x` at `cycles` cycles per window.
fn dft_bin(x: &[f64], cycles: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let w = 2.0 * PI * cycles / n;
    let (mut re, mut im) = (0.0, 0.0);
    // rotate a phasor instead of calling sin/cos per sample; renormalise occasionally
    let (sw, cw) = w.sin_cos();
    let (mut c, mut s) = (1.0, 0.0);
    for (j, v) in x.iter().enumerate() {
        re += v * c;
        im -= v * s;
        let nc = c * cw - s * sw;
        s = s * cw + c * sw;
        c = nc;
        if j % 1024 == 1023 {
            let (ss, cc) = (w * (j + 1) as f64).sin_cos();
            c = cc;
            s = ss;
        }
    }
    (re, im)
}

/// `√(Σ_{k=2..n} |c_k|²) / |c₁|` at exact harmonic bins of `window.f0`.
pub fn thd(signal: &[f64], window: &SteadyWindow, n_harmonics: usize) -> Result<f64> {
    if n_harmonics < 2 {
        return Err(Error::param("n_harmonics", "must be at least 2"));
    }
    if n_harmonics as f64 * window.f0 >= 0.5 * window.sample_rate {
        return Err(Error::param("n_harmonics", "highest harmonic must lie below Nyquist"));
    }
    let x = window.slice(signal)?;
    let periods = window.periods();
    let mag2 = |k: usize| {
        let (re, im) = dft_bin(x, k as f64 * periods);
        re * re + im * im
    };
    let c1 = mag2(1).sqrt();
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max) * x.len() as f64;
    if c1 <= FUNDAMENTAL_FLOOR * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Undefined("THD: fundamental component is zero".into()));
    }
    let h: f64 = (2..=n_harmonics).map(mag2).sum();
    Ok(h.sqrt() / c1)
}

/// THD with every harmonic up to Nyquist, from Parseval: the AC power left
/// after removing the mean and the fundamental, over the fundamental.
pub fn thd_full_band(signal: &[f64], window: &SteadyWindow) -> Result<f64> {
    let x = window.slice(signal)?;
    let n = x.len() as f64;
    let (re, im) = dft_bin(x, window.periods());
    // one-sided amplitude² / 2 = fundamental mean-square
    let fund_ms = 2.0 * (re * re + im * im) / (n * n);
    let m = mean(x);
    let ac_ms = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    if fund_ms.sqrt() <= FUNDAMENTAL_FLOOR * ac_ms.sqrt().max(f64::MIN_POSITIVE) {
        return Err(Error::Undefined("THD: fundamental component is zero".into()));
    }
    Ok(((ac_ms - fund_ms).max(0.0) / fund_ms).sqrt())
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// `mean(v·i) / (rms(v)·rms(i))`.
pub fn power_factor(v: &[f64], i: &[f64]) -> Result<f64> {
    if v.len() != i.len() || v.is_empty() {
        return Err(Error::Dimension("power factor needs equal, non-empty windows".into()));
    }
    let (rv, ri) = (rms(v), rms(i));
    if rv == 0.0 || ri == 0.0 {
        return Err(Error::Undefined("power factor: zero RMS input".into()));
    }
    let p = v.iter().zip(i).map(|(a, b)| a * b).sum::<f64>() / v.len() as f64;
    Ok((p / (rv * ri)).clamp(-1.0, 1.0))
}

/// Trailing moving average over `k` samples (shorter at the start).
pub fn moving_average(x: &[f64], k: usize) -> Vec<f64> {
    let k = k.max(1);
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for (j, v) in x.iter().enumerate() {
        acc += v;
        if j >= k {
            acc -= x[j - k];
        }
        out.push(acc / (j + 1).min(k) as f64);
    }
    out
}

/// Which signal of a trace to compare against which reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Component {
    /// State column against its `x★` column.
    State(usize),
    /// Aux column against another aux column.
    Aux { value: usize, reference: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingSpec {
    /// `[t0, t1)` used for the norms.
    pub window: (f64, f64),
    /// Absolute half-width of the settling band.
    pub band: f64,
    /// Trailing moving average applied to the error before the band test.
    pub smoothing: usize,
    /// Settling is searched from this time on.
    pub settle_from: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackingError {
    pub rms: f64,
    pub max: f64,
    /// Time since `settle_from` after which the error stays in band; `None` if
    /// it never settles.
    pub settling_time: Option<f64>,
}

/// `reference − value` for a trace component.
pub fn component_error(trace: &SimulationTrace, comp: Component) -> Result<Vec<f64>> {
    let (v, r) = match comp {
        Component::State(j) if j < trace.x.width() => (trace.x.column(j), trace.x_star.column(j)),
        Component::Aux { value, reference } if value.max(reference) < trace.aux.width() => {
            (trace.aux.column(value), trace.aux.column(reference))
        }
        _ => return Err(Error::param("component", "no such trace column")),
    };
    Ok(r.iter().zip(&v).map(|(a, b)| a - b).collect())
}

pub fn tracking_error_series(t: &[f64], err: &[f64], spec: &TrackingSpec) -> TrackingError {
    let (t0, t1) = spec.window;
    let inside: Vec<f64> = t
        .iter()
        .zip(err)
        .filter(|(t, _)| **t >= t0 && **t < t1)
        .map(|(_, e)| *e)
        .collect();
    let smooth = moving_average(err, spec.smoothing);
    let mut settled_at = None;
    for k in (0..t.len()).rev() {
        if t[k] < spec.settle_from {
            break;
        }
        if smooth[k].abs() > spec.band {
            break;
        }
        settled_at = Some(t[k]);
    }
    TrackingError {
        rms: rms(&inside),
        max: inside.iter().map(|e| e.abs()).fold(0.0, f64::max),
        settling_time: settled_at.map(|ts| ts - spec.settle_from),
    }
}

pub fn tracking_error(trace: &SimulationTrace, comp: Component, spec: &TrackingSpec) -> Result<TrackingError> {
    let err = component_error(trace, comp)?;
    Ok(tracking_error_series(&trace.t, &err, spec))
}
