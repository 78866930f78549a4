//! Trials, channel harmonization, resampling, and covariance estimation.

use crate::error::{Error, Result};
use crate::spd::SpdMatrix;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Identifies a subject across the whole collection of data sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(pub u32);

/// Identifies a data set (recording campaign / experimental setup).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u32);

impl std::fmt::Display for SubjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// One epoch of multichannel signal (channels x samples) with its recording
/// metadata. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Trial {
    signal: DMatrix<f64>,
    rate: f64,
    pub subject: SubjectId,
    pub domain: DomainId,
    pub session: u32,
    /// Temporal order within the session; block-wise cross-validation splits on this.
    pub block: u32,
    pub label: Option<usize>,
}

impl Trial {
    pub fn new(
        signal: DMatrix<f64>,
        rate: f64,
        subject: SubjectId,
        domain: DomainId,
        session: u32,
        block: u32,
        label: Option<usize>,
    ) -> Result<Self> {
        if signal.nrows() == 0 || signal.ncols() == 0 {
            return Err(Error::EmptyInput("Trial::new: empty signal"));
        }
        if !signal.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite);
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sampling rate must be positive, got {rate}"
            )));
        }
        if signal.ncols() < 2 * signal.nrows() {
            log::warn!(
                "trial {subject}/{domain} block {block}: {} samples for {} channels; covariance estimates may be poor",
                signal.ncols(),
                signal.nrows()
            );
        }
        Ok(Trial {
            signal,
            rate,
            subject,
            domain,
            session,
            block,
            label,
        })
    }

    pub fn signal(&self) -> &DMatrix<f64> {
        &self.signal
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn channels(&self) -> usize {
        self.signal.nrows()
    }

    pub fn samples(&self) -> usize {
        self.signal.ncols()
    }

    /// Same metadata, new signal; rate optionally replaced.
    pub(crate) fn with_signal(&self, signal: DMatrix<f64>, rate: Option<f64>) -> Trial {
        Trial {
            signal,
            rate: rate.unwrap_or(self.rate),
            ..*self
        }
    }
}

/// Ordered list of unique channel names (10-20 style labels).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelMap(Vec<String>);

impl ChannelMap {
    pub fn new(names: impl IntoIterator<Item = impl Into<String>>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::EmptyInput("ChannelMap::new"));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateChannel(n.clone()));
            }
        }
        Ok(ChannelMap(names))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }
}

/// A trial's spatial covariance together with the shrinkage used and the
/// trial metadata it came from.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub cov: SpdMatrix,
    pub shrinkage: f64,
    pub subject: SubjectId,
    pub domain: DomainId,
    pub session: u32,
    pub block: u32,
    pub label: Option<usize>,
}

/// Default shrinkage; short trials make raw estimates ill-conditioned.
pub const DEFAULT_SHRINKAGE: f64 = 0.05;

/// Shrinkage sample covariance of a trial.
///
/// Rows are mean-centered, `C0 = Xc Xc' / (samples - 1)`, and the estimate is
/// `(1 - a) C0 + a (trace(C0)/channels) I`. The trace-scaled identity target
/// preserves total power in expectation.
pub fn sample_covariance(trial: &Trial, shrinkage: f64) -> Result<CovarianceEstimate> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidArgument(format!(
            "shrinkage must lie in [0, 1], got {shrinkage}"
        )));
    }
    let n = trial.channels();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "sample_covariance needs at least 2 channels".into(),
        ));
    }
    if trial.samples() < 2 {
        return Err(Error::InvalidArgument(
            "sample_covariance needs at least 2 samples".into(),
        ));
    }
    let raw = raw_covariance(trial.signal());
    let target = raw.trace() / n as f64;
    let mut shrunk = raw * (1.0 - shrinkage);
    for i in 0..n {
        shrunk[(i, i)] += shrinkage * target;
    }
    let cov = SpdMatrix::new(shrunk)?;
    Ok(CovarianceEstimate {
        cov,
        shrinkage,
        subject: trial.subject,
        domain: trial.domain,
        session: trial.session,
        block: trial.block,
        label: trial.label,
    })
}

/// Mean-centered `Xc Xc' / (samples - 1)` without the SPD check; alignment
/// fitting averages these across trials before validating.
pub(crate) fn raw_covariance(signal: &DMatrix<f64>) -> DMatrix<f64> {
    let n = signal.nrows();
    let t = signal.ncols();
    let mut centered = signal.clone();
    for i in 0..n {
        let mean = centered.row(i).sum() / t as f64;
        for j in 0..t {
            centered[(i, j)] -= mean;
        }
    }
    let cov = &centered * centered.transpose() / (t as f64 - 1.0);
    crate::spd::sym_part(&cov)
}

/// Intersection of all channel maps, ordered by the first map's order.
pub fn common_channels(maps: &[ChannelMap]) -> Result<ChannelMap> {
    let first = maps.first().ok_or(Error::EmptyInput("common_channels"))?;
    let kept: Vec<&String> = first
        .names()
        .iter()
        .filter(|name| maps[1..].iter().all(|m| m.position(name).is_some()))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyChannelIntersection);
    }
    ChannelMap::new(kept.into_iter().cloned())
}

/// Reorders / subsets a trial's rows from the `from` layout to the `keep` layout.
pub fn select_channels(trial: &Trial, from: &ChannelMap, keep: &ChannelMap) -> Result<Trial> {
    if trial.channels() != from.len() {
        return Err(Error::DimensionMismatch {
            op: "select_channels",
            expected: from.len(),
            found: trial.channels(),
        });
    }
    let mut rows = Vec::with_capacity(keep.len());
    for name in keep.names() {
        let idx = from
            .position(name)
            .ok_or_else(|| Error::UnknownChannel(name.clone()))?;
        rows.push(idx);
    }
    let t = trial.samples();
    let selected = DMatrix::from_fn(rows.len(), t, |i, j| trial.signal()[(rows[i], j)]);
    Ok(trial.with_signal(selected, None))
}

/// Resamples by linear interpolation on a uniform grid.
///
/// The output has `round(samples * target / rate)` samples; sample `j` is the
/// interpolated value at time `j / target`, clamped to the last input sample
/// at the right edge. Mild aliasing is accepted: covariance-level methods are
/// insensitive to it at this scale.
pub fn resample(trial: &Trial, target_rate: f64) -> Result<Trial> {
    if !(target_rate > 0.0 && target_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target rate must be positive, got {target_rate}"
        )));
    }
    let n = trial.channels();
    let t_in = trial.samples();
    let ratio = target_rate / trial.rate();
    let t_out = ((t_in as f64) * ratio).round().max(1.0) as usize;
    let step = trial.rate() / target_rate; // input-sample distance per output sample
    let mut out = DMatrix::zeros(n, t_out);
    for j in 0..t_out {
        let pos = j as f64 * step;
        let k = pos.floor() as usize;
        if k + 1 >= t_in {
            for i in 0..n {
                out[(i, j)] = trial.signal()[(i, t_in - 1)];
            }
        } else {
            let frac = pos - k as f64;
            for i in 0..n {
                let a = trial.signal()[(i, k)];
                let b = trial.signal()[(i, k + 1)];
                out[(i, j)] = a + frac * (b - a);
            }
        }
    }
    Ok(trial.with_signal(out, Some(target_rate)))
}
