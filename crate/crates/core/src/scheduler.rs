//! Segment plans and progressive attention masks.
//!
//! Positions are 0-based in code. A plan splits a horizon of `T_h` steps into
//! segments that are decoded in parallel; segment `i` starts at `starts[i]`
//! and the decoder needs `n_step = max(length)` sequential passes. At pass
//! `t` (0-based) the positions `min(start + t, T_h - 1)` are (re)written, and
//! their attention rows permit every position written at passes `0..=t`.

use std::fmt::Write as _;

use crate::numerics::Real;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SchedulerError {
    #[error("n_g = {n_groups} must be within 1..={horizon}")]
    GroupCount { n_groups: usize, horizon: usize },
    #[error("invalid segment starts {starts:?} for horizon {horizon}: {reason}")]
    InvalidStarts {
        starts: Vec<usize>,
        horizon: usize,
        reason: &'static str,
    },
    #[error("latent vector has length {got}, expected {expected}")]
    LatentLength { got: usize, expected: usize },
}

/// Sorted segment starts with derived lengths and pass count.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentPlan {
    horizon: usize,
    starts: Vec<usize>,
    lengths: Vec<usize>,
    n_step: usize,
}

impl SegmentPlan {
    /// Builds a plan from 0-based starts. The first start must be 0 and the
    /// starts strictly increasing inside the horizon.
    pub fn from_starts(horizon: usize, starts: Vec<usize>) -> Result<Self, SchedulerError> {
        let invalid = |reason| SchedulerError::InvalidStarts {
            starts: starts.clone(),
            horizon,
            reason,
        };
        if horizon == 0 {
            return Err(invalid("empty horizon"));
        }
        if starts.first() != Some(&0) {
            return Err(invalid("first segment must start at the first step"));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("starts must be strictly increasing"));
        }
        if starts.iter().any(|&s| s >= horizon) {
            return Err(invalid("start beyond the horizon"));
        }
        let mut lengths: Vec<usize> = starts.windows(2).map(|w| w[1] - w[0]).collect();
        lengths.push(horizon - starts[starts.len() - 1]);
        let n_step = *lengths.iter().max().expect("non-empty");
        Ok(Self {
            horizon,
            starts,
            lengths,
            n_step,
        })
    }

    /// Same as [`SegmentPlan::from_starts`] with 1-based positions.
    pub fn from_one_based(horizon: usize, starts: &[usize]) -> Result<Self, SchedulerError> {
        if starts.contains(&0) {
            return Err(SchedulerError::InvalidStarts {
                starts: starts.to_vec(),
                horizon,
                reason: "1-based positions start at 1",
            });
        }
        Self::from_starts(horizon, starts.iter().map(|s| s - 1).collect())
    }

    /// Single segment: one step per pass.
    pub fn autoregressive(horizon: usize) -> Self {
        Self::from_starts(horizon, vec![0]).expect("valid")
    }

    /// Every step its own segment: one pass.
    pub fn non_autoregressive(horizon: usize) -> Self {
        Self::from_starts(horizon, (0..horizon).collect()).expect("valid")
    }

    /// Evenly spaced starts `floor(i * T_h / n_g)`.
    pub fn even(horizon: usize, n_groups: usize) -> Result<Self, SchedulerError> {
        check_groups(horizon, n_groups)?;
        Self::from_starts(horizon, (0..n_groups).map(|i| i * horizon / n_groups).collect())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn starts_one_based(&self) -> Vec<usize> {
        self.starts.iter().map(|s| s + 1).collect()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn n_groups(&self) -> usize {
        self.starts.len()
    }

    pub fn n_step(&self) -> usize {
        self.n_step
    }

    pub fn is_start(&self, pos: usize) -> bool {
        self.starts.binary_search(&pos).is_ok()
    }

    /// Positions written at pass `t`, in segment order (may repeat `T_h - 1`).
    pub fn iteration_positions(&self, t: usize) -> Vec<usize> {
        self.starts
            .iter()
            .map(|&s| (s + t).min(self.horizon - 1))
            .collect()
    }

    /// Compact `1;3;5` rendering with 1-based positions.
    pub fn describe(&self) -> String {
        self.starts_one_based()
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn check_groups(horizon: usize, n_groups: usize) -> Result<(), SchedulerError> {
    if n_groups == 0 || n_groups > horizon {
        return Err(SchedulerError::GroupCount { n_groups, horizon });
    }
    Ok(())
}

/// How segment starts are read off a latent importance vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartSelection {
    /// Step 1 is always a start; the other `n_g - 1` are the largest scores
    /// among the remaining steps.
    #[default]
    ForcedFirst,
    /// Plain top-`n_g`; rejected when step 1 is not among them.
    TopK,
}

/// Indices of the `k` largest entries, ties broken toward the lower index,
/// returned in rank order.
pub fn argtopk(z: &[Real], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn select_starts(z: &[Real], n_groups: usize) -> Result<SegmentPlan, SchedulerError> {
    select_starts_with(z, n_groups, StartSelection::ForcedFirst)
}

pub fn select_starts_with(
    z: &[Real],
    n_groups: usize,
    selection: StartSelection,
) -> Result<SegmentPlan, SchedulerError> {
    let horizon = z.len();
    check_groups(horizon, n_groups)?;
    let mut starts = match selection {
        StartSelection::ForcedFirst => {
            let mut s: Vec<usize> = argtopk(&z[1..], n_groups - 1)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            s.push(0);
            s
        }
        StartSelection::TopK => argtopk(z, n_groups),
    };
    starts.sort_unstable();
    SegmentPlan::from_starts(horizon, starts)
}

/// `|cos(k * n_g * pi / T_h)|` for `k = 0..T_h`.
pub fn spacing_weights(horizon: usize, n_groups: usize) -> Vec<Real> {
    let step = n_groups as Real * std::f64::consts::PI / horizon as Real;
    (0..horizon).map(|k| (k as Real * step).cos().abs()).collect()
}

/// `softmax(z) * W`: damps scores between evenly spaced peaks so that the
/// selected starts spread out and `n_step` shrinks.
pub fn reweight(z: &[Real], n_groups: usize) -> Vec<Real> {
    let max = z.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = z.iter().map(|v| (v - max).exp()).collect();
    let total: Real = exps.iter().sum();
    exps.iter()
        .zip(spacing_weights(z.len(), n_groups))
        .map(|(e, w)| e / total * w)
        .collect()
}

/// Progressive mask with the per-pass history needed by the decode loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgressiveMask {
    horizon: usize,
    /// `snapshots[t]` is the full matrix after pass `t`.
    snapshots: Vec<Vec<bool>>,
    /// `written[t]` is the index set `ind` filled at pass `t`.
    written: Vec<Vec<usize>>,
}

pub fn build_mask(plan: &SegmentPlan) -> ProgressiveMask {
    let h = plan.horizon();
    let mut matrix = vec![false; h * h];
    let mut row = vec![false; h];
    let mut ind: Vec<usize> = plan.starts().to_vec();
    for &i in &ind {
        row[i] = true;
    }
    let mut snapshots = Vec::with_capacity(plan.n_step());
    let mut written = Vec::with_capacity(plan.n_step());
    for _ in 0..plan.n_step() {
        for &i in &ind {
            matrix[i * h..(i + 1) * h].copy_from_slice(&row);
        }
        snapshots.push(matrix.clone());
        written.push(ind.clone());
        for i in ind.iter_mut() {
            *i = (*i + 1).min(h - 1);
        }
        for &i in &ind {
            row[i] = true;
        }
    }
    ProgressiveMask {
        horizon: h,
        snapshots,
        written,
    }
}

impl ProgressiveMask {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_passes(&self) -> usize {
        self.snapshots.len()
    }

    /// Final `T_h x T_h` matrix, row-major; `true` = key permitted.
    pub fn matrix(&self) -> &[bool] {
        self.snapshots.last().expect("at least one pass")
    }

    /// Matrix after pass `t` (0-based).
    pub fn snapshot(&self, t: usize) -> &[bool] {
        &self.snapshots[t]
    }

    /// Positions written at pass `t` (0-based).
    pub fn written(&self, t: usize) -> &[usize] {
        &self.written[t]
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.matrix()[row * self.horizon + col]
    }

    pub fn to_ascii(&self) -> String {
        grid_ascii(self.matrix(), self.horizon)
    }
}

/// Renders a row-major boolean matrix as lines of `0`/`1`.
pub fn grid_ascii(matrix: &[bool], n: usize) -> String {
    let mut out = String::with_capacity(n * (n + 1));
    for r in 0..n {
        for c in 0..n {
            out.push(if matrix[r * n + c] { '1' } else { '0' });
        }
        let _ = writeln!(out);
    }
    out
}

/// Parses rows of `0`/`1` characters into a row-major matrix.
pub fn parse_grid(rows: &[&str]) -> Vec<bool> {
    rows.iter()
        .flat_map(|r| r.chars().map(|c| c == '1'))
        .collect()
}
