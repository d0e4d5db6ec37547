//! Active constraints stored per input channel.
//!
//! For one channel the stage inputs `u_0(j) .. u_{N-1}(j)` form a line graph.
//! An active rate limit links two neighbouring stages, an active bound links a
//! stage to "ground". Consecutive stages joined by active rate limits form a
//! chain; a chain may carry at most one active bound; a second one would be
//! redundant. This keeps the equality rows linearly independent.

use crate::ftocp::{Constraint, ConstraintLayout, Side};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    layout: ConstraintLayout,
    /// `bound[j][k]`: active bound on `u_k(j)`.
    bound: Vec<Vec<Option<Side>>>,
    /// `rate[j][k]`, `k >= 1`: active rate limit between stages `k - 1` and `k`.
    rate: Vec<Vec<Option<Side>>>,
}

/// Equality row of the local QP for one stage and channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageRow {
    /// `u~_k(j) = 0`.
    Pin,
    /// `u~_k(j) - u~_{k-1}(j) = 0`.
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Added,
    AlreadyActive,
    /// Implied by active constraints; not stored.
    Redundant,
}

impl ActiveSet {
    pub fn new(layout: ConstraintLayout) -> ActiveSet {
        let n = layout.horizon;
        ActiveSet {
            layout,
            bound: vec![vec![None; n]; layout.m],
            rate: vec![vec![None; n]; layout.m],
        }
    }

    pub fn layout(&self) -> ConstraintLayout {
        self.layout
    }

    pub fn clear(&mut self) {
        for v in self.bound.iter_mut().chain(self.rate.iter_mut()) {
            v.iter_mut().for_each(|x| *x = None);
        }
    }

    /// Builds a set from constraint ids, skipping redundant ones.
    pub fn from_ids(layout: ConstraintLayout, ids: impl IntoIterator<Item = usize>) -> ActiveSet {
        let mut s = ActiveSet::new(layout);
        for id in ids {
            s.insert(id);
        }
        s
    }

    /// Stage range `(first, last)` of the chain containing stage `k` of channel `j`.
    pub fn chain(&self, j: usize, k: usize) -> (usize, usize) {
        let r = &self.rate[j];
        let mut a = k;
        while a > 0 && r[a].is_some() {
            a -= 1;
        }
        let mut b = k;
        while b + 1 < self.layout.horizon && r[b + 1].is_some() {
            b += 1;
        }
        (a, b)
    }

    /// Stage of the active bound in chain `(a, b)` of channel `j`, if any.
    pub fn chain_bound(&self, j: usize, a: usize, b: usize) -> Option<usize> {
        (a..=b).find(|&k| self.bound[j][k].is_some())
    }

    pub fn contains(&self, id: usize) -> bool {
        match self.layout.decode(id) {
            Constraint::Bound { k, j, side } => self.bound[j][k] == Some(side),
            Constraint::Rate { k, j, side } => self.rate[j][k] == Some(side),
        }
    }

    /// Whether adding `id` would keep the rows independent.
    pub fn can_insert(&self, id: usize) -> bool {
        match self.layout.decode(id) {
            Constraint::Bound { k, j, .. } => {
                let (a, b) = self.chain(j, k);
                self.chain_bound(j, a, b).is_none()
            }
            Constraint::Rate { k, j, .. } => {
                if self.rate[j][k].is_some() {
                    return false;
                }
                let (a0, b0) = self.chain(j, k - 1);
                let (a1, b1) = self.chain(j, k);
                self.chain_bound(j, a0, b0).is_none() || self.chain_bound(j, a1, b1).is_none()
            }
        }
    }

    pub fn insert(&mut self, id: usize) -> InsertOutcome {
        if self.contains(id) {
            return InsertOutcome::AlreadyActive;
        }
        if !self.can_insert(id) {
            return InsertOutcome::Redundant;
        }
        match self.layout.decode(id) {
            Constraint::Bound { k, j, side } => self.bound[j][k] = Some(side),
            Constraint::Rate { k, j, side } => self.rate[j][k] = Some(side),
        }
        InsertOutcome::Added
    }

    pub fn remove(&mut self, id: usize) -> bool {
        if !self.contains(id) {
            return false;
        }
        match self.layout.decode(id) {
            Constraint::Bound { k, j, .. } => self.bound[j][k] = None,
            Constraint::Rate { k, j, .. } => self.rate[j][k] = None,
        }
        true
    }

    /// Active ids in increasing order.
    pub fn ids(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for j in 0..self.layout.m {
            for k in 0..self.layout.horizon {
                if let Some(side) = self.bound[j][k] {
                    out.push(self.layout.id(Constraint::Bound { k, j, side }));
                }
                if let Some(side) = self.rate[j][k] {
                    out.push(self.layout.id(Constraint::Rate { k, j, side }));
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn len(&self) -> usize {
        self.bound
            .iter()
            .chain(self.rate.iter())
            .map(|v| v.iter().filter(|x| x.is_some()).count())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Canonical equality row for stage `k`, channel `j`. Every stage of a
    /// chain with a bound is pinned; otherwise each rate link ties its later
    /// stage to the earlier one. At most one row per stage and channel.
    pub fn stage_row(&self, j: usize, k: usize) -> Option<StageRow> {
        let (a, b) = self.chain(j, k);
        if self.chain_bound(j, a, b).is_some() {
            Some(StageRow::Pin)
        } else if k > a {
            Some(StageRow::Tie)
        } else {
            None
        }
    }

    /// Number of equality rows of stage `k`.
    pub fn rows_at(&self, k: usize) -> usize {
        (0..self.layout.m).filter(|&j| self.stage_row(j, k).is_some()).count()
    }

    /// Projects `d` (stage-major, `N m` values) onto the null space of the
    /// active rows: pinned chains become zero, free chains their mean.
    pub fn project(&self, d: &mut [f64]) {
        let m = self.layout.m;
        let n_h = self.layout.horizon;
        for j in 0..m {
            let mut k = 0;
            while k < n_h {
                let (a, b) = self.chain(j, k);
                if self.chain_bound(j, a, b).is_some() {
                    for s in a..=b {
                        d[s * m + j] = 0.0;
                    }
                } else if b > a {
                    let mean = (a..=b).map(|s| d[s * m + j]).sum::<f64>() / (b - a + 1) as f64;
                    for s in a..=b {
                        d[s * m + j] = mean;
                    }
                }
                k = b + 1;
            }
        }
    }

    /// Splits the constraint force `c` (stage-major, `N m` values, the
    /// active-row part of `G^T nu` on the inputs) into one multiplier per
    /// active constraint, using the gradient of each constraint `g <= 0`.
    /// With this convention all multipliers are non-negative at an optimum.
    pub fn multipliers(&self, c: &[f64], ts: f64) -> Vec<(usize, f64)> {
        let m = self.layout.m;
        let n_h = self.layout.horizon;
        let mut out = Vec::new();
        let bound_coef = |side: Side| if side == Side::Lower { -1.0 } else { 1.0 };
        // gradient coefficient of rate link k at its later stage k
        let rate_coef = |side: Side| if side == Side::Lower { -1.0 / ts } else { 1.0 / ts };
        for j in 0..m {
            let mut k = 0;
            while k < n_h {
                let (a, b) = self.chain(j, k);
                let ground = self.chain_bound(j, a, b);
                let left_end = ground.unwrap_or(b);
                // sweep from the left end: link s+1 balances the force at stage s
                let mut inflow = 0.0;
                for s in a..left_end {
                    let side = self.rate[j][s + 1].unwrap();
                    let kappa = -rate_coef(side);
                    let mu = (c[s * m + j] - inflow) / kappa;
                    out.push((self.layout.id(Constraint::Rate { k: s + 1, j, side }), mu));
                    inflow = mu * rate_coef(side);
                }
                if let Some(g) = ground {
                    let mut inflow_r = 0.0;
                    for s in ((g + 1)..=b).rev() {
                        let side = self.rate[j][s].unwrap();
                        let kappa = rate_coef(side);
                        let mu = (c[s * m + j] - inflow_r) / kappa;
                        out.push((self.layout.id(Constraint::Rate { k: s, j, side }), mu));
                        inflow_r = -mu * rate_coef(side);
                    }
                    let side = self.bound[j][g].unwrap();
                    let mu = (c[g * m + j] - inflow - inflow_r) / bound_coef(side);
                    out.push((self.layout.id(Constraint::Bound { k: g, j, side }), mu));
                }
                k = b + 1;
            }
        }
        out.sort_by_key(|&(id, _)| id);
        out
    }
}
