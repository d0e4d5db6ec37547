//! Backtracking Armijo search and blocking step computation.

use crate::ftocp::FtocpInstance;

use super::active_set::ActiveSet;
use super::ACTIVE_TOL;

/// Upper limit on cost evaluations in one backtracking run.
pub const MAX_TRIALS: usize = 40;

/// Outcome of one backtracking run.
#[derive(Debug, Clone, PartialEq)]
pub struct Backtrack {
    /// Best examined step and its cost; `None` if no trial decreased the cost.
    pub best: Option<(f64, f64)>,
    /// Whether some trial met the Armijo condition.
    pub armijo: bool,
    /// Examined `(alpha, cost)` pairs in order.
    pub trials: Vec<(f64, f64)>,
}

/// Geometric backtracking from `alpha0` on `J(alpha)` given by `eval`
/// (`None` counts as infinite cost). Stops at the first step satisfying
/// `J(a) - j0 <= decrease * a * slope` and returns the lowest-cost trial.
pub fn backtracking(
    j0: f64,
    slope: f64,
    alpha0: f64,
    backtrack: f64,
    decrease: f64,
    mut eval: impl FnMut(f64) -> Option<f64>,
) -> Backtrack {
    let mut out = Backtrack {
        best: None,
        armijo: false,
        trials: Vec::new(),
    };
    let mut alpha = alpha0;
    while out.trials.len() < MAX_TRIALS && alpha > f64::EPSILON * 1e-2 {
        let j = eval(alpha).filter(|x| x.is_finite()).unwrap_or(f64::INFINITY);
        out.trials.push((alpha, j));
        if j < j0 && out.best.is_none_or(|(_, jb)| j < jb) {
            out.best = Some((alpha, j));
        }
        if j - j0 <= decrease * alpha * slope {
            out.armijo = true;
            break;
        }
        alpha *= backtrack;
    }
    out
}

/// Largest step in `[0, 1]` keeping all constraints outside `act` feasible
/// along `d`, and the blocking constraint (lowest id on ties) if below 1.
/// Constraints within `ACTIVE_TOL` of zero block at once.
pub fn alpha_max(inst: &FtocpInstance, act: &ActiveSet, u: &[f64], d: &[f64]) -> (f64, Option<usize>) {
    let layout = inst.layout();
    let mut best = 1.0;
    let mut hit = None;
    for id in 0..layout.count() {
        if act.contains(id) {
            continue;
        }
        let c = layout.decode(id);
        let slope = inst.constraint_slope(c, d);
        if !(slope > 0.0) {
            continue;
        }
        let g = inst.constraint_value(c, u);
        let a = if g >= -ACTIVE_TOL { 0.0 } else { -g / slope };
        if a < best {
            best = a;
            hit = Some(id);
        }
    }
    (best, hit)
}
