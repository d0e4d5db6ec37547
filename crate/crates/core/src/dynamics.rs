//! Discrete-time propagation `z_{k+1} = f(z_k, u_k)` with fixed-step
//! Runge-Kutta schemes and finite-difference linearization.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{ModelError, ModelSpec};

/// Integration scheme, numbered as the `intmethod` code parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Explicit Euler.
    Euler = 1,
    /// Explicit midpoint rule.
    Midpoint = 2,
    /// Kutta's third-order (Simpson) rule.
    Kutta3 = 3,
    /// Heun's third-order rule.
    Heun3 = 4,
    /// Classical fourth-order Runge-Kutta.
    Rk4 = 5,
    /// Implicit Euler.
    ImplicitEuler = 6,
    /// Implicit trapezoidal rule.
    Trapezoidal = 7,
}

impl Method {
    pub fn from_code(code: u32) -> Option<Method> {
        Some(match code {
            1 => Method::Euler,
            2 => Method::Midpoint,
            3 => Method::Kutta3,
            4 => Method::Heun3,
            5 => Method::Rk4,
            6 => Method::ImplicitEuler,
            7 => Method::Trapezoidal,
            _ => return None,
        })
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    /// Classical convergence order of the scheme.
    pub fn order(self) -> u32 {
        match self {
            Method::Euler | Method::ImplicitEuler => 1,
            Method::Midpoint | Method::Trapezoidal => 2,
            Method::Kutta3 | Method::Heun3 => 3,
            Method::Rk4 => 4,
        }
    }

    pub fn is_implicit(self) -> bool {
        matches!(self, Method::ImplicitEuler | Method::Trapezoidal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Additional evenly spaced support nodes per sampling interval.
    pub supnds: usize,
    pub newtontol: f64,
    pub newtonit: usize,
    /// Sampling time in seconds.
    pub dt: f64,
    /// Finite-difference step of the Newton Jacobian.
    pub finitediff: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk4,
            supnds: 0,
            newtontol: 1e-14,
            newtonit: 10,
            dt: 0.05,
            finitediff: 1e-6,
        }
    }
}

impl IntegratorConfig {
    pub fn new(method: Method, dt: f64) -> Self {
        IntegratorConfig {
            method,
            dt,
            ..Default::default()
        }
    }

    pub fn with_supnds(mut self, supnds: usize) -> Self {
        self.supnds = supnds;
        self
    }

    /// Length of one integration sub-step.
    pub fn substep(&self) -> f64 {
        self.dt / (1 + self.supnds) as f64
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if self.method.is_implicit() {
            if !(self.newtontol > 0.0) || self.newtonit == 0 {
                return Err(DynamicsError::InvalidConfig(
                    "newtontol and newtonit must be positive".into(),
                ));
            }
            if !(self.finitediff > 0.0) {
                return Err(DynamicsError::InvalidConfig("finitediff must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Newton iteration did not converge (residual {residual:e})")]
    NewtonDivergence { residual: f64 },
    #[error("integration produced a non-finite state")]
    NonFiniteState,
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("finite-difference step must be positive")]
    BadStep,
}

struct Tableau {
    a: &'static [&'static [f64]],
    b: &'static [f64],
}

const EULER: Tableau = Tableau { a: &[&[]], b: &[1.0] };
const MIDPOINT: Tableau = Tableau {
    a: &[&[], &[0.5]],
    b: &[0.0, 1.0],
};
const KUTTA3: Tableau = Tableau {
    a: &[&[], &[0.5], &[-1.0, 2.0]],
    b: &[1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0],
};
const HEUN3: Tableau = Tableau {
    a: &[&[], &[1.0 / 3.0], &[0.0, 2.0 / 3.0]],
    b: &[0.25, 0.0, 0.75],
};
const RK4: Tableau = Tableau {
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
};

fn tableau(method: Method) -> Option<&'static Tableau> {
    match method {
        Method::Euler => Some(&EULER),
        Method::Midpoint => Some(&MIDPOINT),
        Method::Kutta3 => Some(&KUTTA3),
        Method::Heun3 => Some(&HEUN3),
        Method::Rk4 => Some(&RK4),
        Method::ImplicitEuler | Method::Trapezoidal => None,
    }
}

/// Scratch buffers for allocation-free stepping. Sized for one model.
#[derive(Debug, Clone)]
pub struct Workspace {
    n: usize,
    stages: Vec<f64>,
    arg: Vec<f64>,
    cur: Vec<f64>,
    pert: Vec<f64>,
    upert: Vec<f64>,
    base: Vec<f64>,
    jac: DMatrix<f64>,
    res: DVector<f64>,
}

impl Workspace {
    pub fn new(n: usize, m: usize) -> Self {
        Workspace {
            n,
            stages: vec![0.0; 4 * n],
            arg: vec![0.0; n],
            cur: vec![0.0; n],
            pert: vec![0.0; n],
            upert: vec![0.0; m],
            base: vec![0.0; n],
            jac: DMatrix::zeros(n, n),
            res: DVector::zeros(n),
        }
    }

    pub fn for_model(model: &ModelSpec) -> Self {
        Workspace::new(model.n(), model.m())
    }

    fn ensure(&mut self, n: usize, m: usize) {
        if self.n != n || self.upert.len() != m {
            *self = Workspace::new(n, m);
        }
    }
}

fn explicit_substep(
    model: &ModelSpec,
    tab: &Tableau,
    h: f64,
    u: &[f64],
    ws: &mut Workspace,
) -> Result<(), DynamicsError> {
    let n = ws.n;
    for (s, row) in tab.a.iter().enumerate() {
        ws.arg.copy_from_slice(&ws.cur);
        for (j, &aij) in row.iter().enumerate() {
            if aij != 0.0 {
                let kj = &ws.stages[j * n..(j + 1) * n];
                for (a, k) in ws.arg.iter_mut().zip(kj) {
                    *a += h * aij * k;
                }
            }
        }
        let (_, rest) = ws.stages.split_at_mut(s * n);
        model.eval_ode_into(&ws.arg, u, &mut rest[..n])?;
    }
    for (s, &bs) in tab.b.iter().enumerate() {
        if bs != 0.0 {
            let ks = &ws.stages[s * n..(s + 1) * n];
            for (c, k) in ws.cur.iter_mut().zip(ks) {
                *c += h * bs * k;
            }
        }
    }
    Ok(())
}

/// One implicit Euler or trapezoidal sub-step solved by Newton-Raphson with a
/// finite-difference Jacobian, warm-started from the explicit Euler predictor.
fn implicit_substep(
    model: &ModelSpec,
    trapezoidal: bool,
    h: f64,
    u: &[f64],
    cfg: &IntegratorConfig,
    ws: &mut Workspace,
) -> Result<(), DynamicsError> {
    let n = ws.n;
    let theta = if trapezoidal { 0.5 } else { 1.0 };
    // stage 0 holds F(z), stage 1 the iterate w, stage 2 F(w)
    let (f0, rest) = ws.stages.split_at_mut(n);
    let (w, rest) = rest.split_at_mut(n);
    let (fw, _) = rest.split_at_mut(n);
    model.eval_ode_into(&ws.cur, u, f0)?;
    for i in 0..n {
        w[i] = ws.cur[i] + h * f0[i];
    }

    let residual = |w: &[f64], fw: &[f64], out: &mut DVector<f64>, z: &[f64], f0: &[f64]| {
        let mut norm = 0.0f64;
        for i in 0..n {
            let explicit_part = if trapezoidal { (1.0 - theta) * h * f0[i] } else { 0.0 };
            out[i] = w[i] - z[i] - explicit_part - theta * h * fw[i];
            norm = norm.max(out[i].abs());
        }
        norm
    };

    let mut last = f64::INFINITY;
    for _ in 0..=cfg.newtonit {
        model.eval_ode_into(w, u, fw)?;
        let rnorm = residual(w, fw, &mut ws.res, &ws.cur, f0);
        let scale = 1.0 + w.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        last = rnorm;
        if !rnorm.is_finite() {
            return Err(DynamicsError::NonFiniteState);
        }
        if rnorm <= cfg.newtontol * scale {
            ws.cur.copy_from_slice(w);
            return Ok(());
        }
        // J = I - theta*h*dF/dw, by forward differences
        for j in 0..n {
            ws.pert.copy_from_slice(w);
            let step = cfg.finitediff * (1.0 + w[j].abs());
            ws.pert[j] += step;
            model.eval_ode_into(&ws.pert, u, &mut ws.arg)?;
            for i in 0..n {
                let d = (ws.arg[i] - fw[i]) / step;
                ws.jac[(i, j)] = if i == j { 1.0 } else { 0.0 } - theta * h * d;
            }
        }
        let lu = ws.jac.clone().lu();
        let Some(delta) = lu.solve(&ws.res) else {
            return Err(DynamicsError::NewtonDivergence { residual: rnorm });
        };
        for i in 0..n {
            w[i] -= delta[i];
        }
    }
    Err(DynamicsError::NewtonDivergence { residual: last })
}

/// Advances `z` by one sampling interval into `out`, reusing `ws`.
pub fn integrate_step_with(
    model: &ModelSpec,
    z: &[f64],
    u: &[f64],
    cfg: &IntegratorConfig,
    ws: &mut Workspace,
    out: &mut [f64],
) -> Result<(), DynamicsError> {
    ws.ensure(model.n(), model.m());
    if z.len() != model.n() {
        return Err(ModelError::DimensionMismatch {
            expected: model.n(),
            found: z.len(),
        }
        .into());
    }
    let h = cfg.substep();
    if !(h > 0.0 && h.is_finite()) {
        return Err(DynamicsError::InvalidConfig(format!("dt must be positive, got {}", cfg.dt)));
    }
    ws.cur.copy_from_slice(z);
    for _ in 0..=cfg.supnds {
        match tableau(cfg.method) {
            Some(tab) => explicit_substep(model, tab, h, u, ws)?,
            None => implicit_substep(
                model,
                cfg.method == Method::Trapezoidal,
                h,
                u,
                cfg,
                ws,
            )?,
        }
    }
    if ws.cur.iter().any(|x| !x.is_finite()) {
        return Err(DynamicsError::NonFiniteState);
    }
    out.copy_from_slice(&ws.cur);
    Ok(())
}

/// Advances `z` by one sampling interval under the zero-order-hold input `u`.
pub fn integrate_step(
    model: &ModelSpec,
    z: &[f64],
    u: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, DynamicsError> {
    let mut ws = Workspace::for_model(model);
    let mut out = vec![0.0; model.n()];
    integrate_step_with(model, z, u, cfg, &mut ws, &mut out)?;
    Ok(out)
}

/// Forward-difference Jacobians of the discrete map. `a` is n*n and `b` is
/// n*m, both row-major; `next` receives `f(z, u)`.
#[allow(clippy::too_many_arguments)]
pub fn linearize_discrete_with(
    model: &ModelSpec,
    z: &[f64],
    u: &[f64],
    cfg: &IntegratorConfig,
    h: f64,
    ws: &mut Workspace,
    next: &mut [f64],
    a: &mut [f64],
    b: &mut [f64],
) -> Result<(), DynamicsError> {
    if !(h > 0.0) {
        return Err(DynamicsError::BadStep);
    }
    let n = model.n();
    let m = model.m();
    ws.ensure(n, m);
    integrate_step_with(model, z, u, cfg, ws, next)?;
    let mut zp = std::mem::take(&mut ws.pert);
    let mut up = std::mem::take(&mut ws.upert);
    let mut col = std::mem::take(&mut ws.base);
    let result = (|| {
        zp.copy_from_slice(z);
        for j in 0..n {
            zp[j] = z[j] + h;
            integrate_step_with(model, &zp, u, cfg, ws, &mut col)?;
            zp[j] = z[j];
            for i in 0..n {
                a[i * n + j] = (col[i] - next[i]) / h;
            }
        }
        up.copy_from_slice(u);
        for j in 0..m {
            up[j] = u[j] + h;
            integrate_step_with(model, z, &up, cfg, ws, &mut col)?;
            up[j] = u[j];
            for i in 0..n {
                b[i * m + j] = (col[i] - next[i]) / h;
            }
        }
        Ok(())
    })();
    ws.pert = zp;
    ws.upert = up;
    ws.base = col;
    result
}

/// Forward-difference linearization `(A, B)` of the discrete map at `(z, u)`.
pub fn linearize_discrete(
    model: &ModelSpec,
    z: &[f64],
    u: &[f64],
    cfg: &IntegratorConfig,
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
    let n = model.n();
    let m = model.m();
    let mut ws = Workspace::new(n, m);
    let mut next = vec![0.0; n];
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * m];
    linearize_discrete_with(model, z, u, cfg, h, &mut ws, &mut next, &mut a, &mut b)?;
    Ok((
        DMatrix::from_row_slice(n, n, &a),
        DMatrix::from_row_slice(n, m, &b),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_kbm, parse_model};

    fn decay_model() -> ModelSpec {
        parse_model(
            "states: x, y, phi, v, delta\ninputs: a, ddelta\n\
             dot(x)=0;\ndot(y)=0;\ndot(phi)=0;\ndot(v)=-v;\ndot(delta)=0;\n",
        )
        .unwrap()
    }

    #[test]
    fn euler_straight_line() {
        let cfg = IntegratorConfig::new(Method::Euler, 0.1);
        let z = integrate_step(&builtin_kbm(), &[0.0, 0.0, 0.0, 1.0, 0.0], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(z, vec![0.1, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn trapezoidal_closed_form() {
        let dt = 0.1;
        let cfg = IntegratorConfig::new(Method::Trapezoidal, dt);
        let z = integrate_step(&decay_model(), &[0.0, 0.0, 0.0, 2.0, 0.0], &[0.0, 0.0], &cfg).unwrap();
        let expect = 2.0 * (1.0 - dt / 2.0) / (1.0 + dt / 2.0);
        assert!((z[3] - expect).abs() <= 1e-14 * 10.0);
    }

    #[test]
    fn implicit_euler_closed_form() {
        let dt = 0.2;
        let cfg = IntegratorConfig::new(Method::ImplicitEuler, dt);
        let z = integrate_step(&decay_model(), &[0.0, 0.0, 0.0, 1.5, 0.0], &[0.0, 0.0], &cfg).unwrap();
        assert!((z[3] - 1.5 / (1.0 + dt)).abs() <= 1e-13);
    }

    #[test]
    fn newton_failure_is_an_error() {
        let mut cfg = IntegratorConfig::new(Method::ImplicitEuler, 0.1);
        cfg.newtonit = 1;
        cfg.newtontol = 1e-300;
        let m = builtin_kbm();
        let r = integrate_step(&m, &[0.0, 0.0, 0.3, 4.0, 0.2], &[0.0, 0.0], &cfg);
        assert!(matches!(r, Err(DynamicsError::NewtonDivergence { .. })));
    }

    #[test]
    fn euler_input_column() {
        let cfg = IntegratorConfig::new(Method::Euler, 0.1);
        let (_, b) = linearize_discrete(&builtin_kbm(), &[1.0, 2.0, 0.3, 3.0, 0.1], &[0.2, -0.1], &cfg, 1e-6).unwrap();
        let col = b.column(0);
        for i in 0..5 {
            let want = if i == 3 { 0.1 } else { 0.0 };
            assert!((col[i] - want).abs() < 1e-9, "row {i}: {}", col[i]);
        }
    }

    #[test]
    fn method_codes() {
        for c in 1..=7 {
            assert_eq!(Method::from_code(c).unwrap().code(), c);
        }
        assert!(Method::from_code(0).is_none());
        assert!(Method::from_code(8).is_none());
    }
}
