//! Central-difference gradient verification.
//!
//! The loss under test is expressed as a closure that rebuilds the graph from
//! plain parameter data, so each perturbed evaluation runs on a fresh tape:
//!
//! ```
//! use ifprune::tensor::{gradcheck, CheckParam, Graph, Var};
//!
//! let p = CheckParam::new("w", vec![2], vec![0.3, -0.7]);
//! let report = gradcheck::grad_check(
//!     &[p],
//!     |g: &mut Graph, vars: &[Var]| {
//!         let s = g.silu(vars[0])?;
//!         g.sum(s)
//!     },
//!     1e-5,
//!     1e-6,
//!     1e-7,
//! )
//! .unwrap();
//! assert!(report.pass);
//! ```

use super::graph::{Graph, Var};
use crate::Result;

/// A named parameter block fed to the loss builder as a trainable leaf.
#[derive(Clone)]
pub struct CheckParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckParam {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        CheckParam {
            name: name.to_string(),
            shape,
            data,
        }
    }
}

/// Worst relative error per parameter plus the overall verdict.
#[derive(Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

fn eval_loss<F>(params: &[CheckParam], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.data.clone(), p.shape.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &vars)?;
    Ok(g.scalar_value(loss))
}

/// Analytic gradients for all parameters from one backward pass.
fn analytic_grads<F>(params: &[CheckParam], build: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.data.clone(), p.shape.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf gradient").to_vec())
        .collect())
}

/// Numeric gradients by central differences, one loss pair per coordinate.
fn numeric_grads<F>(params: &[CheckParam], build: &F, eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<CheckParam> = params.to_vec();
    for pi in 0..params.len() {
        let mut grad = vec![0.0; params[pi].data.len()];
        for ci in 0..grad.len() {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + eps;
            let up = eval_loss(&work, build)?;
            work[pi].data[ci] = orig - eps;
            let down = eval_loss(&work, build)?;
            work[pi].data[ci] = orig;
            grad[ci] = (up - down) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Relative error between matching gradient blocks, maximized per parameter:
/// |a - n| / max(|a|, |n|, abs_tol / rel_tol). The floor makes the effective
/// test |a - n| <= abs_tol on near-zero coordinates, where central
/// differences bottom out at numerical noise, and a pure relative comparison
/// elsewhere.
pub fn compare_grads(
    params: &[CheckParam],
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    rel_tol: f64,
    abs_tol: f64,
) -> GradCheckReport {
    let floor = abs_tol / rel_tol;
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0_f64;
    for (p, (a, n)) in params.iter().zip(analytic.iter().zip(numeric)) {
        let mut worst = 0.0_f64;
        for (&av, &nv) in a.iter().zip(n) {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(floor);
            worst = worst.max(rel);
        }
        max_rel = max_rel.max(worst);
        per_param.push((p.name.clone(), worst));
    }
    GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        tol: rel_tol,
        pass: max_rel <= rel_tol,
    }
}

/// Verify analytic gradients of `build`'s scalar loss against central
/// differences with step `eps`, at relative tolerance `rel_tol` with an
/// `abs_tol` noise floor for near-zero coordinates.
pub fn grad_check<F>(
    params: &[CheckParam],
    build: F,
    eps: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(params, &build)?;
    let numeric = numeric_grads(params, &build, eps)?;
    Ok(compare_grads(params, &analytic, &numeric, rel_tol, abs_tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    // loss = sum((x * x) * 0.5): grad = x, easy to corrupt for the negative
    // control below.
    fn quadratic(g: &mut Graph, vars: &[Var]) -> Result<Var> {
        let sq = g.mul(vars[0], vars[0])?;
        let half = g.scale(sq, 0.5)?;
        g.sum(half)
    }

    #[test]
    fn quadratic_passes() {
        let p = CheckParam::new("x", vec![3], vec![0.5, -1.25, 2.0]);
        let report = grad_check(&[p], quadratic, 1e-5, 1e-8, 1e-9).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_analytic_gradient_is_rejected() {
        let p = CheckParam::new("x", vec![3], vec![0.5, -1.25, 2.0]);
        let params = [p];
        let mut analytic = super::analytic_grads(&params, &quadratic).unwrap();
        analytic[0][1] += 0.37;
        let numeric = super::numeric_grads(&params, &quadratic, 1e-5).unwrap();
        let report = compare_grads(&params, &analytic, &numeric, 1e-6, 1e-7);
        assert!(!report.pass);
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn report_names_worst_parameter() {
        let a = CheckParam::new("a", vec![2], vec![0.4, 0.6]);
        let b = CheckParam::new("b", vec![2], vec![-0.3, 0.9]);
        let build = |g: &mut Graph, vars: &[Var]| {
            let prod = g.mul(vars[0], vars[1])?;
            g.sum(prod)
        };
        let report = grad_check(&[a, b], build, 1e-5, 1e-7, 1e-8).unwrap();
        assert_eq!(report.per_param.len(), 2);
        assert_eq!(report.per_param[0].0, "a");
        assert_eq!(report.per_param[1].0, "b");
        assert!(report.pass);
    }
}
