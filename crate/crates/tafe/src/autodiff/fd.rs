//! The independent gradient oracle: central finite differences, plus the
//! [`grad_check`] harness that rebuilds a computation twice per probed
//! coordinate and compares the tape's gradient against the oracle with the
//! scale-aware relative error
//!
//! ```text
//! rel_err = |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)
//! ```

use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, TafeError};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function: per coordinate,
/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let (n, c, hh, ww) = params[pi].shape();
        let mut g = vec![0.0; params[pi].numel()];
        for (ci, slot) in g.iter_mut().enumerate() {
            let original = work[pi].data()[ci];
            work[pi].data_mut()[ci] = original + h;
            let up = f(&work)?;
            work[pi].data_mut()[ci] = original - h;
            let down = f(&work)?;
            work[pi].data_mut()[ci] = original;
            *slot = (up - down) / (2.0 * h);
        }
        grads.push(Tensor::new(n, c, hh, ww, g)?);
    }
    Ok(grads)
}

/// How one gradient check should run.
#[derive(Clone, Debug)]
pub struct GradCheckSpec {
    /// Name carried into the report (and the CLI's JSON output).
    pub name: String,
    /// Pass threshold on the worst relative error.
    pub tol: f64,
    /// Finite-difference step.
    pub h: f64,
    /// Cap on probed coordinates. `None` probes every coordinate and
    /// requires the total parameter count to stay within [`FD_BUDGET`];
    /// `Some(p)` probes `p` evenly spread coordinates, which is how checks
    /// beyond the budget (the full model) stay tractable.
    pub max_probes: Option<usize>,
}

impl GradCheckSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            tol: 1e-5,
            h: 1e-6,
            max_probes: None,
        }
    }

    pub fn with_probes(mut self, probes: usize) -> Self {
        self.max_probes = Some(probes);
        self
    }
}

/// Exhaustive finite differencing is only allowed up to this many scalars.
pub const FD_BUDGET: usize = 5000;

/// Outcome of one gradient check.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub h: f64,
    pub tol: f64,
    /// Coordinates actually probed by the oracle.
    pub probes: usize,
    /// Total scalar parameter count of the checked function.
    pub total_scalars: usize,
}

/// Checks the tape gradient of `build` against finite differences.
///
/// `build` receives a fresh graph and one parameter leaf per entry of
/// `params`, and must return a scalar loss node. It is called once for the
/// tape gradient and twice per probed coordinate for the oracle, so it must
/// be deterministic.
pub fn grad_check<B>(spec: &GradCheckSpec, params: &[Tensor], build: B) -> Result<GradReport>
where
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let total: usize = params.iter().map(Tensor::numel).sum();
    if total == 0 {
        return Err(TafeError::Usage(format!(
            "gradient check {:?} has no parameters",
            spec.name
        )));
    }
    if total > FD_BUDGET && spec.max_probes.is_none() {
        return Err(TafeError::Config(format!(
            "gradient check {:?} has {total} scalars, over the exhaustive budget of {FD_BUDGET}; set a probe cap",
            spec.name
        )));
    }

    // Tape gradient once.
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = build(&mut graph, &ids)?;
    if graph.value(loss).numel() != 1 {
        return Err(TafeError::Usage(format!(
            "gradient check {:?}: build must return a scalar loss",
            spec.name
        )));
    }
    graph.backward(loss)?;
    let ad_grads: Vec<Tensor> = ids
        .iter()
        .map(|id| graph.grad(*id).expect("backward fills every parameter").clone())
        .collect();

    // Forward-only evaluation for the oracle.
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.input(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    };

    // Probe coordinates: everything within budget, else an evenly spread
    // deterministic subset.
    let probes: Vec<usize> = match spec.max_probes {
        Some(p) if p < total => (0..p).map(|i| i * total / p).collect(),
        _ => (0..total).collect(),
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_err = 0.0f64;
    for &coord in &probes {
        // map the flat coordinate onto (param, offset)
        let mut pi = 0;
        let mut off = coord;
        while off >= work[pi].numel() {
            off -= work[pi].numel();
            pi += 1;
        }
        let original = work[pi].data()[off];
        work[pi].data_mut()[off] = original + spec.h;
        let up = eval(&work)?;
        work[pi].data_mut()[off] = original - spec.h;
        let down = eval(&work)?;
        work[pi].data_mut()[off] = original;
        let g_fd = (up - down) / (2.0 * spec.h);
        let g_ad = ad_grads[pi].data()[off];
        let rel = (g_ad - g_fd).abs() / 1.0f64.max(g_ad.abs()).max(g_fd.abs());
        max_rel_err = max_rel_err.max(rel);
    }

    Ok(GradReport {
        name: spec.name.clone(),
        max_rel_err,
        pass: max_rel_err < spec.tol,
        h: spec.h,
        tol: spec.tol,
        probes: probes.len(),
        total_scalars: total,
    })
}
