use super::{Graph, NumericsError, Real, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: Real = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub max_rel_error: Real,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: Real,
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.passed)
    }

    pub fn max_rel_error(&self) -> Real {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, Real::max)
    }
}

fn evaluate<F>(f: &F, leaves: &[Tensor]) -> Result<Real, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `eps`. `f` must be deterministic.
pub fn grad_check<F>(
    f: F,
    leaves: &[Tensor],
    eps: Real,
    tol: Real,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, &leaves[li]);
        let mut worst: Real = 0.0;
        for i in 0..leaves[li].len() {
            let orig = leaves[li].data()[i];
            work[li].data_mut()[i] = orig + eps;
            let up = evaluate(&f, &work)?;
            work[li].data_mut()[i] = orig - eps;
            let down = evaluate(&f, &work)?;
            work[li].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        reports.push(LeafReport {
            leaf: li,
            max_rel_error: worst,
            passed: worst <= tol,
        });
    }
    Ok(GradCheckReport {
        tol,
        leaves: reports,
    })
}
