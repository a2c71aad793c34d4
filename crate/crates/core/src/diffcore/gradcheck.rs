//! Finite-difference oracle for analytic gradients.
//!
//! The checker rebuilds the loss graph from scratch for every perturbed
//! parameter component, so the loss function must be deterministic in the
//! store it is handed. Anything that should be held constant across the
//! check (frozen weights, pre-computed embeddings) must be captured by the
//! closure, not read from the store.

use crate::diffcore::tensor::{ParameterStore, Role};
use crate::diffcore::Tape;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::NodeId;

/// Loss builder handed to the checker: records a graph over the given store
/// and returns the tape plus the scalar loss node.
pub type LossFn<'a, F> = dyn Fn(&ParameterStore<F>) -> Result<(Tape<F>, NodeId)> + 'a;

/// Gradient comparison for one parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub role: Role,
    /// Largest relative error across the parameter's components.
    pub max_rel_err: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    /// Whether any analytic gradient component is nonzero (the loss actually
    /// depends on this parameter).
    pub reached: bool,
    pub passed: bool,
}

/// Full report of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// Set when the base forward pass sits near a ReLU kink or a max-pool
    /// tie; finite differences are untrustworthy at such points and the run
    /// should be repeated with different inputs.
    pub kink_flagged: bool,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// Name of the parameter with the worst error, if any.
    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).expect("finite errors"))
    }
}

/// Compare analytic gradients of `loss_fn` against central finite
/// differences `(f(p+eps) - f(p-eps)) / 2 eps`, component by component.
///
/// Relative error uses `|a - n| / max(|a|, |n|, floor)` with the
/// scalar-specific floor, so near-zero gradient pairs are judged on
/// absolute error.
pub fn finite_difference_check<F: Scalar>(
    loss_fn: &LossFn<'_, F>,
    params: &ParameterStore<F>,
    epsilon: F,
    tolerance: F,
) -> Result<GradCheckReport> {
    let (base_tape, base_loss) = loss_fn(params)?;
    base_tape.scalar_value(base_loss)?;
    let kink_flagged = base_tape.has_kink_within(epsilon + epsilon);

    let mut analytic = params.clone();
    base_tape.backward(base_loss, &mut analytic)?;

    let floor = F::fd_floor().to_f64_value();
    let tol = tolerance.to_f64_value();
    let mut work = params.clone();
    let mut checks = Vec::new();

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let numel = params.get(name).expect("listed name").numel();
        let role = params.role(name).expect("listed name");
        let grad: Vec<f64> = analytic
            .get(name)
            .expect("listed name")
            .grad()
            .expect("backward populated all grads")
            .iter()
            .map(|&g| g.to_f64_value())
            .collect();

        let mut max_rel_err = 0.0f64;
        let mut worst_index = 0usize;
        for i in 0..numel {
            let original = params.get(name).expect("listed name").values()[i];
            let hi = original + epsilon;
            let lo = original - epsilon;

            work.get_mut(name).expect("listed name").values_mut()[i] = hi;
            let (tape_hi, loss_hi) = loss_fn(&work)?;
            let f_hi = tape_hi.scalar_value(loss_hi)?.to_f64_value();

            work.get_mut(name).expect("listed name").values_mut()[i] = lo;
            let (tape_lo, loss_lo) = loss_fn(&work)?;
            let f_lo = tape_lo.scalar_value(loss_lo)?.to_f64_value();

            work.get_mut(name).expect("listed name").values_mut()[i] = original;

            // Use the realized step: `hi - lo` may differ from `2 eps` after
            // rounding to the working precision.
            let step = hi.to_f64_value() - lo.to_f64_value();
            let numeric = (f_hi - f_lo) / step;
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_index = i;
            }
        }

        checks.push(ParamCheck {
            name: name.clone(),
            role,
            max_rel_err,
            worst_index,
            reached: grad.iter().any(|&g| g != 0.0),
            passed: max_rel_err <= tol,
        });
    }

    Ok(GradCheckReport {
        params: checks,
        kink_flagged,
        epsilon: epsilon.to_f64_value(),
        tolerance: tol,
    })
}
