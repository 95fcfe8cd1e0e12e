//! Central finite-difference verification of tape gradients.
//!
//! Runs in `f64` only; single-precision differences drown in rounding noise
//! long before they reach useful tolerances.

use super::{Tape, Tx};
use ndarray::ArrayD;

/// Relative error is only meaningful when the compared pair is not itself
/// vanishing; below this magnitude only the absolute error is recorded.
const REL_DENOM_FLOOR: f64 = 1e-6;

/// Worst-case errors between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `(input index, flat element index, analytic, numeric)` at the worst
    /// relative error, for diagnostics.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradReport {
    pub fn within(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_err <= rel_tol && self.max_abs_err <= abs_tol
    }
}

/// Compares the tape's gradients of a scalar-valued function against central
/// finite differences with step `eps * max(1, |x|)` per element.
///
/// `build` must construct the same computation each call; every entry of
/// `inputs` becomes a differentiable leaf, in order.
pub fn check<F>(build: F, inputs: &[ArrayD<f64>], eps: f64) -> GradReport
where
    F: Fn(&Tape<f64>, &[Tx]) -> Tx,
{
    let eval = |vals: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::<f64>::new();
        let leaves: Vec<Tx> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&tape, &leaves);
        assert_eq!(
            tape.shape(root).iter().product::<usize>().max(1),
            1,
            "gradient check target must be scalar"
        );
        tape.scalar(root)
    };

    let analytic: Vec<ArrayD<f64>> = {
        let tape = Tape::<f64>::new();
        let leaves: Vec<Tx> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&tape, &leaves);
        let grads = tape.backward(root);
        leaves
            .iter()
            .zip(inputs)
            .map(|(&l, v)| {
                grads
                    .get(l)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(v.raw_dim()))
            })
            .collect()
    };

    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let ana = analytic[i]
            .as_slice()
            .expect("analytic gradient standard layout")
            .to_vec();
        for j in 0..inputs[i].len() {
            let x0 = work[i].as_slice().unwrap()[j];
            let h = eps * x0.abs().max(1.0);
            work[i].as_slice_mut().unwrap()[j] = x0 + h;
            let fp = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = x0 - h;
            let fm = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = x0;
            let num = (fp - fm) / (2.0 * h);
            let abs = (ana[j] - num).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            let denom = ana[j].abs().max(num.abs());
            if denom > REL_DENOM_FLOOR {
                let rel = abs / denom;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some((i, j, ana[j], num));
                }
            }
            report.checked += 1;
        }
    }
    report
}
