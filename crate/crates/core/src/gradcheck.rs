//! Central finite-difference validation of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so that vanishing gradients compare in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares tape gradients of the scalar `f` at `params` with central
/// differences on up to `per_param` randomly sampled coordinates per tensor.
pub fn grad_check<F>(f: F, params: &[Tensor], per_param: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf_ref(p, false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss in gradient check".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf_ref(p, true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::Numeric("non-finite loss in gradient check".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);
    fd_compare(eval, params, &analytic, per_param, seed)
}

/// Central differences of `eval` at `params` against `analytic` gradients,
/// on up to `per_param` sampled coordinates per tensor.
pub fn fd_compare<F>(eval: F, params: &[Tensor], analytic: &[Tensor], per_param: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!("{} parameters, {} gradients", params.len(), analytic.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in coords {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        coords_checked: checked,
    })
}
