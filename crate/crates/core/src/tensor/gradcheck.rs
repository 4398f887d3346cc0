//! Central-difference gradient checking.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

/// Coordinates beyond which [`grad_check`] samples instead of sweeping.
const SWEEP_CUTOFF: usize = 2048;

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
}

/// Checks the tape gradient of scalar `f` at `x` against central differences
/// with step `h`, returning the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let sample = (x.numel() > SWEEP_CUTOFF).then_some((SWEEP_CUTOFF, 0));
    let report = grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        h,
        sample,
    )?;
    Ok(report.max_rel_error)
}

fn eval<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok(v[0])
}

/// Multi-input variant. With `sample = Some((n, seed))` only `n` coordinates,
/// drawn uniformly over all inputs, are perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64, sample: Option<(usize, u64)>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Contract(format!("step must be positive, got {h}")));
    }
    let inputs: Vec<Tensor> = xs.iter().map(|x| x.clone().with_grad(true)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).to_vec();
    if f0.len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    if eval(&f, &inputs)?.to_bits() != f0[0].to_bits() {
        return Err(TensorError::Contract("function is not deterministic".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, x| {
            let o = *acc;
            *acc += x.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let coords: Vec<usize> = match sample {
        Some((n, seed)) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, total, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: coords.len(),
        worst: None,
    };
    let mut work = inputs.clone();
    for flat in coords {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[which];
        let orig = work[which].data()[j];
        work[which].data_mut()[j] = orig + h;
        let plus = eval(&f, &work)?;
        work[which].data_mut()[j] = orig - h;
        let minus = eval(&f, &work)?;
        work[which].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[which][j], numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((which, j));
        }
    }
    Ok(report)
}
