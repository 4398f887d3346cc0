use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm bound applied to the gradients before the update.
    pub grad_clip: Option<f64>,
}

/// AdamW moments for a list of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn zeros<'a>(sizes: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1 when unclipped).
    pub clip_scale: f64,
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64, TrainError> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    Ok(norm)
}

/// One bias-corrected AdamW update with decoupled weight decay, applied to
/// parameters whose `decay` flag is set. A non-finite gradient aborts
/// before any state changes.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    decay: &[bool],
    state: &mut OptState,
    hyper: &AdamHyper,
) -> Result<StepInfo, TrainError> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(TrainError::Config(format!(
            "optimizer given {n} parameters, {} gradients, {} decay flags, {} moments",
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    for i in 0..n {
        let len = params[i].len();
        if grads[i].len() != len || state.m[i].len() != len || state.v[i].len() != len {
            return Err(TrainError::Config(format!("parameter {i} has mismatched gradient or moment length")));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    let clip_scale = match hyper.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..n {
        let p = &mut *params[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let g = grads[i][j] * clip_scale;
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g;
            if decay[i] {
                p[j] -= hyper.lr * hyper.weight_decay * p[j];
            }
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(StepInfo {
        grad_norm: norm,
        clip_scale,
    })
}
