use super::{NnError, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }
}

/// One bias-corrected Adam step that descends `grads`.
///
/// Nothing is modified when the gradient has a non-finite entry.
pub fn adam_update(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState) -> Result<(), NnError> {
    params.check_same_shape(grads)?;
    params.check_same_shape(&state.m)?;
    if !grads.all_finite() {
        return Err(NnError::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `target <- mix * online + (1 - mix) * target`, elementwise.
pub fn soft_update(online: &ParamSet, target: &mut ParamSet, mix: f64) -> Result<(), NnError> {
    online.check_same_shape(target)?;
    for (t, o) in target.iter_mut().zip(online.iter()) {
        *t = mix * o + (1.0 - mix) * *t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{MlpSpec, OutputActivation};

    fn scalar_params(value: f64) -> ParamSet {
        // 1 -> 1 linear layer: weight w, bias b; bias pinned to 0.
        let spec = MlpSpec::new(vec![1, 1], OutputActivation::Linear).unwrap();
        let mut p = ParamSet::zeros(&spec);
        p.layers[0].weight[[0, 0]] = value;
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_params(0.7);
        let before = p.clone();
        let mut state = AdamState::new(&p, 1e-3);
        let zeros = p.zeros_like();
        adam_update(&mut p, &zeros, &mut state).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.3, -5.0, 1e4] {
            let mut p = scalar_params(1.0);
            let mut grads = p.zeros_like();
            grads.layers[0].weight[[0, 0]] = g;
            let mut state = AdamState::new(&p, 1e-3);
            adam_update(&mut p, &grads, &mut state).unwrap();
            let delta = p.layers[0].weight[[0, 0]] - 1.0;
            assert!((delta + 1e-3 * g.signum()).abs() < 1e-9, "delta {delta}");
        }
    }

    #[test]
    fn three_step_trace_matches_script() {
        // Scripted oracle: plain scalar Adam recurrences.
        let grads_seq = [0.5, -1.5, 2.0];
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let (mut theta, mut m, mut v) = (0.25_f64, 0.0_f64, 0.0_f64);
        for (t, g) in grads_seq.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            theta -= lr * mh / (vh.sqrt() + eps);
        }

        let mut p = scalar_params(0.25);
        let mut state = AdamState::new(&p, lr);
        for g in grads_seq {
            let mut grads = p.zeros_like();
            grads.layers[0].weight[[0, 0]] = g;
            adam_update(&mut p, &grads, &mut state).unwrap();
        }
        assert!((p.layers[0].weight[[0, 0]] - theta).abs() < 1e-15);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = scalar_params(1.0);
        let mut state = AdamState::new(&p, 1e-3);
        let mut grads = p.zeros_like();
        grads.layers[0].weight[[0, 0]] = f64::NAN;
        assert!(matches!(
            adam_update(&mut p, &grads, &mut state),
            Err(NnError::NonFiniteGradient)
        ));
        assert_eq!(state.step, 0);

        let other = MlpSpec::new(vec![2, 1], OutputActivation::Linear).unwrap();
        assert!(matches!(
            adam_update(&mut p, &ParamSet::zeros(&other), &mut state),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn soft_update_limits() {
        let online = scalar_params(1.0);
        let mut target = scalar_params(0.0);
        soft_update(&online, &mut target, 0.01).unwrap();
        assert!((target.layers[0].weight[[0, 0]] - 0.01).abs() < 1e-15);

        let mut target = scalar_params(-3.5);
        soft_update(&online, &mut target, 1.0).unwrap();
        assert_eq!(target, online);

        let mut target = scalar_params(-3.5);
        soft_update(&online, &mut target, 0.0).unwrap();
        assert_eq!(target, scalar_params(-3.5));
    }
}
