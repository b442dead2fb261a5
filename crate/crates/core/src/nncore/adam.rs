use super::{Grads, NnError, ParamId, ParamStore, Scalar};

/// Adam optimiser state with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = |_| Vec::new();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
        }
    }
}

/// One Adam update of every parameter that has a gradient and passes `trainable`.
///
/// The whole step is rejected, with no parameter touched, if any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
    trainable: impl Fn(ParamId) -> bool,
) -> Result<(), NnError> {
    if !(state.lr > 0.0) {
        return Err(NnError::Invalid(format!("learning rate must be positive, got {}", state.lr)));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NnError::Invalid("gradient/optimiser state not aligned with parameters".into()));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.len() != params.get(id).len() {
                return Err(NnError::Shape {
                    node: None,
                    op: "adam_step",
                    detail: format!("gradient for {} has {} values", params.name(id), g.len()),
                });
            }
            if trainable(id) && g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { param: params.name(id).to_string() });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
    let step_size = T::from_f64(state.lr / bc1);
    let (sqrt_bc2, eps) = (T::from_f64(bc2.sqrt()), T::from_f64(state.eps));
    for id in params.ids() {
        let Some(g) = grads.get(id) else { continue };
        if !trainable(id) {
            continue;
        }
        let n = g.len();
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        if m.is_empty() {
            m.resize(n, T::zero());
            v.resize(n, T::zero());
        }
        let p = params.get_mut(id).data_mut();
        for i in 0..n {
            m[i] = tb1 * m[i] + (T::one() - tb1) * g[i];
            v[i] = tb2 * v[i] + (T::one() - tb2) * g[i] * g[i];
            p[i] = p[i] - step_size * m[i] / (v[i].sqrt() / sqrt_bc2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Tensor;

    fn store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("g", "w", Tensor::full(vec![3], v));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store(1.0);
        let mut st = AdamState::new(&s, 2e-4);
        let mut g = Grads::new(1);
        g.accumulate(id, &[0.37, -5.0, 1e-3]);
        adam_step(&mut s, &g, &mut st, |_| true).unwrap();
        let d = s.get(id).data();
        assert!((d[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((d[1] - (1.0 + 2e-4)).abs() < 1e-9);
        // eps matters only when |g| is comparable to it
        assert!((d[2] - (1.0 - 2e-4)).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_keeps_params() {
        let (mut s, id) = store(0.25);
        let mut st = AdamState::new(&s, 1e-3);
        let mut g = Grads::new(1);
        g.accumulate(id, &[0.0; 3]);
        for _ in 0..3 {
            adam_step(&mut s, &g, &mut st, |_| true).unwrap();
        }
        assert_eq!(s.get(id).data(), &[0.25; 3]);
    }

    #[test]
    fn constant_grad_moves_monotonically() {
        let (mut s, id) = store(0.0);
        let mut st = AdamState::new(&s, 0.1);
        let mut g = Grads::new(1);
        g.accumulate(id, &[2.0, -2.0, 2.0]);
        adam_step(&mut s, &g, &mut st, |_| true).unwrap();
        let after1 = s.get(id).data().to_vec();
        adam_step(&mut s, &g, &mut st, |_| true).unwrap();
        let after2 = s.get(id).data().to_vec();
        // direct recurrence: m̂ = g, v̂ = g² on both steps, so each step is −lr·sign(g)
        assert!((after1[0] + 0.1).abs() < 1e-7 && (after2[0] + 0.2).abs() < 1e-7);
        assert!(after2[1] > after1[1] && after1[1] > 0.0);
    }

    #[test]
    fn non_finite_grad_rejected_untouched() {
        let (mut s, id) = store(1.0);
        let mut st = AdamState::new(&s, 1e-3);
        let mut g = Grads::new(1);
        g.accumulate(id, &[1.0, f64::NAN, 0.0]);
        let err = adam_step(&mut s, &g, &mut st, |_| true).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { ref param } if param == "w"));
        assert_eq!(s.get(id).data(), &[1.0; 3]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_params_untouched() {
        let (mut s, id) = store(1.0);
        let mut st = AdamState::new(&s, 1e-3);
        let mut g = Grads::new(1);
        g.accumulate(id, &[1.0; 3]);
        adam_step(&mut s, &g, &mut st, |_| false).unwrap();
        assert_eq!(s.get(id).data(), &[1.0; 3]);
    }
}
