//! Adam with bias correction. One implementation shared by the scene
//! optimizer (per-parameter-group learning rates) and the denoiser trainer
//! (one flat parameter vector).

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Adam {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates plus the step counter. One slot per scalar
/// parameter; the caller owns the parameter-to-slot mapping.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Bias-correction denominators for the *current* step. Call
/// [`AdamState::step`]-increment first via [`begin_step`].
#[derive(Clone, Copy)]
pub struct BiasCorrection {
    bc1: f64,
    bc2: f64,
}

impl Adam {
    /// Advances the shared step counter and returns this step's bias
    /// corrections. Call once per optimization step, before any `delta`.
    pub fn begin_step(&self, state: &mut AdamState) -> BiasCorrection {
        state.step += 1;
        let t = state.step as i32;
        BiasCorrection {
            bc1: 1.0 - powi(self.beta1, t),
            bc2: 1.0 - powi(self.beta2, t),
        }
    }

    /// Updates moments for slot `i` and returns the amount to subtract from
    /// the parameter. A zero gradient on fresh state returns exactly 0.0,
    /// which callers use to keep untouched parameters bit-identical.
    #[inline]
    pub fn delta(&self, state: &mut AdamState, i: usize, grad: f64, lr: f64, bc: BiasCorrection) -> f64 {
        let m = self.beta1 * state.m[i] + (1.0 - self.beta1) * grad;
        let v = self.beta2 * state.v[i] + (1.0 - self.beta2) * grad * grad;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bc.bc1;
        let v_hat = v / bc.bc2;
        lr * m_hat / (crate::fmath::sqrt(v_hat) + self.eps)
    }

    /// Flat update: params[i] -= delta(grads[i]). Panics on length mismatch;
    /// flat callers size everything from one source of truth.
    pub fn step_vec(&self, state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), state.len());
        let bc = self.begin_step(state);
        for i in 0..params.len() {
            params[i] -= self.delta(state, i, grads[i], lr, bc);
        }
    }
}

fn powi(base: f64, exp: i32) -> f64 {
    // Exponents here are step counts; plain repeated squaring keeps this
    // exact enough and avoids pulling powf into the hot path.
    let mut result = 1.0;
    let mut b = base;
    let mut e = exp as u64;
    while e > 0 {
        if e & 1 == 1 {
            result *= b;
        }
        b *= b;
        e >>= 1;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_descent_converges() {
        let adam = Adam::default();
        let mut state = AdamState::new(1);
        let mut x = 1.0f64;
        let mut first_hit = None;
        for step in 1..=500 {
            let g = 2.0 * x;
            let bc = adam.begin_step(&mut state);
            x -= adam.delta(&mut state, 0, g, 0.1, bc);
            if first_hit.is_none() && x.abs() < 1e-3 {
                first_hit = Some(step);
            }
        }
        assert!(x.abs() < 1e-3, "final x = {x}");
        assert!(first_hit.unwrap() <= 500);
    }

    #[test]
    fn zero_gradient_on_fresh_state_is_exact_noop() {
        let adam = Adam::default();
        let mut state = AdamState::new(3);
        let bc = adam.begin_step(&mut state);
        for i in 0..3 {
            assert_eq!(adam.delta(&mut state, i, 0.0, 0.05, bc), 0.0);
        }
    }

    #[test]
    fn moments_persist_across_steps() {
        let adam = Adam::default();
        let mut state = AdamState::new(1);
        let bc = adam.begin_step(&mut state);
        adam.delta(&mut state, 0, 1.0, 0.1, bc);
        // After one unit gradient, a zero gradient still moves the parameter
        // because the first moment has momentum.
        let bc = adam.begin_step(&mut state);
        let d = adam.delta(&mut state, 0, 0.0, 0.1, bc);
        assert!(d != 0.0);
    }

    #[test]
    fn powi_matches_naive() {
        for e in 1..40 {
            let mut want = 1.0;
            for _ in 0..e {
                want *= 0.9;
            }
            assert!((powi(0.9, e) - want).abs() < 1e-15);
        }
    }
}
