use super::tape::ParamSet;
use super::tensor::{Float, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(params: &ParamSet<F>, lr: f64) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![F::zero(); t.data.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &[Tensor<F>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step = F::of(self.lr * c2.sqrt() / c1);
        let eps = F::of(self.eps * c2.sqrt());
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone)]
pub struct Ema<F> {
    pub decay: f64,
    pub shadow: ParamSet<F>,
}

impl<F: Float> Ema<F> {
    pub fn new(params: &ParamSet<F>, decay: f64) -> Self {
        Ema {
            decay,
            shadow: params.clone(),
        }
    }

    pub fn update(&mut self, params: &ParamSet<F>) {
        let d = F::of(self.decay);
        for (s, p) in self.shadow.tensors.iter_mut().zip(&params.tensors) {
            for (sv, &pv) in s.data.iter_mut().zip(&p.data) {
                *sv = d * *sv + (F::one() - d) * pv;
            }
        }
    }
}
