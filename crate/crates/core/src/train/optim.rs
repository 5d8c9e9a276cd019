//! Gradient-descent steppers over whole models.

use crate::enhancer::{EnhancerModel, TensorViewMut};
use crate::error::{Error, Result};

fn view_iter_mut<'a>(v: TensorViewMut<'a>) -> Box<dyn Iterator<Item = &'a mut f64> + 'a> {
    match v {
        TensorViewMut::Mat(m) => Box::new(m.iter_mut()),
        TensorViewMut::Vec(x) => Box::new(x.iter_mut()),
        TensorViewMut::Scalar(s) => Box::new(std::iter::once(s)),
    }
}

/// Adam with bias correction over all trainable tensors plus, optionally,
/// the pruning threshold parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: EnhancerModel,
    v: EnhancerModel,
    m_rho: Vec<f64>,
    v_rho: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(template: &EnhancerModel, rho_len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: template.zeroed_like(),
            v: template.zeroed_like(),
            m_rho: vec![0.0; rho_len],
            v_rho: vec![0.0; rho_len],
            t: 0,
        }
    }

    /// One step; pass `rho` alongside its gradients to co-train thresholds.
    pub fn step(
        &mut self,
        model: &mut EnhancerModel,
        grads: &EnhancerModel,
        rho: Option<(&mut [f64], &[f64])>,
    ) -> Result<()> {
        if model.arch != self.m.arch || grads.arch != self.m.arch {
            return Err(Error::Train("optimizer built for a different architecture".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        for id in model.tensor_ids() {
            if !id.is_param() {
                continue;
            }
            let g = grads.tensor(id).expect("same architecture").to_flat();
            let mut mi = view_iter_mut(self.m.tensor_mut(id).expect("own id"));
            let mut vi = view_iter_mut(self.v.tensor_mut(id).expect("own id"));
            let mut pi = view_iter_mut(model.tensor_mut(id).expect("own id"));
            for gv in g {
                let (m, v, p) = (
                    mi.next().expect("aligned tensors"),
                    vi.next().expect("aligned tensors"),
                    pi.next().expect("aligned tensors"),
                );
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        if let Some((rho, g_rho)) = rho {
            if rho.len() != self.m_rho.len() || g_rho.len() != self.m_rho.len() {
                return Err(Error::Train("threshold slot count mismatch".into()));
            }
            for k in 0..rho.len() {
                let step = {
                    let (m, v) = (&mut self.m_rho[k], &mut self.v_rho[k]);
                    *m = b1 * *m + (1.0 - b1) * g_rho[k];
                    *v = b2 * *v + (1.0 - b2) * g_rho[k] * g_rho[k];
                    lr * (*m / bc1) / ((*v / bc2).sqrt() + eps)
                };
                rho[k] -= step;
            }
        }
        Ok(())
    }
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(
        &self,
        model: &mut EnhancerModel,
        grads: &EnhancerModel,
        rho: Option<(&mut [f64], &[f64])>,
    ) -> Result<()> {
        if model.arch != grads.arch {
            return Err(Error::Train("gradient/model architecture mismatch".into()));
        }
        for id in model.tensor_ids() {
            if !id.is_param() {
                continue;
            }
            let g = grads.tensor(id).expect("same architecture").to_flat();
            let mut pi = view_iter_mut(model.tensor_mut(id).expect("own id"));
            for gv in g {
                *pi.next().expect("aligned tensors") -= self.lr * gv;
            }
        }
        if let Some((rho, g_rho)) = rho {
            for (r, g) in rho.iter_mut().zip(g_rho) {
                *r -= self.lr * g;
            }
        }
        Ok(())
    }
}

/// Runtime-selected optimizer.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn adam(template: &EnhancerModel, rho_len: usize, lr: f64) -> Self {
        Optimizer::Adam(Adam::new(template, rho_len, lr))
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd(Sgd::new(lr))
    }

    pub fn step(
        &mut self,
        model: &mut EnhancerModel,
        grads: &EnhancerModel,
        rho: Option<(&mut [f64], &[f64])>,
    ) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(model, grads, rho),
            Optimizer::Sgd(s) => s.step(model, grads, rho),
        }
    }
}
