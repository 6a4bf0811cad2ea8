use super::{Grads, Network, Params, Scalar};
use crate::error::{Error, Result};

/// Bias-corrected ADAM.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar = f32> {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Params<S>>,
    v: Vec<Params<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(net: &Network<S>) -> Self {
        Self::with_lr(net, 0.001)
    }

    pub fn with_lr(net: &Network<S>, lr: f64) -> Self {
        Self {
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: net.zero_grads(),
            v: net.zero_grads(),
        }
    }

    pub(super) fn check(&self, net: &Network<S>) -> Result<()> {
        let ok = self.m.len() == net.params.len()
            && self
                .m
                .iter()
                .zip(&net.params)
                .all(|(a, b)| a.w.len() == b.w.len() && a.b.len() == b.b.len());
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("optimizer state does not match network".into()))
        }
    }

    pub fn step(&mut self, net: &mut Network<S>, grads: &Grads<S>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (sb1, sb2) = (S::of(b1), S::of(b2));
        let (ob1, ob2) = (S::of(1.0 - b1), S::of(1.0 - b2));
        let (ic1, ic2) = (S::of(1.0 / c1), S::of(1.0 / c2));
        let (lr, eps) = (S::of(self.lr), S::of(self.eps));
        for (((p, g), m), v) in net.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pairs = [(&mut p.w, &g.w, &mut m.w, &mut v.w), (&mut p.b, &g.b, &mut m.b, &mut v.b)];
            for (p, g, m, v) in pairs {
                for i in 0..p.len() {
                    m[i] = sb1 * m[i] + ob1 * g[i];
                    v[i] = sb2 * v[i] + ob2 * g[i] * g[i];
                    let mhat = m[i] * ic1;
                    let vhat = v[i] * ic2;
                    p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}
