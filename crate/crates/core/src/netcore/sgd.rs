//! Plain SGD with momentum.

use super::tensor::{ParamSet, Tensor};
use super::NetError;

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParamSet,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: ParamSet::new(),
        }
    }

    /// v = momentum * v + g;  p -= lr * v. Parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), NetError> {
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(NetError::ShapeMismatch {
                    context: format!("sgd step `{name}`"),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !self.velocity.contains(name) {
                self.velocity.insert(name, Tensor::zeros(g.shape()));
            }
            let v = self.velocity.get_mut(name)?;
            for ((vv, gv), pv) in v
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(p.data_mut().iter_mut())
            {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        params.assert_finite("sgd params")?;
        Ok(())
    }

    pub fn velocity(&self) -> &ParamSet {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: ParamSet) {
        self.velocity = velocity;
    }
}
