//! Differentiable layers. Each forward returns a record holding whatever the
//! backward pass needs; backward consumes the record by value, so running it
//! twice on one forward is a compile-time error.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{ParamSet, Tensor};
use super::NetError;

/// 2-D convolution over [C, H, W] tensors. Parameters live in a `ParamSet`
/// under `<name>.weight` ([out, in, k, k]) and `<name>.bias` ([out]).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
pub struct ConvRecord {
    input: Tensor,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            ksize,
            stride,
            pad,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-style uniform init scaled by fan-in; biases start at zero.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let fan_in = (self.in_ch * self.ksize * self.ksize) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let len = self.out_ch * self.in_ch * self.ksize * self.ksize;
        let data: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        params.insert(
            self.weight_name(),
            Tensor::from_vec(&[self.out_ch, self.in_ch, self.ksize, self.ksize], data)
                .expect("init shape"),
        );
        params.insert(self.bias_name(), Tensor::zeros(&[self.out_ch]));
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.ksize) / self.stride + 1,
            (w + 2 * self.pad - self.ksize) / self.stride + 1,
        )
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize), NetError> {
        let s = input.shape();
        if s.len() != 3 || s[0] != self.in_ch || s[1] < self.ksize.saturating_sub(self.pad) {
            return Err(NetError::ShapeMismatch {
                context: format!("conv `{}` input", self.name),
                expected: vec![self.in_ch],
                got: s.to_vec(),
            });
        }
        Ok((s[1], s[2]))
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        input: &Tensor,
    ) -> Result<(Tensor, ConvRecord), NetError> {
        let (h, w) = self.check_input(input)?;
        let weight = params.get(&self.weight_name())?;
        let bias = params.get(&self.bias_name())?;
        let (oh, ow) = self.out_dims(h, w);
        let mut out = Tensor::zeros(&[self.out_ch, oh, ow]);

        for o in 0..self.out_ch {
            let b = bias.data()[o];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for i in 0..self.in_ch {
                        for ky in 0..self.ksize {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..self.ksize {
                                let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                acc += weight.at4(o, i, ky, kx)
                                    * input.at3(i, y as usize, x as usize);
                            }
                        }
                    }
                    *out.at3_mut(o, oy, ox) = acc;
                }
            }
        }
        Ok((
            out,
            ConvRecord {
                input: input.clone(),
            },
        ))
    }

    /// Accumulates weight and bias gradients into `grads` and returns the
    /// gradient with respect to the layer input.
    pub fn backward(
        &self,
        params: &ParamSet,
        record: ConvRecord,
        grad_out: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor, NetError> {
        let input = record.input;
        let (h, w) = self.check_input(&input)?;
        let (oh, ow) = self.out_dims(h, w);
        if grad_out.shape() != [self.out_ch, oh, ow] {
            return Err(NetError::ShapeMismatch {
                context: format!("conv `{}` grad_out", self.name),
                expected: vec![self.out_ch, oh, ow],
                got: grad_out.shape().to_vec(),
            });
        }
        let weight = params.get(&self.weight_name())?;
        let mut grad_w = Tensor::zeros(&[self.out_ch, self.in_ch, self.ksize, self.ksize]);
        let mut grad_b = Tensor::zeros(&[self.out_ch]);
        let mut grad_in = Tensor::zeros(&[self.in_ch, h, w]);

        for o in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.at3(o, oy, ox);
                    if g == 0.0 {
                        continue;
                    }
                    grad_b.data_mut()[o] += g;
                    for i in 0..self.in_ch {
                        for ky in 0..self.ksize {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..self.ksize {
                                let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                let wi = grad_w.idx4(o, i, ky, kx);
                                grad_w.data_mut()[wi] +=
                                    g * input.at3(i, y as usize, x as usize);
                                *grad_in.at3_mut(i, y as usize, x as usize) +=
                                    g * weight.at4(o, i, ky, kx);
                            }
                        }
                    }
                }
            }
        }
        grads.accumulate(&self.weight_name(), &grad_w)?;
        grads.accumulate(&self.bias_name(), &grad_b)?;
        Ok(grad_in)
    }
}

/// Fully connected layer over flat vectors: y = Wx + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug)]
pub struct LinearRecord {
    input: Tensor,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / self.in_dim as f64).sqrt();
        let data: Vec<f64> = (0..self.in_dim * self.out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.insert(
            self.weight_name(),
            Tensor::from_vec(&[self.out_dim, self.in_dim], data).expect("init shape"),
        );
        params.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        input: &Tensor,
    ) -> Result<(Tensor, LinearRecord), NetError> {
        if input.shape() != [self.in_dim] {
            return Err(NetError::ShapeMismatch {
                context: format!("linear `{}` input", self.name),
                expected: vec![self.in_dim],
                got: input.shape().to_vec(),
            });
        }
        let weight = params.get(&self.weight_name())?;
        let bias = params.get(&self.bias_name())?;
        let mut out = Tensor::zeros(&[self.out_dim]);
        for o in 0..self.out_dim {
            let mut acc = bias.data()[o];
            for i in 0..self.in_dim {
                acc += weight.data()[o * self.in_dim + i] * input.data()[i];
            }
            out.data_mut()[o] = acc;
        }
        Ok((
            out,
            LinearRecord {
                input: input.clone(),
            },
        ))
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        record: LinearRecord,
        grad_out: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor, NetError> {
        if grad_out.shape() != [self.out_dim] {
            return Err(NetError::ShapeMismatch {
                context: format!("linear `{}` grad_out", self.name),
                expected: vec![self.out_dim],
                got: grad_out.shape().to_vec(),
            });
        }
        let weight = params.get(&self.weight_name())?;
        let input = record.input;
        let mut grad_w = Tensor::zeros(&[self.out_dim, self.in_dim]);
        let mut grad_in = Tensor::zeros(&[self.in_dim]);
        for o in 0..self.out_dim {
            let g = grad_out.data()[o];
            for i in 0..self.in_dim {
                grad_w.data_mut()[o * self.in_dim + i] = g * input.data()[i];
                grad_in.data_mut()[i] += g * weight.data()[o * self.in_dim + i];
            }
        }
        grads.accumulate(&self.weight_name(), &grad_w)?;
        // dL/db is the upstream gradient unchanged.
        grads.accumulate(&self.bias_name(), grad_out)?;
        Ok(grad_in)
    }
}

/// Leaky ReLU with the YOLO-family slope of 0.1.
#[derive(Debug, Clone, Copy)]
pub struct LeakyRelu {
    pub slope: f64,
}

#[derive(Debug)]
pub struct ActRecord {
    input: Tensor,
}

impl Default for LeakyRelu {
    fn default() -> Self {
        Self { slope: 0.1 }
    }
}

impl LeakyRelu {
    pub fn forward(&self, input: &Tensor) -> (Tensor, ActRecord) {
        let mut out = input.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= self.slope;
            }
        }
        (
            out,
            ActRecord {
                input: input.clone(),
            },
        )
    }

    pub fn backward(&self, record: ActRecord, grad_out: &Tensor) -> Result<Tensor, NetError> {
        if record.input.shape() != grad_out.shape() {
            return Err(NetError::ShapeMismatch {
                context: "leaky_relu grad_out".into(),
                expected: record.input.shape().to_vec(),
                got: grad_out.shape().to_vec(),
            });
        }
        let mut grad_in = grad_out.clone();
        for (g, x) in grad_in.data_mut().iter_mut().zip(record.input.data()) {
            if *x < 0.0 {
                *g *= self.slope;
            }
        }
        Ok(grad_in)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn zero_parameters_give_zero_output() {
        let conv = Conv2d::new("c", 2, 3, 3, 1, 1);
        let mut params = ParamSet::new();
        params.insert(conv.weight_name(), Tensor::zeros(&[3, 2, 3, 3]));
        params.insert(conv.bias_name(), Tensor::zeros(&[3]));
        let input = Tensor::from_vec(&[2, 4, 4], (0..32).map(|i| i as f64).collect()).unwrap();
        let (out, _) = conv.forward(&params, &input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_one_by_one_conv_passes_input_through() {
        let conv = Conv2d::new("c", 2, 2, 1, 1, 0);
        let mut params = ParamSet::new();
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        let i0 = w.idx4(0, 0, 0, 0);
        w.data_mut()[i0] = 1.0;
        let i1 = w.idx4(1, 1, 0, 0);
        w.data_mut()[i1] = 1.0;
        params.insert(conv.weight_name(), w);
        params.insert(conv.bias_name(), Tensor::zeros(&[2]));
        let input =
            Tensor::from_vec(&[2, 3, 3], (0..18).map(|i| i as f64 - 5.0).collect()).unwrap();
        let (out, _) = conv.forward(&params, &input).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn linear_bias_gradient_is_upstream() {
        let lin = Linear::new("l", 3, 2);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        lin.init_params(&mut params, &mut rng);
        let input = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let (_, rec) = lin.forward(&params, &input).unwrap();
        let upstream = Tensor::from_vec(&[2], vec![0.7, -0.4]).unwrap();
        let mut grads = ParamSet::new();
        lin.backward(&params, rec, &upstream, &mut grads).unwrap();
        assert_eq!(grads.get("l.bias").unwrap(), &upstream);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let conv = Conv2d::new("c", 3, 4, 3, 2, 1);
        let run = || {
            let mut params = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            conv.init_params(&mut params, &mut rng);
            let mut in_rng = ChaCha8Rng::seed_from_u64(10);
            let input = Tensor::from_vec(
                &[3, 8, 8],
                (0..192).map(|_| in_rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            conv.forward(&params, &input).unwrap().0
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_yields_exactly_zero_gradients() {
        let conv = Conv2d::new("c", 2, 2, 3, 1, 1);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        conv.init_params(&mut params, &mut rng);
        let input = Tensor::from_vec(&[2, 4, 4], vec![0.5; 32]).unwrap();
        let (out, rec) = conv.forward(&params, &input).unwrap();
        let zeros = Tensor::zeros(out.shape());
        let mut grads = ParamSet::new();
        let grad_in = conv.backward(&params, rec, &zeros, &mut grads).unwrap();
        assert!(grad_in.data().iter().all(|&v| v == 0.0));
        assert!(grads.get("c.weight").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get("c.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
