//! The micro-detector network: a stack of stride-2 convolutions with one
//! 1x1 prediction head per output scale.
//!
//! Trunk conv `i` halves the spatial size, so its activation sits at stride
//! `2^(i+1)`. Heads attach to the last `num_scales` trunk activations,
//! ordered finest (largest grid) first. The deepest trunk activation doubles
//! as the shared feature map consumed by the domain classifier.

use serde::{Deserialize, Serialize};

use super::layers::{ActRecord, Conv2d, ConvRecord, LeakyRelu};
use super::tensor::{ParamSet, Tensor};
use super::NetError;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Output channels of each stride-2 trunk convolution (input is RGB).
    pub trunk_channels: Vec<usize>,
    /// Number of prediction scales; heads attach to the deepest trunk
    /// activations, finest first.
    pub num_scales: usize,
    /// Anchor priors (w, h) in pixels, one list per scale.
    pub anchors: Vec<Vec<(f64, f64)>>,
}

impl ArchConfig {
    /// Desk-scale default: one 8x8 scale with three anchors on 64x64 input.
    pub fn default_desk() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            trunk_channels: vec![8, 16, 32],
            num_scales: 1,
            anchors: vec![vec![(12.0, 12.0), (20.0, 20.0), (30.0, 30.0)]],
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.trunk_channels.is_empty() {
            return Err(NetError::BadArch("trunk must have at least one conv".into()));
        }
        if self.num_scales == 0 || self.num_scales > self.trunk_channels.len() {
            return Err(NetError::BadArch(format!(
                "num_scales {} out of range 1..={}",
                self.num_scales,
                self.trunk_channels.len()
            )));
        }
        if self.anchors.len() != self.num_scales {
            return Err(NetError::BadArch(format!(
                "expected {} anchor lists, got {}",
                self.num_scales,
                self.anchors.len()
            )));
        }
        if self
            .anchors
            .iter()
            .any(|a| a.is_empty() || a.iter().any(|&(w, h)| w <= 0.0 || h <= 0.0))
        {
            return Err(NetError::BadArch(
                "every scale needs at least one positive anchor prior".into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(NetError::BadArch("num_classes must be positive".into()));
        }
        let deepest_stride = 1usize << self.trunk_channels.len();
        if self.image_size % deepest_stride != 0 || self.image_size / deepest_stride == 0 {
            return Err(NetError::BadArch(format!(
                "image_size {} must be a positive multiple of {deepest_stride}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Trunk index each scale taps, finest scale first.
    pub fn scale_taps(&self) -> Vec<usize> {
        let l = self.trunk_channels.len();
        (l - self.num_scales..l).collect()
    }

    pub fn scale_strides(&self) -> Vec<usize> {
        self.scale_taps().iter().map(|&i| 1usize << (i + 1)).collect()
    }

    pub fn grid_dims(&self) -> Vec<(usize, usize)> {
        self.scale_strides()
            .iter()
            .map(|&s| (self.image_size / s, self.image_size / s))
            .collect()
    }

    /// Channels per head output: anchors * (classes + 4 box + 1 objectness).
    pub fn head_channels(&self, scale: usize) -> usize {
        self.anchors[scale].len() * (self.num_classes + 5)
    }

    /// Channel count of the deepest trunk activation.
    pub fn deep_feature_channels(&self) -> usize {
        *self.trunk_channels.last().expect("validated trunk")
    }
}

#[derive(Debug)]
pub struct Network {
    pub arch: ArchConfig,
    trunk: Vec<Conv2d>,
    act: LeakyRelu,
    heads: Vec<Conv2d>,
}

/// Saved activations of one forward pass. Consumed by `backward`.
#[derive(Debug)]
pub struct ForwardRecord {
    conv_recs: Vec<ConvRecord>,
    act_recs: Vec<ActRecord>,
    head_recs: Vec<ConvRecord>,
    /// Post-activation trunk outputs, index-aligned with the trunk.
    features: Vec<Tensor>,
}

impl ForwardRecord {
    /// The deepest shared feature map (domain-classifier input).
    pub fn deep_feature(&self) -> &Tensor {
        self.features.last().expect("trunk is non-empty")
    }
}

impl Network {
    pub fn new(arch: ArchConfig) -> Result<Self, NetError> {
        arch.validate()?;
        let mut trunk = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in arch.trunk_channels.iter().enumerate() {
            trunk.push(Conv2d::new(format!("trunk{i}"), in_ch, out_ch, 3, 2, 1));
            in_ch = out_ch;
        }
        let heads = arch
            .scale_taps()
            .iter()
            .enumerate()
            .map(|(s, &tap)| {
                Conv2d::new(
                    format!("head{s}"),
                    arch.trunk_channels[tap],
                    arch.head_channels(s),
                    1,
                    1,
                    0,
                )
            })
            .collect();
        Ok(Self {
            arch,
            trunk,
            act: LeakyRelu::default(),
            heads,
        })
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        let mut r = rng::stream_rng(seed, 0x6d6f_64, &[]);
        for conv in &self.trunk {
            conv.init_params(&mut params, &mut r);
        }
        for head in &self.heads {
            head.init_params(&mut params, &mut r);
        }
        params
    }

    /// Run the trunk and heads. Returns one raw grid tensor per scale
    /// (finest first) plus the record needed for `backward`.
    pub fn forward(
        &self,
        params: &ParamSet,
        image: &Tensor,
    ) -> Result<(Vec<Tensor>, ForwardRecord), NetError> {
        if image.shape() != [3, self.arch.image_size, self.arch.image_size] {
            return Err(NetError::ShapeMismatch {
                context: "network input".into(),
                expected: vec![3, self.arch.image_size, self.arch.image_size],
                got: image.shape().to_vec(),
            });
        }
        let mut conv_recs = Vec::with_capacity(self.trunk.len());
        let mut act_recs = Vec::with_capacity(self.trunk.len());
        let mut features = Vec::with_capacity(self.trunk.len());
        let mut x = image.clone();
        for conv in &self.trunk {
            let (y, crec) = conv.forward(params, &x)?;
            let (a, arec) = self.act.forward(&y);
            a.assert_finite(&conv.name)?;
            conv_recs.push(crec);
            act_recs.push(arec);
            features.push(a.clone());
            x = a;
        }
        let taps = self.arch.scale_taps();
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut head_recs = Vec::with_capacity(self.heads.len());
        for (head, &tap) in self.heads.iter().zip(&taps) {
            let (out, hrec) = head.forward(params, &features[tap])?;
            out.assert_finite(&head.name)?;
            outputs.push(out);
            head_recs.push(hrec);
        }
        Ok((
            outputs,
            ForwardRecord {
                conv_recs,
                act_recs,
                head_recs,
                features,
            },
        ))
    }

    /// Backpropagate per-scale output gradients (and optionally an extra
    /// gradient arriving at the deepest feature map, e.g. from the domain
    /// classifier). Accumulates into `grads`, returns the input gradient.
    pub fn backward(
        &self,
        params: &ParamSet,
        record: ForwardRecord,
        scale_grads: &[Tensor],
        deep_feature_grad: Option<&Tensor>,
        grads: &mut ParamSet,
    ) -> Result<Tensor, NetError> {
        if scale_grads.len() != self.heads.len() {
            return Err(NetError::ShapeMismatch {
                context: "backward scale grads".into(),
                expected: vec![self.heads.len()],
                got: vec![scale_grads.len()],
            });
        }
        let ForwardRecord {
            conv_recs,
            act_recs,
            head_recs,
            features,
        } = record;

        let mut feature_grads: Vec<Tensor> =
            features.iter().map(|f| Tensor::zeros(f.shape())).collect();
        let taps = self.arch.scale_taps();
        for (((head, hrec), grad), &tap) in self
            .heads
            .iter()
            .zip(head_recs)
            .zip(scale_grads)
            .zip(&taps)
        {
            let gin = head.backward(params, hrec, grad, grads)?;
            feature_grads[tap].add_scaled(&gin, 1.0)?;
        }
        if let Some(extra) = deep_feature_grad {
            feature_grads
                .last_mut()
                .expect("trunk non-empty")
                .add_scaled(extra, 1.0)?;
        }

        let mut flowing: Option<Tensor> = None;
        for ((conv, crec), arec) in self
            .trunk
            .iter()
            .zip(conv_recs)
            .zip(act_recs)
            .rev()
            .map(|((c, cr), ar)| ((c, cr), ar))
        {
            let idx = conv.name["trunk".len()..]
                .parse::<usize>()
                .expect("trunk layer name");
            let mut g = feature_grads[idx].clone();
            if let Some(f) = flowing.take() {
                g.add_scaled(&f, 1.0)?;
            }
            let g_pre = self.act.backward(arec, &g)?;
            let gin = conv.backward(params, crec, &g_pre, grads)?;
            flowing = Some(gin);
        }
        let input_grad = flowing.expect("trunk non-empty");
        input_grad.assert_finite("network input grad")?;
        grads.assert_finite("network grads")?;
        Ok(input_grad)
    }
}

/// Gradient reversal: the forward pass is the identity.
pub fn grl_forward(x: &Tensor) -> Tensor {
    x.clone()
}

/// Gradient reversal backward: `-lambda * upstream`.
pub fn grl_backward(upstream: &Tensor, lambda: f64) -> Tensor {
    let mut out = upstream.clone();
    out.scale(-lambda);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            image_size: 16,
            num_classes: 2,
            trunk_channels: vec![4, 6],
            num_scales: 2,
            anchors: vec![vec![(4.0, 4.0)], vec![(8.0, 8.0), (10.0, 6.0)]],
        }
    }

    fn random_image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[3, size, size],
            (0..3 * size * size)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut a = tiny_arch();
        a.num_scales = 3;
        assert!(a.validate().is_err());
        let mut b = tiny_arch();
        b.image_size = 10;
        assert!(b.validate().is_err());
        let mut c = tiny_arch();
        c.anchors[0].clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_dims_follow_strides() {
        let arch = ArchConfig::default_desk();
        assert_eq!(arch.scale_strides(), vec![8]);
        assert_eq!(arch.grid_dims(), vec![(8, 8)]);
        let multi = tiny_arch();
        assert_eq!(multi.scale_strides(), vec![2, 4]);
        assert_eq!(multi.grid_dims(), vec![(8, 8), (4, 4)]);
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let net = Network::new(tiny_arch()).unwrap();
        let params = net.init_params(77);
        let image = random_image(16, 5);
        let (a, _) = net.forward(&params, &image).unwrap();
        let (b, _) = net.forward(&params, &image).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let net = Network::new(tiny_arch()).unwrap();
        let params = net.init_params(1);
        let image = random_image(32, 5);
        assert!(net.forward(&params, &image).is_err());
    }

    #[test]
    fn nonfinite_parameters_are_a_hard_error() {
        let net = Network::new(tiny_arch()).unwrap();
        let mut params = net.init_params(1);
        params.get_mut("trunk0.weight").unwrap().data_mut()[0] = f64::NAN;
        let image = random_image(16, 5);
        assert!(matches!(
            net.forward(&params, &image),
            Err(NetError::NonFinite(_))
        ));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let net = Network::new(tiny_arch()).unwrap();
        let params = net.init_params(21);
        let image = random_image(16, 6);

        // Scalar objective: fixed random projection of all outputs.
        let mut prj = ChaCha8Rng::seed_from_u64(40);
        let coeffs: Vec<Vec<f64>> = {
            let (outs, _) = net.forward(&params, &image).unwrap();
            outs.iter()
                .map(|o| (0..o.len()).map(|_| prj.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let loss = |p: &ParamSet| -> f64 {
            let (outs, _) = net.forward(p, &image).unwrap();
            outs.iter()
                .zip(&coeffs)
                .map(|(o, c)| o.data().iter().zip(c).map(|(v, k)| v * k).sum::<f64>())
                .sum()
        };

        let (outs, rec) = net.forward(&params, &image).unwrap();
        let scale_grads: Vec<Tensor> = outs
            .iter()
            .zip(&coeffs)
            .map(|(o, c)| Tensor::from_vec(o.shape(), c.clone()).unwrap())
            .collect();
        let mut grads = ParamSet::new();
        net.backward(&params, rec, &scale_grads, None, &mut grads)
            .unwrap();

        let h = 1e-5;
        let mut pick = ChaCha8Rng::seed_from_u64(41);
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in &names {
            let len = params.get(name).unwrap().len();
            for _ in 0..6.min(len) {
                let i = pick.random_range(0..len);
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.get(name).unwrap().data()[i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "{name}[{i}]: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn unused_head_gets_exactly_zero_gradient() {
        let net = Network::new(tiny_arch()).unwrap();
        let params = net.init_params(3);
        let image = random_image(16, 8);
        let (outs, rec) = net.forward(&params, &image).unwrap();
        let mut scale_grads: Vec<Tensor> = outs.iter().map(|o| Tensor::zeros(o.shape())).collect();
        scale_grads[0] = Tensor::from_vec(outs[0].shape(), vec![1.0; outs[0].len()]).unwrap();
        let mut grads = ParamSet::new();
        net.backward(&params, rec, &scale_grads, None, &mut grads)
            .unwrap();
        // Head 1 saw zero upstream: its gradients are exactly zero.
        assert!(grads
            .get("head1.weight")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn grl_is_identity_forward_and_scaled_negation_backward() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(grl_forward(&x), x);
        assert_eq!(grl_forward(&grl_forward(&x)), grl_forward(&x));
        let g = Tensor::from_vec(&[3], vec![2.0, -4.0, 1.0]).unwrap();
        let back = grl_backward(&g, 1.0);
        assert_eq!(back.data(), &[-2.0, 4.0, -1.0]);
        let scaled = grl_backward(&g, 0.1);
        for (s, v) in scaled.data().iter().zip(g.data()) {
            assert!((s + 0.1 * v).abs() < 1e-15);
        }
        // Linear in the upstream.
        let g2 = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let mut sum = g.clone();
        sum.add_scaled(&g2, 1.0).unwrap();
        let lhs = grl_backward(&sum, 0.7);
        let mut rhs = grl_backward(&g, 0.7);
        rhs.add_scaled(&grl_backward(&g2, 0.7), 1.0).unwrap();
        assert_eq!(lhs, rhs);
    }
}
