//! Dense f64 tensors and named parameter collections.
//!
//! Gradient checking needs 64-bit headroom, so the whole compute core runs
//! on f64. At desk scale (64x64 inputs, a few thousand parameters) this is
//! never the bottleneck.

use std::collections::BTreeMap;

use super::NetError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NetError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NetError::ShapeMismatch {
                context: "Tensor::from_vec".into(),
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat index for a rank-3 tensor laid out as [c, y, x].
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx3(c, y, x)]
    }

    #[inline]
    pub fn at3_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx3(c, y, x);
        &mut self.data[i]
    }

    /// Flat index for a rank-4 tensor laid out as [o, i, ky, kx].
    #[inline]
    pub fn idx4(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((o * self.shape[1] + i) * self.shape[2] + ky) * self.shape[3] + kx
    }

    #[inline]
    pub fn at4(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[self.idx4(o, i, ky, kx)]
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += other * s
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) -> Result<(), NetError> {
        if self.shape != other.shape {
            return Err(NetError::ShapeMismatch {
                context: "Tensor::add_scaled".into(),
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn assert_finite(&self, context: &str) -> Result<(), NetError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NetError::NonFinite(context.to_string()))
        }
    }
}

/// Named map of parameters. Gradient stores reuse the same structure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NetError> {
        self.params
            .get(name)
            .ok_or_else(|| NetError::ParamMismatch(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NetError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NetError::ParamMismatch(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Deterministic (name-sorted) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Accumulate a gradient contribution, creating the entry if absent.
    pub fn accumulate(&mut self, name: &str, tensor: &Tensor) -> Result<(), NetError> {
        match self.params.get_mut(name) {
            Some(existing) => existing.add_scaled(tensor, 1.0),
            None => {
                self.params.insert(name.to_string(), tensor.clone());
                Ok(())
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.params.values_mut() {
            t.scale(s);
        }
    }

    /// Verify the other set carries exactly the same names and shapes.
    pub fn check_same_structure(&self, other: &ParamSet) -> Result<(), NetError> {
        if self.params.len() != other.params.len() {
            return Err(NetError::ParamMismatch(format!(
                "parameter count differs: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, t) in &self.params {
            let o = other
                .params
                .get(name)
                .ok_or_else(|| NetError::ParamMismatch(format!("missing parameter `{name}`")))?;
            if t.shape() != o.shape() {
                return Err(NetError::ShapeMismatch {
                    context: format!("parameter `{name}`"),
                    expected: t.shape().to_vec(),
                    got: o.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn assert_finite(&self, context: &str) -> Result<(), NetError> {
        for (name, t) in &self.params {
            t.assert_finite(&format!("{context}:{name}"))?;
        }
        Ok(())
    }

    /// Largest elementwise |self - other| across all parameters.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64, NetError> {
        self.check_same_structure(other)?;
        let mut m: f64 = 0.0;
        for (name, t) in &self.params {
            let o = &other.params[name];
            for (a, b) in t.data().iter().zip(o.data()) {
                m = m.max((a - b).abs());
            }
        }
        Ok(m)
    }
}

/// Exponential-moving-average update: every teacher parameter becomes
/// `m * teacher + (1 - m) * student`.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, m: f64) -> Result<(), NetError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(NetError::ParamMismatch(format!(
            "EMA smoothing must lie in [0,1], got {m}"
        )));
    }
    teacher.check_same_structure(student)?;
    for (name, t) in teacher.params.iter_mut() {
        let s = &student.params[name];
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}
