use std::collections::BTreeMap;
use std::fmt;

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Layer kinds that own parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// `w: (out, in, k, k)`, `b: (out)`
    Conv,
    /// `w: (in, out, k, k)`, `b: (out)`
    Deconv,
    /// `slope: (channels)`; `in_ch == out_ch`
    Prelu,
    /// `w: (out, in)`, `b: (out)`
    Dense,
    /// `w_ih: (4 out, in)`, `w_hh: (4 out, out)`, `b: (4 out)`; `out` is the hidden width
    Lstm,
}

impl LayerKind {
    pub fn tag(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Deconv => "deconv",
            LayerKind::Prelu => "prelu",
            LayerKind::Dense => "dense",
            LayerKind::Lstm => "lstm",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "conv" => LayerKind::Conv,
            "deconv" => LayerKind::Deconv,
            "prelu" => LayerKind::Prelu,
            "dense" => LayerKind::Dense,
            "lstm" => LayerKind::Lstm,
            _ => return None,
        })
    }
}

/// One parameterized layer of an architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl LayerSpec {
    pub fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            in_ch,
            out_ch,
            kernel,
            stride,
            dilation,
        }
    }

    pub fn deconv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Deconv,
            ..Self::conv(name, in_ch, out_ch, kernel, stride, 1)
        }
    }

    pub fn prelu(name: &str, channels: usize) -> Self {
        Self {
            kind: LayerKind::Prelu,
            ..Self::conv(name, channels, channels, 1, 1, 1)
        }
    }

    pub fn dense(name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            ..Self::conv(name, in_ch, out_ch, 1, 1, 1)
        }
    }

    pub fn lstm(name: &str, in_ch: usize, hidden: usize) -> Self {
        Self {
            kind: LayerKind::Lstm,
            ..Self::conv(name, in_ch, hidden, 1, 1, 1)
        }
    }

    /// Names and shapes of the tensors this layer owns.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let n = |suffix: &str| format!("{}.{suffix}", self.name);
        let (i, o, k) = (self.in_ch, self.out_ch, self.kernel);
        match self.kind {
            LayerKind::Conv => vec![(n("w"), vec![o, i, k, k]), (n("b"), vec![o])],
            LayerKind::Deconv => vec![(n("w"), vec![i, o, k, k]), (n("b"), vec![o])],
            LayerKind::Prelu => vec![(n("slope"), vec![o])],
            LayerKind::Dense => vec![(n("w"), vec![o, i]), (n("b"), vec![o])],
            LayerKind::Lstm => vec![
                (n("w_ih"), vec![4 * o, i]),
                (n("w_hh"), vec![4 * o, o]),
                (n("b"), vec![4 * o]),
            ],
        }
    }
}

/// Architecture family plus its parameterized layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub family: String,
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(LayerSpec::param_shapes).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({} parameters)", self.family, self.param_count())?;
        for l in &self.layers {
            writeln!(
                f,
                "  {:<10} {:<6} in={:<3} out={:<3} k={} s={} d={}",
                l.name,
                l.kind.tag(),
                l.in_ch,
                l.out_ch,
                l.kernel,
                l.stride,
                l.dilation
            )?;
        }
        Ok(())
    }
}

/// Named parameter tensors of one network together with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    entries: BTreeMap<String, Tensor<T>>,
    arch: ArchDescriptor,
}

impl<T: Float> NetworkParams<T> {
    /// Validates that `entries` holds exactly the tensors `arch` describes.
    pub fn new(arch: ArchDescriptor, entries: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if shapes.len() != entries.len() {
            return Err(TensorError::InvalidArgument {
                op: "network_params",
                reason: format!("arch describes {} tensors, got {}", shapes.len(), entries.len()),
            });
        }
        for (name, shape) in &shapes {
            let t = entries.get(name).ok_or_else(|| TensorError::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err("network_params", format!("{name} {shape:?}"), t.shape()));
            }
        }
        Ok(Self { entries, arch })
    }

    /// Zero tensors for every parameter of `arch`.
    pub fn zeros(arch: ArchDescriptor) -> Self {
        let entries = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape).with_grad(true)))
            .collect();
        Self { entries, arch }
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| TensorError::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingParameter(name.to_string()))
    }

    /// Replaces one tensor, keeping its shape contract.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(shape_err("network_params", format!("{name} {:?}", slot.shape()), value.shape()));
        }
        let rg = slot.requires_grad;
        *slot = value;
        slot.requires_grad = rg;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in self.entries.values_mut() {
            t.requires_grad = on;
        }
    }

    pub fn cast<U: Float>(&self) -> NetworkParams<U> {
        NetworkParams {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            arch: self.arch.clone(),
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore<T>(BTreeMap<String, Tensor<T>>);

impl<T: Float> GradStore<T> {
    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.0.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Global L2 norm over all gradients.
    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n.is_finite() {
            let f = T::from_f64(max_norm / n);
            for t in self.0.values_mut() {
                for v in t.data_mut() {
                    *v *= f;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ArchDescriptor {
        ArchDescriptor {
            family: "toy".into(),
            layers: vec![LayerSpec::conv("c", 2, 3, 3, 1, 1), LayerSpec::prelu("a", 3), LayerSpec::lstm("l", 3, 4)],
        }
    }

    #[test]
    fn param_count_follows_arch() {
        let a = arch();
        let expected = (3 * 2 * 9 + 3) + 3 + (16 * 3 + 16 * 4 + 16);
        assert_eq!(a.param_count(), expected);
        assert_eq!(NetworkParams::<f32>::zeros(a).param_count(), expected);
    }

    #[test]
    fn new_rejects_missing_and_misshapen() {
        let a = arch();
        let mut entries: BTreeMap<String, Tensor<f32>> =
            a.param_shapes().into_iter().map(|(n, s)| (n, Tensor::zeros(s))).collect();
        assert!(NetworkParams::new(a.clone(), entries.clone()).is_ok());
        entries.insert("c.b".into(), Tensor::zeros(vec![4]));
        assert!(matches!(NetworkParams::new(a.clone(), entries.clone()), Err(TensorError::ShapeMismatch { .. })));
        entries.remove("c.b");
        assert!(NetworkParams::new(a, entries).is_err());
    }
}
