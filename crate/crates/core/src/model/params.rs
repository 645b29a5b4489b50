//! Parameter sets, their layout, initialization and the EMA teacher update.

use ndarray::ArrayView2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Everything that determines tensor names and shapes of one network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    /// Channel width of the full-resolution level; doubles per level.
    pub base_width: usize,
    /// Number of 2x downsamplings; the input must be divisible by `2^levels`.
    pub levels: usize,
    /// Output side of the per-slice adaptive average pooling.
    pub pool_size: usize,
    pub mlp_hidden: [usize; 2],
    /// Slice embedding width.
    pub d_h: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 8,
            levels: 3,
            pool_size: 128,
            mlp_hidden: [512, 256],
            d_h: 128,
        }
    }
}

impl ArchDescriptor {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn downsampling(&self) -> usize {
        1 << self.levels
    }

    /// Width of the encoder bottleneck rows (`D_e`).
    pub fn bottleneck_width(&self) -> usize {
        self.width(self.levels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.base_width == 0
            || self.pool_size == 0
            || self.d_h == 0
            || self.mlp_hidden.contains(&0)
        {
            return Err(Error::Config(format!("architecture has a zero-sized component: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    /// Rank-2 view; higher-rank shapes are viewed as `(shape[0], rest)`.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        let rows = self.shape[0];
        let cols = self.data.len() / rows.max(1);
        ArrayView2::from_shape((rows, cols), &self.data).expect("tensor shape")
    }
}

/// Index pair `(weight, bias)` into a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct LayerIdx {
    pub w: usize,
    pub b: usize,
}

/// Tensor positions of every layer for a given architecture.
#[derive(Debug, Clone)]
pub struct Layout {
    pub enc0: LayerIdx,
    pub down: Vec<LayerIdx>,
    pub enc: Vec<LayerIdx>,
    pub up: Vec<LayerIdx>,
    pub dec: Vec<LayerIdx>,
    pub prob: LayerIdx,
    pub sdm: LayerIdx,
    pub fc: [LayerIdx; 3],
    specs: Vec<(String, Vec<usize>, usize)>,
}

impl Layout {
    pub fn new(arch: &ArchDescriptor) -> Self {
        let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut push = |name: String, cout: usize, fan_in: usize, wshape: Vec<usize>| -> LayerIdx {
            let w = specs.len();
            specs.push((format!("{name}.weight"), wshape, fan_in));
            specs.push((format!("{name}.bias"), vec![cout], 0));
            LayerIdx { w, b: w + 1 }
        };
        let c0 = arch.width(0);
        let enc0 = push("enc0.conv".into(), c0, arch.in_channels * 27, vec![c0, arch.in_channels * 27]);
        let mut down = Vec::new();
        let mut enc = Vec::new();
        for l in 1..=arch.levels {
            let (ci, co) = (arch.width(l - 1), arch.width(l));
            down.push(push(format!("down{l}"), co, ci * 8, vec![co, ci * 8]));
            enc.push(push(format!("enc{l}.conv"), co, co * 27, vec![co, co * 27]));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..arch.levels).rev() {
            let (ci, co) = (arch.width(l + 1), arch.width(l));
            up.push(push(format!("up{l}"), co, ci, vec![co * 8, ci]));
            dec.push(push(format!("dec{l}.conv"), co, co * 27, vec![co, co * 27]));
        }
        let prob = push("head.prob".into(), 1, c0, vec![1, c0]);
        let sdm = push("head.sdm".into(), 1, c0, vec![1, c0]);
        let p2 = arch.pool_size * arch.pool_size;
        let [h1, h2] = arch.mlp_hidden;
        let fc = [
            push("proj.fc1".into(), h1, p2, vec![h1, p2]),
            push("proj.fc2".into(), h2, h1, vec![h2, h1]),
            push("proj.fc3".into(), arch.d_h, h2, vec![arch.d_h, h2]),
        ];
        Layout {
            enc0,
            down,
            enc,
            up,
            dec,
            prob,
            sdm,
            fc,
            specs,
        }
    }

    pub fn tensor_specs(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.specs.iter().map(|(n, s, _)| (n.as_str(), s.as_slice()))
    }
}

/// Named tensors of one network (backbone plus projection head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub arch: ArchDescriptor,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros(arch: &ArchDescriptor) -> Self {
        let layout = Layout::new(arch);
        let tensors = layout
            .specs
            .iter()
            .map(|(n, s, _)| Tensor::zeros(n.clone(), s.clone()))
            .collect();
        Self {
            arch: arch.clone(),
            tensors,
        }
    }

    /// He-normal weights (fan-in), zero biases. Output heads use unit gain.
    pub fn init(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(arch);
        let mut set = Self::zeros(arch);
        for (i, (name, _, fan_in)) in layout.specs.iter().enumerate() {
            if *fan_in == 0 {
                continue;
            }
            let gain = if name.starts_with("head.") { 1.0 } else { 2.0 };
            let std = (gain / *fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = rng_for(seed, &[stream::INIT, i as u64]);
            for v in set.tensors[i].data.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(set)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    /// Zeroed copy whose projection-head tensors are left empty; enough to
    /// accumulate backbone gradients without allocating the head.
    pub fn zeros_like_backbone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    if t.name.starts_with("proj.") {
                        Tensor {
                            name: t.name.clone(),
                            shape: t.shape.clone(),
                            data: Vec::new(),
                        }
                    } else {
                        Tensor::zeros(t.name.clone(), t.shape.clone())
                    }
                })
                .collect(),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Errors with the first tensor whose name or shape differs.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::ArchitectureMismatch(a.name.clone()));
            }
        }
        if self.tensors.len() != other.tensors.len() {
            let first_missing = self
                .tensors
                .get(other.tensors.len())
                .or_else(|| other.tensors.get(self.tensors.len()))
                .map(|t| t.name.clone())
                .unwrap_or_default();
            return Err(Error::ArchitectureMismatch(first_missing));
        }
        if self.arch != other.arch {
            return Err(Error::ArchitectureMismatch("<architecture descriptor>".into()));
        }
        Ok(())
    }

    /// `self += other`, tensor by tensor. Empty tensors in `other` are skipped.
    pub fn accumulate(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn add_to(&mut self, idx: usize, values: &[f64]) {
        for (x, y) in self.tensors[idx].data.iter_mut().zip(values) {
            *x += y;
        }
    }

    /// Order-sensitive 64-bit digest of every parameter bit pattern.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for t in &self.tensors {
            hasher.update(t.name.as_bytes());
            for v in &t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student`, entrywise.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, decay: f64) -> Result<ParamSet> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, decay)?;
    Ok(out)
}

pub fn ema_update_in_place(teacher: &mut ParamSet, student: &ParamSet, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("EMA decay must be in [0, 1], got {decay}")));
    }
    teacher.check_compatible(student)?;
    let keep = 1.0 - decay;
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = decay * *a + keep * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchDescriptor {
        ArchDescriptor {
            in_channels: 1,
            base_width: 2,
            levels: 1,
            pool_size: 4,
            mlp_hidden: [6, 5],
            d_h: 3,
        }
    }

    #[test]
    fn ema_fixed_points_and_value() {
        let s = ParamSet::init(&tiny(), 1).unwrap();
        let t = ParamSet::init(&tiny(), 2).unwrap();
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        let same = ema_update(&s, &s, 0.3).unwrap();
        for (a, b) in same.tensors.iter().zip(&s.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }

        let mut zero = s.zeros_like();
        let mut one = s.zeros_like();
        one.tensors[0].data.fill(1.0);
        zero.tensors[0].data.fill(0.0);
        let out = ema_update(&zero, &one, 0.999).unwrap();
        assert!((out.tensors[0].data[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_mismatch_naming_tensor() {
        let s = ParamSet::init(&tiny(), 1).unwrap();
        let other = ParamSet::init(&ArchDescriptor { base_width: 3, ..tiny() }, 1).unwrap();
        let err = ema_update(&s, &other, 0.9).unwrap_err();
        assert!(err.to_string().contains("enc0.conv.weight"), "{err}");
    }

    #[test]
    fn layout_names_are_unique() {
        let layout = Layout::new(&ArchDescriptor::default());
        let mut names: Vec<_> = layout.tensor_specs().map(|(n, _)| n.to_string()).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(before, names.len());
    }
}
