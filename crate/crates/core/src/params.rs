//! Named parameter storage and the small layer building blocks shared by
//! every network component.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, name-addressable parameter arrays.
///
/// Values are kept representable in `f32` so that checkpoints (which store
/// 32-bit floats) round-trip exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        value.round_to_f32();
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// 2-D convolution layer, weight `[cout, cin/groups, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Same-size convolution with bias.
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride: 1,
            pad: k / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(channels: usize, k: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(channels, channels, k)
        }
    }

    /// Stride-2, kernel-4 halving convolution.
    pub fn down(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            k: 4,
            stride: 2,
            pad: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.k * self.k
            + if self.bias { self.cout } else { 0 }
    }
}

impl Conv {
    /// Uniform fan-in initialization, bound `1/sqrt(fan_in)`.
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let cin_g = spec.cin / spec.groups;
        let bound = 1.0 / ((cin_g * spec.k * spec.k) as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            uniform(rng, &[spec.cout, cin_g, spec.k, spec.k], bound),
        );
        let bias = spec
            .bias
            .then(|| store.insert(format!("{name}.bias"), uniform(rng, &[spec.cout], bound)));
        Self {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.pad,
            groups: spec.groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }

    /// Zeroes weight and bias, e.g. to make a residual branch start as identity.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Transposed convolution with `kernel == stride == 2`, weight `[cin, cout, 2, 2]`.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((cout * 4) as f64).sqrt();
        Self {
            weight: store.insert(
                format!("{name}.weight"),
                uniform(rng, &[cin, cout, 2, 2], bound),
            ),
            bias: store.insert(format!("{name}.bias"), uniform(rng, &[cout], bound)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, Some(b))
    }
}

pub(crate) fn constant_param(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    value: f64,
) -> ParamId {
    store.insert(name, Tensor::full(shape.to_vec(), value))
}

pub(crate) fn uniform_param(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    store.insert(name, uniform(rng, shape, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv3x3_param_count() {
        let spec = ConvSpec::same(3, 8, 3);
        assert_eq!(spec.param_count(), 224);
        let mut store = ParamStore::new();
        Conv::new(&mut store, "c", spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.numel(), 224);
    }

    #[test]
    fn values_are_f32_representable() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(0.1));
        let v = store.get(id).data()[0];
        assert_eq!(v, v as f32 as f64);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.0));
        store.insert("p", Tensor::scalar(1.0));
    }
}
