use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Element, Shape, Tape, Tensor, Var};

/// Position of a parameter in its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Learnable tensors keyed by hierarchical name, in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, value: Tensor<T>) -> ParamId {
        let (i, prev) = self.tensors.insert_full(name, value);
        assert!(prev.is_none(), "duplicate parameter name");
        ParamId(i)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of scalars whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .values()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Replaces the value of an existing parameter, checking its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {}, found {}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// Weight and bias of one convolution plus its geometry.
#[derive(Clone, Copy, Debug)]
pub struct ConvRef {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

impl ConvRef {
    /// Fan-in scaled uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn create<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geometry: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        Self::create_with_gain(store, name, in_ch, out_ch, kernel, geometry, 1.0, rng)
    }

    /// As [`ConvRef::create`] with the weight bound multiplied by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn create_with_gain<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geometry: ConvGeometry,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let shape = Shape::new(out_ch, in_ch, kernel, kernel);
        let data = (0..shape.len())
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::from_vec(shape, data).expect("extents >= 1"),
        );
        let bias = store.insert(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, out_ch, 1, 1)),
        );
        ConvRef {
            weight,
            bias,
            geometry,
        }
    }

    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, x: Var, bound: &[Var]) -> Result<Var> {
        tape.conv2d(x, bound[self.weight.0], Some(bound[self.bias.0]), self.geometry)
    }
}
