//! Ordered, named parameter store shared by the network, the optimizer and
//! the checkpoint format.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor5};

/// Index of one parameter array in a [`ParamLayout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamShape {
    Tensor([usize; 5]),
    Vector(usize),
}

impl ParamShape {
    pub fn scalar_count(&self) -> usize {
        match self {
            ParamShape::Tensor(s) => s.iter().product(),
            ParamShape::Vector(n) => *n,
        }
    }
}

/// How a parameter array is filled at build time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with variance `2 / fan_in`.
    HeNormal {
        fan_in: usize,
    },
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: ParamShape,
    /// Running statistics are stored and serialized but never optimized.
    pub learnable: bool,
    pub init: Init,
}

/// Ordered list of parameter arrays; the order is the registration order and
/// defines both RNG consumption at init and blob order in checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    by_name: HashMap<String, usize>,
}

impl ParamLayout {
    pub fn push(
        &mut self,
        name: String,
        shape: ParamShape,
        learnable: bool,
        init: Init,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.specs.len());
        self.by_name.insert(name.clone(), id.0);
        self.specs.push(ParamSpec {
            name,
            shape,
            learnable,
            init,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.specs.iter().map(|s| s.shape.scalar_count()).sum()
    }

    pub fn learnable_scalars(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.learnable)
            .map(|s| s.shape.scalar_count())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue<T> {
    Tensor(Tensor5<T>),
    Vector(Vec<T>),
}

impl<T: Scalar> ParamValue<T> {
    pub fn zeros(shape: &ParamShape) -> Self {
        match shape {
            ParamShape::Tensor(s) => ParamValue::Tensor(Tensor5::zeros(*s)),
            ParamShape::Vector(n) => ParamValue::Vector(vec![T::ZERO; *n]),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        match self {
            ParamValue::Tensor(t) => t.data(),
            ParamValue::Vector(v) => v,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        match self {
            ParamValue::Tensor(t) => t.data_mut(),
            ParamValue::Vector(v) => v,
        }
    }

    pub fn len(&self) -> usize {
        self.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.as_slice().is_empty()
    }
}

/// Values for every parameter in a layout.
#[derive(Clone, Debug)]
pub struct Parameters<T> {
    layout: Arc<ParamLayout>,
    values: Vec<ParamValue<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Allocates and initializes values for `layout`, consuming the RNG in
    /// registration order. Two calls with equal seeds produce bitwise-equal
    /// parameters.
    pub fn init(layout: Arc<ParamLayout>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = layout
            .specs()
            .iter()
            .map(|spec| {
                let mut value = ParamValue::zeros(&spec.shape);
                match spec.init {
                    Init::HeNormal { fan_in } => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        for v in value.as_mut_slice() {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *v = T::from_f64(z * std);
                        }
                    }
                    Init::Zeros => {}
                    Init::Ones => value.as_mut_slice().fill(T::ONE),
                    Init::Const(c) => value.as_mut_slice().fill(T::from_f64(c)),
                }
                value
            })
            .collect();
        Parameters { layout, values }
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = layout
            .specs()
            .iter()
            .map(|s| ParamValue::zeros(&s.shape))
            .collect();
        Parameters { layout, values }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor5<T> {
        match &self.values[id.0] {
            ParamValue::Tensor(t) => t,
            ParamValue::Vector(_) => panic!("parameter {} is a vector", self.layout.spec(id).name),
        }
    }

    pub fn vector(&self, id: ParamId) -> &[T] {
        match &self.values[id.0] {
            ParamValue::Vector(v) => v,
            ParamValue::Tensor(_) => panic!("parameter {} is a tensor", self.layout.spec(id).name),
        }
    }

    pub fn vector_mut(&mut self, id: ParamId) -> &mut [T] {
        let name = self.layout.spec(id).name.clone();
        match &mut self.values[id.0] {
            ParamValue::Vector(v) => v,
            ParamValue::Tensor(_) => panic!("parameter {name} is a tensor"),
        }
    }

    pub fn value(&self, id: ParamId) -> &ParamValue<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ParamValue<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[ParamValue<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ParamValue<T>] {
        &mut self.values
    }

    pub fn set_value(&mut self, id: ParamId, value: ParamValue<T>) {
        assert_eq!(value.len(), self.values[id.0].len());
        self.values[id.0] = value;
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let values = self
            .values
            .iter()
            .map(|v| match v {
                ParamValue::Tensor(t) => ParamValue::Tensor(t.cast()),
                ParamValue::Vector(v) => {
                    ParamValue::Vector(v.iter().map(|x| U::from_f64(x.to_f64())).collect())
                }
            })
            .collect();
        Parameters {
            layout: self.layout.clone(),
            values,
        }
    }
}

/// Gradient accumulator aligned with a [`ParamLayout`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    values: Vec<ParamValue<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Gradients {
            values: layout
                .specs()
                .iter()
                .map(|s| ParamValue::zeros(&s.shape))
                .collect(),
        }
    }

    pub fn add_tensor(&mut self, id: ParamId, grad: &Tensor5<T>) {
        let slot = self.values[id.0].as_mut_slice();
        for (s, g) in slot.iter_mut().zip(grad.data()) {
            *s += *g;
        }
    }

    pub fn add_vector(&mut self, id: ParamId, grad: &[T]) {
        let slot = self.values[id.0].as_mut_slice();
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += *g;
        }
    }

    pub fn value(&self, id: ParamId) -> &ParamValue<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ParamValue<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[ParamValue<T>] {
        &self.values
    }
}
