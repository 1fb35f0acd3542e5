//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SacError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    /// Logical extents as written to weight files (rank 1 for biases).
    pub dims: Vec<usize>,
    pub tensor: Tensor<T>,
}

pub fn dims_to_shape(dims: &[usize]) -> Result<Shape> {
    match *dims {
        [a] => Ok([a, 1, 1, 1]),
        [a, b] => Ok([a, b, 1, 1]),
        [a, b, c] => Ok([a, b, c, 1]),
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(SacError::Invalid(format!("unsupported parameter rank {}", dims.len()))),
    }
}

/// Ordered, uniquely named parameters of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(SacError::Invalid(format!("duplicate parameter name {name}")));
        }
        let shape = dims_to_shape(&dims)?;
        if shape != tensor.shape() {
            return Err(SacError::shape(
                "param",
                format!("{name}: dims {dims:?} disagree with tensor shape {:?}", tensor.shape()),
            ));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, dims, tensor });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites every parameter of `self` whose name appears in `from`.
    ///
    /// Every parameter in `from` must exist here with identical dims.
    pub fn copy_from(&mut self, from: &ParamStore<T>) -> Result<usize> {
        for p in &from.params {
            let dst = self.by_name_mut(&p.name).ok_or_else(|| {
                SacError::Invalid(format!("parameter {} has no counterpart in the target model", p.name))
            })?;
            if dst.dims != p.dims {
                return Err(SacError::shape(
                    "copy_from",
                    format!("{}: source dims {:?}, target dims {:?}", p.name, p.dims, dst.dims),
                ));
            }
            dst.tensor = p.tensor.clone();
        }
        Ok(from.params.len())
    }

    /// Registers every parameter as a leaf on a fresh tape.
    pub fn bind(&self, track_grads: bool) -> Graph<T> {
        let mut tape = Tape::new();
        let vars = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.grad = None;
                if track_grads {
                    tape.leaf(t.with_grad())
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Graph { tape, vars }
    }

    /// Copies gradients from a graph built by [`ParamStore::bind`]; parameters
    /// the loss did not reach get zeros.
    pub fn absorb_grads(&mut self, graph: &Graph<T>) {
        for (p, &v) in self.params.iter_mut().zip(&graph.vars) {
            p.tensor.grad = Some(graph.tape.grad_tensor(v).into_data());
        }
    }
}

/// A tape with the model parameters pre-registered.
pub struct Graph<T: Real> {
    pub tape: Tape<T>,
    vars: Vec<Var>,
}

impl<T: Real> Graph<T> {
    #[inline]
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Allocates parameters under a dotted name prefix.
pub struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        };
        f(&mut inner)
    }

    pub fn param(&mut self, name: &str, dims: Vec<usize>, init: Init) -> Result<ParamId> {
        let shape = dims_to_shape(&dims)?;
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, T::lit(v)),
            Init::Normal(std) => Tensor::randn(shape, std, self.rng),
            Init::He { fan_in } => Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), self.rng),
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.insert(full, dims, tensor)
    }
}

/// Deterministic generator for a named purpose under a run seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
