//! Named parameter collections.
//!
//! Models register their tensors in a [`ParamSet`] at construction time and
//! keep [`ParamHandle`]s to address them. One `bind` call per forward pass
//! copies every parameter onto the tape; `pull_grads` copies tape gradients
//! back after `backward`. The optimizer and checkpoint code walk the set
//! uniformly without knowing any model structure.

use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};

/// Index of a tensor inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamHandle(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    /// Registers a trainable tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamHandle {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamHandle(self.tensors.len() - 1)
    }

    /// Uniform init in [-bound, bound].
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut Rng,
    ) -> ParamHandle {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.range(-bound, bound))).collect();
        self.add(name, Tensor::new(shape, data))
    }

    /// Uniform init with the bound sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut Rng,
    ) -> ParamHandle {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, vec![rows, cols], bound, rng)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamHandle {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamHandle {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![T::one(); n]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, h: ParamHandle) -> &str {
        &self.names[h.0]
    }

    pub fn tensor(&self, h: ParamHandle) -> &Tensor<T> {
        &self.tensors[h.0]
    }

    pub fn tensor_mut(&mut self, h: ParamHandle) -> &mut Tensor<T> {
        &mut self.tensors[h.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamHandle> {
        self.names.iter().position(|n| n == name).map(ParamHandle)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter_mut())
    }

    /// Total scalar count across all tensors.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copies every parameter onto the tape; index with a [`ParamHandle`].
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t)).collect() }
    }

    /// Accumulates tape gradients back into each parameter's grad buffer.
    pub fn pull_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (tensor, &var) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(var) {
                tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Flattens all parameter values in registration order (gradient-check
    /// probing works on this vector).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&mut self, flat: &[T]) {
        debug_assert_eq!(flat.len(), self.num_values());
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Gradients flattened in registration order (zeros where unset).
    pub fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in &self.tensors {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(T::zero()).take(t.len())),
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Tape vars for one `bind` call, indexed by [`ParamHandle`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, h: ParamHandle) -> Var {
        self.vars[h.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_pull_roundtrip() {
        let mut rng = Rng::new(1);
        let mut set = ParamSet::<f64>::new();
        let w = set.add_xavier("w", 2, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape);
        let wv = bound.var(w);
        let loss = tape.sum(wv);
        tape.backward(loss).unwrap();
        set.pull_grads(&tape, &bound);
        assert_eq!(set.tensor(w).grad().unwrap(), &[1.0; 4]);
        set.zero_grads();
        assert_eq!(set.tensor(w).grad().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn flatten_unflatten_identity() {
        let mut rng = Rng::new(2);
        let mut set = ParamSet::<f64>::new();
        set.add_xavier("a", 2, 3, &mut rng);
        set.add_zeros("b", vec![1, 4]);
        let flat = set.flatten();
        assert_eq!(flat.len(), 10);
        let mut set2 = set.clone();
        set2.unflatten(&flat);
        assert_eq!(set2.flatten(), flat);
    }
}
