use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, mut t: Tensor) -> usize {
        t.requires_grad = true;
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    /// Registers every tensor as a constant (evaluation without gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t)).collect()
    }

    /// Copies gradients for `vars` (as returned by [`bind`](Self::bind)) into the tensors.
    pub fn absorb(&mut self, grads: &Gradients, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            t.grad = Some(grads.get_or_zero(v, t.len()));
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Flat copy of all parameter values, in order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.grad.clone().unwrap_or_else(|| vec![0.0; t.len()])).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::dim("set_flat_values", "length mismatch"));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Dense layer indices into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
}

/// Tanh MLP whose final layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Adds layers `sizes[0] → sizes[1] → …` to `params`, Xavier-normal
    /// initialized; the final layer is zeroed when `zero_head` is set.
    pub fn build(params: &mut ParamSet, prefix: &str, sizes: &[usize], zero_head: bool, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(sizes.len().saturating_sub(1));
        for (k, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let last = k + 2 == sizes.len();
            let w = if last && zero_head { Tensor::zeros(&[fan_in, fan_out]) } else { xavier(fan_in, fan_out, rng) };
            let weight = params.push(format!("{prefix}.{k}.weight"), w);
            let bias = params.push(format!("{prefix}.{k}.bias"), Tensor::zeros(&[1, fan_out]));
            layers.push(Dense { weight, bias });
        }
        Mlp { layers }
    }

    /// Row-wise forward pass for `x[n × in]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, vars[layer.weight])?;
            h = tape.add_row(z, vars[layer.bias])?;
            if k + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn head(&self) -> Dense {
        *self.layers.last().expect("mlp has at least one layer")
    }
}

pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(data, vec![fan_in, fan_out])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_with_zero_head_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let mlp = Mlp::build(&mut p, "net", &[4, 8, 3], true, &mut rng);
        assert_eq!(p.len(), 4);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(&Tensor::filled(&[2, 4], 0.3));
        let y = mlp.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::scalar(1.0));
        let c1 = p.checksum();
        p.tensors_mut()[0].data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(c1, p.checksum());
    }
}
