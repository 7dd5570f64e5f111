//! Parameter storage and the fully connected building blocks shared by the
//! plugin and the probe.

use ndtensor::{init, AdamConfig, AdamState, Gradients, Tape, Tensor, Var};
use rand::Rng;

use crate::envelope::hash_arrays;
use crate::{Error, Result};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Named trainable tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every tensor on the tape as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Put every tensor on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    pub fn to_arrays(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data().to_vec()).collect()
    }

    /// Replace the values from flat arrays, keeping shapes.
    pub fn load_arrays(&mut self, arrays: Vec<Vec<f64>>) -> Result<()> {
        if arrays.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} weight arrays, found {}",
                self.tensors.len(),
                arrays.len()
            )));
        }
        for (t, a) in self.tensors.iter_mut().zip(arrays) {
            if a.len() != t.numel() {
                return Err(Error::Format(format!(
                    "weight array length {} does not match shape {:?}",
                    a.len(),
                    t.shape()
                )));
            }
            *t = Tensor::new(t.shape(), a)?;
        }
        Ok(())
    }

    /// SHA-256 over all weights.
    pub fn content_hash(&self) -> String {
        hash_arrays(self.tensors.iter().map(Tensor::data))
    }
}

/// Tape handles of a bound [`ParamSet`], same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// One Adam state per parameter tensor.
#[derive(Clone, Debug)]
pub struct Optimizer {
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            states: params
                .tensors
                .iter()
                .map(|t| AdamState::new(t.numel(), config))
                .collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        for s in &mut self.states {
            s.config.lr = lr;
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        for ((t, state), var) in params.tensors.iter_mut().zip(&mut self.states).zip(bound.vars()) {
            let g = grads
                .take(*var)
                .ok_or_else(|| Error::InvalidArgument("parameter was not bound as a tracked leaf".into()))?;
            state.step(t.data_mut(), &g)?;
        }
        Ok(())
    }
}

/// Fully connected layer `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            init::fan_in_uniform(rng, &[fan_in, fan_out], fan_in),
        );
        let bias = params.push(
            format!("{name}.bias"),
            init::fan_in_uniform(rng, &[fan_out], fan_in),
        );
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `x: [batch, fan_in] -> [batch, fan_out]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.weight))?;
        Ok(tape.add(h, bound.var(self.bias))?)
    }
}

/// Stack of linear layers with a PReLU (one learnable slope each) after
/// every layer but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    slopes: Vec<ParamId>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, rng: &mut R, name: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut layers = Vec::new();
        let mut slopes = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Linear::new(params, rng, &format!("{name}.{i}"), pair[0], pair[1]));
            if i + 2 < widths.len() {
                slopes.push(params.push(format!("{name}.{i}.prelu"), Tensor::scalar(PRELU_INIT)));
            }
        }
        Self { layers, slopes }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim()];
        w.extend(self.layers.iter().map(|l| l.fan_out));
        w
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if let Some(slope) = self.slopes.get(i) {
                h = tape.prelu(h, bound.var(*slope))?;
            }
        }
        Ok(h)
    }
}

/// Stack row vectors into a `[n, d]` tensor.
pub fn stack_rows(rows: &[&[f64]]) -> Result<Tensor> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.is_empty() || d == 0 {
        return Err(Error::InvalidArgument("cannot stack an empty batch".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::ShapeMismatch {
                what: "batch row",
                expected: vec![d],
                got: vec![r.len()],
            });
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::matrix(rows.len(), d, data)?)
}
