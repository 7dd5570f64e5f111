//! The autoencoder plugin: encoder and decoder over style space, the composite
//! loss and the training loop.

mod loss;
mod train;

use ndtensor::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use loss::{attribute_loss, attribute_loss_on_tape, attribute_term, lambda_schedule, AttributeLossMode};
pub use train::{image_loss, total_loss, total_loss_on_tape, train, Batch, EpochStats, TrainConfig, TrainReport};

use crate::envelope::Envelope;
use crate::nn::{stack_rows, Bound, Mlp, ParamSet};
use crate::{Error, Result};

pub const PLUGIN_MAGIC: &[u8; 4] = b"SAE1";
/// Hidden width of both halves, independent of the style dimension.
pub const HIDDEN_WIDTH: usize = 512;

/// Plugin latent: `K` attribute coordinates followed by `M` free ones.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetCode {
    pub c: Vec<f64>,
    pub s: Vec<f64>,
}

impl TargetCode {
    pub fn from_flat(flat: &[f64], attrs: usize) -> Result<Self> {
        if attrs > flat.len() {
            return Err(Error::ShapeMismatch {
                what: "target code",
                expected: vec![attrs],
                got: vec![flat.len()],
            });
        }
        Ok(Self {
            c: flat[..attrs].to_vec(),
            s: flat[attrs..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.c.clone();
        v.extend_from_slice(&self.s);
        v
    }

    pub fn dim(&self) -> usize {
        self.c.len() + self.s.len()
    }
}

/// Encoder and decoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Plugin {
    params: ParamSet,
    encoder: Mlp,
    decoder: Mlp,
    attrs: usize,
}

impl Plugin {
    /// Freshly initialized plugin for style dimension `dim` with `attrs`
    /// attribute coordinates.
    pub fn new(dim: usize, attrs: usize, seed: u64) -> Result<Self> {
        if dim == 0 || attrs == 0 || attrs > dim {
            return Err(Error::InvalidArgument(format!(
                "need 0 < K <= D, got D={dim}, K={attrs}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let widths = [dim, HIDDEN_WIDTH, HIDDEN_WIDTH, dim];
        let encoder = Mlp::new(&mut params, &mut rng, "enc", &widths);
        let decoder = Mlp::new(&mut params, &mut rng, "dec", &widths);
        Ok(Self {
            params,
            encoder,
            decoder,
            attrs,
        })
    }

    pub fn style_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn attrs(&self) -> usize {
        self.attrs
    }

    pub fn free_dims(&self) -> usize {
        self.style_dim() - self.attrs
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// `w: [batch, D] -> code: [batch, D]`.
    pub fn encode_on_tape(&self, tape: &mut Tape, bound: &Bound, w: Var) -> Result<Var> {
        self.encoder.forward(tape, bound, w)
    }

    /// `code: [batch, D] -> ŵ: [batch, D]`.
    pub fn decode_on_tape(&self, tape: &mut Tape, bound: &Bound, code: Var) -> Result<Var> {
        self.decoder.forward(tape, bound, code)
    }

    fn check_dim(&self, what: &'static str, got: usize) -> Result<()> {
        if got != self.style_dim() {
            return Err(Error::ShapeMismatch {
                what,
                expected: vec![self.style_dim()],
                got: vec![got],
            });
        }
        Ok(())
    }

    fn run(&self, rows: &[&[f64]], decode: bool) -> Result<Vec<Vec<f64>>> {
        let what = if decode { "target code" } else { "style vector" };
        for r in rows {
            self.check_dim(what, r.len())?;
        }
        let mut tape = Tape::no_grad();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(stack_rows(rows)?);
        let y = if decode {
            self.decode_on_tape(&mut tape, &bound, x)?
        } else {
            self.encode_on_tape(&mut tape, &bound, x)?
        };
        let d = self.style_dim();
        Ok(tape.value(y).data().chunks(d).map(<[f64]>::to_vec).collect())
    }

    pub fn encode(&self, w: &[f64]) -> Result<TargetCode> {
        let flat = self.encode_batch(&[w])?.pop().expect("one row");
        TargetCode::from_flat(&flat, self.attrs)
    }

    pub fn decode(&self, code: &TargetCode) -> Result<Vec<f64>> {
        if code.c.len() != self.attrs || code.dim() != self.style_dim() {
            return Err(Error::ShapeMismatch {
                what: "target code (K, M)",
                expected: vec![self.attrs, self.free_dims()],
                got: vec![code.c.len(), code.s.len()],
            });
        }
        Ok(self.decode_batch(&[&code.to_flat()])?.pop().expect("one row"))
    }

    /// Flat codes for a batch of style vectors.
    pub fn encode_batch(&self, ws: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.run(ws, false)
    }

    /// Style vectors for a batch of flat codes.
    pub fn decode_batch(&self, codes: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.run(codes, true)
    }

    /// `decode(encode(w))` for each row.
    pub fn round_trip_batch(&self, ws: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let codes = self.encode_batch(ws)?;
        let refs: Vec<&[f64]> = codes.iter().map(Vec::as_slice).collect();
        self.decode_batch(&refs)
    }

    pub fn to_envelope(&self, trailer: serde_json::Value) -> Envelope {
        Envelope {
            magic: *PLUGIN_MAGIC,
            style_dim: self.style_dim() as u32,
            attrs: self.attrs as u32,
            free_dims: self.free_dims() as u32,
            widths: self.encoder.widths().iter().map(|&w| w as u32).collect(),
            arrays: self.params.to_arrays(),
            trailer,
        }
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        if &env.magic != PLUGIN_MAGIC {
            return Err(Error::Format("not a plugin checkpoint".into()));
        }
        let dim = env.style_dim as usize;
        let attrs = env.attrs as usize;
        if attrs + env.free_dims as usize != dim {
            return Err(Error::Format(format!(
                "K + M = {} + {} does not equal D = {dim}",
                attrs, env.free_dims
            )));
        }
        let expected = [dim, HIDDEN_WIDTH, HIDDEN_WIDTH, dim];
        if env.widths.iter().map(|&w| w as usize).ne(expected) {
            return Err(Error::Format(format!(
                "unexpected layer widths {:?}",
                env.widths
            )));
        }
        let mut plugin = Self::new(dim, attrs, 0)?;
        plugin.params.load_arrays(env.arrays.clone())?;
        Ok(plugin)
    }
}
