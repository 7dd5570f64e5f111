//! Frozen attribute classifier whose penultimate layer doubles as an image
//! embedding.

use ndtensor::{AdamConfig, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envelope::{Envelope, Record};
use crate::image::ImageGrid;
use crate::nn::{stack_rows, Bound, Linear, Optimizer, ParamId, ParamSet, PRELU_INIT};
use crate::syngen::Generator;
use crate::{Error, Result};

pub const PROBE_MAGIC: &[u8; 4] = b"PRB1";
pub const EMBED_DIM: usize = 64;
/// Held-out accuracy every head must reach.
pub const ACCURACY_FLOOR: f64 = 0.95;

const KERNEL: usize = 5;
const STRIDE: usize = 2;
const PAD: usize = 2;
const CHANNELS: [usize; 2] = [8, 16];

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    slope: ParamId,
}

/// Two strided 5×5 convolutions, a 64-wide hidden layer and one sigmoid head
/// per attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    params: ParamSet,
    convs: [Conv; 2],
    hidden: Linear,
    hidden_slope: ParamId,
    head: Linear,
    height: usize,
    width: usize,
    attrs: usize,
    frozen_hash: Option<String>,
}

/// Raw network outputs for a batch.
pub struct ProbeOutputs {
    pub logits: Var,
    pub embedding: Var,
}

impl Probe {
    pub fn new(height: usize, width: usize, attrs: usize, seed: u64) -> Result<Self> {
        if !height.is_multiple_of(4) || !width.is_multiple_of(4) || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "probe input must be a positive multiple of 4 on each side, got {height}x{width}"
            )));
        }
        if attrs == 0 {
            return Err(Error::InvalidArgument("probe needs at least one head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut in_ch = 1;
        let mut convs = Vec::new();
        for (i, &out_ch) in CHANNELS.iter().enumerate() {
            let fan_in = KERNEL * KERNEL * in_ch;
            let layer = Linear::new(&mut params, &mut rng, &format!("conv{i}"), fan_in, out_ch);
            let slope = params.push(format!("conv{i}.prelu"), Tensor::scalar(PRELU_INIT));
            convs.push(Conv {
                weight: layer.weight,
                bias: layer.bias,
                slope,
            });
            in_ch = out_ch;
        }
        let flat = (height / 4) * (width / 4) * CHANNELS[1];
        let hidden = Linear::new(&mut params, &mut rng, "fc0", flat, EMBED_DIM);
        let hidden_slope = params.push("fc0.prelu", Tensor::scalar(PRELU_INIT));
        let head = Linear::new(&mut params, &mut rng, "fc1", EMBED_DIM, attrs);
        Ok(Self {
            params,
            convs: [convs[0], convs[1]],
            hidden,
            hidden_slope,
            head,
            height,
            width,
            attrs,
            frozen_hash: None,
        })
    }

    pub fn attrs(&self) -> usize {
        self.attrs
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (1, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Hash recorded when the probe was frozen.
    pub fn frozen_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    pub fn freeze(&mut self) {
        self.frozen_hash = Some(self.content_hash());
    }

    /// Fails unless the weights still match the hash taken at freeze time.
    pub fn verify(&self) -> Result<()> {
        let found = self.content_hash();
        match &self.frozen_hash {
            Some(expected) if *expected == found => Ok(()),
            Some(expected) => Err(Error::StaleProbe {
                expected: expected.clone(),
                found,
            }),
            None => Err(Error::StaleProbe {
                expected: "<never frozen>".into(),
                found,
            }),
        }
    }

    /// `images: [batch, H*W]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<ProbeOutputs> {
        let batch = tape.shape(images)[0];
        let mut h = tape.reshape(images, &[batch, self.height, self.width, 1])?;
        let (mut height, mut width) = (self.height, self.width);
        for (conv, &out_ch) in self.convs.iter().zip(&CHANNELS) {
            let cols = tape.im2col(h, KERNEL, STRIDE, PAD)?;
            let y = tape.matmul(cols, bound.var(conv.weight))?;
            let y = tape.add(y, bound.var(conv.bias))?;
            let y = tape.prelu(y, bound.var(conv.slope))?;
            height /= STRIDE;
            width /= STRIDE;
            h = tape.reshape(y, &[batch, height, width, out_ch])?;
        }
        let flat = tape.reshape(h, &[batch, height * width * CHANNELS[1]])?;
        let hidden = self.hidden.forward(tape, bound, flat)?;
        let embedding = tape.prelu(hidden, bound.var(self.hidden_slope))?;
        let logits = self.head.forward(tape, bound, embedding)?;
        Ok(ProbeOutputs { logits, embedding })
    }

    fn check_rows(&self, images: &Tensor) -> Result<()> {
        match images.shape() {
            [_, p] if *p == self.pixels() => Ok(()),
            other => Err(Error::ShapeMismatch {
                what: "probe input",
                expected: vec![self.pixels()],
                got: other.to_vec(),
            }),
        }
    }

    fn run(&self, images: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_rows(images)?;
        let mut tape = Tape::no_grad();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward_on_tape(&mut tape, &bound, x)?;
        let probs = tape.sigmoid(out.logits);
        let conf = tape.value(probs).data().chunks(self.attrs).map(<[f64]>::to_vec).collect();
        let emb = tape
            .value(out.embedding)
            .data()
            .chunks(EMBED_DIM)
            .map(<[f64]>::to_vec)
            .collect();
        Ok((conf, emb))
    }

    /// Per-attribute confidences for each row of `images: [batch, H*W]`.
    pub fn classify_rows(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(images)?.0)
    }

    /// Embeddings for each row of `images: [batch, H*W]`.
    pub fn embed_rows(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(images)?.1)
    }

    fn single(&self, image: &ImageGrid) -> Result<Tensor> {
        if image.dims() != self.image_dims() {
            let (c, h, w) = image.dims();
            return Err(Error::ShapeMismatch {
                what: "probe input image",
                expected: vec![1, self.height, self.width],
                got: vec![c, h, w],
            });
        }
        Ok(Tensor::matrix(1, self.pixels(), image.data().to_vec())?)
    }

    pub fn classify(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        Ok(self.classify_rows(&self.single(image)?)?.remove(0))
    }

    pub fn embed(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        Ok(self.embed_rows(&self.single(image)?)?.remove(0))
    }

    pub fn to_envelope(&self, trailer: serde_json::Value) -> Envelope {
        let mut trailer = trailer;
        if let (Some(map), Some(hash)) = (trailer.as_object_mut(), &self.frozen_hash) {
            map.insert("frozen_hash".into(), hash.clone().into());
        }
        Envelope {
            magic: *PROBE_MAGIC,
            style_dim: 0,
            attrs: self.attrs as u32,
            free_dims: 0,
            widths: vec![
                self.height as u32,
                self.width as u32,
                CHANNELS[0] as u32,
                CHANNELS[1] as u32,
                EMBED_DIM as u32,
            ],
            arrays: self.params.to_arrays(),
            trailer,
        }
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        if &env.magic != PROBE_MAGIC {
            return Err(Error::Format("not a probe checkpoint".into()));
        }
        let [height, width, c0, c1, e] = env.widths[..] else {
            return Err(Error::Format(format!("unexpected probe widths {:?}", env.widths)));
        };
        if [c0 as usize, c1 as usize, e as usize] != [CHANNELS[0], CHANNELS[1], EMBED_DIM] {
            return Err(Error::Format(format!("unexpected probe widths {:?}", env.widths)));
        }
        let mut probe = Self::new(height as usize, width as usize, env.attrs as usize, 0)?;
        probe.params.load_arrays(env.arrays.clone())?;
        probe.frozen_hash = env
            .trailer
            .get("frozen_hash")
            .and_then(|v| v.as_str())
            .map(str::to_owned);
        Ok(probe)
    }
}

/// Probe training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// A frozen probe with its held-out accuracy per head.
#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub probe: Probe,
    pub heldout_accuracy: Vec<f64>,
    pub final_train_loss: f64,
}

impl ProbeReport {
    pub fn to_envelope(&self, config: &ProbeConfig) -> Envelope {
        self.probe.to_envelope(serde_json::json!({
            "config": config,
            "heldout_accuracy": self.heldout_accuracy,
            "final_train_loss": self.final_train_loss,
        }))
    }
}

/// Mean binary cross-entropy of sigmoid(`logits`) against `labels`.
pub fn bce_on_tape(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    // softplus(z) - y z
    let y = tape.constant(labels.clone());
    let sp = tape.softplus(logits);
    let yz = tape.mul(logits, y)?;
    let per = tape.sub(sp, yz)?;
    Ok(tape.mean(per))
}

/// Fraction of rows where thresholding each confidence at 0.5 matches the label.
pub fn head_accuracy(confidences: &[Vec<f64>], records: &[Record], attrs: usize) -> Vec<f64> {
    let mut hits = vec![0usize; attrs];
    for (conf, rec) in confidences.iter().zip(records) {
        for k in 0..attrs {
            if (conf[k] >= 0.5) == (rec.labels[k] == 1) {
                hits[k] += 1;
            }
        }
    }
    hits.iter().map(|&h| h as f64 / records.len().max(1) as f64).collect()
}

fn render(gen: &Generator, records: &[&Record]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.w.as_slice()).collect();
    gen.render_rows(&stack_rows(&rows)?)
}

/// Confidences for the images of `records`, in chunks to bound memory.
pub fn classify_records(probe: &Probe, gen: &Generator, records: &[Record]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(256) {
        let refs: Vec<&Record> = chunk.iter().collect();
        out.extend(probe.classify_rows(&render(gen, &refs)?)?);
    }
    Ok(out)
}

/// Trains a probe on generated images, freezes it and checks every head
/// against [`ACCURACY_FLOOR`] on `heldout`.
pub fn train_probe(
    config: &ProbeConfig,
    gen: &Generator,
    train: &[Record],
    heldout: &[Record],
    attr_names: &[String],
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<ProbeReport> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::InvalidArgument("probe training and held-out sets must be non-empty".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 || config.lr.is_nan() || config.lr <= 0.0 {
        return Err(Error::Config("probe epochs, batch_size and lr must be positive".into()));
    }
    let attrs = train[0].labels.len();
    let (_, height, width) = gen.image_dims();
    let mut probe = Probe::new(height, width, attrs, config.seed)?;
    let mut optimizer = Optimizer::new(probe.params(), AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let all: Vec<&Record> = train.iter().collect();
    let images = render(gen, &all)?;
    let pixels = probe.pixels();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last = f64::NAN;
    for epoch in 0..config.epochs {
        // Linear decay to zero over the run.
        optimizer.set_lr(config.lr * (1.0 - epoch as f64 / config.epochs as f64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let mut x = Vec::with_capacity(idx.len() * pixels);
            let mut y = Vec::with_capacity(idx.len() * attrs);
            for &i in idx {
                x.extend_from_slice(&images.data()[i * pixels..(i + 1) * pixels]);
                y.extend(train[i].labels.iter().map(|&l| f64::from(l)));
            }
            let mut tape = Tape::new();
            let bound = probe.params.bind(&mut tape);
            let xv = tape.constant(Tensor::matrix(idx.len(), pixels, x)?);
            let out = probe.forward_on_tape(&mut tape, &bound, xv)?;
            let loss = bce_on_tape(&mut tape, out.logits, &Tensor::matrix(idx.len(), attrs, y)?)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    at: format!("probe epoch {epoch}, batch {b}"),
                    value,
                });
            }
            sum += value;
            batches += 1;
            let mut grads = tape.backward(loss)?;
            optimizer.step(&mut probe.params, &bound, &mut grads)?;
        }
        last = sum / batches as f64;
        on_epoch(epoch, last);
    }
    probe.freeze();

    let conf = classify_records(&probe, gen, heldout)?;
    let heldout_accuracy = head_accuracy(&conf, heldout, attrs);
    for (k, &acc) in heldout_accuracy.iter().enumerate() {
        if acc < ACCURACY_FLOOR {
            return Err(Error::ProbeBelowFloor {
                attribute: attr_names.get(k).cloned().unwrap_or_else(|| k.to_string()),
                accuracy: acc,
                floor: ACCURACY_FLOOR,
            });
        }
    }
    Ok(ProbeReport {
        probe,
        heldout_accuracy,
        final_train_loss: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_probabilities_and_embeddings_have_fixed_width() {
        let probe = Probe::new(32, 32, 4, 3).unwrap();
        let gray = ImageGrid::filled(1, 32, 32, 0.5);
        let c = probe.classify(&gray).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|v| *v > 0.0 && *v < 1.0));
        let e = probe.embed(&gray).unwrap();
        assert_eq!(e.len(), EMBED_DIM);
        assert_eq!(e, probe.embed(&gray).unwrap());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let probe = Probe::new(32, 32, 4, 3).unwrap();
        assert!(probe.classify(&ImageGrid::filled(1, 16, 16, 0.5)).is_err());
        assert!(probe.classify_rows(&Tensor::zeros(&[2, 100])).is_err());
    }

    #[test]
    fn verify_detects_changed_weights() {
        let mut probe = Probe::new(8, 8, 2, 1).unwrap();
        assert!(probe.verify().is_err());
        probe.freeze();
        probe.verify().unwrap();
        let mut arrays = probe.params.to_arrays();
        arrays[0][0] += 1e-9;
        probe.params.load_arrays(arrays).unwrap();
        assert!(matches!(probe.verify(), Err(Error::StaleProbe { .. })));
    }

    #[test]
    fn envelope_keeps_frozen_hash() {
        let mut probe = Probe::new(8, 8, 2, 1).unwrap();
        probe.freeze();
        let env = probe.to_envelope(serde_json::json!({}));
        let back = Probe::from_envelope(&Envelope::from_bytes(&env.to_bytes().unwrap(), PROBE_MAGIC).unwrap()).unwrap();
        assert_eq!(back, probe);
        back.verify().unwrap();
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 2, vec![0.3, -1.2]).unwrap());
        let loss = bce_on_tape(&mut tape, z, &Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want = (-(s(0.3)).ln() - (1.0 - s(-1.2)).ln()) / 2.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }
}
