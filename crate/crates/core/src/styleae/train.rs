use ndtensor::{AdamConfig, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{attribute_loss_on_tape, lambda_schedule, AttributeLossMode, Plugin};
use crate::envelope::{Envelope, Record};
use crate::image::ImageGrid;
use crate::nn::{stack_rows, Bound, Optimizer};
use crate::syngen::Generator;
use crate::{Error, Result};

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub ramp_epochs: usize,
    pub lambda_max: f64,
    pub batch_size: usize,
    pub attribute_loss: AttributeLossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            ramp_epochs: 30,
            lambda_max: 0.3,
            batch_size: 64,
            attribute_loss: AttributeLossMode::HingePositive,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda_max must be >= 0, got {}", self.lambda_max));
        }
        if self.ramp_epochs > self.epochs {
            return bad(format!(
                "ramp_epochs ({}) exceeds epochs ({})",
                self.ramp_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn lambda(&self, epoch: usize) -> f64 {
        lambda_schedule(epoch, self.lambda_max, self.ramp_epochs)
    }
}

/// A minibatch ready for the tape: style vectors, their images and labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub w: Tensor,
    pub images: Tensor,
    pub labels: Vec<f64>,
}

impl Batch {
    /// Builds a batch from records, rendering the target images with `gen`.
    pub fn from_records(gen: &Generator, records: &[&Record]) -> Result<Self> {
        let rows: Vec<&[f64]> = records.iter().map(|r| r.w.as_slice()).collect();
        let w = stack_rows(&rows)?;
        let images = gen.render_rows(&w)?;
        let labels = records
            .iter()
            .flat_map(|r| r.labels.iter().map(|&l| f64::from(l)))
            .collect();
        Ok(Self { w, images, labels })
    }

    pub fn len(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scalar loss handles produced by [`total_loss_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub image: Var,
    pub attribute: Var,
}

/// Batch mean of `image_loss + lambda * attribute_loss` on the tape.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape(
    tape: &mut Tape,
    plugin: &Plugin,
    bound: &Bound,
    gen: &Generator,
    w: Var,
    images: &Tensor,
    labels: &[f64],
    lambda: f64,
    mode: AttributeLossMode,
) -> Result<LossVars> {
    let k = plugin.attrs();
    let code = plugin.encode_on_tape(tape, bound, w)?;
    let w_hat = plugin.decode_on_tape(tape, bound, code)?;
    let x_hat = gen.render_on_tape(tape, w_hat)?;
    let x = tape.constant(images.clone());
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff);
    let per_sample = tape.row_sums(sq)?;
    let image_terms = tape.scale(per_sample, 1.0 / gen.pixels() as f64);
    let c = tape.slice_cols(code, 0, k)?;
    let attr_terms = attribute_loss_on_tape(tape, c, labels, mode)?;
    let weighted = tape.scale(attr_terms, lambda);
    let per_sample_total = tape.add(image_terms, weighted)?;
    Ok(LossVars {
        total: tape.mean(per_sample_total),
        image: tape.mean(image_terms),
        attribute: tape.mean(attr_terms),
    })
}

/// Mean squared pixel error between `x` and the image of `w_hat`.
pub fn image_loss(gen: &Generator, x: &ImageGrid, w_hat: &[f64]) -> Result<f64> {
    let rendered = gen.synthesize(w_hat)?;
    crate::metrics::mse(x, &rendered)
}

/// Untracked [`total_loss_on_tape`] over `records` at `epoch`.
pub fn total_loss(
    plugin: &Plugin,
    gen: &Generator,
    records: &[&Record],
    epoch: usize,
    config: &TrainConfig,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("total loss of an empty batch".into()));
    }
    let batch = Batch::from_records(gen, records)?;
    let mut tape = Tape::no_grad();
    let bound = plugin.params().bind_frozen(&mut tape);
    let w = tape.constant(batch.w.clone());
    let vars = total_loss_on_tape(
        &mut tape,
        plugin,
        &bound,
        gen,
        w,
        &batch.images,
        &batch.labels,
        config.lambda(epoch),
        config.attribute_loss,
    )?;
    Ok(tape.value(vars.total).item())
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lambda: f64,
    pub total: f64,
    pub image: f64,
    pub attribute: f64,
}

/// Trained plugin plus its run record.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub plugin: Plugin,
    pub config: TrainConfig,
    pub history: Vec<EpochStats>,
    pub generator_hash: String,
    pub samples: usize,
}

impl TrainReport {
    pub fn to_envelope(&self) -> Envelope {
        self.plugin.to_envelope(serde_json::json!({
            "config": self.config,
            "history": self.history,
            "generator_hash": self.generator_hash,
            "samples": self.samples,
        }))
    }
}

/// Trains a fresh plugin on `records` against the frozen generator.
///
/// `on_epoch` sees the stats of every finished epoch.
pub fn train(
    config: &TrainConfig,
    gen: &Generator,
    records: &[Record],
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainReport> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let dim = gen.style_dim();
    let attrs = records[0].labels.len();
    for r in records {
        if r.w.len() != dim || r.labels.len() != attrs {
            return Err(Error::ShapeMismatch {
                what: "training record",
                expected: vec![dim, attrs],
                got: vec![r.w.len(), r.labels.len()],
            });
        }
    }
    let generator_hash = gen.weights_hash();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut plugin = Plugin::new(dim, attrs, config.seed)?;
    let mut optimizer = Optimizer::new(plugin.params(), AdamConfig::with_lr(config.lr));

    // Targets never change, so render them once.
    let all = Batch::from_records(gen, &records.iter().collect::<Vec<_>>())?;
    let pixels = gen.pixels();

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lambda = config.lambda(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let w = gather(all.w.data(), dim, idx)?;
            let images = gather(all.images.data(), pixels, idx)?;
            let labels = gather(&all.labels, attrs, idx)?.into_data();

            let mut tape = Tape::new();
            let bound = plugin.params().bind(&mut tape);
            let wv = tape.constant(w);
            let vars = total_loss_on_tape(
                &mut tape,
                &plugin,
                &bound,
                gen,
                wv,
                &images,
                &labels,
                lambda,
                config.attribute_loss,
            )?;
            let total = tape.value(vars.total).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    at: format!("epoch {epoch}, batch {b}"),
                    value: total,
                });
            }
            sums[0] += total;
            sums[1] += tape.value(vars.image).item();
            sums[2] += tape.value(vars.attribute).item();
            batches += 1;
            let mut grads = tape.backward(vars.total)?;
            optimizer.step(plugin.params_mut(), &bound, &mut grads)?;
        }
        let n = batches as f64;
        let stats = EpochStats {
            epoch,
            lambda,
            total: sums[0] / n,
            image: sums[1] / n,
            attribute: sums[2] / n,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainReport {
        plugin,
        config: config.clone(),
        history,
        generator_hash,
        samples: records.len(),
    })
}

/// Rows `idx` of a row-major matrix with `cols` columns.
fn gather(data: &[f64], cols: usize, idx: &[usize]) -> Result<Tensor> {
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
    }
    Ok(Tensor::matrix(idx.len(), cols, out)?)
}
