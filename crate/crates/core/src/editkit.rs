//! Attribute edits through the plugin and projection of images into style space.

use ndtensor::{AdamConfig, AdamState, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::image::ImageGrid;
use crate::probes::Probe;
use crate::styleae::{Plugin, TargetCode};
use crate::syngen::Generator;
use crate::{Error, Result};

/// Parameters of a minimal-modification edit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub attr: usize,
    /// Requested label, 0 or 1.
    pub target: u8,
    pub threshold: f64,
    pub step: f64,
    pub bound: f64,
}

impl EditRequest {
    pub const DEFAULT_THRESHOLD: f64 = 0.9;
    pub const DEFAULT_STEP: f64 = 0.1;
    pub const DEFAULT_BOUND: f64 = 4.0;

    pub fn new(attr: usize, target: u8) -> Self {
        Self {
            attr,
            target,
            threshold: Self::DEFAULT_THRESHOLD,
            step: Self::DEFAULT_STEP,
            bound: Self::DEFAULT_BOUND,
        }
    }

    pub fn validate(&self, attrs: usize) -> Result<()> {
        if self.attr >= attrs {
            return Err(Error::IndexOutOfRange {
                what: "attribute",
                index: self.attr,
                len: attrs,
            });
        }
        if self.target > 1 {
            return Err(Error::InvalidArgument(format!(
                "edit target must be 0 or 1, got {}",
                self.target
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {}", self.step)));
        }
        if !(self.bound > 1.0 && self.bound.is_finite()) {
            return Err(Error::InvalidArgument(format!("bound must exceed 1, got {}", self.bound)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Upper limit on probe queries for one edit.
    pub fn max_queries(&self) -> usize {
        (2.0 * self.bound / self.step).ceil() as usize
    }

    fn direction(&self) -> f64 {
        if self.target == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Outcome of [`minimal_edit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub w_hat: Vec<f64>,
    pub final_ck: f64,
    pub steps: usize,
    pub success: bool,
    /// Probe confidence in the requested label at every visited `c_k`.
    pub confidences: Vec<f64>,
    /// Visited values of `c_k`, starting with the encoded one.
    pub ck_trace: Vec<f64>,
}

/// Decodes `encode(w)` with coordinate `k` replaced by `value`.
pub fn set_attribute(plugin: &Plugin, w: &[f64], k: usize, value: f64) -> Result<Vec<f64>> {
    let mut code = edited_code(plugin, w, k)?;
    code.c[k] = value;
    plugin.decode(&code)
}

fn edited_code(plugin: &Plugin, w: &[f64], k: usize) -> Result<TargetCode> {
    if k >= plugin.attrs() {
        return Err(Error::IndexOutOfRange {
            what: "attribute",
            index: k,
            len: plugin.attrs(),
        });
    }
    plugin.encode(w)
}

fn check_compatible(plugin: &Plugin, gen: &Generator, probe: &Probe) -> Result<()> {
    if probe.image_dims() != gen.image_dims() {
        return Err(Error::InvalidArgument(format!(
            "probe expects {:?} images but the generator renders {:?}",
            probe.image_dims(),
            gen.image_dims()
        )));
    }
    if plugin.style_dim() != gen.style_dim() {
        return Err(Error::ShapeMismatch {
            what: "plugin style dimension",
            expected: vec![gen.style_dim()],
            got: vec![plugin.style_dim()],
        });
    }
    if probe.attrs() != plugin.attrs() {
        return Err(Error::ShapeMismatch {
            what: "probe heads",
            expected: vec![plugin.attrs()],
            got: vec![probe.attrs()],
        });
    }
    Ok(())
}

/// Moves `c_k` of `encode(w)` in steps toward the requested label until the
/// probe is confident or `|c_k|` leaves the bound.
///
/// Positive targets walk upward; negative targets walk downward through 0.
pub fn minimal_edit(
    plugin: &Plugin,
    gen: &Generator,
    probe: &Probe,
    w: &[f64],
    request: &EditRequest,
) -> Result<EditResult> {
    Ok(minimal_edit_batch(plugin, gen, probe, &[w], request)?.remove(0))
}

/// [`minimal_edit`] for many inputs at once; each input follows its own
/// traversal. Batched matrix products may round differently from single-row
/// ones, so confidences can differ from [`minimal_edit`] in the last bits.
pub fn minimal_edit_batch(
    plugin: &Plugin,
    gen: &Generator,
    probe: &Probe,
    ws: &[&[f64]],
    request: &EditRequest,
) -> Result<Vec<EditResult>> {
    check_compatible(plugin, gen, probe)?;
    request.validate(plugin.attrs())?;
    let k = request.attr;
    let codes = plugin.encode_batch(ws)?;
    let mut states: Vec<EditResult> = codes
        .iter()
        .map(|c| EditResult {
            w_hat: Vec::new(),
            final_ck: c[k],
            steps: 0,
            success: false,
            confidences: Vec::new(),
            ck_trace: Vec::new(),
        })
        .collect();
    let mut active: Vec<usize> = (0..ws.len()).collect();
    let limit = request.max_queries();
    for step in 0.. {
        // Samples whose next position is still inside the bound.
        active.retain(|&i| {
            let ck = codes[i][k] + request.direction() * request.step * step as f64;
            if ck.abs() > request.bound || step >= limit {
                return false;
            }
            states[i].final_ck = ck;
            true
        });
        if active.is_empty() {
            break;
        }
        let batch: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| {
                let mut c = codes[i].clone();
                c[k] = states[i].final_ck;
                c
            })
            .collect();
        let refs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
        let w_hats = plugin.decode_batch(&refs)?;
        let images = gen.render_rows(&crate::nn::stack_rows(
            &w_hats.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        )?)?;
        let conf = probe.classify_rows(&images)?;
        for ((&i, w_hat), p) in active.iter().zip(w_hats).zip(conf) {
            let s = &mut states[i];
            let c = if request.target == 1 { p[k] } else { 1.0 - p[k] };
            s.confidences.push(c);
            s.ck_trace.push(s.final_ck);
            s.steps = step;
            s.w_hat = w_hat;
            if c >= request.threshold {
                s.success = true;
            }
        }
        active.retain(|&i| !states[i].success);
    }
    // Inputs encoded outside the bound are never decoded by the walk.
    for (i, s) in states.iter_mut().enumerate() {
        if s.w_hat.is_empty() {
            s.w_hat = plugin.decode_batch(&[&codes[i]])?.remove(0);
        }
    }
    Ok(states)
}

/// Settings for [`project`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub iters: usize,
    pub lr: f64,
    /// Number of mapped samples averaged for the starting point.
    pub init_samples: usize,
    pub init_seed: u64,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: 0.05,
            init_samples: 1000,
            init_seed: 0,
        }
    }
}

/// Result of [`project`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub w: Vec<f64>,
    pub loss: f64,
    /// Best-so-far loss after each iteration, starting with the initial loss.
    pub trace: Vec<f64>,
}

/// Finds a style vector whose image matches `image` by Adam on pixel MSE.
pub fn project(gen: &Generator, image: &ImageGrid, config: &ProjectConfig) -> Result<Projection> {
    if image.dims() != gen.image_dims() {
        return Err(Error::ShapeMismatch {
            what: "projection target image",
            expected: {
                let (c, h, w) = gen.image_dims();
                vec![c, h, w]
            },
            got: {
                let (c, h, w) = image.dims();
                vec![c, h, w]
            },
        });
    }
    let dim = gen.style_dim();
    let mut w = gen.mean_style(config.init_samples, config.init_seed)?;
    let target = Tensor::matrix(1, gen.pixels(), image.data().to_vec())?;
    let mut adam = AdamState::new(dim, AdamConfig::with_lr(config.lr));

    let mut best_w = w.clone();
    let mut best = f64::INFINITY;
    let mut trace = Vec::with_capacity(config.iters + 1);
    for iter in 0..=config.iters {
        let mut tape = Tape::new();
        let wv = tape.leaf(Tensor::matrix(1, dim, w.clone())?);
        let x = gen.render_on_tape(&mut tape, wv)?;
        let t = tape.constant(target.clone());
        let d = tape.sub(x, t)?;
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                at: format!("projection iteration {iter}"),
                value,
            });
        }
        if value < best {
            best = value;
            best_w.clone_from(&w);
        }
        trace.push(best);
        if iter == config.iters {
            break;
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut w, grads.get(wv).expect("tracked leaf"))?;
    }
    Ok(Projection {
        w: best_w,
        loss: best,
        trace,
    })
}
