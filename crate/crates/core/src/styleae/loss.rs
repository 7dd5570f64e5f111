use ndtensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the attribute coordinates are pulled toward their labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeLossMode {
    /// `(c - y)^2` for every label.
    Mse,
    /// `max(0, 1 - c)` for positive labels, `c^2` for negative ones.
    HingePositive,
}

impl std::str::FromStr for AttributeLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "hinge-positive" | "hinge" => Ok(Self::HingePositive),
            other => Err(Error::Config(format!(
                "unknown attribute loss mode `{other}` (expected mse or hinge-positive)"
            ))),
        }
    }
}

impl std::fmt::Display for AttributeLossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::HingePositive => "hinge-positive",
        })
    }
}

/// Contribution of one coordinate/label pair.
pub fn attribute_term(c: f64, y: f64, mode: AttributeLossMode) -> Result<f64> {
    match mode {
        AttributeLossMode::Mse => Ok((c - y) * (c - y)),
        AttributeLossMode::HingePositive if y == 1.0 => Ok((1.0 - c).max(0.0)),
        AttributeLossMode::HingePositive if y == 0.0 => Ok(c * c),
        AttributeLossMode::HingePositive => Err(Error::InvalidArgument(format!(
            "hinge-positive attribute loss needs labels in {{0, 1}}, got {y}"
        ))),
    }
}

/// Sum over attributes of [`attribute_term`].
pub fn attribute_loss(c: &[f64], y: &[f64], mode: AttributeLossMode) -> Result<f64> {
    if c.len() != y.len() {
        return Err(Error::ShapeMismatch {
            what: "attribute labels",
            expected: vec![c.len()],
            got: vec![y.len()],
        });
    }
    c.iter()
        .zip(y)
        .map(|(&ci, &yi)| attribute_term(ci, yi, mode))
        .sum()
}

/// Per-sample attribute loss on the tape.
///
/// `codes` is `[batch, K]`, `labels` holds `batch * K` values. Returns `[batch, 1]`.
pub fn attribute_loss_on_tape(
    tape: &mut Tape,
    codes: Var,
    labels: &[f64],
    mode: AttributeLossMode,
) -> Result<Var> {
    let shape = tape.shape(codes).to_vec();
    let (batch, k) = match shape.as_slice() {
        [b, k] => (*b, *k),
        _ => {
            return Err(Error::ShapeMismatch {
                what: "attribute codes",
                expected: vec![labels.len()],
                got: shape,
            })
        }
    };
    if labels.len() != batch * k {
        return Err(Error::ShapeMismatch {
            what: "attribute labels",
            expected: vec![batch, k],
            got: vec![labels.len()],
        });
    }
    let y = Tensor::matrix(batch, k, labels.to_vec())?;
    let per_entry = match mode {
        AttributeLossMode::Mse => {
            let yv = tape.constant(y);
            let d = tape.sub(codes, yv)?;
            tape.square(d)
        }
        AttributeLossMode::HingePositive => {
            if let Some(bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "hinge-positive attribute loss needs labels in {{0, 1}}, got {bad}"
                )));
            }
            // y·max(0, 1 - c) + (1 - y)·c²
            let pos_mask = tape.constant(y.clone());
            let neg_mask = tape.constant(Tensor::matrix(
                batch,
                k,
                labels.iter().map(|l| 1.0 - l).collect(),
            )?);
            let neg_c = tape.scale(codes, -1.0);
            let gap = tape.add_scalar(neg_c, 1.0);
            let hinge = tape.clamp_min(gap, 0.0);
            let hinge = tape.mul(hinge, pos_mask)?;
            let sq = tape.square(codes);
            let sq = tape.mul(sq, neg_mask)?;
            tape.add(hinge, sq)?
        }
    };
    Ok(tape.row_sums(per_entry)?)
}

/// Attribute-loss weight at `epoch`: a linear ramp from 0 to `lambda_max`
/// over the first `ramp_epochs` epochs, constant afterwards.
pub fn lambda_schedule(epoch: usize, lambda_max: f64, ramp_epochs: usize) -> f64 {
    if ramp_epochs == 0 {
        return lambda_max;
    }
    lambda_max * (epoch as f64 / ramp_epochs as f64).min(1.0)
}
