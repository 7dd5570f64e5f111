use std::fmt::Write as _;

use ndtensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{embedding_mse, mse, psnr_from_mse, ssim, SSIM_CONVENTION};
use crate::editkit::{minimal_edit_batch, EditRequest};
use crate::envelope::Record;
use crate::image::ImageGrid;
use crate::nn::stack_rows;
use crate::probes::Probe;
use crate::styleae::Plugin;
use crate::syngen::{Generator, ATTRIBUTE_NAMES};
use crate::{Error, Result};

/// Settings for [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub step: f64,
    pub bound: f64,
    /// Cap on edited samples per attribute and direction; `None` edits all.
    pub max_per_direction: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: EditRequest::DEFAULT_THRESHOLD,
            step: EditRequest::DEFAULT_STEP,
            bound: EditRequest::DEFAULT_BOUND,
            max_per_direction: None,
        }
    }
}

/// Identifies what a report was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub ssim_convention: String,
    pub plugin_hash: String,
    pub probe_hash: String,
    pub generator_hash: String,
    pub eval_samples: usize,
    pub config: EvalConfig,
}

/// One attribute and direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attribute: String,
    pub attr_index: usize,
    /// Requested label; samples start with the opposite one.
    pub target: u8,
    /// Eval samples starting with the opposite label.
    pub available: usize,
    /// Samples actually edited.
    pub n: usize,
    pub applicable: bool,
    /// Edits the probe accepted.
    pub probe_successes: usize,
    /// Probe-accepted edits whose oracle label also equals the target.
    pub confirmed: usize,
    /// `confirmed / n`.
    pub accuracy: Option<f64>,
    /// `confirmed / probe_successes`.
    pub oracle_agreement: Option<f64>,
    /// Image metrics between `G(w)` and `G(ŵ)` averaged over probe-accepted edits.
    pub mse: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub pmse: Option<f64>,
    /// Share of non-target oracle labels unchanged over probe-accepted edits.
    pub preservation: Option<f64>,
    pub mean_steps: Option<f64>,
}

impl ReportRow {
    pub fn direction(&self) -> &'static str {
        if self.target == 1 {
            "0->1"
        } else {
            "1->0"
        }
    }
}

/// Reconstruction quality of `decode(encode(w))` without any edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTripStats {
    pub n: usize,
    pub median_psnr_db: f64,
    pub mse: f64,
    pub ssim: f64,
    pub pmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub header: ReportHeader,
    pub round_trip: RoundTripStats,
    pub rows: Vec<ReportRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.6}"))
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Attribute rows by metric columns, with `#` comment lines for the header.
    pub fn to_csv(&self) -> String {
        let h = &self.header;
        let mut out = String::new();
        let _ = writeln!(out, "# {}", h.ssim_convention);
        let _ = writeln!(out, "# plugin {} probe {} generator {}", h.plugin_hash, h.probe_hash, h.generator_hash);
        let rt = &self.round_trip;
        let _ = writeln!(
            out,
            "# round trip: n {} median_psnr_db {:.6} mse {:.6} ssim {:.6} pmse {:.6}",
            rt.n, rt.median_psnr_db, rt.mse, rt.ssim, rt.pmse
        );
        out.push_str(
            "attribute,direction,available,n,applicable,probe_successes,confirmed,accuracy,oracle_agreement,mse,psnr_db,ssim,pmse,preservation,mean_steps\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.attribute,
                r.direction(),
                r.available,
                r.n,
                r.applicable,
                r.probe_successes,
                r.confirmed,
                fmt_opt(r.accuracy),
                fmt_opt(r.oracle_agreement),
                fmt_opt(r.mse),
                fmt_opt(r.psnr_db),
                fmt_opt(r.ssim),
                fmt_opt(r.pmse),
                fmt_opt(r.preservation),
                fmt_opt(r.mean_steps),
            );
        }
        out
    }
}

fn images(gen: &Generator, ws: &[&[f64]]) -> Result<Vec<ImageGrid>> {
    let (_, h, w) = gen.image_dims();
    let rows = gen.render_rows(&stack_rows(ws)?)?;
    rows.data()
        .chunks(gen.pixels())
        .map(|px| ImageGrid::new(1, h, w, px.to_vec()))
        .collect()
}

fn embeddings(probe: &Probe, imgs: &[ImageGrid]) -> Result<Vec<Vec<f64>>> {
    let mut data = Vec::with_capacity(imgs.len() * probe.pixels());
    for im in imgs {
        data.extend_from_slice(im.data());
    }
    probe.embed_rows(&Tensor::matrix(imgs.len(), probe.pixels(), data)?)
}

struct PairStats {
    mse: f64,
    psnr: f64,
    ssim: f64,
    pmse: f64,
}

/// Per-pair image metrics between `a[i]` and `b[i]`.
fn pair_stats(probe: &Probe, a: &[ImageGrid], b: &[ImageGrid]) -> Result<Vec<PairStats>> {
    let ea = embeddings(probe, a)?;
    let eb = embeddings(probe, b)?;
    a.iter()
        .zip(b)
        .zip(ea.iter().zip(&eb))
        .map(|((x, y), (u, v))| {
            let m = mse(x, y)?;
            Ok(PairStats {
                mse: m,
                psnr: psnr_from_mse(m, 1.0),
                ssim: ssim(x, y)?,
                pmse: embedding_mse(u, v)?,
            })
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Median of a non-empty slice.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs the minimal-edit protocol for every attribute and direction over
/// `eval_set` and summarizes the outcome.
pub fn evaluate(
    plugin: &Plugin,
    probe: &Probe,
    gen: &Generator,
    eval_set: &[Record],
    config: &EvalConfig,
) -> Result<MetricReport> {
    probe.verify()?;
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let attrs = plugin.attrs();
    let ws: Vec<&[f64]> = eval_set.iter().map(|r| r.w.as_slice()).collect();
    let originals = images(gen, &ws)?;

    let recon = plugin.round_trip_batch(&ws)?;
    let recon_refs: Vec<&[f64]> = recon.iter().map(Vec::as_slice).collect();
    let recon_imgs = images(gen, &recon_refs)?;
    let rt = pair_stats(probe, &originals, &recon_imgs)?;
    let mut psnrs: Vec<f64> = rt.iter().map(|s| s.psnr).collect();
    let round_trip = RoundTripStats {
        n: rt.len(),
        median_psnr_db: median(&mut psnrs),
        mse: mean(rt.iter().map(|s| s.mse)).unwrap_or(0.0),
        ssim: mean(rt.iter().map(|s| s.ssim)).unwrap_or(0.0),
        pmse: mean(rt.iter().map(|s| s.pmse)).unwrap_or(0.0),
    };

    let mut rows = Vec::with_capacity(2 * attrs);
    for k in 0..attrs {
        for target in [1u8, 0] {
            let qualifying: Vec<usize> = (0..eval_set.len())
                .filter(|&i| eval_set[i].labels[k] != target)
                .collect();
            let available = qualifying.len();
            let chosen = &qualifying[..config.max_per_direction.map_or(available, |m| m.min(available))];
            let name = ATTRIBUTE_NAMES.get(k).map_or_else(|| k.to_string(), |s| (*s).to_owned());
            let mut row = ReportRow {
                attribute: name,
                attr_index: k,
                target,
                available,
                n: chosen.len(),
                applicable: !chosen.is_empty(),
                probe_successes: 0,
                confirmed: 0,
                accuracy: None,
                oracle_agreement: None,
                mse: None,
                psnr_db: None,
                ssim: None,
                pmse: None,
                preservation: None,
                mean_steps: None,
            };
            if chosen.is_empty() {
                rows.push(row);
                continue;
            }
            let request = EditRequest {
                attr: k,
                target,
                threshold: config.threshold,
                step: config.step,
                bound: config.bound,
            };
            let inputs: Vec<&[f64]> = chosen.iter().map(|&i| ws[i]).collect();
            let results = minimal_edit_batch(plugin, gen, probe, &inputs, &request)?;
            row.mean_steps = mean(results.iter().map(|r| r.steps as f64));

            let accepted: Vec<usize> = (0..results.len()).filter(|&j| results[j].success).collect();
            row.probe_successes = accepted.len();
            if !accepted.is_empty() {
                let edited: Vec<&[f64]> = accepted.iter().map(|&j| results[j].w_hat.as_slice()).collect();
                let edited_labels = gen.oracle_labels_rows(&stack_rows(&edited)?)?;
                let edited_imgs = images(gen, &edited)?;
                let before: Vec<ImageGrid> = accepted.iter().map(|&j| originals[chosen[j]].clone()).collect();
                let stats = pair_stats(probe, &before, &edited_imgs)?;

                let mut kept = 0usize;
                let mut compared = 0usize;
                for (&j, labels) in accepted.iter().zip(&edited_labels) {
                    let original = &eval_set[chosen[j]].labels;
                    if labels[k] == target {
                        row.confirmed += 1;
                    }
                    for other in (0..attrs).filter(|&o| o != k) {
                        compared += 1;
                        kept += usize::from(labels[other] == original[other]);
                    }
                }
                row.oracle_agreement = Some(row.confirmed as f64 / accepted.len() as f64);
                row.preservation = (compared > 0).then(|| kept as f64 / compared as f64);
                row.mse = mean(stats.iter().map(|s| s.mse));
                row.psnr_db = mean(stats.iter().map(|s| s.psnr));
                row.ssim = mean(stats.iter().map(|s| s.ssim));
                row.pmse = mean(stats.iter().map(|s| s.pmse));
            }
            row.accuracy = Some(row.confirmed as f64 / row.n as f64);
            rows.push(row);
        }
    }

    Ok(MetricReport {
        header: ReportHeader {
            ssim_convention: SSIM_CONVENTION.to_owned(),
            plugin_hash: plugin.content_hash(),
            probe_hash: probe.content_hash(),
            generator_hash: gen.weights_hash(),
            eval_samples: eval_set.len(),
            config: config.clone(),
        },
        round_trip,
        rows,
    })
}
