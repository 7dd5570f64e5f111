//! End-to-end run: datasets, probe, plugin, evaluation and gallery, with a
//! manifest of every file written.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editkit::{minimal_edit_batch, EditRequest};
use crate::envelope::{read_dataset, sha256_hex, write_dataset, Envelope, Record};
use crate::image::ImageGrid;
use crate::metrics::{evaluate, EvalConfig, MetricReport};
use crate::nn::stack_rows;
use crate::probes::{train_probe, Probe, ProbeConfig, PROBE_MAGIC};
use crate::styleae::{train, AttributeLossMode, Plugin, TrainConfig, PLUGIN_MAGIC};
use crate::syngen::{
    Generator, GeneratorSpec, ATTRIBUTE_NAMES, DEFAULT_IMAGE_SIZE, DEFAULT_SEED, DEFAULT_STYLE_DIM,
};
use crate::{Error, Result};

/// Flat run configuration. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator_seed: u64,
    pub style_dim: usize,
    pub image_size: usize,

    pub probe_seed: u64,
    pub probe_train_samples: usize,
    pub probe_heldout_samples: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,

    pub ae_seed: u64,
    pub ae_train_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub ramp_epochs: usize,
    pub lambda_max: f64,
    pub batch_size: usize,
    pub attribute_loss: AttributeLossMode,
    pub train_seed: u64,

    pub eval_seed: u64,
    pub eval_samples: usize,
    pub max_per_direction: Option<usize>,
    pub threshold: f64,
    pub step: f64,
    pub bound: f64,

    pub gallery_samples: usize,
    pub gallery_attrs: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator_seed: DEFAULT_SEED,
            style_dim: DEFAULT_STYLE_DIM,
            image_size: DEFAULT_IMAGE_SIZE,
            probe_seed: 101,
            probe_train_samples: 8000,
            probe_heldout_samples: 2000,
            probe_epochs: 30,
            probe_lr: 2e-3,
            ae_seed: 202,
            ae_train_samples: 10_000,
            epochs: 100,
            lr: 1e-4,
            ramp_epochs: 30,
            lambda_max: 0.3,
            batch_size: 64,
            attribute_loss: AttributeLossMode::HingePositive,
            train_seed: 7,
            eval_seed: 303,
            eval_samples: 600,
            max_per_direction: Some(200),
            threshold: EditRequest::DEFAULT_THRESHOLD,
            step: EditRequest::DEFAULT_STEP,
            bound: EditRequest::DEFAULT_BOUND,
            gallery_samples: 6,
            gallery_attrs: ATTRIBUTE_NAMES.iter().map(|s| (*s).to_owned()).collect(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides, parsing each value as JSON when possible
    /// and as a bare string otherwise.
    pub fn apply_overrides<S: AsRef<str>>(&self, pairs: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let map = value.as_object_mut().expect("struct serializes to an object");
        for pair in pairs {
            let pair = pair.as_ref();
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
            let key = key.trim();
            if !map.contains_key(key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            let raw = raw.trim();
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_owned()));
            map.insert(key.to_owned(), parsed);
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let seeds = [self.probe_seed, self.ae_seed, self.eval_seed];
        if seeds[0] == seeds[1] || seeds[0] == seeds[2] || seeds[1] == seeds[2] {
            return Err(Error::Config(format!(
                "dataset seeds must be pairwise distinct (probe {}, ae {}, eval {})",
                seeds[0], seeds[1], seeds[2]
            )));
        }
        for (name, n) in [
            ("probe_train_samples", self.probe_train_samples),
            ("probe_heldout_samples", self.probe_heldout_samples),
            ("ae_train_samples", self.ae_train_samples),
            ("eval_samples", self.eval_samples),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.train_config().validate()?;
        self.edit_request(0, 1).validate(ATTRIBUTE_NAMES.len())?;
        self.gallery_attr_indices()?;
        Ok(())
    }

    pub fn generator_spec(&self) -> Result<GeneratorSpec> {
        if self.generator_seed == DEFAULT_SEED
            && self.style_dim == DEFAULT_STYLE_DIM
            && self.image_size == DEFAULT_IMAGE_SIZE
        {
            Ok(GeneratorSpec::default())
        } else {
            GeneratorSpec::calibrate(self.generator_seed, self.style_dim, self.image_size, self.image_size)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            ramp_epochs: self.ramp_epochs,
            lambda_max: self.lambda_max,
            batch_size: self.batch_size,
            attribute_loss: self.attribute_loss,
            seed: self.train_seed,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            batch_size: self.batch_size,
            seed: self.probe_seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            threshold: self.threshold,
            step: self.step,
            bound: self.bound,
            max_per_direction: self.max_per_direction,
        }
    }

    pub fn edit_request(&self, attr: usize, target: u8) -> EditRequest {
        EditRequest {
            attr,
            target,
            threshold: self.threshold,
            step: self.step,
            bound: self.bound,
        }
    }

    pub fn gallery_attr_indices(&self) -> Result<Vec<usize>> {
        self.gallery_attrs.iter().map(|n| attribute_index(n)).collect()
    }
}

/// Index of an attribute given its name or its numeric index.
pub fn attribute_index(name: &str) -> Result<usize> {
    if let Some(i) = ATTRIBUTE_NAMES.iter().position(|n| *n == name) {
        return Ok(i);
    }
    match name.parse::<usize>() {
        Ok(i) if i < ATTRIBUTE_NAMES.len() => Ok(i),
        _ => Err(Error::InvalidArgument(format!(
            "unknown attribute `{name}`; known attributes: {}",
            ATTRIBUTE_NAMES.join(", ")
        ))),
    }
}

pub fn save_dataset(path: &Path, dim: usize, attrs: usize, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, dim, attrs, records)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(usize, usize, Vec<Record>)> {
    read_dataset(&fs::read(path)?)
}

pub fn load_plugin(path: &Path) -> Result<Plugin> {
    Plugin::from_envelope(&Envelope::read_from(path, PLUGIN_MAGIC)?)
}

pub fn load_probe(path: &Path) -> Result<Probe> {
    Probe::from_envelope(&Envelope::read_from(path, PROBE_MAGIC)?)
}

/// Fails if two datasets share a style vector.
pub fn assert_disjoint(sets: &[(&str, &[Record])]) -> Result<()> {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for (name, records) in sets {
        for r in *records {
            if !seen.insert(r.w.iter().map(|v| v.to_bits()).collect()) {
                return Err(Error::Config(format!("dataset `{name}` repeats a style vector")));
            }
        }
    }
    Ok(())
}

/// One strip per sample: the reconstructed input followed by one minimally
/// edited panel per attribute in `attrs`, each flipping that attribute.
pub fn export_gallery(
    plugin: &Plugin,
    probe: &Probe,
    gen: &Generator,
    samples: &[Record],
    attrs: &[usize],
    base: &EditRequest,
) -> Result<Vec<ImageGrid>> {
    let ws: Vec<&[f64]> = samples.iter().map(|r| r.w.as_slice()).collect();
    if ws.is_empty() {
        return Ok(Vec::new());
    }
    let recon = plugin.round_trip_batch(&ws)?;
    let mut panels: Vec<Vec<ImageGrid>> = recon
        .iter()
        .map(|w| gen.synthesize(w).map(|img| vec![img]))
        .collect::<Result<_>>()?;
    for &k in attrs {
        if k >= plugin.attrs() {
            return Err(Error::IndexOutOfRange {
                what: "attribute",
                index: k,
                len: plugin.attrs(),
            });
        }
        for target in [0u8, 1] {
            let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].labels[k] != target).collect();
            if idx.is_empty() {
                continue;
            }
            let inputs: Vec<&[f64]> = idx.iter().map(|&i| ws[i]).collect();
            let request = EditRequest { attr: k, target, ..*base };
            let results = minimal_edit_batch(plugin, gen, probe, &inputs, &request)?;
            let edited: Vec<&[f64]> = results.iter().map(|r| r.w_hat.as_slice()).collect();
            let rendered = gen.render_rows(&stack_rows(&edited)?)?;
            let (_, h, w) = gen.image_dims();
            for (&i, px) in idx.iter().zip(rendered.data().chunks(gen.pixels())) {
                panels[i].push(ImageGrid::new(1, h, w, px.to_vec())?);
            }
        }
    }
    panels.iter().map(|p| ImageGrid::hstack(p)).collect()
}

/// A file written by a run, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub generator: GeneratorSpec,
    pub generator_hash: String,
    pub seeds: serde_json::Value,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(Self::FILE_NAME))?)?)
    }

    /// Re-hashes every listed file and reports the first mismatch.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for entry in &self.files {
            let bytes = fs::read(dir.join(&entry.path))?;
            let found = sha256_hex(&bytes);
            if found != entry.sha256 {
                return Err(Error::Format(format!(
                    "{} hashes to {found}, manifest says {}",
                    entry.path, entry.sha256
                )));
            }
        }
        Ok(())
    }
}

/// Collects written files for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl Outputs {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.push(ManifestEntry {
            path: rel.to_owned(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    fn write_dataset(&mut self, rel: &str, gen: &Generator, records: &[Record]) -> Result<()> {
        let mut buf = Vec::new();
        write_dataset(&mut buf, gen.style_dim(), gen.attrs(), records)?;
        self.write(rel, &buf).map(|_| ())
    }
}

/// Everything a pipeline run produced.
#[derive(Debug)]
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub report: MetricReport,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// gen-data, train-probe, train-ae, eval and gallery in sequence.
///
/// Files written before a failure stay on disk.
pub fn run_pipeline(config: &RunConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<PipelineOutput> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };

    let spec = stage("gen-data", config.generator_spec())?;
    let gen = stage("gen-data", Generator::new(spec.clone()))?;
    log("gen-data: generating datasets");
    let (probe_all, train_set, eval_set) = stage("gen-data", (|| {
        let probe_all = gen.make_dataset(config.probe_train_samples + config.probe_heldout_samples, config.probe_seed)?;
        let train_set = gen.make_dataset(config.ae_train_samples, config.ae_seed)?;
        let eval_set = gen.make_dataset(config.eval_samples, config.eval_seed)?;
        assert_disjoint(&[("probe", &probe_all), ("ae-train", &train_set), ("eval", &eval_set)])?;
        out.write_dataset("data/probe.synd", &gen, &probe_all)?;
        out.write_dataset("data/train.synd", &gen, &train_set)?;
        out.write_dataset("data/eval.synd", &gen, &eval_set)?;
        Ok((probe_all, train_set, eval_set))
    })())?;

    log("train-probe: training the probe");
    let (probe_train, probe_heldout) = probe_all.split_at(config.probe_train_samples);
    let probe_config = config.probe_config();
    let names: Vec<String> = ATTRIBUTE_NAMES.iter().map(|s| (*s).to_owned()).collect();
    let probe_report = stage(
        "train-probe",
        train_probe(&probe_config, &gen, probe_train, probe_heldout, &names, &mut |e, loss| {
            log(&format!("train-probe: epoch {e} loss {loss:.6}"))
        }),
    )?;
    stage(
        "train-probe",
        out.write("probe.prb", &probe_report.to_envelope(&probe_config).to_bytes()?),
    )?;
    log(&format!("train-probe: held-out accuracy {:?}", probe_report.heldout_accuracy));

    log("train-ae: training the plugin");
    let train_config = config.train_config();
    let ae = stage(
        "train-ae",
        train(&train_config, &gen, &train_set, &mut |s| {
            log(&format!(
                "train-ae: epoch {} lambda {:.3} loss {:.6} image {:.6} attribute {:.6}",
                s.epoch, s.lambda, s.total, s.image, s.attribute
            ))
        }),
    )?;
    stage("train-ae", out.write("plugin.sae", &ae.to_envelope().to_bytes()?))?;

    log("eval: running minimal edits");
    let probe = &probe_report.probe;
    let report = stage("eval", evaluate(&ae.plugin, probe, &gen, &eval_set, &config.eval_config()))?;
    stage("eval", out.write("report.json", report.to_json()?.as_bytes()))?;
    stage("eval", out.write("report.csv", report.to_csv().as_bytes()))?;

    log("gallery: exporting strips");
    stage("gallery", (|| {
        let attrs = config.gallery_attr_indices()?;
        let samples = &eval_set[..config.gallery_samples.min(eval_set.len())];
        let strips = export_gallery(&ae.plugin, probe, &gen, samples, &attrs, &config.edit_request(0, 1))?;
        for (i, strip) in strips.iter().enumerate() {
            let rel = format!("gallery/strip_{i:03}.png");
            let path = out.dir.join(&rel);
            fs::create_dir_all(path.parent().expect("has parent"))?;
            strip.write_png(&path)?;
            let bytes = fs::read(&path)?;
            out.files.push(ManifestEntry {
                path: rel,
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        Ok(())
    })())?;

    let manifest = Manifest {
        config: config.clone(),
        generator: spec,
        generator_hash: gen.weights_hash(),
        seeds: serde_json::json!({
            "generator": config.generator_seed,
            "probe": config.probe_seed,
            "ae": config.ae_seed,
            "eval": config.eval_seed,
            "train": config.train_seed,
        }),
        files: out.files,
    };
    fs::write(out_dir.join(Manifest::FILE_NAME), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(PipelineOutput { manifest, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_must_be_distinct() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.eval_seed = c.probe_seed;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"epochs": 3}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"epoch": 3}"#).is_err());
        let c = RunConfig::default();
        assert!(c.apply_overrides(&["nope=1"]).is_err());
        let c = c.apply_overrides(&["epochs=3", "attribute_loss=mse", "ramp_epochs=2"]).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.attribute_loss, AttributeLossMode::Mse);
    }

    #[test]
    fn attribute_lookup() {
        assert_eq!(attribute_index("striped").unwrap(), 1);
        assert_eq!(attribute_index("3").unwrap(), 3);
        let err = attribute_index("smiling").unwrap_err().to_string();
        assert!(err.contains("big-blob"), "{err}");
    }
}
