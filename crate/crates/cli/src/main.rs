use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use styleae::editkit::{minimal_edit, project, EditRequest, ProjectConfig};
use styleae::envelope::{Envelope, Record};
use styleae::metrics::evaluate;
use styleae::pipeline::{
    assert_disjoint, attribute_index, export_gallery, load_dataset, load_probe, run_pipeline, save_dataset,
    RunConfig,
};
use styleae::probes::train_probe;
use styleae::styleae::{train, Plugin, PLUGIN_MAGIC};
use styleae::syngen::{Generator, ATTRIBUTE_NAMES};
use styleae::{Error, ImageGrid};

/// Attribute editing with an autoencoder plugin over a frozen generator.
#[derive(Parser)]
#[command(name = "styleae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration: flat JSON or `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `generator_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the probe, training and evaluation datasets into a directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train and freeze the probe on a probe dataset.
    TrainProbe {
        #[command(flatten)]
        common: Common,
        /// Probe dataset; defaults to `data/probe.synd` in the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the plugin on a training dataset.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Extra `key=value` config overrides.
        overrides: Vec<String>,
    },
    /// Minimal-modification edit of one style vector or image.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        /// Attribute name or index.
        #[arg(long)]
        attr: String,
        #[arg(long)]
        target: u8,
        #[arg(long, default_value_t = EditRequest::DEFAULT_THRESHOLD)]
        conf: f64,
        #[arg(long, default_value_t = EditRequest::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = EditRequest::DEFAULT_BOUND)]
        bound: f64,
        /// JSON array holding a style vector, or a PNG/PGM image to project first.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_image: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
    /// Recover a style vector for an image.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long)]
        out_image: Option<PathBuf>,
    },
    /// Evaluate a plugin and probe on an evaluation dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write before/after image strips.
    Gallery {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated attribute names or indices; empty for none.
        #[arg(long, value_delimiter = ',')]
        attrs: Option<Vec<String>>,
        #[arg(long, default_value_t = 6)]
        samples: usize,
    },
    /// Every stage end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Stage(Error),
    Gate(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        classify(e)
    }
}

fn classify(e: Error) -> Failure {
    match e {
        Error::ProbeBelowFloor { .. } => Failure::Gate(e),
        Error::Stage { ref source, .. } if matches!(**source, Error::ProbeBelowFloor { .. }) => Failure::Gate(e),
        Error::Config(_) | Error::InvalidArgument(_) | Error::IndexOutOfRange { .. } => Failure::Usage(e.to_string()),
        e => Failure::Stage(e),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut config = match &common.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            if text.trim_start().starts_with('{') {
                RunConfig::from_json(&text)?
            } else {
                let pairs: Vec<&str> = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .collect();
                RunConfig::default().apply_overrides(&pairs)?
            }
        }
    };
    if let Some(seed) = common.seed {
        config.generator_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn log(start: Instant) -> impl FnMut(&str) {
    move |msg| eprintln!("[{:>8.1}s] {msg}", start.elapsed().as_secs_f64())
}

fn generator(config: &RunConfig) -> CliResult<Generator> {
    Ok(Generator::new(config.generator_spec()?)?)
}

/// Loads a plugin and checks it was trained against `gen`.
fn load_plugin_for(path: &Path, gen: &Generator) -> CliResult<Plugin> {
    let env = Envelope::read_from(path, PLUGIN_MAGIC)?;
    if let Some(hash) = env.trailer.get("generator_hash").and_then(|v| v.as_str()) {
        if hash != gen.weights_hash() {
            return Err(Failure::Usage(format!(
                "{} was trained against a different generator; check generator_seed",
                path.display()
            )));
        }
    }
    Ok(Plugin::from_envelope(&env)?)
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_vec_pretty(value).map_err(Error::from)?).map_err(Error::from)?;
    Ok(())
}

fn load_records(path: &Path, gen: &Generator) -> CliResult<Vec<Record>> {
    let (dim, attrs, records) = load_dataset(path)?;
    if dim != gen.style_dim() || attrs != gen.attrs() {
        return Err(Failure::Usage(format!(
            "{} holds D={dim}, K={attrs}; the generator expects D={}, K={}",
            path.display(),
            gen.style_dim(),
            gen.attrs()
        )));
    }
    Ok(records)
}

fn run(cli: Cli) -> CliResult {
    let start = Instant::now();
    let mut log = log(start);
    match cli.command {
        Command::GenData { common } => {
            let config = load_config(&common)?;
            let gen = generator(&config)?;
            let probe = gen.make_dataset(config.probe_train_samples + config.probe_heldout_samples, config.probe_seed)?;
            let train_set = gen.make_dataset(config.ae_train_samples, config.ae_seed)?;
            let eval_set = gen.make_dataset(config.eval_samples, config.eval_seed)?;
            assert_disjoint(&[("probe", &probe), ("ae-train", &train_set), ("eval", &eval_set)])?;
            let dir = common.out.join("data");
            fs::create_dir_all(&dir).map_err(Error::from)?;
            for (name, set) in [("probe", &probe), ("train", &train_set), ("eval", &eval_set)] {
                let path = dir.join(format!("{name}.synd"));
                save_dataset(&path, gen.style_dim(), gen.attrs(), set)?;
                log(&format!("wrote {} ({} records)", path.display(), set.len()));
            }
        }
        Command::TrainProbe { common, data } => {
            let config = load_config(&common)?;
            let gen = generator(&config)?;
            let data = data.unwrap_or_else(|| common.out.join("data/probe.synd"));
            let records = load_records(&data, &gen)?;
            if records.len() <= config.probe_heldout_samples {
                return Err(Failure::Usage(format!(
                    "probe dataset has {} records but probe_heldout_samples is {}",
                    records.len(),
                    config.probe_heldout_samples
                )));
            }
            let (train_part, heldout) = records.split_at(records.len() - config.probe_heldout_samples);
            let names: Vec<String> = ATTRIBUTE_NAMES.iter().map(|s| (*s).to_owned()).collect();
            let probe_config = config.probe_config();
            let report = train_probe(&probe_config, &gen, train_part, heldout, &names, &mut |e, l| {
                log(&format!("epoch {e} loss {l:.6}"))
            })?;
            let path = if common.out.extension().is_some() {
                common.out.clone()
            } else {
                common.out.join("probe.prb")
            };
            ensure_parent(&path)?;
            report.to_envelope(&probe_config).write_to(&path)?;
            log(&format!("held-out accuracy {:?}; wrote {}", report.heldout_accuracy, path.display()));
        }
        Command::TrainAe {
            common,
            data,
            overrides,
        } => {
            let config = load_config(&common)?.apply_overrides(&overrides)?;
            config.validate()?;
            let gen = generator(&config)?;
            let records = load_records(&data, &gen)?;
            let report = train(&config.train_config(), &gen, &records, &mut |s| {
                log(&format!(
                    "epoch {} lambda {:.3} loss {:.6} image {:.6} attribute {:.6}",
                    s.epoch, s.lambda, s.total, s.image, s.attribute
                ))
            })?;
            let path = if common.out.extension().is_some() {
                common.out.clone()
            } else {
                common.out.join("plugin.sae")
            };
            ensure_parent(&path)?;
            report.to_envelope().write_to(&path)?;
            log(&format!("wrote {}", path.display()));
        }
        Command::Edit {
            common,
            checkpoint,
            probe,
            attr,
            target,
            conf,
            step,
            bound,
            input,
            out_image,
            out_json,
        } => {
            let config = load_config(&common)?;
            let gen = generator(&config)?;
            let plugin = load_plugin_for(&checkpoint, &gen)?;
            let probe = load_probe(&probe)?;
            probe.verify()?;
            let request = EditRequest {
                attr: attribute_index(&attr)?,
                target,
                threshold: conf,
                step,
                bound,
            };
            let w = match input.extension().and_then(|e| e.to_str()) {
                Some("png" | "pgm" | "ppm" | "pnm") => {
                    let image = ImageGrid::load(&input)?;
                    project(&gen, &image, &ProjectConfig::default())?.w
                }
                _ => {
                    let text = fs::read_to_string(&input).map_err(Error::from)?;
                    serde_json::from_str::<Vec<f64>>(&text)
                        .map_err(|e| Failure::Usage(format!("{}: expected a JSON array: {e}", input.display())))?
                }
            };
            let result = minimal_edit(&plugin, &gen, &probe, &w, &request)?;
            log(&format!(
                "success {} after {} steps, c_k {:.2}",
                result.success, result.steps, result.final_ck
            ));
            if let Some(path) = out_image {
                ensure_parent(&path)?;
                gen.synthesize(&result.w_hat)?.save(&path)?;
            }
            let json = out_json.unwrap_or_else(|| common.out.clone());
            write_json(&json, &result)?;
        }
        Command::Project {
            common,
            input,
            iters,
            lr,
            out_image,
        } => {
            let config = load_config(&common)?;
            let gen = generator(&config)?;
            let image = ImageGrid::load(&input)?;
            let cfg = ProjectConfig {
                iters,
                lr,
                ..ProjectConfig::default()
            };
            let result = project(&gen, &image, &cfg)?;
            let rendered = gen.synthesize(&result.w)?;
            log(&format!(
                "loss {:.3e}, psnr {:.2} dB",
                result.loss,
                styleae::metrics::psnr(&image, &rendered, 1.0)?
            ));
            if let Some(path) = out_image {
                ensure_parent(&path)?;
                rendered.save(&path)?;
            }
            write_json(&common.out, &result)?;
        }
        Command::Eval {
            common,
            checkpoint,
            probe,
            data,
        } => {
            let config = load_config(&common)?;
            let gen = generator(&config)?;
            let plugin = load_plugin_for(&checkpoint, &gen)?;
            let probe = load_probe(&probe)?;
            let records = load_records(&data, &gen)?;
            let report = evaluate(&plugin, &probe, &gen, &records, &config.eval_config())?;
            fs::create_dir_all(&common.out).map_err(Error::from)?;
            fs::write(common.out.join("report.json"), report.to_json()?).map_err(Error::from)?;
            fs::write(common.out.join("report.csv"), report.to_csv()).map_err(Error::from)?;
            print!("{}", report.to_csv());
        }
        Command::Gallery {
            common,
            checkpoint,
            probe,
            data,
            attrs,
            samples,
        } => {
            let config = load_config(&common)?;
            let gen = generator(&config)?;
            let plugin = load_plugin_for(&checkpoint, &gen)?;
            let probe = load_probe(&probe)?;
            probe.verify()?;
            let names = attrs.unwrap_or_else(|| config.gallery_attrs.clone());
            let attrs = names
                .iter()
                .filter(|n| !n.is_empty())
                .map(|n| attribute_index(n))
                .collect::<styleae::Result<Vec<_>>>()?;
            let records = load_records(&data, &gen)?;
            let chosen = &records[..samples.min(records.len())];
            let strips = export_gallery(&plugin, &probe, &gen, chosen, &attrs, &config.edit_request(0, 1))?;
            fs::create_dir_all(&common.out).map_err(Error::from)?;
            for (i, strip) in strips.iter().enumerate() {
                strip.save(&common.out.join(format!("strip_{i:03}.png")))?;
            }
            log(&format!("wrote {} strips to {}", strips.len(), common.out.display()));
        }
        Command::Pipeline { common } => {
            let config = load_config(&common)?;
            let out = run_pipeline(&config, &common.out, &mut log)?;
            print!("{}", out.report.to_csv());
            log(&format!("manifest lists {} files", out.manifest.files.len()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Gate(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
