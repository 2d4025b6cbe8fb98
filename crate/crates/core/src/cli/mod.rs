//! `pball` command line: argument parsing, config resolution and exit codes.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors (bad flags,
//! unknown config fields, missing inputs, invalid settings), 2 when a run
//! fails after it has started.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

use crate::error::Error;
use crate::model::LayerSet;

#[derive(Debug, Parser)]
#[command(name = "pball", version, about = "Perturbation saliency maps and the games that score them")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config merged over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "PBALL_WORKERS")]
    pub workers: Option<usize>,
    /// Override any config field, e.g. `--set perturb.max_iters=300`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Weight file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// T=-2, lambda'=1e4.
    Localization,
    /// T=-10, lambda'=1e3.
    Pointing,
}

#[derive(Debug, Clone, Args)]
pub struct PerturbArgs {
    /// Start from these optimizer constants; other flags still apply.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_prime: Option<f64>,
    /// ReLU ordinals: `i..j`, `a,b,c` or `none`.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub warm_start: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SaliencyArgs {
    /// Gaussian blur applied to the map.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Multiply by the normalized input gradient before blurring.
    #[arg(long)]
    pub guided: bool,
}

#[derive(Debug, Clone, Args)]
pub struct Target {
    /// Dataset sample id.
    #[arg(long, conflicts_with = "image")]
    pub sample: Option<usize>,
    /// A PPM image instead of a dataset sample.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Class to explain; defaults to the sample's label or the top prediction.
    #[arg(long)]
    pub class: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset into --out.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        difficult_fraction: Option<f64>,
    },
    /// Train a network; writes model.pbw into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// mini_vgg or mini_vgg_detector.
        #[arg(long)]
        arch: Option<String>,
    },
    /// Find the perturbation of one image.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        perturb: PerturbArgs,
        #[command(flatten)]
        target: Target,
    },
    /// Saliency map of one image.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        perturb: PerturbArgs,
        #[command(flatten)]
        saliency: SaliencyArgs,
        #[command(flatten)]
        target: Target,
        /// Scale the raw map to [0,1] before guidance and blur.
        #[arg(long)]
        normalize: bool,
    },
    /// Weak localization error over threshold strategies.
    EvalLocalization {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        perturb: PerturbArgs,
        #[command(flatten)]
        saliency: SaliencyArgs,
        #[arg(long)]
        alpha_step: Option<f64>,
    },
    /// Insertion and deletion AUCs.
    EvalInsdel {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        perturb: PerturbArgs,
        #[command(flatten)]
        saliency: SaliencyArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        sigma_base: Option<f64>,
    },
    /// Pointing game accuracy.
    EvalPointing {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        perturb: PerturbArgs,
        #[command(flatten)]
        saliency: SaliencyArgs,
        #[arg(long)]
        tolerance: Option<usize>,
        /// primary, all_labels, or a class index.
        #[arg(long)]
        targets: Option<String>,
        /// Explain a 1.5x bilinear upscale.
        #[arg(long)]
        upscale: bool,
    },
    /// Layer-range by sigma sweep of one game.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        perturb: PerturbArgs,
        /// localization, deletion, insertion or pointing.
        #[arg(long)]
        game: Option<String>,
        /// Sigma grid: `start:stop:step` or `a,b,c`.
        #[arg(long)]
        sigma: Option<String>,
        /// Cells as `i:j` pairs, comma separated; default is every cell.
        #[arg(long)]
        cells: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        bar: Option<f64>,
        #[arg(long)]
        guided: bool,
    },
    /// Pointing accuracy as the final weight layers are re-initialized.
    SanityCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        perturb: PerturbArgs,
        #[arg(long)]
        sigma: Option<f64>,
        /// Comma-separated randomization depths.
        #[arg(long)]
        depths: Option<String>,
        #[arg(long)]
        tolerance: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Perturb { .. } => "perturb",
            Command::Saliency { .. } => "saliency",
            Command::EvalLocalization { .. } => "eval-localization",
            Command::EvalInsdel { .. } => "eval-insdel",
            Command::EvalPointing { .. } => "eval-pointing",
            Command::Ablate { .. } => "ablate",
            Command::SanityCheck { .. } => "sanity-check",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::Perturb { common, .. }
            | Command::Saliency { common, .. }
            | Command::EvalLocalization { common, .. }
            | Command::EvalInsdel { common, .. }
            | Command::EvalPointing { common, .. }
            | Command::Ablate { common, .. }
            | Command::SanityCheck { common, .. } => common,
        }
    }
}

/// Why a run stopped early; maps onto the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

pub(crate) fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

/// Parses `i..j`, `a,b,c` or `none`.
pub fn parse_layers(s: &str) -> Result<LayerSet, String> {
    let s = s.trim();
    if s == "none" || s.is_empty() {
        return Ok(LayerSet::empty());
    }
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad layer set {s:?}; use i..j, a,b,c or none"));
    if let Some((a, b)) = s.split_once("..") {
        return Ok(LayerSet::range(num(a)?, num(b)?));
    }
    Ok(LayerSet::Explicit(s.split(',').map(num).collect::<Result<_, _>>()?))
}

/// Collected `path=value` overrides; later entries win.
#[derive(Default)]
struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn put<T: serde::Serialize>(&mut self, path: &str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((path.to_string(), serde_json::to_string(&v).expect("scalar serializes")));
        }
    }

    fn flag(&mut self, path: &str, on: bool) {
        if on {
            self.put(path, Some(true));
        }
    }

    fn inputs(&mut self, i: &Inputs) {
        self.put("data.dir", i.data.as_ref());
        self.put("model.path", i.model.as_ref());
        self.put("data.limit", i.limit);
    }

    fn perturb(&mut self, p: &PerturbArgs) -> Result<(), Failure> {
        match p.preset {
            Some(Preset::Localization) => {
                self.put("perturb.target", Some(-2.0));
                self.put("perturb.lambda_prime", Some(1e4));
            }
            Some(Preset::Pointing) => {
                self.put("perturb.target", Some(-10.0));
                self.put("perturb.lambda_prime", Some(1e3));
            }
            None => {}
        }
        self.put("perturb.target", p.target);
        self.put("perturb.lambda", p.lambda);
        self.put("perturb.lambda_prime", p.lambda_prime);
        if let Some(l) = &p.layers {
            self.put("perturb.layer_set", Some(parse_layers(l).map_err(usage)?));
        }
        self.put("perturb.max_iters", p.max_iters);
        self.flag("perturb.warm_start", p.warm_start);
        Ok(())
    }

    fn saliency(&mut self, s: &SaliencyArgs) {
        self.put("saliency.sigma", s.sigma);
        self.flag("saliency.guided", s.guided);
    }
}

fn parse_cells(s: &str) -> Result<Vec<(usize, usize)>, Failure> {
    s.split(',')
        .map(|c| {
            let (i, j) = c.split_once(':').ok_or_else(|| usage(format!("bad cell {c:?}; use i:j")))?;
            let n = |t: &str| t.trim().parse::<usize>().map_err(|_| usage(format!("bad cell {c:?}")));
            Ok((n(i)?, n(j)?))
        })
        .collect()
}

fn parse_list(s: &str) -> Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| usage(format!("bad integer list {s:?}"))))
        .collect()
}

/// Turns command flags into config overrides, applied before `--set`.
fn overrides(cmd: &Command) -> Result<Vec<(String, String)>, Failure> {
    let mut o = Overrides::default();
    o.put("seed", cmd.common().seed);
    match cmd {
        Command::GenData {
            count,
            size,
            classes,
            difficult_fraction,
            ..
        } => {
            o.put("data.count", *count);
            o.put("data.size", *size);
            o.put("data.num_classes", *classes);
            o.put("data.difficult_fraction", *difficult_fraction);
        }
        Command::Train {
            inputs, epochs, lr, arch, ..
        } => {
            o.inputs(inputs);
            o.put("train.epochs", *epochs);
            o.put("train.lr", *lr);
            o.put("model.arch", arch.as_ref());
        }
        Command::Perturb { inputs, perturb, .. } => {
            o.inputs(inputs);
            o.perturb(perturb)?;
        }
        Command::Saliency {
            inputs,
            perturb,
            saliency,
            ..
        } => {
            o.inputs(inputs);
            o.perturb(perturb)?;
            o.saliency(saliency);
        }
        Command::EvalLocalization {
            inputs,
            perturb,
            saliency,
            alpha_step,
            ..
        } => {
            o.inputs(inputs);
            o.perturb(perturb)?;
            o.saliency(saliency);
            o.put("localization.alpha_step", *alpha_step);
        }
        Command::EvalInsdel {
            inputs,
            perturb,
            saliency,
            steps,
            sigma_base,
            ..
        } => {
            o.inputs(inputs);
            o.perturb(perturb)?;
            o.saliency(saliency);
            o.put("insdel.steps", *steps);
            o.put("insdel.sigma_base", *sigma_base);
        }
        Command::EvalPointing {
            inputs,
            perturb,
            saliency,
            tolerance,
            targets,
            upscale,
            ..
        } => {
            o.inputs(inputs);
            o.perturb(perturb)?;
            o.saliency(saliency);
            o.put("pointing.tolerance_px", *tolerance);
            if let Some(t) = targets {
                let v = match t.parse::<usize>() {
                    Ok(c) => serde_json::json!({ "class": c }),
                    Err(_) => serde_json::Value::String(t.clone()),
                };
                o.put("pointing.targets", Some(v));
            }
            if *upscale {
                o.put("pointing.resize", Some("bilinear1_5x"));
            }
        }
        Command::Ablate {
            inputs,
            perturb,
            game,
            sigma,
            cells,
            bar,
            guided,
            ..
        } => {
            o.inputs(inputs);
            o.perturb(perturb)?;
            o.put("ablate.game", game.as_ref());
            if let Some(s) = sigma {
                o.put("ablate.sigmas", Some(config::parse_sigmas(s).map_err(usage)?));
            }
            if let Some(c) = cells {
                o.put("ablate.cells", Some(parse_cells(c)?));
            }
            o.put("ablate.bar", *bar);
            o.flag("saliency.guided", *guided);
        }
        Command::SanityCheck {
            inputs,
            perturb,
            sigma,
            depths,
            tolerance,
            ..
        } => {
            o.inputs(inputs);
            o.perturb(perturb)?;
            o.put("saliency.sigma", *sigma);
            if let Some(d) = depths {
                o.put("sanity.depths", Some(parse_list(d)?));
            }
            o.put("pointing.tolerance_px", *tolerance);
        }
    }
    for s in &cmd.common().set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects PATH=VALUE, got {s:?}")))?;
        o.0.push((k.trim().to_string(), v.to_string()));
    }
    Ok(o.0)
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let started = Instant::now();
    match execute(&cli.command, started) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn execute(cmd: &Command, started: Instant) -> Result<(), Failure> {
    let common = cmd.common();
    let ov = overrides(cmd)?;
    let cfg = RunConfig::resolve(common.config.as_deref(), &ov).map_err(usage)?;
    if common.workers == Some(0) {
        return Err(usage("--workers must be >= 1"));
    }
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = common.workers {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| usage(format!("thread pool: {e}")))?
    };
    pool.install(|| commands::dispatch(cmd, &cfg, &common.out, started))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_set_syntax() {
        assert_eq!(parse_layers("0..2").unwrap(), LayerSet::range(0, 2));
        assert_eq!(parse_layers("none").unwrap(), LayerSet::empty());
        assert_eq!(parse_layers("1,3").unwrap(), LayerSet::Explicit([1, 3].into_iter().collect()));
        assert!(parse_layers("a..2").is_err());
    }

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::try_parse_from([
            "pball",
            "eval-pointing",
            "--preset",
            "pointing",
            "--lambda-prime",
            "0",
            "--targets",
            "2",
            "--set",
            "perturb.max_iters=7",
        ])
        .unwrap();
        let cfg = RunConfig::resolve(None, &overrides(&cli.command).unwrap()).unwrap();
        assert_eq!(cfg.perturb.target, -10.0);
        assert_eq!(cfg.perturb.lambda_prime, 0.0);
        assert_eq!(cfg.perturb.max_iters, 7);
        assert_eq!(cfg.pointing.targets, crate::eval::PointingTargets::Class(2));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["pball", "--help"]), 0);
        assert_eq!(run(["pball", "no-such-command"]), 1);
        assert_eq!(run(["pball", "train", "--set", "train.nope=1"]), 1);
    }
}
