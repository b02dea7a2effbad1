//! Command-line driver. Exit codes: 0 success, 1 usage error, 2 data error.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::adapter::{CacheModel, DEFAULT_BETA};
use crate::databank::write_bank;
use crate::ensemble::EnsembleMode;
use crate::error::{Error, Result};
use crate::fixtures::{complementary_views, gaussian_clusters, ClusterSpec};
use crate::pipeline::Dataset;
use crate::trainer::{LossTarget, TrainConfig};

/// Sharpness values swept by `sweep --beta-grid`.
pub const BETA_GRID: [f64; 6] = [0.4, 0.5, 0.6, 0.7, 0.8, 1.0];
/// Synthetic counts swept by `sweep --kprime-grid`.
pub const KPRIME_GRID: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Filter candidates and write the merged support banks.
    Expand,
    /// Build an untrained cache checkpoint.
    Build,
    /// Build, train and write the checkpoint plus a loss trace.
    Train,
    /// Evaluate a checkpoint (or a fresh cache) on the query banks.
    Eval,
    /// One row per sharpness and/or synthetic-count grid point.
    Sweep,
    /// One row per ensemble mode.
    Ablate,
    /// Write a deterministic synthetic dataset.
    SynthFixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    Complementary,
    Clusters,
}

#[derive(Debug, Clone, Parser)]
#[command(
    name = "mkcache",
    version,
    about = "Dual-key cache adapter for few-shot classification"
)]
pub struct RunSpec {
    pub command: Command,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Real samples per class (defaults to the manifest's `shots`).
    #[arg(long)]
    pub shots: Option<usize>,
    /// Synthetic samples per class (defaults to the manifest's `synthetic_k`, else 0).
    #[arg(long = "synthetic-k")]
    pub synthetic_k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value = "adaptive_zs_base", value_parser = parse_mode)]
    pub mode: EnsembleMode,
    /// Overrides the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long = "batch-size", default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stop gradients at the adaptive ensemble weights.
    #[arg(long = "detach-weights")]
    pub detach_weights: bool,
    /// Train on the per-branch losses instead of the fused output.
    #[arg(long = "loss-branch")]
    pub loss_branch: bool,
    #[arg(long = "beta-grid")]
    pub beta_grid: bool,
    #[arg(long = "kprime-grid")]
    pub kprime_grid: bool,
    /// Checkpoint evaluated by `eval`; a fresh cache is built when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "complementary")]
    pub kind: FixtureKind,
}

fn parse_mode(s: &str) -> std::result::Result<EnsembleMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` and runs the command, writing reports to `stdout`.
/// Returns the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let spec = match RunSpec::try_parse_from(args) {
        Ok(s) => s,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(rendered.as_bytes())
            } else {
                stderr.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match run(&spec) {
        Ok(report) => {
            let _ = stdout.write_all(report.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

struct Context {
    data: Dataset,
    shots: usize,
    k_prime: usize,
    cfg: TrainConfig,
}

impl RunSpec {
    fn context(&self) -> Result<Context> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("--manifest is required".into()))?;
        let data = Dataset::load(path)?;
        let shots = self.shots.unwrap_or(data.manifest.shots);
        let k_prime = self.synthetic_k.or(data.manifest.synthetic_k).unwrap_or(0);
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            seed: self.seed.unwrap_or(data.manifest.seed),
            beta_sharpness: self.beta,
            mode: self.mode,
            detach_weights: self.detach_weights,
            loss_target: if self.loss_branch {
                LossTarget::Branches
            } else {
                LossTarget::Fused
            },
            ..TrainConfig::default()
        };
        cfg.validate()?;
        if self.detach_weights && self.loss_branch {
            return Err(Error::Config(
                "--detach-weights has no effect with --loss-branch".into(),
            ));
        }
        Ok(Context {
            data,
            shots,
            k_prime,
            cfg,
        })
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = self
            .out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required for this command".into()))?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(dir)
    }
}

impl Context {
    /// Builds a cache and trains it for `cfg.epochs` epochs (none when 0).
    fn fit(
        &self,
        shots: usize,
        k_prime: usize,
        cfg: &TrainConfig,
    ) -> Result<(CacheModel, Vec<f64>)> {
        let support = self.data.support(shots, k_prime, cfg.seed)?;
        let cache = support.build_cache(cfg.beta_sharpness)?;
        if cfg.epochs == 0 {
            return Ok((cache, Vec::new()));
        }
        let outcome = support.train(&cache, &self.data.head, cfg)?;
        Ok((outcome.cache, outcome.loss_trace))
    }
}

/// Runs one command and returns what it prints on standard output.
pub fn run(spec: &RunSpec) -> Result<String> {
    let mut report = String::new();
    match spec.command {
        Command::SynthFixture => {
            let seed = spec.seed.unwrap_or(0);
            let data = match spec.kind {
                FixtureKind::Complementary => complementary_views(seed),
                FixtureKind::Clusters => gaussian_clusters(ClusterSpec {
                    seed,
                    ..ClusterSpec::default()
                }),
            };
            let path = data.write(spec.out_dir()?)?;
            writeln!(report, "{}", path.display()).unwrap();
        }
        Command::Expand => {
            let ctx = spec.context()?;
            let dir = spec.out_dir()?;
            let support = ctx.data.support(ctx.shots, ctx.k_prime, ctx.cfg.seed)?;
            write_bank(dir.join("support_clip.mkeb"), &support.clip)?;
            write_bank(dir.join("support_dino.mkeb"), &support.dino)?;
            writeln!(report, "{}\t{}", support.clip.rows(), ctx.data.classes()).unwrap();
        }
        Command::Build => {
            let ctx = spec.context()?;
            let dir = spec.out_dir()?;
            let cfg = TrainConfig {
                epochs: 0,
                ..ctx.cfg.clone()
            };
            let (cache, _) = ctx.fit(ctx.shots, ctx.k_prime, &cfg)?;
            cache.save(dir.join("cache.mkcp"))?;
        }
        Command::Train => {
            let ctx = spec.context()?;
            let dir = spec.out_dir()?;
            let (cache, trace) = ctx.fit(ctx.shots, ctx.k_prime, &ctx.cfg)?;
            cache.save(dir.join("cache.mkcp"))?;
            let mut text = String::new();
            for (epoch, loss) in trace.iter().enumerate() {
                writeln!(text, "{}\t{loss:.9}", epoch + 1).unwrap();
            }
            let path = dir.join("loss.tsv");
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Command::Eval => {
            let ctx = spec.context()?;
            let cache = match &spec.checkpoint {
                Some(path) => CacheModel::load(path)?,
                None => {
                    let cfg = TrainConfig {
                        epochs: 0,
                        ..ctx.cfg.clone()
                    };
                    ctx.fit(ctx.shots, ctx.k_prime, &cfg)?.0
                }
            };
            writeln!(report, "{}", ctx.data.evaluate(&cache, ctx.cfg.mode)?).unwrap();
        }
        Command::Sweep => {
            let ctx = spec.context()?;
            let both = !spec.beta_grid && !spec.kprime_grid;
            if spec.beta_grid || both {
                for beta in BETA_GRID {
                    let cfg = TrainConfig {
                        beta_sharpness: beta,
                        ..ctx.cfg.clone()
                    };
                    let (cache, _) = ctx.fit(ctx.shots, ctx.k_prime, &cfg)?;
                    let r = ctx.data.evaluate(&cache, cfg.mode)?;
                    writeln!(report, "beta\t{beta}\t{r}").unwrap();
                }
            }
            if spec.kprime_grid || both {
                for k_prime in KPRIME_GRID {
                    let (cache, _) = ctx.fit(ctx.shots, k_prime, &ctx.cfg)?;
                    let r = ctx.data.evaluate(&cache, ctx.cfg.mode)?;
                    writeln!(report, "k_prime\t{k_prime}\t{r}").unwrap();
                }
            }
        }
        Command::Ablate => {
            let ctx = spec.context()?;
            for mode in EnsembleMode::ALL {
                let cfg = TrainConfig {
                    mode,
                    ..ctx.cfg.clone()
                };
                let (cache, _) = ctx.fit(ctx.shots, ctx.k_prime, &cfg)?;
                let r = ctx.data.evaluate(&cache, mode)?;
                writeln!(report, "{mode}\t{r}").unwrap();
            }
        }
    }
    if let (Some(dir), Command::Eval | Command::Sweep | Command::Ablate) = (&spec.out, spec.command)
    {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = match spec.command {
            Command::Eval => "eval.tsv",
            Command::Sweep => "sweep.tsv",
            _ => "ablate.tsv",
        };
        let path = dir.join(name);
        fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
