//! Command-line front end: pretraining, warm-up, stream adaptation,
//! evaluation, registry inspection and oracle comparisons.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use expamoe::adaptation::{evaluate, DomainPolicy};
use expamoe::dbe_ts::token_split;
use expamoe::harness::config::ExperimentConfig;
use expamoe::harness::experiment::{
    load_checkpoint, pretrain_stage, run_experiment, warmup_stage, write_atomic, CHECKPOINT_FILE,
};
use expamoe::harness::stream::build_stream;
use expamoe::numerics::Matrix;
use expamoe::oracles;
use expamoe::sodd::{mahalanobis, DomainRegistry, DomainStats};
use expamoe::spectral::{extract_descriptor, ImageSample, SpectralConfig};
use expamoe::{Error, Result};

#[derive(Parser)]
#[command(name = "expamoe", version, about = "Continual test-time adaptation with expandable experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.overrides),
            None => {
                let mut all = self.overrides.clone();
                if let Ok(seed) = std::env::var(expamoe::harness::config::SEED_ENV) {
                    all.push(format!("seed={seed}"));
                }
                ExperimentConfig::from_toml_str("", &all)
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    /// Nearest registry domain.
    Sodd,
    /// Frozen backbone without experts.
    Backbone,
    /// Always branch 0.
    Source,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and freeze its backbone.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Warm up the experts and calibrate the source-domain registry.
    Warmup {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pretrained checkpoint; pretrains from scratch when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the configured method over the stream and write artifacts.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Starting checkpoint; missing stages run first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Artifact directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every domain of the stream without updates.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "sodd")]
        policy: Policy,
    },
    /// Print registry means, counts and threshold margins.
    InspectDomains {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Print every mean entry instead of the first eight.
        #[arg(long)]
        full: bool,
    },
    /// Compare production paths against brute-force references.
    Oracle {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::UnknownCorruption(_) => 2,
                Error::Checkpoint(_) | Error::Io(_) => 3,
                _ => 1,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { cfg, out } => {
            let cfg = cfg.load()?;
            let (model, report) = pretrain_stage(&cfg)?;
            write_atomic(&out, &model.to_bytes(None))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("wrote {}", out.display());
        }
        Command::Warmup { cfg, checkpoint, out } => {
            let cfg = cfg.load()?;
            let mut model = match checkpoint {
                Some(p) => load_checkpoint(&p)?.0,
                None => {
                    let (m, report) = pretrain_stage(&cfg)?;
                    println!("pretrain validation accuracy {:.4}", report.validation_accuracy);
                    m
                }
            };
            if !model.backbone_frozen {
                return Err(Error::Checkpoint("checkpoint is not pretrained".into()));
            }
            let (registry, report) = warmup_stage(&cfg, &mut model)?;
            write_atomic(&out, &model.to_bytes(Some(&registry)))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("wrote {}", out.display());
        }
        Command::Adapt { cfg, checkpoint, out } => {
            let mut cfg = cfg.load()?;
            if checkpoint.is_some() {
                cfg.output.checkpoint_in = checkpoint;
            }
            if out.is_some() {
                cfg.output.dir = out;
            }
            let report = run_experiment(&cfg)?;
            let m = &report.metrics;
            println!("method {}  mean error {:.4}  spawned {}  purity {:.3}", m.method, m.mean_error, m.spawned, m.purity);
            print!("{}", m.to_csv());
            if let Some(d) = &cfg.output.dir {
                println!("artifacts in {} (checkpoint {})", d.display(), CHECKPOINT_FILE);
            }
        }
        Command::Eval { cfg, checkpoint, policy } => {
            let cfg = cfg.load()?;
            eval(&cfg, &checkpoint, policy)?;
        }
        Command::InspectDomains { checkpoint, full } => inspect(&checkpoint, full)?,
        Command::Oracle { cases, seed } => oracle(cases, seed)?,
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, checkpoint: &Path, policy: Policy) -> Result<()> {
    let (model, registry) = load_checkpoint(checkpoint)?;
    let mode = cfg.adapt.ablation.branch_mode()?;
    let policy = match policy {
        Policy::Sodd => DomainPolicy::Sodd,
        Policy::Backbone => DomainPolicy::Backbone,
        Policy::Source => DomainPolicy::Fixed(0),
    };
    let stream = build_stream(&cfg.stream)?;
    println!("domain,error,mean_entropy");
    let mut total = 0.0;
    for (d, spec) in cfg.stream.domains.iter().enumerate() {
        let images: Vec<ImageSample> = stream
            .iter()
            .filter(|b| b.round == 0 && b.domain == d)
            .flat_map(|b| b.images.iter().cloned())
            .collect();
        let r = evaluate(&model, registry.as_ref(), &cfg.spectral, &images, policy, mode, cfg.adapt.batch_size)?;
        total += r.error_rate;
        println!("{},{:.4},{:.4}", spec.label(), r.error_rate, r.mean_entropy);
    }
    println!("mean,{:.4},", total / cfg.stream.domains.len() as f64);
    Ok(())
}

fn inspect(checkpoint: &Path, full: bool) -> Result<()> {
    let (_, registry) = load_checkpoint(checkpoint)?;
    let reg = registry.ok_or_else(|| Error::Checkpoint("checkpoint has no registry".into()))?;
    println!(
        "domains {}  dim {}  tau {:.4}  shrinkage {}  init_variance {:.6}",
        reg.len(),
        reg.dim,
        reg.tau,
        reg.shrinkage,
        reg.init_variance
    );
    for (i, d) in reg.domains().iter().enumerate() {
        let var = (0..d.dim()).map(|k| d.covariance[(k, k)]).sum::<f64>() / d.dim() as f64;
        let mut nearest: Option<(usize, f64)> = None;
        for (j, other) in reg.domains().iter().enumerate() {
            if j != i {
                let m = mahalanobis(other, &d.mean, reg.shrinkage)?;
                if nearest.is_none_or(|(_, b)| m < b) {
                    nearest = Some((j, m));
                }
            }
        }
        let margin = match nearest {
            Some((j, m)) => format!("nearest {j} at {m:.3}, margin {:+.3}", m - reg.tau),
            None => "no other domain".to_string(),
        };
        println!("domain {i}: count {:.0}  mean variance {var:.6}  {margin}", d.count);
        let shown = if full { d.mean.len() } else { d.mean.len().min(8) };
        let entries: Vec<String> = d.mean[..shown].iter().map(|v| format!("{v:.4}")).collect();
        let more = if shown < d.mean.len() { " ..." } else { "" };
        println!("  mean [{}{more}]", entries.join(", "));
    }
    Ok(())
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let mut s = a.matmul_transposed(&a).expect("square");
    for i in 0..d {
        s[(i, i)] += 0.1;
    }
    s
}

fn oracle(cases: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let c = if rng.gen_bool(0.5) { 1 } else { 3 };
        let img = ImageSample::new(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect())?;
        let radius = rng.gen_range(0..=(h.min(w) - 1) / 2);
        let cfg = SpectralConfig {
            crop_radius: radius,
            log_compress: false,
        };
        let fast = extract_descriptor(&img, &cfg)?;
        let slow = oracles::direct_descriptor(&img, radius);
        for (a, b) in fast.values.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    println!("descriptor vs direct DFT: {cases} images, max abs diff {worst:.3e}");

    let mut worst = 0.0f64;
    for _ in 0..cases {
        let d = rng.gen_range(1..=8);
        let eps = rng.gen_range(0.0..0.5);
        let stats = DomainStats {
            mean: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            covariance: random_spd(d, &mut rng),
            count: 1.0,
        };
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let fast = mahalanobis(&stats, &z, eps)?;
        let slow = oracles::mahalanobis_explicit_inverse(&stats.mean, &stats.covariance, &z, eps);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
    }
    println!("Mahalanobis vs explicit inverse: {cases} cases, max rel diff {worst:.3e}");

    let mut mismatches = 0;
    for _ in 0..cases {
        let d = rng.gen_range(1..=6);
        let k = rng.gen_range(2..=5);
        let diag: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..3.0)).collect();
        let mut reg = DomainRegistry::new(d, 0.0, f64::INFINITY, 1.0);
        for _ in 0..k {
            let mut perm = diag.clone();
            for i in (1..d).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            reg.push_domain(DomainStats {
                mean: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                covariance: Matrix::from_fn(d, d, |i, j| if i == j { perm[i] } else { 0.0 }),
                count: 1.0,
            })?;
        }
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let post = reg.posterior(&z)?;
        let dist = reg.distances(&z)?;
        let argmax = (0..k).fold(0, |b, i| if post[i] > post[b] { i } else { b });
        let argmin = (0..k).fold(0, |b, i| if dist[i] < dist[b] { i } else { b });
        mismatches += usize::from(argmax != argmin);
    }
    println!("posterior argmax vs distance argmin (equal determinants): {cases} registries, {mismatches} mismatches");

    let mut mismatches = 0;
    for _ in 0..cases {
        let n = rng.gen_range(2..=20);
        let dim = rng.gen_range(1..=8);
        let tokens = Matrix::from_fn(n + 1, dim, |_, _| rng.gen_range(-1.0..1.0));
        let k = rng.gen_range(100.0 / n as f64..=50.0);
        let split = token_split(&tokens, k)?;
        let (task, domain) = oracles::token_split_by_sort(&tokens, split.task_indices.len());
        mismatches += usize::from(
            sorted(task) != sorted(split.task_indices.clone()) || sorted(domain) != sorted(split.domain_indices.clone()),
        );
    }
    println!("token split vs full sort: {cases} cases, {mismatches} mismatches");
    Ok(())
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}
