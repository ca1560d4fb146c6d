//! Pipeline driver. Every subcommand is deterministic given its config and
//! seed, echoes its resolved parameters next to its outputs, and writes
//! output files atomically.
//!
//! Exit codes: 0 success, 1 I/O or archive errors, 2 configuration errors,
//! 3 numeric failures, 4 verification failure.

use clap::{Args, Parser, Subcommand};
use emtal_core::archive::{read_archive, write_archive, Meta, TensorMap};
use emtal_core::config::{preset, RunConfig};
use emtal_core::error::{Error, Result};
use emtal_core::linalg::{Matrix, Rng};
use emtal_core::model::{
    bank_tensors, meta_usize, metrics_to_csv, train, ClusterFeatures, PartitionStrategy, Phase,
    ToyNet,
};
use emtal_core::taskdata::load_dataset;
use emtal_core::verify::{run_verify, VerifyScope};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "emtal", version, about = "Mixture-of-low-rank-experts multi-task pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense network on the merged tasks and write its checkpoint.
    Pretrain(PretrainArgs),
    /// Decompose a dense checkpoint into balanced experts.
    Moefy(MoefyArgs),
    /// Fine-tune a decomposed checkpoint with QR and router fading.
    Train(TrainArgs),
    /// Fold a fully faded checkpoint back into a dense network.
    Reparam(ReparamArgs),
    /// Run the built-in invariant suites.
    Verify(VerifyArgs),
    /// Spectral comparison of balanced vs contiguous expert partitions.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Config file path, or a preset name (emtal-1, emtal-2, emtal-4).
    #[arg(long)]
    config: Option<String>,
    /// Output checkpoint archive.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path (defaults to <out>.metrics.csv).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MoefyArgs {
    /// Dense checkpoint archive.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of experts per layer.
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// LoRA rank of the fresh adapter factors.
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 5.0)]
    tau: f64,
    /// balanced | contiguous
    #[arg(long, default_value = "balanced")]
    strategy: String,
    /// stacked | up-only: which rows feed the clustering distance.
    #[arg(long = "cluster-features", default_value = "stacked")]
    cluster_features: String,
    #[arg(long, default_value_t = 25)]
    max_iters: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<String>,
    /// Decomposed checkpoint archive from `moefy`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the fading window start epoch.
    #[arg(long = "fade-start")]
    fade_start: Option<usize>,
    /// Override the fading window end epoch.
    #[arg(long = "fade-end")]
    fade_end: Option<usize>,
}

#[derive(Args)]
struct ReparamArgs {
    /// Trained checkpoint archive; its router fade must have reached 0.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Equivalence report path (defaults to <out>.report.json).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// all | gradcheck | equivalence | ema
    #[arg(long, default_value = "all")]
    scope: String,
    /// Negative-control hook: corrupt the analytic gradients on purpose.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dense checkpoint archive.
    #[arg(long)]
    input: PathBuf,
    /// Number of experts per layer.
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Comma-separated list of spectral ranks to report.
    #[arg(long, default_value = "1,2,4")]
    ks: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap for per-expert SVDs (default: EMTAL_THREADS or 1).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Dim(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => pretrain(args),
        Command::Moefy(args) => moefy(args),
        Command::Train(args) => do_train(args),
        Command::Reparam(args) => reparam(args),
        Command::Verify(args) => verify(args),
        Command::Analyze(args) => analyze(args),
    }
}

/// Resolves `--config` as a preset name or a JSON file path, then applies
/// command-line overrides.
fn resolve_config(spec: &Option<String>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match spec {
        None => RunConfig::default(),
        Some(s) => {
            if Path::new(s).exists() {
                let text = std::fs::read_to_string(s)?;
                RunConfig::from_json(&text)?
            } else if let Some(preset_cfg) = preset(s) {
                preset_cfg
            } else {
                return Err(Error::Config(format!(
                    "config `{s}` is neither a file nor a preset (emtal-1, emtal-2, emtal-4)"
                )));
            }
        }
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn echo_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    let path = out.with_extension("config.json");
    write_text_atomic(&path, &cfg.to_json())
}

fn metrics_path(out: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| out.with_extension("metrics.csv"))
}

fn run_meta(cfg: &RunConfig) -> (serde_json::Value, serde_json::Value) {
    (
        serde_json::json!(cfg.class_counts()),
        serde_json::json!(cfg.seed),
    )
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, args.seed)?;
    // Pretraining stands in for generic pretraining: plain CE, no QR term.
    let mut pre_cfg = cfg.clone();
    if pre_cfg.qr.enabled_after_epoch.is_none() {
        pre_cfg.qr.enabled_after_epoch = Some(pre_cfg.optimizer.epochs);
    }
    let (train_set, _, space) = load_dataset(&pre_cfg.data, pre_cfg.model.d_in, pre_cfg.seed)?;
    let mut rng = Rng::substream(pre_cfg.seed, "init");
    let mut net: ToyNet<f32> = ToyNet::init_dense(&pre_cfg.model, space.n_class(), &mut rng);
    let report = train(&mut net, &train_set, &space, &pre_cfg)?;

    let tensors = net.to_tensors();
    let mut meta = net.meta();
    let (classes, seed) = run_meta(&pre_cfg);
    meta.insert("class_counts".into(), classes);
    meta.insert("seed".into(), seed);
    write_archive(&args.out, &tensors, &meta)?;
    write_text_atomic(
        &metrics_path(&args.out, &args.metrics),
        &metrics_to_csv(&report.metrics, space.n_tasks()),
    )?;
    echo_config(&args.out, &pre_cfg)?;
    println!(
        "pretrained {} blocks for {} epochs; final mean train accuracy {:.4}",
        net.n_blocks(),
        pre_cfg.optimizer.epochs,
        report.metrics.last().map_or(0.0, |m| m.mean_acc)
    );
    Ok(())
}

fn load_net(path: &Path) -> Result<(ToyNet<f32>, TensorMap, Meta)> {
    let (tensors, meta) = read_archive(path)?;
    let net = ToyNet::from_tensors(&tensors, &meta)?;
    Ok((net, tensors, meta))
}

fn moefy(args: MoefyArgs) -> Result<()> {
    let (net, _, in_meta) = load_net(&args.input)?;
    if net.phase() != Phase::Dense {
        return Err(Error::Config(
            "moefy expects a dense checkpoint; this archive is already decomposed".into(),
        ));
    }
    let strategy = PartitionStrategy::parse(&args.strategy)
        .ok_or_else(|| Error::Config(format!("unknown strategy `{}`", args.strategy)))?;
    let features = ClusterFeatures::parse(&args.cluster_features).ok_or_else(|| {
        Error::Config(format!(
            "unknown cluster-features `{}`",
            args.cluster_features
        ))
    })?;
    let seed = args
        .seed
        .or_else(|| in_meta.get("seed").and_then(|v| v.as_u64()))
        .unwrap_or(42);
    let mole = net.moefy(
        args.k,
        args.rank,
        args.tau,
        strategy,
        features,
        args.max_iters,
        seed,
    )?;
    let tensors = mole.to_tensors();
    let mut meta = mole.meta();
    for key in ["class_counts", "seed"] {
        if let Some(v) = in_meta.get(key) {
            meta.insert(key.into(), v.clone());
        }
    }
    write_archive(&args.out, &tensors, &meta)?;
    let resolved = serde_json::json!({
        "k": args.k,
        "rank": args.rank,
        "tau": args.tau,
        "strategy": args.strategy,
        "cluster_features": args.cluster_features,
        "max_iters": args.max_iters,
        "seed": seed,
    });
    write_text_atomic(
        &args.out.with_extension("config.json"),
        &serde_json::to_string_pretty(&resolved).expect("serializes"),
    )?;
    println!(
        "decomposed {} blocks into {} experts of {} channels each",
        mole.n_blocks(),
        args.k,
        mole.h() / args.k
    );
    Ok(())
}

fn do_train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.config, args.seed)?;
    if args.fade_start.is_some() || args.fade_end.is_some() {
        let mut fading = cfg.fading();
        if let Some(start) = args.fade_start {
            fading.start_epoch = start;
        }
        if let Some(end) = args.fade_end {
            fading.end_epoch = end;
        }
        cfg.fading = Some(fading);
    }
    cfg.validate()?;
    let (mut net, _, meta) = load_net(&args.input)?;
    if net.phase() != Phase::Mole {
        return Err(Error::Config(
            "train expects a decomposed checkpoint; run `moefy` first".into(),
        ));
    }
    let archive_k = meta_usize(&meta, "K")?;
    let archive_rank = meta_usize(&meta, "rank")?;
    if archive_k != cfg.k || archive_rank != cfg.rank {
        return Err(Error::Config(format!(
            "config K/rank = {}/{} do not match the archive's {}/{}",
            cfg.k, cfg.rank, archive_k, archive_rank
        )));
    }
    let (train_set, _, space) = load_dataset(&cfg.data, cfg.model.d_in, cfg.seed)?;
    if space.n_class() != net.n_class() {
        return Err(Error::Config(format!(
            "config data has {} classes, archive head has {}",
            space.n_class(),
            net.n_class()
        )));
    }
    let report = train(&mut net, &train_set, &space, &cfg)?;

    let mut tensors = net.to_tensors();
    for (name, tensor) in bank_tensors(&report.bank) {
        tensors.insert(name, tensor);
    }
    let mut out_meta = net.meta();
    let (classes, seed) = run_meta(&cfg);
    out_meta.insert("class_counts".into(), classes);
    out_meta.insert("seed".into(), seed);
    write_archive(&args.out, &tensors, &out_meta)?;
    write_text_atomic(
        &metrics_path(&args.out, &args.metrics),
        &metrics_to_csv(&report.metrics, space.n_tasks()),
    )?;
    echo_config(&args.out, &cfg)?;
    println!(
        "trained {} epochs; final alpha {}; final mean train accuracy {:.4}",
        cfg.optimizer.epochs,
        report.final_alpha,
        report.metrics.last().map_or(0.0, |m| m.mean_acc)
    );
    Ok(())
}

fn reparam(args: ReparamArgs) -> Result<()> {
    let (net, _, meta) = load_net(&args.input)?;
    if net.phase() != Phase::Mole {
        return Err(Error::Config(
            "reparam expects a decomposed checkpoint".into(),
        ));
    }
    let alpha = net.alpha().unwrap_or(1.0);
    if alpha != 0.0 {
        return Err(Error::Config(format!(
            "router fade coefficient is {alpha}, not 0; train until the fading window \
             ends (or override with --fade-end) before reparameterizing"
        )));
    }
    // All-zero adapter deltas mean the reconstruction is the bit-exact source.
    let mut lora_all_zero = true;
    for block in &net.blocks {
        if let emtal_core::model::BlockKind::Mole(m) = block {
            for i in 0..m.k() {
                let (up, down) = m.effective_expert(i)?;
                lora_all_zero &= up == m.experts.experts[i].e_up;
                lora_all_zero &= down == m.experts.experts[i].e_down;
            }
        }
    }
    let dense = net.reparameterize()?;

    // Equivalence probe on seeded random inputs.
    let seed = meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(42);
    let probe_samples = 64usize;
    let x: Matrix<f32> =
        Rng::substream(seed, "probe").normal_matrix(probe_samples, net.d_in(), 1.0);
    let max_delta = net.forward(&x)?.max_abs_diff(&dense.forward(&x)?);

    let tensors = dense.to_tensors();
    let mut out_meta = dense.meta();
    for key in ["class_counts", "seed"] {
        if let Some(v) = meta.get(key) {
            out_meta.insert(key.into(), v.clone());
        }
    }
    write_archive(&args.out, &tensors, &out_meta)?;
    let report = serde_json::json!({
        "max_abs_logit_delta": max_delta,
        "bit_identical": lora_all_zero,
        "probe_samples": probe_samples,
        "seed": seed,
    });
    let report_path = args
        .report
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    write_text_atomic(
        &report_path,
        &serde_json::to_string_pretty(&report).expect("serializes"),
    )?;
    println!("reparameterized; max |delta logit| over probe batch: {max_delta:.3e}");
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<()> {
    let scope = VerifyScope::parse(&args.scope)
        .ok_or_else(|| Error::Config(format!("unknown scope `{}`", args.scope)))?;
    let outcomes = run_verify(scope, args.inject_fault)?;
    let mut all_ok = true;
    for o in &outcomes {
        let status = if o.passed { "pass" } else { "FAIL" };
        println!("{status}  {:<26} {}", o.name, o.detail);
        all_ok &= o.passed;
    }
    if all_ok {
        println!("{} checks passed", outcomes.len());
        Ok(())
    } else {
        // Distinct exit code for failed invariants, past the error mapping.
        eprintln!("verification failed");
        std::process::exit(4);
    }
}

fn worker_cap(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        return Ok(n);
    }
    match std::env::var("EMTAL_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("EMTAL_THREADS=`{v}` is not a number")))?;
            if n == 0 {
                return Err(Error::Config("EMTAL_THREADS must be >= 1".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let (net, _, meta) = load_net(&args.input)?;
    if net.phase() != Phase::Dense {
        return Err(Error::Config("analyze expects a dense checkpoint".into()));
    }
    let ks: Vec<usize> = args
        .ks
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad k `{s}` in --ks")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() {
        return Err(Error::Config("--ks must name at least one rank".into()));
    }
    let seed = args
        .seed
        .or_else(|| meta.get("seed").and_then(|v| v.as_u64()))
        .unwrap_or(42);
    let threads = worker_cap(args.threads)?;

    let mut csv = String::from("layer,expert,strategy,k,ratio,singular_values\n");
    for (l, block) in net.blocks.iter().enumerate() {
        let emtal_core::model::BlockKind::Dense(dense) = block else {
            unreachable!("phase checked above");
        };
        let (clustered, contiguous) =
            emtal_core::analysis::compare_partitions(&dense.ffn, args.k, &ks, seed, threads)?;
        for report in [&clustered, &contiguous] {
            for row in &report.rows {
                let sigma = row
                    .singular_values
                    .iter()
                    .map(|s| format!("{s:.8}"))
                    .collect::<Vec<_>>()
                    .join(";");
                for &(k, ratio) in &row.ratios {
                    csv.push_str(&format!(
                        "{l},{},{},{k},{ratio:.8},{sigma}\n",
                        row.expert,
                        report.strategy.name(),
                    ));
                }
            }
        }
        for report in [&clustered, &contiguous] {
            for &(k, mean) in &report.mean_ratios {
                println!(
                    "layer {l} {} k={k}: mean ratio {mean:.4}",
                    report.strategy.name()
                );
            }
        }
    }
    write_text_atomic(&args.out, &csv)?;
    let resolved = serde_json::json!({
        "k": args.k,
        "ks": ks,
        "seed": seed,
        "threads": threads,
    });
    write_text_atomic(
        &args.out.with_extension("config.json"),
        &serde_json::to_string_pretty(&resolved).expect("serializes"),
    )?;
    Ok(())
}
