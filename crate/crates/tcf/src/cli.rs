//! Command-line surface: CSV clustering, full forward runs with report and
//! overlay emission, analytic complexity benchmarks, and fixture weight
//! generation. Any failure exits 1 with a single-line diagnostic.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::backbone::{classify, forward_traced, generate_weights, validate_weights, ForwardTrace};
use crate::clustering::{cluster_global, cluster_local, ClusterResult};
use crate::config::ModelConfig;
use crate::error::{Result, TcfError};
use crate::mta::{mta_forward, MtaVariant};
use crate::ppm::load_ppm;
use crate::report::{build_report, complexity_report, report_json, save_token_overlay, Dims};
use crate::tensor::Tensor;
use crate::token_ops::TokenSet;
use crate::weights::WeightStore;

#[derive(Parser)]
#[command(
    name = "tcf",
    version,
    about = "Dynamic vision tokens: density-peaks clustering, token pyramids and complexity reports"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cluster CSV feature rows and emit the CSV with an assignment column
    Cluster(ClusterArgs),
    /// Run the pyramid forward pass on a PPM image
    Run(RunArgs),
    /// Compare the configured part schedule against all-global clustering
    Bench(BenchArgs),
    /// Generate deterministic fixture weights for a configuration
    GenWeights(GenWeightsArgs),
}

#[derive(Args)]
struct ClusterArgs {
    /// CSV file: header row, then comma-separated float features
    #[arg(long)]
    input: PathBuf,
    /// Number of clusters
    #[arg(long)]
    clusters: usize,
    /// kNN size for the density estimate
    #[arg(long)]
    knn: usize,
    /// Spatial part count; rows are laid out row-major on a square grid
    #[arg(long, default_value_t = 1)]
    parts: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Input image (binary PPM, P6, maxval 255)
    #[arg(long)]
    image: PathBuf,
    /// JSON model config; defaults to the built-in tiny config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight container; generated from the seed when omitted
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Overrides the config seed for weight generation
    #[arg(long)]
    seed: Option<u64>,
    /// Write the token-map report JSON here
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write per-stage token overlays (stage1.ppm .. stage4.ppm) here
    #[arg(long)]
    overlay_dir: Option<PathBuf>,
    /// Also run token aggregation in the given mode
    #[arg(long, value_parser = ["sr", "cr"])]
    mta: Option<String>,
    /// Dump raw merge-module attention tensors (attention.tcfw) here
    #[arg(long)]
    attn_dump: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input size as HxW, e.g. 512x512
    #[arg(long)]
    size: String,
}

#[derive(Args)]
struct GenWeightsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses and executes one invocation; returns the process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let line = e
                        .to_string()
                        .lines()
                        .find(|l| !l.trim().is_empty())
                        .unwrap_or("invalid arguments")
                        .to_string();
                    eprintln!("{line}");
                    1
                }
            };
        }
    };
    if let Err(e) = thread_cap() {
        eprintln!("error: {e}");
        return 1;
    }
    let outcome = match cli.cmd {
        Cmd::Cluster(a) => cmd_cluster(&a),
        Cmd::Run(a) => cmd_run(&a),
        Cmd::Bench(a) => cmd_bench(&a),
        Cmd::GenWeights(a) => cmd_gen_weights(&a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Worker-thread cap from TCF_THREADS (0/unset = default). The compute
/// kernels are single-threaded, so any cap is honoured; the value is still
/// validated so typos fail loudly.
fn thread_cap() -> Result<usize> {
    match std::env::var("TCF_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| TcfError::Cli(format!("TCF_THREADS must be an integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_json(&std::fs::read_to_string(p)?),
        None => Ok(ModelConfig::tiny()),
    }
}

fn parse_csv(text: &str) -> Result<(String, Vec<Vec<f32>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| TcfError::Csv("empty file".into()))?
        .to_string();
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(width);
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|_| {
                TcfError::Csv(format!("row {}: {:?} is not a float", i + 2, field.trim()))
            })?;
            row.push(v);
        }
        if row.len() != width {
            return Err(TcfError::Csv(format!(
                "row {} has {} fields, header has {width}",
                i + 2,
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(TcfError::Csv("no data rows".into()));
    }
    Ok((header, rows))
}

pub fn cluster_csv(text: &str, clusters: usize, knn: usize, parts: usize) -> Result<String> {
    let (header, rows) = parse_csv(text)?;
    let result = cluster_rows(&rows, clusters, knn, parts)?;
    let mut out = String::new();
    out.push_str(&header);
    out.push_str(",assignment\n");
    for (row, &cid) in rows.iter().zip(&result.assignment) {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&fields.join(","));
        out.push_str(&format!(",{cid}\n"));
    }
    Ok(out)
}

fn cluster_rows(
    rows: &[Vec<f32>],
    clusters: usize,
    knn: usize,
    parts: usize,
) -> Result<ClusterResult> {
    let n = rows.len();
    let features = Tensor::from_rows(rows);
    if parts <= 1 {
        return cluster_global(&features, clusters, knn);
    }
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(TcfError::Csv(format!(
            "{n} rows cannot be laid out on a square grid for --parts {parts}"
        )));
    }
    let tokens = TokenSet::stage1_grid(features, side, side);
    let ratio = clusters as f64 / n as f64;
    cluster_local(&tokens, parts, ratio, knn)
}

fn cmd_cluster(a: &ClusterArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input)?;
    print!("{}", cluster_csv(&text, a.clusters, a.knn, a.parts)?);
    Ok(())
}

fn resolve_weights(
    config: &ModelConfig,
    weights: &Option<PathBuf>,
) -> Result<WeightStore> {
    match weights {
        Some(p) => {
            let store = WeightStore::load(p)?;
            validate_weights(&store, config)?;
            Ok(store)
        }
        None => generate_weights(config),
    }
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let store = resolve_weights(&config, &a.weights)?;
    let image = load_ppm(&a.image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);

    let mut trace = ForwardTrace::default();
    let pyramid = forward_traced(
        &image,
        &config,
        &store,
        a.attn_dump.as_ref().map(|_| &mut trace),
    )?;
    let logits = classify(&pyramid, &config, &store)?;
    let top = logits
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .unwrap_or(0);

    let variant = match a.mta.as_deref() {
        Some("sr") => Some(MtaVariant::Spatial),
        Some("cr") => Some(MtaVariant::Clustering),
        _ => None,
    };
    let mta_out = match variant {
        Some(v) => Some((v, mta_forward(&pyramid, v, &config, &store)?)),
        None => None,
    };

    let report = build_report(
        &pyramid,
        &config,
        Dims { h, w },
        mta_out.as_ref().map(|(v, out)| (*v, out)),
    );
    if let Some(path) = &a.report {
        std::fs::write(path, report_json(&report)?)?;
    }
    if let Some(dir) = &a.overlay_dir {
        std::fs::create_dir_all(dir)?;
        for (s, tokens) in pyramid.stages.iter().enumerate() {
            save_token_overlay(tokens, &dir.join(format!("stage{}.ppm", s + 1)))?;
        }
    }
    if let Some(dir) = &a.attn_dump {
        std::fs::create_dir_all(dir)?;
        let mut dump = WeightStore::new();
        for (name, tensor) in trace.attention {
            dump.insert(&name, tensor)?;
        }
        dump.save(&dir.join("attention.tcfw"))?;
    }

    println!(
        "tokens per stage: {}",
        pyramid
            .token_counts()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!(
        "clustering dist_ops: {}",
        pyramid
            .ctm_records
            .iter()
            .map(|r| r.dist_ops.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!("attention macs: {}", pyramid.attention_macs);
    if let Some((_, out)) = &mta_out {
        println!(
            "mta kv counts: {}",
            out.kv_counts
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    println!("argmax logit: {top}");
    Ok(())
}

fn parse_size(size: &str) -> Result<(usize, usize)> {
    let lower = size.to_ascii_lowercase();
    let (h, w) = lower
        .split_once('x')
        .ok_or_else(|| TcfError::Cli(format!("size {size:?} is not HxW")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| TcfError::Cli(format!("size {size:?} is not HxW")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let (h, w) = parse_size(&a.size)?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(TcfError::Geometry(format!(
            "size {h}×{w} must have sides divisible by 32"
        )));
    }
    let r = complexity_report(&config, h, w)?;
    for c in &r.ctm {
        println!(
            "ctm{}: tokens={} channels={} parts={} dist_ops_local={} dist_ops_global={} ratio={:.2}",
            c.index, c.tokens, c.channels, c.parts, c.dist_ops_local, c.dist_ops_global, c.ratio
        );
    }
    println!(
        "clustering total: local={} global={} reduction={:.1}%",
        r.total_local, r.total_global, r.reduction_percent
    );
    println!(
        "attention macs: backbone={} mta_sr={} mta_cr={}",
        r.backbone_attention_macs, r.mta_attention_macs_sr, r.mta_attention_macs_cr
    );
    Ok(())
}

fn cmd_gen_weights(a: &GenWeightsArgs) -> Result<()> {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let store = generate_weights(&config)?;
    store.save(&a.out)?;
    println!(
        "wrote {} tensors to {} (content hash {:016x})",
        store.len(),
        a.out.display(),
        store.content_hash()
    );
    Ok(())
}

/// Convenience for tests: run with string args.
pub fn run_cli_str(args: &[&str]) -> i32 {
    run_cli(args.iter().map(|s| s.to_string()))
}
