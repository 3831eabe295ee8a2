//! `mtpc`: build and inspect window circuits, distill draft models
//! against synthetic teachers, decode with the shared-state speculative
//! loop, and benchmark configurations.
//!
//! Config files are JSON; results go to `--out` or stdout. Usage errors
//! exit 2 (clap's default), config and runtime errors exit 1.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng as _;
use serde::{Deserialize, Serialize};

use mtpc::bench::{
    measure_ar_baseline, measure_with, sweep, MetricRecord, RunConfig, SweepGrid,
};
use mtpc::circuit::{build, ArchitectureSpec, Circuit, LayerKind};
use mtpc::inference::{enumerate_joint, sample_window, total_variation, CircuitParams};
use mtpc::neural::{
    load_checkpoint, save_checkpoint, DraftAdapter, ModelBundle, ParamHead, Pooling, TargetStp,
    ToyBackbone,
};
use mtpc::specdec::{
    ar_generate, ar_prefix_law, shared_state_decode, shared_state_decode_traced, DecodeMode,
    Session, Verifier,
};
use mtpc::training::{
    make_teacher, mtp_loss, train, LossConfig, MtpModel, OptimizerConfig, TrainVars,
    TrainingBatch,
};
use mtpc::Rng;

#[derive(Parser)]
#[command(name = "mtpc", version, about = "Multi-token draft circuits and speculative decoding")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build and validate a circuit from an architecture spec file.
    Build {
        /// JSON file with {"kind","n","r","v"}.
        #[arg(long)]
        config: PathBuf,
        /// Write the circuit document here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a checkpoint or circuit file.
    Inspect {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distill a draft model against a synthetic teacher.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode with the shared-state speculative loop and print tokens.
    Generate {
        /// Optional job file; a seeded default model is used without one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Decode-loop rng seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sample")]
        mode: String,
        /// Write a per-cycle JSONL trace here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure one configuration; emits a JSONL metric record.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Baseline tag to divide by; measured and stored on first use.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Measure a grid of configurations into CSV plus a JSONL mirror.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// CSV destination; the mirror lands next to it as .jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the scaled-down correctness suites; nonzero exit on failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Prints one stdout line, tolerating truncated pipes: a reader that
/// stopped listening (e.g. `| head`) ends the process with the
/// conventional SIGPIPE code instead of a panic.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let mut out = std::io::stdout().lock();
        if let Err(e) = writeln!(out, $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(141);
            }
            return Err(e.into());
        }
    }};
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Build { config, out } => cmd_build(&config, out.as_deref()),
        Cmd::Inspect { config } => cmd_inspect(&config),
        Cmd::Train { config, out } => cmd_train(&config, &out),
        Cmd::Generate { config, seed, mode, out } => {
            cmd_generate(config.as_deref(), seed, &mode, out.as_deref())
        }
        Cmd::Bench { config, out, baseline } => {
            cmd_bench(&config, out.as_deref(), baseline.as_deref())
        }
        Cmd::Sweep { config, out } => cmd_sweep(&config, &out),
        Cmd::Selftest { seed } => cmd_selftest(seed),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_build(config: &Path, out: Option<&Path>) -> Result<()> {
    let spec: ArchitectureSpec = read_json(config)?;
    let circuit = build(spec)?;
    if let Some(path) = out {
        fs::write(path, circuit.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    say!(
        "{} n={} r={} v={}: {} layers, {} parameters per context",
        spec.kind.name(),
        spec.n,
        spec.r,
        spec.v,
        circuit.layers.len(),
        circuit.param_count()
    );
    if let Some(path) = out {
        say!("circuit written to {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(config: &Path) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("format").is_some() {
        let bundle = load_checkpoint(&mut text.as_bytes())?;
        print_bundle_summary(&bundle)?;
    } else {
        let circuit = Circuit::from_json(&text)?;
        print_circuit_summary(&circuit)?;
    }
    Ok(())
}

fn print_circuit_summary(c: &Circuit) -> Result<()> {
    say!(
        "{} n={} r={} v={}: {} parameters per context",
        c.spec.kind.name(),
        c.spec.n,
        c.spec.r,
        c.spec.v,
        c.param_count()
    );
    for (i, layer) in c.layers.iter().enumerate() {
        let kind = match layer.kind {
            LayerKind::Input => "INPUT",
            LayerKind::Product => "PRODUCT",
            LayerKind::Sum => "SUM",
        };
        say!(
            "  layer {i:>3}: {kind:<7} width {:>4} scope {:?} inputs {:?}",
            layer.width, layer.scope, layer.inputs
        );
    }
    Ok(())
}

fn print_bundle_summary(bundle: &ModelBundle) -> Result<()> {
    let b = &bundle.backbone;
    let circuit = bundle.circuit()?;
    let backbone_params =
        b.embed.len() + b.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>();
    let adapter_params: usize = bundle
        .adapter
        .layers
        .iter()
        .map(|l| l.a.len() + l.b.len() + l.bias.len())
        .sum();
    let head_params = bundle.head.w.len()
        + bundle.head.sums.iter().map(|s| s.r.len() + s.bias.len()).sum::<usize>();
    say!(
        "checkpoint: {} n={} r={} v={}",
        bundle.arch.kind.name(),
        bundle.arch.n,
        bundle.arch.r,
        bundle.arch.v
    );
    say!("  backbone: d={} l={} ({} parameters)", b.d, b.l, backbone_params);
    say!(
        "  adapter:  k={} rho={} ({} parameters)",
        bundle.adapter.k, bundle.adapter.rho, adapter_params
    );
    say!(
        "  head:     {} parameters driving {} circuit parameters per context",
        head_params,
        circuit.param_count()
    );
    say!("  verifier: {} parameters", bundle.stp.u.len());
    Ok(())
}

/// Model shape for jobs that build their stack from seeds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct StackSpec {
    #[serde(default = "default_d")]
    d: usize,
    #[serde(default = "default_l")]
    l: usize,
    #[serde(default)]
    k: usize,
    #[serde(default = "default_rho")]
    rho: usize,
    #[serde(default)]
    seed: u64,
}

fn default_d() -> usize {
    16
}
fn default_l() -> usize {
    2
}
fn default_rho() -> usize {
    4
}

impl Default for StackSpec {
    fn default() -> Self {
        StackSpec { d: default_d(), l: default_l(), k: 1, rho: default_rho(), seed: 0 }
    }
}

fn build_stack(arch: ArchitectureSpec, stack: &StackSpec) -> Result<(ModelBundle, Circuit)> {
    let mut rng = Rng::seed_from_u64(stack.seed);
    let backbone =
        ToyBackbone::random(arch.v, stack.d, stack.l, Pooling::Recency { beta: 0.75 }, &mut rng);
    let adapter = DraftAdapter::new(stack.k, stack.rho, stack.d, &mut rng);
    let circuit = build(arch)?;
    let head = ParamHead::random(&circuit, stack.d, 0.5, &mut rng);
    let stp = TargetStp::random(arch.v, stack.d, 1.0, &mut rng);
    Ok((ModelBundle { backbone, adapter, head, stp, arch }, circuit))
}

#[derive(Debug, Deserialize)]
struct TeacherSpec {
    kind: String,
    v: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct DataSpec {
    #[serde(default = "default_count")]
    count: usize,
    #[serde(default = "default_len")]
    len: usize,
    #[serde(default)]
    seed: u64,
    /// Leading tokens per sequence excluded from supervision.
    #[serde(default)]
    prompt_len: usize,
}

fn default_count() -> usize {
    128
}
fn default_len() -> usize {
    32
}

#[derive(Debug, Deserialize)]
struct TrainJob {
    teacher: TeacherSpec,
    arch: ArchitectureSpec,
    #[serde(default)]
    model: StackSpec,
    #[serde(default)]
    data: Option<DataSpec>,
    #[serde(default)]
    gamma: Option<f64>,
    optimizer: OptimizerConfig,
    /// Train only the parameter head, freezing encoder and adapter.
    #[serde(default)]
    head_only: bool,
    /// Optional JSONL loss-trace destination.
    #[serde(default)]
    trace_out: Option<PathBuf>,
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let job: TrainJob = read_json(config)?;
    if job.teacher.v != job.arch.v {
        bail!("teacher vocabulary {} does not match the architecture's {}", job.teacher.v, job.arch.v);
    }
    let teacher = make_teacher(&job.teacher.kind, job.teacher.v, job.teacher.seed)?;
    let data = job.data.unwrap_or(DataSpec {
        count: default_count(),
        len: default_len(),
        seed: 0,
        prompt_len: 0,
    });
    let sequences = mtpc::training::distill_dataset(&teacher, data.count, data.len, data.seed);
    let mut batch = TrainingBatch::new(sequences, job.arch.n)?;
    if data.prompt_len > 0 {
        batch.mask_prompt(data.prompt_len);
    }

    let (bundle, circuit) = build_stack(job.arch, &job.model)?;
    let mut model = MtpModel::new(bundle.backbone, bundle.adapter, bundle.head, circuit)?;
    if job.head_only {
        model.train = TrainVars::head_only();
    }
    let loss_cfg = LossConfig::new(job.gamma.unwrap_or(0.9), job.arch.n)?;

    let mut trace_file = match &job.trace_out {
        Some(path) => Some(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ),
        None => None,
    };
    let report = train(
        &mut model,
        &batch,
        &loss_cfg,
        &job.optimizer,
        trace_file.as_mut().map(|f| f as &mut dyn IoWrite),
    )?;
    let trained = ModelBundle {
        backbone: model.backbone,
        adapter: model.adapter,
        head: model.head,
        stp: bundle.stp,
        arch: job.arch,
    };
    let mut file =
        fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    save_checkpoint(&trained, &mut file)?;
    say!(
        "trained {} steps: loss {:.6} -> {:.6}",
        report.trace.len(),
        report.first_loss,
        report.final_loss
    );
    say!("checkpoint written to {}", out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct GenerateJob {
    /// Load models from this checkpoint instead of building from seeds.
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default = "default_gen_arch")]
    arch: ArchitectureSpec,
    #[serde(default)]
    model: StackSpec,
    #[serde(default = "default_prompt")]
    prompt: Vec<usize>,
    #[serde(default = "default_new_tokens")]
    max_new_tokens: usize,
}

fn default_gen_arch() -> ArchitectureSpec {
    ArchitectureSpec::new("CP".parse().expect("known kind"), 4, 4, 16).expect("valid default")
}
fn default_prompt() -> Vec<usize> {
    vec![0]
}
fn default_new_tokens() -> usize {
    32
}

impl Default for GenerateJob {
    fn default() -> Self {
        GenerateJob {
            checkpoint: None,
            arch: default_gen_arch(),
            model: StackSpec::default(),
            prompt: default_prompt(),
            max_new_tokens: default_new_tokens(),
        }
    }
}

fn cmd_generate(config: Option<&Path>, seed: u64, mode: &str, out: Option<&Path>) -> Result<()> {
    let mode: DecodeMode = mode.parse()?;
    let job: GenerateJob = match config {
        Some(path) => read_json(path)?,
        None => GenerateJob::default(),
    };
    let (bundle, circuit) = match &job.checkpoint {
        Some(path) => {
            let mut file =
                fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let bundle = load_checkpoint(&mut file)?;
            let circuit = bundle.circuit()?;
            (bundle, circuit)
        }
        None => build_stack(job.arch, &job.model)?,
    };
    let mut session = Session::new(
        &bundle.backbone,
        &bundle.adapter,
        &bundle.head,
        &circuit,
        Verifier::Stp(&bundle.stp),
        mode,
        &job.prompt,
        Rng::seed_from_u64(seed),
    )?;
    let tokens = match out {
        Some(path) => {
            let mut file =
                fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            shared_state_decode_traced(&mut session, job.max_new_tokens, Some(&mut file))?
        }
        None => shared_state_decode(&mut session, job.max_new_tokens)?,
    };
    let rendered: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    say!("{}", rendered.join(" "));
    let st = &session.stats;
    eprintln!(
        "cycles {} accepted {} emitted {} (mu_acc {:.3})",
        st.cycles,
        st.accepted_total,
        st.emitted_total,
        st.accepted_total as f64 / st.cycles as f64
    );
    Ok(())
}

fn cmd_bench(config: &Path, out: Option<&Path>, baseline_tag: Option<&str>) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    // The store path rides alongside the run config, outside the
    // library type.
    let store_path: PathBuf = serde_json::from_str::<serde_json::Value>(&text)?
        .get("baseline_store")
        .and_then(|v| v.as_str())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("mtpc-baselines.json"));

    let bundle = mtpc::bench::build_assets(&cfg)?;
    let circuit = bundle.circuit()?;

    let tag = baseline_tag.map(str::to_string).or_else(|| cfg.baseline.clone());
    let baseline = match &tag {
        Some(tag) => Some(resolve_baseline(&store_path, tag, &bundle, &cfg)?),
        None => None,
    };
    let record = measure_with(&bundle, &circuit, &cfg, baseline.as_ref())?;
    let line = serde_json::to_string(&record)?;
    match out {
        Some(path) => {
            let mut file =
                fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            writeln!(file, "{line}")?;
            say!("metrics written to {}", path.display());
        }
        None => say!("{line}"),
    }
    Ok(())
}

/// Looks a baseline up by tag, measuring and storing it on first use so
/// later runs on the same machine reuse the same denominator.
fn resolve_baseline(
    store_path: &Path,
    tag: &str,
    bundle: &ModelBundle,
    cfg: &RunConfig,
) -> Result<MetricRecord> {
    let mut store: BTreeMap<String, MetricRecord> = if store_path.exists() {
        read_json(store_path)?
    } else {
        BTreeMap::new()
    };
    if let Some(record) = store.get(tag) {
        return Ok(record.clone());
    }
    let record = measure_ar_baseline(bundle, cfg)?;
    store.insert(tag.to_string(), record.clone());
    fs::write(store_path, serde_json::to_string_pretty(&store)?)
        .with_context(|| format!("writing {}", store_path.display()))?;
    Ok(record)
}

fn cmd_sweep(config: &Path, out: &Path) -> Result<()> {
    let grid: SweepGrid = read_json(config)?;
    let mut csv = Vec::new();
    let mut jsonl = Vec::new();
    let rows = sweep(&grid, &mut csv, Some(&mut jsonl))?;
    fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    let mirror = out.with_extension("jsonl");
    fs::write(&mirror, &jsonl).with_context(|| format!("writing {}", mirror.display()))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    say!(
        "{} cells measured ({} failed) -> {} and {}",
        rows.len(),
        failed,
        out.display(),
        mirror.display()
    );
    Ok(())
}

/// Scaled-down correctness battery: circuit-oracle equivalence,
/// sampling soundness, speculative losslessness, greedy identity, and
/// metric arithmetic. Sizes are chosen to finish in seconds while still
/// failing loudly on real regressions.
fn cmd_selftest(seed: u64) -> Result<()> {
    use mtpc::circuit::ArchKind;
    let kinds = [ArchKind::Ff, ArchKind::Cp, ArchKind::Hmm, ArchKind::BTree];

    // Circuit evaluation against the closed-form oracles.
    let mut worst: f64 = 0.0;
    for kind in kinds {
        for n in [2usize, 3] {
            for v in [2usize, 3] {
                for r in [1usize, 2] {
                    if kind == ArchKind::Ff && r != 1 {
                        continue;
                    }
                    for s in 0..3u64 {
                        let spec = ArchitectureSpec::new(kind, n, r, v)?;
                        let circuit = build(spec)?;
                        let mut rng = Rng::seed_from_u64(seed ^ (s + 1));
                        let params = CircuitParams::random(&circuit, &mut rng);
                        let fast = enumerate_joint(&circuit, &params)?;
                        let slow = mtpc::oracle::joint_table(&circuit, &params)?;
                        for (a, b) in fast.iter().zip(&slow) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
            }
        }
    }
    if worst > 1e-9 {
        bail!("oracle equivalence failed: max deviation {worst:.3e}");
    }
    say!("oracle equivalence: ok (max deviation {worst:.3e})");

    // Ancestral sampling against the enumerated joint.
    let spec = ArchitectureSpec::new(ArchKind::Cp, 2, 2, 3)?;
    let circuit = build(spec)?;
    let mut rng = Rng::seed_from_u64(seed ^ 0xabc);
    let params = CircuitParams::random(&circuit, &mut rng);
    let joint = enumerate_joint(&circuit, &params)?;
    let runs = 20_000;
    let mut counts = vec![0.0f64; joint.len()];
    for _ in 0..runs {
        let w = sample_window(&circuit, &params, &mut rng)?;
        counts[w[0] * 3 + w[1]] += 1.0 / runs as f64;
    }
    let tv = total_variation(&joint, &counts);
    if tv > 0.03 {
        bail!("sampling soundness failed: TV {tv:.4}");
    }
    say!("sampling soundness: ok (TV {tv:.4})");

    // Losslessness of shared-state speculative sampling, all
    // architectures, two-token law.
    for kind in kinds {
        let r = if kind == ArchKind::Ff { 1 } else { 2 };
        let arch = ArchitectureSpec::new(kind, 2, r, 3)?;
        let stack = StackSpec { d: 4, l: 2, k: 1, rho: 2, seed: seed ^ 7 };
        let (bundle, circuit) = build_stack(arch, &stack)?;
        let prompt = [1usize, 0];
        let law = ar_prefix_law(&bundle.backbone, &bundle.stp, &prompt, 2)?;
        let runs = 8_000;
        let mut got = vec![0.0f64; 9];
        for s in 0..runs {
            let mut session = Session::new(
                &bundle.backbone,
                &bundle.adapter,
                &bundle.head,
                &circuit,
                Verifier::Stp(&bundle.stp),
                DecodeMode::Sample,
                &prompt,
                Rng::seed_from_u64(seed ^ (40_000 + s as u64)),
            )?;
            let out = shared_state_decode(&mut session, 2)?;
            got[out[0] * 3 + out[1]] += 1.0 / runs as f64;
        }
        let tv = total_variation(&law, &got);
        if tv > 0.04 {
            bail!("losslessness failed for {}: TV {tv:.4}", kind.name());
        }
        say!("losslessness {}: ok (TV {tv:.4})", kind.name());
    }

    // Greedy identity against the AR baseline.
    for kind in kinds {
        let r = if kind == ArchKind::Ff { 1 } else { 2 };
        let arch = ArchitectureSpec::new(kind, 3, r, 5)?;
        let stack = StackSpec { d: 4, l: 2, k: 1, rho: 2, seed: seed ^ 11 };
        let (bundle, circuit) = build_stack(arch, &stack)?;
        for p in 0..5usize {
            let prompt = [p % 5];
            let want = ar_generate(
                &bundle.backbone,
                &bundle.stp,
                &prompt,
                20,
                DecodeMode::Greedy,
                &mut Rng::seed_from_u64(0),
            )?;
            let mut session = Session::new(
                &bundle.backbone,
                &bundle.adapter,
                &bundle.head,
                &circuit,
                Verifier::Stp(&bundle.stp),
                DecodeMode::Greedy,
                &prompt,
                Rng::seed_from_u64(0),
            )?;
            let got = shared_state_decode(&mut session, 20)?;
            if got[..20] != want[..] {
                bail!("greedy identity failed for {}", kind.name());
            }
        }
        say!("greedy identity {}: ok", kind.name());
    }

    // Metric arithmetic on a single measured cell.
    let mut cfg = RunConfig::new(ArchitectureSpec::new(ArchKind::Cp, 2, 2, 8)?, 1);
    cfg.model.d = 8;
    cfg.model.seed = seed;
    cfg.prompts.count = 4;
    cfg.prompts.len = 3;
    cfg.repetitions = 2;
    cfg.gen_len = 64;
    let record = mtpc::bench::measure(&cfg)?;
    if record.est_toks != record.mu_acc / record.mu_lat {
        bail!("metric identity failed: est_toks is not mu_acc/mu_lat");
    }
    if record.max_toks < record.mu_toks {
        bail!("metric identity failed: max_toks below mu_toks");
    }
    say!("metric arithmetic: ok");

    // A tiny training smoke: loss must drop on a learnable teacher.
    let teacher = make_teacher("NGRAM", 5, seed ^ 13)?;
    let data = mtpc::training::distill_dataset(&teacher, 40, 12, seed ^ 17);
    let batch = TrainingBatch::new(data, 2)?;
    let arch = ArchitectureSpec::new(ArchKind::Cp, 2, 2, 5)?;
    let stack = StackSpec { d: 8, l: 2, k: 1, rho: 2, seed };
    let (bundle, circuit) = build_stack(arch, &stack)?;
    let mut model = MtpModel::new(bundle.backbone, bundle.adapter, bundle.head, circuit)?;
    let loss_cfg = LossConfig::new(0.9, 2)?;
    let mut opt = OptimizerConfig::new(30, seed);
    opt.lr = 3e-3;
    let before = mtp_loss(&model, &batch, &loss_cfg)?.total;
    let report = train(&mut model, &batch, &loss_cfg, &opt, None)?;
    if report.final_loss >= before {
        bail!("training smoke failed: loss {before:.4} -> {:.4}", report.final_loss);
    }
    say!("training smoke: ok (loss {before:.4} -> {:.4})", report.final_loss);

    say!("selftest passed");
    Ok(())
}
