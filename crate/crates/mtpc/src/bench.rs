//! Benchmark harness: acceptance, latency, and throughput of the
//! shared-state decoder across configurations.
//!
//! Measurements follow a fixed boundary: the clock starts at the first
//! draft cycle and stops after the last, so model construction and
//! prompt prefill are never inside the measured region (the
//! `measured_region` field on every record documents this). Per-cycle
//! latency is total measured time divided by cycles rather than
//! per-cycle stopwatch reads, which keeps instrumentation out of the
//! number at toy scale.
//!
//! Token streams are fully determined by the config seeds; only the
//! wall-clock varies between runs. [`sweep`] grids over
//! (architecture, r, n, k), writes a fixed-schema CSV plus a JSONL
//! mirror, and records per-cell failures as JSONL error rows without
//! aborting the rest of the grid.

use std::io::Write as IoWrite;
use std::time::Instant;

use rand::Rng as _;
use rand::SeedableRng as _;
use serde::{Deserialize, Serialize};

use crate::circuit::{build, ArchKind, ArchitectureSpec, Circuit};
use crate::inference::{
    argmax_first, conditional_row_log, greedy_window, sample_categorical, sample_window, LogParams,
};
use crate::neural::{
    parameterize, target_next_dist, DraftAdapter, ModelBundle, ParamHead, Pooling, TargetStp,
    ToyBackbone,
};
use crate::specdec::{shared_state_decode, DecodeMode, Session, Verifier};
use crate::training::Teacher;
use crate::{contract_err, guard_err, Result, Rng};

/// Where the stopwatch runs, stamped into every record.
pub const MEASURED_REGION: &str =
    "decode cycles only: clock starts at the first draft cycle, after model construction and prompt prefill";

/// Aggregate metrics for one configuration, averaged over repetition
/// sets (std across sets).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Mean accepted tokens per cycle.
    pub mu_acc: f64,
    pub mu_acc_std: f64,
    /// Mean seconds per cycle.
    pub mu_lat: f64,
    pub mu_lat_std: f64,
    /// Measured tokens per second.
    pub mu_toks: f64,
    pub mu_toks_std: f64,
    /// Ratio estimate mu_acc / mu_lat.
    pub est_toks: f64,
    /// Throughput with verification bypassed (all n tokens emitted).
    pub max_toks: f64,
    /// mu_toks relative to the named baseline, when one was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    /// Timing-boundary documentation; always [`MEASURED_REGION`].
    pub measured_region: String,
}

/// Ratio-estimated throughput.
pub fn est_toks(mu_acc: f64, mu_lat: f64) -> f64 {
    mu_acc / mu_lat
}

/// Measured-throughput ratio against a baseline record.
pub fn speedup(record: &MetricRecord, baseline: &MetricRecord) -> Result<f64> {
    if baseline.mu_toks <= 0.0 {
        return guard_err("speedup against a zero-throughput baseline");
    }
    Ok(record.mu_toks / baseline.mu_toks)
}

/// Prompt-set shape: each repetition set draws `count` fresh prompts of
/// length `len` from the seeded stream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(default = "default_prompt_count")]
    pub count: usize,
    #[serde(default = "default_prompt_len")]
    pub len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_prompt_count() -> usize {
    32
}
fn default_prompt_len() -> usize {
    8
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet { count: default_prompt_count(), len: default_prompt_len(), seed: 0 }
    }
}

/// Toy-model shape for configurations built from seeds rather than
/// checkpoints.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_l")]
    pub l: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_d() -> usize {
    16
}
fn default_l() -> usize {
    2
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { d: default_d(), l: default_l(), seed: 0 }
    }
}

/// One benchmark configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchitectureSpec,
    /// Adapted layer count for the draft.
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub prompts: PromptSet,
    /// Repetition sets; the std columns are computed across these.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Tokens generated per prompt.
    #[serde(default = "default_gen_len")]
    pub gen_len: usize,
    #[serde(default = "default_mode")]
    pub mode: DecodeMode,
    /// Tag naming the baseline record a caller will divide by.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

fn default_repetitions() -> usize {
    3
}
fn default_gen_len() -> usize {
    256
}
fn default_mode() -> DecodeMode {
    DecodeMode::Sample
}

impl RunConfig {
    pub fn new(arch: ArchitectureSpec, k: usize) -> RunConfig {
        RunConfig {
            arch,
            k,
            model: ModelSpec::default(),
            prompts: PromptSet::default(),
            repetitions: default_repetitions(),
            gen_len: default_gen_len(),
            mode: default_mode(),
            baseline: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 1 {
            return contract_err("repetitions must be at least 1");
        }
        if self.gen_len < 1 || self.prompts.count < 1 || self.prompts.len < 1 {
            return contract_err("generation length and prompt shape must be at least 1");
        }
        if self.k > self.model.l {
            return contract_err("adapter depth exceeds layer count");
        }
        Ok(())
    }
}

/// Builds the seeded toy models for a configuration.
pub fn build_assets(cfg: &RunConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.model.seed);
    let v = cfg.arch.v;
    let backbone =
        ToyBackbone::random(v, cfg.model.d, cfg.model.l, Pooling::Recency { beta: 0.75 }, &mut rng);
    let adapter = DraftAdapter::new(cfg.k, (cfg.model.d / 4).max(1), cfg.model.d, &mut rng);
    let circuit = build(cfg.arch)?;
    let head = ParamHead::random(&circuit, cfg.model.d, 0.5, &mut rng);
    let stp = TargetStp::random(v, cfg.model.d, 1.0, &mut rng);
    Ok(ModelBundle { backbone, adapter, head, stp, arch: cfg.arch })
}

/// The seeded prompt stream: one rng yields every set's prompts and the
/// per-prompt decode seeds, so token content is reproducible.
fn prompt_sets(cfg: &RunConfig, v: usize) -> Vec<Vec<(Vec<usize>, u64)>> {
    let mut rng = Rng::seed_from_u64(cfg.prompts.seed);
    (0..cfg.repetitions)
        .map(|_| {
            (0..cfg.prompts.count)
                .map(|_| {
                    let prompt: Vec<usize> =
                        (0..cfg.prompts.len).map(|_| rng.random_range(0..v)).collect();
                    (prompt, rng.random::<u64>())
                })
                .collect()
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the shared-state decoder over every prompt set and aggregates
/// the metrics. The optional baseline fills the speedup field.
pub fn measure_with(
    bundle: &ModelBundle,
    circuit: &Circuit,
    cfg: &RunConfig,
    baseline: Option<&MetricRecord>,
) -> Result<MetricRecord> {
    cfg.validate()?;
    let mut acc = Vec::with_capacity(cfg.repetitions);
    let mut lat = Vec::with_capacity(cfg.repetitions);
    let mut toks = Vec::with_capacity(cfg.repetitions);
    for set in prompt_sets(cfg, bundle.backbone.v) {
        let mut cycles = 0usize;
        let mut accepted = 0usize;
        let mut emitted = 0usize;
        let mut elapsed = 0.0f64;
        for (prompt, seed) in &set {
            let mut session = Session::new(
                &bundle.backbone,
                &bundle.adapter,
                &bundle.head,
                circuit,
                Verifier::Stp(&bundle.stp),
                cfg.mode,
                prompt,
                Rng::seed_from_u64(*seed),
            )?;
            let clock = Instant::now();
            shared_state_decode(&mut session, cfg.gen_len)?;
            elapsed += clock.elapsed().as_secs_f64();
            cycles += session.stats.cycles;
            accepted += session.stats.accepted_total;
            emitted += session.stats.emitted_total;
        }
        acc.push(accepted as f64 / cycles as f64);
        lat.push(elapsed / cycles as f64);
        toks.push(emitted as f64 / elapsed);
    }
    let (mu_acc, mu_acc_std) = mean_std(&acc);
    let (mu_lat, mu_lat_std) = mean_std(&lat);
    let (mu_toks, mu_toks_std) = mean_std(&toks);
    let max_toks = max_throughput_with(bundle, circuit, cfg)?;
    let mut record = MetricRecord {
        mu_acc,
        mu_acc_std,
        mu_lat,
        mu_lat_std,
        mu_toks,
        mu_toks_std,
        est_toks: est_toks(mu_acc, mu_lat),
        max_toks,
        speedup: None,
        measured_region: MEASURED_REGION.to_string(),
    };
    if let Some(base) = baseline {
        record.speedup = Some(speedup(&record, base)?);
    }
    Ok(record)
}

/// Builds the models from the config seeds and measures them.
pub fn measure(cfg: &RunConfig) -> Result<MetricRecord> {
    let bundle = build_assets(cfg)?;
    let circuit = bundle.circuit()?;
    measure_with(&bundle, &circuit, cfg, None)
}

/// The same cycle with verification bypassed: every cycle still runs
/// the draft, shared-encoder, and verifier forwards (so the per-cycle
/// cost stays comparable) but emits all n drafted tokens. An upper
/// bound on the measured throughput for the configuration.
pub fn max_throughput_with(
    bundle: &ModelBundle,
    circuit: &Circuit,
    cfg: &RunConfig,
) -> Result<f64> {
    cfg.validate()?;
    let n = circuit.spec.n;
    let backbone = &bundle.backbone;
    let mut total_tokens = 0usize;
    let mut total_elapsed = 0.0f64;
    for set in prompt_sets(cfg, backbone.v) {
        for (prompt, seed) in &set {
            let mut rng = Rng::seed_from_u64(*seed);
            let mut pool = backbone.pool_init();
            for &t in prompt {
                backbone.pool_push(&mut pool, t);
            }
            let mut trunk_h = backbone.trunk(&backbone.pooled(&pool), bundle.adapter.k);
            let mut produced = 0usize;
            let clock = Instant::now();
            while produced < cfg.gen_len {
                let e = bundle.adapter.finish_draft(backbone, &trunk_h);
                let params = parameterize(&bundle.head, circuit, &e)?;
                let lp = LogParams::new(&params);
                let drafted = match cfg.mode {
                    DecodeMode::Sample => sample_window(circuit, &params, &mut rng)?,
                    DecodeMode::Greedy => greedy_window(circuit, &params)?,
                };
                for i in 0..n {
                    conditional_row_log(circuit, &lp, &drafted[..i])?;
                }
                for &tok in &drafted {
                    backbone.pool_push(&mut pool, tok);
                    trunk_h = backbone.trunk(&backbone.pooled(&pool), bundle.adapter.k);
                    let _ = target_next_dist(&bundle.stp, &backbone.finish_base(&trunk_h, bundle.adapter.k));
                }
                produced += n;
            }
            total_elapsed += clock.elapsed().as_secs_f64();
            total_tokens += produced;
        }
    }
    Ok(total_tokens as f64 / total_elapsed)
}

pub fn max_throughput(cfg: &RunConfig) -> Result<f64> {
    let bundle = build_assets(cfg)?;
    let circuit = bundle.circuit()?;
    max_throughput_with(&bundle, &circuit, cfg)
}

/// Plain autoregressive decoding from the verifier stack, timed with
/// the same boundary; the STP baseline rows divide against. One token
/// per cycle, so mu_acc = 1 and speedup = 1 by construction.
pub fn measure_ar_baseline(bundle: &ModelBundle, cfg: &RunConfig) -> Result<MetricRecord> {
    cfg.validate()?;
    let backbone = &bundle.backbone;
    let mut lat = Vec::with_capacity(cfg.repetitions);
    let mut toks = Vec::with_capacity(cfg.repetitions);
    for set in prompt_sets(cfg, backbone.v) {
        let mut tokens = 0usize;
        let mut elapsed = 0.0f64;
        for (prompt, seed) in &set {
            let mut rng = Rng::seed_from_u64(*seed);
            let mut pool = backbone.pool_init();
            for &t in prompt {
                backbone.pool_push(&mut pool, t);
            }
            let clock = Instant::now();
            for _ in 0..cfg.gen_len {
                let e = backbone.apply_layers(&backbone.pooled(&pool), 0, backbone.l);
                let p = target_next_dist(&bundle.stp, &e);
                let tok = match cfg.mode {
                    DecodeMode::Greedy => argmax_first(&p),
                    DecodeMode::Sample => sample_categorical(&p, &mut rng),
                };
                backbone.pool_push(&mut pool, tok);
            }
            elapsed += clock.elapsed().as_secs_f64();
            tokens += cfg.gen_len;
        }
        lat.push(elapsed / tokens as f64);
        toks.push(tokens as f64 / elapsed);
    }
    let (mu_lat, mu_lat_std) = mean_std(&lat);
    let (mu_toks, mu_toks_std) = mean_std(&toks);
    let mut record = MetricRecord {
        mu_acc: 1.0,
        mu_acc_std: 0.0,
        mu_lat,
        mu_lat_std,
        mu_toks,
        mu_toks_std,
        est_toks: est_toks(1.0, mu_lat),
        max_toks: mu_toks,
        speedup: None,
        measured_region: MEASURED_REGION.to_string(),
    };
    record.speedup = Some(speedup(&record, &record)?);
    Ok(record)
}

/// Grid of configurations to sweep: the cross product of the four
/// lists, sharing everything else from `base`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub kinds: Vec<ArchKind>,
    pub rs: Vec<usize>,
    pub ns: Vec<usize>,
    pub ks: Vec<usize>,
    pub base: RunConfig,
}

/// One sweep row: the cell coordinates plus either metrics or the
/// error that cell produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub arch: String,
    pub r: usize,
    pub n: usize,
    pub k: usize,
    #[serde(flatten)]
    pub record: Option<MetricRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The fixed CSV header every sweep emits.
pub const SWEEP_COLUMNS: &str =
    "arch,r,n,k,mu_acc,mu_acc_std,mu_lat,mu_lat_std,mu_toks,mu_toks_std,est_toks,max_toks,speedup";

fn run_cell(grid: &SweepGrid, kind: ArchKind, r: usize, n: usize, k: usize, baseline: &MetricRecord) -> SweepRow {
    let cell = || -> Result<MetricRecord> {
        let arch = ArchitectureSpec::new(kind, n, r, grid.base.arch.v)?;
        let mut cfg = grid.base.clone();
        cfg.arch = arch;
        cfg.k = k;
        let bundle = build_assets(&cfg)?;
        let circuit = bundle.circuit()?;
        measure_with(&bundle, &circuit, &cfg, Some(baseline))
    };
    match cell() {
        Ok(record) => SweepRow { arch: kind.name().to_string(), r, n, k, record: Some(record), error: None },
        Err(e) => SweepRow { arch: kind.name().to_string(), r, n, k, record: None, error: Some(e.to_string()) },
    }
}

/// Measures every cell of the grid against a shared autoregressive
/// baseline. Successful cells become CSV rows (fixed column order) and
/// JSONL records; failed cells appear in the JSONL mirror only, with an
/// `error` field, and never abort the sweep. `MTPC_THREADS` > 1 runs
/// cells on worker threads (token content is unaffected; leave it
/// unset for timing runs).
pub fn sweep(
    grid: &SweepGrid,
    csv_out: &mut dyn IoWrite,
    mut jsonl_out: Option<&mut dyn IoWrite>,
) -> Result<Vec<SweepRow>> {
    grid.base.validate()?;
    if grid.kinds.is_empty() || grid.rs.is_empty() || grid.ns.is_empty() || grid.ks.is_empty() {
        return contract_err("sweep grid has an empty axis");
    }
    // The baseline is measured once from the base config's model seed.
    let base_bundle = build_assets(&grid.base)?;
    let baseline = measure_ar_baseline(&base_bundle, &grid.base)?;

    let mut cells = Vec::new();
    for &kind in &grid.kinds {
        for &r in &grid.rs {
            for &n in &grid.ns {
                for &k in &grid.ks {
                    cells.push((kind, r, n, k));
                }
            }
        }
    }

    let threads: usize = std::env::var("MTPC_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let rows: Vec<SweepRow> = if threads > 1 {
        let mut rows: Vec<Option<SweepRow>> = (0..cells.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut rows);
        std::thread::scope(|scope| {
            for _ in 0..threads.min(cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let (kind, r, n, k) = cells[i];
                    let row = run_cell(grid, kind, r, n, k, &baseline);
                    slots.lock().expect("no panics hold the lock")[i] = Some(row);
                });
            }
        });
        rows.into_iter().map(|r| r.expect("every cell ran")).collect()
    } else {
        cells
            .iter()
            .map(|&(kind, r, n, k)| run_cell(grid, kind, r, n, k, &baseline))
            .collect()
    };

    writeln!(csv_out, "{SWEEP_COLUMNS}")?;
    for row in &rows {
        if let Some(rec) = &row.record {
            writeln!(
                csv_out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                row.arch,
                row.r,
                row.n,
                row.k,
                rec.mu_acc,
                rec.mu_acc_std,
                rec.mu_lat,
                rec.mu_lat_std,
                rec.mu_toks,
                rec.mu_toks_std,
                rec.est_toks,
                rec.max_toks,
                rec.speedup.unwrap_or(f64::NAN),
            )?;
        }
        if let Some(out) = jsonl_out.as_deref_mut() {
            serde_json::to_writer(&mut *out, row)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(rows)
}

/// Convenience for acceptance runs: a session over an explicit bundle
/// and teacher verifier, decoding a fixed cycle budget and reporting
/// the mean accepted count. Used to compare architectures after
/// distillation.
pub fn mean_accepted_vs_teacher(
    bundle: &ModelBundle,
    circuit: &Circuit,
    teacher: &Teacher,
    prompt: &[usize],
    cycles: usize,
    seed: u64,
) -> Result<f64> {
    let mut session = Session::new(
        &bundle.backbone,
        &bundle.adapter,
        &bundle.head,
        circuit,
        Verifier::Teacher(teacher),
        DecodeMode::Sample,
        prompt,
        Rng::seed_from_u64(seed),
    )?;
    for _ in 0..cycles {
        session.spec_step()?;
    }
    Ok(session.stats.accepted_total as f64 / cycles as f64)
}
