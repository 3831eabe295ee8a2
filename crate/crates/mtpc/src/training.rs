//! Loss, gradients, optimization, and synthetic teachers.
//!
//! The objective is a discounted sum of per-offset terms over
//! overlapping windows: every position with a non-empty prefix opens a
//! window, and offset j inside it contributes the negative log of the
//! draft's conditional for that token given the window prefix (teacher
//! forcing inside the window, exactly the chain the verifier walks
//! during decoding). Windows at the sequence end are truncated, and a
//! per-position validity mask restricts supervision to answer tokens
//! when sequences carry a prompt prefix.
//!
//! Gradients are reverse-accumulated by hand through the whole stack:
//! the circuit pass (on its log-value tape), the per-row softmaxes of
//! the head, the adapted layers, and the pooling rule. [`grad_check`]
//! validates the result against central finite differences.
//!
//! Teachers are small processes with tractable exact conditionals, used
//! both as data generators for distillation and as exact verifiers.

use std::io::Write as IoWrite;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::circuit::Circuit;
use crate::inference::{evaluate_cuts_traced, sample_categorical, CutsTrace, LogParams};
use crate::neural::{dense_tanh, parameterize, DraftAdapter, ParamHead, Pooling, ToyBackbone};
use crate::{contract_err, spec_err, Error, Result, Rng};

/// A set of token sequences with per-position supervision masks and the
/// window size the loss will use.
///
/// A masked-off position never contributes a loss term as a target, but
/// still appears as context for later targets.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub sequences: Vec<Vec<usize>>,
    /// Aligned with `sequences`: `masks[i][t]` marks token t of
    /// sequence i as a supervised output.
    pub masks: Vec<Vec<bool>>,
    /// Window size n.
    pub n: usize,
}

impl TrainingBatch {
    /// A batch with every position supervised.
    pub fn new(sequences: Vec<Vec<usize>>, n: usize) -> Result<TrainingBatch> {
        let masks = sequences.iter().map(|s| vec![true; s.len()]).collect();
        TrainingBatch::with_masks(sequences, masks, n)
    }

    pub fn with_masks(
        sequences: Vec<Vec<usize>>,
        masks: Vec<Vec<bool>>,
        n: usize,
    ) -> Result<TrainingBatch> {
        if n < 1 {
            return spec_err("window size n must be at least 1");
        }
        if sequences.is_empty() {
            return contract_err("empty batch");
        }
        if sequences.len() != masks.len()
            || sequences.iter().zip(&masks).any(|(s, m)| s.len() != m.len())
        {
            return contract_err("masks do not align with sequences");
        }
        Ok(TrainingBatch { sequences, masks, n })
    }

    /// Masks the first `prompt_len` tokens of every sequence off, the
    /// prompt/answer split.
    pub fn mask_prompt(&mut self, prompt_len: usize) {
        for mask in &mut self.masks {
            let cut = prompt_len.min(mask.len());
            for m in &mut mask[..cut] {
                *m = false;
            }
        }
    }
}

fn default_gamma() -> f64 {
    0.9
}

/// Loss shape: discount and window size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Per-offset discount, weight gamma^(j-1) on offset j.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Window size n; must agree with the batch and the circuit.
    pub n: usize,
}

impl LossConfig {
    pub fn new(gamma: f64, n: usize) -> Result<LossConfig> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return spec_err(format!("gamma must lie in (0, 1], got {gamma}"));
        }
        if n < 1 {
            return spec_err("window size n must be at least 1");
        }
        Ok(LossConfig { gamma, n })
    }

    /// gamma = 0.9 for a given window.
    pub fn for_window(n: usize) -> LossConfig {
        LossConfig { gamma: default_gamma(), n }
    }
}

/// Which parameter groups receive gradients and optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainVars {
    pub backbone: bool,
    pub adapter: bool,
    pub head: bool,
}

impl Default for TrainVars {
    fn default() -> Self {
        TrainVars { backbone: true, adapter: true, head: true }
    }
}

impl TrainVars {
    /// Freeze everything below the head, the usual drafting setup.
    pub fn head_only() -> TrainVars {
        TrainVars { backbone: false, adapter: false, head: true }
    }
}

/// The trainable draft stack: shared encoder, private adapted layers,
/// parameter head, and the circuit the head feeds.
#[derive(Debug, Clone)]
pub struct MtpModel {
    pub backbone: ToyBackbone,
    pub adapter: DraftAdapter,
    pub head: ParamHead,
    pub circuit: Circuit,
    pub train: TrainVars,
}

impl MtpModel {
    pub fn new(
        backbone: ToyBackbone,
        adapter: DraftAdapter,
        head: ParamHead,
        circuit: Circuit,
    ) -> Result<MtpModel> {
        head.shapes_match(&circuit)?;
        if backbone.v != circuit.spec.v {
            return contract_err("backbone and circuit disagree on the vocabulary");
        }
        if head.d != backbone.d {
            return contract_err("head and backbone disagree on the embedding width");
        }
        if adapter.k > backbone.l {
            return contract_err("adapter depth exceeds layer count");
        }
        Ok(MtpModel { backbone, adapter, head, circuit, train: TrainVars::default() })
    }
}

/// Gradient buffers mirroring every parameter tensor. Buffers for
/// frozen groups stay zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub embed: Vec<f64>,
    pub layer_w: Vec<Vec<f64>>,
    pub layer_b: Vec<Vec<f64>>,
    pub adapter_a: Vec<Vec<f64>>,
    pub adapter_b: Vec<Vec<f64>>,
    pub adapter_bias: Vec<Vec<f64>>,
    pub head_w: Vec<f64>,
    pub sum_r: Vec<Vec<f64>>,
    pub sum_bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(m: &MtpModel) -> Gradients {
        Gradients {
            embed: vec![0.0; m.backbone.embed.len()],
            layer_w: m.backbone.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            layer_b: m.backbone.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            adapter_a: m.adapter.layers.iter().map(|l| vec![0.0; l.a.len()]).collect(),
            adapter_b: m.adapter.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            adapter_bias: m.adapter.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            head_w: vec![0.0; m.head.w.len()],
            sum_r: m.head.sums.iter().map(|s| vec![0.0; s.r.len()]).collect(),
            sum_bias: m.head.sums.iter().map(|s| vec![0.0; s.bias.len()]).collect(),
        }
    }
}

/// Loss value plus its per-offset decomposition (undiscounted).
#[derive(Debug, Clone)]
pub struct LossReport {
    /// The discounted total.
    pub total: f64,
    /// Per-offset means, entry j-1 for offset j; 0.0 where the batch
    /// has no supervised target at that offset.
    pub per_offset: Vec<f64>,
}

/// Per-sequence supervision structure, precomputed once per batch.
struct BatchPlan {
    /// valid[i][j-1]: supervised (anchor, offset-j) pair count.
    valid: Vec<Vec<usize>>,
    /// n_j[j-1]: sequences with at least one supervised pair at offset j.
    n_j: Vec<usize>,
}

fn plan_batch(batch: &TrainingBatch, v: usize) -> Result<BatchPlan> {
    let n = batch.n;
    let mut valid = Vec::with_capacity(batch.sequences.len());
    let mut n_j = vec![0usize; n];
    for (seq, mask) in batch.sequences.iter().zip(&batch.masks) {
        if let Some(&t) = seq.iter().find(|&&t| t >= v) {
            return contract_err(format!("token id {t} out of range for v = {v}"));
        }
        let mut counts = vec![0usize; n];
        for t in 1..seq.len() {
            for j in 1..=n.min(seq.len() - t) {
                if mask[t + j - 1] {
                    counts[j - 1] += 1;
                }
            }
        }
        for j in 0..n {
            if counts[j] > 0 {
                n_j[j] += 1;
            }
        }
        valid.push(counts);
    }
    if n_j.iter().all(|&c| c == 0) {
        return contract_err("batch has no supervised positions");
    }
    Ok(BatchPlan { valid, n_j })
}

/// The discounted multi-offset loss.
///
/// `L = sum_j gamma^(j-1) L_j`, where `L_j` averages, over sequences
/// and then over that sequence's supervised anchors, the negative log
/// conditional of the offset-j token given the window prefix and the
/// context. Offsets a sequence never supervises contribute 0.
pub fn mtp_loss(model: &MtpModel, batch: &TrainingBatch, cfg: &LossConfig) -> Result<LossReport> {
    loss_impl(model, batch, cfg, false).map(|(report, _)| report)
}

/// The loss together with gradients for every trainable group.
pub fn grad(model: &MtpModel, batch: &TrainingBatch, cfg: &LossConfig) -> Result<(LossReport, Gradients)> {
    loss_impl(model, batch, cfg, true).map(|(report, g)| (report, g.expect("gradients requested")))
}

/// Forward tape for one context: activations after every layer
/// (`hs[0]` is the pooled vector) and the low-rank bottleneck vectors
/// of the adapted layers.
struct EncTape {
    hs: Vec<Vec<f64>>,
    bhs: Vec<Vec<f64>>,
}

fn encode_tape(backbone: &ToyBackbone, adapter: &DraftAdapter, pooled: Vec<f64>) -> EncTape {
    let d = backbone.d;
    let shared = backbone.l - adapter.k;
    let mut hs = Vec::with_capacity(backbone.l + 1);
    hs.push(pooled);
    for layer in &backbone.layers[..shared] {
        let h = dense_tanh(&layer.w, &layer.b, hs.last().expect("seeded"), d);
        hs.push(h);
    }
    let mut bhs = Vec::with_capacity(adapter.k);
    for (ad, layer) in adapter.layers.iter().zip(&backbone.layers[shared..]) {
        let h_in = hs.last().expect("seeded");
        let bh: Vec<f64> = (0..adapter.rho)
            .map(|p| ad.b[p * d..(p + 1) * d].iter().zip(h_in).map(|(&w, &x)| w * x).sum())
            .collect();
        let h: Vec<f64> = (0..d)
            .map(|o| {
                let base: f64 =
                    layer.w[o * d..(o + 1) * d].iter().zip(h_in).map(|(&w, &x)| w * x).sum();
                let delta: f64 = ad.a[o * adapter.rho..(o + 1) * adapter.rho]
                    .iter()
                    .zip(&bh)
                    .map(|(&w, &x)| w * x)
                    .sum();
                (base + delta + layer.b[o] + ad.bias[o]).tanh()
            })
            .collect();
        bhs.push(bh);
        hs.push(h);
    }
    EncTape { hs, bhs }
}

fn loss_impl(
    model: &MtpModel,
    batch: &TrainingBatch,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<Gradients>)> {
    if !(cfg.gamma > 0.0 && cfg.gamma <= 1.0) {
        return spec_err(format!("gamma must lie in (0, 1], got {}", cfg.gamma));
    }
    let n = model.circuit.spec.n;
    if cfg.n != n || batch.n != n {
        return contract_err(format!(
            "window size mismatch: circuit n = {n}, loss config n = {}, batch n = {}",
            cfg.n, batch.n
        ));
    }
    let plan = plan_batch(batch, model.backbone.v)?;
    let flags = model.train;
    let want_e_grad =
        want_grad && (flags.backbone || (flags.adapter && model.adapter.k > 0));
    let mut grads = want_grad.then(|| Gradients::zeros(model));
    // gamma^(j-1), index j-1.
    let wt: Vec<f64> = (0..n).map(|j| cfg.gamma.powi(j as i32)).collect();
    let mut offset_sums = vec![0.0f64; n];

    for (i, (seq, mask)) in batch.sequences.iter().zip(&batch.masks).enumerate() {
        if plan.valid[i].iter().all(|&c| c == 0) {
            continue;
        }
        // Term weight on the offset-j negative log conditional of this
        // sequence, inside the discounted total.
        let coeff: Vec<f64> = (0..n)
            .map(|j| {
                if plan.valid[i][j] == 0 {
                    0.0
                } else {
                    wt[j] / (plan.n_j[j] as f64 * plan.valid[i][j] as f64)
                }
            })
            .collect();
        let mut pool = model.backbone.pool_init();
        for t in 1..seq.len() {
            model.backbone.pool_push(&mut pool, seq[t - 1]);
            let reach = n.min(seq.len() - t);
            let m_max = match (1..=reach).rev().find(|&j| mask[t + j - 1]) {
                Some(j) => j,
                None => continue,
            };
            let pooled = model.backbone.pooled(&pool);
            let tape = encode_tape(&model.backbone, &model.adapter, pooled);
            let e = tape.hs.last().expect("seeded").clone();
            let params = parameterize(&model.head, &model.circuit, &e)?;
            let lp = LogParams::new(&params);
            let window = &seq[t..t + m_max];
            let cuts: Vec<usize> = (1..=m_max).collect();
            let (pm, trace) = evaluate_cuts_traced(&model.circuit, &lp, window, &cuts);
            for j in 1..=m_max {
                if !mask[t + j - 1] {
                    continue;
                }
                let prev = if j >= 2 { pm[j - 2] } else { 0.0 };
                offset_sums[j - 1] += (prev - pm[j - 1]) / plan.valid[i][j - 1] as f64;
            }
            let Some(g) = grads.as_mut() else { continue };
            // d total / d pm[j]: the own term subtracts pm[j], the next
            // term adds it back as its conditioning marginal.
            let seeds: Vec<f64> = (1..=m_max)
                .map(|j| {
                    let own = if mask[t + j - 1] { -coeff[j - 1] } else { 0.0 };
                    let next = if j < m_max && mask[t + j] { coeff[j] } else { 0.0 };
                    own + next
                })
                .collect();
            let (gphi, gomega) = backprop_cuts(&model.circuit, &lp, &cuts, &trace, &seeds);
            let de = head_backward(model, &params, window, &gphi, &gomega, &e, g, want_e_grad);
            if let Some(de) = de {
                encoder_backward(model, &tape, seq, t, de, g);
            }
        }
    }

    let per_offset: Vec<f64> = offset_sums
        .iter()
        .zip(&plan.n_j)
        .map(|(&s, &nj)| if nj > 0 { s / nj as f64 } else { 0.0 })
        .collect();
    let total = per_offset.iter().zip(&wt).map(|(&l, &w)| l * w).sum();
    Ok((LossReport { total, per_offset }, grads))
}

/// Reverse pass over the cut-evaluation tape. Returns gradients with
/// respect to the log input tables (only the observed token of each
/// position carries mass) and the log sum tables.
fn backprop_cuts(
    c: &Circuit,
    lp: &LogParams,
    cuts: &[usize],
    trace: &CutsTrace,
    seeds: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let k = cuts.len();
    let mut gphi = vec![vec![0.0f64; c.spec.r]; c.spec.n];
    let mut gomega: Vec<Vec<Vec<f64>>> =
        c.sum_tables.iter().map(|s| vec![vec![0.0; s.cols]; s.rows]).collect();
    let mut adj: Vec<Vec<f64>> = trace.values.iter().map(|v| vec![0.0; v.len()]).collect();
    for (s, &seed) in seeds.iter().enumerate() {
        adj[c.output][s] = seed;
    }
    for (li, layer) in c.layers.iter().enumerate().rev() {
        match layer.kind {
            crate::circuit::LayerKind::Input => {
                let pos = layer.table.expect("input layer carries its position");
                for u in 0..layer.width {
                    for (s, &cut) in cuts.iter().enumerate() {
                        let a = adj[li][u * k + s];
                        if a != 0.0 && pos < cut {
                            gphi[pos][u] += a;
                        }
                    }
                }
            }
            crate::circuit::LayerKind::Product => {
                for &j in &layer.inputs {
                    for idx in 0..adj[li].len() {
                        let a = adj[li][idx];
                        if a != 0.0 {
                            adj[j][idx] += a;
                        }
                    }
                }
            }
            crate::circuit::LayerKind::Sum => {
                let tid = layer.table.expect("sum layer carries a table");
                let table = &lp.ln_omega[tid];
                for u in 0..layer.width {
                    let row = &table[u];
                    for s in 0..k {
                        let a = adj[li][u * k + s];
                        if a == 0.0 {
                            continue;
                        }
                        let l_out = trace.values[li][u * k + s];
                        if l_out == f64::NEG_INFINITY {
                            continue;
                        }
                        let mut col = 0usize;
                        for &j in &layer.inputs {
                            for uu in 0..c.layers[j].width {
                                let l_in = trace.values[j][uu * k + s];
                                if row[col] + l_in > f64::NEG_INFINITY {
                                    let rho = (row[col] + l_in - l_out).exp();
                                    let contrib = a * rho;
                                    adj[j][uu * k + s] += contrib;
                                    gomega[tid][u][col] += contrib;
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (gphi, gomega)
}

/// Maps log-table gradients through the per-row softmaxes onto the head
/// weights; returns the context-embedding gradient when requested.
fn head_backward(
    model: &MtpModel,
    params: &crate::inference::CircuitParams,
    window: &[usize],
    gphi: &[Vec<f64>],
    gomega: &[Vec<Vec<f64>>],
    e: &[f64],
    g: &mut Gradients,
    want_de: bool,
) -> Option<Vec<f64>> {
    let head = &model.head;
    let d = head.d;
    let mut de = want_de.then(|| vec![0.0f64; d]);
    let head_on = model.train.head;
    for (pos, row_g) in gphi.iter().enumerate() {
        if pos >= window.len() {
            continue;
        }
        let obs = window[pos];
        for (u, &gv) in row_g.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let probs = &params.phi[pos][u];
            let block = head.w_block(pos, u);
            let woff = (pos * head.r + u) * head.v * d;
            for t in 0..head.v {
                // Softmax pullback of a single log-probability pick.
                let dz = if t == obs { gv * (1.0 - probs[t]) } else { -gv * probs[t] };
                if dz == 0.0 {
                    continue;
                }
                if head_on {
                    let dst = &mut g.head_w[woff + t * d..woff + (t + 1) * d];
                    for (w, &x) in dst.iter_mut().zip(e) {
                        *w += dz * x;
                    }
                }
                if let Some(de) = de.as_mut() {
                    for (acc, &w) in de.iter_mut().zip(&block[t * d..(t + 1) * d]) {
                        *acc += dz * w;
                    }
                }
            }
        }
    }
    for (tid, table_g) in gomega.iter().enumerate() {
        let sp = &head.sums[tid];
        for (row, row_g) in table_g.iter().enumerate() {
            let total: f64 = row_g.iter().sum();
            if total == 0.0 && row_g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let probs = &params.omega[tid][row];
            for col in 0..sp.cols {
                let dz = row_g[col] - total * probs[col];
                if dz == 0.0 {
                    continue;
                }
                let off = (row * sp.cols + col) * d;
                if head_on {
                    g.sum_bias[tid][row * sp.cols + col] += dz;
                    let dst = &mut g.sum_r[tid][off..off + d];
                    for (w, &x) in dst.iter_mut().zip(e) {
                        *w += dz * x;
                    }
                }
                if let Some(de) = de.as_mut() {
                    for (acc, &w) in de.iter_mut().zip(&sp.r[off..off + d]) {
                        *acc += dz * w;
                    }
                }
            }
        }
    }
    de
}

/// Backpropagates an embedding gradient through the adapted layers, the
/// shared layers, and the pooling rule. `t` is the prefix length.
fn encoder_backward(
    model: &MtpModel,
    tape: &EncTape,
    seq: &[usize],
    t: usize,
    de: Vec<f64>,
    g: &mut Gradients,
) {
    let backbone = &model.backbone;
    let adapter = &model.adapter;
    let d = backbone.d;
    let shared = backbone.l - adapter.k;
    let flags = model.train;
    let mut dh = de;
    for m in (0..backbone.l).rev() {
        let h_out = &tape.hs[m + 1];
        let h_in = &tape.hs[m];
        let dz: Vec<f64> =
            dh.iter().zip(h_out).map(|(&a, &h)| a * (1.0 - h * h)).collect();
        let layer = &backbone.layers[m];
        if flags.backbone {
            let gw = &mut g.layer_w[m];
            for o in 0..d {
                let dzo = dz[o];
                if dzo == 0.0 {
                    continue;
                }
                for (w, &x) in gw[o * d..(o + 1) * d].iter_mut().zip(h_in) {
                    *w += dzo * x;
                }
                g.layer_b[m][o] += dzo;
            }
        }
        let mut dh_in = vec![0.0f64; d];
        for o in 0..d {
            let dzo = dz[o];
            if dzo == 0.0 {
                continue;
            }
            for (acc, &w) in dh_in.iter_mut().zip(&layer.w[o * d..(o + 1) * d]) {
                *acc += dzo * w;
            }
        }
        if m >= shared {
            let ai = m - shared;
            let ad = &adapter.layers[ai];
            let bh = &tape.bhs[ai];
            let mut dbh = vec![0.0f64; adapter.rho];
            for o in 0..d {
                let dzo = dz[o];
                if dzo == 0.0 {
                    continue;
                }
                if flags.adapter {
                    g.adapter_bias[ai][o] += dzo;
                    for (w, &x) in g.adapter_a[ai][o * adapter.rho..(o + 1) * adapter.rho]
                        .iter_mut()
                        .zip(bh)
                    {
                        *w += dzo * x;
                    }
                }
                for (acc, &w) in dbh.iter_mut().zip(&ad.a[o * adapter.rho..(o + 1) * adapter.rho])
                {
                    *acc += dzo * w;
                }
            }
            for p in 0..adapter.rho {
                let dbp = dbh[p];
                if dbp == 0.0 {
                    continue;
                }
                if flags.adapter {
                    for (w, &x) in g.adapter_b[ai][p * d..(p + 1) * d].iter_mut().zip(h_in) {
                        *w += dbp * x;
                    }
                }
                for (acc, &w) in dh_in.iter_mut().zip(&ad.b[p * d..(p + 1) * d]) {
                    *acc += dbp * w;
                }
            }
        }
        if m == shared && !flags.backbone {
            return; // nothing trainable below the adapted layers
        }
        dh = dh_in;
    }
    if !flags.backbone {
        return;
    }
    // Pooling: pooled = u / z with u a decayed sum of embedding rows.
    // z is rebuilt by the forward recurrence so the two passes agree.
    let beta = match backbone.pooling {
        Pooling::Uniform => 1.0,
        Pooling::Recency { beta } => beta,
    };
    let mut z = 0.0f64;
    for _ in 0..t {
        z = beta * z + 1.0;
    }
    let mut c = 1.0 / z; // coefficient of the most recent token
    for idx in (0..t).rev() {
        let row = &mut g.embed[seq[idx] * d..(seq[idx] + 1) * d];
        for (acc, &dp) in row.iter_mut().zip(&dh) {
            *acc += c * dp;
        }
        c *= beta;
    }
}

// ---------------------------------------------------------------------
// Flat parameter views: one canonical order shared by the optimizer and
// the finite-difference check. Frozen groups are excluded.

fn flat_params(m: &MtpModel) -> Vec<f64> {
    let mut out = Vec::new();
    if m.train.backbone {
        out.extend_from_slice(&m.backbone.embed);
        for l in &m.backbone.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
    }
    if m.train.adapter {
        for l in &m.adapter.layers {
            out.extend_from_slice(&l.a);
            out.extend_from_slice(&l.b);
            out.extend_from_slice(&l.bias);
        }
    }
    if m.train.head {
        out.extend_from_slice(&m.head.w);
        for s in &m.head.sums {
            out.extend_from_slice(&s.r);
            out.extend_from_slice(&s.bias);
        }
    }
    out
}

fn set_flat_params(m: &mut MtpModel, theta: &[f64]) {
    let mut at = 0usize;
    let take = |dst: &mut [f64], at: &mut usize| {
        dst.copy_from_slice(&theta[*at..*at + dst.len()]);
        *at += dst.len();
    };
    if m.train.backbone {
        take(&mut m.backbone.embed, &mut at);
        for l in &mut m.backbone.layers {
            take(&mut l.w, &mut at);
            take(&mut l.b, &mut at);
        }
    }
    if m.train.adapter {
        for l in &mut m.adapter.layers {
            take(&mut l.a, &mut at);
            take(&mut l.b, &mut at);
            take(&mut l.bias, &mut at);
        }
    }
    if m.train.head {
        take(&mut m.head.w, &mut at);
        for s in &mut m.head.sums {
            take(&mut s.r, &mut at);
            take(&mut s.bias, &mut at);
        }
    }
    debug_assert_eq!(at, theta.len(), "flat parameter length mismatch");
}

fn flat_grads(m: &MtpModel, g: &Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    if m.train.backbone {
        out.extend_from_slice(&g.embed);
        for (w, b) in g.layer_w.iter().zip(&g.layer_b) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }
    if m.train.adapter {
        for ((a, b), bias) in g.adapter_a.iter().zip(&g.adapter_b).zip(&g.adapter_bias) {
            out.extend_from_slice(a);
            out.extend_from_slice(b);
            out.extend_from_slice(bias);
        }
    }
    if m.train.head {
        out.extend_from_slice(&g.head_w);
        for (r, bias) in g.sum_r.iter().zip(&g.sum_bias) {
            out.extend_from_slice(r);
            out.extend_from_slice(bias);
        }
    }
    out
}

/// Central finite-difference check of [`grad`]. Checks every trainable
/// coordinate when there are at most 512, otherwise a seeded subset of
/// 256. Returns the worst error `|a - n| / max(|a|, |n|, 1e-3)`; the
/// floor keeps finite-difference noise on near-zero coordinates from
/// dominating.
pub fn grad_check(model: &MtpModel, batch: &TrainingBatch, cfg: &LossConfig, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return contract_err("finite-difference step must be positive");
    }
    let (_, grads) = grad(model, batch, cfg)?;
    let analytic = flat_grads(model, &grads);
    let total = analytic.len();
    if total == 0 {
        return contract_err("no trainable parameters to check");
    }
    let coords: Vec<usize> = if total <= 512 {
        (0..total).collect()
    } else {
        let mut rng = Rng::seed_from_u64(0x5eed_c0de);
        let mut pool: Vec<usize> = (0..total).collect();
        for i in 0..256 {
            let j = rng.random_range(i..total);
            pool.swap(i, j);
        }
        pool.truncate(256);
        pool
    };
    let mut probe = model.clone();
    let theta = flat_params(model);
    let mut worst = 0.0f64;
    for &ci in &coords {
        let mut t = theta.clone();
        t[ci] = theta[ci] + step;
        set_flat_params(&mut probe, &t);
        let up = mtp_loss(&probe, batch, cfg)?.total;
        t[ci] = theta[ci] - step;
        set_flat_params(&mut probe, &t);
        let down = mtp_loss(&probe, batch, cfg)?.total;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[ci];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

fn default_lr() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Adam settings. A zero learning rate is allowed and performs no
/// update, useful as a control.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub steps: usize,
    /// Sequences drawn (with replacement) per step; 0 uses the full set.
    #[serde(default)]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn new(steps: usize, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            steps,
            batch: 0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return spec_err("learning rate must be finite and non-negative");
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return spec_err("Adam moment decays must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return spec_err("Adam epsilon must be positive");
        }
        Ok(())
    }
}

/// One loss-trace row, serialized as JSONL by [`train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTraceRow {
    pub step: usize,
    pub loss: f64,
    pub l_j: Vec<f64>,
}

/// Training outcome summary plus the full per-step trace.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub first_loss: f64,
    pub final_loss: f64,
    pub trace: Vec<LossTraceRow>,
}

/// Runs Adam on the trainable groups. Deterministic given the seed;
/// aborts with a divergence error if the loss stops being finite. When
/// `trace_out` is given, each step appends one JSONL row
/// `{"step","loss","l_j":[...]}`.
pub fn train(
    model: &mut MtpModel,
    data: &TrainingBatch,
    loss_cfg: &LossConfig,
    opt: &OptimizerConfig,
    mut trace_out: Option<&mut dyn IoWrite>,
) -> Result<TrainReport> {
    opt.validate()?;
    if data.sequences.is_empty() {
        return contract_err("empty training set");
    }
    let mut rng = Rng::seed_from_u64(opt.seed);
    let full = opt.batch == 0 || opt.batch >= data.sequences.len();
    let mut m1 = vec![0.0f64; flat_params(model).len()];
    let mut m2 = vec![0.0f64; m1.len()];
    let mut trace = Vec::with_capacity(opt.steps);
    let (mut first_loss, mut final_loss) = (f64::NAN, f64::NAN);
    for step in 0..opt.steps {
        let (report, grads) = if full {
            grad(model, data, loss_cfg)?
        } else {
            let mut seqs = Vec::with_capacity(opt.batch);
            let mut masks = Vec::with_capacity(opt.batch);
            for _ in 0..opt.batch {
                let i = rng.random_range(0..data.sequences.len());
                seqs.push(data.sequences[i].clone());
                masks.push(data.masks[i].clone());
            }
            let sub = TrainingBatch { sequences: seqs, masks, n: data.n };
            grad(model, &sub, loss_cfg)?
        };
        if !report.total.is_finite() {
            return Err(Error::Diverged(format!(
                "loss became {} at step {step}",
                report.total
            )));
        }
        if step == 0 {
            first_loss = report.total;
        }
        final_loss = report.total;
        let row = LossTraceRow { step, loss: report.total, l_j: report.per_offset.clone() };
        if let Some(out) = trace_out.as_deref_mut() {
            serde_json::to_writer(&mut *out, &row)?;
            out.write_all(b"\n")?;
        }
        trace.push(row);
        let gflat = flat_grads(model, &grads);
        if gflat.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged(format!("gradient became non-finite at step {step}")));
        }
        let mut theta = flat_params(model);
        let bc1 = 1.0 - opt.beta1.powi(step as i32 + 1);
        let bc2 = 1.0 - opt.beta2.powi(step as i32 + 1);
        for i in 0..theta.len() {
            m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * gflat[i];
            m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * gflat[i] * gflat[i];
            let mhat = m1[i] / bc1;
            let vhat = m2[i] / bc2;
            theta[i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
        set_flat_params(model, &theta);
    }
    Ok(TrainReport { first_loss, final_loss, trace })
}

// ---------------------------------------------------------------------
// Synthetic teachers with exact conditionals.

/// A small sequence process with a tractable exact filter, used both to
/// generate distillation data and as an exact verifier.
#[derive(Debug, Clone)]
pub enum Teacher {
    /// Order-1 Markov chain over tokens.
    NGram { init: Vec<f64>, trans: Vec<Vec<f64>> },
    /// A hidden-mode chain: blocks of `block` tokens, each block
    /// emitted by one of `modes` modes chosen uniformly at block start.
    /// Inside a block the state walks deterministically, and state
    /// (m, o) emits token `m * block + o` with probability `1 - eps`
    /// and a uniform token otherwise. Consecutive tokens are strongly
    /// coupled through the mode, so position-wise independent drafts
    /// mix modes and get rejected.
    LatentChain { modes: usize, block: usize, v: usize, eps: f64 },
}

/// Filter state paired with a [`Teacher`]: the last token for the
/// Markov chain, the posterior over (mode, offset) for the chain with
/// hidden modes.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherState {
    Last(Option<usize>),
    Belief(Vec<f64>),
}

impl Teacher {
    pub fn ngram(init: Vec<f64>, trans: Vec<Vec<f64>>) -> Result<Teacher> {
        let v = init.len();
        if v < 2 || trans.len() != v || trans.iter().any(|r| r.len() != v) {
            return spec_err("transition table must be square and match the initial row");
        }
        let simplex = |row: &[f64]| {
            row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        if !simplex(&init) || !trans.iter().all(|r| simplex(r)) {
            return spec_err("teacher rows must be probability distributions");
        }
        Ok(Teacher::NGram { init, trans })
    }

    pub fn latent_chain(modes: usize, block: usize, v: usize, eps: f64) -> Result<Teacher> {
        if modes < 2 || block < 2 {
            return spec_err("latent chain needs at least 2 modes and a block of at least 2");
        }
        if modes * block > v {
            return spec_err(format!(
                "latent chain needs v >= modes * block = {}, got v = {v}",
                modes * block
            ));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return spec_err("emission noise eps must lie in (0, 1)");
        }
        Ok(Teacher::LatentChain { modes, block, v, eps })
    }

    pub fn vocab(&self) -> usize {
        match self {
            Teacher::NGram { init, .. } => init.len(),
            Teacher::LatentChain { v, .. } => *v,
        }
    }

    /// Filter state for the empty prefix.
    pub fn start(&self) -> TeacherState {
        match self {
            Teacher::NGram { .. } => TeacherState::Last(None),
            Teacher::LatentChain { modes, block, .. } => {
                let mut b = vec![0.0; modes * block];
                for m in 0..*modes {
                    b[m * block] = 1.0 / *modes as f64;
                }
                TeacherState::Belief(b)
            }
        }
    }

    /// Exact next-token distribution under the current filter state.
    pub fn next_dist(&self, st: &TeacherState) -> Vec<f64> {
        match (self, st) {
            (Teacher::NGram { init, trans }, TeacherState::Last(last)) => match last {
                None => init.clone(),
                Some(t) => trans[*t].clone(),
            },
            (Teacher::LatentChain { modes, block, v, eps }, TeacherState::Belief(b)) => {
                let mut out = vec![*eps / *v as f64; *v];
                for s in 0..modes * block {
                    out[s] += (1.0 - eps) * b[s];
                }
                out
            }
            _ => unreachable!("state kind does not match the teacher"),
        }
    }

    /// Advances the filter state past an observed token.
    pub fn advance(&self, st: &mut TeacherState, token: usize) {
        debug_assert!(token < self.vocab(), "token out of range");
        match (self, st) {
            (Teacher::NGram { .. }, TeacherState::Last(last)) => *last = Some(token),
            (Teacher::LatentChain { modes, block, v, eps }, TeacherState::Belief(b)) => {
                let uni = eps / *v as f64;
                let mut total = 0.0;
                for (s, p) in b.iter_mut().enumerate() {
                    let like = if s == token { 1.0 - eps + uni } else { uni };
                    *p *= like;
                    total += *p;
                }
                let mut next = vec![0.0; b.len()];
                let mut boundary = 0.0;
                for m in 0..*modes {
                    for o in 0..*block {
                        let p = b[m * block + o] / total;
                        if o + 1 < *block {
                            next[m * block + o + 1] += p;
                        } else {
                            boundary += p;
                        }
                    }
                }
                if boundary > 0.0 {
                    let share = boundary / *modes as f64;
                    for m in 0..*modes {
                        next[m * block] += share;
                    }
                }
                *b = next;
            }
            _ => unreachable!("state kind does not match the teacher"),
        }
    }

    /// Exact conditional after a full prefix, from a fresh filter.
    pub fn conditional(&self, prefix: &[usize]) -> Vec<f64> {
        let mut st = self.start();
        for &t in prefix {
            self.advance(&mut st, t);
        }
        self.next_dist(&st)
    }

    /// Samples one sequence from the process itself (not the filter).
    pub fn sample_seq(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        match self {
            Teacher::NGram { init, trans } => {
                let mut out = Vec::with_capacity(len);
                for i in 0..len {
                    let row = if i == 0 { init } else { &trans[out[i - 1]] };
                    out.push(sample_categorical(row, rng));
                }
                out
            }
            Teacher::LatentChain { modes, block, v, eps } => {
                let mut out = Vec::with_capacity(len);
                let mut mode = rng.random_range(0..*modes);
                let mut off = 0usize;
                for _ in 0..len {
                    let tok = if rng.random::<f64>() < 1.0 - eps {
                        mode * block + off
                    } else {
                        rng.random_range(0..*v)
                    };
                    out.push(tok);
                    off += 1;
                    if off == *block {
                        off = 0;
                        mode = rng.random_range(0..*modes);
                    }
                }
                out
            }
        }
    }
}

/// A row from the flat Dirichlet: normalized unit exponentials.
fn dirichlet_row(v: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..v).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|&x| x / z).collect()
}

/// Builds a teacher by kind name: `NGRAM` (random order-1 chain) or
/// `LATENT_CHAIN` (hidden-mode chain; block 8 when the vocabulary
/// allows it, otherwise 2, with up to 4 modes). The latent chain is
/// fully determined by its sizes, so its seed only matters for the
/// Markov kind.
pub fn make_teacher(kind: &str, v: usize, seed: u64) -> Result<Teacher> {
    match kind {
        "NGRAM" => {
            if v < 2 {
                return spec_err("NGRAM teacher needs v >= 2");
            }
            let mut rng = Rng::seed_from_u64(seed);
            let init = dirichlet_row(v, &mut rng);
            let trans = (0..v).map(|_| dirichlet_row(v, &mut rng)).collect();
            Teacher::ngram(init, trans)
        }
        "LATENT_CHAIN" => {
            if v < 4 {
                return spec_err("LATENT_CHAIN teacher needs v >= 4");
            }
            let block = if v >= 16 { 8 } else { 2 };
            let modes = (v / block).min(4);
            Teacher::latent_chain(modes, block, v, 0.03)
        }
        other => spec_err(format!("unknown teacher kind '{other}'")),
    }
}

/// Samples `count` sequences of `len` tokens from the teacher,
/// deterministically in the seed. Assemble them into a
/// [`TrainingBatch`] with [`TrainingBatch::new`] (all positions
/// supervised) or mask a prompt prefix with
/// [`TrainingBatch::mask_prompt`].
pub fn distill_dataset(teacher: &Teacher, count: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..count).map(|_| teacher.sample_seq(len, &mut rng)).collect()
}
