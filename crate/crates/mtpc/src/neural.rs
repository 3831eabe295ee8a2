//! Context encoding and circuit parameterization.
//!
//! The backbone is deliberately small: a token embedding table, a causal
//! pooling rule producing one d-vector per prefix position, and a stack
//! of dense tanh layers applied position-wise. It only has to reproduce
//! the cost and sharing structure of a layered trunk: the verifier reads
//! the full base stack, while the draft shares the first `L - k` layers
//! and applies private low-rank deltas on the last `k`.
//!
//! Heads map a context embedding to distributions: [`ParamHead`] emits
//! every circuit table through per-row softmaxes, [`TargetStp`] emits
//! the verifier's next-token categorical.

use std::collections::BTreeMap;
use std::io::{Read as IoRead, Write as IoWrite};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::circuit::{build, ArchitectureSpec, Circuit};
use crate::inference::{softmax, CircuitParams};
use crate::{contract_err, spec_err, Error, Result, Rng};

/// Causal pooling rule turning a token prefix into one vector per
/// position.
///
/// `Recency` keeps an exponential moving average with decay `beta`, so
/// recent tokens dominate and order-distinct prefixes stay separable;
/// `Uniform` is the plain running mean (kept as an option, but it makes
/// prefixes with equal token histograms indistinguishable).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum Pooling {
    Uniform,
    Recency { beta: f64 },
}

impl Default for Pooling {
    fn default() -> Self {
        Pooling::Recency { beta: 0.75 }
    }
}

/// One dense layer, out-major weights: `w[o * d + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// The shared toy encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub v: usize,
    /// Embedding width.
    pub d: usize,
    /// Dense layer count.
    pub l: usize,
    pub pooling: Pooling,
    /// Token embedding table, v x d row-major.
    pub embed: Vec<f64>,
    pub layers: Vec<DenseLayer>,
}

/// Incremental pooling accumulator: `pooled = u / z` at any point.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    pub u: Vec<f64>,
    pub z: f64,
    pub len: usize,
}

impl ToyBackbone {
    /// Random weights: unit-Gaussian embeddings, dense weights scaled by
    /// 1/sqrt(d) to keep activations in tanh's responsive range.
    pub fn random(v: usize, d: usize, l: usize, pooling: Pooling, rng: &mut Rng) -> ToyBackbone {
        let unit = Normal::new(0.0, 1.0).expect("valid std");
        let scaled = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        ToyBackbone {
            v,
            d,
            l,
            pooling,
            embed: (0..v * d).map(|_| unit.sample(rng)).collect(),
            layers: (0..l)
                .map(|_| DenseLayer {
                    w: (0..d * d).map(|_| scaled.sample(rng)).collect(),
                    b: vec![0.0; d],
                })
                .collect(),
        }
    }

    pub fn pool_init(&self) -> PoolState {
        PoolState { u: vec![0.0; self.d], z: 0.0, len: 0 }
    }

    /// Absorbs one token into the pooling state.
    pub fn pool_push(&self, st: &mut PoolState, token: usize) {
        debug_assert!(token < self.v, "token out of range");
        let emb = &self.embed[token * self.d..(token + 1) * self.d];
        match self.pooling {
            Pooling::Uniform => {
                for (a, &e) in st.u.iter_mut().zip(emb) {
                    *a += e;
                }
                st.z += 1.0;
            }
            Pooling::Recency { beta } => {
                for (a, &e) in st.u.iter_mut().zip(emb) {
                    *a = beta * *a + e;
                }
                st.z = beta * st.z + 1.0;
            }
        }
        st.len += 1;
    }

    /// The pooled vector for the current prefix.
    pub fn pooled(&self, st: &PoolState) -> Vec<f64> {
        debug_assert!(st.len > 0, "pooling an empty prefix");
        st.u.iter().map(|&x| x / st.z).collect()
    }

    /// Applies base layers `from..to` with tanh after each.
    pub fn apply_layers(&self, x: &[f64], from: usize, to: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers[from..to] {
            h = dense_tanh(&layer.w, &layer.b, &h, self.d);
        }
        h
    }

    /// Trunk activations for a pooled prefix vector: the first
    /// `l - k` layers, shared between verifier and draft.
    pub fn trunk(&self, pooled: &[f64], k: usize) -> Vec<f64> {
        self.apply_layers(pooled, 0, self.l - k)
    }

    /// Verifier embedding from trunk activations: the remaining base
    /// layers, no deltas.
    pub fn finish_base(&self, trunk_h: &[f64], k: usize) -> Vec<f64> {
        self.apply_layers(trunk_h, self.l - k, self.l)
    }
}

pub(crate) fn dense_tanh(w: &[f64], b: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|o| {
            let row = &w[o * d..(o + 1) * d];
            let z: f64 = row.iter().zip(x).map(|(&wi, &xi)| wi * xi).sum::<f64>() + b[o];
            z.tanh()
        })
        .collect()
}

/// Full-prefix verifier embedding: pooling plus all base layers.
pub fn encode(backbone: &ToyBackbone, prefix: &[usize]) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return contract_err("encode needs a non-empty prefix");
    }
    if let Some(&t) = prefix.iter().find(|&&t| t >= backbone.v) {
        return contract_err(format!("token id {t} out of range for v = {}", backbone.v));
    }
    let mut st = backbone.pool_init();
    for &t in prefix {
        backbone.pool_push(&mut st, t);
    }
    Ok(backbone.apply_layers(&backbone.pooled(&st), 0, backbone.l))
}

/// Low-rank additive delta on one private layer:
/// `h' = tanh((W + A B) h + b + bias_delta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    /// d x rho.
    pub a: Vec<f64>,
    /// rho x d; zero at init so the delta starts at exactly zero.
    pub b: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Private deltas for the last `k` backbone layers. `layers[0]` adapts
/// backbone layer `l - k`, and so on. `k = 0` means the draft embedding
/// is the verifier embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftAdapter {
    pub k: usize,
    pub rho: usize,
    pub layers: Vec<AdapterLayer>,
}

impl DraftAdapter {
    /// Standard low-rank init: random down-projection, zero
    /// up-projection, so every delta starts at zero and
    /// `encode_draft == encode` exactly.
    pub fn new(k: usize, rho: usize, d: usize, rng: &mut Rng) -> DraftAdapter {
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        DraftAdapter {
            k,
            rho,
            layers: (0..k)
                .map(|_| AdapterLayer {
                    a: (0..d * rho).map(|_| dist.sample(rng)).collect(),
                    b: vec![0.0; rho * d],
                    bias: vec![0.0; d],
                })
                .collect(),
        }
    }

    /// Draft embedding from shared trunk activations: the last `k`
    /// layers with deltas applied.
    pub fn finish_draft(&self, backbone: &ToyBackbone, trunk_h: &[f64]) -> Vec<f64> {
        let d = backbone.d;
        let mut h = trunk_h.to_vec();
        for (adapter, layer) in self.layers.iter().zip(&backbone.layers[backbone.l - self.k..]) {
            // B h, then A (B h), fused into the dense preactivation.
            let bh: Vec<f64> = (0..self.rho)
                .map(|p| adapter.b[p * d..(p + 1) * d].iter().zip(&h).map(|(&w, &x)| w * x).sum())
                .collect();
            h = (0..d)
                .map(|o| {
                    let base: f64 =
                        layer.w[o * d..(o + 1) * d].iter().zip(&h).map(|(&w, &x)| w * x).sum();
                    let delta: f64 =
                        adapter.a[o * self.rho..(o + 1) * self.rho].iter().zip(&bh).map(|(&w, &x)| w * x).sum();
                    (base + delta + layer.b[o] + adapter.bias[o]).tanh()
                })
                .collect();
        }
        h
    }
}

/// Draft-side embedding: shared trunk, then private adapted layers.
pub fn encode_draft(
    backbone: &ToyBackbone,
    adapter: &DraftAdapter,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return contract_err("encode_draft needs a non-empty prefix");
    }
    if adapter.k > backbone.l {
        return contract_err("adapter depth exceeds layer count");
    }
    let mut st = backbone.pool_init();
    for &t in prefix {
        if t >= backbone.v {
            return contract_err(format!("token id {t} out of range for v = {}", backbone.v));
        }
        backbone.pool_push(&mut st, t);
    }
    let trunk_h = backbone.trunk(&backbone.pooled(&st), adapter.k);
    Ok(adapter.finish_draft(backbone, &trunk_h))
}

/// Per-sum-table head parameters: for each row (sum unit) a `cols x d`
/// matrix mapping the context embedding to input logits, plus an
/// additive logit bias used by the identity initializations.
#[derive(Debug, Clone, PartialEq)]
pub struct SumParam {
    pub rows: usize,
    pub cols: usize,
    /// rows x cols x d, row-major.
    pub r: Vec<f64>,
    /// rows x cols.
    pub bias: Vec<f64>,
}

/// Maps a context embedding to a full [`CircuitParams`]:
/// `phi[i][j] = softmax(W[i][j] e)` and each sum row
/// `softmax(R_row e + bias_row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamHead {
    pub n: usize,
    pub r: usize,
    pub v: usize,
    pub d: usize,
    /// Unembedding tensor, n x r x v x d row-major: one unembedding row
    /// per (position, component, token).
    pub w: Vec<f64>,
    /// One entry per circuit sum table, same order as the circuit.
    pub sums: Vec<SumParam>,
}

impl ParamHead {
    /// Random head matching a circuit's declared shapes.
    pub fn random(c: &Circuit, d: usize, std: f64, rng: &mut Rng) -> ParamHead {
        let dist = Normal::new(0.0, std).expect("valid std");
        let (n, r, v) = (c.spec.n, c.spec.r, c.spec.v);
        ParamHead {
            n,
            r,
            v,
            d,
            w: (0..n * r * v * d).map(|_| dist.sample(rng)).collect(),
            sums: c
                .sum_tables
                .iter()
                .map(|s| SumParam {
                    rows: s.rows,
                    cols: s.cols,
                    r: (0..s.rows * s.cols * d).map(|_| dist.sample(rng)).collect(),
                    bias: vec![0.0; s.rows * s.cols],
                })
                .collect(),
        }
    }

    pub fn shapes_match(&self, c: &Circuit) -> Result<()> {
        if self.n != c.spec.n || self.r != c.spec.r || self.v != c.spec.v {
            return contract_err("head (n, r, v) does not match the circuit");
        }
        if self.sums.len() != c.sum_tables.len() {
            return contract_err("head sum-table count does not match the circuit");
        }
        for (t, (sp, shape)) in self.sums.iter().zip(&c.sum_tables).enumerate() {
            if sp.rows != shape.rows
                || sp.cols != shape.cols
                || sp.r.len() != shape.rows * shape.cols * self.d
                || sp.bias.len() != shape.rows * shape.cols
            {
                return contract_err(format!("head sum table {t} has the wrong shape"));
            }
        }
        if self.w.len() != self.n * self.r * self.v * self.d {
            return contract_err("head unembedding tensor has the wrong size");
        }
        Ok(())
    }

    /// The logit row W[i][j], a v x d slice.
    pub(crate) fn w_block(&self, i: usize, j: usize) -> &[f64] {
        let stride = self.v * self.d;
        let off = (i * self.r + j) * stride;
        &self.w[off..off + stride]
    }
}

/// Instantiates every table for one context embedding. Output rows are
/// softmaxes, so they satisfy the parameter invariants for any finite
/// weights and embedding.
pub fn parameterize(head: &ParamHead, c: &Circuit, e: &[f64]) -> Result<CircuitParams> {
    head.shapes_match(c)?;
    if e.len() != head.d {
        return contract_err("embedding width does not match the head");
    }
    let d = head.d;
    let phi: Vec<Vec<Vec<f64>>> = (0..head.n)
        .map(|i| {
            (0..head.r)
                .map(|j| {
                    let block = head.w_block(i, j);
                    let logits: Vec<f64> = (0..head.v)
                        .map(|t| block[t * d..(t + 1) * d].iter().zip(e).map(|(&w, &x)| w * x).sum())
                        .collect();
                    softmax(&logits)
                })
                .collect()
        })
        .collect();
    let omega: Vec<Vec<Vec<f64>>> = head
        .sums
        .iter()
        .map(|sp| {
            (0..sp.rows)
                .map(|row| {
                    let logits: Vec<f64> = (0..sp.cols)
                        .map(|col| {
                            let off = (row * sp.cols + col) * d;
                            let dot: f64 =
                                sp.r[off..off + d].iter().zip(e).map(|(&w, &x)| w * x).sum();
                            dot + sp.bias[row * sp.cols + col]
                        })
                        .collect();
                    softmax(&logits)
                })
                .collect()
        })
        .collect();
    Ok(CircuitParams { phi, omega })
}

/// The verifier's next-token head: `p = softmax(U e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStp {
    pub v: usize,
    pub d: usize,
    /// v x d row-major.
    pub u: Vec<f64>,
}

impl TargetStp {
    pub fn random(v: usize, d: usize, std: f64, rng: &mut Rng) -> TargetStp {
        let dist = Normal::new(0.0, std).expect("valid std");
        TargetStp { v, d, u: (0..v * d).map(|_| dist.sample(rng)).collect() }
    }
}

/// Next-token categorical from a verifier embedding.
pub fn target_next_dist(stp: &TargetStp, e: &[f64]) -> Vec<f64> {
    debug_assert_eq!(e.len(), stp.d);
    let logits: Vec<f64> = (0..stp.v)
        .map(|t| stp.u[t * stp.d..(t + 1) * stp.d].iter().zip(e).map(|(&w, &x)| w * x).sum())
        .collect();
    softmax(&logits)
}

/// Standard deviation of the small random logits used to break mixture
/// symmetry at initialization without moving the induced joint.
pub const INIT_MIX_STD: f64 = 0.02;

/// Lifts a rank-1 head to rank r by replicating the unembedding block
/// across components and drawing small random mixture logits. Identical
/// components make the induced joint equal the rank-1 joint exactly for
/// every context; training then separates components because the
/// mixture weights start unequal.
pub fn init_cp_from_ff(ff_head: &ParamHead, r: usize, rng: &mut Rng) -> Result<ParamHead> {
    if ff_head.r != 1 {
        return contract_err("init_cp_from_ff expects a rank-1 head");
    }
    let (n, v, d) = (ff_head.n, ff_head.v, ff_head.d);
    let mix = Normal::new(0.0, INIT_MIX_STD).expect("valid std");
    let mut w = Vec::with_capacity(n * r * v * d);
    for i in 0..n {
        let block = ff_head.w_block(i, 0);
        for _ in 0..r {
            w.extend_from_slice(block);
        }
    }
    Ok(ParamHead {
        n,
        r,
        v,
        d,
        w,
        sums: vec![SumParam {
            rows: 1,
            cols: r,
            r: vec![0.0; r * d],
            bias: (0..r).map(|_| mix.sample(rng)).collect(),
        }],
    })
}

/// Turns a rank-r mixture head into a latent-chain head whose transition
/// rows start near-identity: emissions and prior are copied, transition
/// matrices get a diagonal logit bias of `beta` on zero weights. Softmax
/// cannot express an exact identity, but at beta = 10 the off-diagonal
/// mass is below 0.15% for r <= 32.
pub fn init_hmm_identity(cp_head: &ParamHead, beta: f64) -> Result<ParamHead> {
    if !(beta > 0.0) {
        return contract_err("identity bias beta must be positive");
    }
    if cp_head.sums.len() != 1 || cp_head.sums[0].rows != 1 {
        return contract_err("init_hmm_identity expects a single-mixture head");
    }
    let (n, r, v, d) = (cp_head.n, cp_head.r, cp_head.v, cp_head.d);
    let mut sums = Vec::with_capacity(n);
    for _ in 0..n.saturating_sub(1) {
        let mut bias = vec![0.0; r * r];
        for z in 0..r {
            bias[z * r + z] = beta;
        }
        sums.push(SumParam { rows: r, cols: r, r: vec![0.0; r * r * d], bias });
    }
    sums.push(cp_head.sums[0].clone()); // prior = the mixture row
    Ok(ParamHead { n, r, v, d, w: cp_head.w.clone(), sums })
}

/// Lifts a rank-1 head to a binary-hierarchy head: leaf emissions are
/// replicated, internal sums start identity-biased, and the root row
/// gets the small random mixture logits. Identical leaf components make
/// the induced joint equal the rank-1 joint exactly at init.
pub fn init_btree_from_ff(
    ff_head: &ParamHead,
    r: usize,
    beta: f64,
    rng: &mut Rng,
) -> Result<ParamHead> {
    if ff_head.r != 1 {
        return contract_err("init_btree_from_ff expects a rank-1 head");
    }
    if !(beta > 0.0) {
        return contract_err("identity bias beta must be positive");
    }
    let (n, v, d) = (ff_head.n, ff_head.v, ff_head.d);
    let shape = build(ArchitectureSpec::new(crate::circuit::ArchKind::BTree, n, r, v)?)?;
    let mix = Normal::new(0.0, INIT_MIX_STD).expect("valid std");
    let mut w = Vec::with_capacity(n * r * v * d);
    for i in 0..n {
        let block = ff_head.w_block(i, 0);
        for _ in 0..r {
            w.extend_from_slice(block);
        }
    }
    let sums = shape
        .sum_tables
        .iter()
        .map(|s| {
            let mut bias = vec![0.0; s.rows * s.cols];
            if s.rows == 1 {
                // The root mixture row.
                for b in bias.iter_mut() {
                    *b = mix.sample(rng);
                }
            } else {
                for z in 0..s.rows.min(s.cols) {
                    bias[z * s.cols + z] = beta;
                }
            }
            SumParam { rows: s.rows, cols: s.cols, r: vec![0.0; s.rows * s.cols * d], bias }
        })
        .collect();
    Ok(ParamHead { n, r, v, d, w, sums })
}

// ---------------------------------------------------------------------
// Checkpoint format: a single JSON document with full-precision tensors.

const CKPT_FORMAT: &str = "mtpc-ckpt-1";

/// The complete decode-side model bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub backbone: ToyBackbone,
    pub adapter: DraftAdapter,
    pub head: ParamHead,
    pub stp: TargetStp,
    pub arch: ArchitectureSpec,
}

impl ModelBundle {
    pub fn circuit(&self) -> Result<Circuit> {
        build(self.arch)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CkptSpecDoc {
    arch: ArchitectureSpec,
    d: usize,
    l: usize,
    k: usize,
    rho: usize,
    pooling: Pooling,
}

#[derive(Serialize, Deserialize)]
struct CkptDoc {
    format: String,
    spec: CkptSpecDoc,
    tensors: BTreeMap<String, TensorDoc>,
}

fn tensor(shape: Vec<usize>, data: &[f64]) -> TensorDoc {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    TensorDoc { shape, data: data.to_vec() }
}

/// Writes the bundle as a `mtpc-ckpt-1` JSON document.
pub fn save_checkpoint(bundle: &ModelBundle, out: &mut dyn IoWrite) -> Result<()> {
    let b = &bundle.backbone;
    let mut tensors = BTreeMap::new();
    tensors.insert("embed".into(), tensor(vec![b.v, b.d], &b.embed));
    for (i, layer) in b.layers.iter().enumerate() {
        tensors.insert(format!("layer{i}.w"), tensor(vec![b.d, b.d], &layer.w));
        tensors.insert(format!("layer{i}.b"), tensor(vec![b.d], &layer.b));
    }
    let ad = &bundle.adapter;
    for (i, layer) in ad.layers.iter().enumerate() {
        tensors.insert(format!("adapter{i}.a"), tensor(vec![b.d, ad.rho], &layer.a));
        tensors.insert(format!("adapter{i}.b"), tensor(vec![ad.rho, b.d], &layer.b));
        tensors.insert(format!("adapter{i}.bias"), tensor(vec![b.d], &layer.bias));
    }
    let h = &bundle.head;
    tensors.insert("head.w".into(), tensor(vec![h.n, h.r, h.v, h.d], &h.w));
    for (t, sp) in h.sums.iter().enumerate() {
        tensors.insert(format!("head.sum{t}.r"), tensor(vec![sp.rows, sp.cols, h.d], &sp.r));
        tensors.insert(format!("head.sum{t}.bias"), tensor(vec![sp.rows, sp.cols], &sp.bias));
    }
    tensors.insert("stp.u".into(), tensor(vec![bundle.stp.v, bundle.stp.d], &bundle.stp.u));
    let doc = CkptDoc {
        format: CKPT_FORMAT.into(),
        spec: CkptSpecDoc {
            arch: bundle.arch,
            d: b.d,
            l: b.l,
            k: ad.k,
            rho: ad.rho,
            pooling: b.pooling,
        },
        tensors,
    };
    serde_json::to_writer(&mut *out, &doc)?;
    out.flush()?;
    Ok(())
}

/// Reads a `mtpc-ckpt-1` document back into a bundle.
pub fn load_checkpoint(input: &mut dyn IoRead) -> Result<ModelBundle> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let doc: CkptDoc = serde_json::from_str(&text)?;
    if doc.format != CKPT_FORMAT {
        return spec_err(format!("unknown checkpoint format '{}'", doc.format));
    }
    let spec = doc.spec;
    let circuit = build(spec.arch)?;
    let take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let t = doc
            .tensors
            .get(name)
            .ok_or_else(|| Error::Spec(format!("checkpoint misses tensor '{name}'")))?;
        if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return spec_err(format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape));
        }
        Ok(t.data.clone())
    };
    let (v, d, l) = (spec.arch.v, spec.d, spec.l);
    let backbone = ToyBackbone {
        v,
        d,
        l,
        pooling: spec.pooling,
        embed: take("embed", &[v, d])?,
        layers: (0..l)
            .map(|i| {
                Ok(DenseLayer {
                    w: take(&format!("layer{i}.w"), &[d, d])?,
                    b: take(&format!("layer{i}.b"), &[d])?,
                })
            })
            .collect::<Result<_>>()?,
    };
    let adapter = DraftAdapter {
        k: spec.k,
        rho: spec.rho,
        layers: (0..spec.k)
            .map(|i| {
                Ok(AdapterLayer {
                    a: take(&format!("adapter{i}.a"), &[d, spec.rho])?,
                    b: take(&format!("adapter{i}.b"), &[spec.rho, d])?,
                    bias: take(&format!("adapter{i}.bias"), &[d])?,
                })
            })
            .collect::<Result<_>>()?,
    };
    let (n, r) = (spec.arch.n, spec.arch.r);
    let head = ParamHead {
        n,
        r,
        v,
        d,
        w: take("head.w", &[n, r, v, d])?,
        sums: circuit
            .sum_tables
            .iter()
            .enumerate()
            .map(|(t, s)| {
                Ok(SumParam {
                    rows: s.rows,
                    cols: s.cols,
                    r: take(&format!("head.sum{t}.r"), &[s.rows, s.cols, d])?,
                    bias: take(&format!("head.sum{t}.bias"), &[s.rows, s.cols])?,
                })
            })
            .collect::<Result<_>>()?,
    };
    let stp = TargetStp { v, d, u: take("stp.u", &[v, d])? };
    Ok(ModelBundle { backbone, adapter, head, stp, arch: spec.arch })
}
