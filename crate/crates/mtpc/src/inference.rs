//! Exact inference over a parameterized circuit.
//!
//! All accumulation happens in the log domain with a stable
//! log-sum-exp; probability-space numbers appear only at the API edges.
//! Log 0 is represented as `f64::NEG_INFINITY` and propagates through
//! sums and products by the usual conventions; the `0 * -inf` case
//! cannot arise because product inputs are evaluated independently.
//!
//! Marginalizing a position substitutes the input units' total mass
//! (log 1 = 0 for normalized rows) instead of renormalizing. The
//! central kernel
//! [`evaluate_cuts`] computes the window value under every requested
//! prefix cut in a single feedforward pass, which serves plain
//! evaluation (cut n), the partition function (cut 0), and all prefix
//! marginals at once.

use std::io::Write as IoWrite;

use rand::Rng as _;

use crate::circuit::{Circuit, LayerKind};
use crate::{contract_err, guard_err, Result, Rng};

/// All tables for one context, in probability space: `phi[i][j]` is the
/// categorical over tokens for position `i`, component `j`; `omega[t]`
/// is the row-stochastic weight table of sum table `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitParams {
    pub phi: Vec<Vec<Vec<f64>>>,
    pub omega: Vec<Vec<Vec<f64>>>,
}

impl CircuitParams {
    /// Uniform rows everywhere: phi rows 1/v, omega rows 1/cols.
    pub fn uniform(c: &Circuit) -> CircuitParams {
        let (n, r, v) = (c.spec.n, c.spec.r, c.spec.v);
        CircuitParams {
            phi: vec![vec![vec![1.0 / v as f64; v]; r]; n],
            omega: c
                .sum_tables
                .iter()
                .map(|s| vec![vec![1.0 / s.cols as f64; s.cols]; s.rows])
                .collect(),
        }
    }

    /// Random simplex rows from softmaxed unit Gaussian logits.
    pub fn random(c: &Circuit, rng: &mut Rng) -> CircuitParams {
        let row = |len: usize, rng: &mut Rng| -> Vec<f64> {
            let logits: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            softmax(&logits)
        };
        let (n, r, v) = (c.spec.n, c.spec.r, c.spec.v);
        CircuitParams {
            phi: (0..n)
                .map(|_| (0..r).map(|_| row(v, rng)).collect())
                .collect(),
            omega: c
                .sum_tables
                .iter()
                .map(|s| (0..s.rows).map(|_| row(s.cols, rng)).collect())
                .collect(),
        }
    }

    /// Cheap structural check used by every operation.
    pub fn shape_check(&self, c: &Circuit) -> Result<()> {
        let (n, r, v) = (c.spec.n, c.spec.r, c.spec.v);
        if self.phi.len() != n
            || self.phi.iter().any(|g| g.len() != r)
            || self.phi.iter().flatten().any(|row| row.len() != v)
        {
            return contract_err(format!("phi shape does not match {n}x{r}x{v}"));
        }
        if self.omega.len() != c.sum_tables.len() {
            return contract_err("omega table count does not match the circuit");
        }
        for (t, (table, shape)) in self.omega.iter().zip(&c.sum_tables).enumerate() {
            if table.len() != shape.rows || table.iter().any(|row| row.len() != shape.cols) {
                return contract_err(format!(
                    "omega table {t} does not match declared {}x{}",
                    shape.rows, shape.cols
                ));
            }
        }
        Ok(())
    }

    /// Full invariant check: shapes plus non-negative rows summing to 1
    /// within 1e-9.
    pub fn validate_for(&self, c: &Circuit) -> Result<()> {
        self.shape_check(c)?;
        let simplex = |row: &[f64]| -> bool {
            row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        for (i, group) in self.phi.iter().enumerate() {
            for (j, row) in group.iter().enumerate() {
                if !simplex(row) {
                    return contract_err(format!("phi[{i}][{j}] is not on the simplex"));
                }
            }
        }
        for (t, table) in self.omega.iter().enumerate() {
            for (u, row) in table.iter().enumerate() {
                if !simplex(row) {
                    return contract_err(format!("omega[{t}] row {u} is not on the simplex"));
                }
            }
        }
        Ok(())
    }
}

/// The same tables with every entry logged, so repeated evaluations in
/// one decode cycle do not re-take logarithms.
#[derive(Debug, Clone)]
pub struct LogParams {
    pub ln_phi: Vec<Vec<Vec<f64>>>,
    pub ln_omega: Vec<Vec<Vec<f64>>>,
    /// Log total mass of each phi row, substituted when the row's
    /// position is marginalized. Exactly 0 for simplex rows; kept
    /// honest so unnormalized rows scale the partition linearly
    /// instead of being silently renormalized.
    pub ln_phi_mass: Vec<Vec<f64>>,
}

impl LogParams {
    pub fn new(p: &CircuitParams) -> LogParams {
        let ln = |t: &Vec<Vec<f64>>| t.iter().map(|r| r.iter().map(|&x| x.ln()).collect()).collect();
        LogParams {
            ln_phi: p.phi.iter().map(ln).collect(),
            ln_omega: p.omega.iter().map(ln).collect(),
            ln_phi_mass: p
                .phi
                .iter()
                .map(|g| g.iter().map(|row| row.iter().sum::<f64>().ln()).collect())
                .collect(),
        }
    }
}

/// Stable log-sum-exp; empty input and all -inf both give -inf.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn check_window(c: &Circuit, window: &[usize]) -> Result<()> {
    if window.len() != c.spec.n {
        return contract_err(format!(
            "window length {} does not match n = {}",
            window.len(),
            c.spec.n
        ));
    }
    if let Some(&t) = window.iter().find(|&&t| t >= c.spec.v) {
        return contract_err(format!("token id {t} out of range for v = {}", c.spec.v));
    }
    Ok(())
}

/// Per-layer log values for every requested cut; kept by the training
/// module as the tape for the backward pass.
#[derive(Debug)]
pub struct CutsTrace {
    /// Per layer: `width * cuts.len()` values, unit-major.
    pub values: Vec<Vec<f64>>,
}

/// One feedforward pass evaluating the window under several prefix cuts
/// at once. Cut `s` means positions `0..s` are observed at the window's
/// tokens and positions `s..n` are marginalized. The window may be
/// shorter than `n` if every requested cut stays within its length.
pub fn evaluate_cuts(
    c: &Circuit,
    lp: &LogParams,
    window: &[usize],
    cuts: &[usize],
) -> Vec<f64> {
    let (out, _) = eval_cuts_inner(c, lp, window, cuts, false);
    out
}

/// As [`evaluate_cuts`], but also returns the full tape.
pub fn evaluate_cuts_traced(
    c: &Circuit,
    lp: &LogParams,
    window: &[usize],
    cuts: &[usize],
) -> (Vec<f64>, CutsTrace) {
    let (out, trace) = eval_cuts_inner(c, lp, window, cuts, true);
    (out, trace.expect("trace requested"))
}

fn eval_cuts_inner(
    c: &Circuit,
    lp: &LogParams,
    window: &[usize],
    cuts: &[usize],
    keep_trace: bool,
) -> (Vec<f64>, Option<CutsTrace>) {
    let k = cuts.len();
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(c.layers.len());
    for layer in &c.layers {
        let mut vals = vec![0.0f64; layer.width * k];
        match layer.kind {
            LayerKind::Input => {
                let pos = layer.table.expect("input layer carries its position");
                for u in 0..layer.width {
                    for (s, &cut) in cuts.iter().enumerate() {
                        vals[u * k + s] = if pos < cut {
                            lp.ln_phi[pos][u][window[pos]]
                        } else {
                            lp.ln_phi_mass[pos][u]
                        };
                    }
                }
            }
            LayerKind::Product => {
                for &j in &layer.inputs {
                    let inp = &values[j];
                    for i in 0..vals.len() {
                        vals[i] += inp[i];
                    }
                }
            }
            LayerKind::Sum => {
                let table = &lp.ln_omega[layer.table.expect("sum layer carries a table")];
                for u in 0..layer.width {
                    let row = &table[u];
                    for (s, _) in cuts.iter().enumerate() {
                        // Weighted log-sum-exp over the concatenated inputs.
                        let mut m = f64::NEG_INFINITY;
                        let mut col = 0usize;
                        for &j in &layer.inputs {
                            let inp = &values[j];
                            for uu in 0..c.layers[j].width {
                                let t = row[col] + inp[uu * k + s];
                                if t > m {
                                    m = t;
                                }
                                col += 1;
                            }
                        }
                        vals[u * k + s] = if m == f64::NEG_INFINITY {
                            f64::NEG_INFINITY
                        } else {
                            let mut acc = 0.0;
                            let mut col = 0usize;
                            for &j in &layer.inputs {
                                let inp = &values[j];
                                for uu in 0..c.layers[j].width {
                                    acc += (row[col] + inp[uu * k + s] - m).exp();
                                    col += 1;
                                }
                            }
                            m + acc.ln()
                        };
                    }
                }
            }
        }
        values.push(vals);
    }
    let out = values[c.output][..k].to_vec();
    (out, keep_trace.then_some(CutsTrace { values }))
}

/// Log-probability of a full window: one pass, cut at n.
pub fn evaluate(c: &Circuit, p: &CircuitParams, window: &[usize]) -> Result<f64> {
    p.shape_check(c)?;
    check_window(c, window)?;
    Ok(evaluate_cuts(c, &LogParams::new(p), window, &[c.spec.n])[0])
}

/// Log partition function: everything marginalized. Must be 0 within
/// 1e-7 for simplex-valid parameters (normalized by construction).
pub fn partition(c: &Circuit, p: &CircuitParams) -> Result<f64> {
    p.shape_check(c)?;
    Ok(evaluate_cuts(c, &LogParams::new(p), &[], &[0])[0])
}

/// The n nested prefix marginals of a window, entry i holding
/// log q(x_0..x_i, rest marginalized). Non-increasing; the last entry
/// equals the full evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixMarginals {
    /// `values[i]` = log-marginal of the first i+1 positions.
    pub values: Vec<f64>,
}

impl PrefixMarginals {
    /// The full-window log-probability (last entry).
    pub fn full(&self) -> f64 {
        *self.values.last().expect("windows are non-empty")
    }
}

pub fn prefix_marginals(c: &Circuit, p: &CircuitParams, window: &[usize]) -> Result<PrefixMarginals> {
    p.shape_check(c)?;
    check_window(c, window)?;
    Ok(prefix_marginals_log(c, &LogParams::new(p), window))
}

pub fn prefix_marginals_log(c: &Circuit, lp: &LogParams, window: &[usize]) -> PrefixMarginals {
    let cuts: Vec<usize> = (1..=c.spec.n).collect();
    PrefixMarginals { values: evaluate_cuts(c, lp, window, &cuts) }
}

/// Per-position conditionals log q(x_i | x_<i) as successive marginal
/// ratios. Entries are clamped at 0 against round-off; a finite entry
/// after a -inf prefix is impossible for valid marginals and errors.
pub fn conditionals_from_prefix(pm: &PrefixMarginals) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pm.values.len());
    let mut prev = 0.0f64;
    for (i, &lp) in pm.values.iter().enumerate() {
        if prev == f64::NEG_INFINITY && lp != f64::NEG_INFINITY {
            return contract_err(format!("marginal {i} is finite after an impossible prefix"));
        }
        let cond = lp - prev;
        if cond > 1e-9 {
            return contract_err(format!("marginal {i} exceeds its prefix by {cond:.3e}"));
        }
        out.push(cond.min(0.0));
        prev = lp;
    }
    Ok(out)
}

/// Full conditional distribution over the token at position
/// `prefix.len()`, given the observed prefix: one cut evaluation per
/// candidate token, normalized by the prefix marginal.
pub fn conditional_row_log(c: &Circuit, lp: &LogParams, prefix: &[usize]) -> Result<Vec<f64>> {
    let pos = prefix.len();
    if pos >= c.spec.n {
        return contract_err("conditional_row needs a prefix shorter than the window");
    }
    let base = if pos == 0 { 0.0 } else { evaluate_cuts(c, lp, prefix, &[pos])[0] };
    if base == f64::NEG_INFINITY {
        return contract_err("conditional after an impossible prefix");
    }
    let mut window = prefix.to_vec();
    window.push(0);
    let mut row = Vec::with_capacity(c.spec.v);
    for t in 0..c.spec.v {
        window[pos] = t;
        row.push((evaluate_cuts(c, lp, &window, &[pos + 1])[0] - base).exp());
    }
    Ok(row)
}

pub fn conditional_row(c: &Circuit, p: &CircuitParams, prefix: &[usize]) -> Result<Vec<f64>> {
    p.shape_check(c)?;
    conditional_row_log(c, &LogParams::new(p), prefix)
}

/// Draws one token from a probability row. The row must carry mass;
/// round-off remainders fall to the last positive entry.
pub fn sample_categorical(row: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_pos = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_pos = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_pos
}

/// Ancestral sampling by top-down traversal: one input branch per sum
/// unit, every branch of a product unit. Smoothness and decomposability
/// guarantee each position is reached exactly once, so the result is a
/// full window distributed as the circuit's joint.
pub fn sample_window(c: &Circuit, p: &CircuitParams, rng: &mut Rng) -> Result<Vec<usize>> {
    p.shape_check(c)?;
    let n = c.spec.n;
    let mut window = vec![usize::MAX; n];
    let mut stack = vec![(c.output, 0usize)];
    while let Some((li, u)) = stack.pop() {
        let layer = &c.layers[li];
        match layer.kind {
            LayerKind::Input => {
                let pos = layer.table.expect("input layer carries its position");
                debug_assert_eq!(window[pos], usize::MAX, "position sampled twice");
                window[pos] = sample_categorical(&p.phi[pos][u], rng);
            }
            LayerKind::Product => {
                for &j in &layer.inputs {
                    stack.push((j, u));
                }
            }
            LayerKind::Sum => {
                let row = &p.omega[layer.table.expect("sum layer carries a table")][u];
                let mut col = sample_categorical(row, rng);
                // Map the concatenated column back to (layer, unit).
                for &j in &layer.inputs {
                    let w = c.layers[j].width;
                    if col < w {
                        stack.push((j, col));
                        break;
                    }
                    col -= w;
                }
            }
        }
    }
    debug_assert!(window.iter().all(|&t| t != usize::MAX), "unreached position");
    Ok(window)
}

/// Deterministic draft: sequential conditional argmax, position by
/// position, ties broken toward the smallest token id. This is chained
/// greedy, not exact joint argmax, which is intractable in general for
/// latent-variable circuits.
pub fn greedy_window(c: &Circuit, p: &CircuitParams) -> Result<Vec<usize>> {
    p.shape_check(c)?;
    let lp = LogParams::new(p);
    let mut chosen: Vec<usize> = Vec::with_capacity(c.spec.n);
    for _ in 0..c.spec.n {
        let row = conditional_row_log(c, &lp, &chosen)?;
        chosen.push(argmax_first(&row));
    }
    Ok(chosen)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Brute-force probability table over all v^n windows, in row-major
/// window order (last position fastest). Guarded against blowup.
pub fn enumerate_joint(c: &Circuit, p: &CircuitParams) -> Result<Vec<f64>> {
    p.shape_check(c)?;
    let (n, v) = (c.spec.n, c.spec.v);
    let total = (v as f64).powi(n as i32);
    if total > 1e6 {
        return guard_err(format!("v^n = {total:.0} exceeds the enumeration guard of 1e6"));
    }
    let total = total as usize;
    let lp = LogParams::new(p);
    let mut table = Vec::with_capacity(total);
    let mut window = vec![0usize; n];
    for idx in 0..total {
        index_to_window(idx, v, &mut window);
        table.push(evaluate_cuts(c, &lp, &window, &[n])[0].exp());
    }
    Ok(table)
}

/// Decodes a row-major table index into window tokens.
pub fn index_to_window(mut idx: usize, v: usize, window: &mut [usize]) {
    for slot in window.iter_mut().rev() {
        *slot = idx % v;
        idx /= v;
    }
}

/// Encodes window tokens into the row-major table index.
pub fn window_to_index(window: &[usize], v: usize) -> usize {
    window.iter().fold(0, |acc, &t| acc * v + t)
}

/// Dumps the enumerated joint as CSV rows of `x_0,..,x_{n-1},probability`.
pub fn write_joint_csv(c: &Circuit, p: &CircuitParams, out: &mut dyn IoWrite) -> Result<()> {
    let table = enumerate_joint(c, p)?;
    let header: Vec<String> = (0..c.spec.n).map(|i| format!("x_{i}")).collect();
    writeln!(out, "{},probability", header.join(","))?;
    let mut window = vec![0usize; c.spec.n];
    for (idx, prob) in table.iter().enumerate() {
        index_to_window(idx, c.spec.v, &mut window);
        let toks: Vec<String> = window.iter().map(|t| t.to_string()).collect();
        writeln!(out, "{},{}", toks.join(","), prob)?;
    }
    Ok(())
}

/// Total-variation distance between two distributions on the same
/// support: half the L1 difference.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
