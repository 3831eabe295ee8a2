//! Speculative verification and the shared-state decoding loop.
//!
//! One decoding cycle runs three components against the same prefix:
//! the shared encoder S (pooling plus the shared trunk layers), the
//! verifier V (remaining base layers plus the next-token head), and the
//! draft D (adapted layers plus the window circuit). D proposes a
//! window, S extends its state over the proposal once, V scores every
//! proposed position in one batched pass, and token-level rejection
//! sampling decides how much of the window survives.
//!
//! The shared-state variant never emits a token it has not drafted
//! (keeping the S cache valid), so a cycle emits between 1 and n
//! tokens: the accepted prefix when anything is accepted, or a single
//! fresh token when nothing is. Dropping the rejection-time token
//! without correction would bias the output law, so the residual
//! distribution is carried into the next cycle and verified against
//! there; see [`Session::spec_step`].
//!
//! [`vanilla_decode`] keeps the textbook variant (emit the residual
//! draw immediately, plus a bonus token on full acceptance) as a
//! reference for differential testing, and [`ar_generate`] is the
//! plain autoregressive baseline every speculative mode must match.

use std::io::Write as IoWrite;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::circuit::Circuit;
use crate::inference::{
    argmax_first, conditional_row_log, greedy_window, sample_categorical, sample_window,
    LogParams,
};
use crate::neural::{parameterize, target_next_dist, DraftAdapter, ParamHead, PoolState, TargetStp, ToyBackbone};
use crate::training::{Teacher, TeacherState};
use crate::{contract_err, guard_err, spec_err, Result, Rng};

/// Token selection rule, shared by drafting, verification, and the
/// autoregressive baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

impl FromStr for DecodeMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<DecodeMode> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Ok(DecodeMode::Greedy),
            "sample" => Ok(DecodeMode::Sample),
            other => spec_err(format!("unknown decode mode '{other}'")),
        }
    }
}

/// What the draft races against: a neural next-token head over the full
/// base stack, or a synthetic process answering with exact filter
/// conditionals.
#[derive(Debug, Clone, Copy)]
pub enum Verifier<'a> {
    Stp(&'a TargetStp),
    Teacher(&'a Teacher),
}

/// The residual left after a rejected draw:
/// `r(x) = max(0, p(x) - q(x)) / Z`. Its support is exactly where the
/// target exceeds the draft, which is what the rejected mass missed.
pub fn residual_dist(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() || p.is_empty() {
        return contract_err("residual needs two aligned distributions");
    }
    let mut r: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| (a - b).max(0.0)).collect();
    let z: f64 = r.iter().sum();
    if z <= 0.0 {
        return guard_err("residual of identical distributions is undefined");
    }
    for x in &mut r {
        *x /= z;
    }
    Ok(r)
}

/// Token-level speculative verification: walk the drafted window,
/// accepting position i with probability min(1, p_i/q_i) at the drafted
/// token; on the first rejection, draw the final token from the
/// residual. Returns the accepted count and that final token (`None`
/// when the whole window is accepted — the caller decides about a
/// bonus draw).
///
/// `draft_rows[i]` and `target_rows[i]` are the full conditional rows
/// q(x_i | x_<i) and p(x_i | x_<i) for the drafted prefix.
pub fn verify(
    drafted: &[usize],
    draft_rows: &[Vec<f64>],
    target_rows: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<(usize, Option<usize>)> {
    verify_rows(drafted, draft_rows, target_rows, rng)
        .map(|(s, rej)| (s, rej.map(|(_, tok)| tok)))
}

/// As [`verify`], but the rejection also hands back the residual row it
/// sampled from, so a shared-state caller can carry the distribution
/// instead of the draw.
fn verify_rows(
    drafted: &[usize],
    draft_rows: &[Vec<f64>],
    target_rows: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<(usize, Option<(Vec<f64>, usize)>)> {
    let n = drafted.len();
    if n == 0 || draft_rows.len() != n || target_rows.len() != n {
        return contract_err("verification needs one draft and one target row per drafted token");
    }
    for i in 0..n {
        let tok = drafted[i];
        if tok >= draft_rows[i].len() || draft_rows[i].len() != target_rows[i].len() {
            return contract_err("conditional rows do not cover the drafted token");
        }
        let q = draft_rows[i][tok];
        if !(q > 0.0) {
            return contract_err(format!("drafted token {tok} has draft probability {q}"));
        }
        let p = target_rows[i][tok];
        // Log-space ratio test; u in (0, 1] so ln u is finite and a
        // zero-probability target always rejects.
        let u = 1.0 - rng.random::<f64>();
        if u.ln() <= p.ln() - q.ln() {
            continue;
        }
        let residual = residual_dist(&target_rows[i], &draft_rows[i])?;
        let tok = sample_categorical(&residual, rng);
        return Ok((i, Some((residual, tok))));
    }
    Ok((n, None))
}

/// Per-cycle bookkeeping: counters of component forwards and
/// acceptance totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub cycles: usize,
    /// Cycles that accepted nothing and emitted one fresh token.
    pub zero_accept_cycles: usize,
    /// Shared-encoder forwards: one window extension per cycle, plus
    /// one catch-up after each zero-accept cycle, so
    /// `s_forwards = cycles + zero_accept_cycles` at every cycle
    /// boundary.
    pub s_forwards: usize,
    pub v_forwards: usize,
    pub d_forwards: usize,
    pub accepted_total: usize,
    pub emitted_total: usize,
}

/// Outcome of one decoding cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleResult {
    /// The n drafted tokens.
    pub drafted: Vec<usize>,
    /// Accepted count s in [0, n].
    pub accepted_s: usize,
    /// Tokens actually appended this cycle, between 1 and n: the
    /// accepted prefix when s >= 1, one fresh token when s = 0.
    pub emitted: Vec<usize>,
    /// True exactly when s = 0.
    pub free_token: bool,
}

/// One JSONL decode-trace row; counters are cumulative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleTraceRow {
    pub cycle: usize,
    pub drafted: Vec<usize>,
    pub accepted_s: usize,
    pub emitted: Vec<usize>,
    pub free_token: bool,
    pub s_forwards: usize,
    pub v_forwards: usize,
    pub d_forwards: usize,
}

/// A single-owner decoding run: shared weights borrowed, all mutable
/// state owned.
pub struct Session<'a> {
    backbone: &'a ToyBackbone,
    adapter: &'a DraftAdapter,
    head: &'a ParamHead,
    circuit: &'a Circuit,
    verifier: Verifier<'a>,
    mode: DecodeMode,
    rng: Rng,
    /// Prompt plus everything generated.
    pub tokens: Vec<usize>,
    prompt_len: usize,
    /// Pooling state over `tokens`.
    pool: PoolState,
    /// Shared-trunk activations for the current prefix end.
    trunk_h: Vec<f64>,
    /// Exact filter state at the prefix end (teacher verifiers only).
    teacher_st: Option<TeacherState>,
    /// False only inside a zero-accept cycle, between emitting the
    /// fresh token and the catch-up encoder pass that follows
    /// immediately; cycle boundaries always see it true.
    s_state_set: bool,
    /// Residual distribution carried from a rejection with s >= 1: the
    /// next cycle's first position verifies against this instead of
    /// the verifier row, which restores the exact output law after the
    /// rejection draw was dropped.
    pending_residual: Option<Vec<f64>>,
    pub stats: SessionStats,
}

impl<'a> Session<'a> {
    pub fn new(
        backbone: &'a ToyBackbone,
        adapter: &'a DraftAdapter,
        head: &'a ParamHead,
        circuit: &'a Circuit,
        verifier: Verifier<'a>,
        mode: DecodeMode,
        prompt: &[usize],
        rng: Rng,
    ) -> Result<Session<'a>> {
        head.shapes_match(circuit)?;
        if backbone.v != circuit.spec.v || head.d != backbone.d {
            return contract_err("draft stack components disagree on sizes");
        }
        if adapter.k > backbone.l {
            return contract_err("adapter depth exceeds layer count");
        }
        let verifier_v = match verifier {
            Verifier::Stp(stp) => {
                if stp.d != backbone.d {
                    return contract_err("verifier head width does not match the backbone");
                }
                stp.v
            }
            Verifier::Teacher(t) => t.vocab(),
        };
        if verifier_v != backbone.v {
            return contract_err("verifier and draft disagree on the vocabulary");
        }
        if prompt.is_empty() {
            return contract_err("prompt must be non-empty");
        }
        if let Some(&t) = prompt.iter().find(|&&t| t >= backbone.v) {
            return contract_err(format!("prompt token {t} out of range for v = {}", backbone.v));
        }
        // Prefill: pool the prompt and set the S state; not counted in
        // the per-cycle forward counters.
        let mut pool = backbone.pool_init();
        for &t in prompt {
            backbone.pool_push(&mut pool, t);
        }
        let trunk_h = backbone.trunk(&backbone.pooled(&pool), adapter.k);
        let teacher_st = match verifier {
            Verifier::Teacher(t) => {
                let mut st = t.start();
                for &tok in prompt {
                    t.advance(&mut st, tok);
                }
                Some(st)
            }
            Verifier::Stp(_) => None,
        };
        Ok(Session {
            backbone,
            adapter,
            head,
            circuit,
            verifier,
            mode,
            rng,
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            pool,
            trunk_h,
            teacher_st,
            s_state_set: true,
            pending_residual: None,
            stats: SessionStats::default(),
        })
    }

    /// Tokens generated after the prompt.
    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    /// One shared-state cycle in the session's mode.
    pub fn spec_step(&mut self) -> Result<CycleResult> {
        match self.mode {
            DecodeMode::Sample => self.sample_step(),
            DecodeMode::Greedy => self.greedy_spec_step(),
        }
    }

    fn draft_forward(&mut self) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let e = self.adapter.finish_draft(self.backbone, &self.trunk_h);
        let params = parameterize(self.head, self.circuit, &e)?;
        let lp = LogParams::new(&params);
        let drafted = match self.mode {
            DecodeMode::Sample => sample_window(self.circuit, &params, &mut self.rng)?,
            DecodeMode::Greedy => greedy_window(self.circuit, &params)?,
        };
        let n = self.circuit.spec.n;
        let mut q_rows = Vec::with_capacity(n);
        for i in 0..n {
            q_rows.push(conditional_row_log(self.circuit, &lp, &drafted[..i])?);
        }
        self.stats.d_forwards += 1;
        Ok((drafted, q_rows))
    }

    /// Extends pooling and the shared trunk over the drafted window;
    /// one batched S forward. Returns per-depth snapshots, entry i
    /// covering the prefix plus the first i drafted tokens.
    fn extend_states(
        &mut self,
        drafted: &[usize],
    ) -> (Vec<PoolState>, Vec<Vec<f64>>, Option<Vec<TeacherState>>) {
        let n = drafted.len();
        let mut pools = Vec::with_capacity(n + 1);
        let mut trunks = Vec::with_capacity(n + 1);
        pools.push(self.pool.clone());
        trunks.push(self.trunk_h.clone());
        for &tok in drafted {
            let mut next = pools.last().expect("seeded").clone();
            self.backbone.pool_push(&mut next, tok);
            trunks.push(self.backbone.trunk(&self.backbone.pooled(&next), self.adapter.k));
            pools.push(next);
        }
        let tstates = match (self.verifier, &self.teacher_st) {
            (Verifier::Teacher(t), Some(st)) => {
                let mut states = Vec::with_capacity(n + 1);
                states.push(st.clone());
                for &tok in drafted {
                    let mut next = states.last().expect("seeded").clone();
                    t.advance(&mut next, tok);
                    states.push(next);
                }
                Some(states)
            }
            _ => None,
        };
        self.stats.s_forwards += 1;
        (pools, trunks, tstates)
    }

    /// Verifier conditionals for every drafted position, one batched V
    /// forward: row i conditions on the prefix plus the first i drafted
    /// tokens.
    fn verifier_rows(
        &mut self,
        trunks: &[Vec<f64>],
        tstates: Option<&[TeacherState]>,
        count: usize,
    ) -> Vec<Vec<f64>> {
        let rows = (0..count)
            .map(|i| match self.verifier {
                Verifier::Stp(stp) => {
                    let e = self.backbone.finish_base(&trunks[i], self.adapter.k);
                    target_next_dist(stp, &e)
                }
                Verifier::Teacher(t) => {
                    t.next_dist(&tstates.expect("teacher states present")[i])
                }
            })
            .collect();
        self.stats.v_forwards += 1;
        rows
    }

    /// Commits the cycle outcome: append tokens, jump the cached states
    /// to the right snapshot depth, run the catch-up encoder pass when
    /// nothing was accepted.
    fn commit(
        &mut self,
        drafted: Vec<usize>,
        s: usize,
        fresh: Option<usize>,
        pools: Vec<PoolState>,
        trunks: Vec<Vec<f64>>,
        tstates: Option<Vec<TeacherState>>,
    ) -> CycleResult {
        let result = if s >= 1 {
            let emitted = drafted[..s].to_vec();
            self.tokens.extend_from_slice(&emitted);
            self.pool = pools.into_iter().nth(s).expect("depth within window");
            self.trunk_h = trunks.into_iter().nth(s).expect("depth within window");
            if let Some(states) = tstates {
                self.teacher_st = states.into_iter().nth(s);
            }
            CycleResult { drafted, accepted_s: s, emitted, free_token: false }
        } else {
            let tok = fresh.expect("zero-accept cycle carries a fresh token");
            self.tokens.push(tok);
            self.s_state_set = false;
            // Catch-up: the fresh token was never drafted, so its
            // encoder state does not exist yet; recompute it now so
            // the next cycle starts clean.
            self.pool = pools.into_iter().next().expect("seeded");
            self.backbone.pool_push(&mut self.pool, tok);
            self.trunk_h = self.backbone.trunk(&self.backbone.pooled(&self.pool), self.adapter.k);
            if let (Verifier::Teacher(t), Some(states)) = (self.verifier, tstates) {
                let mut st = states.into_iter().next().expect("seeded");
                t.advance(&mut st, tok);
                self.teacher_st = Some(st);
            }
            self.stats.s_forwards += 1;
            self.stats.zero_accept_cycles += 1;
            self.s_state_set = true;
            CycleResult { drafted, accepted_s: 0, emitted: vec![tok], free_token: true }
        };
        self.stats.cycles += 1;
        self.stats.accepted_total += result.accepted_s;
        self.stats.emitted_total += result.emitted.len();
        debug_assert!(!result.emitted.is_empty(), "every cycle must emit");
        debug_assert!(self.s_state_set, "cycle boundary with a stale S state");
        result
    }

    fn sample_step(&mut self) -> Result<CycleResult> {
        let (drafted, q_rows) = self.draft_forward()?;
        let (pools, trunks, tstates) = self.extend_states(&drafted);
        let n = drafted.len();
        let mut p_rows = self.verifier_rows(&trunks, tstates.as_deref(), n);
        if let Some(pending) = self.pending_residual.take() {
            // A previous rejection's draw was dropped; its residual law
            // is what the first position must follow now.
            p_rows[0] = pending;
        }
        let (s, rejection) = verify_rows(&drafted, &q_rows, &p_rows, &mut self.rng)?;
        let fresh = match rejection {
            Some((residual, tok)) => {
                if s >= 1 {
                    self.pending_residual = Some(residual);
                    None
                } else {
                    Some(tok)
                }
            }
            None => None,
        };
        Ok(self.commit(drafted, s, fresh, pools, trunks, tstates))
    }

    /// One greedy cycle: accept while the draft matches the verifier's
    /// argmax; a zero-accept cycle emits that argmax directly. Nothing
    /// is carried between cycles — a dropped correction token is just
    /// re-derived as the next cycle's argmax.
    pub fn greedy_spec_step(&mut self) -> Result<CycleResult> {
        let (drafted, _q_rows) = self.draft_forward()?;
        let (pools, trunks, tstates) = self.extend_states(&drafted);
        let n = drafted.len();
        let p_rows = self.verifier_rows(&trunks, tstates.as_deref(), n);
        let mut s = 0;
        while s < n && drafted[s] == argmax_first(&p_rows[s]) {
            s += 1;
        }
        let fresh = (s == 0).then(|| argmax_first(&p_rows[0]));
        Ok(self.commit(drafted, s, fresh, pools, trunks, tstates))
    }
}

/// Decodes until at least `max_new_tokens` tokens exist past the
/// prompt (a final multi-token acceptance may overshoot). Returns the
/// generated tokens.
pub fn shared_state_decode(session: &mut Session, max_new_tokens: usize) -> Result<Vec<usize>> {
    shared_state_decode_traced(session, max_new_tokens, None)
}

/// As [`shared_state_decode`], emitting one JSONL trace row per cycle.
pub fn shared_state_decode_traced(
    session: &mut Session,
    max_new_tokens: usize,
    mut trace_out: Option<&mut dyn IoWrite>,
) -> Result<Vec<usize>> {
    if max_new_tokens == 0 {
        return contract_err("max_new_tokens must be at least 1");
    }
    let start = session.tokens.len();
    while session.tokens.len() - start < max_new_tokens {
        let cycle = session.spec_step()?;
        if let Some(out) = trace_out.as_deref_mut() {
            let row = CycleTraceRow {
                cycle: session.stats.cycles - 1,
                drafted: cycle.drafted.clone(),
                accepted_s: cycle.accepted_s,
                emitted: cycle.emitted.clone(),
                free_token: cycle.free_token,
                s_forwards: session.stats.s_forwards,
                v_forwards: session.stats.v_forwards,
                d_forwards: session.stats.d_forwards,
            };
            serde_json::to_writer(&mut *out, &row)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(session.tokens[start..].to_vec())
}

/// Plain autoregressive generation from the verifier stack: the
/// correctness reference for every speculative mode.
pub fn ar_generate(
    backbone: &ToyBackbone,
    target: &TargetStp,
    prompt: &[usize],
    count: usize,
    mode: DecodeMode,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return contract_err("prompt must be non-empty");
    }
    if count == 0 {
        return contract_err("count must be at least 1");
    }
    let mut pool = backbone.pool_init();
    for &t in prompt {
        if t >= backbone.v {
            return contract_err(format!("prompt token {t} out of range"));
        }
        backbone.pool_push(&mut pool, t);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let e = backbone.apply_layers(&backbone.pooled(&pool), 0, backbone.l);
        let p = target_next_dist(target, &e);
        let tok = match mode {
            DecodeMode::Greedy => argmax_first(&p),
            DecodeMode::Sample => sample_categorical(&p, rng),
        };
        out.push(tok);
        backbone.pool_push(&mut pool, tok);
    }
    Ok(out)
}

/// Exact law of the next `m` tokens under autoregressive sampling from
/// the verifier, enumerated over all v^m continuations (row-major, last
/// position fastest). The oracle for losslessness checks; guarded
/// against blowup.
pub fn ar_prefix_law(
    backbone: &ToyBackbone,
    target: &TargetStp,
    prompt: &[usize],
    m: usize,
) -> Result<Vec<f64>> {
    if prompt.is_empty() || m == 0 {
        return contract_err("prefix law needs a prompt and m >= 1");
    }
    let v = backbone.v;
    let cells = (v as f64).powi(m as i32);
    if cells > 1e6 {
        return guard_err(format!("{v}^{m} continuations exceed the enumeration bound"));
    }
    let mut law = vec![0.0f64; cells as usize];
    let mut continuation = vec![0usize; m];
    let mut pool = backbone.pool_init();
    for &t in prompt {
        backbone.pool_push(&mut pool, t);
    }
    fn walk(
        backbone: &ToyBackbone,
        target: &TargetStp,
        pool: &PoolState,
        continuation: &mut Vec<usize>,
        depth: usize,
        m: usize,
        mass: f64,
        law: &mut [f64],
    ) {
        let e = backbone.apply_layers(&backbone.pooled(pool), 0, backbone.l);
        let p = target_next_dist(target, &e);
        for (tok, &pt) in p.iter().enumerate() {
            continuation.push(tok);
            if depth + 1 == m {
                let idx = continuation
                    .iter()
                    .fold(0usize, |acc, &t| acc * backbone.v + t);
                law[idx] += mass * pt;
            } else {
                let mut next = pool.clone();
                backbone.pool_push(&mut next, tok);
                walk(backbone, target, &next, continuation, depth + 1, m, mass * pt, law);
            }
            continuation.pop();
        }
    }
    continuation.clear();
    walk(backbone, target, &pool, &mut continuation, 0, m, 1.0, &mut law);
    Ok(law)
}

/// Textbook speculative decoding, kept as a differential reference: no
/// state sharing, every cycle emits the accepted prefix plus one more
/// token (the residual draw on rejection, a bonus verifier draw on full
/// acceptance). Recomputes everything from the raw prefix each cycle.
pub fn vanilla_decode(
    backbone: &ToyBackbone,
    adapter: &DraftAdapter,
    head: &ParamHead,
    circuit: &Circuit,
    target: &TargetStp,
    prompt: &[usize],
    max_new_tokens: usize,
    mode: DecodeMode,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if prompt.is_empty() || max_new_tokens == 0 {
        return contract_err("prompt must be non-empty and max_new_tokens at least 1");
    }
    let n = circuit.spec.n;
    let mut tokens = prompt.to_vec();
    let start = tokens.len();
    while tokens.len() - start < max_new_tokens {
        let e = crate::neural::encode_draft(backbone, adapter, &tokens)?;
        let params = parameterize(head, circuit, &e)?;
        let lp = LogParams::new(&params);
        let drafted = match mode {
            DecodeMode::Sample => sample_window(circuit, &params, rng)?,
            DecodeMode::Greedy => greedy_window(circuit, &params)?,
        };
        let mut q_rows = Vec::with_capacity(n);
        for i in 0..n {
            q_rows.push(conditional_row_log(circuit, &lp, &drafted[..i])?);
        }
        // Verifier rows for each drafted position plus the bonus slot.
        let mut p_rows = Vec::with_capacity(n + 1);
        let mut ctx = tokens.clone();
        for i in 0..=n {
            let e = crate::neural::encode(backbone, &ctx)?;
            p_rows.push(target_next_dist(target, &e));
            if i < n {
                ctx.push(drafted[i]);
            }
        }
        match mode {
            DecodeMode::Sample => {
                let (s, rejected) = verify(&drafted, &q_rows, &p_rows[..n], rng)?;
                tokens.extend_from_slice(&drafted[..s]);
                match rejected {
                    Some(tok) => tokens.push(tok),
                    None => tokens.push(sample_categorical(&p_rows[n], rng)),
                }
            }
            DecodeMode::Greedy => {
                let mut s = 0;
                while s < n && drafted[s] == argmax_first(&p_rows[s]) {
                    s += 1;
                }
                tokens.extend_from_slice(&drafted[..s]);
                tokens.push(argmax_first(&p_rows[s]));
            }
        }
    }
    Ok(tokens[start..].to_vec())
}
