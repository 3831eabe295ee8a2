//! Independent closed-form joints for differential testing.
//!
//! Each function computes the architecture's defining equation directly
//! in probability space, never touching the layered evaluator, so the
//! two implementations can check each other. Brute force is fine here:
//! these run on grids where v^n and r^n are small.

use crate::circuit::{ArchKind, Circuit};
use crate::inference::CircuitParams;
use crate::{contract_err, Result};

/// Product of per-position categoricals.
pub fn ff_joint(_c: &Circuit, p: &CircuitParams, window: &[usize]) -> f64 {
    window.iter().enumerate().map(|(i, &x)| p.phi[i][0][x]).product()
}

/// Mixture of fully factorized components:
/// sum_j w_j prod_i phi[i][j](x_i).
pub fn cp_joint(c: &Circuit, p: &CircuitParams, window: &[usize]) -> f64 {
    let weights = &p.omega[0][0];
    (0..c.spec.r)
        .map(|j| {
            weights[j]
                * window
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| p.phi[i][j][x])
                    .product::<f64>()
        })
        .sum()
}

/// Latent-chain joint by explicit summation over all r^n state paths:
/// sum_z prior(z_0) e(x_0|z_0) prod_i T_i(z_i|z_{i-1}) e(x_i|z_i).
/// Transition tables follow the builder's stated layout: table t is the
/// transition into position n-1-t, the last table is the prior.
pub fn hmm_joint(c: &Circuit, p: &CircuitParams, window: &[usize]) -> f64 {
    let (n, r) = (c.spec.n, c.spec.r);
    let prior = &p.omega[n - 1][0];
    let trans_into = |pos: usize| &p.omega[n - 1 - pos]; // rows: z_{pos-1}, cols: z_pos
    let mut total = 0.0;
    let mut path = vec![0usize; n];
    loop {
        let mut mass = prior[path[0]] * p.phi[0][path[0]][window[0]];
        for i in 1..n {
            mass *= trans_into(i)[path[i - 1]][path[i]] * p.phi[i][path[i]][window[i]];
        }
        total += mass;
        // Next path in odometer order.
        let mut i = 0;
        loop {
            if i == n {
                return total;
            }
            path[i] += 1;
            if path[i] < r {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Binary-hierarchy joint by direct recursion on spans, splitting at
/// floor(len/2) like the builder, with tables consumed in the same
/// post-order. Returns the width-1 root value.
pub fn btree_joint(c: &Circuit, p: &CircuitParams, window: &[usize]) -> f64 {
    let mut next_table = 0usize;
    let vals = btree_span(c, p, window, 0, c.spec.n, true, &mut next_table);
    debug_assert_eq!(next_table, p.omega.len());
    vals[0]
}

fn btree_span(
    c: &Circuit,
    p: &CircuitParams,
    window: &[usize],
    lo: usize,
    hi: usize,
    root: bool,
    next_table: &mut usize,
) -> Vec<f64> {
    let r = c.spec.r;
    if hi - lo == 1 {
        return (0..r).map(|j| p.phi[lo][j][window[lo]]).collect();
    }
    let mid = lo + (hi - lo) / 2;
    let left = btree_span(c, p, window, lo, mid, false, next_table);
    let right = btree_span(c, p, window, mid, hi, false, next_table);
    let table = &p.omega[*next_table];
    *next_table += 1;
    let width = if root { 1 } else { r };
    (0..width)
        .map(|u| (0..r).map(|j| table[u][j] * left[j] * right[j]).sum())
        .collect()
}

/// Dispatches to the matching closed form.
pub fn joint(c: &Circuit, p: &CircuitParams, window: &[usize]) -> f64 {
    match c.spec.kind {
        ArchKind::Ff => ff_joint(c, p, window),
        ArchKind::Cp => cp_joint(c, p, window),
        ArchKind::Hmm => hmm_joint(c, p, window),
        ArchKind::BTree => btree_joint(c, p, window),
    }
}

/// Full probability table over all v^n windows via the closed forms,
/// in the same row-major order as the evaluator's enumeration.
pub fn joint_table(c: &Circuit, p: &CircuitParams) -> Result<Vec<f64>> {
    let (n, v) = (c.spec.n, c.spec.v);
    let total = (v as f64).powi(n as i32);
    if total > 1e6 {
        return contract_err("oracle table too large");
    }
    let mut window = vec![0usize; n];
    Ok((0..total as usize)
        .map(|idx| {
            crate::inference::index_to_window(idx, v, &mut window);
            joint(c, p, &window)
        })
        .collect())
}

/// Brute-force prefix marginal: the closed-form joint summed over every
/// completion of the prefix.
pub fn prefix_marginal(c: &Circuit, p: &CircuitParams, prefix: &[usize]) -> f64 {
    let (n, v) = (c.spec.n, c.spec.v);
    let free = n - prefix.len();
    let mut window = prefix.to_vec();
    window.resize(n, 0);
    let mut total = 0.0;
    let combos = v.pow(free as u32);
    for idx in 0..combos {
        crate::inference::index_to_window(idx, v, &mut window[prefix.len()..]);
        total += joint(c, p, &window);
    }
    total
}
