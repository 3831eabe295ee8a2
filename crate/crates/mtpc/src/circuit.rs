//! Circuit structure and the four window-factorization builders.
//!
//! A circuit is a topologically ordered list of layers over a window of
//! `n` token positions. Input layers hold per-component categoricals for
//! one position, product layers multiply same-width layers elementwise,
//! and sum layers mix their concatenated inputs with row-stochastic
//! weight tables. Parameters live outside the structure (see
//! [`crate::inference::CircuitParams`]); one immutable circuit serves
//! every context.
//!
//! Window positions are 0-based throughout, both in memory and in the
//! JSON form.

use serde::{Deserialize, Serialize};

use crate::{spec_err, Result};

/// Window factorization family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchKind {
    /// Fully factorized: one categorical per position, single product.
    #[serde(rename = "FF")]
    Ff,
    /// Rank-r mixture of fully factorized components.
    #[serde(rename = "CP")]
    Cp,
    /// Inhomogeneous latent chain with per-position transition tables.
    #[serde(rename = "HMM")]
    Hmm,
    /// Balanced binary hierarchy of rank-r mixtures.
    #[serde(rename = "BTREE")]
    BTree,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Ff => "FF",
            ArchKind::Cp => "CP",
            ArchKind::Hmm => "HMM",
            ArchKind::BTree => "BTREE",
        }
    }
}

impl std::str::FromStr for ArchKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FF" => Ok(ArchKind::Ff),
            "CP" => Ok(ArchKind::Cp),
            "HMM" => Ok(ArchKind::Hmm),
            "BTREE" | "BTREE2" | "BT" => Ok(ArchKind::BTree),
            other => spec_err(format!("unknown architecture kind '{other}'")),
        }
    }
}

/// Architecture selector plus the three size knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Window size in tokens.
    pub n: usize,
    /// Rank: mixture / latent-state cardinality. Always 1 for FF.
    pub r: usize,
    /// Vocabulary size.
    pub v: usize,
}

impl ArchitectureSpec {
    pub fn new(kind: ArchKind, n: usize, r: usize, v: usize) -> Result<Self> {
        if n < 1 {
            return spec_err("window size n must be at least 1");
        }
        if r < 1 {
            return spec_err("rank r must be at least 1");
        }
        if v < 2 {
            return spec_err("vocabulary size v must be at least 2");
        }
        if kind == ArchKind::Ff && r != 1 {
            return spec_err(format!("FF is rank-1 by definition, got r = {r}"));
        }
        if kind == ArchKind::BTree && n < 2 {
            return spec_err("BTREE needs n >= 2; use FF for a single position");
        }
        Ok(ArchitectureSpec { kind, n, r, v })
    }
}

/// Unit kind of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "INPUT")]
    Input,
    #[serde(rename = "PRODUCT")]
    Product,
    #[serde(rename = "SUM")]
    Sum,
}

/// One layer: `width` units sharing kind, scope, and wiring.
///
/// Evaluation semantics, for unit `u` of the layer:
/// - INPUT: the categorical `phi[table][u]` evaluated at the window token
///   of its single scope position (or total mass 1 when marginalized).
/// - PRODUCT: the elementwise product of unit `u` of every input layer;
///   all inputs must have the layer's own width.
/// - SUM: a weighted sum over the concatenation of all input layers'
///   units, with row `u` of the layer's weight table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    /// Sorted 0-based window positions this layer's output depends on.
    pub scope: Vec<usize>,
    pub width: usize,
    /// Indices of the layers feeding this one; all strictly smaller than
    /// this layer's own index.
    pub inputs: Vec<usize>,
    /// INPUT: the position index (equals `scope[0]`), selecting the phi
    /// row group. SUM: index into the omega table list. PRODUCT: absent.
    #[serde(rename = "table_id")]
    pub table: Option<usize>,
}

/// Declared shape of one sum-weight table: `rows` stochastic rows of
/// `cols` entries each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SumShape {
    pub rows: usize,
    pub cols: usize,
}

/// An immutable factorization structure over an n-token window.
///
/// Parameters are supplied separately per context: `phi` has one
/// categorical row per (position, component) pair, shape n x r x v, and
/// `omega` has one row-stochastic table per sum layer with the shapes
/// declared in `sum_tables`.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    pub spec: ArchitectureSpec,
    /// Topologically ordered; the output layer is last.
    pub layers: Vec<Layer>,
    /// Index of the single width-1, full-scope root layer.
    pub output: usize,
    /// Shapes of the omega tables, indexed by sum-layer `table` ids.
    pub sum_tables: Vec<SumShape>,
}

impl Circuit {
    /// Total free-parameter count: all phi rows plus all omega rows.
    pub fn param_count(&self) -> usize {
        let phi = self.spec.n * self.spec.r * self.spec.v;
        let omega: usize = self.sum_tables.iter().map(|t| t.rows * t.cols).sum();
        phi + omega
    }

    /// Number of input parameters (the phi tensor alone).
    pub fn input_param_count(&self) -> usize {
        self.spec.n * self.spec.r * self.spec.v
    }

    pub fn to_json(&self) -> String {
        let doc = CircuitDoc {
            kind: self.spec.kind,
            n: self.spec.n,
            r: self.spec.r,
            v: self.spec.v,
            layers: self.layers.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("circuit doc is always serializable")
    }

    /// Rebuilds a circuit from its JSON form. Byte layout is free to
    /// change; structural equality with the original is guaranteed.
    pub fn from_json(text: &str) -> Result<Circuit> {
        let doc: CircuitDoc = serde_json::from_str(text)?;
        let spec = ArchitectureSpec::new(doc.kind, doc.n, doc.r, doc.v)?;
        let layers = doc.layers;
        if layers.is_empty() {
            return spec_err("circuit document has no layers");
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs.iter().any(|&j| j >= i) {
                return spec_err(format!("layer {i} consumes a layer at or after itself"));
            }
        }
        // The output is the unique layer nothing consumes.
        let mut consumed = vec![false; layers.len()];
        for layer in &layers {
            for &j in &layer.inputs {
                consumed[j] = true;
            }
        }
        let roots: Vec<usize> = (0..layers.len()).filter(|&i| !consumed[i]).collect();
        let &[output] = roots.as_slice() else {
            return spec_err(format!("expected exactly one root layer, found {}", roots.len()));
        };
        let mut sum_count = 0;
        for layer in &layers {
            if layer.kind == LayerKind::Sum {
                match layer.table {
                    Some(t) => sum_count = sum_count.max(t + 1),
                    None => return spec_err("sum layer without a table id"),
                }
            }
        }
        let mut sum_tables = vec![None; sum_count];
        for layer in &layers {
            if layer.kind != LayerKind::Sum {
                continue;
            }
            let cols: usize = layer.inputs.iter().map(|&j| layers[j].width).sum();
            let shape = SumShape { rows: layer.width, cols };
            let slot = &mut sum_tables[layer.table.unwrap()];
            if slot.replace(shape).is_some() {
                return spec_err("two sum layers share a table id");
            }
        }
        let sum_tables: Vec<SumShape> = sum_tables
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| crate::Error::Spec("unused sum table id".into()))?;
        Ok(Circuit { spec, layers, output, sum_tables })
    }
}

#[derive(Serialize, Deserialize)]
struct CircuitDoc {
    kind: ArchKind,
    n: usize,
    r: usize,
    v: usize,
    layers: Vec<Layer>,
}

/// Fully factorized window: n width-1 inputs under a single product.
/// Free parameters: n*v.
pub fn build_ff(n: usize, v: usize) -> Result<Circuit> {
    let spec = ArchitectureSpec::new(ArchKind::Ff, n, 1, v)?;
    let mut layers: Vec<Layer> = (0..n)
        .map(|i| Layer {
            kind: LayerKind::Input,
            scope: vec![i],
            width: 1,
            inputs: Vec::new(),
            table: Some(i),
        })
        .collect();
    if n > 1 {
        layers.push(Layer {
            kind: LayerKind::Product,
            scope: (0..n).collect(),
            width: 1,
            inputs: (0..n).collect(),
            table: None,
        });
    }
    let output = layers.len() - 1;
    Ok(Circuit { spec, layers, output, sum_tables: Vec::new() })
}

/// Rank-r mixture of fully factorized components: r input units per
/// position, one width-r product, one width-1 root sum.
/// Free parameters: n*r*v + r.
pub fn build_cp(n: usize, v: usize, r: usize) -> Result<Circuit> {
    let spec = ArchitectureSpec::new(ArchKind::Cp, n, r, v)?;
    let mut layers: Vec<Layer> = (0..n)
        .map(|i| Layer {
            kind: LayerKind::Input,
            scope: vec![i],
            width: r,
            inputs: Vec::new(),
            table: Some(i),
        })
        .collect();
    layers.push(Layer {
        kind: LayerKind::Product,
        scope: (0..n).collect(),
        width: r,
        inputs: (0..n).collect(),
        table: None,
    });
    layers.push(Layer {
        kind: LayerKind::Sum,
        scope: (0..n).collect(),
        width: 1,
        inputs: vec![n],
        table: Some(0),
    });
    let output = layers.len() - 1;
    Ok(Circuit { spec, layers, output, sum_tables: vec![SumShape { rows: 1, cols: r }] })
}

/// Latent chain with position-specific transitions, laid out as nested
/// sum/product pairs from the last position inward:
///
///   root = sum_{z_0} prior[z_0] * ( e(x_0 | z_0) * m_1(z_0) )
///   m_i(z) = sum_{z'} trans_i[z][z'] * ( e(x_i | z') * m_{i+1}(z') )
///
/// Sum tables are created innermost-first: table t (0 <= t <= n-2)
/// carries the transition into position n-1-t, row z = conditioning
/// state, column z' = successor state; the last table is the width-1
/// prior row. Free parameters: n*r*v + r + (n-1)*r^2.
pub fn build_hmm(n: usize, v: usize, r: usize) -> Result<Circuit> {
    let spec = ArchitectureSpec::new(ArchKind::Hmm, n, r, v)?;
    let mut layers = Vec::with_capacity(3 * n);
    let mut sum_tables = Vec::new();
    layers.push(Layer {
        kind: LayerKind::Input,
        scope: vec![n - 1],
        width: r,
        inputs: Vec::new(),
        table: Some(n - 1),
    });
    let mut prev = 0usize;
    for i in (0..n - 1).rev() {
        let trans = sum_tables.len();
        sum_tables.push(SumShape { rows: r, cols: r });
        layers.push(Layer {
            kind: LayerKind::Sum,
            scope: (i + 1..n).collect(),
            width: r,
            inputs: vec![prev],
            table: Some(trans),
        });
        let sum_idx = layers.len() - 1;
        layers.push(Layer {
            kind: LayerKind::Input,
            scope: vec![i],
            width: r,
            inputs: Vec::new(),
            table: Some(i),
        });
        let input_idx = layers.len() - 1;
        layers.push(Layer {
            kind: LayerKind::Product,
            scope: (i..n).collect(),
            width: r,
            inputs: vec![input_idx, sum_idx],
            table: None,
        });
        prev = layers.len() - 1;
    }
    let prior = sum_tables.len();
    sum_tables.push(SumShape { rows: 1, cols: r });
    layers.push(Layer {
        kind: LayerKind::Sum,
        scope: (0..n).collect(),
        width: 1,
        inputs: vec![prev],
        table: Some(prior),
    });
    let output = layers.len() - 1;
    Ok(Circuit { spec, layers, output, sum_tables })
}

/// Balanced binary hierarchy: the window splits at floor(len/2),
/// recursively; leaves are width-r inputs, each internal node is a sum
/// over the elementwise product of its two children. Internal sums have
/// width r, the root has width 1. Sum tables are created in post-order,
/// so the root table is last. Free parameters for power-of-two n:
/// n*r*v + (n-2)*r^2 + r.
pub fn build_btree(n: usize, v: usize, r: usize) -> Result<Circuit> {
    let spec = ArchitectureSpec::new(ArchKind::BTree, n, r, v)?;
    let mut layers = Vec::new();
    let mut sum_tables = Vec::new();
    build_btree_span(0, n, r, true, &mut layers, &mut sum_tables);
    let output = layers.len() - 1;
    Ok(Circuit { spec, layers, output, sum_tables })
}

fn build_btree_span(
    lo: usize,
    hi: usize,
    r: usize,
    root: bool,
    layers: &mut Vec<Layer>,
    sum_tables: &mut Vec<SumShape>,
) -> usize {
    if hi - lo == 1 {
        layers.push(Layer {
            kind: LayerKind::Input,
            scope: vec![lo],
            width: r,
            inputs: Vec::new(),
            table: Some(lo),
        });
        return layers.len() - 1;
    }
    let mid = lo + (hi - lo) / 2;
    let left = build_btree_span(lo, mid, r, false, layers, sum_tables);
    let right = build_btree_span(mid, hi, r, false, layers, sum_tables);
    layers.push(Layer {
        kind: LayerKind::Product,
        scope: (lo..hi).collect(),
        width: r,
        inputs: vec![left, right],
        table: None,
    });
    let product = layers.len() - 1;
    let width = if root { 1 } else { r };
    let table = sum_tables.len();
    sum_tables.push(SumShape { rows: width, cols: r });
    layers.push(Layer {
        kind: LayerKind::Sum,
        scope: (lo..hi).collect(),
        width,
        inputs: vec![product],
        table: Some(table),
    });
    layers.len() - 1
}

/// Builds the circuit named by `spec` with the matching builder.
pub fn build(spec: ArchitectureSpec) -> Result<Circuit> {
    // Specs arriving through deserialization skip the constructor, so
    // re-validate here.
    let spec = ArchitectureSpec::new(spec.kind, spec.n, spec.r, spec.v)?;
    match spec.kind {
        ArchKind::Ff => build_ff(spec.n, spec.v),
        ArchKind::Cp => build_cp(spec.n, spec.v, spec.r),
        ArchKind::Hmm => build_hmm(spec.n, spec.v, spec.r),
        ArchKind::BTree => build_btree(spec.n, spec.v, spec.r),
    }
}

/// Per-property outcome of a structural check. Failures never abort;
/// they are collected so a report can show everything wrong at once.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    /// Every sum layer's inputs share one scope.
    pub smooth: bool,
    /// Every product layer's inputs cover disjoint scopes that union to
    /// the product's own scope.
    pub decomposable: bool,
    /// Exactly one unconsumed layer; width 1; full window scope.
    pub single_full_scope_output: bool,
    /// Inputs strictly precede consumers.
    pub acyclic: bool,
    /// Table ids, widths, and declared omega shapes are consistent.
    pub param_shapes: bool,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks the five structural properties of a circuit. All four builders
/// produce circuits that pass every check.
pub fn validate(c: &Circuit) -> ValidationReport {
    let mut failures = Vec::new();
    let n = c.spec.n;

    let mut acyclic = true;
    for (i, layer) in c.layers.iter().enumerate() {
        if layer.inputs.iter().any(|&j| j >= i) {
            acyclic = false;
            failures.push(format!("layer {i} consumes a layer at or after itself"));
        }
    }

    let mut smooth = true;
    let mut decomposable = true;
    let mut param_shapes = true;
    let mut seen_tables = vec![0usize; c.sum_tables.len()];
    for (i, layer) in c.layers.iter().enumerate() {
        let in_scopes: Vec<&Vec<usize>> =
            layer.inputs.iter().map(|&j| &c.layers[j].scope).collect();
        match layer.kind {
            LayerKind::Input => {
                if layer.scope.len() != 1 {
                    decomposable = false;
                    failures.push(format!("input layer {i} scope is not a single position"));
                }
                if layer.table != layer.scope.first().copied() {
                    param_shapes = false;
                    failures.push(format!("input layer {i} table id differs from its position"));
                }
                if layer.width != c.spec.r {
                    param_shapes = false;
                    failures.push(format!(
                        "input layer {i} width {} differs from rank {}",
                        layer.width, c.spec.r
                    ));
                }
            }
            LayerKind::Product => {
                let mut union: Vec<usize> = Vec::new();
                let mut disjoint = true;
                for s in &in_scopes {
                    for &p in *s {
                        if union.contains(&p) {
                            disjoint = false;
                        }
                        union.push(p);
                    }
                }
                union.sort_unstable();
                if !disjoint {
                    decomposable = false;
                    failures.push(format!("product layer {i} has overlapping input scopes"));
                }
                if union != layer.scope {
                    decomposable = false;
                    failures.push(format!(
                        "product layer {i} scope is not the union of its input scopes"
                    ));
                }
                if layer.inputs.iter().any(|&j| c.layers[j].width != layer.width) {
                    param_shapes = false;
                    failures.push(format!("product layer {i} has an input of different width"));
                }
            }
            LayerKind::Sum => {
                if in_scopes.windows(2).any(|w| w[0] != w[1])
                    || in_scopes.first().map(|s| *s != &layer.scope).unwrap_or(true)
                {
                    smooth = false;
                    failures.push(format!(
                        "sum layer {i} inputs do not all share the layer scope"
                    ));
                }
                let cols: usize = layer.inputs.iter().map(|&j| c.layers[j].width).sum();
                match layer.table {
                    Some(t) if t < c.sum_tables.len() => {
                        seen_tables[t] += 1;
                        let shape = c.sum_tables[t];
                        if shape.rows != layer.width || shape.cols != cols {
                            param_shapes = false;
                            failures.push(format!(
                                "sum layer {i} needs a {}x{cols} table, declared {}x{}",
                                layer.width, shape.rows, shape.cols
                            ));
                        }
                    }
                    _ => {
                        param_shapes = false;
                        failures.push(format!("sum layer {i} has a missing or dangling table id"));
                    }
                }
            }
        }
    }
    for (t, &count) in seen_tables.iter().enumerate() {
        if count != 1 {
            param_shapes = false;
            failures.push(format!("sum table {t} is referenced {count} times"));
        }
    }

    let mut consumed = vec![false; c.layers.len()];
    for layer in &c.layers {
        for &j in &layer.inputs {
            consumed[j] = true;
        }
    }
    let roots: Vec<usize> = (0..c.layers.len()).filter(|&i| !consumed[i]).collect();
    let full: Vec<usize> = (0..n).collect();
    let mut single_output = roots == vec![c.output];
    if !single_output {
        failures.push(format!(
            "expected the single root {} to be exactly the unconsumed layer set {roots:?}",
            c.output
        ));
    } else {
        let out = &c.layers[c.output];
        if out.width != 1 || out.scope != full {
            single_output = false;
            failures.push("output layer is not width 1 with full window scope".into());
        }
    }

    ValidationReport {
        smooth,
        decomposable,
        single_full_scope_output: single_output,
        acyclic,
        param_shapes,
        failures,
    }
}
