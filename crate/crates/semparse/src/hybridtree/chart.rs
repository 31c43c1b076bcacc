//! Span-chart dynamic programs over hybrid trees.
//!
//! All charts share one factorization: a node covering span [i,j) is built
//! left to right through the slot trie of its arity, so a prefix state is
//! (symbol, trie node, span). Word slots extend a prefix by a non-empty token
//! run scored from per-unit prefix sums; child slots extend it by a completed
//! child span. The constrained chart fixes the meaning tree (symbols are its
//! nodes); the full chart ranges over every tree the compatibility table
//! generates (symbols are units). Sums run in log space; Viterbi swaps in
//! max with lexicographic tie-breaking on the projected serialization.

use std::rc::Rc;

use super::features::{FeatureKey, FeatureVector};
use super::pattern::{PatternSlot, PATTERN_COUNT};
use super::{resolve_nodes, Inventory, ModelParams, UnitId, BOS_WORD, EOS_WORD};
use crate::error::Error;
use crate::logic::{MeaningTree, Template};
use crate::Result;

const NEG_INF: f64 = f64::NEG_INFINITY;

#[inline]
fn logaddexp(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    let d = lo - hi;
    if d < -36.74 {
        hi
    } else {
        hi + d.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Per-sentence context
// ---------------------------------------------------------------------------

/// Precomputed per-sentence quantities: vocabulary ids and the word-unit
/// association weights (discrete emissions + embedding features + neural),
/// with prefix sums for O(1) span scores.
pub struct SentenceCtx {
    pub len: usize,
    pub word_ids: Vec<Option<usize>>,
    /// unit-major association weights: assoc[u * len + t]
    pub assoc: Vec<f64>,
    /// unit-major prefix sums: prefix[u * (len+1) + t]
    assoc_prefix: Vec<f64>,
}

impl SentenceCtx {
    pub fn build(tokens: &[String], params: &ModelParams) -> SentenceCtx {
        let l = tokens.len();
        let nu = params.inventory.len();
        let fs = &params.feature_space;
        let w = &params.weights;
        let word_ids: Vec<Option<usize>> = tokens.iter().map(|t| params.vocab.id(t)).collect();

        // embedding machinery: per-unit bias score and per-token EMBWORD rows
        let dim = fs.embedding_dim();
        let mut bias = vec![0.0; nu];
        let mut lw = vec![0.0; l * dim];
        if let Some(emb) = &params.embeddings {
            for u in 0..nu {
                let row = emb.row(u);
                let mut acc = 0.0;
                for j in 0..dim {
                    acc += w[fs.emb_bias(j)] * row[j];
                }
                bias[u] = acc;
            }
            for t in 0..l {
                if let Some(wt) = word_ids[t] {
                    for j in 0..dim {
                        lw[t * dim + j] = w[fs.emb_word(wt, j)];
                    }
                }
            }
        }

        let nn_scores = params.neural.as_ref().map(|nn| {
            let ids = nn.token_ids(&word_ids);
            nn.score_matrix(&ids)
        });

        let mut assoc = vec![0.0; nu * l];
        for u in 0..nu {
            let row = params.embeddings.as_ref().map(|e| e.row(u));
            for t in 0..l {
                let mut s = bias[u];
                if let Some(wt) = word_ids[t] {
                    s += w[fs.emit(u, wt)];
                }
                let prev = if t == 0 {
                    Some(BOS_WORD)
                } else {
                    word_ids[t - 1]
                };
                if let Some(p) = prev {
                    s += w[fs.emit_prev(u, p)];
                }
                let next = if t + 1 == l {
                    Some(EOS_WORD)
                } else {
                    word_ids[t + 1]
                };
                if let Some(nx) = next {
                    s += w[fs.emit_next(u, nx)];
                }
                if let Some(row) = row {
                    let lwt = &lw[t * dim..(t + 1) * dim];
                    for j in 0..dim {
                        s += lwt[j] * row[j];
                    }
                }
                if let Some(nn) = &nn_scores {
                    s += nn[u * l + t];
                }
                assoc[u * l + t] = s;
            }
        }

        let mut assoc_prefix = vec![0.0; nu * (l + 1)];
        for u in 0..nu {
            for t in 0..l {
                assoc_prefix[u * (l + 1) + t + 1] =
                    assoc_prefix[u * (l + 1) + t] + assoc[u * l + t];
            }
        }
        SentenceCtx {
            len: l,
            word_ids,
            assoc,
            assoc_prefix,
        }
    }

    /// Sum of association weights for unit `u` over tokens [a, b).
    #[inline]
    fn span_weight(&self, u: UnitId, a: usize, b: usize) -> f64 {
        self.assoc_prefix[u * (self.len + 1) + b] - self.assoc_prefix[u * (self.len + 1) + a]
    }
}

// ---------------------------------------------------------------------------
// Grammars: what the chart ranges over
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct GrammarEdge {
    pub child_sym: usize,
    pub trans_weight: f64,
    /// global edge index for expectation accumulation
    pub idx: usize,
}

pub(crate) trait Grammar {
    fn n_syms(&self) -> usize;
    fn unit_of(&self, sym: usize) -> UnitId;
    fn arity_of(&self, sym: usize) -> usize;
    fn edges(&self, sym: usize, slot: usize) -> &[GrammarEdge];
    fn roots(&self) -> &[usize];
    fn n_edges(&self) -> usize;
    /// (parent unit, slot, child unit) for a global edge index.
    fn edge_triple(&self, idx: usize) -> (UnitId, usize, UnitId);
}

/// Chart symbols are inventory units; edges come from the compatibility
/// table. Build once per model and share across sentences.
pub struct FullGrammar {
    units: usize,
    arities: Vec<usize>,
    edges: Vec<Vec<GrammarEdge>>, // sym * 2 + slot
    roots: Vec<usize>,
    triples: Vec<(UnitId, usize, UnitId)>,
}

impl FullGrammar {
    pub fn new(params: &ModelParams) -> FullGrammar {
        let nu = params.inventory.len();
        let mut edges = vec![Vec::new(); nu * 2];
        let mut triples = Vec::new();
        for p in 0..nu {
            for slot in 0..2 {
                for &c in params.compat.children(p, slot) {
                    let trans_weight = params
                        .feature_space
                        .trans(p, slot, c)
                        .map_or(0.0, |fid| params.weights[fid]);
                    edges[p * 2 + slot].push(GrammarEdge {
                        child_sym: c,
                        trans_weight,
                        idx: triples.len(),
                    });
                    triples.push((p, slot, c));
                }
            }
        }
        FullGrammar {
            units: nu,
            arities: (0..nu).map(|u| params.inventory.arity(u)).collect(),
            edges,
            roots: params.compat.roots.clone(),
            triples,
        }
    }
}

impl Grammar for FullGrammar {
    fn n_syms(&self) -> usize {
        self.units
    }
    fn unit_of(&self, sym: usize) -> UnitId {
        sym
    }
    fn arity_of(&self, sym: usize) -> usize {
        self.arities[sym]
    }
    fn edges(&self, sym: usize, slot: usize) -> &[GrammarEdge] {
        &self.edges[sym * 2 + slot]
    }
    fn roots(&self) -> &[usize] {
        &self.roots
    }
    fn n_edges(&self) -> usize {
        self.triples.len()
    }
    fn edge_triple(&self, idx: usize) -> (UnitId, usize, UnitId) {
        self.triples[idx]
    }
}

/// Chart symbols are the nodes of one fixed meaning tree.
pub(crate) struct TreeGrammar {
    units: Vec<UnitId>,
    arities: Vec<usize>,
    edges: Vec<Vec<GrammarEdge>>,
    roots: Vec<usize>,
    triples: Vec<(UnitId, usize, UnitId)>,
}

impl TreeGrammar {
    /// None when some unit of the tree is outside the inventory.
    pub fn build(tree: &MeaningTree, params: &ModelParams) -> Option<TreeGrammar> {
        let nodes = resolve_nodes(tree, &params.inventory)?;
        let n = nodes.len();
        let mut edges = vec![Vec::new(); n * 2];
        let mut triples = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            for (slot, &c) in node.children.iter().enumerate() {
                let cu = nodes[c].unit;
                let trans_weight = params
                    .feature_space
                    .trans(node.unit, slot, cu)
                    .map_or(0.0, |fid| params.weights[fid]);
                edges[i * 2 + slot].push(GrammarEdge {
                    child_sym: c,
                    trans_weight,
                    idx: triples.len(),
                });
                triples.push((node.unit, slot, cu));
            }
        }
        Some(TreeGrammar {
            units: nodes.iter().map(|n| n.unit).collect(),
            arities: nodes.iter().map(|n| n.children.len()).collect(),
            edges,
            roots: vec![0],
            triples,
        })
    }
}

impl Grammar for TreeGrammar {
    fn n_syms(&self) -> usize {
        self.units.len()
    }
    fn unit_of(&self, sym: usize) -> UnitId {
        self.units[sym]
    }
    fn arity_of(&self, sym: usize) -> usize {
        self.arities[sym]
    }
    fn edges(&self, sym: usize, slot: usize) -> &[GrammarEdge] {
        &self.edges[sym * 2 + slot]
    }
    fn roots(&self) -> &[usize] {
        &self.roots
    }
    fn n_edges(&self) -> usize {
        self.triples.len()
    }
    fn edge_triple(&self, idx: usize) -> (UnitId, usize, UnitId) {
        self.triples[idx]
    }
}

// ---------------------------------------------------------------------------
// Inside pass (log-sum semiring)
// ---------------------------------------------------------------------------

pub(crate) struct InsideTables {
    stride: usize, // l + 1
    /// inside[sym * S + span]
    inside: Vec<f64>,
    /// childsum[(sym * 2 + slot) * S + span]
    childsum: Vec<f64>,
    /// trie prefix tables, per sym at pre_off[sym]; node 0 (root) excluded
    pre: Vec<f64>,
    pre_off: Vec<usize>,
    pub log_z: f64,
}

impl InsideTables {
    #[inline]
    fn sp(&self, i: usize, j: usize) -> usize {
        i * self.stride + j
    }

    #[inline]
    fn pre_at(&self, sym: usize, node: usize, i: usize, j: usize) -> f64 {
        self.pre[self.pre_off[sym] + (node - 1) * self.stride * self.stride + self.sp(i, j)]
    }

    #[inline]
    fn childsum_at(&self, sym: usize, slot: usize, i: usize, j: usize) -> f64 {
        self.childsum[(sym * 2 + slot) * self.stride * self.stride + self.sp(i, j)]
    }
}

pub(crate) fn build_inside<G: Grammar>(
    g: &G,
    ctx: &SentenceCtx,
    params: &ModelParams,
) -> InsideTables {
    let l = ctx.len;
    let stride = l + 1;
    let s = stride * stride;
    let ns = g.n_syms();
    let tries = &params.patterns.tries;
    let fs = &params.feature_space;

    let mut pre_off = Vec::with_capacity(ns);
    let mut total = 0;
    for sym in 0..ns {
        pre_off.push(total);
        total += (tries[g.arity_of(sym)].len() - 1) * s;
    }
    let mut t = InsideTables {
        stride,
        inside: vec![NEG_INF; ns * s],
        childsum: vec![NEG_INF; ns * 2 * s],
        pre: vec![NEG_INF; total],
        pre_off,
        log_z: NEG_INF,
    };

    for len in 1..=l {
        for i in 0..=(l - len) {
            let j = i + len;
            let sp = t.sp(i, j);
            // phase A: word and non-initial child extensions, completions
            for sym in 0..ns {
                let u = g.unit_of(sym);
                let trie = &tries[g.arity_of(sym)];
                let mut inside_cell = NEG_INF;
                for node in 1..trie.len() {
                    if trie.is_first_child(node) {
                        continue;
                    }
                    let tn = &trie.nodes[node];
                    let mut acc = NEG_INF;
                    match tn.slot {
                        PatternSlot::Words => {
                            if tn.parent == 0 {
                                acc = ctx.span_weight(u, i, j);
                            } else {
                                for k in (i + 1)..j {
                                    let p = t.pre_at(sym, tn.parent, i, k);
                                    if p == NEG_INF {
                                        continue;
                                    }
                                    acc = logaddexp(acc, p + ctx.span_weight(u, k, j));
                                }
                            }
                        }
                        PatternSlot::First | PatternSlot::Second => {
                            let slot = usize::from(tn.slot == PatternSlot::Second);
                            for k in (i + 1)..j {
                                let p = t.pre_at(sym, tn.parent, i, k);
                                if p == NEG_INF {
                                    continue;
                                }
                                let cs = t.childsum_at(sym, slot, k, j);
                                if cs == NEG_INF {
                                    continue;
                                }
                                acc = logaddexp(acc, p + cs);
                            }
                        }
                    }
                    t.pre[t.pre_off[sym] + (node - 1) * s + sp] = acc;
                    if let Some(pid) = tn.complete {
                        if acc != NEG_INF {
                            let patw = params.weights[fs.pattern(u, pid)];
                            inside_cell = logaddexp(inside_cell, acc + patw);
                        }
                    }
                }
                t.inside[sym * s + sp] = inside_cell;
            }
            // phase B: child sums over finalized insides, initial child states
            for sym in 0..ns {
                let arity = g.arity_of(sym);
                for slot in 0..arity {
                    let mut acc = NEG_INF;
                    for e in g.edges(sym, slot) {
                        let ci = t.inside[e.child_sym * s + sp];
                        if ci == NEG_INF {
                            continue;
                        }
                        acc = logaddexp(acc, e.trans_weight + ci);
                    }
                    t.childsum[(sym * 2 + slot) * s + sp] = acc;
                }
                let trie = &tries[arity];
                for node in 1..trie.len() {
                    if trie.is_first_child(node) {
                        let slot = usize::from(trie.nodes[node].slot == PatternSlot::Second);
                        t.pre[t.pre_off[sym] + (node - 1) * s + sp] =
                            t.childsum[(sym * 2 + slot) * s + sp];
                    }
                }
            }
        }
    }

    let mut z = NEG_INF;
    for &r in g.roots() {
        z = logaddexp(z, t.inside[r * s + t.sp(0, l)]);
    }
    t.log_z = z;
    t
}

// ---------------------------------------------------------------------------
// Outside pass and posterior expectations
// ---------------------------------------------------------------------------

/// Posterior expectations of the chart's local features.
pub(crate) struct ChartExpectations {
    pub log_z: f64,
    /// P(token t is associated with unit u), unit-major u * len + t
    pub assoc: Vec<f64>,
    /// expected pattern uses, unit-major u * PATTERN_COUNT + pid
    pub pattern: Vec<f64>,
    /// expected transition uses per (parent unit, slot, child unit)
    pub trans: Vec<((UnitId, usize, UnitId), f64)>,
}

pub(crate) fn expectations<G: Grammar>(
    g: &G,
    ctx: &SentenceCtx,
    params: &ModelParams,
    t: &InsideTables,
) -> ChartExpectations {
    let l = ctx.len;
    let stride = t.stride;
    let s = stride * stride;
    let ns = g.n_syms();
    let nu = params.inventory.len();
    let tries = &params.patterns.tries;
    let fs = &params.feature_space;
    let log_z = t.log_z;

    let mut assoc_diff = vec![0.0; nu * (l + 1)];
    let mut pattern = vec![0.0; nu * PATTERN_COUNT];
    let mut trans_acc = vec![0.0; g.n_edges()];

    if log_z == NEG_INF {
        return ChartExpectations {
            log_z,
            assoc: vec![0.0; nu * l],
            pattern,
            trans: Vec::new(),
        };
    }

    let mut out_inside = vec![NEG_INF; ns * s];
    let mut out_pre = vec![NEG_INF; t.pre.len()];
    for &r in g.roots() {
        out_inside[r * s + t.sp(0, l)] = 0.0;
    }

    for len in (1..=l).rev() {
        for i in 0..=(l - len) {
            let j = i + len;
            let sp = t.sp(i, j);
            // phase 1: initial-child states hand outside mass to children
            for sym in 0..ns {
                let trie = &tries[g.arity_of(sym)];
                for node in 1..trie.len() {
                    if !trie.is_first_child(node) {
                        continue;
                    }
                    let o = out_pre[t.pre_off[sym] + (node - 1) * s + sp];
                    if o == NEG_INF {
                        continue;
                    }
                    let slot = usize::from(trie.nodes[node].slot == PatternSlot::Second);
                    for e in g.edges(sym, slot) {
                        let ci = t.inside[e.child_sym * s + sp];
                        if ci == NEG_INF {
                            continue;
                        }
                        let cell = &mut out_inside[e.child_sym * s + sp];
                        *cell = logaddexp(*cell, o + e.trans_weight);
                        trans_acc[e.idx] += (o + e.trans_weight + ci - log_z).exp();
                    }
                }
            }
            // phase 2: completions distribute node outside into trie states
            for sym in 0..ns {
                let u = g.unit_of(sym);
                let oi = out_inside[sym * s + sp];
                if oi == NEG_INF {
                    continue;
                }
                let trie = &tries[g.arity_of(sym)];
                for node in 1..trie.len() {
                    if let Some(pid) = trie.nodes[node].complete {
                        let pre = t.pre[t.pre_off[sym] + (node - 1) * s + sp];
                        if pre == NEG_INF {
                            continue;
                        }
                        let patw = params.weights[fs.pattern(u, pid)];
                        let cell = &mut out_pre[t.pre_off[sym] + (node - 1) * s + sp];
                        *cell = logaddexp(*cell, oi + patw);
                        pattern[u * PATTERN_COUNT + pid] += (oi + patw + pre - log_z).exp();
                    }
                }
            }
            // phase 3: unwind incoming word/child extensions
            for sym in 0..ns {
                let u = g.unit_of(sym);
                let trie = &tries[g.arity_of(sym)];
                for node in 1..trie.len() {
                    if trie.is_first_child(node) {
                        continue;
                    }
                    let o = out_pre[t.pre_off[sym] + (node - 1) * s + sp];
                    if o == NEG_INF {
                        continue;
                    }
                    let tn = &trie.nodes[node];
                    match tn.slot {
                        PatternSlot::Words => {
                            if tn.parent == 0 {
                                let mass = (o + ctx.span_weight(u, i, j) - log_z).exp();
                                assoc_diff[u * (l + 1) + i] += mass;
                                assoc_diff[u * (l + 1) + j] -= mass;
                            } else {
                                for k in (i + 1)..j {
                                    let p = t.pre_at(sym, tn.parent, i, k);
                                    if p == NEG_INF {
                                        continue;
                                    }
                                    let contrib = o + ctx.span_weight(u, k, j);
                                    let cell = &mut out_pre
                                        [t.pre_off[sym] + (tn.parent - 1) * s + t.sp(i, k)];
                                    *cell = logaddexp(*cell, contrib);
                                    let mass = (p + contrib - log_z).exp();
                                    assoc_diff[u * (l + 1) + k] += mass;
                                    assoc_diff[u * (l + 1) + j] -= mass;
                                }
                            }
                        }
                        PatternSlot::First | PatternSlot::Second => {
                            let slot = usize::from(tn.slot == PatternSlot::Second);
                            for k in (i + 1)..j {
                                let p = t.pre_at(sym, tn.parent, i, k);
                                if p == NEG_INF {
                                    continue;
                                }
                                let cs = t.childsum_at(sym, slot, k, j);
                                if cs != NEG_INF {
                                    let cell = &mut out_pre
                                        [t.pre_off[sym] + (tn.parent - 1) * s + t.sp(i, k)];
                                    *cell = logaddexp(*cell, o + cs);
                                }
                                let spk = t.sp(k, j);
                                for e in g.edges(sym, slot) {
                                    let ci = t.inside[e.child_sym * s + spk];
                                    if ci == NEG_INF {
                                        continue;
                                    }
                                    let cell = &mut out_inside[e.child_sym * s + spk];
                                    *cell = logaddexp(*cell, o + p + e.trans_weight);
                                    trans_acc[e.idx] += (o + p + e.trans_weight + ci - log_z).exp();
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut assoc = vec![0.0; nu * l];
    for u in 0..nu {
        let mut run = 0.0;
        for tk in 0..l {
            run += assoc_diff[u * (l + 1) + tk];
            assoc[u * l + tk] = run;
        }
    }
    let trans = trans_acc
        .into_iter()
        .enumerate()
        .filter(|(_, v)| *v != 0.0)
        .map(|(idx, v)| (g.edge_triple(idx), v))
        .collect();
    ChartExpectations {
        log_z,
        assoc,
        pattern,
        trans,
    }
}

// ---------------------------------------------------------------------------
// Public entry points: partitions and expectations
// ---------------------------------------------------------------------------

/// log Σ_{h ∈ H(n,m)} exp F(n, m, h); -inf when H is empty (sentence too
/// short or units outside the inventory).
pub fn log_partition_constrained(
    tokens: &[String],
    tree: &MeaningTree,
    params: &ModelParams,
) -> f64 {
    let ctx = SentenceCtx::build(tokens, params);
    log_partition_constrained_ctx(&ctx, tree, params)
}

pub(crate) fn log_partition_constrained_ctx(
    ctx: &SentenceCtx,
    tree: &MeaningTree,
    params: &ModelParams,
) -> f64 {
    match TreeGrammar::build(tree, params) {
        Some(g) => build_inside(&g, ctx, params).log_z,
        None => NEG_INF,
    }
}

/// log Σ over all meaning trees m' and h' ∈ H(n, m') of exp F(n, m', h').
pub fn log_partition_full(tokens: &[String], params: &ModelParams) -> f64 {
    let g = FullGrammar::new(params);
    let ctx = SentenceCtx::build(tokens, params);
    build_inside(&g, &ctx, params).log_z
}

/// Posterior feature expectations under the constrained and full charts,
/// plus the per-(unit, token) association posteriors the neural gradient
/// needs.
pub struct ExpectedFeatures {
    pub constrained: FeatureVector,
    pub full: FeatureVector,
    pub log_z_constrained: f64,
    pub log_z_full: f64,
    /// unit-major association posteriors u * len + t
    pub assoc_constrained: Vec<f64>,
    pub assoc_full: Vec<f64>,
}

pub fn expected_features(
    tokens: &[String],
    tree: &MeaningTree,
    params: &ModelParams,
) -> Result<ExpectedFeatures> {
    let ctx = SentenceCtx::build(tokens, params);
    let tg = TreeGrammar::build(tree, params)
        .ok_or_else(|| Error::Data("tree has units outside the inventory".into()))?;
    let inside_c = build_inside(&tg, &ctx, params);
    if inside_c.log_z == NEG_INF {
        return Err(Error::Data(
            "H(n, m) is empty: sentence too short for the tree".into(),
        ));
    }
    let exp_c = expectations(&tg, &ctx, params, &inside_c);
    let fg = FullGrammar::new(params);
    let inside_f = build_inside(&fg, &ctx, params);
    let exp_f = expectations(&fg, &ctx, params, &inside_f);
    Ok(ExpectedFeatures {
        constrained: expectation_vector(&exp_c, &ctx, params),
        full: expectation_vector(&exp_f, &ctx, params),
        log_z_constrained: exp_c.log_z,
        log_z_full: exp_f.log_z,
        assoc_constrained: exp_c.assoc,
        assoc_full: exp_f.assoc,
    })
}

/// Converts chart expectations into a sparse feature vector.
fn expectation_vector(
    exp: &ChartExpectations,
    ctx: &SentenceCtx,
    params: &ModelParams,
) -> FeatureVector {
    let mut fv = FeatureVector::new();
    let l = ctx.len;
    let nu = params.inventory.len();
    let mut push = |k: FeatureKey, v: f64| {
        if v != 0.0 {
            *fv.entry(k).or_insert(0.0) += v;
        }
    };
    for u in 0..nu {
        let row = params.embeddings.as_ref().map(|e| e.row(u));
        for t in 0..l {
            let p = exp.assoc[u * l + t];
            if p == 0.0 {
                continue;
            }
            if let Some(w) = ctx.word_ids[t] {
                push(FeatureKey::Emit { unit: u, word: w }, p);
            }
            let prev = if t == 0 {
                Some(BOS_WORD)
            } else {
                ctx.word_ids[t - 1]
            };
            if let Some(w) = prev {
                push(FeatureKey::EmitPrev { unit: u, word: w }, p);
            }
            let next = if t + 1 == l {
                Some(EOS_WORD)
            } else {
                ctx.word_ids[t + 1]
            };
            if let Some(w) = next {
                push(FeatureKey::EmitNext { unit: u, word: w }, p);
            }
            if let Some(row) = row {
                for (j, &e) in row.iter().enumerate() {
                    if let Some(w) = ctx.word_ids[t] {
                        push(FeatureKey::EmbWord { word: w, dim: j }, p * e);
                    }
                    push(FeatureKey::EmbBias { dim: j }, p * e);
                }
            }
        }
        for pid in 0..PATTERN_COUNT {
            let v = exp.pattern[u * PATTERN_COUNT + pid];
            if v != 0.0 {
                push(
                    FeatureKey::Pattern {
                        unit: u,
                        pattern: pid,
                    },
                    v,
                );
            }
        }
    }
    for &((p, slot, c), v) in &exp.trans {
        push(
            FeatureKey::Trans {
                parent: p,
                slot,
                child: c,
            },
            v,
        );
    }
    fv
}

/// Adds `scale` times the chart expectations to a dense gradient vector
/// (feature-space layout). Features keyed by out-of-vocabulary words are
/// dropped, matching the scoring path.
pub(crate) fn accumulate_expectations(
    exp: &ChartExpectations,
    ctx: &SentenceCtx,
    params: &ModelParams,
    scale: f64,
    grad: &mut [f64],
) {
    let fs = &params.feature_space;
    let l = ctx.len;
    let nu = params.inventory.len();
    let dim = fs.embedding_dim();
    for u in 0..nu {
        let row = params.embeddings.as_ref().map(|e| e.row(u));
        for t in 0..l {
            let p = exp.assoc[u * l + t];
            if p == 0.0 {
                continue;
            }
            let v = scale * p;
            if let Some(w) = ctx.word_ids[t] {
                grad[fs.emit(u, w)] += v;
            }
            let prev = if t == 0 {
                Some(BOS_WORD)
            } else {
                ctx.word_ids[t - 1]
            };
            if let Some(w) = prev {
                grad[fs.emit_prev(u, w)] += v;
            }
            let next = if t + 1 == l {
                Some(EOS_WORD)
            } else {
                ctx.word_ids[t + 1]
            };
            if let Some(w) = next {
                grad[fs.emit_next(u, w)] += v;
            }
            if let Some(row) = row {
                for j in 0..dim {
                    let ve = v * row[j];
                    if let Some(w) = ctx.word_ids[t] {
                        grad[fs.emb_word(w, j)] += ve;
                    }
                    grad[fs.emb_bias(j)] += ve;
                }
            }
        }
        for pid in 0..PATTERN_COUNT {
            let v = exp.pattern[u * PATTERN_COUNT + pid];
            if v != 0.0 {
                grad[fs.pattern(u, pid)] += scale * v;
            }
        }
    }
    for &((p, slot, c), v) in &exp.trans {
        if let Some(fid) = fs.trans(p, slot, c) {
            grad[fid] += scale * v;
        }
    }
}

/// One training instance's chart pass: log partitions and gradient
/// accumulation (constrained minus full) into `lambda_grad` and, when neural
/// scoring is active, `theta_grad`. Returns None when H(n, m) is empty.
pub(crate) fn accumulate_instance_gradient(
    tokens: &[String],
    tree: &MeaningTree,
    params: &ModelParams,
    full: &FullGrammar,
    lambda_grad: &mut [f64],
    theta_grad: Option<&mut [f64]>,
) -> Option<(f64, f64)> {
    let ctx = SentenceCtx::build(tokens, params);
    let tg = TreeGrammar::build(tree, params)?;
    let inside_c = build_inside(&tg, &ctx, params);
    if inside_c.log_z == NEG_INF {
        return None;
    }
    let exp_c = expectations(&tg, &ctx, params, &inside_c);
    let inside_f = build_inside(full, &ctx, params);
    let exp_f = expectations(full, &ctx, params, &inside_f);
    accumulate_expectations(&exp_c, &ctx, params, 1.0, lambda_grad);
    accumulate_expectations(&exp_f, &ctx, params, -1.0, lambda_grad);
    if let (Some(theta_grad), Some(nn)) = (theta_grad, &params.neural) {
        let ids = nn.token_ids(&ctx.word_ids);
        let diff: Vec<f64> = exp_c
            .assoc
            .iter()
            .zip(&exp_f.assoc)
            .map(|(a, b)| a - b)
            .collect();
        nn.accumulate_grad(&ids, &diff, theta_grad);
    }
    Some((inside_c.log_z, inside_f.log_z))
}

/// Log-likelihood terms only (no expectations); None when H(n, m) is empty.
pub(crate) fn instance_log_likelihood(
    tokens: &[String],
    tree: &MeaningTree,
    params: &ModelParams,
    full: &FullGrammar,
) -> Option<(f64, f64)> {
    let ctx = SentenceCtx::build(tokens, params);
    let tg = TreeGrammar::build(tree, params)?;
    let logzc = build_inside(&tg, &ctx, params).log_z;
    if logzc == NEG_INF {
        return None;
    }
    let logzf = build_inside(full, &ctx, params).log_z;
    Some((logzc, logzf))
}

// ---------------------------------------------------------------------------
// Viterbi decoding (max semiring with lexicographic tie-breaking)
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Proj {
    unit: UnitId,
    children: Vec<Rc<Proj>>,
}

fn proj_serial(p: &Proj, inv: &Inventory) -> String {
    let mut out = String::new();
    write_proj(p, inv, &mut out);
    out
}

fn write_proj(p: &Proj, inv: &Inventory, out: &mut String) {
    let mut next = 0usize;
    render_proj_template(inv.unit(p.unit).template(), p, inv, out, &mut next);
}

fn render_proj_template(
    tpl: &Template,
    p: &Proj,
    inv: &Inventory,
    out: &mut String,
    next: &mut usize,
) {
    match tpl {
        Template::Slot(_) => {
            let child = &p.children[*next];
            *next += 1;
            write_proj(child, inv, out);
        }
        Template::Literal(s) => {
            out.push('\'');
            out.push_str(s);
            out.push('\'');
        }
        Template::App { name, children } => {
            out.push_str(name);
            if !children.is_empty() {
                out.push('(');
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    render_proj_template(c, p, inv, out, next);
                }
                out.push(')');
            }
        }
    }
}

fn proj_tree(p: &Proj, inv: &Inventory) -> MeaningTree {
    MeaningTree {
        unit: inv.unit(p.unit).clone(),
        children: p.children.iter().map(|c| proj_tree(c, inv)).collect(),
    }
}

#[derive(Clone, Default)]
struct MaxPre {
    score: f64,
    x: Option<Rc<Proj>>,
    y: Option<Rc<Proj>>,
}

#[derive(Clone, Default)]
struct MaxCell {
    score: f64,
    proj: Option<Rc<Proj>>,
}

fn serial_pair(x: &Option<Rc<Proj>>, y: &Option<Rc<Proj>>, inv: &Inventory) -> String {
    let mut s = String::new();
    if let Some(x) = x {
        s.push_str(&proj_serial(x, inv));
    }
    s.push('\u{1}');
    if let Some(y) = y {
        s.push_str(&proj_serial(y, inv));
    }
    s
}

/// Decodes many sentences with one shared grammar; output order matches the
/// input order regardless of thread count.
pub fn decode_batch<'a>(
    sentences: impl Iterator<Item = &'a [String]>,
    params: &ModelParams,
) -> Vec<Option<MeaningTree>> {
    use rayon::prelude::*;
    let g = FullGrammar::new(params);
    let sents: Vec<&[String]> = sentences.collect();
    sents
        .par_iter()
        .map(|tokens| {
            let ctx = SentenceCtx::build(tokens, params);
            decode_ctx(&ctx, params, &g)
        })
        .collect()
}

/// Viterbi decode: the meaning tree of the best-scoring hybrid tree, or None
/// when no derivation covers the sentence. Exact score ties go to the
/// lexicographically smallest canonical serialization.
pub fn decode(tokens: &[String], params: &ModelParams) -> Option<MeaningTree> {
    let g = FullGrammar::new(params);
    let ctx = SentenceCtx::build(tokens, params);
    decode_ctx(&ctx, params, &g)
}

pub(crate) fn decode_ctx(
    ctx: &SentenceCtx,
    params: &ModelParams,
    g: &FullGrammar,
) -> Option<MeaningTree> {
    let l = ctx.len;
    if l == 0 {
        return None;
    }
    let stride = l + 1;
    let s = stride * stride;
    let ns = g.n_syms();
    let tries = &params.patterns.tries;
    let fs = &params.feature_space;
    let inv = &params.inventory;

    let empty_pre = MaxPre {
        score: NEG_INF,
        x: None,
        y: None,
    };
    let empty_cell = MaxCell {
        score: NEG_INF,
        proj: None,
    };
    let mut pre_off = Vec::with_capacity(ns);
    let mut total = 0;
    for sym in 0..ns {
        pre_off.push(total);
        total += (tries[g.arity_of(sym)].len() - 1) * s;
    }
    let mut pre: Vec<MaxPre> = vec![empty_pre.clone(); total];
    let mut best: Vec<MaxCell> = vec![empty_cell.clone(); ns * s];

    let consider_pre = |cell: &mut MaxPre, score: f64, x: Option<Rc<Proj>>, y: Option<Rc<Proj>>| {
        if score == NEG_INF {
            return;
        }
        let wins = score > cell.score
            || (score == cell.score
                && serial_pair(&x, &y, inv) < serial_pair(&cell.x, &cell.y, inv));
        if wins {
            *cell = MaxPre { score, x, y };
        }
    };
    let consider_cell = |cell: &mut MaxCell, score: f64, proj: Rc<Proj>| {
        if score > cell.score {
            *cell = MaxCell {
                score,
                proj: Some(proj),
            };
        } else if score == cell.score {
            if let Some(old) = &cell.proj {
                if proj_serial(&proj, inv) < proj_serial(old, inv) {
                    cell.proj = Some(proj);
                }
            }
        }
    };

    for len in 1..=l {
        for i in 0..=(l - len) {
            let j = i + len;
            let sp = i * stride + j;
            // phase A
            for sym in 0..ns {
                let u = g.unit_of(sym);
                let trie = &tries[g.arity_of(sym)];
                for node in 1..trie.len() {
                    if trie.is_first_child(node) {
                        continue;
                    }
                    let tn = &trie.nodes[node];
                    let mut cell = empty_pre.clone();
                    match tn.slot {
                        PatternSlot::Words => {
                            if tn.parent == 0 {
                                cell.score = ctx.span_weight(u, i, j);
                            } else {
                                for k in (i + 1)..j {
                                    let p =
                                        &pre[pre_off[sym] + (tn.parent - 1) * s + i * stride + k];
                                    if p.score == NEG_INF {
                                        continue;
                                    }
                                    consider_pre(
                                        &mut cell,
                                        p.score + ctx.span_weight(u, k, j),
                                        p.x.clone(),
                                        p.y.clone(),
                                    );
                                }
                            }
                        }
                        PatternSlot::First | PatternSlot::Second => {
                            let second = tn.slot == PatternSlot::Second;
                            let slot = usize::from(second);
                            for k in (i + 1)..j {
                                let p = pre[pre_off[sym] + (tn.parent - 1) * s + i * stride + k]
                                    .clone();
                                if p.score == NEG_INF {
                                    continue;
                                }
                                for e in g.edges(sym, slot) {
                                    let child = &best[e.child_sym * s + k * stride + j];
                                    if child.score == NEG_INF {
                                        continue;
                                    }
                                    let (x, y) = if second {
                                        (p.x.clone(), child.proj.clone())
                                    } else {
                                        (child.proj.clone(), p.y.clone())
                                    };
                                    consider_pre(
                                        &mut cell,
                                        p.score + e.trans_weight + child.score,
                                        x,
                                        y,
                                    );
                                }
                            }
                        }
                    }
                    if let Some(pid) = tn.complete {
                        if cell.score != NEG_INF {
                            let patw = params.weights[fs.pattern(u, pid)];
                            let children: Vec<Rc<Proj>> = [cell.x.clone(), cell.y.clone()]
                                .into_iter()
                                .flatten()
                                .collect();
                            let proj = Rc::new(Proj { unit: u, children });
                            consider_cell(&mut best[sym * s + sp], cell.score + patw, proj);
                        }
                    }
                    pre[pre_off[sym] + (node - 1) * s + sp] = cell;
                }
            }
            // phase B: initial-child states
            for sym in 0..ns {
                let trie = &tries[g.arity_of(sym)];
                for node in 1..trie.len() {
                    if !trie.is_first_child(node) {
                        continue;
                    }
                    let second = trie.nodes[node].slot == PatternSlot::Second;
                    let slot = usize::from(second);
                    let mut cell = empty_pre.clone();
                    for e in g.edges(sym, slot) {
                        let child = &best[e.child_sym * s + sp];
                        if child.score == NEG_INF {
                            continue;
                        }
                        let (x, y) = if second {
                            (None, child.proj.clone())
                        } else {
                            (child.proj.clone(), None)
                        };
                        consider_pre(&mut cell, e.trans_weight + child.score, x, y);
                    }
                    pre[pre_off[sym] + (node - 1) * s + sp] = cell;
                }
            }
        }
    }

    let mut winner: Option<(f64, Rc<Proj>)> = None;
    for &r in g.roots() {
        let cell = &best[r * s + l]; // span (0, l)
        if cell.score == NEG_INF {
            continue;
        }
        let proj = cell.proj.clone().unwrap();
        winner = match winner {
            None => Some((cell.score, proj)),
            Some((bs, bp)) => {
                if cell.score > bs
                    || (cell.score == bs && proj_serial(&proj, inv) < proj_serial(&bp, inv))
                {
                    Some((cell.score, proj))
                } else {
                    Some((bs, bp))
                }
            }
        };
    }
    winner.map(|(_, p)| proj_tree(&p, inv))
}
