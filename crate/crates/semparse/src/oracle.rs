//! Exhaustive and independent reference implementations backing the test
//! suites. Nothing here shares code with the dynamic programs or the SVD it
//! checks.

use crate::linalg::Matrix;

/// Eigendecomposition of a symmetric matrix by the classical (two-sided)
/// Jacobi rotation method. Returns eigenvalues in descending order with the
/// matching eigenvector columns.
pub fn sym_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + m.frobenius_norm()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // A <- Jᵀ A J on rows/cols p,q
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(j, j)]
            .partial_cmp(&m[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut vals = Vec::with_capacity(n);
    let mut vecs = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        vals.push(m[(old, old)]);
        for r in 0..n {
            vecs[(r, new)] = v[(r, old)];
        }
    }
    (vals, vecs)
}

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[i] += eps;
    lo[i] -= eps;
    (f(&hi) - f(&lo)) / (2.0 * eps)
}

/// True when `a` and `b` agree to `rel` relative error (absolute fallback for
/// values near zero).
pub fn grads_agree(a: f64, b: f64, rel: f64) -> bool {
    let diff = (a - b).abs();
    diff <= rel * a.abs().max(b.abs()) || diff <= 1e-8
}

// ---------------------------------------------------------------------------
// Exhaustive hybrid-tree enumeration
// ---------------------------------------------------------------------------

use std::collections::HashMap as StdHashMap;

use crate::hybridtree::{
    enumerate_patterns, extract_features, score, FeatureVector, HybridTree, ModelParams,
    PatternSlot, UnitId,
};
use crate::logic::{serialize_mrl, MeaningTree};

fn slots_min_tokens(slots: &[PatternSlot]) -> usize {
    slots.len() // every slot consumes at least one token
}

/// Every hybrid tree pairing `tree` with the token span [lo, hi).
pub fn enumerate_constrained(tree: &MeaningTree, lo: usize, hi: usize) -> Vec<HybridTree> {
    let mut out = Vec::new();
    for pattern in enumerate_patterns(tree.children.len()) {
        for (spans, children) in tile(&pattern.slots, tree, lo, hi, &mut |child, a, b| {
            enumerate_constrained(child, a, b)
        }) {
            out.push(HybridTree {
                unit: tree.unit.clone(),
                pattern: pattern.clone(),
                word_spans: spans,
                children,
            });
        }
    }
    out
}

/// Tiles `slots` over [cur, hi); `expand` enumerates a child slot's subtrees.
/// Children come back in meaning order (First before Second).
fn tile(
    slots: &[PatternSlot],
    tree: &MeaningTree,
    cur: usize,
    hi: usize,
    expand: &mut dyn FnMut(&MeaningTree, usize, usize) -> Vec<HybridTree>,
) -> Vec<(Vec<(usize, usize)>, Vec<HybridTree>)> {
    if slots.is_empty() {
        return if cur == hi {
            vec![(Vec::new(), Vec::new())]
        } else {
            Vec::new()
        };
    }
    let rest_min = slots_min_tokens(&slots[1..]);
    if hi < cur + 1 + rest_min {
        return Vec::new();
    }
    let mut out = Vec::new();
    for k in (cur + 1)..=(hi - rest_min) {
        match slots[0] {
            PatternSlot::Words => {
                for (mut spans, children) in tile(&slots[1..], tree, k, hi, expand) {
                    spans.insert(0, (cur, k));
                    out.push((spans, children));
                }
            }
            PatternSlot::First | PatternSlot::Second => {
                let idx = usize::from(slots[0] == PatternSlot::Second);
                for sub in expand(&tree.children[idx], cur, k) {
                    for (spans, mut children) in tile(&slots[1..], tree, k, hi, expand) {
                        if idx == 0 {
                            children.insert(0, sub.clone());
                        } else {
                            children.push(sub.clone());
                        }
                        out.push((spans, children));
                    }
                }
            }
        }
    }
    out
}

/// Every hybrid tree over every meaning tree the model's compatibility table
/// generates for a sentence of `len` tokens.
pub fn enumerate_full(params: &ModelParams, len: usize) -> Vec<HybridTree> {
    let mut memo: StdHashMap<(UnitId, usize, usize), Vec<HybridTree>> = StdHashMap::new();
    let mut out = Vec::new();
    for &root in &params.compat.roots {
        out.extend(enumerate_unit(params, root, 0, len, &mut memo));
    }
    out
}

fn enumerate_unit(
    params: &ModelParams,
    unit: UnitId,
    lo: usize,
    hi: usize,
    memo: &mut StdHashMap<(UnitId, usize, usize), Vec<HybridTree>>,
) -> Vec<HybridTree> {
    if let Some(v) = memo.get(&(unit, lo, hi)) {
        return v.clone();
    }
    let sem = params.inventory.unit(unit).clone();
    let arity = sem.arity();
    let mut out = Vec::new();
    for pattern in enumerate_patterns(arity) {
        for (spans, children) in tile_full(params, unit, &pattern.slots, lo, hi, memo) {
            out.push(HybridTree {
                unit: sem.clone(),
                pattern: pattern.clone(),
                word_spans: spans,
                children,
            });
        }
    }
    memo.insert((unit, lo, hi), out.clone());
    out
}

fn tile_full(
    params: &ModelParams,
    parent: UnitId,
    slots: &[PatternSlot],
    cur: usize,
    hi: usize,
    memo: &mut StdHashMap<(UnitId, usize, usize), Vec<HybridTree>>,
) -> Vec<(Vec<(usize, usize)>, Vec<HybridTree>)> {
    if slots.is_empty() {
        return if cur == hi {
            vec![(Vec::new(), Vec::new())]
        } else {
            Vec::new()
        };
    }
    let rest_min = slots_min_tokens(&slots[1..]);
    if hi < cur + 1 + rest_min {
        return Vec::new();
    }
    let mut out = Vec::new();
    for k in (cur + 1)..=(hi - rest_min) {
        match slots[0] {
            PatternSlot::Words => {
                for (mut spans, children) in tile_full(params, parent, &slots[1..], k, hi, memo) {
                    spans.insert(0, (cur, k));
                    out.push((spans, children));
                }
            }
            PatternSlot::First | PatternSlot::Second => {
                let idx = usize::from(slots[0] == PatternSlot::Second);
                for &child_unit in params.compat.children(parent, idx) {
                    for sub in enumerate_unit(params, child_unit, cur, k, memo) {
                        for (spans, mut children) in
                            tile_full(params, parent, &slots[1..], k, hi, memo)
                        {
                            if idx == 0 {
                                children.insert(0, sub.clone());
                            } else {
                                children.push(sub.clone());
                            }
                            out.push((spans, children));
                        }
                    }
                }
            }
        }
    }
    out
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let vs: Vec<f64> = values.collect();
    let m = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Brute-force inference over an explicit hybrid-tree list: log partition,
/// probability-weighted feature expectations and association posteriors.
pub struct BruteChart {
    pub log_z: f64,
    pub expected: FeatureVector,
    /// unit-major association posteriors: assoc[u * len + t]
    pub assoc: Vec<f64>,
}

pub fn brute_chart(tokens: &[String], trees: &[HybridTree], params: &ModelParams) -> BruteChart {
    let nu = params.inventory.len();
    let l = tokens.len();
    let scores: Vec<f64> = trees
        .iter()
        .map(|h| score(tokens, h, params).expect("oracle tree must score"))
        .collect();
    let log_z = logsumexp(scores.iter().copied());
    let mut expected = FeatureVector::new();
    let mut assoc = vec![0.0; nu * l];
    if log_z == f64::NEG_INFINITY {
        return BruteChart {
            log_z,
            expected,
            assoc,
        };
    }
    for (h, s) in trees.iter().zip(&scores) {
        let p = (s - log_z).exp();
        for (key, v) in extract_features(tokens, h, params).expect("oracle features") {
            *expected.entry(key).or_insert(0.0) += p * v;
        }
        for (t, unit) in h.associations() {
            let u = params.inventory.id(unit).expect("inventory unit");
            assoc[u * l + t] += p;
        }
    }
    BruteChart {
        log_z,
        expected,
        assoc,
    }
}

/// Brute-force decode: maximum score, ties to the lexicographically smallest
/// canonical serialization of the projected meaning tree.
pub fn brute_decode(
    tokens: &[String],
    trees: &[HybridTree],
    params: &ModelParams,
) -> Option<(f64, MeaningTree)> {
    let mut best: Option<(f64, String, MeaningTree)> = None;
    for h in trees {
        let s = score(tokens, h, params).expect("oracle tree must score");
        let m = h.project();
        let ser = serialize_mrl(&m);
        best = match best {
            None => Some((s, ser, m)),
            Some((bs, bser, bm)) => {
                if s > bs || (s == bs && ser < bser) {
                    Some((s, ser, m))
                } else {
                    Some((bs, bser, bm))
                }
            }
        };
    }
    best.map(|(s, _, m)| (s, m))
}

// ---------------------------------------------------------------------------
// Randomized micro cases: small inventories, short sentences, random weights
// ---------------------------------------------------------------------------

use rand::rngs::StdRng;
use rand::Rng;

use crate::hybridtree::{
    decode, expected_features, log_partition_constrained, log_partition_full, AlignedEmbeddings,
    CompatTable, Inventory, Vocab,
};
use crate::logic::SignatureTable;
use crate::neural::NeuralParams;

pub struct MicroCase {
    pub params: ModelParams,
    pub tokens: Vec<String>,
    pub gold: MeaningTree,
}

fn min_tokens(tree: &MeaningTree) -> usize {
    let own = usize::from(tree.unit.arity() < 2); // leaves and unary nodes consume a word
    own + tree.children.iter().map(min_tokens).sum::<usize>()
}

fn random_tree(
    inv: &Inventory,
    compat: &CompatTable,
    rng: &mut StdRng,
    unit: UnitId,
    depth: usize,
) -> Option<MeaningTree> {
    if depth > 3 {
        return None;
    }
    let mut children = Vec::new();
    for slot in 0..inv.arity(unit) {
        let opts = compat.children(unit, slot);
        if opts.is_empty() {
            return None;
        }
        let pick = opts[rng.gen_range(0..opts.len())];
        children.push(random_tree(inv, compat, rng, pick, depth + 1)?);
    }
    Some(MeaningTree {
        unit: inv.unit(unit).clone(),
        children,
    })
}

/// A random model (2-4 units, random grammar, weights in [-1, 1], optional
/// embedding and neural blocks), with a derivable gold tree and a sentence of
/// at most 5 tokens that admits it.
pub fn random_micro_case(
    rng: &mut StdRng,
    with_embeddings: bool,
    neural_window: Option<usize>,
) -> MicroCase {
    loop {
        let n_units = rng.gen_range(2..=4);
        let mut inv = Inventory::new();
        for idx in 0..n_units {
            let sig = match rng.gen_range(0..=2) {
                0 => format!("E:f{idx}()"),
                1 => format!("E:f{idx}(E)"),
                _ => format!("E:f{idx}(E,E)"),
            };
            inv.add(SignatureTable::parse_signature(&sig).unwrap());
        }
        let mut children = vec![[Vec::new(), Vec::new()]; n_units];
        for p in 0..n_units {
            for slot in 0..inv.arity(p) {
                for c in 0..n_units {
                    if rng.gen_bool(0.7) {
                        children[p][slot].push(c);
                    }
                }
                if children[p][slot].is_empty() {
                    children[p][slot].push(rng.gen_range(0..n_units));
                }
            }
        }
        let mut roots: Vec<UnitId> = (0..n_units).filter(|_| rng.gen_bool(0.5)).collect();
        if roots.is_empty() {
            roots.push(0);
        }
        let compat = CompatTable::from_parts(roots.clone(), children);

        let root = roots[rng.gen_range(0..roots.len())];
        let gold = match random_tree(&inv, &compat, rng, root, 0) {
            Some(t) => t,
            None => continue,
        };
        let need = min_tokens(&gold).max(1);
        if need > 5 {
            continue;
        }
        let len = rng.gen_range(need..=5);
        let words = ["a", "b", "c", "d", "e"];
        let tokens: Vec<String> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.15) {
                    // outside the vocabulary
                    "zz".to_string()
                } else {
                    words[rng.gen_range(0..words.len())].to_string()
                }
            })
            .collect();
        let vocab = Vocab::from_tokens(words.iter().copied());

        let embeddings = with_embeddings.then(|| AlignedEmbeddings {
            dim: 2,
            rows: (0..n_units * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        });
        let neural = neural_window
            .map(|j| NeuralParams::init(j, 2, 3, vocab.len(), n_units, rng.gen::<u64>()));
        let mut params = ModelParams::new(inv, vocab, compat, embeddings, neural);
        for w in params.weights.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        return MicroCase {
            params,
            tokens,
            gold,
        };
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Compares every dynamic program against exhaustive enumeration for one
/// micro case: both log partitions, both expectation vectors, the association
/// posteriors, and the decoded tree.
pub fn check_micro_case(case: &MicroCase, tol: f64) -> std::result::Result<(), String> {
    let MicroCase {
        params,
        tokens,
        gold,
    } = case;
    let l = tokens.len();

    let hs_c = enumerate_constrained(gold, 0, l);
    let brute_c = brute_chart(tokens, &hs_c, params);
    let hs_f = enumerate_full(params, l);
    let brute_f = brute_chart(tokens, &hs_f, params);

    let dp_zc = log_partition_constrained(tokens, gold, params);
    let dp_zf = log_partition_full(tokens, params);
    if !rel_close(dp_zc, brute_c.log_z, tol) {
        return Err(format!(
            "constrained partition: dp {dp_zc} vs brute {}",
            brute_c.log_z
        ));
    }
    if !rel_close(dp_zf, brute_f.log_z, tol) {
        return Err(format!(
            "full partition: dp {dp_zf} vs brute {}",
            brute_f.log_z
        ));
    }
    if dp_zc != f64::NEG_INFINITY && dp_zc > dp_zf + 1e-9 {
        return Err(format!("constrained {dp_zc} exceeds full {dp_zf}"));
    }

    if dp_zc != f64::NEG_INFINITY {
        let exp = expected_features(tokens, gold, params).map_err(|e| e.to_string())?;
        compare_fv(&exp.constrained, &brute_c.expected, tol, "constrained")?;
        compare_fv(&exp.full, &brute_f.expected, tol, "full")?;
        for (name, got, want) in [
            ("constrained assoc", &exp.assoc_constrained, &brute_c.assoc),
            ("full assoc", &exp.assoc_full, &brute_f.assoc),
        ] {
            for (i, (g, w)) in got.iter().zip(want).enumerate() {
                if !rel_close(*g, *w, tol) {
                    return Err(format!("{name}[{i}]: dp {g} vs brute {w}"));
                }
            }
        }
    }

    let dp_dec = decode(tokens, params);
    let brute_dec = brute_decode(tokens, &hs_f, params);
    match (&dp_dec, &brute_dec) {
        (None, None) => {}
        (Some(d), Some((best, b))) => {
            if serialize_mrl(d) != serialize_mrl(b) {
                // The decoded tree must still be a maximizer: summation order
                // differs between the chart and the enumerator, so exact ties
                // can land on different serializations.
                let ser = serialize_mrl(d);
                let dp_best = hs_f
                    .iter()
                    .filter(|h| serialize_mrl(&h.project()) == ser)
                    .map(|h| score(tokens, h, params).expect("oracle tree must score"))
                    .fold(f64::NEG_INFINITY, f64::max);
                if !rel_close(dp_best, *best, tol) {
                    return Err(format!(
                        "decode: dp `{ser}` scores {dp_best}, brute `{}` scores {best}",
                        serialize_mrl(b)
                    ));
                }
            }
        }
        _ => {
            return Err(format!(
                "decode presence mismatch: dp {:?} vs brute {:?}",
                dp_dec.as_ref().map(serialize_mrl),
                brute_dec.as_ref().map(|(_, m)| serialize_mrl(m))
            ))
        }
    }
    Ok(())
}

fn compare_fv(
    got: &FeatureVector,
    want: &FeatureVector,
    tol: f64,
    name: &str,
) -> std::result::Result<(), String> {
    let mut keys: Vec<_> = got.keys().chain(want.keys()).collect();
    keys.sort();
    keys.dedup();
    for k in keys {
        let g = got.get(k).copied().unwrap_or(0.0);
        let w = want.get(k).copied().unwrap_or(0.0);
        if !rel_close(g, w, tol) {
            return Err(format!("{name} expectation {k:?}: dp {g} vs brute {w}"));
        }
    }
    Ok(())
}
