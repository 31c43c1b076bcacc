//! Feature templates and the dense feature-id layout.
//!
//! Five discrete families fire per hybrid tree: word-unit emissions with
//! left/right context (`EMIT`, `EMIT-PREV`, `EMIT-NEXT`), per-node pattern
//! indicators, and parent-child transitions. When unit embeddings are
//! present, each word-unit association also adds real-valued features: the
//! unit's embedding components conjoined with the word (`EMBWORD`) and alone
//! (`EMBBIAS`). Embeddings are fixed inputs; only the weights over them
//! train.

use std::collections::{BTreeMap, HashMap};

use super::pattern::PATTERN_COUNT;
use super::{CompatTable, HybridTree, ModelParams, UnitId, BOS_WORD, EOS_WORD};
use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKey {
    Emit {
        unit: UnitId,
        word: usize,
    },
    EmitPrev {
        unit: UnitId,
        word: usize,
    },
    EmitNext {
        unit: UnitId,
        word: usize,
    },
    Pattern {
        unit: UnitId,
        pattern: usize,
    },
    EmbWord {
        word: usize,
        dim: usize,
    },
    EmbBias {
        dim: usize,
    },
    Trans {
        parent: UnitId,
        slot: usize,
        child: UnitId,
    },
}

/// Sparse feature map; discrete indicators carry counts, embedding features
/// carry accumulated real values.
pub type FeatureVector = BTreeMap<FeatureKey, f64>;

/// Deterministic dense layout over all feature keys a model can score.
/// Derived from (unit count, vocab size, embedding dim, compat table), so a
/// reloaded model reproduces identical ids.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    n_units: usize,
    n_words: usize,
    dim: usize,
    base_prev: usize,
    base_next: usize,
    base_pattern: usize,
    base_embword: usize,
    base_embbias: usize,
    base_trans: usize,
    total: usize,
    trans_list: Vec<(UnitId, usize, UnitId)>,
    trans_index: HashMap<(UnitId, usize, UnitId), usize>,
}

impl FeatureSpace {
    pub fn new(n_units: usize, n_words: usize, dim: usize, compat: &CompatTable) -> FeatureSpace {
        let uv = n_units * n_words;
        let base_prev = uv;
        let base_next = 2 * uv;
        let base_pattern = 3 * uv;
        let base_embword = base_pattern + n_units * PATTERN_COUNT;
        let base_embbias = base_embword + n_words * dim;
        let base_trans = base_embbias + dim;
        let trans_list = compat.triples();
        let trans_index = trans_list
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i))
            .collect();
        let total = base_trans + trans_list.len();
        FeatureSpace {
            n_units,
            n_words,
            dim,
            base_prev,
            base_next,
            base_pattern,
            base_embword,
            base_embbias,
            base_trans,
            total,
            trans_list,
            trans_index,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub(crate) fn emit(&self, unit: UnitId, word: usize) -> usize {
        unit * self.n_words + word
    }

    #[inline]
    pub(crate) fn emit_prev(&self, unit: UnitId, word: usize) -> usize {
        self.base_prev + unit * self.n_words + word
    }

    #[inline]
    pub(crate) fn emit_next(&self, unit: UnitId, word: usize) -> usize {
        self.base_next + unit * self.n_words + word
    }

    #[inline]
    pub(crate) fn pattern(&self, unit: UnitId, pattern: usize) -> usize {
        self.base_pattern + unit * PATTERN_COUNT + pattern
    }

    #[inline]
    pub(crate) fn emb_word(&self, word: usize, dim: usize) -> usize {
        self.base_embword + word * self.dim + dim
    }

    #[inline]
    pub(crate) fn emb_bias(&self, dim: usize) -> usize {
        self.base_embbias + dim
    }

    #[inline]
    pub(crate) fn trans(&self, parent: UnitId, slot: usize, child: UnitId) -> Option<usize> {
        self.trans_index
            .get(&(parent, slot, child))
            .map(|&i| self.base_trans + i)
    }

    pub fn id(&self, key: &FeatureKey) -> Option<usize> {
        match *key {
            FeatureKey::Emit { unit, word } if unit < self.n_units && word < self.n_words => {
                Some(self.emit(unit, word))
            }
            FeatureKey::EmitPrev { unit, word } if unit < self.n_units && word < self.n_words => {
                Some(self.emit_prev(unit, word))
            }
            FeatureKey::EmitNext { unit, word } if unit < self.n_units && word < self.n_words => {
                Some(self.emit_next(unit, word))
            }
            FeatureKey::Pattern { unit, pattern }
                if unit < self.n_units && pattern < PATTERN_COUNT =>
            {
                Some(self.pattern(unit, pattern))
            }
            FeatureKey::EmbWord { word, dim } if word < self.n_words && dim < self.dim => {
                Some(self.emb_word(word, dim))
            }
            FeatureKey::EmbBias { dim } if dim < self.dim => Some(self.emb_bias(dim)),
            FeatureKey::Trans {
                parent,
                slot,
                child,
            } => self.trans(parent, slot, child),
            _ => None,
        }
    }

    pub fn key(&self, id: usize) -> FeatureKey {
        assert!(id < self.total);
        if id < self.base_prev {
            FeatureKey::Emit {
                unit: id / self.n_words,
                word: id % self.n_words,
            }
        } else if id < self.base_next {
            let r = id - self.base_prev;
            FeatureKey::EmitPrev {
                unit: r / self.n_words,
                word: r % self.n_words,
            }
        } else if id < self.base_pattern {
            let r = id - self.base_next;
            FeatureKey::EmitNext {
                unit: r / self.n_words,
                word: r % self.n_words,
            }
        } else if id < self.base_embword {
            let r = id - self.base_pattern;
            FeatureKey::Pattern {
                unit: r / PATTERN_COUNT,
                pattern: r % PATTERN_COUNT,
            }
        } else if id < self.base_embbias {
            let r = id - self.base_embword;
            FeatureKey::EmbWord {
                word: r / self.dim,
                dim: r % self.dim,
            }
        } else if id < self.base_trans {
            FeatureKey::EmbBias {
                dim: id - self.base_embbias,
            }
        } else {
            let (parent, slot, child) = self.trans_list[id - self.base_trans];
            FeatureKey::Trans {
                parent,
                slot,
                child,
            }
        }
    }

    /// Human-readable feature name for logs and dumps.
    pub fn describe(&self, id: usize, params: &ModelParams) -> String {
        let unit = |u: UnitId| params.inventory.unit(u).to_string();
        let word = |w: usize| params.vocab.word(w).to_string();
        match self.key(id) {
            FeatureKey::Emit { unit: u, word: w } => format!("EMIT({},{})", unit(u), word(w)),
            FeatureKey::EmitPrev { unit: u, word: w } => {
                format!("EMIT-PREV({},{})", unit(u), word(w))
            }
            FeatureKey::EmitNext { unit: u, word: w } => {
                format!("EMIT-NEXT({},{})", unit(u), word(w))
            }
            FeatureKey::Pattern {
                unit: u,
                pattern: p,
            } => format!("PATTERN({},{})", unit(u), params.patterns.patterns[p]),
            FeatureKey::EmbWord { word: w, dim } => format!("EMBWORD({},{dim})", word(w)),
            FeatureKey::EmbBias { dim } => format!("EMBBIAS({dim})"),
            FeatureKey::Trans {
                parent,
                slot,
                child,
            } => format!("TRANS({},{},{})", unit(parent), unit(child), slot),
        }
    }
}

fn add(fv: &mut FeatureVector, key: FeatureKey, v: f64) {
    *fv.entry(key).or_insert(0.0) += v;
}

/// The feature vector of one hybrid tree for sentence `tokens`.
///
/// Words outside the model vocabulary contribute no word-keyed features
/// (their weights would be zero); `EMBBIAS` fires per association regardless.
pub fn extract_features(
    tokens: &[String],
    tree: &HybridTree,
    params: &ModelParams,
) -> Result<FeatureVector> {
    tree.validate_coverage(0, tokens.len())?;
    let word_ids: Vec<Option<usize>> = tokens.iter().map(|t| params.vocab.id(t)).collect();
    let mut fv = FeatureVector::new();
    extract_node(tree, &word_ids, params, &mut fv)?;
    Ok(fv)
}

fn extract_node(
    h: &HybridTree,
    word_ids: &[Option<usize>],
    params: &ModelParams,
    fv: &mut FeatureVector,
) -> Result<UnitId> {
    let unit = params
        .inventory
        .id(&h.unit)
        .ok_or_else(|| Error::Data(format!("unit `{}` not in the inventory", h.unit)))?;
    let pattern = params
        .patterns
        .pattern_id(&h.pattern)
        .ok_or_else(|| Error::Data(format!("unknown pattern `{}`", h.pattern)))?;
    add(fv, FeatureKey::Pattern { unit, pattern }, 1.0);

    for &(a, b) in &h.word_spans {
        for t in a..b {
            if let Some(w) = word_ids[t] {
                add(fv, FeatureKey::Emit { unit, word: w }, 1.0);
            }
            let prev = if t == 0 {
                Some(BOS_WORD)
            } else {
                word_ids[t - 1]
            };
            if let Some(w) = prev {
                add(fv, FeatureKey::EmitPrev { unit, word: w }, 1.0);
            }
            let next = if t + 1 == word_ids.len() {
                Some(EOS_WORD)
            } else {
                word_ids[t + 1]
            };
            if let Some(w) = next {
                add(fv, FeatureKey::EmitNext { unit, word: w }, 1.0);
            }
            if let Some(emb) = &params.embeddings {
                let row = emb.row(unit);
                for (j, &e) in row.iter().enumerate() {
                    if let Some(w) = word_ids[t] {
                        add(fv, FeatureKey::EmbWord { word: w, dim: j }, e);
                    }
                    add(fv, FeatureKey::EmbBias { dim: j }, e);
                }
            }
        }
    }

    for (slot, child) in h.children.iter().enumerate() {
        let child_unit = extract_node(child, word_ids, params, fv)?;
        add(
            fv,
            FeatureKey::Trans {
                parent: unit,
                slot,
                child: child_unit,
            },
            1.0,
        );
    }
    Ok(unit)
}

/// F(n, m, h) = Λ·Φ(n, m, h), plus the neural score when neural parameters
/// are present.
pub fn score(tokens: &[String], tree: &HybridTree, params: &ModelParams) -> Result<f64> {
    let fv = extract_features(tokens, tree, params)?;
    let mut total = 0.0;
    for (key, value) in &fv {
        total += value * params.weight(key);
    }
    if let Some(nn) = &params.neural {
        let word_ids: Vec<Option<usize>> = tokens.iter().map(|t| params.vocab.id(t)).collect();
        let ids = nn.token_ids(&word_ids);
        for (t, unit) in tree.associations() {
            let uid = params
                .inventory
                .id(unit)
                .ok_or_else(|| Error::Data(format!("unit `{unit}` not in the inventory")))?;
            total += nn.assoc_score(&ids, t, uid)?;
        }
    }
    Ok(total)
}
