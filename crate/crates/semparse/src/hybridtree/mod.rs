//! The latent hybrid-tree space, its features and scoring, and the dynamic
//! programs over it: partition functions, posterior feature expectations and
//! Viterbi decoding.
//!
//! A hybrid tree pairs every word of a sentence with exactly one node of a
//! meaning tree. Each node tiles its contiguous token span by an interleaving
//! pattern of own-word runs and child subtrees.

mod chart;
mod features;
mod pattern;


pub(crate) use chart::{accumulate_instance_gradient, instance_log_likelihood};
pub use chart::{
    decode, decode_batch, expected_features, log_partition_constrained, log_partition_full,
    ExpectedFeatures, FullGrammar, SentenceCtx,
};
pub use features::{extract_features, score, FeatureKey, FeatureSpace, FeatureVector};
pub use pattern::{
    all_patterns, enumerate_patterns, HybridPattern, PatternSet, PatternSlot, SlotTrie,
    PATTERN_COUNT,
};

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::UnitEmbeddings;
use crate::error::Error;
use crate::logic::{MeaningTree, SemanticUnit, SignatureTable};
use crate::neural::NeuralParams;
use crate::Result;

pub type UnitId = usize;

/// The semantic units a model can use, with stable integer ids.
#[derive(Debug, Clone, Default)]
pub struct Inventory {
    units: Vec<SemanticUnit>,
    index: HashMap<SemanticUnit, UnitId>,
    arities: Vec<usize>,
}

impl Inventory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Units of all training trees, in order of first appearance (preorder
    /// within each tree).
    pub fn from_trees<'a>(trees: impl IntoIterator<Item = &'a MeaningTree>) -> Self {
        let mut inv = Inventory::new();
        for tree in trees {
            for unit in crate::logic::collect_units(tree) {
                inv.add(unit);
            }
        }
        inv
    }

    pub fn add(&mut self, unit: SemanticUnit) -> UnitId {
        if let Some(&id) = self.index.get(&unit) {
            return id;
        }
        let id = self.units.len();
        self.index.insert(unit.clone(), id);
        self.arities.push(unit.arity());
        self.units.push(unit);
        id
    }

    pub fn id(&self, unit: &SemanticUnit) -> Option<UnitId> {
        self.index.get(unit).copied()
    }

    pub fn unit(&self, id: UnitId) -> &SemanticUnit {
        &self.units[id]
    }

    pub fn arity(&self, id: UnitId) -> usize {
        self.arities[id]
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[SemanticUnit] {
        &self.units
    }
}

pub const BOS_WORD: usize = 0;
pub const EOS_WORD: usize = 1;

/// Word vocabulary with reserved boundary markers at ids 0 and 1.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.add("<s>");
        v.add("</s>");
        v
    }

    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.index.insert(word.to_string(), id);
        self.words.push(word.to_string());
        id
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// Never true: the boundary markers are always present.
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// Whether the decoding grammar uses only observed parent-child pairs or all
/// type-compatible pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GrammarMode {
    #[default]
    Observed,
    Typed,
}

impl std::str::FromStr for GrammarMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(GrammarMode::Observed),
            "typed" => Ok(GrammarMode::Typed),
            other => Err(Error::Data(format!("unknown grammar mode `{other}`"))),
        }
    }
}

/// Which units may appear as the root and as child i of which parent.
#[derive(Debug, Clone, Default)]
pub struct CompatTable {
    pub roots: Vec<UnitId>,
    children: Vec<[Vec<UnitId>; 2]>,
}

impl CompatTable {
    pub fn build<'a>(
        trees: impl IntoIterator<Item = &'a MeaningTree> + Clone,
        inventory: &Inventory,
        mode: GrammarMode,
    ) -> CompatTable {
        let mut roots: Vec<UnitId> = Vec::new();
        let mut children: Vec<[Vec<UnitId>; 2]> = vec![[Vec::new(), Vec::new()]; inventory.len()];
        for tree in trees.clone() {
            if let Some(id) = inventory.id(&tree.unit) {
                if !roots.contains(&id) {
                    roots.push(id);
                }
            }
            collect_edges(tree, inventory, &mut children);
        }
        if mode == GrammarMode::Typed {
            // close over type compatibility
            let root_types: Vec<_> = roots
                .iter()
                .map(|&r| inventory.unit(r).return_type().clone())
                .collect();
            roots = (0..inventory.len())
                .filter(|&u| root_types.contains(inventory.unit(u).return_type()))
                .collect();
            for p in 0..inventory.len() {
                let args: Vec<_> = inventory.unit(p).arg_types().into_iter().cloned().collect();
                for (slot, want) in args.iter().enumerate() {
                    children[p][slot] = (0..inventory.len())
                        .filter(|&c| inventory.unit(c).return_type() == want)
                        .collect();
                }
            }
        }
        CompatTable { roots, children }
    }

    /// Assembles a table from explicit parts (tests and tooling).
    pub fn from_parts(roots: Vec<UnitId>, children: Vec<[Vec<UnitId>; 2]>) -> CompatTable {
        CompatTable { roots, children }
    }

    pub fn children(&self, parent: UnitId, slot: usize) -> &[UnitId] {
        &self.children[parent][slot]
    }

    pub fn n_units(&self) -> usize {
        self.children.len()
    }

    /// All (parent, slot, child) triples in the canonical feature order.
    pub fn triples(&self) -> Vec<(UnitId, usize, UnitId)> {
        let mut out = Vec::new();
        for p in 0..self.children.len() {
            for slot in 0..2 {
                for &c in &self.children[p][slot] {
                    out.push((p, slot, c));
                }
            }
        }
        out
    }
}

fn collect_edges(tree: &MeaningTree, inventory: &Inventory, children: &mut [[Vec<UnitId>; 2]]) {
    if let Some(p) = inventory.id(&tree.unit) {
        for (slot, child) in tree.children.iter().enumerate() {
            if let Some(c) = inventory.id(&child.unit) {
                if !children[p][slot].contains(&c) {
                    children[p][slot].push(c);
                }
            }
        }
    }
    for child in &tree.children {
        collect_edges(child, inventory, children);
    }
}

/// Unit embedding rows aligned with an inventory (zero rows for units unseen
/// in the auxiliary data).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedEmbeddings {
    pub dim: usize,
    pub rows: Vec<f64>, // inventory.len() x dim
}

impl AlignedEmbeddings {
    pub fn align(table: &UnitEmbeddings, inventory: &Inventory) -> AlignedEmbeddings {
        let dim = table.rank();
        let mut rows = Vec::with_capacity(inventory.len() * dim);
        for unit in inventory.units() {
            rows.extend(table.lookup(unit));
        }
        AlignedEmbeddings { dim, rows }
    }

    pub fn row(&self, unit: UnitId) -> &[f64] {
        &self.rows[unit * self.dim..(unit + 1) * self.dim]
    }
}

/// Everything needed to score and decode: inventory, grammar, feature
/// weights, optional embeddings and neural parameters.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub inventory: Inventory,
    pub vocab: Vocab,
    pub compat: CompatTable,
    pub patterns: PatternSet,
    pub feature_space: FeatureSpace,
    pub weights: Vec<f64>,
    pub embeddings: Option<AlignedEmbeddings>,
    pub neural: Option<NeuralParams>,
}

impl ModelParams {
    pub fn new(
        inventory: Inventory,
        vocab: Vocab,
        compat: CompatTable,
        embeddings: Option<AlignedEmbeddings>,
        neural: Option<NeuralParams>,
    ) -> ModelParams {
        let dim = embeddings.as_ref().map_or(0, |e| e.dim);
        let feature_space = FeatureSpace::new(inventory.len(), vocab.len(), dim, &compat);
        let weights = vec![0.0; feature_space.len()];
        ModelParams {
            inventory,
            vocab,
            compat,
            patterns: PatternSet::new(),
            feature_space,
            weights,
            embeddings,
            neural,
        }
    }

    pub fn weight(&self, key: &FeatureKey) -> f64 {
        self.feature_space
            .id(key)
            .map_or(0.0, |id| self.weights[id])
    }

    pub fn set_weight(&mut self, key: &FeatureKey, value: f64) {
        let id = self
            .feature_space
            .id(key)
            .expect("feature key outside this model's feature space");
        self.weights[id] = value;
    }
}

/// A latent joint structure: the meaning tree plus the word attachment.
/// Children are stored in meaning order (`First`, then `Second`); the
/// pattern's slots give the surface order.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridTree {
    pub unit: SemanticUnit,
    pub pattern: HybridPattern,
    pub word_spans: Vec<(usize, usize)>,
    pub children: Vec<HybridTree>,
}

impl HybridTree {
    pub fn project(&self) -> MeaningTree {
        MeaningTree {
            unit: self.unit.clone(),
            children: self.children.iter().map(HybridTree::project).collect(),
        }
    }

    /// All (token position, unit) word-unit associations, any order.
    pub fn associations(&self) -> Vec<(usize, &SemanticUnit)> {
        let mut out = Vec::new();
        self.collect_associations(&mut out);
        out
    }

    fn collect_associations<'a>(&'a self, out: &mut Vec<(usize, &'a SemanticUnit)>) {
        for &(a, b) in &self.word_spans {
            for t in a..b {
                out.push((t, &self.unit));
            }
        }
        for c in &self.children {
            c.collect_associations(out);
        }
    }

    /// Checks that this tree tiles exactly the span `[lo, hi)`: word runs are
    /// non-empty, children cover non-empty intervals, and the slot order is
    /// contiguous.
    pub fn validate_coverage(&self, lo: usize, hi: usize) -> Result<()> {
        let viol = |msg: String| Error::Data(format!("coverage violation: {msg}"));
        if self.pattern.arity != self.children.len() {
            return Err(viol(format!(
                "pattern {} with {} children",
                self.pattern,
                self.children.len()
            )));
        }
        let n_word_slots = self
            .pattern
            .slots
            .iter()
            .filter(|&&s| s == PatternSlot::Words)
            .count();
        if n_word_slots != self.word_spans.len() {
            return Err(viol(format!(
                "pattern {} with {} word spans",
                self.pattern,
                self.word_spans.len()
            )));
        }
        let mut cursor = lo;
        let mut next_word = 0;
        for &slot in &self.pattern.slots {
            match slot {
                PatternSlot::Words => {
                    let (a, b) = self.word_spans[next_word];
                    next_word += 1;
                    if a != cursor || b <= a {
                        return Err(viol(format!(
                            "word span [{a},{b}) does not continue at {cursor}"
                        )));
                    }
                    cursor = b;
                }
                PatternSlot::First | PatternSlot::Second => {
                    let child = &self.children[usize::from(slot == PatternSlot::Second)];
                    let end = child.end_of_span(cursor, hi)?;
                    child.validate_coverage(cursor, end)?;
                    cursor = end;
                }
            }
        }
        if cursor != hi {
            return Err(viol(format!("tiling ends at {cursor}, expected {hi}")));
        }
        Ok(())
    }

    /// Width of this subtree's yield given its start; needs recursion because
    /// spans are stored locally.
    fn end_of_span(&self, lo: usize, hi: usize) -> Result<usize> {
        let mut cursor = lo;
        let mut next_word = 0;
        for &slot in &self.pattern.slots {
            match slot {
                PatternSlot::Words => {
                    let (a, b) = self.word_spans.get(next_word).copied().ok_or_else(|| {
                        Error::Data("coverage violation: missing word span".into())
                    })?;
                    next_word += 1;
                    if a != cursor || b <= a || b > hi {
                        return Err(Error::Data(format!(
                            "coverage violation: word span [{a},{b}) at {cursor}"
                        )));
                    }
                    cursor = b;
                }
                PatternSlot::First | PatternSlot::Second => {
                    let child = self
                        .children
                        .get(usize::from(slot == PatternSlot::Second))
                        .ok_or_else(|| Error::Data("coverage violation: missing child".into()))?;
                    cursor = child.end_of_span(cursor, hi)?;
                }
            }
        }
        Ok(cursor)
    }
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

pub const MODEL_VERSION: u32 = 1;

/// On-disk model schema (JSON, one object):
///
/// - `version`: format version, currently 1
/// - `meta`: free-form string map (language, mode, seed, ...)
/// - `vocab`: words in id order, including the reserved `<s>`/`</s>` at 0/1
/// - `units`: canonical unit strings in inventory order
/// - `roots`: unit ids allowed at the root
/// - `compat`: (parent, slot, child) triples in feature order
/// - `embedding_dim` / `embedding_rows`: aligned unit vectors (dim 0 = none)
/// - `weights`: dense weight vector over the feature layout derived from the
///   fields above
/// - `neural`: the neural parameter block, or null
///
/// Floats are written with round-trip precision, so a reload scores
/// identically bit for bit.
#[derive(Serialize, Deserialize)]
struct ModelDump {
    version: u32,
    meta: std::collections::BTreeMap<String, String>,
    vocab: Vec<String>,
    units: Vec<String>,
    roots: Vec<usize>,
    compat: Vec<(usize, usize, usize)>,
    embedding_dim: usize,
    embedding_rows: Vec<f64>,
    weights: Vec<f64>,
    neural: Option<NeuralParams>,
}

impl ModelParams {
    /// Versioned JSON dump; reloading reproduces scores bit for bit.
    pub fn save(
        &self,
        path: impl AsRef<Path>,
        meta: &std::collections::BTreeMap<String, String>,
    ) -> Result<()> {
        let dump = ModelDump {
            version: MODEL_VERSION,
            meta: meta.clone(),
            vocab: self.vocab.words().to_vec(),
            units: self
                .inventory
                .units()
                .iter()
                .map(|u| u.to_string())
                .collect(),
            roots: self.compat.roots.clone(),
            compat: self.compat.triples(),
            embedding_dim: self.embeddings.as_ref().map_or(0, |e| e.dim),
            embedding_rows: self
                .embeddings
                .as_ref()
                .map_or_else(Vec::new, |e| e.rows.clone()),
            weights: self.weights.clone(),
            neural: self.neural.clone(),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &dump)?;
        Ok(())
    }

    pub fn load(
        path: impl AsRef<Path>,
    ) -> Result<(ModelParams, std::collections::BTreeMap<String, String>)> {
        let file = std::fs::File::open(path)?;
        let dump: ModelDump = serde_json::from_reader(std::io::BufReader::new(file))?;
        if dump.version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                found: dump.version,
                expected: MODEL_VERSION,
            });
        }
        let mut inventory = Inventory::new();
        for s in &dump.units {
            inventory.add(SignatureTable::parse_signature(s)?);
        }
        let mut vocab = Vocab::new();
        for (i, w) in dump.vocab.iter().enumerate() {
            if i < 2 {
                continue; // reserved markers already present
            }
            vocab.add(w);
        }
        if vocab.len() != dump.vocab.len() {
            return Err(Error::Data("model vocab has duplicate words".into()));
        }
        let mut children: Vec<[Vec<UnitId>; 2]> = vec![[Vec::new(), Vec::new()]; inventory.len()];
        for &(p, slot, c) in &dump.compat {
            if p >= inventory.len() || c >= inventory.len() || slot >= 2 {
                return Err(Error::Data("model compat table out of range".into()));
            }
            children[p][slot].push(c);
        }
        let compat = CompatTable {
            roots: dump.roots,
            children,
        };
        let embeddings = if dump.embedding_dim > 0 {
            if dump.embedding_rows.len() != inventory.len() * dump.embedding_dim {
                return Err(Error::Data("model embedding table shape mismatch".into()));
            }
            Some(AlignedEmbeddings {
                dim: dump.embedding_dim,
                rows: dump.embedding_rows,
            })
        } else {
            None
        };
        let mut params = ModelParams::new(inventory, vocab, compat, embeddings, dump.neural);
        if dump.weights.len() != params.feature_space.len() {
            return Err(Error::Data(format!(
                "model has {} weights, feature space needs {}",
                dump.weights.len(),
                params.feature_space.len()
            )));
        }
        params.weights = dump.weights;
        Ok((params, dump.meta))
    }
}

/// Tree nodes resolved to inventory ids, preorder; `None` when some unit is
/// not in the inventory.
pub(crate) fn resolve_nodes(
    tree: &MeaningTree,
    inventory: &Inventory,
) -> Option<Vec<ResolvedNode>> {
    let mut nodes = Vec::new();
    resolve_rec(tree, inventory, &mut nodes)?;
    Some(nodes)
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedNode {
    pub unit: UnitId,
    pub children: Vec<usize>,
}

fn resolve_rec(
    tree: &MeaningTree,
    inventory: &Inventory,
    nodes: &mut Vec<ResolvedNode>,
) -> Option<usize> {
    let unit = inventory.id(&tree.unit)?;
    let idx = nodes.len();
    nodes.push(ResolvedNode {
        unit,
        children: Vec::new(),
    });
    for child in &tree.children {
        let c = resolve_rec(child, inventory, nodes)?;
        nodes[idx].children.push(c);
    }
    Some(idx)
}
