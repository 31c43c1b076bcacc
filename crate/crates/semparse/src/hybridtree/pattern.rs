//! Interleaving patterns: how one node's own words and child subtrees tile
//! its token span.
//!
//! Arity 0 has the single pattern `w`. Arity 1 allows `wX`, `Xw`, `wXw`.
//! Arity 2 places the two children in either order with optional word gaps
//! before, between and after them, except that not all three gaps may be
//! filled at once; the bare `XY` and `YX` are allowed. Every `w` consumes at
//! least one contiguous word, so arity-0/1 nodes always consume a word and
//! tree size is bounded by 2|n|-1.

use std::fmt;

/// One slot of a pattern: a word gap or a child position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatternSlot {
    /// A non-empty contiguous run of the node's own words.
    Words,
    /// The first child subtree.
    First,
    /// The second child subtree.
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HybridPattern {
    pub arity: usize,
    pub slots: Vec<PatternSlot>,
}

impl fmt::Display for HybridPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.slots {
            f.write_str(match s {
                PatternSlot::Words => "w",
                PatternSlot::First => "X",
                PatternSlot::Second => "Y",
            })?;
        }
        Ok(())
    }
}

/// All patterns for one arity, in a fixed order.
pub fn enumerate_patterns(arity: usize) -> Vec<HybridPattern> {
    use PatternSlot::*;
    match arity {
        0 => vec![HybridPattern {
            arity: 0,
            slots: vec![Words],
        }],
        1 => [
            vec![Words, First],
            vec![First, Words],
            vec![Words, First, Words],
        ]
        .into_iter()
        .map(|slots| HybridPattern { arity: 1, slots })
        .collect(),
        2 => {
            let mut out = Vec::new();
            for (a, b) in [(First, Second), (Second, First)] {
                for mask in 0u8..7 {
                    // mask bit 0/1/2: word gap before/between/after; 7 (all
                    // three) is excluded from the inventory.
                    let mut slots = Vec::new();
                    if mask & 1 != 0 {
                        slots.push(Words);
                    }
                    slots.push(a);
                    if mask & 2 != 0 {
                        slots.push(Words);
                    }
                    slots.push(b);
                    if mask & 4 != 0 {
                        slots.push(Words);
                    }
                    out.push(HybridPattern { arity: 2, slots });
                }
            }
            out
        }
        _ => panic!("arity {arity} out of range"),
    }
}

/// The global pattern list (arities 0, 1, 2 concatenated). Pattern ids index
/// into this list everywhere.
pub fn all_patterns() -> Vec<HybridPattern> {
    let mut out = enumerate_patterns(0);
    out.extend(enumerate_patterns(1));
    out.extend(enumerate_patterns(2));
    out
}

pub const PATTERN_COUNT: usize = 18;

/// Prefix trie over the slot sequences of one arity's patterns. Shared
/// prefixes share dynamic-programming tables.
#[derive(Debug, Clone)]
pub struct SlotTrie {
    /// Node 0 is the root (empty prefix); parents precede children.
    pub nodes: Vec<TrieNode>,
}

#[derive(Debug, Clone)]
pub struct TrieNode {
    /// Parent node index; the root points at itself.
    pub parent: usize,
    /// Slot taken from the parent to reach this node (root: `Words`, unused).
    pub slot: PatternSlot,
    /// Global pattern id when this node ends a full pattern.
    pub complete: Option<usize>,
}

impl SlotTrie {
    pub fn build(arity: usize, global: &[HybridPattern]) -> SlotTrie {
        let mut nodes = vec![TrieNode {
            parent: 0,
            slot: PatternSlot::Words,
            complete: None,
        }];
        // (parent, slot) -> node
        let mut edges: Vec<((usize, PatternSlot), usize)> = Vec::new();
        for (pid, pat) in global.iter().enumerate() {
            if pat.arity != arity {
                continue;
            }
            let mut cur = 0usize;
            for &slot in &pat.slots {
                cur = match edges.iter().find(|((p, s), _)| *p == cur && *s == slot) {
                    Some((_, n)) => *n,
                    None => {
                        nodes.push(TrieNode {
                            parent: cur,
                            slot,
                            complete: None,
                        });
                        let n = nodes.len() - 1;
                        edges.push(((cur, slot), n));
                        n
                    }
                };
            }
            assert!(nodes[cur].complete.is_none(), "duplicate pattern");
            nodes[cur].complete = Some(pid);
        }
        SlotTrie { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True for nodes reached from the root by a child slot: their prefix is
    /// a single child covering the whole span so far.
    pub fn is_first_child(&self, node: usize) -> bool {
        node != 0 && self.nodes[node].parent == 0 && self.nodes[node].slot != PatternSlot::Words
    }
}

/// Tries for arities 0..=2 plus the global pattern list.
#[derive(Debug, Clone)]
pub struct PatternSet {
    pub patterns: Vec<HybridPattern>,
    pub tries: [SlotTrie; 3],
}

impl PatternSet {
    pub fn new() -> PatternSet {
        let patterns = all_patterns();
        let tries = [
            SlotTrie::build(0, &patterns),
            SlotTrie::build(1, &patterns),
            SlotTrie::build(2, &patterns),
        ];
        PatternSet { patterns, tries }
    }

    pub fn pattern_id(&self, pat: &HybridPattern) -> Option<usize> {
        self.patterns.iter().position(|p| p == pat)
    }
}

impl Default for PatternSet {
    fn default() -> Self {
        Self::new()
    }
}
