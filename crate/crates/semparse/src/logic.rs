//! Variable-free tree-shaped logical forms and their semantic units.
//!
//! A logical form like `answer(exclude(river(all), traverse(stateid('texas'))))`
//! is a tree of [`SemanticUnit`]s. Each unit is a typed production: it has a
//! return type, a surface template (which may contain ground subterms such as
//! `river(all)`), and zero to two typed argument slots. Quoted literals are
//! folded into their own arity-0 constant units, typed by the slot they fill.

use std::collections::HashMap;
use std::fmt;

use crate::error::Error;
use crate::Result;

/// A semantic category label such as `QUERY` or `RIVER`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticType(String);

impl SemanticType {
    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        assert!(!name.is_empty(), "semantic type name must be non-empty");
        SemanticType(name)
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Surface template of a semantic unit.
///
/// Ground parts are matched literally against the logical-form string; each
/// [`Template::Slot`] is an argument position filled by a child subtree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Template {
    App {
        name: String,
        children: Vec<Template>,
    },
    Slot(SemanticType),
    Literal(String),
}

impl Template {
    fn count_slots(&self) -> usize {
        match self {
            Template::Slot(_) => 1,
            Template::Literal(_) => 0,
            Template::App { children, .. } => children.iter().map(Template::count_slots).sum(),
        }
    }

    fn slot_types<'a>(&'a self, out: &mut Vec<&'a SemanticType>) {
        match self {
            Template::Slot(t) => out.push(t),
            Template::Literal(_) => {}
            Template::App { children, .. } => {
                for c in children {
                    c.slot_types(out);
                }
            }
        }
    }

    fn render(&self, out: &mut String, sep: &str, fill: &mut dyn FnMut(&mut String)) {
        match self {
            Template::Slot(_) => fill(out),
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
                            out.push_str(sep);
                        }
                        c.render(out, sep, fill);
                    }
                    out.push(')');
                }
            }
        }
    }
}

/// A typed production forming one node of a logical form.
///
/// Identity is the full pair (return type, template): `traverse` returning
/// `RIVER` and `traverse` returning `STATE` are distinct units.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticUnit {
    return_type: SemanticType,
    template: Template,
}

impl SemanticUnit {
    pub fn new(return_type: SemanticType, template: Template) -> Result<Self> {
        match &template {
            Template::Slot(_) => {
                return Err(Error::InvalidUnit(
                    "template head must be a function or literal, not a bare slot".into(),
                ))
            }
            Template::App { .. } | Template::Literal(_) => {}
        }
        let arity = template.count_slots();
        if arity > 2 {
            return Err(Error::InvalidUnit(format!(
                "unit arity {arity} exceeds 2: {return_type}:{template:?}"
            )));
        }
        if matches!(&template, Template::Literal(_) if arity != 0) {
            unreachable!("literals carry no slots");
        }
        Ok(SemanticUnit {
            return_type,
            template,
        })
    }

    /// Constant unit for a quoted literal, typed by its context.
    pub fn constant(return_type: SemanticType, literal: impl Into<String>) -> Self {
        SemanticUnit {
            return_type,
            template: Template::Literal(literal.into()),
        }
    }

    pub fn return_type(&self) -> &SemanticType {
        &self.return_type
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    /// Head function name, or the literal text for constant units.
    pub fn function(&self) -> &str {
        match &self.template {
            Template::App { name, .. } => name,
            Template::Literal(s) => s,
            Template::Slot(_) => unreachable!(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.template, Template::Literal(_))
    }

    pub fn arity(&self) -> usize {
        self.template.count_slots()
    }

    /// Argument slot types in template order.
    pub fn arg_types(&self) -> Vec<&SemanticType> {
        let mut out = Vec::new();
        self.template.slot_types(&mut out);
        out
    }
}

fn render_signature(tpl: &Template, out: &mut String) {
    match tpl {
        Template::Slot(t) => out.push_str(t.name()),
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
                        out.push(',');
                    }
                    render_signature(c, out);
                }
                out.push(')');
            }
        }
    }
}

impl fmt::Display for SemanticUnit {
    /// Canonical unit string, e.g. `QUERY:answer(STATE)` or `STATENAME:'texas'`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        render_signature(&self.template, &mut s);
        write!(f, "{}:{}", self.return_type, s)
    }
}

/// A fully typed tree-shaped logical form.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MeaningTree {
    pub unit: SemanticUnit,
    pub children: Vec<MeaningTree>,
}

impl MeaningTree {
    pub fn new(unit: SemanticUnit, children: Vec<MeaningTree>) -> Result<Self> {
        let tree = MeaningTree { unit, children };
        tree.validate()?;
        Ok(tree)
    }

    /// Checks arity and child return types recursively.
    pub fn validate(&self) -> Result<()> {
        let args = self.unit.arg_types();
        if args.len() != self.children.len() {
            return Err(Error::InvalidUnit(format!(
                "node `{}` has {} children, expected {}",
                self.unit,
                self.children.len(),
                args.len()
            )));
        }
        for (i, (child, want)) in self.children.iter().zip(args).enumerate() {
            if child.unit.return_type() != want {
                return Err(Error::InvalidUnit(format!(
                    "child {} of `{}` returns {}, expected {}",
                    i,
                    self.unit,
                    child.unit.return_type(),
                    want
                )));
            }
            child.validate()?;
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(MeaningTree::node_count)
            .sum::<usize>()
    }
}

/// Serializes a tree to its canonical string: lowercase function names,
/// single-quoted constants, `, ` separators.
pub fn serialize_mrl(tree: &MeaningTree) -> String {
    let mut out = String::new();
    write_node(tree, &mut out);
    out
}

fn write_node(tree: &MeaningTree, out: &mut String) {
    let mut next = 0usize;
    tree.unit.template.render(out, ", ", &mut |buf| {
        write_node(&tree.children[next], buf);
        next += 1;
    });
}

/// All node units with multiplicity, in preorder.
pub fn collect_units(tree: &MeaningTree) -> Vec<SemanticUnit> {
    let mut out = Vec::new();
    collect_into(tree, &mut out);
    out
}

fn collect_into(tree: &MeaningTree, out: &mut Vec<SemanticUnit>) {
    out.push(tree.unit.clone());
    for c in &tree.children {
        collect_into(c, out);
    }
}

/// Exact equality: canonical serializations are identical.
pub fn trees_equal(a: &MeaningTree, b: &MeaningTree) -> bool {
    serialize_mrl(a) == serialize_mrl(b)
}

// ---------------------------------------------------------------------------
// Surface grammar: term := IDENT | IDENT '(' term (',' term)* ')' | QUOTED
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum TermKind {
    App { name: String, args: Vec<usize> },
    Quoted(String),
}

#[derive(Debug, Clone)]
struct TermNode {
    kind: TermKind,
    pos: usize,
}

/// Flat arena for a parsed term; index 0 is unused, root is the last node.
#[derive(Debug)]
struct TermArena {
    nodes: Vec<TermNode>,
    root: usize,
}

struct Scanner<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(src: &'a str) -> Self {
        Scanner {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Syntax {
            pos: self.pos,
            msg: msg.into(),
        }
    }
}

fn is_ident_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'.'
}

fn parse_term(sc: &mut Scanner, arena: &mut Vec<TermNode>) -> Result<usize> {
    sc.skip_ws();
    let start = sc.pos;
    match sc.peek() {
        None => Err(sc.err("unexpected end of input, expected a term")),
        Some(b'\'') => {
            sc.pos += 1;
            let lit_start = sc.pos;
            while let Some(b) = sc.peek() {
                if b == b'\'' {
                    let text = String::from_utf8_lossy(&sc.src[lit_start..sc.pos]).into_owned();
                    sc.pos += 1;
                    arena.push(TermNode {
                        kind: TermKind::Quoted(text),
                        pos: start,
                    });
                    return Ok(arena.len() - 1);
                }
                sc.pos += 1;
            }
            Err(sc.err("unterminated quoted constant"))
        }
        Some(b) if is_ident_byte(b) => {
            while sc.peek().map_or(false, is_ident_byte) {
                sc.pos += 1;
            }
            let name = String::from_utf8_lossy(&sc.src[start..sc.pos]).into_owned();
            sc.skip_ws();
            let mut args = Vec::new();
            if sc.peek() == Some(b'(') {
                sc.pos += 1;
                sc.skip_ws();
                if sc.peek() == Some(b')') {
                    // Tolerated arity-0 form `f()`; canonicalizes to `f`.
                    sc.pos += 1;
                } else {
                    loop {
                        args.push(parse_term(sc, arena)?);
                        sc.skip_ws();
                        match sc.peek() {
                            Some(b',') => sc.pos += 1,
                            Some(b')') => {
                                sc.pos += 1;
                                break;
                            }
                            _ => return Err(sc.err("expected `,` or `)`")),
                        }
                    }
                }
            }
            arena.push(TermNode {
                kind: TermKind::App { name, args },
                pos: start,
            });
            Ok(arena.len() - 1)
        }
        Some(c) => Err(sc.err(format!("unexpected character `{}`", c as char))),
    }
}

fn parse_whole_term(text: &str) -> Result<TermArena> {
    let mut sc = Scanner::new(text);
    let mut nodes = Vec::new();
    let root = parse_term(&mut sc, &mut nodes)?;
    sc.skip_ws();
    if sc.pos != sc.src.len() {
        return Err(sc.err("trailing input after term"));
    }
    Ok(TermArena { nodes, root })
}

fn is_type_symbol(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_uppercase() => {}
        _ => return false,
    }
    name.chars()
        .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

fn term_to_template(arena: &TermArena, id: usize) -> Result<Template> {
    let node = &arena.nodes[id];
    match &node.kind {
        TermKind::Quoted(s) => Ok(Template::Literal(s.clone())),
        TermKind::App { name, args } => {
            if is_type_symbol(name) {
                if args.is_empty() {
                    Ok(Template::Slot(SemanticType::new(name.clone())))
                } else {
                    Err(Error::Syntax {
                        pos: node.pos,
                        msg: format!("type symbol `{name}` cannot take arguments"),
                    })
                }
            } else {
                let children = args
                    .iter()
                    .map(|&a| term_to_template(arena, a))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Template::App {
                    name: name.to_ascii_lowercase(),
                    children,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Signature table and type resolution
// ---------------------------------------------------------------------------

/// The known semantic units, indexed for template matching.
#[derive(Debug, Clone, Default)]
pub struct SignatureTable {
    units: Vec<SemanticUnit>,
    seen: HashMap<SemanticUnit, usize>,
    // (lowercased head name, syntactic argument count) -> unit indices
    by_head: HashMap<(String, usize), Vec<usize>>,
}

impl SignatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses one signature line, e.g. `QUERY:answer(STATE)`, `RIVER:river(all)`
    /// or `STATENAME:'texas'`.
    pub fn parse_signature(line: &str) -> Result<SemanticUnit> {
        let colon = line.find(':').ok_or_else(|| Error::Syntax {
            pos: 0,
            msg: "signature must be RET:template".into(),
        })?;
        let ret = line[..colon].trim();
        if !is_type_symbol(ret) {
            return Err(Error::Syntax {
                pos: 0,
                msg: format!("`{ret}` is not a type symbol"),
            });
        }
        let arena = parse_whole_term(&line[colon + 1..])?;
        let template = term_to_template(&arena, arena.root)?;
        SemanticUnit::new(SemanticType::new(ret), template)
    }

    /// Registers a unit; duplicates are ignored. Returns true when new.
    pub fn add(&mut self, unit: SemanticUnit) -> bool {
        if self.seen.contains_key(&unit) {
            return false;
        }
        let idx = self.units.len();
        self.seen.insert(unit.clone(), idx);
        if let Template::App { name, children } = unit.template() {
            self.by_head
                .entry((name.clone(), children.len()))
                .or_default()
                .push(idx);
        }
        self.units.push(unit);
        true
    }

    pub fn units(&self) -> &[SemanticUnit] {
        &self.units
    }

    pub fn contains(&self, unit: &SemanticUnit) -> bool {
        self.seen.contains_key(unit)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    fn head_candidates(&self, name: &str, argc: usize) -> &[usize] {
        self.by_head
            .get(&(name.to_ascii_lowercase(), argc))
            .map_or(&[], Vec::as_slice)
    }
}

/// One structural match of a unit template against a term: the subterms that
/// fill each slot, with their expected types, in template order.
struct TemplateMatch<'t> {
    unit_idx: usize,
    slots: Vec<(usize, &'t SemanticType)>,
}

fn match_template<'t>(
    arena: &TermArena,
    tpl: &'t Template,
    id: usize,
    slots: &mut Vec<(usize, &'t SemanticType)>,
) -> bool {
    match (tpl, &arena.nodes[id].kind) {
        (Template::Slot(t), _) => {
            slots.push((id, t));
            true
        }
        (Template::Literal(lit), TermKind::Quoted(q)) => lit == q,
        (Template::App { name, children }, TermKind::App { name: n, args }) => {
            if children.len() != args.len() || !name.eq_ignore_ascii_case(n) {
                return false;
            }
            children
                .iter()
                .zip(args)
                .all(|(c, &a)| match_template(arena, c, a, slots))
        }
        _ => false,
    }
}

struct Resolver<'a> {
    table: &'a SignatureTable,
    arena: &'a TermArena,
    can_type_memo: HashMap<(usize, SemanticType), bool>,
}

impl<'a> Resolver<'a> {
    fn candidates(&self, id: usize) -> Result<Vec<TemplateMatch<'a>>> {
        let node = &self.arena.nodes[id];
        match &node.kind {
            TermKind::Quoted(_) => Ok(Vec::new()),
            TermKind::App { name, args } => {
                let idxs = self.table.head_candidates(name, args.len());
                let mut out = Vec::new();
                for &u in idxs {
                    let mut slots = Vec::new();
                    if match_template(self.arena, self.table.units[u].template(), id, &mut slots) {
                        out.push(TemplateMatch { unit_idx: u, slots });
                    }
                }
                Ok(out)
            }
        }
    }

    /// First subterm (preorder) that no unit template matches structurally.
    /// Ground template parts are not visited on their own.
    fn find_unknown(&self, id: usize) -> Option<(String, usize, usize)> {
        let node = &self.arena.nodes[id];
        if let TermKind::App { name, args } = &node.kind {
            let matches = self.candidates(id).ok()?;
            if matches.is_empty() {
                return Some((name.to_ascii_lowercase(), args.len(), node.pos));
            }
            let mut subs: Vec<usize> = matches
                .iter()
                .flat_map(|m| m.slots.iter().map(|&(sub, _)| sub))
                .collect();
            subs.sort_unstable();
            subs.dedup();
            for sub in subs {
                if let Some(found) = self.find_unknown(sub) {
                    return Some(found);
                }
            }
        }
        None
    }

    fn can_type(&mut self, id: usize, want: &SemanticType) -> Result<bool> {
        if matches!(self.arena.nodes[id].kind, TermKind::Quoted(_)) {
            return Ok(true); // constants take the type of their slot
        }
        if let Some(&v) = self.can_type_memo.get(&(id, want.clone())) {
            return Ok(v);
        }
        // Seed false to cut (impossible) reentrancy; terms are trees.
        self.can_type_memo.insert((id, want.clone()), false);
        let mut ok = false;
        for cand in self.candidates(id)? {
            if self.table.units[cand.unit_idx].return_type() != want {
                continue;
            }
            let mut all = true;
            for (sub, t) in &cand.slots {
                if !self.can_type(*sub, t)? {
                    all = false;
                    break;
                }
            }
            if all {
                ok = true;
                break;
            }
        }
        self.can_type_memo.insert((id, want.clone()), ok);
        Ok(ok)
    }

    fn commit(&mut self, id: usize, want: Option<&SemanticType>) -> Result<MeaningTree> {
        let node = &self.arena.nodes[id];
        match &node.kind {
            TermKind::Quoted(lit) => {
                let t = want.ok_or(Error::BareConstant { pos: node.pos })?;
                Ok(MeaningTree {
                    unit: SemanticUnit::constant(t.clone(), lit.clone()),
                    children: Vec::new(),
                })
            }
            TermKind::App { name, args } => {
                let cands = self.candidates(id)?;
                if cands.is_empty() {
                    return Err(Error::UnknownFunction {
                        name: name.to_ascii_lowercase(),
                        arity: args.len(),
                        pos: node.pos,
                    });
                }
                let mut viable = Vec::new();
                for cand in cands {
                    let unit = &self.table.units[cand.unit_idx];
                    if let Some(w) = want {
                        if unit.return_type() != w {
                            continue;
                        }
                    }
                    let mut all = true;
                    for (sub, t) in &cand.slots {
                        if !self.can_type(*sub, t)? {
                            all = false;
                            break;
                        }
                    }
                    if all {
                        viable.push(cand);
                    }
                }
                match viable.len() {
                    0 => {
                        if let Some((name, arity, pos)) = self.find_unknown(id) {
                            return Err(Error::UnknownFunction { name, arity, pos });
                        }
                        Err(Error::TypeMismatch {
                            pos: node.pos,
                            msg: match want {
                                Some(w) => {
                                    format!("no typing of `{name}` yields {w} with these arguments")
                                }
                                None => format!("no consistent typing of `{name}`"),
                            },
                        })
                    }
                    1 => {
                        let cand = viable.pop().unwrap();
                        let unit = self.table.units[cand.unit_idx].clone();
                        let children = cand
                            .slots
                            .iter()
                            .map(|(sub, t)| self.commit(*sub, Some(t)))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(MeaningTree { unit, children })
                    }
                    _ => Err(Error::Ambiguous {
                        pos: node.pos,
                        msg: format!(
                            "`{name}` admits {} typings: {}",
                            viable.len(),
                            viable
                                .iter()
                                .map(|c| self.table.units[c.unit_idx].to_string())
                                .collect::<Vec<_>>()
                                .join(" | ")
                        ),
                    }),
                }
            }
        }
    }
}

/// Parses a logical-form string into the unique typed tree under `table`.
///
/// Constants resolve against the slot type of their context; they need no
/// table entry of their own.
pub fn parse_mrl(text: &str, table: &SignatureTable) -> Result<MeaningTree> {
    let arena = parse_whole_term(text)?;
    let mut resolver = Resolver {
        table,
        arena: &arena,
        can_type_memo: HashMap::new(),
    };
    resolver.commit(arena.root, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_table() -> SignatureTable {
        let mut t = SignatureTable::new();
        for line in [
            "QUERY:answer(RIVER)",
            "QUERY:answer(STATE)",
            "RIVER:exclude(RIVER,RIVER)",
            "RIVER:river(all)",
            "RIVER:traverse(STATE)",
            "STATE:traverse(RIVER)",
            "STATE:loc(RIVER)",
            "STATE:state(STATE)",
            "STATE:stateid(STATENAME)",
            "STATE:smallest_one(density(STATE))",
            "STATE:smallest_one(population(STATE))",
        ] {
            t.add(SignatureTable::parse_signature(line).unwrap());
        }
        t
    }

    #[test]
    fn parse_four_level_gold_tree() {
        let t = demo_table();
        let tree = parse_mrl("answer(state(loc(river(all))))", &t).unwrap();
        assert_eq!(tree.unit.to_string(), "QUERY:answer(STATE)");
        assert_eq!(tree.node_count(), 4);
        // depth 4: answer -> state -> loc -> river(all)
        let mut depth = 1;
        let mut node = &tree;
        while !node.children.is_empty() {
            node = &node.children[0];
            depth += 1;
        }
        assert_eq!(depth, 4);
        assert_eq!(node.unit.to_string(), "RIVER:river(all)");
        tree.validate().unwrap();
    }

    #[test]
    fn parse_single_node_arity_zero() {
        let mut t = SignatureTable::new();
        t.add(SignatureTable::parse_signature("RIVER:all()").unwrap());
        let tree = parse_mrl("all", &t).unwrap();
        assert_eq!(tree.node_count(), 1);
        assert_eq!(serialize_mrl(&tree), "all");
        // `all()` canonicalizes to the same tree
        assert!(trees_equal(&tree, &parse_mrl("all()", &t).unwrap()));
    }

    #[test]
    fn parse_constant_leaf_tree() {
        let t = demo_table();
        let tree = parse_mrl(
            "answer(exclude(river(all), traverse(stateid('texas'))))",
            &t,
        )
        .unwrap();
        assert_eq!(tree.node_count(), 6);
        let leaf = &tree.children[0].children[1].children[0].children[0];
        assert!(leaf.unit.is_constant());
        assert_eq!(leaf.unit.function(), "texas");
        assert_eq!(leaf.unit.return_type().name(), "STATENAME");
        assert_eq!(
            serialize_mrl(&tree),
            "answer(exclude(river(all), traverse(stateid('texas'))))"
        );
    }

    #[test]
    fn serialize_gold_tree_round_trips() {
        let t = demo_table();
        for s in [
            "answer(state(loc(river(all))))",
            "answer(state(traverse(river(all))))",
            "answer(exclude(river(all), traverse(stateid('texas'))))",
            "answer(smallest_one(density(state(loc(river(all))))))",
        ] {
            let tree = parse_mrl(s, &t).unwrap();
            assert_eq!(serialize_mrl(&tree), s);
            let again = parse_mrl(&serialize_mrl(&tree), &t).unwrap();
            assert!(trees_equal(&tree, &again));
        }
    }

    #[test]
    fn whitespace_and_case_normalize() {
        let t = demo_table();
        let a = parse_mrl("answer( state( loc( river( all ) ) ) )", &t).unwrap();
        let b = parse_mrl("aNsWeR(State(LOC(river(all))))", &t).unwrap();
        assert!(trees_equal(&a, &b));
        assert_eq!(serialize_mrl(&b), "answer(state(loc(river(all))))");
    }

    #[test]
    fn constants_are_case_sensitive() {
        let t = demo_table();
        let a = parse_mrl(
            "answer(exclude(river(all), traverse(stateid('Texas'))))",
            &t,
        )
        .unwrap();
        let b = parse_mrl(
            "answer(exclude(river(all), traverse(stateid('texas'))))",
            &t,
        )
        .unwrap();
        assert!(!trees_equal(&a, &b));
    }

    #[test]
    fn collect_units_counts() {
        let t = demo_table();
        let tree = parse_mrl("answer(state(loc(river(all))))", &t).unwrap();
        let units = collect_units(&tree);
        assert_eq!(units.len(), tree.node_count());
        let names: Vec<_> = units.iter().map(|u| u.to_string()).collect();
        assert_eq!(
            names,
            [
                "QUERY:answer(STATE)",
                "STATE:state(STATE)",
                "STATE:loc(RIVER)",
                "RIVER:river(all)"
            ]
        );

        // multiset semantics: a reused unit counts twice
        let twice = parse_mrl("exclude(river(all), river(all))", &t).unwrap();
        let units = collect_units(&twice);
        let n = units
            .iter()
            .filter(|u| u.to_string() == "RIVER:river(all)")
            .count();
        assert_eq!(n, 2);
    }

    #[test]
    fn trees_equal_is_exact_and_ordered() {
        let t = demo_table();
        let gold = parse_mrl("answer(state(loc(river(all))))", &t).unwrap();
        let pred = parse_mrl("answer(state(traverse(river(all))))", &t).unwrap();
        assert!(trees_equal(&gold, &gold));
        assert!(!trees_equal(&gold, &pred));

        let ab = parse_mrl("exclude(river(all), traverse(stateid('texas')))", &t).unwrap();
        let ba = parse_mrl("exclude(traverse(stateid('texas')), river(all))", &t).unwrap();
        assert!(!trees_equal(&ab, &ba));
    }

    #[test]
    fn error_positions_and_classes() {
        let t = demo_table();
        match parse_mrl("answer(state(", &t) {
            Err(Error::Syntax { pos, .. }) => assert!(pos >= 13),
            other => panic!("expected syntax error, got {other:?}"),
        }
        match parse_mrl("answer(nosuch(all))", &t) {
            Err(Error::UnknownFunction { name, arity, .. }) => {
                assert_eq!(name, "nosuch");
                assert_eq!(arity, 1);
            }
            other => panic!("expected unknown function, got {other:?}"),
        }
        // loc(state(...)) fails: loc wants RIVER, state(...) is STATE
        match parse_mrl("answer(loc(state(loc(river(all)))))", &t) {
            Err(Error::TypeMismatch { .. }) => {}
            other => panic!("expected type mismatch, got {other:?}"),
        }
        match parse_mrl("'texas'", &t) {
            Err(Error::BareConstant { .. }) => {}
            other => panic!("expected bare constant, got {other:?}"),
        }
    }

    #[test]
    fn ambiguity_is_reported() {
        let mut t = SignatureTable::new();
        t.add(SignatureTable::parse_signature("STATE:f(STATE)").unwrap());
        t.add(SignatureTable::parse_signature("RIVER:f(STATE)").unwrap());
        t.add(SignatureTable::parse_signature("STATE:x()").unwrap());
        match parse_mrl("f(x)", &t) {
            Err(Error::Ambiguous { .. }) => {}
            other => panic!("expected ambiguity, got {other:?}"),
        }
        // but a typed context disambiguates
        t.add(SignatureTable::parse_signature("QUERY:q(RIVER)").unwrap());
        let tree = parse_mrl("q(f(x))", &t).unwrap();
        assert_eq!(tree.children[0].unit.return_type().name(), "RIVER");
    }

    #[test]
    fn compound_templates_are_distinct_units() {
        let t = demo_table();
        let a = parse_mrl("smallest_one(density(state(loc(river(all)))))", &t).unwrap();
        let b = parse_mrl("smallest_one(population(state(loc(river(all)))))", &t).unwrap();
        assert_eq!(a.node_count(), b.node_count());
        assert_ne!(a.unit, b.unit);
        assert_eq!(a.unit.function(), b.unit.function());
        assert_eq!(a.unit.to_string(), "STATE:smallest_one(density(STATE))");
    }

    #[test]
    fn fuzzed_mutations_parse_valid_or_error() {
        // type soundness: mutated strings either fail or yield valid trees
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let t = demo_table();
        let seeds = [
            "answer(state(loc(river(all))))",
            "answer(exclude(river(all), traverse(stateid('texas'))))",
        ];
        let mut rng = StdRng::seed_from_u64(7);
        let alphabet = b"ars(),'telo xiv";
        for _ in 0..500 {
            let base = seeds[rng.gen_range(0..seeds.len())];
            let mut s: Vec<u8> = base.bytes().collect();
            for _ in 0..rng.gen_range(1..4) {
                match rng.gen_range(0..3) {
                    0 if !s.is_empty() => {
                        let i = rng.gen_range(0..s.len());
                        s.remove(i);
                    }
                    1 => {
                        let i = rng.gen_range(0..=s.len());
                        s.insert(i, alphabet[rng.gen_range(0..alphabet.len())]);
                    }
                    _ if !s.is_empty() => {
                        let i = rng.gen_range(0..s.len());
                        s[i] = alphabet[rng.gen_range(0..alphabet.len())];
                    }
                    _ => {}
                }
            }
            if let Ok(text) = String::from_utf8(s) {
                if let Ok(tree) = parse_mrl(&text, &t) {
                    tree.validate().unwrap();
                }
            }
        }
    }
}
