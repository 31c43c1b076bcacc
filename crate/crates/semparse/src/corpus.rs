//! Multilingual (sentence, logical form) datasets.
//!
//! Corpus files are UTF-8 text with three sections separated by `%%` lines:
//!
//! ```text
//! lang en
//! lang de
//! %%
//! QUERY:answer(RIVER)
//! RIVER:river(all)
//! %%
//! id 0 en
//! nl: which rivers do not run through texas ?
//! mrl: answer(exclude(river(all), traverse(stateid('texas'))))
//! ```
//!
//! Sentences are tokenized by whitespace and lowercased; corpora are assumed
//! pre-tokenized. Constant units found in the logical forms are registered
//! into the signature table on load.

use std::collections::HashMap;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::Error;
use crate::logic::{collect_units, parse_mrl, MeaningTree, SignatureTable};
use crate::Result;

/// One annotated sentence.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: u32,
    pub language: String,
    pub tokens: Vec<String>,
    pub tree: MeaningTree,
}

/// An immutable loaded dataset.
#[derive(Debug, Clone)]
pub struct Corpus {
    instances: Vec<Instance>,
    signatures: SignatureTable,
    languages: Vec<String>,
    by_key: HashMap<(String, u32), usize>,
}

impl Corpus {
    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn signatures(&self) -> &SignatureTable {
        &self.signatures
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    /// Instances of one language, in file order.
    pub fn instances_of<'a>(&'a self, language: &str) -> Vec<&'a Instance> {
        self.instances
            .iter()
            .filter(|i| i.language == language)
            .collect()
    }

    pub fn get(&self, language: &str, id: u32) -> Option<&Instance> {
        self.by_key
            .get(&(language.to_string(), id))
            .map(|&i| &self.instances[i])
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Train/dev/test instance ids for one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub language: String,
    pub train_ids: Vec<u32>,
    pub dev_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn materialize<'a>(
        &self,
        corpus: &'a Corpus,
    ) -> (Vec<&'a Instance>, Vec<&'a Instance>, Vec<&'a Instance>) {
        let pick = |ids: &[u32]| {
            ids.iter()
                .filter_map(|&id| corpus.get(&self.language, id))
                .collect::<Vec<_>>()
        };
        (
            pick(&self.train_ids),
            pick(&self.dev_ids),
            pick(&self.test_ids),
        )
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    load_corpus_str(&text, &path.display().to_string())
}

/// Parses corpus text; `origin` labels error messages.
pub fn load_corpus_str(text: &str, origin: &str) -> Result<Corpus> {
    let fail = |line: usize, msg: String| Error::Corpus {
        path: origin.to_string(),
        line,
        msg,
    };

    // section -> (line number, line text)
    let mut sections: Vec<Vec<(usize, &str)>> = vec![Vec::new()];
    for (num, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.trim() == "%%" {
            sections.push(Vec::new());
        } else {
            sections.last_mut().unwrap().push((num + 1, line));
        }
    }
    if sections.len() != 3 {
        return Err(fail(
            text.lines().count(),
            format!(
                "expected 3 sections separated by `%%`, found {}",
                sections.len()
            ),
        ));
    }
    let instance_section = sections.pop().unwrap();
    let signature_section = sections.pop().unwrap();
    let header_section = sections.pop().unwrap();

    let mut languages: Vec<String> = Vec::new();
    for (num, line) in header_section {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some("lang"), Some(tag), None) => {
                if languages.iter().any(|l| l == tag) {
                    return Err(fail(num, format!("duplicate language `{tag}`")));
                }
                languages.push(tag.to_string());
            }
            _ => return Err(fail(num, format!("expected `lang <tag>`, found `{line}`"))),
        }
    }

    let mut signatures = SignatureTable::new();
    for (num, line) in signature_section {
        if line.trim().is_empty() {
            continue;
        }
        let unit =
            SignatureTable::parse_signature(line.trim()).map_err(|e| fail(num, e.to_string()))?;
        signatures.add(unit);
    }

    let mut instances = Vec::new();
    let mut by_key: HashMap<(String, u32), usize> = HashMap::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    let nonblank: Vec<(usize, &str)> = instance_section
        .into_iter()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    for entry in nonblank {
        block.push(entry);
        if block.len() < 3 {
            continue;
        }
        let (num_id, line_id) = block[0];
        let (num_nl, line_nl) = block[1];
        let (num_mrl, line_mrl) = block[2];
        block.clear();

        let mut parts = line_id.split_whitespace();
        let (id, language) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("id"), Some(idstr), Some(lang), None) => {
                let id: u32 = idstr
                    .parse()
                    .map_err(|_| fail(num_id, format!("invalid instance id `{idstr}`")))?;
                (id, lang.to_string())
            }
            _ => {
                return Err(fail(
                    num_id,
                    format!("expected `id <int> <lang>`, found `{line_id}`"),
                ))
            }
        };
        if !languages.iter().any(|l| *l == language) {
            return Err(fail(num_id, format!("undeclared language `{language}`")));
        }
        if by_key.contains_key(&(language.clone(), id)) {
            return Err(fail(
                num_id,
                format!("duplicate id {id} for language `{language}`"),
            ));
        }

        let nl = line_nl
            .strip_prefix("nl:")
            .ok_or_else(|| fail(num_nl, format!("expected `nl: ...`, found `{line_nl}`")))?;
        let tokens: Vec<String> = nl.split_whitespace().map(|t| t.to_lowercase()).collect();
        if tokens.is_empty() {
            return Err(fail(num_nl, "empty sentence".into()));
        }

        let mrl = line_mrl
            .strip_prefix("mrl:")
            .ok_or_else(|| fail(num_mrl, format!("expected `mrl: ...`, found `{line_mrl}`")))?;
        let tree = parse_mrl(mrl.trim(), &signatures).map_err(|e| fail(num_mrl, e.to_string()))?;
        for unit in collect_units(&tree) {
            signatures.add(unit); // registers constants; known units are no-ops
        }

        by_key.insert((language.clone(), id), instances.len());
        instances.push(Instance {
            id,
            language,
            tokens,
            tree,
        });
    }
    if !block.is_empty() {
        return Err(fail(block[0].0, "incomplete instance block".into()));
    }

    Ok(Corpus {
        instances,
        signatures,
        languages,
        by_key,
    })
}

/// The standard 600-train / 280-test split over the first 880 instances of a
/// language, in file order.
pub fn standard_split(corpus: &Corpus, language: &str) -> Result<SplitSpec> {
    let inst = corpus.instances_of(language);
    if inst.len() < 880 {
        return Err(Error::InsufficientInstances {
            language: language.to_string(),
            found: inst.len(),
            need: 880,
        });
    }
    Ok(SplitSpec {
        language: language.to_string(),
        train_ids: inst[..600].iter().map(|i| i.id).collect(),
        dev_ids: Vec::new(),
        test_ids: inst[600..880].iter().map(|i| i.id).collect(),
        seed: 0,
    })
}

/// First `n_train` instances of a language for training, the rest for test.
/// Plumbing for corpora smaller than the standard 880.
pub fn head_split(corpus: &Corpus, language: &str, n_train: usize) -> Result<SplitSpec> {
    let inst = corpus.instances_of(language);
    if inst.len() <= n_train {
        return Err(Error::InsufficientInstances {
            language: language.to_string(),
            found: inst.len(),
            need: n_train + 1,
        });
    }
    Ok(SplitSpec {
        language: language.to_string(),
        train_ids: inst[..n_train].iter().map(|i| i.id).collect(),
        dev_ids: Vec::new(),
        test_ids: inst[n_train..].iter().map(|i| i.id).collect(),
        seed: 0,
    })
}

/// Carves a development set out of the training ids: 80% learn / 20% dev,
/// uniform without replacement, deterministic for a fixed seed.
pub fn dev_split(split: &SplitSpec, seed: u64) -> SplitSpec {
    let mut shuffled = split.train_ids.clone();
    let mut rng = StdRng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_dev = shuffled.len() / 5;
    let mut dev: Vec<u32> = shuffled[..n_dev].to_vec();
    let mut learn: Vec<u32> = shuffled[n_dev..].to_vec();
    dev.sort_unstable();
    learn.sort_unstable();
    SplitSpec {
        language: split.language.clone(),
        train_ids: learn,
        dev_ids: dev,
        test_ids: split.test_ids.clone(),
        seed,
    }
}

/// All instances whose language differs from `target`, with the shared
/// signature table.
pub fn auxiliary_corpus(corpus: &Corpus, target: &str) -> Corpus {
    let instances: Vec<Instance> = corpus
        .instances
        .iter()
        .filter(|i| i.language != target)
        .cloned()
        .collect();
    let mut by_key = HashMap::new();
    for (idx, inst) in instances.iter().enumerate() {
        by_key.insert((inst.language.clone(), inst.id), idx);
    }
    Corpus {
        instances,
        signatures: corpus.signatures.clone(),
        languages: corpus
            .languages
            .iter()
            .filter(|l| *l != target)
            .cloned()
            .collect(),
        by_key,
    }
}
