//! Distributed representations of semantic units.
//!
//! A semantics-word co-occurrence matrix M (unit rows, word columns) is
//! assembled from auxiliary-language data, factored as M = U Σ Vᵀ, and the
//! rank-d left factor U Σ̃ supplies one d-dimensional vector per unit.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::Error;
use crate::linalg::Matrix;
use crate::logic::{collect_units, SemanticUnit, SignatureTable};
use crate::Result;

/// How a (unit, word) pair is counted within one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoocMode {
    /// unit multiplicity x token frequency
    #[default]
    Freq,
    /// presence x presence
    Binary,
}

impl std::str::FromStr for CoocMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq" => Ok(CoocMode::Freq),
            "binary" => Ok(CoocMode::Binary),
            other => Err(Error::Data(format!("unknown cooc mode `{other}`"))),
        }
    }
}

/// Dense semantics-word co-occurrence counts.
#[derive(Debug, Clone)]
pub struct CoocMatrix {
    units: Vec<SemanticUnit>,
    unit_index: HashMap<SemanticUnit, usize>,
    words: Vec<String>,
    word_index: HashMap<String, usize>,
    counts: Vec<u64>, // m x n row-major
}

impl CoocMatrix {
    pub fn units(&self) -> &[SemanticUnit] {
        &self.units
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn unit_row(&self, unit: &SemanticUnit) -> Option<usize> {
        self.unit_index.get(unit).copied()
    }

    pub fn word_col(&self, word: &str) -> Option<usize> {
        self.word_index.get(word).copied()
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.words.len() + col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.units.len(), self.words.len())
    }

    pub fn to_matrix(&self) -> Matrix {
        let (m, n) = self.shape();
        let mut out = Matrix::zeros(m, n);
        for r in 0..m {
            for c in 0..n {
                out[(r, c)] = self.counts[r * n + c] as f64;
            }
        }
        out
    }
}

/// Builds the co-occurrence matrix over all instances of `aux`.
///
/// Rows are units in order of first appearance (preorder within each tree),
/// columns are words in order of first appearance.
pub fn build_cooc(aux: &Corpus, mode: CoocMode) -> CoocMatrix {
    let mut units: Vec<SemanticUnit> = Vec::new();
    let mut unit_index: HashMap<SemanticUnit, usize> = HashMap::new();
    let mut words: Vec<String> = Vec::new();
    let mut word_index: HashMap<String, usize> = HashMap::new();
    // (unit row, word col) -> count, densified at the end
    let mut cells: HashMap<(usize, usize), u64> = HashMap::new();

    for inst in aux.instances() {
        let unit_counts: Vec<(usize, u64)> = {
            let mut local: HashMap<usize, u64> = HashMap::new();
            for u in collect_units(&inst.tree) {
                let idx = *unit_index.entry(u.clone()).or_insert_with(|| {
                    units.push(u.clone());
                    units.len() - 1
                });
                *local.entry(idx).or_insert(0) += 1;
            }
            let mut pairs: Vec<_> = local.into_iter().collect();
            pairs.sort_unstable();
            pairs
        };
        let word_counts: Vec<(usize, u64)> = {
            let mut local: HashMap<usize, u64> = HashMap::new();
            for w in &inst.tokens {
                let idx = *word_index.entry(w.clone()).or_insert_with(|| {
                    words.push(w.clone());
                    words.len() - 1
                });
                *local.entry(idx).or_insert(0) += 1;
            }
            let mut pairs: Vec<_> = local.into_iter().collect();
            pairs.sort_unstable();
            pairs
        };
        for &(u, cu) in &unit_counts {
            for &(w, cw) in &word_counts {
                let add = match mode {
                    CoocMode::Freq => cu * cw,
                    CoocMode::Binary => 1,
                };
                *cells.entry((u, w)).or_insert(0) += add;
            }
        }
    }

    let n = words.len();
    let mut counts = vec![0u64; units.len() * n];
    for ((u, w), c) in cells {
        counts[u * n + w] = c;
    }
    CoocMatrix {
        units,
        unit_index,
        words,
        word_index,
        counts,
    }
}

/// Full SVD M = U Σ Vᵀ of an m x n matrix.
///
/// `u` is m x m orthogonal; `v` is n x m. For m <= n the columns of `v` are
/// orthonormal; for m > n only the first n columns are meaningful (the rest
/// are zero padding).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    /// Σ_i σ_i u_i v_iᵀ, for testing reconstruction error.
    pub fn reconstruct(&self) -> Matrix {
        let m = self.u.rows();
        let n = self.v.rows();
        let k = self.singular_values.len();
        let mut out = Matrix::zeros(m, n);
        for (i, &s) in self.singular_values.iter().enumerate().take(k) {
            if s == 0.0 {
                continue;
            }
            for r in 0..m {
                let ur = self.u[(r, i)] * s;
                if ur == 0.0 {
                    continue;
                }
                for c in 0..n {
                    out[(r, c)] += ur * self.v[(c, i)];
                }
            }
        }
        out
    }
}

/// Orthogonalizes the columns of a tall matrix in place by Jacobi rotations.
/// Returns the accumulated right rotation product (q x q, orthogonal).
fn jacobi_orthogonalize(b: &mut Matrix) -> Matrix {
    let q = b.cols();
    let mut rot = Matrix::identity(q);
    let eps = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..q {
            for r in (p + 1)..q {
                let app = b.column_dot(p, p);
                let arr = b.column_dot(r, r);
                let apr = b.column_dot(p, r);
                if apr.abs() < 1e-300 || apr.abs() <= eps * (app * arr).sqrt() {
                    continue;
                }
                let tau = (arr - app) / (2.0 * apr);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(b, p, r, c, s);
                rotate_columns(&mut rot, p, r, c, s);
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }
    rot
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..m.rows() {
        let vp = m[(r, p)];
        let vq = m[(r, q)];
        m[(r, p)] = c * vp - s * vq;
        m[(r, q)] = s * vp + c * vq;
    }
}

/// Deterministically replaces the listed columns with vectors orthonormal to
/// all other columns, scanning the canonical basis.
fn complete_orthonormal(m: &mut Matrix, bad: &[usize]) {
    let p = m.rows();
    let mut valid: Vec<usize> = (0..m.cols()).filter(|c| !bad.contains(c)).collect();
    for &col in bad {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..p {
            let mut v = vec![0.0; p];
            v[e] = 1.0;
            for &vc in &valid {
                let dot: f64 = (0..p).map(|r| v[r] * m[(r, vc)]).sum();
                for r in 0..p {
                    v[r] -= dot * m[(r, vc)];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                best = Some((norm, v));
                break;
            }
            if best.as_ref().map_or(true, |(bn, _)| norm > *bn) {
                best = Some((norm, v));
            }
        }
        let (norm, v) = best.expect("matrix has at least one row");
        assert!(norm > 1e-8, "cannot complete orthonormal basis");
        for r in 0..p {
            m[(r, col)] = v[r] / norm;
        }
        valid.push(col);
    }
}

/// One-sided Jacobi SVD of a tall matrix (rows >= cols).
/// Returns (q_cols, sigma, right_rotations) with b = Q Σ Rᵀ.
fn svd_tall(mut b: Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let q = b.cols();
    let rot = jacobi_orthogonalize(&mut b);

    let mut sigma: Vec<f64> = (0..q).map(|c| b.column_dot(c, c).sqrt()).collect();
    // stable order by original column index among equal singular values
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &c| {
        sigma[c]
            .partial_cmp(&sigma[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&c))
    });

    let mut q_sorted = Matrix::zeros(b.rows(), q);
    let mut rot_sorted = Matrix::zeros(q, q);
    let mut sigma_sorted = vec![0.0; q];
    for (new, &old) in order.iter().enumerate() {
        sigma_sorted[new] = sigma[old];
        for r in 0..b.rows() {
            q_sorted[(r, new)] = b[(r, old)];
        }
        for r in 0..q {
            rot_sorted[(r, new)] = rot[(r, old)];
        }
    }
    sigma = sigma_sorted;

    let smax = sigma.first().copied().unwrap_or(0.0);
    let tol = (b.rows().max(q) as f64) * f64::EPSILON * smax;
    let mut bad = Vec::new();
    for c in 0..q {
        if sigma[c] > tol && sigma[c] > 0.0 {
            for r in 0..q_sorted.rows() {
                q_sorted[(r, c)] /= sigma[c];
            }
        } else {
            sigma[c] = sigma[c].max(0.0);
            bad.push(c);
        }
    }
    if !bad.is_empty() {
        complete_orthonormal(&mut q_sorted, &bad);
    }
    (q_sorted, sigma, rot_sorted)
}

/// Singular value decomposition via one-sided Jacobi on the smaller Gram
/// dimension. Deterministic; singular values sorted descending.
pub fn svd(matrix: &Matrix) -> Result<SvdResult> {
    if !matrix.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (m, n) = (matrix.rows(), matrix.cols());
    if m == 0 || n == 0 {
        return Err(Error::Data("svd of an empty matrix".into()));
    }
    if m <= n {
        // Work on Mᵀ (tall): Mᵀ = Q Σ Rᵀ, so M = R Σ Qᵀ.
        let (qc, sigma, rot) = svd_tall(matrix.transpose());
        Ok(SvdResult {
            u: rot,
            singular_values: sigma,
            v: qc,
        })
    } else {
        // M itself is tall: M = Q Σ Rᵀ. U needs completion to m x m and V
        // zero-padding to n x m.
        let (qc, sigma, rot) = svd_tall(matrix.clone());
        let mut u = Matrix::zeros(m, m);
        for r in 0..m {
            for c in 0..n {
                u[(r, c)] = qc[(r, c)];
            }
        }
        let bad: Vec<usize> = (n..m).collect();
        complete_orthonormal(&mut u, &bad);
        let mut v = Matrix::zeros(n, m);
        for r in 0..n {
            for c in 0..n {
                v[(r, c)] = rot[(r, c)];
            }
        }
        Ok(SvdResult {
            u,
            singular_values: sigma,
            v,
        })
    }
}

/// Rank-d distributed representations: rows of U[:, :d] · diag(σ_1..σ_d).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbeddings {
    units: Vec<SemanticUnit>,
    unit_index: HashMap<SemanticUnit, usize>,
    vectors: Vec<f64>, // m x d row-major
    rank: usize,
}

impl UnitEmbeddings {
    pub fn new(units: Vec<SemanticUnit>, vectors: Vec<f64>, rank: usize) -> Result<Self> {
        if rank == 0 || vectors.len() != units.len() * rank {
            return Err(Error::Data(format!(
                "embedding table shape mismatch: {} units, rank {rank}, {} values",
                units.len(),
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vectors".into()));
        }
        let unit_index = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        Ok(UnitEmbeddings {
            units,
            unit_index,
            vectors,
            rank,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn units(&self) -> &[SemanticUnit] {
        &self.units
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.vectors[idx * self.rank..(idx + 1) * self.rank]
    }

    /// The unit's vector, or the zero vector for units unseen in the
    /// auxiliary data.
    pub fn lookup(&self, unit: &SemanticUnit) -> Vec<f64> {
        match self.unit_index.get(unit) {
            Some(&i) => self.row(i).to_vec(),
            None => vec![0.0; self.rank],
        }
    }
}

/// Truncates an SVD to its top-d factors, pairing rows with `units`.
pub fn truncate_embed(svd: &SvdResult, units: &[SemanticUnit], d: usize) -> Result<UnitEmbeddings> {
    let m = svd.u.rows();
    let k = svd.singular_values.len();
    if d < 1 || d > k {
        return Err(Error::RankOutOfRange { rank: d, max: k });
    }
    if units.len() != m {
        return Err(Error::Data(format!(
            "unit list has {} entries for a {}-row factor",
            units.len(),
            m
        )));
    }
    let mut vectors = vec![0.0; m * d];
    for r in 0..m {
        for j in 0..d {
            vectors[r * d + j] = svd.u[(r, j)] * svd.singular_values[j];
        }
    }
    UnitEmbeddings::new(units.to_vec(), vectors, d)
}

/// Development-set rank picks per language tag, for the eight standard
/// languages. Unknown tags get no default.
pub fn default_language_rank(lang: &str) -> Option<usize> {
    match lang {
        "en" | "de" | "id" => Some(30),
        "th" | "sv" => Some(20),
        "el" | "zh" | "fa" => Some(10),
        _ => None,
    }
}

/// Writes one TSV line per unit: canonical unit string, then d values with
/// nine significant digits.
pub fn export_embeddings(emb: &UnitEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, unit) in emb.units.iter().enumerate() {
        write!(out, "{unit}")?;
        for v in emb.row(i) {
            write!(out, "\t{v:.8e}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

const BINARY_MAGIC: &[u8; 8] = b"SPEMB\x01\0\0";

/// Compact binary dump: magic, u32 unit count, u32 rank, length-prefixed
/// unit strings, then row-major f64 little-endian vectors.
pub fn export_embeddings_binary(emb: &UnitEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(BINARY_MAGIC)?;
    out.write_all(&(emb.units.len() as u32).to_le_bytes())?;
    out.write_all(&(emb.rank as u32).to_le_bytes())?;
    for unit in &emb.units {
        let s = unit.to_string();
        out.write_all(&(s.len() as u32).to_le_bytes())?;
        out.write_all(s.as_bytes())?;
    }
    for v in &emb.vectors {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_embeddings_binary(path: impl AsRef<Path>) -> Result<UnitEmbeddings> {
    let data = std::fs::read(path.as_ref())?;
    let bad = |msg: &str| Error::Data(format!("embeddings binary: {msg}"));
    if data.len() < 16 || &data[..8] != BINARY_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = 8;
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let b: [u8; 4] = data
            .get(*pos..*pos + 4)
            .ok_or_else(|| bad("truncated"))?
            .try_into()
            .unwrap();
        *pos += 4;
        Ok(u32::from_le_bytes(b))
    };
    let m = read_u32(&mut pos)? as usize;
    let rank = read_u32(&mut pos)? as usize;
    let mut units = Vec::with_capacity(m);
    for _ in 0..m {
        let len = read_u32(&mut pos)? as usize;
        let s = std::str::from_utf8(data.get(pos..pos + len).ok_or_else(|| bad("truncated"))?)
            .map_err(|_| bad("unit string not utf-8"))?;
        pos += len;
        units.push(SignatureTable::parse_signature(s)?);
    }
    let mut vectors = Vec::with_capacity(m * rank);
    for _ in 0..m * rank {
        let b: [u8; 8] = data
            .get(pos..pos + 8)
            .ok_or_else(|| bad("truncated"))?
            .try_into()
            .unwrap();
        pos += 8;
        vectors.push(f64::from_le_bytes(b));
    }
    if pos != data.len() {
        return Err(bad("trailing bytes"));
    }
    UnitEmbeddings::new(units, vectors, rank)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<UnitEmbeddings> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_embeddings(&text)
}

pub fn parse_embeddings(text: &str) -> Result<UnitEmbeddings> {
    let mut units = Vec::new();
    let mut vectors = Vec::new();
    let mut rank = None;
    for (num, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let unit_str = fields
            .next()
            .ok_or_else(|| Error::Data(format!("embeddings line {}: empty", num + 1)))?;
        let unit = SignatureTable::parse_signature(unit_str)
            .map_err(|e| Error::Data(format!("embeddings line {}: {e}", num + 1)))?;
        let row: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("embeddings line {}: bad number", num + 1)))
            })
            .collect::<Result<_>>()?;
        match rank {
            None => rank = Some(row.len()),
            Some(r) if r != row.len() => {
                return Err(Error::Data(format!(
                    "embeddings line {}: expected {} values, found {}",
                    num + 1,
                    r,
                    row.len()
                )))
            }
            _ => {}
        }
        units.push(unit);
        vectors.extend(row);
    }
    let rank = rank.ok_or_else(|| Error::Data("empty embeddings file".into()))?;
    UnitEmbeddings::new(units, vectors, rank)
}


#[cfg(test)]
mod rank_table_tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn language_rank_table() {
        let expect = [
            ("en", 30),
            ("th", 20),
            ("de", 30),
            ("el", 10),
            ("zh", 10),
            ("id", 30),
            ("sv", 20),
            ("fa", 10),
        ];
        for (lang, d) in expect {
            assert_eq!(default_language_rank(lang), Some(d), "{lang}");
        }
        assert_eq!(default_language_rank("xx"), None);

        // every listed rank is usable on a matrix with enough units
        let mut m = Matrix::zeros(35, 40);
        for i in 0..35 {
            for j in 0..40 {
                m[(i, j)] = ((i * 7 + j * 3) % 10) as f64;
            }
        }
        let decomp = svd(&m).unwrap();
        let units: Vec<_> = (0..35)
            .map(|i| crate::logic::SignatureTable::parse_signature(&format!("E:u{i}()")).unwrap())
            .collect();
        for (_, d) in expect {
            let emb = truncate_embed(&decomp, &units, d).unwrap();
            assert_eq!(emb.rank(), d);
            assert_eq!(emb.row(0).len(), d);
        }
    }
}
