//! Window-based neural scoring of word-unit associations.
//!
//! Each token position t gets a hidden representation
//! h_t = tanh(W · [v(t-J) .. v(t+J)] + b) from the word vectors in a
//! (2J+1)-token window (a shared padding vector fills positions past either
//! sentence edge; out-of-vocabulary tokens map to it too). The score of
//! associating position t with unit u is out_w[u]·h_t + out_b[u], and a
//! hybrid tree scores the sum over its associations. Gradients are exact and
//! analytic.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::hybridtree::UnitId;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralParams {
    pub window: usize,
    pub word_dim: usize,
    pub hidden_dim: usize,
    /// vocabulary rows plus one trailing shared padding row
    pub n_word_vectors: usize,
    pub n_units: usize,
    pub theta: Vec<f64>,
}

pub const DEFAULT_WORD_DIM: usize = 50;
pub const DEFAULT_HIDDEN_DIM: usize = 100;

impl NeuralParams {
    pub fn theta_len(
        window: usize,
        word_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
        n_units: usize,
    ) -> usize {
        let input = (2 * window + 1) * word_dim;
        (vocab_size + 1) * word_dim
            + hidden_dim * input
            + hidden_dim
            + n_units * hidden_dim
            + n_units
    }

    /// Uniform(-0.1, 0.1) initialization of every block, fixed seed.
    pub fn init(
        window: usize,
        word_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
        n_units: usize,
        seed: u64,
    ) -> NeuralParams {
        assert!(window <= 2, "window size must be 0, 1 or 2");
        let mut rng = StdRng::seed_from_u64(seed);
        let len = Self::theta_len(window, word_dim, hidden_dim, vocab_size, n_units);
        let theta = (0..len).map(|_| rng.gen_range(-0.1..0.1)).collect();
        NeuralParams {
            window,
            word_dim,
            hidden_dim,
            n_word_vectors: vocab_size + 1,
            n_units,
            theta,
        }
    }

    pub fn zeros(
        window: usize,
        word_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
        n_units: usize,
    ) -> NeuralParams {
        let len = Self::theta_len(window, word_dim, hidden_dim, vocab_size, n_units);
        NeuralParams {
            window,
            word_dim,
            hidden_dim,
            n_word_vectors: vocab_size + 1,
            n_units,
            theta: vec![0.0; len],
        }
    }

    pub fn pad_id(&self) -> usize {
        self.n_word_vectors - 1
    }

    /// Maps optional vocabulary ids to word-vector rows; unknown words share
    /// the padding row.
    pub fn token_ids(&self, word_ids: &[Option<usize>]) -> Vec<usize> {
        word_ids
            .iter()
            .map(|w| match w {
                Some(id) if *id < self.n_word_vectors - 1 => *id,
                _ => self.pad_id(),
            })
            .collect()
    }

    fn input_dim(&self) -> usize {
        (2 * self.window + 1) * self.word_dim
    }

    fn off_hidden_w(&self) -> usize {
        self.n_word_vectors * self.word_dim
    }

    fn off_hidden_b(&self) -> usize {
        self.off_hidden_w() + self.hidden_dim * self.input_dim()
    }

    fn off_out_w(&self) -> usize {
        self.off_hidden_b() + self.hidden_dim
    }

    fn off_out_b(&self) -> usize {
        self.off_out_w() + self.n_units * self.hidden_dim
    }

    fn word_vec(&self, id: usize) -> &[f64] {
        &self.theta[id * self.word_dim..(id + 1) * self.word_dim]
    }

    /// Window rows feeding position t (padding past either edge).
    fn window_rows(&self, ids: &[usize], t: usize) -> Vec<usize> {
        let j = self.window as isize;
        ((t as isize - j)..=(t as isize + j))
            .map(|p| {
                if p < 0 || p as usize >= ids.len() {
                    self.pad_id()
                } else {
                    ids[p as usize]
                }
            })
            .collect()
    }

    /// tanh(W x_t + b) for every position; row-major L x H.
    pub fn hidden_activations(&self, ids: &[usize]) -> Vec<f64> {
        let h = self.hidden_dim;
        let k = self.word_dim;
        let hw = &self.theta[self.off_hidden_w()..self.off_hidden_b()];
        let hb = &self.theta[self.off_hidden_b()..self.off_out_w()];
        let mut out = vec![0.0; ids.len() * h];
        for t in 0..ids.len() {
            let rows = self.window_rows(ids, t);
            for i in 0..h {
                let mut acc = hb[i];
                let wrow = &hw[i * self.input_dim()..(i + 1) * self.input_dim()];
                for (slot, &row) in rows.iter().enumerate() {
                    let v = self.word_vec(row);
                    let ws = &wrow[slot * k..(slot + 1) * k];
                    for q in 0..k {
                        acc += ws[q] * v[q];
                    }
                }
                out[t * h + i] = acc.tanh();
            }
        }
        out
    }

    fn output(&self, hidden_t: &[f64], unit: UnitId) -> f64 {
        let h = self.hidden_dim;
        let ow = &self.theta[self.off_out_w() + unit * h..self.off_out_w() + (unit + 1) * h];
        let ob = self.theta[self.off_out_b() + unit];
        let mut acc = ob;
        for i in 0..h {
            acc += ow[i] * hidden_t[i];
        }
        acc
    }

    /// Score of associating token position t with `unit`.
    pub fn assoc_score(&self, ids: &[usize], t: usize, unit: UnitId) -> Result<f64> {
        if unit >= self.n_units {
            return Err(Error::Data(format!(
                "unit id {unit} outside the {} scored units",
                self.n_units
            )));
        }
        assert!(t < ids.len(), "token position out of range");
        let hidden = self.hidden_activations(ids);
        let h = self.hidden_dim;
        Ok(self.output(&hidden[t * h..(t + 1) * h], unit))
    }

    /// All association scores, unit-major: out[u * L + t].
    pub fn score_matrix(&self, ids: &[usize]) -> Vec<f64> {
        let l = ids.len();
        let h = self.hidden_dim;
        let hidden = self.hidden_activations(ids);
        let mut out = vec![0.0; self.n_units * l];
        for u in 0..self.n_units {
            for t in 0..l {
                out[u * l + t] = self.output(&hidden[t * h..(t + 1) * h], u);
            }
        }
        out
    }

    /// Sum of association scores over a hybrid tree's word-unit pairs.
    pub fn tree_score(&self, ids: &[usize], assocs: &[(usize, UnitId)]) -> Result<f64> {
        let hidden = self.hidden_activations(ids);
        let h = self.hidden_dim;
        let mut total = 0.0;
        for &(t, unit) in assocs {
            if unit >= self.n_units {
                return Err(Error::Data(format!(
                    "unit id {unit} outside the {} scored units",
                    self.n_units
                )));
            }
            total += self.output(&hidden[t * h..(t + 1) * h], unit);
        }
        Ok(total)
    }

    /// Accumulates the gradient of sum_{t,u} weights[u * L + t] *
    /// assoc_score(t, u) into `grad` (same layout as `theta`). Weights may be
    /// any finite values; the trainer passes posterior differences.
    pub fn accumulate_grad(&self, ids: &[usize], weights: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.theta.len());
        let l = ids.len();
        assert_eq!(weights.len(), self.n_units * l);
        let h = self.hidden_dim;
        let k = self.word_dim;
        let hidden = self.hidden_activations(ids);
        let (off_hw, off_hb, off_ow, off_ob) = (
            self.off_hidden_w(),
            self.off_hidden_b(),
            self.off_out_w(),
            self.off_out_b(),
        );

        for t in 0..l {
            let h_t = &hidden[t * h..(t + 1) * h];
            // d/d h_t and output-layer grads in one sweep over units
            let mut dh = vec![0.0; h];
            let mut any = false;
            for u in 0..self.n_units {
                let p = weights[u * l + t];
                if p == 0.0 {
                    continue;
                }
                any = true;
                grad[off_ob + u] += p;
                let ow = &self.theta[off_ow + u * h..off_ow + (u + 1) * h];
                for i in 0..h {
                    grad[off_ow + u * h + i] += p * h_t[i];
                    dh[i] += p * ow[i];
                }
            }
            if !any {
                continue;
            }
            // backprop through tanh into hidden layer and word vectors
            let rows = self.window_rows(ids, t);
            for i in 0..h {
                let s = dh[i] * (1.0 - h_t[i] * h_t[i]);
                if s == 0.0 {
                    continue;
                }
                grad[off_hb + i] += s;
                let wrow_off = off_hw + i * self.input_dim();
                for (slot, &row) in rows.iter().enumerate() {
                    let v = self.word_vec(row);
                    for q in 0..k {
                        grad[wrow_off + slot * k + q] += s * v[q];
                        // d x = Wᵀ s, scattered into the word vector rows
                    }
                    let ws = &self.theta[wrow_off + slot * k..wrow_off + (slot + 1) * k];
                    for q in 0..k {
                        grad[row * k + q] += s * ws[q];
                    }
                }
            }
        }
    }

    /// Gradient of sum_{t,u} probs[u * L + t] * assoc_score(t, u), as a fresh
    /// theta-shaped vector. Probabilities are expected in [0, 1].
    pub fn grad_theta(&self, ids: &[usize], probs: &[f64]) -> Vec<f64> {
        debug_assert!(probs.iter().all(|p| (-1e-9..=1.0 + 1e-9).contains(p)));
        let mut grad = vec![0.0; self.theta.len()];
        self.accumulate_grad(ids, probs, &mut grad);
        grad
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.theta.iter().map(|x| x * x).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{central_difference, grads_agree};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_params_score_zero() {
        let nn = NeuralParams::zeros(1, 3, 4, 5, 2);
        let ids = nn.token_ids(&[Some(0), Some(3), None]);
        for t in 0..3 {
            for u in 0..2 {
                assert_eq!(nn.assoc_score(&ids, t, u).unwrap(), 0.0);
            }
        }
        assert!(nn.assoc_score(&ids, 0, 7).is_err());
    }

    #[test]
    fn j0_one_by_one_closed_form() {
        // k=1, H=1, J=0: score = out * tanh(w * v + b) + bias
        let mut nn = NeuralParams::zeros(0, 1, 1, 2, 1);
        let (v, w, b, out, bias) = (0.3, 1.7, -0.2, 0.9, 0.05);
        nn.theta[0] = v; // word 0 vector
        let off_hw = nn.off_hidden_w();
        nn.theta[off_hw] = w;
        let off_hb = nn.off_hidden_b();
        nn.theta[off_hb] = b;
        let off_ow = nn.off_out_w();
        nn.theta[off_ow] = out;
        let off_ob = nn.off_out_b();
        nn.theta[off_ob] = bias;
        let got = nn.assoc_score(&[0], 0, 0).unwrap();
        let want = out * (w * v + b).tanh() + bias;
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn j2_uses_left_padding_at_start() {
        let mut nn = NeuralParams::init(2, 2, 3, 4, 2, 9);
        let ids = nn.token_ids(&[Some(0), Some(1), Some(2)]);
        let before = nn.assoc_score(&ids, 0, 0).unwrap();
        // perturb the padding row; position 0 sees it twice on the left
        let pad = nn.pad_id();
        nn.theta[pad * nn.word_dim] += 0.5;
        let after = nn.assoc_score(&ids, 0, 0).unwrap();
        assert!((before - after).abs() > 1e-9);
    }

    #[test]
    fn j0_ignores_neighbors() {
        let nn = NeuralParams::init(0, 3, 5, 6, 2, 1);
        let a = nn.token_ids(&[Some(0), Some(1), Some(2)]);
        let b = nn.token_ids(&[Some(3), Some(1), Some(4)]);
        assert_eq!(
            nn.assoc_score(&a, 1, 0).unwrap(),
            nn.assoc_score(&b, 1, 0).unwrap()
        );
    }

    #[test]
    fn tree_score_is_additive() {
        let nn = NeuralParams::init(1, 2, 3, 5, 3, 2);
        let ids = nn.token_ids(&[Some(0), Some(2), Some(4)]);
        let assocs = vec![(0usize, 1usize), (1, 0), (2, 2)];
        let total = nn.tree_score(&ids, &assocs).unwrap();
        let sum: f64 = assocs
            .iter()
            .map(|&(t, u)| nn.assoc_score(&ids, t, u).unwrap())
            .sum();
        assert!((total - sum).abs() < 1e-12);
        assert_eq!(nn.tree_score(&ids, &[]).unwrap(), 0.0);
        let single = nn.tree_score(&ids, &assocs[..1]).unwrap();
        assert!((single - nn.assoc_score(&ids, 0, 1).unwrap()).abs() < 1e-15);
    }

    fn fd_check(window: usize, seed: u64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let nn = NeuralParams::init(window, 3, 4, 6, 3, seed);
        let ids = nn.token_ids(&[Some(0), Some(2), None, Some(4)]);
        let l = ids.len();
        let probs: Vec<f64> = (0..nn.n_units * l)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let analytic = nn.grad_theta(&ids, &probs);

        let mut f = |theta: &[f64]| {
            let mut alt = nn.clone();
            alt.theta = theta.to_vec();
            let mut s = 0.0;
            for u in 0..alt.n_units {
                for t in 0..l {
                    s += probs[u * l + t] * alt.assoc_score(&ids, t, u).unwrap();
                }
            }
            s
        };
        // blocks: word vectors, hidden w, hidden b, out w, out b
        let block_starts = [
            0,
            nn.off_hidden_w(),
            nn.off_hidden_b(),
            nn.off_out_w(),
            nn.off_out_b(),
        ];
        let block_ends = [
            nn.off_hidden_w(),
            nn.off_hidden_b(),
            nn.off_out_w(),
            nn.off_out_b(),
            nn.theta.len(),
        ];
        for (&s0, &s1) in block_starts.iter().zip(&block_ends) {
            for _ in 0..6 {
                let i = rng.gen_range(s0..s1);
                let fd = central_difference(&mut f, &nn.theta, i, 1e-5);
                assert!(
                    grads_agree(analytic[i], fd, 1e-4),
                    "window {window} coord {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        }

        // bias gradient closed form: sum_t p(t,u)
        for u in 0..nn.n_units {
            let want: f64 = (0..l).map(|t| probs[u * l + t]).sum();
            let got = analytic[nn.off_out_b() + u];
            assert!((got - want).abs() < 1e-12);
        }

        // all-zero probabilities give a zero gradient
        let zeros = nn.grad_theta(&ids, &vec![0.0; nn.n_units * l]);
        assert!(zeros.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        fd_check(0, 11);
        fd_check(1, 12);
        fd_check(2, 13);
    }
}
