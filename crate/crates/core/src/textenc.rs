//! Sentence encoder: width-2 convolution over word vectors, ReLU, max-pool.

use rand::Rng;

use crate::embeddings::{tokenize, EmbeddingTable};
use crate::error::{config_err, input_err, Result};
use crate::tensor::{cast_vec, Real};

/// Word vectors of one sentence, zero-padded to `l_max` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceMatrix {
    pub dim: usize,
    pub l_max: usize,
    /// Number of real tokens; rows at and beyond it are zero.
    pub length: usize,
    /// `l_max × dim`, row-major.
    pub rows: Vec<f64>,
}

impl SentenceMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Window starts that see at least one real token.
    pub fn valid_windows(&self) -> usize {
        self.length.min(self.l_max.saturating_sub(1))
    }
}

pub fn embed_sentence(
    sentence: &str,
    table: &EmbeddingTable,
    l_max: usize,
) -> Result<SentenceMatrix> {
    let tokens = tokenize(sentence);
    if tokens.is_empty() {
        return Err(input_err!("sentence {sentence:?} has no tokens"));
    }
    if tokens.len() > l_max {
        return Err(input_err!(
            "sentence has {} tokens, longer than the limit of {l_max}",
            tokens.len()
        ));
    }
    let dim = table.dim();
    let mut rows = vec![0.0; l_max * dim];
    for (i, tok) in tokens.iter().enumerate() {
        rows[i * dim..(i + 1) * dim].copy_from_slice(&table.lookup(tok)?);
    }
    Ok(SentenceMatrix {
        dim,
        l_max,
        length: tokens.len(),
        rows,
    })
}

/// Sentence vector `T`.
pub type SentenceRep<T> = Vec<T>;

/// Pluggable sentence encoder interface.
pub trait SentenceEncoder<T: Real> {
    type Cache;
    fn output_dim(&self) -> usize;
    fn encode(&self, m: &SentenceMatrix) -> Result<(SentenceRep<T>, Self::Cache)>;
    fn backward(&self, m: &SentenceMatrix, cache: &Self::Cache, d_rep: &[T], grad: &mut Self);
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<T> {
    pub dim: usize,
    /// `dim × 2·dim`, row-major; columns `0..dim` see word `i`, `dim..` word `i + 1`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// For each output channel, the window that won the max-pool (if its value is positive).
#[derive(Clone, Debug)]
pub struct TextCache {
    winners: Vec<Option<usize>>,
}

impl TextCache {
    pub fn winners(&self) -> &[Option<usize>] {
        &self.winners
    }
}

impl<T: Real> TextEncoder<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            weight: vec![T::zero(); 2 * dim * dim],
            bias: vec![T::zero(); dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim)
    }

    /// Uniform in `±1/sqrt(2D)` for weights and biases.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let b = 1.0 / ((2 * self.dim) as f64).sqrt();
        for w in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *w = T::lit(rng.random_range(-b..=b));
        }
    }

    fn window(m: &SentenceMatrix, i: usize) -> Vec<T> {
        cast_vec(&m.rows[i * m.dim..(i + 2) * m.dim])
    }

    fn affine(&self, window: &[T]) -> Vec<T> {
        let w2 = 2 * self.dim;
        (0..self.dim)
            .map(|d| {
                let row = &self.weight[d * w2..(d + 1) * w2];
                row.iter()
                    .zip(window)
                    .fold(self.bias[d], |s, (&a, &b)| s + a * b)
            })
            .collect()
    }
}

impl<T: Real> TextEncoder<T> {
    /// Encoding with the max-pool winners held fixed; a smooth function of
    /// the parameters that agrees with the encoder where those winners come from.
    pub fn encode_gated(&self, m: &SentenceMatrix, winners: &[Option<usize>]) -> Vec<T> {
        winners
            .iter()
            .enumerate()
            .map(|(d, w)| match *w {
                Some(i) => self.affine(&Self::window(m, i))[d],
                None => T::zero(),
            })
            .collect()
    }
}

impl<T: Real> SentenceEncoder<T> for TextEncoder<T> {
    type Cache = TextCache;

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, m: &SentenceMatrix) -> Result<(SentenceRep<T>, TextCache)> {
        if m.dim != self.dim {
            return Err(config_err!(
                "sentence matrix has dimension {}, encoder expects {}",
                m.dim,
                self.dim
            ));
        }
        let windows = m.valid_windows();
        if windows == 0 {
            return Err(config_err!("l_max must be at least 2 for a width-2 window"));
        }
        let mut rep = vec![T::zero(); self.dim];
        let mut winners = vec![None; self.dim];
        for i in 0..windows {
            let u = self.affine(&Self::window(m, i));
            for d in 0..self.dim {
                if u[d] > rep[d] {
                    rep[d] = u[d];
                    winners[d] = Some(i);
                }
            }
        }
        Ok((rep, TextCache { winners }))
    }

    fn backward(&self, m: &SentenceMatrix, cache: &TextCache, d_rep: &[T], grad: &mut Self) {
        let w2 = 2 * self.dim;
        for (d, winner) in cache.winners.iter().enumerate() {
            let Some(i) = *winner else { continue };
            let g = d_rep[d];
            if g == T::zero() {
                continue;
            }
            let win = Self::window(m, i);
            for (gw, &x) in grad.weight[d * w2..(d + 1) * w2].iter_mut().zip(&win) {
                *gw += g * x;
            }
            grad.bias[d] += g;
        }
    }
}

/// Convenience wrapper returning just `T`.
pub fn encode_text<T: Real>(m: &SentenceMatrix, p: &TextEncoder<T>) -> Result<SentenceRep<T>> {
    p.encode(m).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(dim: usize) -> EmbeddingTable {
        EmbeddingTable::empty(dim, 9).unwrap()
    }

    /// Explicit loop: max over windows `0..min(L, l_max-1)` of ReLU(W·[r_i; r_{i+1}] + b).
    fn brute_force(m: &SentenceMatrix, p: &TextEncoder<f64>) -> Vec<f64> {
        let d = p.dim;
        let mut best = vec![f64::NEG_INFINITY; d];
        for i in 0..m.length.min(m.l_max - 1) {
            for o in 0..d {
                let mut s = p.bias[o];
                for k in 0..d {
                    s += p.weight[o * 2 * d + k] * m.rows[i * d + k];
                    s += p.weight[o * 2 * d + d + k] * m.rows[(i + 1) * d + k];
                }
                best[o] = best[o].max(s.max(0.0));
            }
        }
        best
    }

    #[test]
    fn single_word_is_padded() {
        let t = table(3);
        let m = embed_sentence("cat", &t, 4).unwrap();
        assert_eq!(m.row(0), t.lookup("cat").unwrap().as_slice());
        for i in 1..4 {
            assert!(m.row(i).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn ten_tokens_fill_ten_rows() {
        let t = table(300);
        let m = embed_sentence("one two three four five six seven eight nine ten", &t, 10).unwrap();
        assert_eq!(m.rows.len(), 10 * 300);
        assert_eq!(m.length, 10);
    }

    #[test]
    fn punctuation_and_case_do_not_matter() {
        let t = table(5);
        assert_eq!(
            embed_sentence("A red ball", &t, 6).unwrap(),
            embed_sentence("a red ball.", &t, 6).unwrap()
        );
    }

    #[test]
    fn length_errors() {
        let t = table(3);
        assert!(embed_sentence("  ..", &t, 4).is_err());
        let err = embed_sentence("a b c d e", &t, 4).unwrap_err().to_string();
        assert!(err.contains('4'), "{err}");
    }

    #[test]
    fn zero_network_gives_zero() {
        let m = embed_sentence("a b", &table(4), 5).unwrap();
        let p = TextEncoder::<f64>::zeros(4);
        assert_eq!(encode_text(&m, &p).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn positive_bias_passes_through() {
        let m = embed_sentence("a b c", &table(4), 5).unwrap();
        let mut p = TextEncoder::<f64>::zeros(4);
        p.bias = vec![1.0; 4];
        assert_eq!(encode_text(&m, &p).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn matches_loop_oracle_on_three_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = TextEncoder::<f64>::zeros(4);
        p.init(&mut rng);
        let m = embed_sentence("red square left", &table(4), 3).unwrap();
        let t = encode_text(&m, &p).unwrap();
        let oracle = brute_force(&m, &p);
        for (a, b) in t.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m.valid_windows(), 2);
    }

    #[test]
    fn extra_padding_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = TextEncoder::<f64>::zeros(6);
        p.init(&mut rng);
        let t = table(6);
        let short = encode_text(&embed_sentence("a b c", &t, 5).unwrap(), &p).unwrap();
        let long = encode_text(&embed_sentence("a b c", &t, 12).unwrap(), &p).unwrap();
        assert_eq!(short, long);
        assert!(short.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn word_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = TextEncoder::<f64>::zeros(8);
        p.init(&mut rng);
        let t = table(8);
        let fwd = encode_text(&embed_sentence("a b c", &t, 6).unwrap(), &p).unwrap();
        let rev = encode_text(&embed_sentence("c b a", &t, 6).unwrap(), &p).unwrap();
        assert_ne!(fwd, rev);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = TextEncoder::<f64>::zeros(5);
        p.init(&mut rng);
        let m = embed_sentence("the big dog runs", &table(5), 6).unwrap();
        let probe: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &TextEncoder<f64>| {
            encode_text(&m, p)
                .unwrap()
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (_, cache) = p.encode(&m).unwrap();
        let mut grad = p.zeros_like();
        p.backward(&m, &cache, &probe, &mut grad);
        let eps = 1e-4;
        for k in 0..p.weight.len() {
            let mut a = p.clone();
            a.weight[k] += eps;
            let mut b = p.clone();
            b.weight[k] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            let denom = fd.abs().max(grad.weight[k].abs()).max(1e-8);
            assert!(
                (fd - grad.weight[k]).abs() / denom < 1e-3 || (fd - grad.weight[k]).abs() < 1e-9
            );
        }
    }
}
