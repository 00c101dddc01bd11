//! Frozen word vectors read from a text table, with a seeded fallback for
//! tokens the table does not cover.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{config_err, input_err, Error, Result};

const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')'];

/// Lowercases, drops punctuation, splits on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .replace(PUNCTUATION, "")
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
    fallback_seed: u64,
}

impl EmbeddingTable {
    /// A table with no stored entries; every lookup uses the fallback.
    pub fn empty(dim: usize, fallback_seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(config_err!("embedding dimension must be positive"));
        }
        Ok(Self {
            dim,
            entries: HashMap::new(),
            fallback_seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    pub fn with_fallback_seed(mut self, seed: u64) -> Self {
        self.fallback_seed = seed;
        self
    }

    /// Parses `token v1 .. vD` lines. The first occurrence of a token wins.
    pub fn parse<R: BufRead>(reader: R, dim: usize) -> Result<Self> {
        let mut table = Self::empty(dim, 0)?;
        let mut seen_row = false;
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            line: lineno,
                            msg: format!("non-numeric component {f:?}"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim {
                if !seen_row {
                    return Err(config_err!(
                        "embedding file has {} components per row, configured dimension is {dim}",
                        values.len()
                    ));
                }
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {dim} components, found {}", values.len()),
                });
            }
            seen_row = true;
            table.entries.entry(token.to_owned()).or_insert(values);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(file), dim)
    }

    /// Stored vector, or a deterministic unit vector seeded by the token.
    pub fn lookup(&self, token: &str) -> Result<Vec<f64>> {
        if token.is_empty() {
            return Err(input_err!("cannot look up an empty token"));
        }
        if let Some(v) = self.entries.get(token) {
            return Ok(v.clone());
        }
        Ok(self.fallback(token))
    }

    fn fallback(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.fallback_seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        loop {
            let v: Vec<f64> = (0..self.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

/// Loads `path` with dimension `dim`; thin wrapper over [`EmbeddingTable::load`].
pub fn load_embeddings(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn stored_vector_is_echoed() {
        let t = EmbeddingTable::parse("cat 0.0 0.0 1.0\n".as_bytes(), 3).unwrap();
        assert_eq!(t.lookup("cat").unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn malformed_second_line_names_line_two() {
        let err = EmbeddingTable::parse("cat 0 0 1\ndog 0 1\n".as_bytes(), 3).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = EmbeddingTable::parse("cat 0 0 1\ndog 0 x 1\n".as_bytes(), 3).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let err = EmbeddingTable::parse("cat 0 0 1 0\n".as_bytes(), 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn duplicates_keep_first_and_blank_lines_skip() {
        let t = EmbeddingTable::parse("a 1 2\n\nb 3 4\na 9 9\n".as_bytes(), 2).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.lookup("a").unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn three_hundred_column_rows() {
        let row: Vec<String> = (0..300).map(|k| format!("{}", k as f64 * 0.001)).collect();
        let text = format!("king {}\nqueen {}\n", row.join(" "), row.join(" "));
        let t = EmbeddingTable::parse(text.as_bytes(), 300).unwrap();
        assert_eq!(t.dim(), 300);
        assert_eq!(t.lookup("queen").unwrap().len(), 300);
    }

    #[test]
    fn fallback_is_deterministic_and_unit_norm() {
        let t = EmbeddingTable::empty(16, 42).unwrap();
        let a = t.lookup("zebra").unwrap();
        let b = t.lookup("zebra").unwrap();
        assert_eq!(a, b);
        let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let other_seed = EmbeddingTable::empty(16, 43).unwrap();
        assert_ne!(a, other_seed.lookup("zebra").unwrap());
    }

    #[test]
    fn empty_token_rejected() {
        let t = EmbeddingTable::empty(4, 0).unwrap();
        assert!(matches!(t.lookup(""), Err(Error::Input(_))));
    }

    #[test]
    fn thousand_fallbacks_are_pairwise_distinct() {
        let t = EmbeddingTable::empty(8, 7).unwrap();
        let mut seen = HashSet::new();
        for k in 0..1000 {
            let v = t.lookup(&format!("tok{k}x")).unwrap();
            let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(key));
        }
    }

    #[test]
    fn tokenizer_normalizes_case_and_punctuation() {
        assert_eq!(tokenize("A red ball"), tokenize("a red ball."));
        assert_eq!(tokenize("\"Man\", (left)!"), vec!["man", "left"]);
    }

    proptest! {
        #[test]
        fn load_then_lookup_reproduces_file(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..20)) {
            let text: String = rows
                .iter()
                .enumerate()
                .map(|(i, r)| format!("w{i} {} {} {}\n", r[0], r[1], r[2]))
                .collect();
            let t = EmbeddingTable::parse(text.as_bytes(), 3).unwrap();
            for (i, r) in rows.iter().enumerate() {
                prop_assert_eq!(&t.lookup(&format!("w{i}")).unwrap(), r);
            }
        }
    }
}
