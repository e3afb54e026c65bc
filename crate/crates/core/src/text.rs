//! Prompt tokenisation, the learned token embedding table and the text-side
//! contrastive head.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{accumulate, Grads, ParamStore};
use crate::projection::{project_unit, project_unit_backward, UnitProjection};

pub const UNK_TOKEN: &str = "<unk>";
pub const EMBEDDING_PARAM: &str = "text.embedding";
pub const PHI_TEXT: &str = "phi_text";

/// The vocabulary shipped with the crate.
pub const DEFAULT_VOCAB: &str = include_str!("../assets/vocab.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    entries: Vec<String>,
    unk_index: usize,
}

impl Vocabulary {
    /// Parses the one-word-per-line format; line 0 must be `<unk>`.
    pub fn parse(text: &str) -> Result<Self> {
        let entries: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        match entries.first() {
            Some(first) if first == UNK_TOKEN => {}
            _ => {
                return Err(Error::invalid(format!(
                    "vocabulary must start with the `{UNK_TOKEN}` line"
                )))
            }
        }
        for (i, word) in entries.iter().enumerate().skip(1) {
            if word.chars().any(|c| !c.is_alphanumeric() || c.is_uppercase()) {
                return Err(Error::invalid(format!("vocabulary entry {i} `{word}` is not a lowercase word")));
            }
            if entries[..i].contains(word) {
                return Err(Error::invalid(format!("duplicate vocabulary entry `{word}`")));
            }
        }
        Ok(Vocabulary {
            entries,
            unk_index: 0,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_VOCAB).expect("shipped vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unk_index(&self) -> usize {
        self.unk_index
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.entries.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

/// Per-token embeddings (`len × dim`, row-major) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Vec<f64>,
    pub len: usize,
    pub dim: usize,
    pub pooled: Vec<f64>,
}

impl TextEmbedding {
    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }
}

/// Lowercases, splits on anything that is not alphanumeric, and maps each
/// word to its index (unknown words map to `<unk>`).
pub fn tokenize(prompt: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let ids: Vec<usize> = prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let lower = w.to_lowercase();
            vocab.index_of(&lower).unwrap_or(vocab.unk_index)
        })
        .collect();
    if ids.is_empty() {
        return Err(Error::invalid("prompt contains no words"));
    }
    Ok(TokenSequence { ids })
}

fn table(params: &ParamStore) -> Result<(&[f64], usize, usize)> {
    let p = params.get(EMBEDDING_PARAM)?;
    match p.shape[..] {
        [rows, dim] => Ok((&p.value, rows, dim)),
        _ => Err(Error::CorruptCheckpoint(format!(
            "`{EMBEDDING_PARAM}` must be 2-D, got shape {:?}",
            p.shape
        ))),
    }
}

pub fn embed_text(tokens: &TokenSequence, params: &ParamStore) -> Result<TextEmbedding> {
    if tokens.ids.is_empty() {
        return Err(Error::invalid("cannot embed an empty token sequence"));
    }
    let (table, rows, dim) = table(params)?;
    let mut out = Vec::with_capacity(tokens.ids.len() * dim);
    let mut pooled = vec![0.0; dim];
    for &id in &tokens.ids {
        if id >= rows {
            return Err(Error::CorruptCheckpoint(format!(
                "token id {id} outside embedding table of {rows} rows"
            )));
        }
        let row = &table[id * dim..(id + 1) * dim];
        out.extend_from_slice(row);
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    let n = tokens.ids.len() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    Ok(TextEmbedding {
        tokens: out,
        len: tokens.ids.len(),
        dim,
        pooled,
    })
}

/// Scatters gradients on the token rows and on the pooled vector back into
/// the embedding table.
pub fn embed_text_backward(
    tokens: &TokenSequence,
    params: &ParamStore,
    grad_tokens: &[f64],
    grad_pooled: &[f64],
    grads: &mut Grads,
) -> Result<()> {
    let (_, rows, dim) = table(params)?;
    let mut g = vec![0.0; rows * dim];
    let inv = 1.0 / tokens.ids.len() as f64;
    for (i, &id) in tokens.ids.iter().enumerate() {
        let row = &mut g[id * dim..(id + 1) * dim];
        for d in 0..dim {
            row[d] += grad_tokens[i * dim + d] + grad_pooled[d] * inv;
        }
    }
    accumulate(grads, EMBEDDING_PARAM, &g);
    Ok(())
}

pub(crate) fn project_style_text_cached(
    e: &TextEmbedding,
    params: &ParamStore,
    style_dim: usize,
) -> Result<UnitProjection> {
    project_unit(params, PHI_TEXT, style_dim, &e.pooled)
}

pub(crate) fn project_style_text_backward(
    e: &TextEmbedding,
    params: &ParamStore,
    proj: &UnitProjection,
    grad_unit: &[f64],
    grads: &mut Grads,
) -> Result<Vec<f64>> {
    project_unit_backward(params, PHI_TEXT, proj, &e.pooled, grad_unit, grads)
}

/// Text-side style embedding: affine map of the pooled embedding, then L2
/// normalised. The output dimension is read from `phi_text.bias`.
pub fn project_style_text(e: &TextEmbedding, params: &ParamStore) -> Result<Vec<f64>> {
    let style_dim = params.get(&format!("{PHI_TEXT}.bias"))?.len();
    Ok(project_style_text_cached(e, params, style_dim)?.unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use crate::params::Param;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with_table(rows: usize, dim: usize, f: impl FnMut(usize) -> f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            EMBEDDING_PARAM,
            Param::new(vec![rows, dim], (0..rows * dim).map(f).collect()),
        );
        s
    }

    #[test]
    fn builtin_vocab_shape() {
        let v = Vocabulary::builtin();
        assert_eq!(v.len(), 64);
        assert_eq!(v.word(0), Some(UNK_TOKEN));
        for style in ["excited", "mysterious", "soothing", "angry", "comedic"] {
            assert!(v.index_of(style).is_some(), "{style}");
        }
    }

    #[test]
    fn vocab_rejects_bad_files() {
        assert!(Vocabulary::parse("excited\n<unk>\n").is_err());
        assert!(Vocabulary::parse("<unk>\nx\nx\n").is_err());
        assert!(Vocabulary::parse("<unk>\nTwo Words\n").is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::builtin();
        let excited = v.index_of("excited").unwrap();
        assert_eq!(tokenize("excited", &v).unwrap().ids, vec![excited]);
        let ids = tokenize("excited and comedic", &v).unwrap().ids;
        assert_eq!(
            ids,
            vec![excited, v.index_of("and").unwrap(), v.index_of("comedic").unwrap()]
        );
        assert_eq!(tokenize("zzzqq", &v).unwrap().ids, vec![v.unk_index()]);
        assert_eq!(tokenize("Excited, comedic!", &v).unwrap().ids.len(), 2);
    }

    #[test]
    fn tokenize_rejects_blank() {
        let v = Vocabulary::builtin();
        assert!(matches!(tokenize("", &v), Err(Error::InvalidArgument(_))));
        assert!(matches!(tokenize("  \t\n ", &v), Err(Error::InvalidArgument(_))));
        assert!(matches!(tokenize("?!", &v), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pooling_is_mean_of_rows() {
        let s = store_with_table(4, 3, |i| i as f64);
        let one = embed_text(&TokenSequence { ids: vec![2] }, &s).unwrap();
        assert_eq!(one.pooled, vec![6.0, 7.0, 8.0]);
        let two = embed_text(&TokenSequence { ids: vec![1, 3] }, &s).unwrap();
        assert_eq!(two.pooled, vec![6.0, 7.0, 8.0]);
        assert_eq!(two.token(0), &[3.0, 4.0, 5.0]);

        let zero = store_with_table(4, 3, |_| 0.0);
        let e = embed_text(&TokenSequence { ids: vec![0, 1] }, &zero).unwrap();
        assert!(e.pooled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_id_is_corrupt_checkpoint() {
        let s = store_with_table(4, 3, |i| i as f64);
        assert!(matches!(
            embed_text(&TokenSequence { ids: vec![4] }, &s),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    fn with_head(mut s: ParamStore, w: Vec<f64>, b: Vec<f64>, out: usize, inp: usize) -> ParamStore {
        s.insert(format!("{PHI_TEXT}.weight"), Param::new(vec![out, inp], w));
        s.insert(format!("{PHI_TEXT}.bias"), Param::new(vec![out], b));
        s
    }

    #[test]
    fn identity_head_on_unit_vector() {
        let s = store_with_table(2, 3, |i| [0.0, 0.6, 0.8, 1.0, 1.0, 1.0][i]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let s = with_head(s, eye, vec![0.0; 3], 3, 3);
        let e = embed_text(&TokenSequence { ids: vec![0] }, &s).unwrap();
        let out = project_style_text(&e, &s).unwrap();
        for (a, b) in out.iter().zip([0.0, 0.6, 0.8]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn head_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = store_with_table(5, 6, |_| rng.gen_range(-1.0..1.0));
        let w: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = with_head(s, w.clone(), b.clone(), 4, 6);
        let e = embed_text(&TokenSequence { ids: vec![1, 4, 4] }, &s).unwrap();
        let out = project_style_text(&e, &s).unwrap();
        assert!((norm(&out) - 1.0).abs() < 1e-12);
        // independent oracle
        let mut raw = [0.0; 4];
        for r in 0..4 {
            raw[r] = b[r];
            for c in 0..6 {
                raw[r] += w[r * 6 + c] * e.pooled[c];
            }
        }
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, r) in out.iter().zip(raw) {
            assert!((a - r / n).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_pooled_is_degenerate() {
        let s = store_with_table(2, 3, |_| 0.0);
        let s = with_head(s, vec![1.0; 6], vec![1.0; 2], 2, 3);
        let e = embed_text(&TokenSequence { ids: vec![1] }, &s).unwrap();
        assert!(matches!(
            project_style_text(&e, &s),
            Err(Error::DegenerateEmbedding(_))
        ));
    }
}
