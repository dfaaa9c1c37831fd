//! Tokens, vocabulary, word embeddings, the LSTM text encoders and the
//! shared object-scoring function.

use std::collections::HashMap;
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{format_err, Error, Result};
use crate::nn::{glorot_uniform, Gtu, LstmCell};
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Token ↔ index map with reserved padding and unknown entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::from_tokens(Vec::new())
    }

    fn from_tokens(extra: Vec<String>) -> Self {
        let mut v = Self {
            tokens: vec![PAD.to_owned(), UNK.to_owned()],
            index: HashMap::new(),
        };
        for t in extra {
            v.insert(&t);
        }
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    /// Builds a vocabulary from every token in the corpus, sorted for determinism.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut words: Vec<String> = sentences
            .into_iter()
            .flat_map(|s| s.iter().map(|t| t.as_ref().to_owned()))
            .collect();
        words.sort();
        words.dedup();
        Self::from_tokens(words)
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_owned());
        let i = self.tokens.len() - 1;
        self.index.insert(token.to_owned(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or the shared unknown index.
    pub fn index_of(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("token list serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(s)?;
        if tokens.len() < 2 || tokens[0] != PAD || tokens[1] != UNK {
            return Err(format_err("vocabulary", "missing reserved entries"));
        }
        let mut v = Self {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        if v.index.len() != v.tokens.len() {
            return Err(format_err("vocabulary", "duplicate tokens"));
        }
        Ok(v)
    }
}

/// `|V| × d_emb` word-embedding parameter.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.add(name, glorot_uniform(vocab_size, dim, rng))?;
        Ok(Self { table, dim })
    }

    /// Rows `[T × d_emb]` for the given token indices.
    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }

    /// Overwrites rows with vectors read from a GloVe-format text source.
    /// Returns the number of vocabulary rows filled.
    pub fn load_glove<B: BufRead>(
        &self,
        store: &mut ParamStore,
        vocab: &Vocabulary,
        reader: B,
    ) -> Result<usize> {
        let vectors = read_glove(reader, Some(self.dim), |w| vocab.get(w).is_some())?;
        let table = store.value_mut(self.table);
        let mut filled = 0;
        for (word, v) in vectors {
            let i = vocab.index_of(&word);
            table.data_mut()[i * self.dim..(i + 1) * self.dim].copy_from_slice(&v);
            filled += 1;
        }
        Ok(filled)
    }
}

/// Parses `token v1 v2 …` lines, keeping those accepted by `keep`.
pub fn read_glove<B: BufRead>(
    reader: B,
    expected_dim: Option<usize>,
    keep: impl Fn(&str) -> bool,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut dim = expected_dim;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        if !keep(word) {
            continue;
        }
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format_err("embedding file", format!("line {}: {e}", lineno + 1)))?;
        match dim {
            Some(d) if d != values.len() => {
                return Err(format_err(
                    "embedding file",
                    format!("line {}: {} values, expected {d}", lineno + 1, values.len()),
                ))
            }
            None => dim = Some(values.len()),
            _ => {}
        }
        out.push((word.to_owned(), values));
    }
    Ok(out)
}

/// Embedding lookup followed by an LSTM; the encoding is the final hidden state.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub lstm: LstmCell,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        emb_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            lstm: LstmCell::new(store, name, emb_dim, hidden, rng)?,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm.hidden_dim
    }

    pub fn encode(&self, g: &mut Graph, embed: &EmbeddingTable, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let rows = embed.lookup(g, ids)?;
        let steps = (0..ids.len())
            .map(|t| g.row(rows, t))
            .collect::<Result<Vec<_>>>()?;
        self.lstm.run(g, &steps)
    }
}

/// `s_i = GTU([q, v_i])`, applied to every object at once.
#[derive(Clone, Debug)]
pub struct ObjectScorer {
    pub gtu: Gtu,
    pub query_dim: usize,
    pub feature_dim: usize,
}

impl ObjectScorer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        feature_dim: usize,
        score_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            gtu: Gtu::new(store, name, query_dim + feature_dim, score_dim, rng)?,
            query_dim,
            feature_dim,
        })
    }

    pub fn score_dim(&self) -> usize {
        self.gtu.out_dim()
    }

    /// Score matrix `[N × n]` for query `q` against object features `[N × d_v]`.
    pub fn score(&self, g: &mut Graph, q: Var, features: &Tensor) -> Result<Var> {
        if features.rank() != 2 || features.cols() != self.feature_dim {
            return Err(crate::error::shape_err(
                "score_objects",
                format!("features {:?}, scorer expects d_v = {}", features.shape(), self.feature_dim),
            ));
        }
        let n = features.shape()[0];
        let qs = g.broadcast_rows(q, n)?;
        let v = g.constant(features.clone());
        let x = g.concat_cols(qs, v)?;
        self.gtu.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("How many dogs?"), vec!["how", "many", "dogs"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("number of the bus"), vec!["number", "of", "the", "bus"]);
        assert_eq!(tokenize("  What's   THAT, sir! "), vec!["whats", "that", "sir"]);
    }

    #[test]
    fn vocabulary_reserved_and_unknown() {
        let sents = [vec!["how", "many", "dogs"], vec!["how", "many", "cats"]];
        let v = Vocabulary::build(sents.iter().map(|s| s.as_slice()));
        assert_eq!(v.len(), 2 + 4);
        assert_eq!(v.index_of("never-seen"), UNK_INDEX);
        assert_eq!(v.index_of("zebra"), v.index_of("unicorn"));
        let ids = v.encode(&["how", "cats"]);
        assert_eq!(v.token(ids[1]), Some("cats"));
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back.index_of("dogs"), v.index_of("dogs"));
    }

    #[test]
    fn glove_loading() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = Vocabulary::build([["dog", "cat"].as_slice()]);
        let emb = EmbeddingTable::new(&mut store, "emb", v.len(), 3, &mut rng).unwrap();
        let text = "dog 1 2 3\nzebra 0 0 0\ncat -1 0.5 2e-1\n";
        let filled = emb.load_glove(&mut store, &v, text.as_bytes()).unwrap();
        assert_eq!(filled, 2);
        let row = store.value(emb.table).row(v.index_of("cat")).to_vec();
        assert_eq!(row, vec![-1.0, 0.5, 0.2]);
        assert!(emb.load_glove(&mut store, &v, "dog 1 2\n".as_bytes()).is_err());
    }
}
