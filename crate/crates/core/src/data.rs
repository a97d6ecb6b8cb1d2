//! Corpus ingestion: tokenisation, vocabulary, encoding, splits, class
//! weights and dataset files.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Small French/English stop-word list. Not canonical; opt-in only.
pub const STOP_WORDS: &[&str] = &[
    "le", "la", "les", "un", "une", "des", "de", "du", "et", "ou", "à", "au", "aux", "en", "pour",
    "par", "sur", "avec", "dans", "ce", "cet", "cette", "ces", "est", "sont", "a", "the", "of",
    "and", "to", "in", "is", "il", "elle", "on", "qui", "que", "se", "sa", "son", "ses", "d", "l",
];

/// Words that negate the following token when negation merging is on.
pub const NEGATION_CUES: &[&str] = &["pas", "sans", "no", "non", "not", "aucun", "aucune"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub remove_stop_words: bool,
    /// Merge a negation cue with the next token into `NEG_<token>`.
    pub merge_negations: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: true,
            remove_stop_words: false,
            merge_negations: false,
        }
    }
}

/// Whitespace unigram tokenizer. Punctuation becomes a separator; letters
/// with diacritics are kept intact.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    let text = if cfg.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '_' { c } else { ' ' })
        .collect();
    let mut tokens: Vec<String> = cleaned
        .split_whitespace()
        .filter(|t| !(cfg.remove_stop_words && STOP_WORDS.contains(t)))
        .map(str::to_string)
        .collect();
    if cfg.merge_negations {
        let mut merged = Vec::with_capacity(tokens.len());
        let mut it = tokens.into_iter().peekable();
        while let Some(t) = it.next() {
            if NEGATION_CUES.contains(&t.as_str()) {
                if let Some(next) = it.next() {
                    merged.push(format!("NEG_{next}"));
                    continue;
                }
            }
            merged.push(t);
        }
        tokens = merged;
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub min_frequency: usize,
    pub tokenizer: TokenizerConfig,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    min_frequency: usize,
    tokenizer: TokenizerConfig,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        let index = r.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens: r.tokens,
            index,
            min_frequency: r.min_frequency,
            tokenizer: r.tokenizer,
        }
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            min_frequency: v.min_frequency,
            tokenizer: v.tokenizer,
        }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text, &self.tokenizer)
    }

    /// Token ids truncated to `max_len`; empty text yields a single UNK.
    pub fn encode_ids(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .tokenize(text)
            .iter()
            .take(max_len)
            .map(|t| self.id(t))
            .collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Encoding {
        let mut ids = self.encode_ids(text, max_len);
        let mut mask = vec![true; ids.len()];
        ids.resize(max_len.max(1), PAD_ID);
        mask.resize(max_len.max(1), false);
        Encoding { ids, mask }
    }

    /// Tokens for `ids`, skipping padding.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// Stable digest of the id assignment.
    pub fn digest(&self) -> String {
        crate::digest_bytes(self.tokens.join("\n").as_bytes())
    }
}

/// A padded encoding with its real-token mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Encoding {
    pub fn real_ids(&self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&i, _)| i)
            .collect()
    }
}

/// Builds a vocabulary with ids ordered by descending frequency, then
/// lexicographically. Tokens seen fewer than `min_frequency` times map to UNK.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[S],
    min_frequency: usize,
    tokenizer: &TokenizerConfig,
) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for t in tokenize(text.as_ref(), tokenizer) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_frequency.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens: Vec<String> = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
        .into_iter()
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Ok(VocabularyRepr {
        tokens,
        min_frequency,
        tokenizer: tokenizer.clone(),
    }
    .into())
}

/// One labelled line of text. Label 0 is negative, 1 positive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Assigns each example to a split. Per stratum (the whole set, or each
/// label when `stratify`), `round(f_val·n)` go to val, `round(f_test·n)` to
/// test and the remainder to train, after a seeded shuffle.
pub fn split_dataset(labels: &[usize], fractions: (f64, f64, f64), seed: u64, stratify: bool) -> Result<Vec<Split>> {
    let (ft, fv, fs) = fractions;
    if (ft + fv + fs - 1.0).abs() > 1e-9 || ft < 0.0 || fv < 0.0 || fs < 0.0 {
        return Err(Error::Config(format!(
            "split fractions ({ft}, {fv}, {fs}) must be non-negative and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: Vec<Vec<usize>> = if stratify {
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut s = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            s[y].push(i);
        }
        s
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut out = vec![Split::Train; labels.len()];
    for stratum in &mut strata {
        stratum.shuffle(&mut rng);
        let n = stratum.len() as f64;
        let n_val = (fv * n).round() as usize;
        let n_test = ((fs * n).round() as usize).min(stratum.len() - n_val.min(stratum.len()));
        let n_val = n_val.min(stratum.len());
        for &i in &stratum[..n_val] {
            out[i] = Split::Val;
        }
        for &i in &stratum[n_val..n_val + n_test] {
            out[i] = Split::Test;
        }
    }
    Ok(out)
}

/// `w_c = N / (C · N_c)`.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Contract(format!("label {y} >= {num_classes} classes")));
        }
        counts[y] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Config(format!(
            "every class must be present in the training split, counts = {counts:?}"
        )));
    }
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| n / (num_classes as f64 * c as f64))
        .collect())
}

/// Encoded examples with their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<Example>,
    pub encoded: Vec<Vec<usize>>,
    pub splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn new(examples: Vec<Example>, vocab: &Vocabulary, max_len: usize, splits: Vec<Split>) -> Result<Self> {
        if splits.len() != examples.len() {
            return Err(Error::dim("LabeledDataset", &[examples.len()], &[splits.len()]));
        }
        let encoded = examples.iter().map(|e| vocab.encode_ids(&e.text, max_len)).collect();
        Ok(LabeledDataset {
            examples,
            encoded,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.examples[i].label).collect()
    }

    pub fn sequences(&self, idx: &[usize]) -> Vec<&[usize]> {
        idx.iter().map(|&i| self.encoded[i].as_slice()).collect()
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.examples.iter().position(|e| e.id == id)
    }
}

/// Splits `examples`, builds the vocabulary from the training split only and
/// encodes everything.
pub fn prepare_dataset(
    examples: Vec<Example>,
    tokenizer: &TokenizerConfig,
    min_frequency: usize,
    max_len: usize,
    fractions: (f64, f64, f64),
    split_seed: u64,
    stratify: bool,
) -> Result<(LabeledDataset, Vocabulary)> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let splits = split_dataset(&labels, fractions, split_seed, stratify)?;
    let train_texts: Vec<&str> = examples
        .iter()
        .zip(&splits)
        .filter(|(_, &s)| s == Split::Train)
        .map(|(e, _)| e.text.as_str())
        .collect();
    let vocab = build_vocab(&train_texts, min_frequency, tokenizer)?;
    let data = LabeledDataset::new(examples, &vocab, max_len, splits)?;
    Ok((data, vocab))
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    label: serde_json::Value,
}

fn parse_label(v: &str, line: usize) -> Result<usize> {
    match v.trim() {
        "0" | "negative" | "Negative" => Ok(0),
        "1" | "positive" | "Positive" => Ok(1),
        other => other
            .parse()
            .map_err(|_| Error::Format(format!("line {line}: unreadable label `{other}`"))),
    }
}

/// Reads a dataset file. `.jsonl`/`.json` files hold one
/// `{"text": .., "label": ..}` object per line (optional `"id"`);
/// anything else is tab-separated with a `text<TAB>label` header
/// (optional leading `id` column).
pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json") | Some("ndjson")
    );
    let mut out = Vec::new();
    let mut header: Option<(Option<usize>, usize, usize)> = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = n + 1;
        if jsonl {
            let rec: JsonRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
            let label = match &rec.label {
                serde_json::Value::Number(x) => x
                    .as_u64()
                    .ok_or_else(|| Error::Format(format!("line {lineno}: bad label")))?
                    as usize,
                serde_json::Value::String(s) => parse_label(s, lineno)?,
                _ => return Err(Error::Format(format!("line {lineno}: bad label"))),
            };
            out.push(Example {
                id: rec.id.unwrap_or_else(|| format!("{}", out.len())),
                text: rec.text,
                label,
            });
        } else {
            let fields: Vec<&str> = line.split('\t').collect();
            match header {
                None => {
                    let pos = |name: &str| fields.iter().position(|f| f.trim() == name);
                    let (Some(t), Some(l)) = (pos("text"), pos("label")) else {
                        return Err(Error::Format(
                            "delimited dataset needs a `text\\tlabel` header".into(),
                        ));
                    };
                    header = Some((pos("id"), t, l));
                }
                Some((id_col, t, l)) => {
                    let get = |c: usize| {
                        fields
                            .get(c)
                            .copied()
                            .ok_or_else(|| Error::Format(format!("line {lineno}: missing column {c}")))
                    };
                    let id = match id_col {
                        Some(c) => get(c)?.to_string(),
                        None => format!("{}", out.len()),
                    };
                    out.push(Example {
                        id,
                        text: get(t)?.to_string(),
                        label: parse_label(get(l)?, lineno)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Writes examples as JSON lines.
pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("plain struct serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
