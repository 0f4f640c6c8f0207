//! Synthetic class-conditional corpus with a designated "marked" class
//! whose sequences carry tokens from a closed lexicon. The default setup
//! names the classes nontoxic/toxic and marks the toxic one.
//!
//! Sequences are word-level token id lists, BOS-prefixed, never padded.

use crate::error::{Error, Result};
use crate::util::derive_seed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const N_RESERVED: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    /// Token strings indexed by id. Ids 0..4 are `<pad>`, `<bos>`, `<eos>`, `<unk>`.
    pub tokens: Vec<String>,
    /// Sorted ids of the marked-class lexicon.
    pub toxic_lexicon: Vec<usize>,
    /// Attribute names; their order defines attribute indices.
    pub attribute_names: Vec<String>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_special(id: usize) -> bool {
        id < N_RESERVED
    }

    pub fn is_lexicon(&self, id: usize) -> bool {
        self.toxic_lexicon.binary_search(&id).is_ok()
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::Corpus(format!(
                    "unknown attribute {name:?}, expected one of {:?}",
                    self.attribute_names
                ))
            })
    }

    fn index(&self) -> HashMap<&str, usize> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub ids: Vec<usize>,
    pub attribute: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub vocab_size: usize,
    /// Size of the marked-class lexicon carved out of the vocabulary.
    pub lexicon_size: usize,
    /// Sequences generated per class, aligned with `attribute_names`.
    pub n_per_class: Vec<usize>,
    /// Content-token length range, inclusive; BOS is added on top.
    pub min_len: usize,
    pub max_len: usize,
    /// Per-position probability of a lexicon token in marked sequences.
    pub toxic_token_rate: f64,
    /// Probability that a content token follows its class-preferred successor.
    pub bigram_coupling: f64,
    pub attribute_names: Vec<String>,
    /// The class whose sequences carry the lexicon.
    pub marked_attribute: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            vocab_size: 128,
            lexicon_size: 12,
            n_per_class: vec![2000, 2000],
            min_len: 6,
            max_len: 14,
            toxic_token_rate: 0.3,
            bigram_coupling: 0.8,
            attribute_names: vec!["nontoxic".to_string(), "toxic".to_string()],
            marked_attribute: "toxic".to_string(),
        }
    }
}

impl CorpusSpec {
    /// Checks the settings and returns the marked attribute's index.
    pub fn validate(&self) -> Result<usize> {
        if self.attribute_names.is_empty() || self.n_per_class.len() != self.attribute_names.len() {
            return Err(Error::Corpus(format!(
                "n_per_class has {} entries for {} attributes",
                self.n_per_class.len(),
                self.attribute_names.len()
            )));
        }
        if self.vocab_size < N_RESERVED + self.lexicon_size + 2 {
            return Err(Error::Corpus(format!(
                "vocab_size {} too small for {} reserved + {} lexicon tokens",
                self.vocab_size, N_RESERVED, self.lexicon_size
            )));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::Corpus(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.toxic_token_rate) {
            return Err(Error::Corpus("toxic_token_rate outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.bigram_coupling) {
            return Err(Error::Corpus("bigram_coupling outside [0, 1]".into()));
        }
        let marked = self
            .attribute_names
            .iter()
            .position(|n| *n == self.marked_attribute)
            .ok_or_else(|| {
                Error::Corpus(format!(
                    "marked_attribute {:?} not among {:?}",
                    self.marked_attribute, self.attribute_names
                ))
            })?;
        Ok(marked)
    }
}

pub fn build_vocab(spec: &CorpusSpec) -> Result<Vocab> {
    spec.validate()?;
    let mut tokens = vec![
        "<pad>".to_string(),
        "<bos>".to_string(),
        "<eos>".to_string(),
        "<unk>".to_string(),
    ];
    for i in 0..spec.lexicon_size {
        tokens.push(format!("bad{i}"));
    }
    for i in 0..spec.vocab_size - N_RESERVED - spec.lexicon_size {
        tokens.push(format!("w{i}"));
    }
    let toxic_lexicon = (N_RESERVED..N_RESERVED + spec.lexicon_size).collect();
    Ok(Vocab {
        tokens,
        toxic_lexicon,
        attribute_names: spec.attribute_names.clone(),
    })
}

/// Fraction of successor-table entries that are re-permuted per class.
/// Classes share most of the bigram backbone, so class identity is only
/// weakly visible from content structure; the lexicon carries the rest.
const CLASS_TABLE_DIVERGENCE: f64 = 0.25;

/// Generates the corpus: per class, bigram chains over content tokens with a
/// mostly-shared preferred-successor table; marked-class sequences are
/// additionally salted with lexicon tokens at `toxic_token_rate` and are
/// guaranteed at least one. Deterministic given the settings.
pub fn make_corpus(spec: &CorpusSpec) -> Result<(Vocab, Vec<LabeledSequence>)> {
    let marked = spec.validate()?;
    let vocab = build_vocab(spec)?;
    let content: Vec<usize> = (N_RESERVED + spec.lexicon_size..spec.vocab_size).collect();
    let lexicon = vocab.toxic_lexicon.clone();

    // A shared backbone permutation, plus a per-class re-permutation of a
    // small slice of entries.
    let backbone: Vec<usize> = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "bigram", 0));
        let mut s = content.clone();
        s.shuffle(&mut rng);
        s
    };
    let successors: Vec<Vec<usize>> = (0..spec.attribute_names.len())
        .map(|class| {
            if class == 0 {
                return backbone.clone();
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "bigram", class as u64));
            let mut table = backbone.clone();
            let picked: Vec<usize> = (0..table.len())
                .filter(|_| rng.gen::<f64>() < CLASS_TABLE_DIVERGENCE)
                .collect();
            let mut values: Vec<usize> = picked.iter().map(|&i| table[i]).collect();
            values.shuffle(&mut rng);
            for (&i, &v) in picked.iter().zip(&values) {
                table[i] = v;
            }
            table
        })
        .collect();
    let content_pos: HashMap<usize, usize> =
        content.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "sequences", 0));
    let mut data = Vec::new();
    for (class, &count) in spec.n_per_class.iter().enumerate() {
        for _ in 0..count {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut ids = Vec::with_capacity(len + 1);
            ids.push(BOS);
            let mut prev: Option<usize> = None;
            let mut lex_count = 0usize;
            for _ in 0..len {
                let tok = if class == marked && rng.gen::<f64>() < spec.toxic_token_rate {
                    lex_count += 1;
                    lexicon[rng.gen_range(0..lexicon.len())]
                } else {
                    let next = match prev {
                        Some(p) if rng.gen::<f64>() < spec.bigram_coupling => {
                            successors[class][content_pos[&p]]
                        }
                        _ => content[rng.gen_range(0..content.len())],
                    };
                    prev = Some(next);
                    next
                };
                ids.push(tok);
            }
            if class == marked && lex_count == 0 {
                let pos = rng.gen_range(1..ids.len());
                ids[pos] = lexicon[rng.gen_range(0..lexicon.len())];
            }
            data.push(LabeledSequence {
                ids,
                attribute: class,
            });
        }
    }

    ensure_lexicon_coverage(&mut data, &vocab, marked)?;
    Ok((vocab, data))
}

/// Rewrites marked-class tokens so that every lexicon id occurs at least
/// once, without ever dropping a sequence's last lexicon token.
fn ensure_lexicon_coverage(
    data: &mut [LabeledSequence],
    vocab: &Vocab,
    marked: usize,
) -> Result<()> {
    if vocab.toxic_lexicon.is_empty() {
        return Ok(());
    }
    let mut count: HashMap<usize, usize> = HashMap::new();
    for seq in data.iter().filter(|s| s.attribute == marked) {
        for &id in &seq.ids {
            if vocab.is_lexicon(id) {
                *count.entry(id).or_insert(0) += 1;
            }
        }
    }
    let missing: Vec<usize> = vocab
        .toxic_lexicon
        .iter()
        .copied()
        .filter(|id| !count.contains_key(id))
        .collect();
    let marked_idx: Vec<usize> = (0..data.len())
        .filter(|&i| data[i].attribute == marked)
        .collect();
    if !missing.is_empty() && marked_idx.is_empty() {
        return Err(Error::Corpus(
            "lexicon cannot be covered: no marked-class sequences".into(),
        ));
    }
    let mut cursor = 0usize;
    for m in missing {
        let mut placed = false;
        for _ in 0..marked_idx.len() {
            let si = marked_idx[cursor % marked_idx.len()];
            cursor += 1;
            let seq_lex = data[si].ids.iter().filter(|&&t| vocab.is_lexicon(t)).count();
            let slot = data[si].ids.iter().skip(1).position(|&t| {
                if vocab.is_lexicon(t) {
                    seq_lex >= 2 && count.get(&t).copied().unwrap_or(0) >= 2
                } else {
                    !Vocab::is_special(t)
                }
            });
            if let Some(p) = slot {
                let pos = p + 1;
                let old = data[si].ids[pos];
                if vocab.is_lexicon(old) {
                    *count.get_mut(&old).unwrap() -= 1;
                }
                data[si].ids[pos] = m;
                *count.entry(m).or_insert(0) += 1;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Corpus(format!(
                "lexicon id {m} cannot be placed without breaking invariants"
            )));
        }
    }
    Ok(())
}

/// Duplicates minority classes (cycling through their examples in original
/// order) until all classes match the majority count, then shuffles.
pub fn balance(
    data: &[LabeledSequence],
    n_attributes: usize,
    seed: u64,
) -> Result<Vec<LabeledSequence>> {
    let mut per_class: Vec<Vec<&LabeledSequence>> = vec![Vec::new(); n_attributes];
    for seq in data {
        if seq.attribute >= n_attributes {
            return Err(Error::Corpus(format!(
                "attribute {} out of range for {} classes",
                seq.attribute, n_attributes
            )));
        }
        per_class[seq.attribute].push(seq);
    }
    let max_count = per_class.iter().map(|c| c.len()).max().unwrap_or(0);
    if max_count == 0 {
        return Err(Error::Corpus("balance: empty dataset".into()));
    }
    for (class, items) in per_class.iter().enumerate() {
        if items.is_empty() {
            return Err(Error::Corpus(format!("balance: class {class} is empty")));
        }
    }
    let mut out = Vec::with_capacity(max_count * n_attributes);
    for items in &per_class {
        for i in 0..max_count {
            out.push(items[i % items.len()].clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "balance", 0));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Word-level tokenizer: whitespace split, BOS prepended, unknowns to UNK.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    let index = vocab.index();
    let mut ids = vec![BOS];
    for word in text.split_whitespace() {
        ids.push(index.get(word).copied().unwrap_or(UNK));
    }
    ids
}

/// Space-joined token strings, reserved ids dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| !Vocab::is_special(id) && id < vocab.size())
        .map(|&id| vocab.tokens[id].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    attribute: String,
}

pub fn save_jsonl(path: &Path, data: &[LabeledSequence], vocab: &Vocab) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in data {
        let rec = JsonlRecord {
            text: detokenize(&seq.ids, vocab),
            attribute: vocab.attribute_names[seq.attribute].clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<LabeledSequence>> {
    let display = path.display().to_string();
    let f = BufReader::new(std::fs::File::open(path)?);
    let index = vocab.index();
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::JsonlLine {
            path: display.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let attribute = vocab
            .attribute_index(&rec.attribute)
            .map_err(|e| Error::JsonlLine {
                path: display.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        let mut ids = vec![BOS];
        for word in rec.text.split_whitespace() {
            ids.push(index.get(word).copied().unwrap_or(UNK));
        }
        out.push(LabeledSequence { ids, attribute });
    }
    Ok(out)
}
