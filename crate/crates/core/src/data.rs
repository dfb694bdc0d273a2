//! Two-domain synthetic corpus, label noise, batch sampling and plain-text
//! ingestion.
//!
//! Each domain is a sparse first-order Markov chain over its own vocabulary
//! (tokens shared by both domains plus tokens exclusive to it). Sequences
//! start with BOS and end with EOS; EOS is forced once `context_len` is
//! reached.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::BatchLabel;
use crate::model::TokenBatch;

pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const N_SPECIAL: usize = 3;

const CORPUS_MAGIC: &[u8; 8] = b"SGTMCORP";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Forget,
    Retain,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Forget => "forget",
            Domain::Retain => "retain",
        }
    }

    fn index(self) -> u64 {
        match self {
            Domain::Forget => 0,
            Domain::Retain => 1,
        }
    }
}

/// Parameters of the synthetic two-domain language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub vocab_size: usize,
    /// Share of the non-special vocabulary used by both domains.
    pub overlap_fraction: f64,
    /// Number of successors of each token.
    pub branching: usize,
    /// Zipf exponent of successor weights.
    #[serde(default = "one")]
    pub zipf: f64,
    /// Per-token probability of emitting EOS.
    pub stop_prob: f64,
    pub context_len: usize,
    /// Training tokens generated per domain.
    pub train_tokens_per_domain: usize,
    /// Held-out tokens per domain (and for the code-switched set).
    pub test_tokens_per_domain: usize,
}

fn one() -> f64 {
    1.0
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            vocab_size: 512,
            overlap_fraction: 0.25,
            branching: 4,
            zipf: 1.0,
            stop_prob: 0.02,
            context_len: 128,
            train_tokens_per_domain: 1_000_000,
            test_tokens_per_domain: 20_000,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::config("overlap_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.stop_prob) {
            return Err(Error::config("stop_prob must lie in [0, 1)"));
        }
        if self.branching == 0 {
            return Err(Error::config("branching must be positive"));
        }
        if self.context_len < 2 {
            return Err(Error::config("context_len must be at least 2"));
        }
        let (shared, fx, rx) = vocab_split(self.vocab_size, self.overlap_fraction);
        if shared + fx == 0 || shared + rx == 0 {
            return Err(Error::config(format!(
                "vocab_size {} leaves a domain without tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Sizes of (shared, forget-exclusive, retain-exclusive) vocabularies.
fn vocab_split(vocab: usize, overlap: f64) -> (usize, usize, usize) {
    let usable = vocab.saturating_sub(N_SPECIAL);
    let shared = ((usable as f64) * overlap).round() as usize;
    let rest = usable - shared;
    (shared, rest / 2, rest - rest / 2)
}

/// Sparse Markov chain of one domain. Row 0 of `rows` is unused (PAD); the
/// BOS row is the start distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainGrammar {
    pub domain: Domain,
    pub vocabulary: Vec<u32>,
    pub context_len: usize,
    rows: Vec<Vec<(u32, f64)>>,
}

impl DomainGrammar {
    pub fn build(spec: &DataSpec, domain: Domain, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (shared, fx, _) = vocab_split(spec.vocab_size, spec.overlap_fraction);
        let base = N_SPECIAL as u32;
        let shared_ids = base..base + shared as u32;
        let own = match domain {
            Domain::Forget => base + shared as u32..base + (shared + fx) as u32,
            Domain::Retain => base + (shared + fx) as u32..spec.vocab_size as u32,
        };
        let vocabulary: Vec<u32> = shared_ids.chain(own).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x6772_616d << 8 | domain.index());
        let k = spec.branching.min(vocabulary.len());
        let norm: f64 = (1..=k).map(|j| (j as f64).powf(-spec.zipf)).sum();
        let mut rows = vec![Vec::new(); spec.vocab_size];
        for &from in std::iter::once(&BOS).chain(&vocabulary) {
            let succ: Vec<u32> = vocabulary.choose_multiple(&mut rng, k).copied().collect();
            let go = if from == BOS { 1.0 } else { 1.0 - spec.stop_prob };
            let mut row: Vec<(u32, f64)> = succ
                .into_iter()
                .enumerate()
                .map(|(j, t)| (t, go * ((j + 1) as f64).powf(-spec.zipf) / norm))
                .collect();
            if from != BOS && spec.stop_prob > 0.0 {
                row.push((EOS, spec.stop_prob));
            }
            rows[from as usize] = row;
        }
        Ok(DomainGrammar { domain, vocabulary, context_len: spec.context_len, rows })
    }

    /// Successors of `from` with their probabilities.
    pub fn row(&self, from: u32) -> &[(u32, f64)] {
        &self.rows[from as usize]
    }

    pub fn probability(&self, from: u32, to: u32) -> f64 {
        self.row(from).iter().filter(|&&(t, _)| t == to).map(|&(_, p)| p).sum()
    }

    pub fn contains(&self, token: u32) -> bool {
        !self.rows[token as usize].is_empty() && token != BOS
    }

    fn step(&self, from: u32, rng: &mut impl Rng) -> u32 {
        let row = self.row(from);
        let mut u: f64 = rng.gen();
        for &(t, p) in row {
            if u < p {
                return t;
            }
            u -= p;
        }
        row.last().expect("non-empty row").0
    }

    /// One sequence `BOS ... EOS` of at most `context_len` tokens.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<u32> {
        self.sample_switching(None, 0.0, rng)
    }

    /// Like [`sample`](Self::sample), but whenever the current token is known
    /// to `other` the chain switches to it with probability `switch`.
    fn sample_switching(&self, other: Option<&DomainGrammar>, switch: f64, rng: &mut impl Rng) -> Vec<u32> {
        let mut seq = vec![BOS];
        let mut current = self;
        loop {
            let last = *seq.last().unwrap();
            if seq.len() == self.context_len - 1 {
                seq.push(EOS);
                break;
            }
            if let Some(o) = other {
                let alt = if std::ptr::eq(current, self) { o } else { self };
                if last != BOS && alt.contains(last) && rng.gen::<f64>() < switch {
                    current = alt;
                }
            }
            let next = current.step(last, rng);
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        seq
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: usize,
    /// `BOS ... EOS`, at most `context_len` ids, unpadded.
    pub tokens: Vec<u32>,
    pub domain: Domain,
    pub label: BatchLabel,
}

fn example_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1 << 62;
const RELATED_STREAM: u64 = 3 << 61;
const LABEL_STREAM: u64 = 1 << 63;

fn generate(g: &DomainGrammar, n_tokens: usize, seed: u64, stream_base: u64, first_id: usize) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    let mut total = 0;
    while total < n_tokens {
        let stream = stream_base | g.domain.index() << 40 | out.len() as u64;
        let tokens = g.sample(&mut example_rng(seed, stream));
        total += tokens.len();
        out.push(LabeledExample {
            id: first_id + out.len(),
            tokens,
            domain: g.domain,
            label: BatchLabel::Unlabeled,
        });
    }
    out
}

/// Forget-domain examples followed by retain-domain examples, each domain
/// generated until it holds at least `n_tokens_each` tokens. All examples
/// start UNLABELED.
pub fn generate_corpus(
    forget: &DomainGrammar,
    retain: &DomainGrammar,
    n_tokens_each: usize,
    seed: u64,
) -> Vec<LabeledExample> {
    let mut out = generate(forget, n_tokens_each, seed, TRAIN_STREAM, 0);
    let next = out.len();
    out.extend(generate(retain, n_tokens_each, seed, TRAIN_STREAM, next));
    out
}

/// Held-out evaluation sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSets {
    pub forget: Vec<Vec<u32>>,
    pub retain: Vec<Vec<u32>>,
    /// Code-switched sequences mixing both domains on shared tokens.
    pub related: Vec<Vec<u32>>,
}

pub fn generate_test_sets(forget: &DomainGrammar, retain: &DomainGrammar, n_tokens_each: usize, seed: u64) -> TestSets {
    let seqs = |g| generate(g, n_tokens_each, seed, TEST_STREAM, 0).into_iter().map(|e| e.tokens).collect();
    let mut related = Vec::new();
    let mut total = 0;
    while total < n_tokens_each {
        let mut rng = example_rng(seed, RELATED_STREAM | related.len() as u64);
        let s = retain.sample_switching(Some(forget), 0.5, &mut rng);
        total += s.len();
        related.push(s);
    }
    TestSets { forget: seqs(forget), retain: seqs(retain), related }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelNoiseSpec {
    /// Probability a forget-domain example is labeled FORGET.
    pub tpr: f64,
    /// Probability a retain-domain example is labeled FORGET.
    pub fpr: f64,
    /// Share of unflagged retain-domain examples labeled RETAIN.
    pub confident_retain_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LabelNoiseSpec {
    fn default() -> Self {
        LabelNoiseSpec { tpr: 1.0, fpr: 0.0, confident_retain_fraction: 0.25, seed: 0 }
    }
}

impl LabelNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("tpr", self.tpr),
            ("fpr", self.fpr),
            ("confident_retain_fraction", self.confident_retain_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Labels each example from two uniforms fixed by `(seed, example id)`, so
/// the set of undiscovered forget examples at a lower TPR contains the set
/// at any higher TPR.
pub fn assign_labels(examples: &[LabeledExample], spec: &LabelNoiseSpec) -> Result<Dataset> {
    spec.validate()?;
    let examples = examples
        .iter()
        .map(|e| {
            let mut rng = example_rng(spec.seed, LABEL_STREAM | e.id as u64);
            let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
            let label = match e.domain {
                Domain::Forget if u1 < spec.tpr => BatchLabel::Forget,
                Domain::Forget => BatchLabel::Unlabeled,
                Domain::Retain if u1 < spec.fpr => BatchLabel::Forget,
                Domain::Retain if u2 < spec.confident_retain_fraction => BatchLabel::Retain,
                Domain::Retain => BatchLabel::Unlabeled,
            };
            LabeledExample { label, ..e.clone() }
        })
        .collect();
    Ok(Dataset { examples })
}

/// Labeled training examples with ground truth kept alongside.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn filter(&self, keep: impl Fn(&LabeledExample) -> bool) -> Dataset {
        Dataset { examples: self.examples.iter().filter(|e| keep(e)).cloned().collect() }
    }

    /// The view a weak filter trains on: D_forget dropped.
    pub fn without_flagged(&self) -> Dataset {
        self.filter(|e| e.label != BatchLabel::Forget)
    }

    pub fn indices(&self, label: BatchLabel) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.examples[i].label == label).collect()
    }

    pub fn tokens(&self, pred: impl Fn(&LabeledExample) -> bool) -> usize {
        self.examples.iter().filter(|e| pred(e)).map(|e| e.tokens.len()).sum()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<TokenBatch> {
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| self.examples[i].tokens.as_slice()).collect();
        TokenBatch::from_sequences(&seqs)
    }

    /// `example_id,true_domain,assigned_label`.
    pub fn write_labels_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["example_id", "true_domain", "assigned_label"])?;
        for e in &self.examples {
            w.write_record([e.id.to_string().as_str(), e.domain.name(), e.label.name()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws a label-homogeneous batch of `batch_size` examples with replacement.
/// `None` when the subset is empty.
pub fn sample_batch(
    dataset: &Dataset,
    label: BatchLabel,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Option<(Vec<usize>, TokenBatch)> {
    let pool = dataset.indices(label);
    if pool.is_empty() || batch_size == 0 {
        return None;
    }
    let idx: Vec<usize> = (0..batch_size).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
    let batch = dataset.batch(&idx).ok()?;
    Some((idx, batch))
}

/// Picks a label with probability proportional to the token count of its subset.
pub fn draw_label(dataset: &Dataset, rng: &mut impl Rng) -> Option<BatchLabel> {
    let weights: Vec<(BatchLabel, usize)> =
        BatchLabel::ALL.iter().map(|&l| (l, dataset.tokens(|e| e.label == l))).collect();
    let total: usize = weights.iter().map(|w| w.1).sum();
    if total == 0 {
        return None;
    }
    let mut u = rng.gen_range(0..total);
    for (l, w) in weights {
        if u < w {
            return Some(l);
        }
        u -= w;
    }
    unreachable!()
}

/// One pass over a dataset without replacement in label-homogeneous batches.
/// Each subset is shuffled and chunked; the next batch comes from a subset
/// chosen with probability proportional to its remaining tokens.
pub fn epoch_batches(dataset: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Vec<(BatchLabel, Vec<usize>)> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut queues: Vec<(BatchLabel, Vec<Vec<usize>>, usize)> = BatchLabel::ALL
        .iter()
        .map(|&l| {
            let mut idx = dataset.indices(l);
            idx.shuffle(rng);
            let chunks: Vec<Vec<usize>> = idx.chunks(batch_size).rev().map(<[usize]>::to_vec).collect();
            let tokens = dataset.tokens(|e| e.label == l);
            (l, chunks, tokens)
        })
        .collect();
    let mut out = Vec::new();
    loop {
        let total: usize = queues.iter().map(|q| q.2).sum();
        if total == 0 {
            break;
        }
        let mut u = rng.gen_range(0..total);
        let q = queues
            .iter_mut()
            .find(|q| {
                let hit = u < q.2;
                if !hit {
                    u -= q.2;
                }
                hit
            })
            .expect("weights sum to total");
        let chunk = q.1.pop().expect("remaining tokens imply a batch");
        q.2 -= chunk.iter().map(|&i| dataset.examples[i].tokens.len()).sum::<usize>();
        out.push((q.0, chunk));
    }
    out
}

/// Byte-level tokenizer: byte `b` maps to id `b + 3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = 256 + N_SPECIAL;

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "byte" => Ok(ByteTokenizer),
            other => Err(Error::config(format!("unknown tokenizer {other:?}"))),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(|b| b as u32 + N_SPECIAL as u32).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&i| i as usize >= N_SPECIAL)
            .map(|&i| (i - N_SPECIAL as u32) as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// One example per blank-line separated block, `BOS bytes... EOS`, truncated
/// to `context_len`. Examples are UNLABELED.
pub fn ingest_text(
    path: &Path,
    domain: Domain,
    tokenizer: &ByteTokenizer,
    context_len: usize,
    first_id: usize,
) -> Result<Vec<LabeledExample>> {
    if context_len < 2 {
        return Err(Error::config("context_len must be at least 2"));
    }
    let text = fs::read_to_string(path)?;
    let normalized = text.replace("\r\n", "\n");
    Ok(normalized
        .split("\n\n")
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .enumerate()
        .map(|(i, doc)| {
            let mut tokens = vec![BOS];
            tokens.extend(tokenizer.encode(doc).into_iter().take(context_len - 2));
            tokens.push(EOS);
            LabeledExample { id: first_id + i, tokens, domain, label: BatchLabel::Unlabeled }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    spec: DataSpec,
    seed: u64,
    examples: usize,
}

/// Corpus cache: magic, u64 header length, JSON header, then per example
/// `u8 domain, u32 length, u32 tokens...` (little-endian).
pub fn write_corpus(path: &Path, spec: &DataSpec, seed: u64, examples: &[LabeledExample]) -> Result<()> {
    let header = serde_json::to_vec(&CorpusHeader { spec: spec.clone(), seed, examples: examples.len() })?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for e in examples {
        w.write_all(&[e.domain.index() as u8])?;
        w.write_all(&(e.tokens.len() as u32).to_le_bytes())?;
        for t in &e.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<(DataSpec, u64, Vec<LabeledExample>)> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CORPUS_MAGIC {
        return Err(bad("not a corpus file"));
    }
    let mut n8 = [0u8; 8];
    r.read_exact(&mut n8).map_err(|_| bad("truncated header length"))?;
    let mut header = vec![0u8; u64::from_le_bytes(n8) as usize];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let h: CorpusHeader = serde_json::from_slice(&header).map_err(|e| bad(&e.to_string()))?;
    let mut examples = Vec::with_capacity(h.examples);
    let mut n4 = [0u8; 4];
    for id in 0..h.examples {
        let mut d = [0u8; 1];
        r.read_exact(&mut d).map_err(|_| bad("truncated example"))?;
        let domain = match d[0] {
            0 => Domain::Forget,
            1 => Domain::Retain,
            _ => return Err(bad("unknown domain tag")),
        };
        r.read_exact(&mut n4).map_err(|_| bad("truncated example"))?;
        let len = u32::from_le_bytes(n4) as usize;
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut n4).map_err(|_| bad("truncated tokens"))?;
            tokens.push(u32::from_le_bytes(n4));
        }
        examples.push(LabeledExample { id, tokens, domain, label: BatchLabel::Unlabeled });
    }
    Ok((h.spec, h.seed, examples))
}

/// Everything a run needs from the data side.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub forget_grammar: DomainGrammar,
    pub retain_grammar: DomainGrammar,
    pub train: Vec<LabeledExample>,
    pub test: TestSets,
}

impl Corpus {
    pub fn generate(spec: &DataSpec, seed: u64) -> Result<Self> {
        let forget_grammar = DomainGrammar::build(spec, Domain::Forget, seed)?;
        let retain_grammar = DomainGrammar::build(spec, Domain::Retain, seed)?;
        let train = generate_corpus(&forget_grammar, &retain_grammar, spec.train_tokens_per_domain, seed);
        let test = generate_test_sets(&forget_grammar, &retain_grammar, spec.test_tokens_per_domain, seed);
        Ok(Corpus { forget_grammar, retain_grammar, train, test })
    }
}
