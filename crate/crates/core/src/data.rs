//! Sequence datasets: phone-class folding, labelled-subset drawing,
//! supervised/unsupervised batch cycling, a synthetic generator and the
//! binary dataset file.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::ladder::Batch;
use crate::tensor::{Element, Rng, Tensor};

pub const DATASET_MAGIC: &[u8; 7] = b"LDRSEQ1";
pub const DATASET_VERSION: u32 = 1;

/// One utterance: `[T×D]` features and an optional label sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceExample {
    pub id: String,
    pub features: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
}

impl SequenceExample {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<SequenceExample>,
    pub class_names: Vec<String>,
    /// Free-form `key = value` provenance (feature settings, generator spec).
    pub metadata: Vec<(String, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.features.shape()[1])
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.examples.iter().all(|e| e.labels.is_some())
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Checks the dataset invariants: constant feature width, 2-D features,
    /// non-empty label sequences with indices below `K`.
    pub fn validate(&self) -> Result<()> {
        let dim = self.feature_dim();
        for e in &self.examples {
            let (t, d) = e
                .features
                .dims2()
                .map_err(|_| Error::Data(format!("{}: features are not a matrix", e.id)))?;
            if Some(d) != dim || t == 0 {
                return Err(Error::Data(format!(
                    "{}: features are {t}×{d}, expected non-empty ×{}",
                    e.id,
                    dim.unwrap_or(0)
                )));
            }
            if let Some(l) = &e.labels {
                if l.is_empty() {
                    return Err(Error::Data(format!("{}: empty label sequence", e.id)));
                }
                if let Some(&bad) = l.iter().find(|&&s| s >= self.num_classes()) {
                    return Err(Error::Data(format!(
                        "{}: label {bad} out of range for {} classes",
                        e.id,
                        self.num_classes()
                    )));
                }
            }
        }
        Ok(())
    }

    /// A dataset with the same classes and metadata holding `indices`.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// Label occurrences per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for l in self.examples.iter().filter_map(|e| e.labels.as_ref()) {
            for &s in l {
                c[s] += 1;
            }
        }
        c
    }

    /// Pads the examples at `indices` into a batch.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let seqs: Vec<(&Tensor<f32>, Option<&[usize]>)> = indices
            .iter()
            .map(|&i| {
                let e = &self.examples[i];
                (&e.features, e.labels.as_deref())
            })
            .collect();
        Batch::from_sequences(&seqs)
    }
}

/// Source-symbol to class mapping read from `source target|DROP` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldingTable {
    map: HashMap<String, Option<String>>,
    targets: Vec<String>,
}

impl FoldingTable {
    /// Parses the text form; a token starting with `#` begins a comment,
    /// so symbols such as `h#` are allowed. Target classes are kept in
    /// sorted order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        let mut targets = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let parts: Vec<&str> = raw.split_whitespace().take_while(|t| !t.starts_with('#')).collect();
            if parts.is_empty() {
                continue;
            }
            let line = parts.join(" ");
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let [src, dst] = parts[..] else {
                return Err(err(format!("expected `source target|DROP`, got `{line}`")));
            };
            let target = if dst == "DROP" {
                None
            } else {
                targets.insert(dst.to_string());
                Some(dst.to_string())
            };
            if map.insert(src.to_string(), target).is_some() {
                return Err(err(format!("symbol `{src}` mapped twice")));
            }
        }
        if targets.is_empty() {
            return Err(Error::Config {
                line: 0,
                msg: "folding table has no target classes".into(),
            });
        }
        Ok(FoldingTable {
            map,
            targets: targets.into_iter().collect(),
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Identity mapping over `symbols`.
    pub fn identity<S: AsRef<str>>(symbols: &[S]) -> Self {
        let map = symbols
            .iter()
            .map(|s| (s.as_ref().to_string(), Some(s.as_ref().to_string())))
            .collect();
        let targets: BTreeSet<String> = symbols.iter().map(|s| s.as_ref().to_string()).collect();
        FoldingTable {
            map,
            targets: targets.into_iter().collect(),
        }
    }

    /// Sorted target class names.
    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn num_sources(&self) -> usize {
        self.map.len()
    }

    /// Maps symbols to target names, removing dropped ones. Adjacent equal
    /// results are kept.
    pub fn fold<S: AsRef<str>>(&self, seq: &[S]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(seq.len());
        for s in seq {
            match self.map.get(s.as_ref()) {
                Some(Some(t)) => out.push(t.clone()),
                Some(None) => {}
                None => return Err(Error::UnknownSymbol(s.as_ref().to_string())),
            }
        }
        Ok(out)
    }

    /// Like [`fold`](Self::fold) but yields indices into [`targets`](Self::targets).
    pub fn fold_to_indices<S: AsRef<str>>(&self, seq: &[S]) -> Result<Vec<usize>> {
        self.fold(seq)?
            .iter()
            .map(|t| Ok(self.targets.binary_search(t).expect("target listed")))
            .collect()
    }
}

/// `round(fraction · n)`, at least 1.
pub fn subset_target(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Draws labelled examples uniformly without replacement until `target`
/// examples are drawn and every class occurs at least `min_count` times.
/// `target` defaults to `round(fraction · N)` over the labelled examples.
///
/// The returned examples are in draw order.
pub fn make_supervised_subset_sized(
    d: &Dataset,
    target: usize,
    min_count: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let labeled: Vec<usize> = (0..d.len()).filter(|&i| d.examples[i].labels.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Data("no labelled examples to draw from".into()));
    }
    if target == 0 || target > labeled.len() {
        return Err(Error::Argument(format!(
            "cannot draw {target} of {} labelled examples",
            labeled.len()
        )));
    }
    let available = d.class_counts();
    if let Some((k, &n)) = available.iter().enumerate().find(|(_, &n)| n < min_count) {
        return Err(Error::InfeasibleSubset {
            class: d.class_names[k].clone(),
            available: n,
            min_count,
        });
    }
    let mut order = labeled;
    rng.shuffle(&mut order);
    let mut counts = vec![0usize; d.num_classes()];
    let mut short = counts.iter().filter(|&&c| c < min_count).count();
    let mut taken = 0;
    for &i in &order {
        if taken >= target && short == 0 {
            break;
        }
        for &s in d.examples[i].labels.as_ref().expect("labelled") {
            counts[s] += 1;
            if counts[s] == min_count {
                short -= 1;
            }
        }
        taken += 1;
    }
    Ok(d.select(&order[..taken]))
}

/// [`make_supervised_subset_sized`] with `target = round(fraction · N)`.
pub fn make_supervised_subset(d: &Dataset, fraction: f64, min_count: usize, rng: &mut Rng) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("label fraction must be in (0, 1], got {fraction}")));
    }
    let n = d.examples.iter().filter(|e| e.labels.is_some()).count();
    make_supervised_subset_sized(d, subset_target(n, fraction), min_count, rng)
}

/// Example indices for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Pairs every unsupervised batch with a supervised batch of the same size,
/// repeating the supervised set as often as needed.
///
/// An epoch is one shuffled pass over the unsupervised set. The supervised
/// set is read from a shuffled order that is reshuffled whenever it wraps;
/// the position carries over between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct CyclePair {
    sup_len: usize,
    unsup_len: usize,
    batch_size: usize,
    sup_order: Vec<usize>,
    sup_pos: usize,
}

impl CyclePair {
    pub fn new(sup_len: usize, unsup_len: usize, batch_size: usize, rng: &mut Rng) -> Result<Self> {
        if sup_len == 0 || unsup_len == 0 {
            return Err(Error::Data("batch cycling needs non-empty supervised and unsupervised sets".into()));
        }
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        let mut sup_order: Vec<usize> = (0..sup_len).collect();
        rng.shuffle(&mut sup_order);
        Ok(CyclePair {
            sup_len,
            unsup_len,
            batch_size,
            sup_order,
            sup_pos: 0,
        })
    }

    /// `ceil(|U| / batch_size)`.
    pub fn steps_per_epoch(&self) -> usize {
        self.unsup_len.div_ceil(self.batch_size)
    }

    fn next_sup(&mut self, rng: &mut Rng) -> usize {
        if self.sup_pos == self.sup_len {
            rng.shuffle(&mut self.sup_order);
            self.sup_pos = 0;
        }
        self.sup_pos += 1;
        self.sup_order[self.sup_pos - 1]
    }

    pub fn epoch(&mut self, rng: &mut Rng) -> Vec<StepIndices> {
        let mut unsup: Vec<usize> = (0..self.unsup_len).collect();
        rng.shuffle(&mut unsup);
        unsup
            .chunks(self.batch_size)
            .map(|chunk| StepIndices {
                labeled: (0..chunk.len()).map(|_| self.next_sup(rng)).collect(),
                unlabeled: chunk.to_vec(),
            })
            .collect()
    }
}

/// Starts batch cycling over two datasets.
pub fn cycle_pair(supervised: &Dataset, unsupervised: &Dataset, batch_size: usize, rng: &mut Rng) -> Result<CyclePair> {
    CyclePair::new(supervised.len(), unsupervised.len(), batch_size, rng)
}

/// Synthetic corpus settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 8,
            sequences: 2000,
            min_len: 20,
            max_len: 40,
            dim: 39,
            noise: 1.0,
            seed: 0,
        }
    }
}

pub const MIN_RUN: usize = 3;
pub const MAX_RUN: usize = 8;

/// A synthetic corpus together with its generating prototypes and frame
/// alignments.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    /// `[K×dim]` class prototypes.
    pub prototypes: Tensor<f64>,
    pub frame_labels: Vec<Vec<usize>>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.min_len < MIN_RUN || self.min_len > self.max_len {
            return Err(Error::Argument(format!(
                "sequence length range {}..={} must start at {MIN_RUN} or more",
                self.min_len, self.max_len
            )));
        }
        if self.dim == 0 || !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Argument(format!("dim {} noise {}", self.dim, self.noise)));
        }
        Ok(())
    }

    /// Each sequence is a random label string, neighbours always distinct,
    /// rendered as runs of 3–8 frames of `prototype + noise·N(0, 1)`.
    pub fn generate(&self) -> Result<SynthCorpus> {
        self.validate()?;
        let mut rng = Rng::new(self.seed);
        let prototypes: Tensor<f64> = rng.gaussian([self.classes, self.dim], 1.0)?;
        let mut examples = Vec::with_capacity(self.sequences);
        let mut frame_labels = Vec::with_capacity(self.sequences);
        for i in 0..self.sequences {
            let len = rng.range_inclusive(self.min_len, self.max_len);
            let mut labels: Vec<usize> = Vec::new();
            let mut frames: Vec<usize> = Vec::with_capacity(len);
            while frames.len() < len {
                let rem = len - frames.len();
                // Leave at least MIN_RUN frames for the next run.
                let run = if rem <= MAX_RUN {
                    rem
                } else {
                    rng.range_inclusive(MIN_RUN, MAX_RUN.min(rem - MIN_RUN))
                };
                let sym = match labels.last() {
                    Some(&prev) => (prev + 1 + rng.below(self.classes - 1)) % self.classes,
                    None => rng.below(self.classes),
                };
                labels.push(sym);
                frames.extend(std::iter::repeat_n(sym, run));
            }
            let mut data = Vec::with_capacity(len * self.dim);
            for &c in &frames {
                for &p in prototypes.row(c) {
                    let n = if self.noise > 0.0 { self.noise * rng.normal() } else { 0.0 };
                    data.push((p + n) as f32);
                }
            }
            examples.push(SequenceExample {
                id: format!("synth-{i:05}"),
                features: Tensor::new([len, self.dim], data)?,
                labels: Some(labels),
            });
            frame_labels.push(frames);
        }
        let dataset = Dataset {
            examples,
            class_names: (0..self.classes).map(|k| format!("c{k}")).collect(),
            metadata: vec![
                ("synth.classes".into(), self.classes.to_string()),
                ("synth.sequences".into(), self.sequences.to_string()),
                ("synth.len_range".into(), format!("{}..={}", self.min_len, self.max_len)),
                ("synth.dim".into(), self.dim.to_string()),
                ("synth.noise".into(), self.noise.to_string()),
                ("synth.seed".into(), self.seed.to_string()),
            ],
        };
        Ok(SynthCorpus {
            dataset,
            prototypes,
            frame_labels,
        })
    }
}

/// Deterministic synthetic dataset.
pub fn synth_dataset(
    k_classes: usize,
    n_sequences: usize,
    len_range: (usize, usize),
    proto_dim: usize,
    noise_level: f64,
    seed: u64,
) -> Result<Dataset> {
    SynthSpec {
        classes: k_classes,
        sequences: n_sequences,
        min_len: len_range.0,
        max_len: len_range.1,
        dim: proto_dim,
        noise: noise_level,
        seed,
    }
    .generate()
    .map(|c| c.dataset)
}

/// Serialises a dataset. Layout after magic and version: class names,
/// metadata pairs, feature width, example count; per example the id, frame
/// count, a label flag with optional labels (`u32` each), then raw `f32`
/// features.
pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    d.validate()?;
    let dim = d.feature_dim().unwrap_or(0);
    let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
    w.len_prefix(d.class_names.len());
    for c in &d.class_names {
        w.str(c);
    }
    w.len_prefix(d.metadata.len());
    for (k, v) in &d.metadata {
        w.str(k);
        w.str(v);
    }
    w.u64(dim as u64);
    w.len_prefix(d.examples.len());
    for e in &d.examples {
        w.str(&e.id);
        w.u64(e.frames() as u64);
        match &e.labels {
            Some(l) => {
                w.u8(1);
                w.len_prefix(l.len());
                for &s in l {
                    w.u32(s as u32);
                }
            }
            None => w.u8(0),
        }
        let buf = w.buffer();
        for &v in e.features.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION, "dataset")?;
    let n_classes = r.len_prefix(8)?;
    let class_names = (0..n_classes).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let n_meta = r.len_prefix(16)?;
    let metadata = (0..n_meta)
        .map(|_| Ok((r.str()?, r.str()?)))
        .collect::<Result<Vec<_>>>()?;
    let dim = r.u64()? as usize;
    let n = r.len_prefix(17)?;
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.str()?;
        let t = r.u64()? as usize;
        let labels = match r.u8()? {
            0 => None,
            1 => {
                let l = r.len_prefix(4)?;
                Some((0..l).map(|_| r.u32().map(|s| s as usize)).collect::<Result<Vec<_>>>()?)
            }
            f => return Err(Error::Format(format!("bad label flag {f}"))),
        };
        let count = t
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("feature size overflow".into()))?;
        let raw = r.bytes(count.checked_mul(4).ok_or_else(|| Error::Format("feature size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        examples.push(SequenceExample {
            id,
            features: Tensor::new([t, dim], data)?,
            labels,
        });
    }
    r.finish()?;
    let d = Dataset {
        examples,
        class_names,
        metadata,
    };
    d.validate()?;
    Ok(d)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_dataset(d)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&read_file(path.as_ref())?)
}
