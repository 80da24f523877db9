//! Adam, the semi-supervised training loop with early stopping, evaluation
//! and checkpoint files.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::config::RunConfig;
use crate::ctc::{best_path_decode, levenshtein};
use crate::data::{make_supervised_subset, make_supervised_subset_sized, CyclePair, Dataset};
use crate::error::{Error, Result};
use crate::ladder::{encode_clean, semi_supervised_loss, LadderConfig, LadderParams};
use crate::tensor::{DType, Element, Gradients, Graph, ParamSet, Rng, RngState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LDRCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "epoch,c_sup,c_dae,total,valid_per,seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, shaped like the parameters, and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v = T::of(v.f64() * s);
            }
        }
    }
    norm
}

/// One bias-corrected Adam update. Arithmetic is done in `f64` and stored
/// back in `T`. Nothing is modified when a gradient is not finite.
pub fn adam_step<T: Element>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::Argument("parameters, gradients and moments differ in layout".into()));
    }
    for (name, g) in grads.iter() {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            let gi = gi.f64();
            let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p[i] = T::of(p[i].f64() - step);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub precision: DType,
    /// Write measured wall time to the metrics file; otherwise the column
    /// is 0 and the file is byte-reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 16,
            min_epochs: 100,
            max_epochs: 500,
            patience: 10,
            seed: 0,
            clip_norm: None,
            precision: DType::F32,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", a.lr));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad(format!("Adam betas must be in [0, 1), got {} and {}", a.beta1, a.beta2));
        }
        if !(a.eps > 0.0) {
            return bad(format!("Adam eps must be positive, got {}", a.eps));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.max_epochs == 0 || self.min_epochs > self.max_epochs {
            return bad(format!(
                "need 0 < min_epochs <= max_epochs, got {} and {}",
                self.min_epochs, self.max_epochs
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// One row of the metrics file. Losses are means over the epoch's steps.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub c_sup: f64,
    pub c_dae: f64,
    pub total: f64,
    pub valid_per: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.c_sup, self.c_dae, self.total, self.valid_per, self.seconds
        )
    }
}

/// Result of a clean-pass evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per: f64,
    /// Edit distance per sequence, in dataset order.
    pub distances: Vec<usize>,
    pub hypotheses: Vec<Vec<usize>>,
    pub reference_length: usize,
}

/// Clean encoder pass, best-path decoding, PER.
pub fn evaluate<T: Element>(
    cfg: &LadderConfig,
    params: &ParamSet<T>,
    d: &Dataset,
    batch_size: usize,
) -> Result<Evaluation> {
    if d.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if let Some(e) = d.examples.iter().find(|e| e.labels.is_none()) {
        return Err(Error::Data(format!("evaluation example `{}` has no labels", e.id)));
    }
    let indices: Vec<usize> = (0..d.len()).collect();
    let mut hypotheses = Vec::with_capacity(d.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = d.batch::<T>(chunk)?;
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, params, cfg)?;
        let logits = encode_clean(&mut g, &p, cfg, &batch)?;
        let c = cfg.outputs();
        for (b, &len) in batch.lengths.iter().enumerate() {
            let mut seq = Vec::with_capacity(len * c);
            for &node in &logits[..len] {
                seq.extend_from_slice(g.value(node).row(b));
            }
            hypotheses.push(best_path_decode(&Tensor::new([len, c], seq)?)?);
        }
    }
    let refs = d.examples.iter().map(|e| e.labels.as_deref().unwrap_or(&[]));
    let distances: Vec<usize> = refs.clone().zip(&hypotheses).map(|(r, h)| levenshtein(r, h)).collect();
    let reference_length: usize = refs.map(<[usize]>::len).sum();
    if reference_length == 0 {
        return Err(Error::Data("evaluation references are all empty".into()));
    }
    Ok(Evaluation {
        per: distances.iter().sum::<usize>() as f64 / reference_length as f64,
        distances,
        hypotheses,
        reference_length,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element> {
    pub config: RunConfig,
    pub params: ParamSet<T>,
    pub adam: AdamState<T>,
    pub rng: RngState,
    pub epoch: usize,
    pub best_per: f64,
}

fn write_tensor_data<T: Element>(w: &mut Writer, t: &Tensor<T>) {
    let buf = w.buffer();
    for &v in t.data() {
        v.put_le(buf);
    }
}

fn read_tensor_data<T: Element>(r: &mut Reader, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let size = std::mem::size_of::<T>();
    let raw = r.bytes(n.checked_mul(size).ok_or_else(|| Error::Format("tensor size overflow".into()))?)?;
    Tensor::new(shape, raw.chunks_exact(size).map(T::get_le).collect())
}

impl<T: Element> Checkpoint<T> {
    /// Layout: dtype tag, config text, epoch, best PER, parameters (name,
    /// shape, data), Adam step and moments, rng state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.u8(T::DTYPE.tag());
        w.str(&self.config.to_text());
        w.u64(self.epoch as u64);
        w.f64(self.best_per);
        w.len_prefix(self.params.len());
        for (name, t) in self.params.iter() {
            w.str(name);
            w.len_prefix(t.shape().len());
            for &d in t.shape() {
                w.u64(d as u64);
            }
            write_tensor_data(&mut w, t);
        }
        w.u64(self.adam.t);
        for set in [&self.adam.m, &self.adam.v] {
            for (_, t) in set.iter() {
                write_tensor_data(&mut w, t);
            }
        }
        w.buffer().extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        match self.rng.spare {
            Some(s) => {
                w.u8(1);
                w.f64(s);
            }
            None => w.u8(0),
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let tag = r.u8()?;
        if tag != T::DTYPE.tag() {
            let found = DType::from_tag(tag).map_or("unknown", DType::name);
            return Err(Error::Format(format!(
                "checkpoint stores {found} parameters, expected {}",
                T::DTYPE.name()
            )));
        }
        let config = RunConfig::parse(&r.str()?)?;
        let epoch = r.u64()? as usize;
        let best_per = r.f64()?;
        let n = r.len_prefix(16)?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let name = r.str()?;
            let ndim = r.len_prefix(8)?;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            params.insert(name, read_tensor_data(&mut r, &shape)?)?;
        }
        let t = r.u64()?;
        let mut moments = [params.zeros_like(), params.zeros_like()];
        for set in &mut moments {
            for (_, m) in set.iter_mut() {
                *m = read_tensor_data(&mut r, m.shape())?;
            }
        }
        let [m, v] = moments;
        let seed: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let spare = match r.u8()? {
            0 => None,
            1 => Some(r.f64()?),
            f => return Err(Error::Format(format!("bad rng flag {f}"))),
        };
        r.finish()?;
        let expected = config.model.init_params::<T>(&mut Rng::new(0))?;
        if !expected.same_layout(&params) {
            return Err(Error::Format("checkpoint parameters do not match its model config".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState { m, v, t },
            rng: RngState {
                seed,
                stream,
                word_pos,
                spare,
            },
            epoch,
            best_per,
        })
    }

    pub fn evaluate(&self, d: &Dataset) -> Result<Evaluation> {
        evaluate(&self.config.model, &self.params, d, self.config.train.batch_size)
    }
}

pub fn save_checkpoint<T: Element>(c: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &c.to_bytes())
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&read_file(path.as_ref())?)
}

/// Element type stored in a checkpoint file, after the usual integrity
/// checks.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<DType> {
    let bytes = read_file(path.as_ref())?;
    let tag = Reader::open(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?.u8()?;
    DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))
}

/// Generators for subset selection and for training, both derived from the
/// run seed.
fn run_rngs(seed: u64) -> (Rng, Rng) {
    let mut root = Rng::new(seed);
    let subset = root.fork();
    (subset, root.fork())
}

/// Supervised subset of `train` chosen by `data.label_count` or
/// `data.label_fraction`.
pub fn supervised_subset(cfg: &RunConfig, train: &Dataset) -> Result<Dataset> {
    let (mut rng, _) = run_rngs(cfg.train.seed);
    match cfg.data.label_count {
        Some(n) => make_supervised_subset_sized(train, n, cfg.data.min_count, &mut rng),
        None => make_supervised_subset(train, cfg.data.label_fraction, cfg.data.min_count, &mut rng),
    }
}

fn check_dataset(cfg: &LadderConfig, d: &Dataset, what: &str) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Data(format!("{what} set is empty")));
    }
    if let Some(dim) = d.feature_dim() {
        if dim != cfg.input_dim {
            return Err(Error::Data(format!(
                "{what} features have width {dim}, model expects {}",
                cfg.input_dim
            )));
        }
    }
    if d.num_classes() != cfg.num_classes {
        return Err(Error::Data(format!(
            "{what} set has {} classes, model expects {}",
            d.num_classes(),
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Training state stepped one epoch at a time.
pub struct Trainer<'a, T: Element> {
    cfg: RunConfig,
    sup: &'a Dataset,
    unsup: &'a Dataset,
    valid: &'a Dataset,
    params: ParamSet<T>,
    adam: AdamState<T>,
    rng: Rng,
    cycle: CyclePair,
    metrics: Vec<EpochMetrics>,
    best: Option<Checkpoint<T>>,
    since_best: usize,
}

impl<'a, T: Element> Trainer<'a, T> {
    /// `valid` defaults to the supervised set.
    pub fn new(cfg: &RunConfig, sup: &'a Dataset, unsup: &'a Dataset, valid: Option<&'a Dataset>) -> Result<Self> {
        cfg.validate()?;
        if T::DTYPE != cfg.train.precision {
            return Err(Error::Argument(format!(
                "config asks for {} training, trainer built for {}",
                cfg.train.precision.name(),
                T::DTYPE.name()
            )));
        }
        let valid = valid.unwrap_or(sup);
        check_dataset(&cfg.model, sup, "supervised")?;
        check_dataset(&cfg.model, unsup, "unsupervised")?;
        check_dataset(&cfg.model, valid, "validation")?;
        let (_, mut rng) = run_rngs(cfg.train.seed);
        let params = cfg.model.init_params::<T>(&mut rng)?;
        let cycle = CyclePair::new(sup.len(), unsup.len(), cfg.train.batch_size, &mut rng)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            sup,
            unsup,
            valid,
            adam: AdamState::new(&params),
            params,
            rng,
            cycle,
            metrics: Vec::new(),
            best: None,
            since_best: 0,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn best(&self) -> Option<&Checkpoint<T>> {
        self.best.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.state(),
            epoch: self.metrics.len(),
            best_per: self.best.as_ref().map_or(f64::INFINITY, |b| b.best_per),
        }
    }

    /// Early stopping: at least `min_epochs`, then stop once `patience`
    /// epochs pass without a new best; never more than `max_epochs`.
    pub fn finished(&self) -> bool {
        let t = &self.cfg.train;
        let e = self.metrics.len();
        e >= t.max_epochs || (e >= t.min_epochs && self.since_best >= t.patience)
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let model = &self.cfg.model;
        let steps = self.cycle.epoch(&mut self.rng);
        let (mut c_sup, mut c_dae, mut total) = (0.0, 0.0, 0.0);
        for step in &steps {
            let labeled = self.sup.batch::<T>(&step.labeled)?;
            let unlabeled = match model.has_decoder() {
                true => Some(self.unsup.batch::<T>(&step.unlabeled)?),
                false => None,
            };
            let mut g = Graph::new();
            let p = LadderParams::bind(&mut g, &self.params, model)?;
            let loss = semi_supervised_loss(&mut g, &p, model, Some(&labeled), unlabeled.as_ref(), &mut self.rng)?;
            let value = g.value(loss.total).item().f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            c_sup += g.value(loss.c_sup).item().f64();
            c_dae += g.value(loss.c_dae).item().f64();
            total += value;
            let mut grads = g.backward(loss.total)?;
            if let Some(c) = self.cfg.train.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut self.params, &grads, &mut self.adam, &self.cfg.train.adam)?;
        }
        let n = steps.len() as f64;
        let eval = evaluate(model, &self.params, self.valid, self.cfg.train.batch_size)?;
        let m = EpochMetrics {
            epoch: self.metrics.len() + 1,
            c_sup: c_sup / n,
            c_dae: c_dae / n,
            total: total / n,
            valid_per: eval.per,
            seconds: if self.cfg.train.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        self.metrics.push(m.clone());
        if self.best.as_ref().is_none_or(|b| eval.per < b.best_per) {
            self.since_best = 0;
            let mut c = self.checkpoint();
            c.best_per = eval.per;
            self.best = Some(c);
        } else {
            self.since_best += 1;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Element> {
    /// Snapshot after the epoch with the lowest validation PER.
    pub best: Checkpoint<T>,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains until early stopping. With `out_dir`, the metrics file is written
/// row by row and the best checkpoint is saved whenever it changes.
pub fn train<T: Element>(
    cfg: &RunConfig,
    sup: &Dataset,
    unsup: &Dataset,
    valid: Option<&Dataset>,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(cfg, sup, unsup, valid)?;
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    while !trainer.finished() {
        let m = trainer.run_epoch()?;
        if let (Some((f, path)), Some(dir)) = (csv.as_mut(), out_dir) {
            writeln!(f, "{}", m.csv_row())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
            if trainer.since_best == 0 {
                save_checkpoint(trainer.best().expect("best set"), dir.join(CHECKPOINT_FILE))?;
            }
        }
        on_epoch(&m);
    }
    Ok(TrainOutcome {
        best: trainer.best.expect("at least one epoch"),
        metrics: trainer.metrics,
    })
}

/// Reads a metrics file back.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path: PathBuf = path.as_ref().into();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{}: missing metrics header", path.display())));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad metrics row `{l}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                c_sup: num(1)?,
                c_dae: num(2)?,
                total: num(3)?,
                valid_per: num(4)?,
                seconds: num(5)?,
            })
        })
        .collect()
}
