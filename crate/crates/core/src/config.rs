//! Run configuration in a line-based `section.key = value` text format.
//!
//! `#` starts a comment. Every key is optional and falls back to its
//! default; unknown or repeated keys are errors that name the line. An empty
//! value means "unset" for optional keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ladder::{DecoderKind, LadderConfig};
use crate::layers::NoiseVariant;
use crate::tensor::DType;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    /// Fraction of labelled training sequences given to the supervised cost.
    pub label_fraction: f64,
    /// Explicit supervised-subset size; overrides `label_fraction`.
    pub label_count: Option<usize>,
    /// Minimum occurrences of every class in the supervised subset.
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            valid: None,
            label_fraction: 1.0,
            label_count: None,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: LadderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

const KEYS: &[&str] = &[
    "model.input_dim",
    "model.hidden_dim",
    "model.classes",
    "model.decoder",
    "model.noise",
    "model.sigma",
    "model.sigma_input",
    "model.sigma_hidden",
    "model.sigma_output",
    "model.lambdas",
    "model.combinator_hidden",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.batch_size",
    "train.min_epochs",
    "train.max_epochs",
    "train.patience",
    "train.seed",
    "train.clip_norm",
    "train.precision",
    "train.record_time",
    "data.train",
    "data.valid",
    "data.label_fraction",
    "data.label_count",
    "data.min_count",
];

fn parse_num<N: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("invalid {what} `{v}`"))
}

fn parse_opt<N: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<Option<N>, String> {
    if v.is_empty() {
        Ok(None)
    } else {
        parse_num(v, what).map(Some)
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn opt_str<N: ToString>(v: &Option<N>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: line_no, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(err(format!("unknown key `{key}`")));
            };
            if seen.contains(&known) {
                return Err(err(format!("key `{key}` given twice")));
            }
            seen.push(known);
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.input_dim" => m.input_dim = parse_num(v, "size")?,
            "model.hidden_dim" => m.hidden_dim = parse_num(v, "size")?,
            "model.classes" => m.num_classes = parse_num(v, "class count")?,
            "model.decoder" => {
                m.decoder = DecoderKind::parse(v).ok_or_else(|| format!("decoder must be ND, RD or FFD, got `{v}`"))?
            }
            "model.noise" => {
                m.noise.variant = NoiseVariant::parse(v).ok_or_else(|| format!("noise must be FFN or RN, got `{v}`"))?
            }
            "model.sigma" => m.noise.sigma = parse_num(v, "noise std")?,
            "model.sigma_input" => m.sigma_overrides[0] = parse_opt(v, "noise std")?,
            "model.sigma_hidden" => m.sigma_overrides[1] = parse_opt(v, "noise std")?,
            "model.sigma_output" => m.sigma_overrides[2] = parse_opt(v, "noise std")?,
            "model.lambdas" => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| parse_num(p.trim(), "cost weight"))
                    .collect::<std::result::Result<_, _>>()?;
                m.lambdas = parts
                    .try_into()
                    .map_err(|p: Vec<f64>| format!("expected 3 cost weights, got {}", p.len()))?;
            }
            "model.combinator_hidden" => m.combinator_hidden = parse_num(v, "size")?,
            "train.lr" => t.adam.lr = parse_num(v, "learning rate")?,
            "train.beta1" => t.adam.beta1 = parse_num(v, "beta1")?,
            "train.beta2" => t.adam.beta2 = parse_num(v, "beta2")?,
            "train.eps" => t.adam.eps = parse_num(v, "eps")?,
            "train.batch_size" => t.batch_size = parse_num(v, "batch size")?,
            "train.min_epochs" => t.min_epochs = parse_num(v, "epoch count")?,
            "train.max_epochs" => t.max_epochs = parse_num(v, "epoch count")?,
            "train.patience" => t.patience = parse_num(v, "patience")?,
            "train.seed" => t.seed = parse_num(v, "seed")?,
            "train.clip_norm" => t.clip_norm = parse_opt(v, "clip norm")?,
            "train.precision" => {
                t.precision = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(format!("precision must be f32 or f64, got `{v}`")),
                }
            }
            "train.record_time" => t.record_time = parse_bool(v)?,
            "data.train" => d.train = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.valid" => d.valid = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.label_fraction" => d.label_fraction = parse_num(v, "fraction")?,
            "data.label_count" => d.label_count = parse_opt(v, "count")?,
            "data.min_count" => d.min_count = parse_num(v, "count")?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::Config { line: 0, msg };
        self.model.validate().map_err(|e| err(e.to_string()))?;
        self.train.validate().map_err(|e| err(e.to_string()))?;
        let f = self.data.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(err(format!("data.label_fraction must be in (0, 1], got {f}")));
        }
        if self.data.label_count == Some(0) {
            return Err(err("data.label_count must be positive".into()));
        }
        Ok(())
    }

    /// Full text form; every key is written, so `parse(to_text())` is the
    /// identity.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<String> = vec![
            m.input_dim.to_string(),
            m.hidden_dim.to_string(),
            m.num_classes.to_string(),
            m.decoder.name().into(),
            m.noise.variant.name().into(),
            m.noise.sigma.to_string(),
            opt_str(&m.sigma_overrides[0]),
            opt_str(&m.sigma_overrides[1]),
            opt_str(&m.sigma_overrides[2]),
            m.lambdas.iter().map(f64::to_string).collect::<Vec<_>>().join(", "),
            m.combinator_hidden.to_string(),
            t.adam.lr.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.eps.to_string(),
            t.batch_size.to_string(),
            t.min_epochs.to_string(),
            t.max_epochs.to_string(),
            t.patience.to_string(),
            t.seed.to_string(),
            opt_str(&t.clip_norm),
            t.precision.name().into(),
            t.record_time.to_string(),
            path(&d.train),
            path(&d.valid),
            d.label_fraction.to_string(),
            opt_str(&d.label_count),
            d.min_count.to_string(),
        ];
        let mut out = String::new();
        let mut section = "";
        for (k, v) in KEYS.iter().zip(values) {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
        assert!(c.to_text().contains("model.lambdas = 1000, 10, 0.1\n"));
        assert!(c.to_text().contains("train.lr = 0.002\n"));
    }

    #[test]
    fn values_and_comments() {
        let c = RunConfig::parse(
            "# sweep cell\nmodel.sigma = 0.5   # global\nmodel.decoder = ffd\nmodel.sigma_hidden = 0.1\n\
             model.lambdas = 1,2,3\ntrain.clip_norm = 5\ndata.label_count = 940\ndata.train = a b.seq\n",
        )
        .unwrap();
        assert_eq!(c.model.noise.sigma, 0.5);
        assert_eq!(c.model.decoder, DecoderKind::FeedForward);
        assert_eq!(c.model.sigma(1), 0.1);
        assert_eq!(c.model.sigma(0), 0.5);
        assert_eq!(c.model.lambdas, [1.0, 2.0, 3.0]);
        assert_eq!(c.train.clip_norm, Some(5.0));
        assert_eq!(c.data.label_count, Some(940));
        assert_eq!(c.data.train, Some(PathBuf::from("a b.seq")));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("model.sigma = 0.1\nmodel.sigmaa = 3\n", 2),
            ("\n\nmodel.decoder = XD\n", 3),
            ("train.seed = 1\ntrain.seed = 2\n", 2),
            ("model.lambdas = 1, 2\n", 1),
            ("no equals sign\n", 1),
            ("train.record_time = yes\n", 1),
        ];
        for (text, line) in cases {
            match RunConfig::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn semantic_errors() {
        assert!(RunConfig::parse("model.decoder = ND\n").is_err());
        RunConfig::parse("model.decoder = ND\nmodel.lambdas = 0,0,0\n").unwrap();
        assert!(RunConfig::parse("data.label_fraction = 0\n").is_err());
        assert!(RunConfig::parse("model.sigma = -1\n").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_configs_round_trip(
            sigma in 0.0f64..2.0,
            lr in 1e-5f64..1.0,
            hidden in 1usize..300,
            seed in any::<u64>(),
            frac in 0.01f64..1.0,
            over in proptest::option::of(0.0f64..1.0),
            decoder in 0usize..2,
        ) {
            let mut c = RunConfig::default();
            c.model.noise.sigma = sigma;
            c.model.hidden_dim = hidden;
            c.model.sigma_overrides[2] = over;
            c.model.decoder = [DecoderKind::Recurrent, DecoderKind::FeedForward][decoder];
            c.train.adam.lr = lr;
            c.train.seed = seed;
            c.data.label_fraction = frac;
            prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
