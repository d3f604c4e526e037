use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{TaggerConfig, TaggerMode};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::learner::LossNorm;
use crate::numcore::AdamWConfig;
use crate::spankl::{DecodeMode, SpanKlConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    SpanKl,
    AddNer,
    ExtendNer,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SpanKl => "spankl",
            ModelKind::AddNer => "addner",
            ModelKind::ExtendNer => "extendner",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "spankl" => Ok(ModelKind::SpanKl),
            "addner" => Ok(ModelKind::AddNer),
            "extendner" => Ok(ModelKind::ExtendNer),
            _ => Err(format!("unknown model `{s}` (expected spankl|addner|extendner)")),
        }
    }
}

/// Training configuration. Read from flat TOML; every key is optional and
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seeds: Vec<u64>,
    /// Epochs per step.
    pub epochs: usize,
    /// Sentences per optimizer update.
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    /// Weight of the supervised term.
    pub alpha: f64,
    /// Weight of the distillation term.
    pub beta: f64,
    /// Decision threshold on span probabilities (SpanKL only).
    pub threshold: f64,
    pub decode: DecodeMode,
    pub d_model: usize,
    pub heads: usize,
    /// Longest sentence, in tokens, the encoder accepts.
    pub max_len: usize,
    pub dropout: f64,
    /// Width of the per-type start/end projections (SpanKL only).
    pub d_out: usize,
    /// Padding constant for ExtendNER teacher distributions.
    pub pad_constant: f64,
    pub loss_norm: LossNorm,
    /// Keep encoder weights fixed from step 2 on.
    pub freeze_encoder: bool,
    pub warmup_cosine: bool,
    /// Warmup length in optimizer updates when `warmup_cosine` is on.
    pub warmup_steps: u64,
    /// Write per-sentence probability matrices next to predictions.
    pub dump_matrices: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let enc = EncoderConfig::default();
        RunConfig {
            model: ModelKind::SpanKl,
            seeds: vec![0],
            epochs: 20,
            batch_size: 8,
            lr_encoder: opt.lr_encoder,
            lr_head: opt.lr_head,
            weight_decay: opt.weight_decay,
            alpha: 1.0,
            beta: 1.0,
            threshold: 0.5,
            decode: DecodeMode::Flat,
            d_model: enc.d_model,
            heads: enc.heads,
            max_len: enc.max_len,
            dropout: enc.dropout,
            d_out: 50,
            pad_constant: 1e-4,
            loss_norm: LossNorm::Batch,
            freeze_encoder: false,
            warmup_cosine: false,
            warmup_steps: 200,
            dump_matrices: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// Every violated constraint, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.seeds.is_empty() {
            e.push("seeds: at least one seed is required".into());
        }
        if self.epochs < 1 {
            e.push("epochs: must be >= 1".into());
        }
        if self.batch_size < 1 {
            e.push("batch_size: must be >= 1".into());
        }
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_head", self.lr_head), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                e.push(format!("{name}: {v} must be finite and >= 0"));
            }
        }
        if self.lr_head == 0.0 {
            e.push("lr_head: must be > 0".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                e.push(format!("{name}: {v} must be finite and >= 0"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            e.push(format!("threshold: {} must lie in (0, 1)", self.threshold));
        }
        for m in self.encoder().validate() {
            e.push(format!("encoder: {m}"));
        }
        if self.d_out < 1 {
            e.push("d_out: must be >= 1".into());
        }
        if !(self.pad_constant > 0.0 && self.pad_constant.is_finite()) {
            e.push(format!("pad_constant: {} must be > 0", self.pad_constant));
        }
        if self.warmup_cosine && self.warmup_steps == 0 {
            e.push("warmup_steps: must be >= 1 when warmup_cosine is on".into());
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }

    pub fn spankl(&self) -> SpanKlConfig {
        SpanKlConfig {
            encoder: self.encoder(),
            d_out: self.d_out,
            threshold: self.threshold,
            decode: self.decode,
        }
    }

    pub fn tagger(&self, mode: TaggerMode) -> TaggerConfig {
        TaggerConfig {
            encoder: self.encoder(),
            mode,
            pad_constant: self.pad_constant,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr_encoder: self.lr_encoder,
            lr_head: self.lr_head,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_and_roundtrip() {
        let c = RunConfig::from_toml("model = \"extendner\"\nepochs = 3\nbeta = 0.0\ndecode = \"nested\"\n").unwrap();
        assert_eq!(c.model, ModelKind::ExtendNer);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.decode, DecodeMode::Nested);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_toml("epoch = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn every_bad_field_is_listed() {
        let e = RunConfig::from_toml("epochs = 0\nbatch_size = 0\nthreshold = 1.5\nheads = 3\n").unwrap_err();
        match e {
            Error::Config(v) => {
                assert_eq!(v.len(), 4, "{v:?}");
                assert!(v[0].starts_with("epochs"));
                assert!(v[1].starts_with("batch_size"));
            }
            other => panic!("{other:?}"),
        }
    }
}
