//! TOML run configuration. Every section is optional; command-line flags
//! are applied on top of the parsed file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use fgovd_core::composer::WeightTriplet;
use fgovd_core::encoder::{Encoder, EncoderConfig};
use fgovd_core::evaluator::dataset::{GenConfig, NoiseConfig};
use fgovd_core::evaluator::{ApConfig, EvalConfig, Mode, PairOptions};
use fgovd_core::extractor::{
    AttributeExtractor, ExtractionPrompt, Lexicon, LlmClient, LlmClientConfig, LlmExtractor, RuleBasedExtractor,
};
use fgovd_core::fitter::{FitConfig, LogitShift};
use fgovd_core::tokenizer::Flavor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random substream.
    pub seed: u64,
    pub encoder: EncoderSection,
    pub extractor: ExtractorSection,
    pub llm: LlmClientConfig,
    pub dataset: GenConfig,
    pub noise: NoiseConfig,
    pub pair: PairOptions,
    pub fit: FitSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub flavor: Flavor,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub d_ff: usize,
    /// Weight seed; the global seed when absent.
    pub seed: Option<u64>,
    /// Load weights from this checkpoint instead of drawing them.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::default();
        Self {
            flavor: c.flavor,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            seq_len: c.seq_len,
            d_ff: c.d_ff,
            seed: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Lexicon,
    Llm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub backend: Backend,
    /// `word<TAB>type` file replacing the bundled lexicon.
    pub lexicon: Option<PathBuf>,
    /// Use the lexicon when the LLM endpoint is unreachable.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub init: WeightTriplet,
    pub l2: f64,
    pub logit_scale: f64,
    pub logit_shift: LogitShift,
    pub max_halvings: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        let c = FitConfig::default();
        Self {
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            init: c.init,
            l2: c.l2,
            logit_scale: c.logit_scale,
            logit_shift: c.logit_shift,
            max_halvings: c.max_halvings,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ap: ApConfig,
    pub nms_iou: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let c = EvalConfig::default();
        Self {
            ap: c.ap,
            nms_iou: c.nms_iou,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            flavor: e.flavor,
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            seq_len: e.seq_len,
            d_ff: e.d_ff,
            seed: e.seed.unwrap_or(self.seed),
        }
    }

    pub fn build_encoder(&self) -> anyhow::Result<Encoder> {
        match &self.encoder.checkpoint {
            Some(path) => {
                let enc = Encoder::load(path).with_context(|| format!("loading encoder {}", path.display()))?;
                log::info!("loaded {} encoder {} from {}", enc.flavor(), enc.checksum(), path.display());
                Ok(enc)
            }
            None => Ok(Encoder::new(self.encoder_config())?),
        }
    }

    pub fn build_extractor(&self) -> anyhow::Result<Box<dyn AttributeExtractor>> {
        let lexicon = match &self.extractor.lexicon {
            Some(path) => Lexicon::load(path).with_context(|| format!("loading lexicon {}", path.display()))?,
            None => Lexicon::default(),
        };
        Ok(match self.extractor.backend {
            Backend::Lexicon => Box::new(RuleBasedExtractor { lexicon }),
            Backend::Llm => Box::new(LlmExtractor {
                client: LlmClient::new(self.llm.clone())?,
                prompt: ExtractionPrompt::default(),
                fallback: self.extractor.fallback.then_some(lexicon),
            }),
        })
    }

    pub fn fit_config(&self) -> FitConfig {
        let f = &self.fit;
        FitConfig {
            learning_rate: f.learning_rate,
            epochs: f.epochs,
            init: f.init,
            seed: self.seed,
            l2: f.l2,
            logit_scale: f.logit_scale,
            logit_shift: f.logit_shift,
            pair: self.pair,
            max_halvings: f.max_halvings,
        }
    }

    pub fn eval_config(&self, mode: Mode, triplet: WeightTriplet) -> EvalConfig {
        EvalConfig {
            mode,
            triplet,
            ap: self.eval.ap,
            nms_iou: self.eval.nms_iou,
            pair: self.pair,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.fit_config(), FitConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            [encoder]
            flavor = "causal"
            seq_len = 12
            [fit]
            epochs = 5
            init = { w_global = 0.9, w_attri = 0.1, bias = 0.0 }
            logit_shift = { fixed = 0.0 }
            [noise]
            sigma = 0.3
            [llm]
            endpoint_url = "http://localhost:9/x"
            timeout = 1500
            "#,
        )
        .unwrap();
        assert_eq!(cfg.encoder_config().seed, 7);
        assert_eq!(cfg.encoder_config().flavor, Flavor::Causal);
        assert_eq!(cfg.fit.epochs, 5);
        assert_eq!(cfg.fit.logit_shift, LogitShift::Fixed(0.0));
        assert_eq!(cfg.noise.sigma, Some(0.3));
        assert_eq!(cfg.llm.timeout.as_millis(), 1500);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[fit]\nepoch = 1").is_err());
    }
}
