use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moa::Routing;

/// Where mixture modules are inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sites {
    Decoder,
    Predictors,
    Both,
}

impl Sites {
    pub fn decoder(self) -> bool {
        matches!(self, Sites::Decoder | Sites::Both)
    }

    pub fn predictors(self) -> bool {
        matches!(self, Sites::Predictors | Sites::Both)
    }
}

/// Mixture-of-adapters settings. `top_k = None` means dense routing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoaConfig {
    pub n_adapters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    pub bottleneck: usize,
    pub sites: Sites,
}

impl MoaConfig {
    pub fn routing(&self) -> Routing {
        match self.top_k {
            Some(k) => Routing::Sparse { k },
            None => Routing::Dense,
        }
    }

    /// Eight adapters, top-3 routing.
    pub fn sparse(bottleneck: usize) -> Self {
        Self {
            n_adapters: 8,
            top_k: Some(3),
            bottleneck,
            sites: Sites::Both,
        }
    }

    /// Three adapters, all active.
    pub fn dense(bottleneck: usize) -> Self {
        Self {
            n_adapters: 3,
            top_k: None,
            bottleneck,
            sites: Sites::Both,
        }
    }
}

/// Desk-scale adapter bottleneck for the 32-wide model.
pub const DESK_BOTTLENECK: usize = 2;

fn default_vocab() -> usize {
    40
}
fn default_heads() -> usize {
    2
}
fn default_mels() -> usize {
    20
}
fn default_kernel() -> usize {
    3
}
fn default_ref_layers() -> usize {
    4
}
fn default_ref_width() -> usize {
    16
}
fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_filter: usize,
    pub pred_filter: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_mels")]
    pub n_mels: usize,
    /// Kernel of the first feed-forward convolution in each FFT block.
    #[serde(default = "default_kernel")]
    pub ffn_kernel: usize,
    #[serde(default = "default_kernel")]
    pub pred_kernel: usize,
    #[serde(default = "default_ref_layers")]
    pub ref_layers: usize,
    #[serde(default = "default_ref_width")]
    pub ref_width: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moa: Option<MoaConfig>,
}

impl ModelConfig {
    fn desk(d_model: usize) -> Self {
        Self {
            vocab_size: default_vocab(),
            enc_layers: 2,
            dec_layers: 3,
            d_model,
            d_filter: 2 * d_model,
            pred_filter: 2 * d_model,
            n_heads: default_heads(),
            n_mels: default_mels(),
            ffn_kernel: default_kernel(),
            pred_kernel: default_kernel(),
            ref_layers: default_ref_layers(),
            ref_width: default_ref_width(),
            dropout: default_dropout(),
            moa: None,
        }
    }

    pub fn small() -> Self {
        Self::desk(32)
    }

    pub fn medium_small() -> Self {
        Self::desk(40)
    }

    pub fn medium() -> Self {
        Self::desk(64)
    }

    pub fn large() -> Self {
        Self::desk(128)
    }

    /// Full-scale small model: 128/256, four encoder and six decoder layers,
    /// 80 mel bins and 768-wide reference features.
    pub fn full_scale_small() -> Self {
        Self {
            enc_layers: 4,
            dec_layers: 6,
            n_mels: 80,
            ffn_kernel: 9,
            ref_layers: 13,
            ref_width: 768,
            ..Self::desk(128)
        }
    }

    pub fn with_moa(mut self, moa: MoaConfig) -> Self {
        self.moa = Some(moa);
        self
    }

    pub fn without_moa(mut self) -> Self {
        self.moa = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("d_filter", self.d_filter),
            ("pred_filter", self.pred_filter),
            ("n_heads", self.n_heads),
            ("n_mels", self.n_mels),
            ("ref_layers", self.ref_layers),
            ("ref_width", self.ref_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even".into()));
        }
        for (name, k) in [("ffn_kernel", self.ffn_kernel), ("pred_kernel", self.pred_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if let Some(m) = &self.moa {
            m.routing().validate(m.n_adapters)?;
            let smallest = if m.sites.predictors() {
                self.d_model.min(self.pred_filter)
            } else {
                self.d_model
            };
            if m.bottleneck == 0 || m.bottleneck >= smallest {
                return Err(Error::Config(format!(
                    "bottleneck {} must be in 1..{smallest}",
                    m.bottleneck
                )));
            }
        }
        Ok(())
    }
}

/// Contents of a single config file: `[model]` and optional `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<crate::train::TrainConfig>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        if let Some(t) = &cfg.train {
            t.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
