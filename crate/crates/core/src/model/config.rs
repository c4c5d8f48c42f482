use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How two modality vectors are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Cross-modal gated fusion with per-head sigmoid gates.
    Cmgf,
    /// `sigmoid(W [x1 || x2]) * x1 + (1 - sigmoid(.)) * x2`.
    Gated,
    Sum,
    Mean,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmgf" => Ok(FusionMode::Cmgf),
            "gated" => Ok(FusionMode::Gated),
            "sum" => Ok(FusionMode::Sum),
            "mean" => Ok(FusionMode::Mean),
            other => Err(Error::config("fusion", format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Immediate-intent window `K`.
    pub intent_window: usize,
    /// Session window `T`.
    pub window: usize,
    /// Encoder and decoder depth `L`.
    pub layers: usize,
    /// Attention heads in the encoder/decoder.
    pub heads: usize,
    /// Heads `B` of each cross-modal gated fusion.
    pub fusion_heads: usize,
    /// LightGCN propagation layers.
    pub gcn_layers: usize,
    pub dropout: f64,
    /// Real apps; the embedding table has one extra PAD row.
    pub num_apps: usize,
    pub num_hours: usize,
    /// Station categories `F`; zero disables the spatial path.
    pub num_categories: usize,
    pub fusion: FusionMode,
    pub use_multihop: bool,
    pub use_temporal: bool,
    pub use_spatial: bool,
    pub use_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            intent_window: 3,
            window: 8,
            layers: 2,
            heads: 4,
            fusion_heads: 4,
            gcn_layers: 2,
            dropout: 0.10,
            num_apps: 0,
            num_hours: 24,
            num_categories: 0,
            fusion: FusionMode::Cmgf,
            use_multihop: true,
            use_temporal: true,
            use_spatial: true,
            use_decoder: true,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for gradient checks and desk-scale experiments.
    pub fn toy(num_apps: usize) -> Self {
        ModelConfig {
            dim: 8,
            intent_window: 3,
            window: 8,
            layers: 1,
            heads: 2,
            fusion_heads: 2,
            gcn_layers: 2,
            dropout: 0.0,
            num_apps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.dim == 0 {
            return fail("dim", "must be >= 1".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail("heads", format!("{} must divide dim {}", self.heads, self.dim));
        }
        if self.fusion_heads == 0 || self.dim % self.fusion_heads != 0 {
            return fail(
                "fusion_heads",
                format!("{} must divide dim {}", self.fusion_heads, self.dim),
            );
        }
        if self.window == 0 {
            return fail("window", "must be >= 1".into());
        }
        if self.intent_window == 0 || self.intent_window > self.window {
            return fail(
                "intent_window",
                format!("must lie in 1..={}", self.window),
            );
        }
        if self.num_apps == 0 {
            return fail("num_apps", "must be >= 1".into());
        }
        if self.num_hours == 0 {
            return fail("num_hours", "must be >= 1".into());
        }
        if self.layers == 0 {
            return fail("layers", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Whether the spatial path is active.
    pub fn spatial_enabled(&self) -> bool {
        self.use_spatial && self.num_categories > 0
    }

    pub fn hops(&self) -> usize {
        if self.use_multihop {
            crate::graphs::HOPS
        } else {
            1
        }
    }
}
