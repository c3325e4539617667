use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FtmError, Result};

/// Which sequence summary layer turns encoder embeddings into decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum SummaryKind {
    /// Streaming TCN residual unit over block-wise embeddings.
    #[serde(rename = "stcn")]
    Stcn,
    /// Unidirectional LSTM over the streaming encoder.
    #[serde(rename = "slstm")]
    Slstm,
    /// Per-frame linear+ReLU with running average of frame posteriors.
    #[serde(rename = "save")]
    Save,
    /// LSTM over a full-context (unmasked) encoder; one final score only.
    #[serde(rename = "a2a")]
    A2aLstm,
}

impl SummaryKind {
    pub const ALL: [SummaryKind; 4] = [
        SummaryKind::Stcn,
        SummaryKind::Slstm,
        SummaryKind::Save,
        SummaryKind::A2aLstm,
    ];

    pub fn is_streaming(self) -> bool {
        self != SummaryKind::A2aLstm
    }

    pub fn name(self) -> &'static str {
        match self {
            SummaryKind::Stcn => "stcn",
            SummaryKind::Slstm => "slstm",
            SummaryKind::Save => "save",
            SummaryKind::A2aLstm => "a2a",
        }
    }

    /// Parameter-name prefix of this kind's head.
    pub fn head_prefix(self) -> &'static str {
        match self {
            SummaryKind::Stcn => "stcn.",
            SummaryKind::Slstm | SummaryKind::A2aLstm => "lstm.",
            SummaryKind::Save => "save.",
        }
    }
}

impl fmt::Display for SummaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SummaryKind {
    type Err = FtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stcn" | "s-tcn" => Ok(SummaryKind::Stcn),
            "slstm" | "s-lstm" => Ok(SummaryKind::Slstm),
            "save" | "s-ave" => Ok(SummaryKind::Save),
            "a2a" | "a2a_lstm" | "a2a-lstm" => Ok(SummaryKind::A2aLstm),
            other => Err(FtmError::Config(format!("unknown summary kind {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Stacked input feature dimension.
    pub input_dim: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Block shift S; attention blocks span 2·S frames.
    pub block_shift: usize,
    pub summary_kind: SummaryKind,
    pub k1: usize,
    pub s1: usize,
    pub k2: usize,
    pub s2: usize,
    pub tcn_channels: usize,
    /// Residual units in the s-TCN head; units past the first are pointwise.
    pub tcn_units: usize,
    pub lstm_hidden: usize,
    /// Frames averaged by the LSTM heads for each decision.
    pub lstm_avg_frames: usize,
    pub save_hidden: usize,
    pub dropout: f64,
    pub n_classes: usize,
    /// Phone symbols, excluding the CTC blank (index 0).
    pub phone_alphabet: usize,
}

impl Default for ModelConfig {
    /// Full-size geometry: 6 layers of width 256 with 4 heads, S = 32.
    fn default() -> Self {
        ModelConfig {
            input_dim: 280,
            n_layers: 6,
            d_model: 256,
            n_heads: 4,
            d_ff: 1024,
            block_shift: 32,
            summary_kind: SummaryKind::Stcn,
            k1: 4,
            s1: 4,
            k2: 16,
            s2: 8,
            tcn_channels: 256,
            tcn_units: 1,
            lstm_hidden: 256,
            lstm_avg_frames: 10,
            save_hidden: 256,
            dropout: 0.1,
            n_classes: 2,
            phone_alphabet: 32,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model: 2 layers of width 64.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            tcn_channels: 64,
            lstm_hidden: 64,
            save_hidden: 64,
            ..ModelConfig::default()
        }
    }

    pub fn with_kind(mut self, kind: SummaryKind) -> Self {
        self.summary_kind = kind;
        self
    }

    pub fn block_size(&self) -> usize {
        2 * self.block_shift
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Input frames covered by one s-TCN output.
    pub fn tcn_receptive_field(&self) -> usize {
        self.k1 + (self.k2 - 1) * self.s1
    }

    /// Input frames between consecutive s-TCN outputs.
    pub fn tcn_stride(&self) -> usize {
        self.s1 * self.s2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("block_shift", self.block_shift),
            ("k1", self.k1),
            ("s1", self.s1),
            ("k2", self.k2),
            ("s2", self.s2),
            ("tcn_channels", self.tcn_channels),
            ("tcn_units", self.tcn_units),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_avg_frames", self.lstm_avg_frames),
            ("save_hidden", self.save_hidden),
            ("phone_alphabet", self.phone_alphabet),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FtmError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FtmError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes != 2 {
            return Err(FtmError::Config(format!("n_classes must be 2, got {}", self.n_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FtmError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.validate_tcn_geometry()
    }

    fn validate_tcn_geometry(&self) -> Result<()> {
        let s = self.block_shift;
        if self.k1 != self.s1 {
            return Err(FtmError::Config(format!(
                "first TCN convolution must be non-overlapping (k1 = s1), got k1={} s1={}",
                self.k1, self.s1
            )));
        }
        if self.s1 * self.s2 != s {
            return Err(FtmError::Config(format!(
                "TCN stride product s1·s2 = {}·{} must equal the block shift {s}",
                self.s1, self.s2
            )));
        }
        if self.k2 < self.s2 {
            return Err(FtmError::Config(format!(
                "second TCN kernel {} shorter than its stride {} leaves gaps",
                self.k2, self.s2
            )));
        }
        if self.k1 * self.k2 > 2 * s {
            return Err(FtmError::Config(format!(
                "TCN receptive field k1·k2 = {} exceeds the block size {}",
                self.k1 * self.k2,
                2 * s
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        let c = ModelConfig::default();
        assert_eq!(c.tcn_receptive_field(), 64);
        assert_eq!(c.tcn_stride(), 32);
    }

    #[test]
    fn geometry_violations() {
        let base = ModelConfig::desk();
        let bad = [
            ModelConfig { s2: 4, ..base.clone() },          // stride product 16 ≠ 32
            ModelConfig { k1: 8, ..base.clone() },          // overlapping first conv
            ModelConfig { k2: 32, s2: 8, ..base.clone() },  // receptive field 128 > 64
            ModelConfig { n_heads: 3, ..base.clone() },
            ModelConfig { dropout: 1.0, ..base },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(FtmError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SummaryKind::ALL {
            assert_eq!(k.name().parse::<SummaryKind>().unwrap(), k);
        }
        assert!("gru".parse::<SummaryKind>().is_err());
    }
}
