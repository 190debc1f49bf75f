//! Run configuration in TOML form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::association::AssociationConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::mixfusion::MixFusionConfig;
use crate::nn::SgdConfig;
use crate::transfer::TransferConfig;

/// Where the corpus comes from. Without paths the synthetic generator is
/// used with `synth` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Feature width of the source CSV.
    pub d_s: usize,
    /// Labeled source CSV.
    pub source: Option<PathBuf>,
    /// Directory holding `accounts.csv` and `edges.csv`.
    pub graph_dir: Option<PathBuf>,
    /// Labeled pairs CSV; defaults to `graph_dir/pairs.csv`.
    pub pairs: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            d_s: 148,
            source: None,
            graph_dir: None,
            pairs: None,
        }
    }
}

impl DataConfig {
    pub fn is_synthetic(&self) -> bool {
        self.source.is_none() && self.graph_dir.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Few-shot sizes; `0` stands for the full labeled set.
    pub shots: Vec<usize>,
    pub trials: usize,
    pub etas: Vec<f64>,
    pub ratios: Vec<usize>,
    pub folds: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 3, 5, 10, 0],
            trials: 10,
            etas: vec![0.05, 0.10, 0.20, 0.30, 0.50],
            ratios: vec![5, 10, 15, 25],
            folds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub mixfusion: MixFusionConfig,
    pub transfer: TransferConfig,
    pub association: AssociationConfig,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            mixfusion: MixFusionConfig::default(),
            transfer: TransferConfig::default(),
            association: AssociationConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

fn check_sgd(name: &str, s: &SgdConfig) -> Result<()> {
    if !(s.lr > 0.0) || !(s.momentum >= 0.0 && s.momentum < 1.0) || !(s.weight_decay >= 0.0) {
        return Err(Error::Config(format!(
            "{name}: lr must be positive, momentum in [0, 1) and weight decay non-negative"
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Width of the fused pair representation, `2·d_C`.
    pub fn d_p(&self) -> usize {
        2 * self.mixfusion.d_c
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let t = &self.transfer;
        check_sgd("transfer.sgd", &t.sgd)?;
        check_sgd("transfer.encoder.sgd", &t.encoder.sgd)?;
        check_sgd("association.sgd", &self.association.sgd)?;
        if self.mixfusion.d_c == 0 || self.mixfusion.layers == 0 || self.mixfusion.cap == 0 {
            return Err(Error::Config("mixfusion d_c, layers and cap must be positive".into()));
        }
        if !(t.lambda >= 0.0) || t.batch == 0 || t.generator_steps == 0 || t.encoder.batch == 0 {
            return Err(Error::Config("transfer lambda must be non-negative and batch sizes positive".into()));
        }
        if self.association.batch == 0 || !(0.0..=1.0).contains(&self.association.threshold) {
            return Err(Error::Config("association batch must be positive and threshold in [0, 1]".into()));
        }
        let p = &self.protocol;
        if p.trials == 0 || p.folds < 2 {
            return Err(Error::Config("protocol needs at least one trial and two folds".into()));
        }
        if let Some(e) = p.etas.iter().find(|e| !(0.0..=0.5).contains(*e)) {
            return Err(Error::Config(format!("noise rate {e} is outside [0, 0.5]")));
        }
        if p.ratios.contains(&0) {
            return Err(Error::Config("imbalance ratios must be at least 1".into()));
        }
        if !self.data.is_synthetic() && (self.data.source.is_none() || self.data.graph_dir.is_none()) {
            return Err(Error::Config("data.source and data.graph_dir must be given together".into()));
        }
        Ok(())
    }
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
