use serde::{Deserialize, Serialize};

use super::GnnError;

/// Architecture of one GNN level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_conv_layers: usize,
    pub mlp_head_layers: usize,
    pub sag_ratio: f64,
    pub dropout_p: f64,
    /// GINE convolutions (scalar edge weights embedded into messages) when
    /// set, plain GIN otherwise.
    pub use_edge_weights: bool,
    /// Self-attention pooling after each convolution.
    pub use_sag_pool: bool,
    /// Graph-level scalars concatenated to the readout before the head.
    pub readout_extra: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            hidden_dim: 64,
            n_conv_layers: 3,
            mlp_head_layers: 2,
            sag_ratio: 0.5,
            dropout_p: 0.2,
            use_edge_weights: true,
            use_sag_pool: true,
            readout_extra: 0,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        let bad = |m: &str| Err(GnnError::InvalidConfig(m.to_string()));
        if self.in_dim == 0 || self.hidden_dim == 0 || self.n_classes < 2 {
            return bad("dimensions must be positive and n_classes >= 2");
        }
        if self.mlp_head_layers == 0 {
            return bad("the head needs at least one linear layer");
        }
        if !(self.sag_ratio > 0.0 && self.sag_ratio <= 1.0) {
            return bad("sag_ratio must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        Ok(())
    }

    /// Width of the vector entering the last linear layer.
    pub fn embed_dim(&self) -> usize {
        if self.mlp_head_layers > 1 {
            self.hidden_dim
        } else {
            self.readout_dim()
        }
    }

    pub fn readout_dim(&self) -> usize {
        let node_dim = if self.n_conv_layers == 0 { self.in_dim } else { self.hidden_dim };
        2 * node_dim + self.readout_extra
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_key_values(&self) -> String {
        format!(
            "in_dim={}\nhidden_dim={}\nn_conv_layers={}\nmlp_head_layers={}\nsag_ratio={}\ndropout_p={}\nuse_edge_weights={}\nuse_sag_pool={}\nreadout_extra={}\nn_classes={}\n",
            self.in_dim,
            self.hidden_dim,
            self.n_conv_layers,
            self.mlp_head_layers,
            self.sag_ratio,
            self.dropout_p,
            self.use_edge_weights,
            self.use_sag_pool,
            self.readout_extra,
            self.n_classes
        )
    }

    pub fn from_key_values(text: &str) -> Result<Self, GnnError> {
        let mut cfg = ModelConfig::new(1);
        let mut seen = 0u32;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GnnError::InvalidConfig(format!("malformed line `{line}`")))?;
            let err = || GnnError::InvalidConfig(format!("bad value for {k}: `{v}`"));
            let bit = match k {
                "in_dim" => {
                    cfg.in_dim = v.parse().map_err(|_| err())?;
                    0
                }
                "hidden_dim" => {
                    cfg.hidden_dim = v.parse().map_err(|_| err())?;
                    1
                }
                "n_conv_layers" => {
                    cfg.n_conv_layers = v.parse().map_err(|_| err())?;
                    2
                }
                "mlp_head_layers" => {
                    cfg.mlp_head_layers = v.parse().map_err(|_| err())?;
                    3
                }
                "sag_ratio" => {
                    cfg.sag_ratio = v.parse().map_err(|_| err())?;
                    4
                }
                "dropout_p" => {
                    cfg.dropout_p = v.parse().map_err(|_| err())?;
                    5
                }
                "use_edge_weights" => {
                    cfg.use_edge_weights = v.parse().map_err(|_| err())?;
                    6
                }
                "use_sag_pool" => {
                    cfg.use_sag_pool = v.parse().map_err(|_| err())?;
                    7
                }
                "readout_extra" => {
                    cfg.readout_extra = v.parse().map_err(|_| err())?;
                    8
                }
                "n_classes" => {
                    cfg.n_classes = v.parse().map_err(|_| err())?;
                    9
                }
                _ => return Err(GnnError::InvalidConfig(format!("unknown key `{k}`"))),
            };
            if seen & (1 << bit) != 0 {
                return Err(GnnError::InvalidConfig(format!("duplicate key `{k}`")));
            }
            seen |= 1 << bit;
        }
        if seen != (1 << 10) - 1 {
            return Err(GnnError::InvalidConfig("model config block is incomplete".into()));
        }
        // Guard against absurd sizes from untrusted checkpoint headers.
        if cfg.in_dim > 1 << 20 || cfg.hidden_dim > 1 << 16 || cfg.n_conv_layers > 64 || cfg.mlp_head_layers > 64 || cfg.readout_extra > 1 << 16 || cfg.n_classes > 1 << 16 {
            return Err(GnnError::InvalidConfig("model dimensions out of range".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_round_trip() {
        let mut c = ModelConfig::new(17);
        c.sag_ratio = 0.3;
        c.use_edge_weights = false;
        c.readout_extra = 1;
        assert_eq!(ModelConfig::from_key_values(&c.to_key_values()).unwrap(), c);
    }

    #[test]
    fn key_value_rejects_incomplete_and_unknown() {
        assert!(ModelConfig::from_key_values("in_dim=3").is_err());
        let c = ModelConfig::new(3).to_key_values();
        assert!(ModelConfig::from_key_values(&format!("{c}bogus=1\n")).is_err());
        assert!(ModelConfig::from_key_values(&format!("{c}in_dim=4\n")).is_err());
        assert!(ModelConfig::from_key_values(&c.replace("sag_ratio=0.5", "sag_ratio=0")).is_err());
    }

    #[test]
    fn embed_dim_is_last_hidden_width() {
        let c = ModelConfig::new(5);
        assert_eq!(c.embed_dim(), 64);
        let mut one = c.clone();
        one.mlp_head_layers = 1;
        assert_eq!(one.embed_dim(), 128);
    }
}
