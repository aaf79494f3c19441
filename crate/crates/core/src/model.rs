//! Model shapes shared by every other module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inference phase of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "prefill" => Some(Phase::Prefill),
            "decode" => Some(Phase::Decode),
            _ => None,
        }
    }
}

/// Architecture constants of an MoE transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeModelSpec {
    pub num_layers: usize,
    /// Experts per MoE layer.
    pub num_experts: usize,
    /// Experts applied per token.
    pub top_k: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub bytes_per_param: usize,
}

impl MoeModelSpec {
    /// Mixtral-8x7B shapes (fp16 weights).
    pub fn mixtral_8x7b() -> Self {
        Self {
            num_layers: 32,
            num_experts: 8,
            top_k: 2,
            d_model: 4096,
            d_ff: 14336,
            bytes_per_param: 2,
        }
    }

    /// DBRX shapes (fp16 weights).
    pub fn dbrx() -> Self {
        Self {
            num_layers: 40,
            num_experts: 16,
            top_k: 4,
            d_model: 6144,
            d_ff: 10752,
            bytes_per_param: 2,
        }
    }

    /// A small model for the desk-scale simulator.
    pub fn toy(num_layers: usize, num_experts: usize, top_k: usize) -> Self {
        Self {
            num_layers,
            num_experts,
            top_k,
            d_model: 32,
            d_ff: 64,
            bytes_per_param: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::InvalidTopK {
                k: self.top_k,
                num_experts: self.num_experts,
            });
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig("num_layers must be at least 1".into()));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("d_model and d_ff must be at least 1".into()));
        }
        if self.bytes_per_param == 0 {
            return Err(Error::InvalidConfig("bytes_per_param must be at least 1".into()));
        }
        Ok(())
    }

    /// Weight bytes of one expert in one layer (up and down projections).
    pub fn expert_param_bytes(&self) -> f64 {
        2.0 * self.d_model as f64 * self.d_ff as f64 * self.bytes_per_param as f64
    }

    /// Floating-point operations one token spends in one expert.
    pub fn expert_flops_per_token(&self) -> f64 {
        // one multiply-add per weight
        2.0 * 2.0 * self.d_model as f64 * self.d_ff as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        MoeModelSpec::mixtral_8x7b().validate().unwrap();
        MoeModelSpec::dbrx().validate().unwrap();
        MoeModelSpec::toy(4, 8, 2).validate().unwrap();
    }

    #[test]
    fn rejects_bad_top_k() {
        let mut spec = MoeModelSpec::toy(2, 4, 1);
        spec.top_k = 5;
        assert!(matches!(spec.validate(), Err(Error::InvalidTopK { .. })));
        spec.top_k = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn phase_round_trips_through_str() {
        for p in [Phase::Prefill, Phase::Decode] {
            assert_eq!(Phase::parse(p.as_str()), Some(p));
        }
        assert_eq!(Phase::parse("train"), None);
    }
}
