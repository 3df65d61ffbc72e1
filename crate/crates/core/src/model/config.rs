use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field: format!("model.{field}"),
                    msg: "must be positive".into(),
                });
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config {
                field: "model.d_model".into(),
                msg: format!(
                    "must equal n_heads * d_head = {} * {}",
                    self.n_heads, self.d_head
                ),
            });
        }
        Ok(())
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}
