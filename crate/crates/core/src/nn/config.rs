use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPlacement {
    None,
    /// Dropout after every hidden layer.
    AllHidden,
    /// A single dropout layer on the output of the last hidden layer.
    SecondToLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    #[default]
    Sigmoid,
}

/// Architecture of a fully-connected CTR network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    /// Hidden layer widths, bottom to top.
    pub layer_sizes: Vec<usize>,
    pub head_count: usize,
    pub dropout_rate: f64,
    pub dropout_placement: DropoutPlacement,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub output: OutputKind,
}

impl NetworkConfig {
    /// A dropout-free single-head network.
    pub fn plain(input_dim: usize, layer_sizes: Vec<usize>) -> Self {
        Self {
            input_dim,
            layer_sizes,
            head_count: 1,
            dropout_rate: 0.0,
            dropout_placement: DropoutPlacement::None,
            activation: Activation::Relu,
            output: OutputKind::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be >= 1".to_string());
        }
        if self.head_count == 0 {
            problems.push("head_count must be >= 1".to_string());
        }
        if let Some(k) = self.layer_sizes.iter().position(|&w| w == 0) {
            problems.push(format!("layer_sizes[{k}] must be >= 1"));
        }
        if !(self.dropout_rate.is_finite() && (0.0..1.0).contains(&self.dropout_rate)) {
            problems.push(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.dropout_placement != DropoutPlacement::None && self.layer_sizes.is_empty() {
            problems.push("dropout placement requires at least one hidden layer".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Whether hidden layer `k` carries a dropout mask.
    pub fn dropout_on(&self, k: usize) -> bool {
        if self.dropout_rate <= 0.0 {
            return false;
        }
        match self.dropout_placement {
            DropoutPlacement::None => false,
            DropoutPlacement::AllHidden => k < self.layer_sizes.len(),
            DropoutPlacement::SecondToLast => k + 1 == self.layer_sizes.len(),
        }
    }

    pub fn has_dropout(&self) -> bool {
        (0..self.layer_sizes.len()).any(|k| self.dropout_on(k))
    }

    /// Width of the representation fed to the output heads.
    pub fn top_width(&self) -> usize {
        self.layer_sizes.last().copied().unwrap_or(self.input_dim)
    }

    pub fn param_count(&self) -> usize {
        let mut prev = self.input_dim;
        let mut n = 0;
        for &w in &self.layer_sizes {
            n += w * prev + w;
            prev = w;
        }
        n + self.head_count * prev + self.head_count
    }
}
