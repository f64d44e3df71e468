use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "gcn")]
    Gcn,
    #[serde(rename = "gat")]
    Gat,
    #[serde(rename = "dynamo-gat", alias = "dynamo_gat")]
    DynamoGat,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
            ModelKind::DynamoGat => "dynamo-gat",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Gcn => "GCN",
            ModelKind::Gat => "GAT",
            ModelKind::DynamoGat => "DYNAMO-GAT",
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, ModelKind::Gcn)
    }
}

/// Architecture of a layer stack.
///
/// `hidden_dim` is the total hidden width; attention models split it into
/// `heads` concatenated heads of `hidden_dim / heads` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub depth: usize,
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::output_heads")]
    pub output_heads: usize,
    #[serde(default, with = "activation_name", skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default = "defaults::attention_slope")]
    pub attention_slope: f64,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub residual: bool,
}

pub(crate) mod defaults {
    pub fn hidden_dim() -> usize {
        64
    }
    pub fn heads() -> usize {
        8
    }
    pub fn output_heads() -> usize {
        1
    }
    pub fn attention_slope() -> f64 {
        0.2
    }
    pub fn dropout() -> f64 {
        0.6
    }
}

mod activation_name {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::autodiff::Activation;

    pub fn serialize<S: Serializer>(a: &Option<Activation>, s: S) -> Result<S::Ok, S::Error> {
        match a {
            Some(a) => s.serialize_str(&a.name()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Activation>, D::Error> {
        let s = String::deserialize(d)?;
        Activation::parse(&s)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown activation `{s}`")))
    }
}

/// Shape of one layer in a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub d_in: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Hidden layers concatenate heads; the output layer averages them.
    pub concat: bool,
    pub last: bool,
}

impl LayerShape {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Row width after head concatenation or averaging.
    pub fn d_out(&self) -> usize {
        if self.concat {
            self.width()
        } else {
            self.head_dim
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind, depth: usize) -> Self {
        Self {
            kind,
            depth,
            hidden_dim: defaults::hidden_dim(),
            heads: defaults::heads(),
            output_heads: defaults::output_heads(),
            activation: None,
            attention_slope: defaults::attention_slope(),
            dropout: defaults::dropout(),
            residual: false,
        }
    }

    /// Configured activation, else ReLU for GCN and ELU for attention models.
    pub fn activation(&self) -> Activation {
        self.activation.unwrap_or(match self.kind {
            ModelKind::Gcn => Activation::Relu,
            _ => Activation::Elu,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.heads == 0 || self.output_heads == 0 {
            return bad("hidden_dim, heads and output_heads must be at least 1".into());
        }
        if self.kind.is_attention() && self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.attention_slope.is_finite() {
            return bad("attention_slope must be finite".into());
        }
        Ok(())
    }

    pub fn layer_shapes(&self, d_in: usize, n_classes: usize) -> Vec<LayerShape> {
        let attn = self.kind.is_attention();
        let mut shapes = Vec::with_capacity(self.depth);
        let mut d = d_in;
        for l in 0..self.depth {
            let last = l + 1 == self.depth;
            let shape = match (attn, last) {
                (false, false) => LayerShape {
                    d_in: d,
                    heads: 1,
                    head_dim: self.hidden_dim,
                    concat: true,
                    last,
                },
                (false, true) => LayerShape {
                    d_in: d,
                    heads: 1,
                    head_dim: n_classes,
                    concat: true,
                    last,
                },
                (true, false) => LayerShape {
                    d_in: d,
                    heads: self.heads,
                    head_dim: self.hidden_dim / self.heads,
                    concat: true,
                    last,
                },
                (true, true) => LayerShape {
                    d_in: d,
                    heads: self.output_heads,
                    head_dim: n_classes,
                    concat: false,
                    last,
                },
            };
            d = shape.d_out();
            shapes.push(shape);
        }
        shapes
    }
}
