use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LayerShape, ModelConfig, ModelKind};
use super::topology::{LayerEdges, LayerMask, Topology};
use crate::autodiff::{Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameters of one layer. Attention vectors are `heads × head_dim` and
/// empty for GCN layers; `attn_dst` scores the aggregating node and
/// `attn_src` the neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub shape: LayerShape,
    pub w: Tensor,
    pub attn_src: Tensor,
    pub attn_dst: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn has_attention(&self) -> bool {
        !self.attn_src.is_empty()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w];
        if self.has_attention() {
            v.push(&self.attn_src);
            v.push(&self.attn_dst);
        }
        v.push(&self.bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let attention = self.has_attention();
        let mut v = vec![&mut self.w];
        if attention {
            v.push(&mut self.attn_src);
            v.push(&mut self.attn_dst);
        }
        v.push(&mut self.bias);
        v
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        let expect = |t: &Tensor, shape: (usize, usize), what: &'static str| {
            if t.shape() != shape {
                Err(Error::ShapeMismatch {
                    op: what,
                    left: t.shape(),
                    right: shape,
                })
            } else if !t.is_finite() {
                Err(Error::NonFinite(what.into()))
            } else {
                Ok(())
            }
        };
        expect(&self.w, (s.d_in, s.width()), "layer weight")?;
        if self.has_attention() {
            expect(&self.attn_src, (s.heads, s.head_dim), "attention source vector")?;
            expect(&self.attn_dst, (s.heads, s.head_dim), "attention destination vector")?;
        }
        expect(&self.bias, (1, s.d_out()), "layer bias")
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// A GCN or GAT layer stack with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub w: Var,
    pub attn_src: Option<Var>,
    pub attn_dst: Option<Var>,
    pub bias: Var,
}

/// Options for one forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Per-layer edge masks; ignored by GCN.
    pub masks: Option<&'a [LayerMask]>,
    /// Enables feature and attention dropout.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Output of every layer, the last being the logits.
    pub layer_outputs: Vec<Var>,
}

impl Model {
    pub fn init(config: &ModelConfig, d_in: usize, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_in == 0 || n_classes == 0 {
            return Err(Error::invalid("model needs at least one input feature and one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_shapes(d_in, n_classes)
            .into_iter()
            .map(|s| {
                let w = glorot(s.d_in, s.width(), &mut rng);
                let (attn_src, attn_dst) = if config.kind.is_attention() {
                    (glorot(s.heads, s.head_dim, &mut rng), glorot(s.heads, s.head_dim, &mut rng))
                } else {
                    (Tensor::zeros(0, 0), Tensor::zeros(0, 0))
                };
                LayerParams {
                    shape: s,
                    w,
                    attn_src,
                    attn_dst,
                    bias: Tensor::zeros(1, s.d_out()),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn parameter_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().flat_map(|l| l.tensors()).map(Tensor::shape).collect()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    /// Registers the parameters on `tape`, trainable if `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundLayer> {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        self.layers
            .iter()
            .map(|l| BoundLayer {
                w: leaf(&l.w),
                attn_src: l.has_attention().then(|| leaf(&l.attn_src)),
                attn_dst: l.has_attention().then(|| leaf(&l.attn_dst)),
                bias: leaf(&l.bias),
            })
            .collect()
    }

    /// Vars of `bind` in the order of [`Model::parameters`].
    pub fn flatten_bound(bound: &[BoundLayer]) -> Vec<Var> {
        let mut v = Vec::new();
        for b in bound {
            v.push(b.w);
            v.extend(b.attn_src);
            v.extend(b.attn_dst);
            v.push(b.bias);
        }
        v
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[BoundLayer],
        topo: &Topology,
        x: Var,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        if let Some(m) = opts.masks {
            if m.len() != self.depth() {
                return Err(Error::invalid(format!(
                    "{} layer masks for a {}-layer model",
                    m.len(),
                    self.depth()
                )));
            }
        }
        let mut h = x;
        let mut layer_outputs = Vec::with_capacity(self.depth());
        for (l, (params, b)) in self.layers.iter().zip(bound).enumerate() {
            let mask = if self.kind().is_attention() {
                opts.masks.map(|m| &m[l])
            } else {
                None
            };
            let input = h;
            h = layer_step(
                tape,
                &self.config,
                params,
                b,
                topo,
                input,
                mask,
                opts.dropout_rng.as_deref_mut(),
            )?;
            if self.config.residual && !params.shape.last && tape.value(input).shape() == tape.value(h).shape() {
                h = tape.add(h, input)?;
            }
            layer_outputs.push(h);
        }
        Ok(ForwardOutput {
            logits: h,
            layer_outputs,
        })
    }

    /// Inference pass returning every layer's output as plain tensors.
    pub fn predict(&self, topo: &Topology, x: &Tensor, masks: Option<&[LayerMask]>) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(
            &mut tape,
            &bound,
            topo,
            xv,
            ForwardOptions {
                masks,
                dropout_rng: None,
            },
        )?;
        Ok(out.layer_outputs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Input features of layer `layer` under inference.
    pub fn layer_input(&self, topo: &Topology, x: &Tensor, masks: Option<&[LayerMask]>, layer: usize) -> Result<Tensor> {
        if layer == 0 {
            return Ok(x.clone());
        }
        let prefix = Model {
            config: ModelConfig {
                depth: layer,
                ..self.config.clone()
            },
            layers: self.layers[..layer].to_vec(),
        };
        let outs = prefix.predict(topo, x, masks.map(|m| &m[..layer]))?;
        Ok(outs.into_iter().last().expect("layer >= 1"))
    }
}

fn dropout(tape: &mut Tape, v: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(v) };
    if p == 0.0 {
        return Ok(v);
    }
    let (r, c) = tape.value(v).shape();
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(r, c, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep });
    let m = tape.constant(mask);
    tape.mul(v, m)
}

/// Attention logits and coefficients of one layer on the tape.
pub(crate) fn attention_on_tape(
    tape: &mut Tape,
    slope: f64,
    b: &BoundLayer,
    h: Var,
    le: &LayerEdges,
) -> Result<Var> {
    let (a_src, a_dst) = match (b.attn_src, b.attn_dst) {
        (Some(s), Some(d)) => (s, d),
        _ => return Err(Error::invalid("attention requested on a layer without attention vectors")),
    };
    let s_src = tape.head_dot(h, a_src)?;
    let s_dst = tape.head_dot(h, a_dst)?;
    let e_src = tape.gather_rows(s_src, le.src.clone())?;
    let e_dst = tape.gather_rows(s_dst, le.dst.clone())?;
    let logits = tape.add(e_dst, e_src)?;
    let logits = tape.activation(logits, Activation::LeakyRelu(slope));
    tape.edge_softmax(logits, le.edges.clone())
}

fn scale_constant(le: &LayerEdges, scale: &[f64], heads: usize) -> Tensor {
    Tensor::from_fn(le.original.len(), heads, |e, _| scale[le.original[e]])
}

/// One layer on the tape. Shared by the model forward pass and the
/// layer maps used for dynamics analysis.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_step(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &LayerParams,
    b: &BoundLayer,
    topo: &Topology,
    x: Var,
    mask: Option<&LayerMask>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let s = params.shape;
    let x = dropout(tape, x, cfg.dropout, rng.as_deref_mut())?;
    let h = tape.matmul(x, b.w)?;
    let agg = if params.has_attention() {
        let le = topo.masked(mask)?;
        let mut alpha = attention_on_tape(tape, cfg.attention_slope, b, h, &le)?;
        alpha = dropout(tape, alpha, cfg.dropout, rng)?;
        if let Some(scale) = mask.and_then(|m| m.scale.as_ref()) {
            let c = tape.constant(scale_constant(&le, scale, s.heads));
            alpha = tape.mul(alpha, c)?;
        }
        tape.edge_aggregate(alpha, h, le.edges.clone())?
    } else {
        let full = topo.full();
        let coef = tape.constant(Tensor::from_vec(full.edges.len(), 1, topo.gcn_coefficients().to_vec())?);
        tape.edge_aggregate(coef, h, full.edges.clone())?
    };
    let merged = if s.concat { agg } else { tape.head_mean(agg, s.heads)? };
    let out = tape.add_row(merged, b.bias)?;
    Ok(if s.last {
        out
    } else {
        tape.activation(out, cfg.activation())
    })
}

/// Attention coefficients `α` (edges × heads) of `layer` for input `x`,
/// over the edges that survive `mask`. Scales in the mask are applied.
pub fn gat_attention(
    model: &Model,
    topo: &Topology,
    layer: usize,
    x: &Tensor,
    mask: Option<&LayerMask>,
) -> Result<(LayerEdges, Tensor)> {
    let params = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
    let mut tape = Tape::new();
    let bound = Model {
        config: model.config.clone(),
        layers: vec![params.clone()],
    }
    .bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let h = tape.matmul(xv, bound[0].w)?;
    let le = topo.masked(mask)?;
    let alpha = attention_on_tape(&mut tape, model.config.attention_slope, &bound[0], h, &le)?;
    let mut a = tape.value(alpha).clone();
    if let Some(scale) = mask.and_then(|m| m.scale.as_ref()) {
        a = a.hadamard(&scale_constant(&le, scale, params.shape.heads))?;
    }
    Ok((le, a))
}

/// Trainable-free application of one layer to plain tensors.
pub fn apply_layer(model: &Model, topo: &Topology, layer: usize, x: &Tensor, mask: Option<&LayerMask>) -> Result<Tensor> {
    let params = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
    let mut tape = Tape::new();
    let one = Model {
        config: model.config.clone(),
        layers: vec![params.clone()],
    };
    let bound = one.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = layer_step(&mut tape, &model.config, params, &bound[0], topo, xv, mask, None)?;
    Ok(tape.value(y).clone())
}
