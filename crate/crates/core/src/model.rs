//! The editing network: learnable global directions per attribute, a
//! shared-parameter intensity predictor over the layer-stacked latent, and
//! per-layer gated injection of the signed edit.
//!
//! All forward passes are built on the autodiff [`Graph`] so the same code
//! path serves training, gradient checking, and inference.

use crate::error::{Dims, Error, Result};
use crate::graph::{Graph, NodeId, NORM_EPS};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Core dimensions: `layers` style rows per latent, `dim` channels per row,
/// `attrs` editable attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub dim: usize,
    pub attrs: usize,
}

/// How raw global directions are normalized inside the forward graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionNorm {
    /// Unit L2 reparameterization (default; keeps the L1 sparsity penalty
    /// meaningful on the sphere).
    L2,
    /// Literal L1 normalization, kept as an experimentation switch.
    L1,
}

/// Structural switches for the forward pass (ablations).
#[derive(Debug, Clone, Copy)]
pub struct ModelOptions {
    pub dims: ModelDims,
    pub direction_norm: DirectionNorm,
    /// Replace the column-mixing layer with identity.
    pub disable_cfc: bool,
    /// Feed zeros in place of the positional encoding.
    pub disable_input_pe: bool,
    /// Fix the per-layer output gate at 1.
    pub disable_output_embedding: bool,
}

impl ModelOptions {
    pub fn plain(dims: ModelDims) -> Self {
        ModelOptions {
            dims,
            direction_norm: DirectionNorm::L2,
            disable_cfc: false,
            disable_input_pe: false,
            disable_output_embedding: false,
        }
    }
}

/// A layers x dim latent matrix with all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(Tensor);

impl LatentCode {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if !matrix.all_finite() {
            return Err(Error::invalid("latent", "non-finite entries"));
        }
        Ok(LatentCode(matrix))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn into_matrix(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// Requested target per attribute: -1 remove, 0 keep, +1 add.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeTarget(Vec<i8>);

impl AttributeTarget {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if values.iter().any(|v| !matches!(v, -1 | 0 | 1)) {
            return Err(Error::invalid(
                "attribute_target",
                "entries must be -1, 0 or +1",
            ));
        }
        Ok(AttributeTarget(values))
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weights of the shared intensity predictor: a row-wise layer widened for
/// the positional encoding, a column-mixing layer across the stacked rows,
/// and a final row-wise layer. All carry biases.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityNetWeights {
    pub w1: Tensor, // 2d x d
    pub b1: Tensor, // 1 x d
    pub wc: Tensor, // L x L
    pub bc: Tensor, // 1 x L
    pub w2: Tensor, // d x d
    pub b2: Tensor, // 1 x d
}

/// The full trainable state of the editor.
#[derive(Debug, Clone, PartialEq)]
pub struct EditorParams {
    /// Raw (unnormalized) global directions, one row per attribute (M x d).
    pub directions: Tensor,
    /// Per-attribute, per-layer gate logits (M x L).
    pub layer_embed: Tensor,
    pub net: IntensityNetWeights,
}

pub const PARAM_NAMES: [&str; 8] = [
    "directions",
    "layer_embed",
    "net.w1",
    "net.b1",
    "net.wc",
    "net.bc",
    "net.w2",
    "net.b2",
];

fn xavier(rng: &mut SplitMix64, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform(-limit, limit))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

impl EditorParams {
    /// Symmetric start: Xavier-uniform weights, zero biases, unit-scale
    /// random directions, zero gate logits (gate opens at 0.5).
    pub fn init(dims: ModelDims, rng: &mut SplitMix64) -> Self {
        let (l, d, m) = (dims.layers, dims.dim, dims.attrs);
        let dir_scale = 1.0 / (d as f64).sqrt();
        let directions = Tensor::from_vec(
            m,
            d,
            (0..m * d).map(|_| rng.normal() * dir_scale).collect(),
        )
        .expect("sized by construction");
        EditorParams {
            directions,
            layer_embed: Tensor::zeros(m, l),
            net: IntensityNetWeights {
                w1: xavier(rng, 2 * d, d, 2 * d, d),
                b1: Tensor::zeros(1, d),
                wc: xavier(rng, l, l, l, l),
                bc: Tensor::zeros(1, l),
                w2: xavier(rng, d, d, d, d),
                b2: Tensor::zeros(1, d),
            },
        }
    }

    /// All-zero parameters (useful to pin down degenerate behavior).
    pub fn zeros(dims: ModelDims) -> Self {
        let (l, d, m) = (dims.layers, dims.dim, dims.attrs);
        EditorParams {
            directions: Tensor::zeros(m, d),
            layer_embed: Tensor::zeros(m, l),
            net: IntensityNetWeights {
                w1: Tensor::zeros(2 * d, d),
                b1: Tensor::zeros(1, d),
                wc: Tensor::zeros(l, l),
                bc: Tensor::zeros(1, l),
                w2: Tensor::zeros(d, d),
                b2: Tensor::zeros(1, d),
            },
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 8] {
        [
            (PARAM_NAMES[0], &self.directions),
            (PARAM_NAMES[1], &self.layer_embed),
            (PARAM_NAMES[2], &self.net.w1),
            (PARAM_NAMES[3], &self.net.b1),
            (PARAM_NAMES[4], &self.net.wc),
            (PARAM_NAMES[5], &self.net.bc),
            (PARAM_NAMES[6], &self.net.w2),
            (PARAM_NAMES[7], &self.net.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            (PARAM_NAMES[0], &mut self.directions),
            (PARAM_NAMES[1], &mut self.layer_embed),
            (PARAM_NAMES[2], &mut self.net.w1),
            (PARAM_NAMES[3], &mut self.net.b1),
            (PARAM_NAMES[4], &mut self.net.wc),
            (PARAM_NAMES[5], &mut self.net.bc),
            (PARAM_NAMES[6], &mut self.net.w2),
            (PARAM_NAMES[7], &mut self.net.b2),
        ]
    }

    /// Normalized direction for attribute `m` (plain, non-graph view).
    pub fn normalized_direction(&self, m: usize, norm: DirectionNorm) -> Result<Tensor> {
        if m >= self.directions.rows() {
            return Err(Error::IndexOutOfRange {
                op: "normalized_direction",
                index: m,
                bound: self.directions.rows(),
            });
        }
        let row = self.directions.row(m);
        let n = match norm {
            DirectionNorm::L2 => row.frobenius_norm(),
            DirectionNorm::L1 => row.l1_norm(),
        };
        Ok(row.scale(1.0 / n.max(NORM_EPS)))
    }
}

/// Trainable scalar count of the editor at the given dimensions.
pub fn param_count(dims: ModelDims) -> usize {
    let (l, d, m) = (dims.layers, dims.dim, dims.attrs);
    (2 * d * d + d) + (l * l + l) + (d * d + d) + m * d + m * l
}

/// Interleaved sinusoidal positional encoding: for row `pos`, column pair
/// `2j`/`2j+1` holds sin/cos of `pos / 10000^(2j/d)`.
pub fn positional_encoding(layers: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::invalid(
            "positional_encoding",
            format!("dim must be even, got {dim}"),
        ));
    }
    let mut pe = Tensor::zeros(layers, dim);
    for pos in 0..layers {
        for j in 0..dim / 2 {
            let rate = 10000f64.powf(2.0 * j as f64 / dim as f64);
            let angle = pos as f64 / rate;
            pe.set(pos, 2 * j, angle.sin());
            pe.set(pos, 2 * j + 1, angle.cos());
        }
    }
    Ok(pe)
}

// ── Graph-side forward pass ─────────────────────────────────────────────

/// Leaf handles for one editor registration in a graph, plus the shared
/// constants the forward pass tiles with.
pub struct EditorNodes {
    pub directions: NodeId,
    pub layer_embed: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub wc: NodeId,
    pub bc: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pe: NodeId,
    ones_layers: NodeId, // L x 1
    ones_dim: NodeId,    // d x 1
    ones_cols: NodeId,   // 1 x d
    opts: ModelOptions,
}

impl EditorNodes {
    /// Leaf ids in [`PARAM_NAMES`] order.
    pub fn param_leaves(&self) -> [NodeId; 8] {
        [
            self.directions,
            self.layer_embed,
            self.w1,
            self.b1,
            self.wc,
            self.bc,
            self.w2,
            self.b2,
        ]
    }
}

/// Register the editor parameters (and forward-pass constants) as graph
/// leaves.
pub fn register_editor(
    g: &mut Graph,
    params: &EditorParams,
    opts: ModelOptions,
) -> Result<EditorNodes> {
    let dims = opts.dims;
    let pe_tensor = if opts.disable_input_pe {
        Tensor::zeros(dims.layers, dims.dim)
    } else {
        positional_encoding(dims.layers, dims.dim)?
    };
    Ok(EditorNodes {
        directions: g.leaf(params.directions.clone()),
        layer_embed: g.leaf(params.layer_embed.clone()),
        w1: g.leaf(params.net.w1.clone()),
        b1: g.leaf(params.net.b1.clone()),
        wc: g.leaf(params.net.wc.clone()),
        bc: g.leaf(params.net.bc.clone()),
        w2: g.leaf(params.net.w2.clone()),
        b2: g.leaf(params.net.b2.clone()),
        pe: g.leaf(pe_tensor),
        ones_layers: g.leaf(Tensor::ones(dims.layers, 1)),
        ones_dim: g.leaf(Tensor::ones(dims.dim, 1)),
        ones_cols: g.leaf(Tensor::ones(1, dims.dim)),
        opts,
    })
}

impl EditorNodes {
    /// Normalized direction row for attribute `m` (1 x d), with gradients
    /// flowing through the normalization.
    pub fn normalized_direction(&self, g: &mut Graph, m: usize) -> Result<NodeId> {
        let attrs = self.opts.dims.attrs;
        if m >= attrs {
            return Err(Error::IndexOutOfRange {
                op: "normalized_direction",
                index: m,
                bound: attrs,
            });
        }
        let raw = g.slice_rows(self.directions, m, m + 1)?;
        let norm = match self.opts.direction_norm {
            DirectionNorm::L2 => g.l2_norm(raw),
            DirectionNorm::L1 => g.l1_norm(raw),
        };
        let inv = g.recip_clamped(norm, NORM_EPS)?;
        g.scale_by(raw, inv)
    }

    /// Nonnegative per-coordinate intensity map (L x d) for `latent`:
    /// row-wise FC over (latent || positional encoding), a ReLU'd
    /// column-mixing FC across rows, then a final row-wise FC, each ReLU'd.
    pub fn intensity_map(&self, g: &mut Graph, latent: NodeId) -> Result<NodeId> {
        let dims = self.opts.dims;
        if g.value(latent).shape() != (dims.layers, dims.dim) {
            return Err(Error::ShapeMismatch {
                op: "intensity_map",
                lhs: g.value(latent).dims(),
                rhs: Dims(dims.layers, dims.dim),
            });
        }

        let input = g.concat_cols(latent, self.pe)?; // L x 2d
        let h = {
            let prod = g.matmul(input, self.w1)?;
            let bias = g.matmul(self.ones_layers, self.b1)?;
            let z = g.add(prod, bias)?;
            g.relu(z)
        }; // L x d

        let mixed = if self.opts.disable_cfc {
            h
        } else {
            let ht = g.transpose(h); // d x L
            let prod = g.matmul(ht, self.wc)?;
            let bias = g.matmul(self.ones_dim, self.bc)?;
            let z = g.add(prod, bias)?;
            let zt = g.transpose(z); // L x L applied across rows, back to L x d
            g.relu(zt)
        };

        let prod = g.matmul(mixed, self.w2)?;
        let bias = g.matmul(self.ones_layers, self.b2)?;
        let z = g.add(prod, bias)?;
        Ok(g.relu(z)) // L x d, entries >= 0
    }

    /// Per-layer gate column (L x 1) for attribute `m`: sigmoid of the gate
    /// logits, or all-ones when the output embedding is disabled.
    pub fn layer_gate(&self, g: &mut Graph, m: usize) -> Result<NodeId> {
        if self.opts.disable_output_embedding {
            return Ok(g.leaf(Tensor::ones(self.opts.dims.layers, 1)));
        }
        let row = g.slice_rows(self.layer_embed, m, m + 1)?; // 1 x L
        let gate = g.sigmoid(row);
        Ok(g.transpose(gate)) // L x 1
    }

    /// Signed, gated edit increment (L x d): per row, intensities scale the
    /// direction on top of the direction itself, the target sign flips it,
    /// and the layer gate attenuates each row.
    pub fn edit_increment(
        &self,
        g: &mut Graph,
        intensities: NodeId,
        direction: NodeId,
        gate: NodeId,
        target: i8,
    ) -> Result<NodeId> {
        let tile = g.matmul(self.ones_layers, direction)?; // L x d
        let scaled = g.mul(intensities, tile)?;
        let raw = g.add(scaled, tile)?;
        let signed = g.scale(raw, target as f64);
        let gate_tile = g.matmul(gate, self.ones_cols)?; // L x d
        g.mul(gate_tile, signed)
    }
}

// ── Inference wrappers ──────────────────────────────────────────────────

/// Result of a single-attribute edit.
#[derive(Debug, Clone)]
pub struct SingleEdit {
    /// Signed, gated increment that was added to the latent.
    pub increment: Tensor,
    pub edited: LatentCode,
}

fn check_latent(opts: &ModelOptions, latent: &LatentCode) -> Result<()> {
    let dims = opts.dims;
    if latent.shape() != (dims.layers, dims.dim) {
        return Err(Error::ShapeMismatch {
            op: "edit",
            lhs: latent.matrix().dims(),
            rhs: Dims(dims.layers, dims.dim),
        });
    }
    Ok(())
}

fn check_target(target: i8) -> Result<()> {
    if !matches!(target, -1 | 0 | 1) {
        return Err(Error::invalid("edit", "target must be -1, 0 or +1"));
    }
    Ok(())
}

/// Edit one attribute. A zero target returns the latent unchanged,
/// bit-exactly.
pub fn edit_single(
    params: &EditorParams,
    opts: &ModelOptions,
    latent: &LatentCode,
    attribute: usize,
    target: i8,
) -> Result<SingleEdit> {
    check_latent(opts, latent)?;
    check_target(target)?;
    if attribute >= opts.dims.attrs {
        return Err(Error::IndexOutOfRange {
            op: "edit_single",
            index: attribute,
            bound: opts.dims.attrs,
        });
    }
    if target == 0 {
        return Ok(SingleEdit {
            increment: Tensor::zeros(opts.dims.layers, opts.dims.dim),
            edited: latent.clone(),
        });
    }

    let mut g = Graph::new();
    let nodes = register_editor(&mut g, params, *opts)?;
    let w = g.leaf(latent.matrix().clone());
    let intensities = nodes.intensity_map(&mut g, w)?;
    let direction = nodes.normalized_direction(&mut g, attribute)?;
    let gate = nodes.layer_gate(&mut g, attribute)?;
    let inc = nodes.edit_increment(&mut g, intensities, direction, gate, target)?;
    let edited = g.add(w, inc)?;

    Ok(SingleEdit {
        increment: g.value(inc).clone(),
        edited: LatentCode::new(g.value(edited).clone())?,
    })
}

/// Signed, gated increments for every attribute in one forward pass;
/// attributes with a zero target contribute exact zero matrices.
pub fn edit_increments(
    params: &EditorParams,
    opts: &ModelOptions,
    latent: &LatentCode,
    targets: &[i8],
) -> Result<Vec<Tensor>> {
    check_latent(opts, latent)?;
    if targets.len() != opts.dims.attrs {
        return Err(Error::invalid(
            "edit_increments",
            format!(
                "expected {} targets, got {}",
                opts.dims.attrs,
                targets.len()
            ),
        ));
    }
    for &t in targets {
        check_target(t)?;
    }

    let zero = Tensor::zeros(opts.dims.layers, opts.dims.dim);
    if targets.iter().all(|&t| t == 0) {
        return Ok(vec![zero; targets.len()]);
    }

    let mut g = Graph::new();
    let nodes = register_editor(&mut g, params, *opts)?;
    let w = g.leaf(latent.matrix().clone());
    let intensities = nodes.intensity_map(&mut g, w)?;

    let mut out = Vec::with_capacity(targets.len());
    for (m, &target) in targets.iter().enumerate() {
        if target == 0 {
            out.push(zero.clone());
            continue;
        }
        let direction = nodes.normalized_direction(&mut g, m)?;
        let gate = nodes.layer_gate(&mut g, m)?;
        let inc = nodes.edit_increment(&mut g, intensities, direction, gate, target)?;
        out.push(g.value(inc).clone());
    }
    Ok(out)
}

/// Elementwise merge keeping the entry with the largest absolute value;
/// ties keep the larger signed value, so the merge is commutative and
/// idempotent and a zero matrix is its identity.
pub fn absmax_merge(deltas: &[Tensor]) -> Result<Tensor> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::invalid("absmax_merge", "empty delta list"))?;
    let mut out = first.clone();
    for delta in &deltas[1..] {
        if delta.shape() != out.shape() {
            return Err(Error::ShapeMismatch {
                op: "absmax_merge",
                lhs: out.dims(),
                rhs: delta.dims(),
            });
        }
        for (o, &d) in out.data_mut().iter_mut().zip(delta.data()) {
            let keep_current = d.abs() < o.abs() || (d.abs() == o.abs() && *o >= d);
            if !keep_current {
                *o = d;
            }
        }
    }
    Ok(out)
}

/// Apply several attribute edits at once by absmax-merging the realized
/// per-attribute increments.
pub fn edit_multi(
    params: &EditorParams,
    opts: &ModelOptions,
    latent: &LatentCode,
    targets: &AttributeTarget,
) -> Result<LatentCode> {
    if targets.values().iter().all(|&t| t == 0) {
        return Ok(latent.clone());
    }
    let increments = edit_increments(params, opts, latent, targets.values())?;
    let merged = absmax_merge(&increments)?;
    LatentCode::new(latent.matrix().add(&merged)?)
}
