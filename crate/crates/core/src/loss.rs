//! Training objectives, each assembled as a differentiable graph fragment.
//!
//! Five terms: direction sparsity (L1 of the normalized directions),
//! direction consistency (cosine distance between intensity-scaled and raw
//! directions), neighborhood (Frobenius distance between edited and original
//! latents), multi-target classification (BCE with logits), and identity
//! (cosine distance in the identity feature space).

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Nonnegative weight per loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub neighborhood: f64,
    pub sparsity: f64,
    pub direction: f64,
    pub identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 2.0,
            neighborhood: 0.3,
            sparsity: 1.0,
            direction: 1.0,
            identity: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_class", self.class),
            ("lambda_neighborhood", self.neighborhood),
            ("lambda_sparsity", self.sparsity),
            ("lambda_direction", self.direction),
            ("lambda_identity", self.identity),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be a nonnegative finite number, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term scalar values plus the weighted total for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub class: f64,
    pub neighborhood: f64,
    pub sparsity: f64,
    pub direction: f64,
    pub identity: f64,
    pub total: f64,
}

/// Graph handles for the five assembled terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub class: NodeId,
    pub neighborhood: NodeId,
    pub sparsity: NodeId,
    pub direction: NodeId,
    pub identity: NodeId,
}

impl LossTerms {
    pub fn report(&self, g: &Graph, total: NodeId) -> LossReport {
        let v = |id: NodeId| g.value(id).data()[0];
        LossReport {
            class: v(self.class),
            neighborhood: v(self.neighborhood),
            sparsity: v(self.sparsity),
            direction: v(self.direction),
            identity: v(self.identity),
            total: v(total),
        }
    }
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut iter = nodes.iter();
    let first = *iter
        .next()
        .ok_or_else(|| Error::invalid("loss", "no terms to sum"))?;
    let mut acc = first;
    for &n in iter {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// Sum of L1 norms of the (already normalized) direction rows.
pub fn sparsity_loss(g: &mut Graph, directions: &[NodeId]) -> Result<NodeId> {
    let norms: Vec<NodeId> = directions.iter().map(|&p| g.l1_norm(p)).collect();
    sum_nodes(g, &norms)
}

/// Sum over attributes and latent rows of the cosine distance between the
/// intensity-scaled direction and the direction itself.
pub fn direction_loss(
    g: &mut Graph,
    intensities: NodeId,
    directions: &[NodeId],
) -> Result<NodeId> {
    let rows = g.value(intensities).rows();
    let one = g.leaf(Tensor::scalar(1.0));
    let mut terms = Vec::with_capacity(rows * directions.len());
    for &p in directions {
        for i in 0..rows {
            let row = g.slice_rows(intensities, i, i + 1)?;
            let scaled = g.mul(row, p)?;
            let cos = g.cosine(scaled, p)?;
            terms.push(g.sub(one, cos)?);
        }
    }
    sum_nodes(g, &terms)
}

/// Sum over attributes of the Frobenius distance between each edited latent
/// and the original.
pub fn neighborhood_loss(g: &mut Graph, edited: &[NodeId], original: NodeId) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(edited.len());
    for &e in edited {
        let diff = g.sub(e, original)?;
        terms.push(g.l2_norm(diff));
    }
    sum_nodes(g, &terms)
}

/// Mean over attributes of BCE-with-logits against the target bits.
pub fn classification_loss(g: &mut Graph, logits: NodeId, target_bits: NodeId) -> Result<NodeId> {
    g.bce_with_logits(logits, target_bits)
}

/// Cosine distance between identity features of the original and edited
/// images.
pub fn identity_loss(g: &mut Graph, feat_orig: NodeId, feat_edit: NodeId) -> Result<NodeId> {
    let one = g.leaf(Tensor::scalar(1.0));
    let cos = g.cosine(feat_orig, feat_edit)?;
    g.sub(one, cos)
}

/// Weighted sum of the five terms (class, neighborhood, sparsity, direction,
/// identity, in that order).
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Result<NodeId> {
    let scaled = [
        g.scale(terms.class, weights.class),
        g.scale(terms.neighborhood, weights.neighborhood),
        g.scale(terms.sparsity, weights.sparsity),
        g.scale(terms.direction, weights.direction),
        g.scale(terms.identity, weights.identity),
    ];
    sum_nodes(g, &scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn leaf_rows(g: &mut Graph, rows: &[Vec<f64>]) -> Vec<NodeId> {
        rows.iter()
            .map(|r| g.leaf(Tensor::row_vector(r.clone())))
            .collect()
    }

    #[test]
    fn sparsity_of_one_hot_unit_is_one() {
        let mut g = Graph::new();
        let p = leaf_rows(&mut g, &[vec![0.0, 1.0, 0.0, 0.0]]);
        let s = sparsity_loss(&mut g, &p).unwrap();
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sparsity_of_uniform_unit_is_sqrt_d() {
        let d = 16;
        let mut g = Graph::new();
        let p = leaf_rows(&mut g, &[vec![1.0 / (d as f64).sqrt(); d]]);
        let s = sparsity_loss(&mut g, &p).unwrap();
        assert!((g.value(s).data()[0] - (d as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sparsity_matches_scalar_loop_on_random_unit_rows() {
        let mut rng = SplitMix64::new(4);
        let d = 12;
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let expected: f64 = rows.iter().flatten().map(|x| x.abs()).sum();
        let mut g = Graph::new();
        let p = leaf_rows(&mut g, &rows);
        let s = sparsity_loss(&mut g, &p).unwrap();
        assert!((g.value(s).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn direction_loss_zero_for_uniform_intensities() {
        let mut g = Graph::new();
        let intens = g.leaf(Tensor::ones(3, 4));
        let p = leaf_rows(&mut g, &[vec![0.5, -0.5, 0.5, -0.5]]);
        let l = direction_loss(&mut g, intens, &p).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-9);
    }

    #[test]
    fn direction_loss_invariant_to_row_scale() {
        // Cosine is scale-invariant, so a constant positive intensity per
        // row contributes zero.
        let mut g = Graph::new();
        let intens = g.leaf(
            Tensor::from_rows(&[vec![3.0; 4], vec![0.25; 4], vec![7.5; 4]]).unwrap(),
        );
        let p = leaf_rows(&mut g, &[vec![0.1, 0.2, -0.3, 0.4]]);
        let l = direction_loss(&mut g, intens, &p).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-9);
    }

    #[test]
    fn direction_loss_known_two_dim_value() {
        let s = 1.0 / 2f64.sqrt();
        let mut g = Graph::new();
        let intens = g.leaf(Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        let p = leaf_rows(&mut g, &[vec![s, s]]);
        let l = direction_loss(&mut g, intens, &p).unwrap();
        // scaled = (s, 0); cos = s^2 / (s * 1) = s; term = 1 - 1/sqrt(2).
        let expected = 1.0 - s;
        assert!((g.value(l).data()[0] - expected).abs() < 1e-9);
        assert!((g.value(l).data()[0] - 0.29289).abs() < 1e-5);
    }

    #[test]
    fn neighborhood_loss_examples() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(2, 2));

        // Identical edits give 0.
        let same = g.leaf(Tensor::zeros(2, 2));
        let l = neighborhood_loss(&mut g, &[same], w).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        // A single entry off by 3 gives 3.
        let mut t = Tensor::zeros(2, 2);
        t.set(1, 0, 3.0);
        let e = g.leaf(t);
        let l = neighborhood_loss(&mut g, &[e], w).unwrap();
        assert!((g.value(l).data()[0] - 3.0).abs() < 1e-15);

        // Per-attribute norms 1 and 2 sum to 3.
        let mut t1 = Tensor::zeros(2, 2);
        t1.set(0, 0, 1.0);
        let mut t2 = Tensor::zeros(2, 2);
        t2.set(0, 1, 2.0);
        let e1 = g.leaf(t1);
        let e2 = g.leaf(t2);
        let l = neighborhood_loss(&mut g, &[e1, e2], w).unwrap();
        assert!((g.value(l).data()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn classification_loss_examples() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(1, 1, vec![0.0]).unwrap());
        let t = g.leaf(Tensor::from_vec(1, 1, vec![1.0]).unwrap());
        let l = classification_loss(&mut g, z, t).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let z = g.leaf(Tensor::from_vec(1, 1, vec![30.0]).unwrap());
        let t = g.leaf(Tensor::from_vec(1, 1, vec![1.0]).unwrap());
        let l = classification_loss(&mut g, z, t).unwrap();
        assert!(g.value(l).data()[0] < 1e-12);

        // mean(softplus(-1), softplus(-2))
        let z = g.leaf(Tensor::from_vec(1, 2, vec![1.0, -2.0]).unwrap());
        let t = g.leaf(Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        let l = classification_loss(&mut g, z, t).unwrap();
        let softplus = |x: f64| x.exp().ln_1p();
        let expected = 0.5 * (softplus(-1.0) + softplus(-2.0));
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
        assert!((g.value(l).data()[0] - 0.220095).abs() < 1e-6);
    }

    #[test]
    fn identity_loss_extremes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap());
        let same = g.leaf(Tensor::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap());
        let ortho = g.leaf(Tensor::from_vec(3, 1, vec![0.0, 1.0, 0.0]).unwrap());
        let anti = g.leaf(Tensor::from_vec(3, 1, vec![-1.0, 0.0, 0.0]).unwrap());

        let l0 = identity_loss(&mut g, a, same).unwrap();
        let l1 = identity_loss(&mut g, a, ortho).unwrap();
        let l2 = identity_loss(&mut g, a, anti).unwrap();
        assert!(g.value(l0).data()[0].abs() < 1e-9);
        assert!((g.value(l1).data()[0] - 1.0).abs() < 1e-9);
        assert!((g.value(l2).data()[0] - 2.0).abs() < 1e-9);
    }

    fn constant_terms(g: &mut Graph, values: [f64; 5]) -> LossTerms {
        let ids: Vec<NodeId> = values.iter().map(|&v| g.leaf(Tensor::scalar(v))).collect();
        LossTerms {
            class: ids[0],
            neighborhood: ids[1],
            sparsity: ids[2],
            direction: ids[3],
            identity: ids[4],
        }
    }

    #[test]
    fn total_with_unit_terms_and_default_weights() {
        let mut g = Graph::new();
        let terms = constant_terms(&mut g, [1.0; 5]);
        let total = total_loss(&mut g, &terms, &LossWeights::default()).unwrap();
        assert!((g.value(total).data()[0] - 9.3).abs() < 1e-12);
    }

    #[test]
    fn total_matches_dot_product_oracle() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..20 {
            let vals = [0; 5].map(|_| rng.uniform(0.0, 3.0));
            let w = LossWeights {
                class: rng.uniform(0.0, 4.0),
                neighborhood: rng.uniform(0.0, 4.0),
                sparsity: rng.uniform(0.0, 4.0),
                direction: rng.uniform(0.0, 4.0),
                identity: rng.uniform(0.0, 4.0),
            };
            let expected = w.class * vals[0]
                + w.neighborhood * vals[1]
                + w.sparsity * vals[2]
                + w.direction * vals[3]
                + w.identity * vals[4];
            let mut g = Graph::new();
            let terms = constant_terms(&mut g, vals);
            let total = total_loss(&mut g, &terms, &w).unwrap();
            assert!((g.value(total).data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_weight_removes_gradient_exactly() {
        // d/dx of the weighted total where x feeds two terms; zeroing one
        // weight must match the gradient of the remaining sum bit-for-bit.
        let build = |weights: &LossWeights, with_identity_term: bool| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_vec(1, 3, vec![0.4, -1.2, 0.7]).unwrap());
            let s = g.sigmoid(x);
            let class = g.mean(s);
            let neighborhood = g.l2_norm(x);
            let sparsity = g.l1_norm(x);
            let sq = g.mul(x, x).unwrap();
            let direction = g.sum(sq);
            let identity = if with_identity_term {
                g.l2_norm(sq)
            } else {
                g.leaf(Tensor::scalar(0.0))
            };
            let terms = LossTerms {
                class,
                neighborhood,
                sparsity,
                direction,
                identity,
            };
            let total = total_loss(&mut g, &terms, weights).unwrap();
            let grads = g.backward(total).unwrap();
            grads
                .dense(x, (1, 3))
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };

        let zeroed = LossWeights {
            identity: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(build(&zeroed, true), build(&zeroed, false));
    }

    #[test]
    fn losses_are_nonnegative_on_random_inputs() {
        let mut rng = SplitMix64::new(31);
        for _ in 0..50 {
            let mut g = Graph::new();
            let dirs: Vec<NodeId> = (0..3)
                .map(|_| {
                    let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
                    g.leaf(Tensor::row_vector(v))
                })
                .collect();
            let intens_data: Vec<f64> = (0..24).map(|_| rng.uniform(0.0, 2.0)).collect();
            let intens = g.leaf(Tensor::from_vec(4, 6, intens_data).unwrap());
            let w = g.leaf(Tensor::from_vec(
                4,
                6,
                (0..24).map(|_| rng.normal()).collect(),
            )
            .unwrap());
            let e = g.leaf(Tensor::from_vec(
                4,
                6,
                (0..24).map(|_| rng.normal()).collect(),
            )
            .unwrap());
            let fa = g.leaf(Tensor::from_vec(
                5,
                1,
                (0..5).map(|_| rng.normal()).collect(),
            )
            .unwrap());
            let fb = g.leaf(Tensor::from_vec(
                5,
                1,
                (0..5).map(|_| rng.normal()).collect(),
            )
            .unwrap());

            let sp = sparsity_loss(&mut g, &dirs).unwrap();
            let dl = direction_loss(&mut g, intens, &dirs).unwrap();
            let nb = neighborhood_loss(&mut g, &[e], w).unwrap();
            let id = identity_loss(&mut g, fa, fb).unwrap();
            assert!(g.value(sp).data()[0] >= 0.0);
            assert!(g.value(dl).data()[0] >= 0.0);
            assert!(g.value(nb).data()[0] >= 0.0);
            let idv = g.value(id).data()[0];
            assert!((0.0..=2.0 + 1e-12).contains(&idv));
        }
    }

    #[test]
    fn weights_validation_rejects_negative() {
        let w = LossWeights {
            sparsity: -0.1,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
