//! A frozen, fully linear stand-in for the pretrained generator, attribute
//! classifiers, and identity network.
//!
//! The generator mixes the layer-weighted latent rows through a random
//! matrix; each attribute has a planted unit direction in latent space that
//! the classifier head responds to; and the identity projector is built
//! orthogonal to every planted direction's image, so moving exactly along a
//! planted direction is invisible to the identity features. That makes
//! "edit the attribute, keep the identity" a checkable statement: the
//! optimal edit direction is known at construction time.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::LatentCode;
use crate::rng::{SplitMix64, Stream};
use crate::tensor::Tensor;

/// How many nonzero coordinates each planted direction has.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantedSparsity {
    Dense,
    Sparse(usize),
}

/// Per-layer weight profile of the generator.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    /// 1/(1+i) for row i: later rows matter less.
    Decay,
    Uniform,
    Custom(Vec<f64>),
}

impl LayerWeights {
    pub fn resolve(&self, layers: usize) -> Result<Vec<f64>> {
        let weights = match self {
            LayerWeights::Decay => (0..layers).map(|i| 1.0 / (1.0 + i as f64)).collect(),
            LayerWeights::Uniform => vec![1.0; layers],
            LayerWeights::Custom(w) => {
                if w.len() != layers {
                    return Err(Error::Config(format!(
                        "layer_weights has {} entries, expected {layers}",
                        w.len()
                    )));
                }
                w.clone()
            }
        };
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("layer weights must be positive".into()));
        }
        Ok(weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub layers: usize,
    pub dim: usize,
    pub attrs: usize,
    pub image_dim: usize,
    pub identity_dim: usize,
    pub layer_weights: LayerWeights,
    pub planted_sparsity: PlantedSparsity,
    pub seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.attrs == 0 {
            return Err(Error::Config("world dimensions must be positive".into()));
        }
        if self.attrs > self.dim {
            return Err(Error::Config(format!(
                "attrs ({}) must not exceed dim ({})",
                self.attrs, self.dim
            )));
        }
        if let PlantedSparsity::Sparse(k) = self.planted_sparsity {
            if k == 0 || k > self.dim {
                return Err(Error::Config(format!(
                    "planted_sparsity must lie in 1..={}, got {k}",
                    self.dim
                )));
            }
        }
        if self.identity_dim + self.attrs > self.image_dim {
            return Err(Error::WorldConstruction(format!(
                "identity_dim + attrs ({} + {}) exceeds image_dim ({})",
                self.identity_dim, self.attrs, self.image_dim
            )));
        }
        self.layer_weights.resolve(self.layers)?;
        Ok(())
    }
}

/// The frozen world: generator mixing matrix, classifier heads with planted
/// unit directions, and an identity projector blind to those directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    /// Generator mixing matrix (image_dim x d).
    pub mixing: Tensor,
    /// Unit classifier heads, one row per attribute (M x image_dim).
    pub heads: Tensor,
    /// Classifier biases (M x 1).
    pub head_bias: Tensor,
    /// Identity projector with rows orthogonal to every planted image
    /// direction (q x image_dim).
    pub id_proj: Tensor,
    /// Planted unit directions, one row per attribute (M x d).
    pub planted: Tensor,
    /// Per-layer generator weights (1 x L).
    pub layer_weights: Tensor,
}

const NEAR_ORTHO_LIMIT: f64 = 0.3;
const BUILD_RETRIES: usize = 32;

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve S x = b for square S by Gaussian elimination with partial pivoting.
fn solve(s: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let n = s.rows();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| s.get(i, j)).collect();
            row.push(b[i]);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-10 {
            return Err(Error::WorldConstruction(
                "rank-deficient system while solving for classifier heads".into(),
            ));
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..=n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = a[row][n];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Gram-Schmidt orthonormalization; errors when the set is rank deficient.
fn orthonormalize(vectors: &[Vec<f64>], what: &str) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut r = v.clone();
        for b in &basis {
            let proj = dot(&r, b);
            for (ri, bi) in r.iter_mut().zip(b) {
                *ri -= proj * bi;
            }
        }
        if normalize(&mut r) < 1e-8 {
            return Err(Error::WorldConstruction(format!(
                "rank deficiency while orthonormalizing {what}"
            )));
        }
        basis.push(r);
    }
    Ok(basis)
}

fn gaussian_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn max_pairwise_cos(rows: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            worst = worst.max(dot(&rows[i], &rows[j]).abs());
        }
    }
    worst
}

/// Sparse planted directions on (where possible) disjoint coordinate
/// supports.
fn sample_sparse_planted(
    rng: &mut SplitMix64,
    dim: usize,
    attrs: usize,
    k: usize,
) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..dim).collect();
    rng.shuffle(&mut order);
    (0..attrs)
        .map(|m| {
            let mut u = vec![0.0; dim];
            for t in 0..k {
                // Wraps around only when attrs * k exceeds dim.
                let coord = order[(m * k + t) % dim];
                u[coord] = rng.normal();
            }
            normalize(&mut u);
            u
        })
        .collect()
}

pub fn build_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let (l, d, m) = (config.layers, config.dim, config.attrs);
    let (p_img, q) = (config.image_dim, config.identity_dim);
    let mut rng = SplitMix64::for_stream(config.seed, Stream::WorldBuild);

    let mixing = Tensor::from_vec(p_img, d, gaussian_vec(&mut rng, p_img * d))?;

    // Planted directions and classifier heads.
    let (planted_rows, head_rows) = match config.planted_sparsity {
        PlantedSparsity::Sparse(k) => {
            let gram = mixing.transpose().matmul(&mixing)?; // d x d
            let mut planted = Vec::new();
            for attempt in 0..=BUILD_RETRIES {
                planted = sample_sparse_planted(&mut rng, d, m, k);
                if max_pairwise_cos(&planted) < NEAR_ORTHO_LIMIT {
                    break;
                }
                if attempt == BUILD_RETRIES {
                    return Err(Error::WorldConstruction(
                        "could not plant near-orthogonal sparse directions".into(),
                    ));
                }
            }
            // Heads solved so the pulled-back head is proportional to the
            // planted direction: heads = normalize(A (A^T A)^-1 u).
            let mut heads = Vec::with_capacity(m);
            for u in &planted {
                let y = solve(&gram, u)?;
                let mut c = vec![0.0; p_img];
                for (i, ci) in c.iter_mut().enumerate() {
                    for (j, yj) in y.iter().enumerate() {
                        *ci += mixing.get(i, j) * yj;
                    }
                }
                if normalize(&mut c) < 1e-10 {
                    return Err(Error::WorldConstruction(
                        "degenerate classifier head".into(),
                    ));
                }
                heads.push(c);
            }
            (planted, heads)
        }
        PlantedSparsity::Dense => {
            // Heads sampled orthonormal; planted directions are their
            // pull-backs through the generator.
            let mut planted = Vec::new();
            let mut heads = Vec::new();
            for attempt in 0..=BUILD_RETRIES {
                let raw: Vec<Vec<f64>> =
                    (0..m).map(|_| gaussian_vec(&mut rng, p_img)).collect();
                heads = orthonormalize(&raw, "classifier heads")?;
                planted = heads
                    .iter()
                    .map(|c| {
                        let mut u = vec![0.0; d];
                        for (j, uj) in u.iter_mut().enumerate() {
                            for (i, ci) in c.iter().enumerate() {
                                *uj += mixing.get(i, j) * ci;
                            }
                        }
                        normalize(&mut u);
                        u
                    })
                    .collect();
                if max_pairwise_cos(&planted) < NEAR_ORTHO_LIMIT {
                    break;
                }
                if attempt == BUILD_RETRIES {
                    return Err(Error::WorldConstruction(
                        "could not derive near-orthogonal dense directions".into(),
                    ));
                }
            }
            (planted, heads)
        }
    };

    let planted = Tensor::from_rows(&planted_rows)?;
    let heads = Tensor::from_rows(&head_rows)?;
    let head_bias = Tensor::zeros(m, 1);

    // Identity projector: random rows projected orthogonal to every planted
    // image direction A u_m, then renormalized.
    let planted_images: Vec<Vec<f64>> = planted_rows
        .iter()
        .map(|u| {
            (0..p_img)
                .map(|i| (0..d).map(|j| mixing.get(i, j) * u[j]).sum())
                .collect()
        })
        .collect();
    let image_basis = orthonormalize(&planted_images, "planted image directions")?;
    let mut proj_rows = Vec::with_capacity(q);
    for _ in 0..q {
        let mut row = gaussian_vec(&mut rng, p_img);
        for b in &image_basis {
            let c = dot(&row, b);
            for (ri, bi) in row.iter_mut().zip(b) {
                *ri -= c * bi;
            }
        }
        if normalize(&mut row) < 1e-8 {
            return Err(Error::WorldConstruction(
                "rank deficiency while building the identity projector".into(),
            ));
        }
        proj_rows.push(row);
    }
    let id_proj = Tensor::from_rows(&proj_rows)?;

    let layer_weights = Tensor::row_vector(config.layer_weights.resolve(l)?);

    let world = SyntheticWorld {
        mixing,
        heads,
        head_bias,
        id_proj,
        planted,
        layer_weights,
    };
    world.check_invariants()?;
    Ok(world)
}

impl SyntheticWorld {
    pub fn layers(&self) -> usize {
        self.layer_weights.cols()
    }

    pub fn dim(&self) -> usize {
        self.mixing.cols()
    }

    pub fn attrs(&self) -> usize {
        self.heads.rows()
    }

    pub fn image_dim(&self) -> usize {
        self.mixing.rows()
    }

    pub fn identity_dim(&self) -> usize {
        self.id_proj.rows()
    }

    fn check_invariants(&self) -> Result<()> {
        let m = self.attrs();
        for i in 0..m {
            let norm = self.planted.row(i).frobenius_norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::WorldConstruction(format!(
                    "planted direction {i} has norm {norm}"
                )));
            }
        }
        for i in 0..m {
            for j in i + 1..m {
                let cos = self.planted.row(i).dot(&self.planted.row(j))?;
                if cos.abs() >= NEAR_ORTHO_LIMIT {
                    return Err(Error::WorldConstruction(format!(
                        "planted directions {i} and {j} have |cos| {:.3}",
                        cos.abs()
                    )));
                }
            }
        }
        // Identity projector must not see any planted direction.
        for i in 0..m {
            let u = self.planted.row(i).transpose(); // d x 1
            let image = self.mixing.matmul(&u)?;
            let seen = self.id_proj.matmul(&image)?;
            if seen.max_abs() > 1e-9 {
                return Err(Error::WorldConstruction(format!(
                    "identity projector sees planted direction {i} ({:.2e})",
                    seen.max_abs()
                )));
            }
        }
        Ok(())
    }

    /// Layer-weighted latent collapse followed by the mixing matrix:
    /// an image_dim x 1 "image".
    pub fn generate(&self, latent: &LatentCode) -> Result<Tensor> {
        let s = self.layer_weights.matmul(latent.matrix())?; // 1 x d
        self.mixing.matmul(&s.transpose())
    }

    /// Per-attribute logits (M x 1) for an image.
    pub fn classify(&self, image: &Tensor) -> Result<Tensor> {
        self.heads.matmul(image)?.add(&self.head_bias)
    }

    /// Sign labels in {-1, +1} per attribute; a zero logit maps to +1.
    pub fn annotate(&self, latent: &LatentCode) -> Result<Vec<i8>> {
        let logits = self.classify(&self.generate(latent)?)?;
        Ok(logits
            .data()
            .iter()
            .map(|&z| if z >= 0.0 { 1 } else { -1 })
            .collect())
    }

    /// Identity features (q x 1) for an image.
    pub fn identity_features(&self, image: &Tensor) -> Result<Tensor> {
        self.id_proj.matmul(image)
    }

    /// Draw a latent by style-mixing two base codes: each layer row takes
    /// one of two standard-normal d-vectors, chosen by a per-layer coin.
    pub fn sample_latent(&self, rng: &mut SplitMix64) -> LatentCode {
        let (l, d) = (self.layers(), self.dim());
        let base_a = gaussian_vec(rng, d);
        let base_b = gaussian_vec(rng, d);
        let mut data = Vec::with_capacity(l * d);
        for _ in 0..l {
            let row = if rng.coin() { &base_a } else { &base_b };
            data.extend_from_slice(row);
        }
        LatentCode::new(Tensor::from_vec(l, d, data).expect("sized by construction"))
            .expect("finite by construction")
    }
}

// ── Graph-side world maps (for differentiable training losses) ─────────

pub struct WorldNodes {
    pub mixing: NodeId,
    pub heads: NodeId,
    pub head_bias: NodeId,
    pub id_proj: NodeId,
    pub layer_weights: NodeId,
}

pub fn register_world(g: &mut Graph, world: &SyntheticWorld) -> WorldNodes {
    WorldNodes {
        mixing: g.leaf(world.mixing.clone()),
        heads: g.leaf(world.heads.clone()),
        head_bias: g.leaf(world.head_bias.clone()),
        id_proj: g.leaf(world.id_proj.clone()),
        layer_weights: g.leaf(world.layer_weights.clone()),
    }
}

impl WorldNodes {
    pub fn generate(&self, g: &mut Graph, latent: NodeId) -> Result<NodeId> {
        let s = g.matmul(self.layer_weights, latent)?;
        let st = g.transpose(s);
        g.matmul(self.mixing, st)
    }

    pub fn classify(&self, g: &mut Graph, image: NodeId) -> Result<NodeId> {
        let z = g.matmul(self.heads, image)?;
        g.add(z, self.head_bias)
    }

    pub fn identity(&self, g: &mut Graph, image: NodeId) -> Result<NodeId> {
        g.matmul(self.id_proj, image)
    }
}
