//! Training loop: style-mixed latents from the synthetic world, per-attribute
//! toggled targets, the five-term objective, backprop, and AdaBelief steps.
//!
//! Per-sample contributions are summed over attributes and averaged over the
//! batch; the sparsity term depends only on the directions. Sums run in a
//! fixed order, so a (config, seed) pair fully determines the trajectory.

use crate::checkpoint::Checkpoint;
use crate::config::{TargetMode, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::loss::{
    classification_loss, direction_loss, identity_loss, neighborhood_loss, sparsity_loss,
    total_loss, LossReport, LossTerms, LossWeights,
};
use crate::model::{register_editor, EditorNodes, EditorParams, LatentCode};
use crate::optim::AdaBelief;
use crate::rng::{SplitMix64, Stream};
use crate::tensor::Tensor;
use crate::world::{build_world, register_world, SyntheticWorld, WorldNodes};

/// One training sample: a latent, its world annotations, and the requested
/// per-attribute targets.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub latent: LatentCode,
    pub labels: Vec<i8>,
    pub targets: Vec<i8>,
}

/// Outcome of a run. `diverged_at` is set when the loss went non-finite and
/// the checkpoint holds the last state with a finite loss.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossReport>,
    pub diverged_at: Option<usize>,
}

/// Loss weights with ablated terms masked to zero.
pub fn effective_weights(config: &TrainConfig) -> LossWeights {
    let mut weights = config.weights;
    if config.ablation.disable_direction_loss {
        weights.direction = 0.0;
    }
    if config.ablation.disable_sparsity_loss {
        weights.sparsity = 0.0;
    }
    weights
}

/// Assemble the full objective for one batch into `g`. Training targets must
/// be nonzero (a zero target would contribute a constant, gradient-free
/// branch).
pub fn assemble_batch_loss(
    g: &mut Graph,
    editor: &EditorNodes,
    world: &WorldNodes,
    weights: &LossWeights,
    batch: &[SampleData],
) -> Result<(NodeId, LossTerms)> {
    if batch.is_empty() {
        return Err(Error::invalid("train", "empty batch"));
    }
    let attrs = batch[0].labels.len();

    let directions: Vec<NodeId> = (0..attrs)
        .map(|m| editor.normalized_direction(g, m))
        .collect::<Result<_>>()?;
    let gates: Vec<NodeId> = (0..attrs)
        .map(|m| editor.layer_gate(g, m))
        .collect::<Result<_>>()?;

    let mut class_terms = Vec::with_capacity(batch.len());
    let mut nb_terms = Vec::with_capacity(batch.len());
    let mut dir_terms = Vec::with_capacity(batch.len());
    let mut id_terms = Vec::with_capacity(batch.len());

    for sample in batch {
        if sample.targets.iter().any(|&t| t == 0) {
            return Err(Error::invalid("train", "training targets must be +/-1"));
        }
        let w = g.leaf(sample.latent.matrix().clone());
        let intensities = editor.intensity_map(g, w)?;
        let image_orig = world.generate(g, w)?;
        let psi_orig = world.identity(g, image_orig)?;

        let mut edited_nodes = Vec::with_capacity(attrs);
        let mut sample_class = Vec::with_capacity(attrs);
        let mut sample_id = Vec::with_capacity(attrs);
        for m in 0..attrs {
            let increment =
                editor.edit_increment(g, intensities, directions[m], gates[m], sample.targets[m])?;
            let edited = g.add(w, increment)?;
            edited_nodes.push(edited);

            let image = world.generate(g, edited)?;
            let logits = world.classify(g, image)?;
            let psi = world.identity(g, image)?;

            // Target bits: the edited attribute takes its toggled value, the
            // others keep their annotations.
            let bits: Vec<f64> = (0..attrs)
                .map(|j| {
                    let v = if j == m {
                        sample.targets[m]
                    } else {
                        sample.labels[j]
                    };
                    f64::from(v + 1) / 2.0
                })
                .collect();
            let bits = g.leaf(Tensor::from_vec(attrs, 1, bits)?);
            sample_class.push(classification_loss(g, logits, bits)?);
            sample_id.push(identity_loss(g, psi_orig, psi)?);
        }

        class_terms.push(sum_list(g, &sample_class)?);
        id_terms.push(sum_list(g, &sample_id)?);
        nb_terms.push(neighborhood_loss(g, &edited_nodes, w)?);
        dir_terms.push(direction_loss(g, intensities, &directions)?);
    }

    let inv_batch = 1.0 / batch.len() as f64;
    let class = batch_mean(g, &class_terms, inv_batch)?;
    let neighborhood = batch_mean(g, &nb_terms, inv_batch)?;
    let direction = batch_mean(g, &dir_terms, inv_batch)?;
    let identity = batch_mean(g, &id_terms, inv_batch)?;
    let sparsity = sparsity_loss(g, &directions)?;

    let terms = LossTerms {
        class,
        neighborhood,
        sparsity,
        direction,
        identity,
    };
    let total = total_loss(g, &terms, weights)?;
    Ok((total, terms))
}

fn sum_list(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

fn batch_mean(g: &mut Graph, nodes: &[NodeId], inv_batch: f64) -> Result<NodeId> {
    let total = sum_list(g, nodes)?;
    Ok(g.scale(total, inv_batch))
}

/// Draw one training batch from the dataset stream.
pub fn sample_batch(
    config: &TrainConfig,
    world: &SyntheticWorld,
    rng: &mut SplitMix64,
) -> Result<Vec<SampleData>> {
    (0..config.batch_size)
        .map(|_| {
            let latent = world.sample_latent(rng);
            let labels = world.annotate(&latent)?;
            let targets = match config.target_mode {
                TargetMode::Toggle => labels.iter().map(|&l| -l).collect(),
                TargetMode::Random => labels
                    .iter()
                    .map(|_| if rng.coin() { 1 } else { -1 })
                    .collect(),
            };
            Ok(SampleData {
                latent,
                labels,
                targets,
            })
        })
        .collect()
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let factor = max_norm / total;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

pub fn train(config: &TrainConfig) -> Result<TrainResult> {
    train_observed(config, |_, _| {})
}

/// Train with a per-step observer (step index, loss report).
pub fn train_observed(
    config: &TrainConfig,
    mut observer: impl FnMut(usize, &LossReport),
) -> Result<TrainResult> {
    config.validate()?;
    let world = build_world(&config.world_config())?;
    let mut init_rng = SplitMix64::for_stream(config.seed, Stream::ParamInit);
    let mut params = EditorParams::init(config.dims, &mut init_rng);
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|(_, t)| t.shape()).collect();
    let mut optimizer = AdaBelief::new(config.optimizer, &shapes)?;
    let mut data_rng = SplitMix64::for_stream(config.seed, Stream::Dataset);

    let opts = config.model_options();
    let weights = effective_weights(config);
    let mut history: Vec<LossReport> = Vec::with_capacity(config.iterations);
    // Last parameters/optimizer state whose loss evaluated finite.
    let mut last_good: Option<(EditorParams, crate::optim::OptimizerState, LossReport)> = None;

    for step in 0..config.iterations {
        let batch = sample_batch(config, &world, &mut data_rng)?;

        let mut g = Graph::new();
        let editor = register_editor(&mut g, &params, opts)?;
        let world_nodes = register_world(&mut g, &world);
        let (total, terms) = assemble_batch_loss(&mut g, &editor, &world_nodes, &weights, &batch)?;
        let report = terms.report(&g, total);

        if !report.total.is_finite() {
            let (p, s, r) = last_good.ok_or(Error::Diverged { step })?;
            return Ok(TrainResult {
                checkpoint: finish(config, world, p, s, Some(r)),
                history,
                diverged_at: Some(step),
            });
        }
        history.push(report);
        observer(step, &report);
        last_good = Some((params.clone(), optimizer.state.clone(), report));

        let grads_all = g.backward(total)?;
        let mut grads: Vec<Tensor> = editor
            .param_leaves()
            .iter()
            .zip(&shapes)
            .map(|(&leaf, &shape)| grads_all.dense(leaf, shape))
            .collect();
        if config.grad_clip_norm > 0.0 {
            clip_gradients(&mut grads, config.grad_clip_norm);
        }

        let mut named = params.tensors_mut();
        match optimizer.step(&mut named, &grads) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { .. }) => {
                let (p, s, r) = last_good.expect("set above");
                return Ok(TrainResult {
                    checkpoint: finish(config, world, p, s, Some(r)),
                    history,
                    diverged_at: Some(step),
                });
            }
            Err(e) => return Err(e),
        }
    }

    let metrics = history.last().copied();
    Ok(TrainResult {
        checkpoint: finish(config, world, params, optimizer.state, metrics),
        history,
        diverged_at: None,
    })
}

fn finish(
    config: &TrainConfig,
    world: SyntheticWorld,
    params: EditorParams,
    state: crate::optim::OptimizerState,
    metrics: Option<LossReport>,
) -> Checkpoint {
    Checkpoint {
        config: config.clone(),
        world,
        params,
        optimizer: Some(state),
        metrics,
    }
}

/// A freshly initialized, untrained checkpoint (world + initial parameters).
pub fn initialize(config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let world = build_world(&config.world_config())?;
    let mut init_rng = SplitMix64::for_stream(config.seed, Stream::ParamInit);
    let params = EditorParams::init(config.dims, &mut init_rng);
    Ok(Checkpoint {
        config: config.clone(),
        world,
        params,
        optimizer: None,
        metrics: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check_at;
    use crate::model::DirectionNorm;

    fn quick_config() -> TrainConfig {
        TrainConfig {
            iterations: 200,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_over_two_hundred_steps() {
        let result = train(&quick_config()).unwrap();
        assert!(result.diverged_at.is_none());
        let first = result.history.first().unwrap().total;
        let last = result.history.last().unwrap().total;
        assert!(last < first, "no progress: {first} -> {last}");
    }

    #[test]
    fn sparsity_ablation_masks_the_term_exactly() {
        let mut config = quick_config();
        config.iterations = 3;
        config.ablation.disable_sparsity_loss = true;
        let result = train(&config).unwrap();
        for report in &result.history {
            let weights = effective_weights(&config);
            let expected = weights.class * report.class
                + weights.neighborhood * report.neighborhood
                + weights.direction * report.direction
                + weights.identity * report.identity;
            assert!((report.total - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let mut config = quick_config();
        config.iterations = 50;
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(
            a.history.last().unwrap().total.to_bits(),
            b.history.last().unwrap().total.to_bits()
        );
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn directions_stay_unit_after_every_step() {
        let mut config = quick_config();
        config.iterations = 25;
        let result = train(&config).unwrap();
        for m in 0..config.dims.attrs {
            let p = result
                .checkpoint
                .params
                .normalized_direction(m, DirectionNorm::L2)
                .unwrap();
            assert!((p.frobenius_norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let config = quick_config();
        let world = build_world(&config.world_config()).unwrap();
        let mut init_rng = SplitMix64::for_stream(11, Stream::ParamInit);
        let params = EditorParams::init(config.dims, &mut init_rng);
        let mut data_rng = SplitMix64::for_stream(12, Stream::Dataset);
        let single = TrainConfig {
            batch_size: 1,
            ..config.clone()
        };
        let batch = sample_batch(&single, &world, &mut data_rng).unwrap();

        let mut g = Graph::new();
        let editor = register_editor(&mut g, &params, config.model_options()).unwrap();
        let world_nodes = register_world(&mut g, &world);
        let (total, _) =
            assemble_batch_loss(&mut g, &editor, &world_nodes, &config.weights, &batch).unwrap();
        let eps = 1e-6;
        assert!(g.kink_margin() > 10.0 * eps, "probe point straddles a kink");
        let err = grad_check_at(&mut g, total, &editor.param_leaves(), eps).unwrap();
        assert!(err < 1e-4, "full-loss gradient rel err {err}");
    }

    #[test]
    fn random_target_mode_trains() {
        let mut config = quick_config();
        config.iterations = 5;
        config.target_mode = TargetMode::Random;
        let result = train(&config).unwrap();
        assert_eq!(result.history.len(), 5);
    }
}
