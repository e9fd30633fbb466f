//! Gradient training of the relevance scorer on binary feedback labels.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{
    sigmoid, AgentIds, FeatureVector, IdDelta, Moments, RerankerError, RerankerParams, FEATURE_DIM,
    UNK_ID,
};

/// Probabilities are clamped to [CLAMP, 1 - CLAMP] before logs.
const CLAMP: f64 = 1e-12;

/// One labeled training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub ids: AgentIds,
    pub features: FeatureVector,
    pub label: u8,
}

/// Gradient of the mean BCE loss, mirroring the parameter shape. ID entries
/// exist only for IDs present in the batch; `"unk"` never accrues one.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w_shared: Vec<f64>,
    pub bias_shared: f64,
    pub tid: BTreeMap<String, IdDelta>,
    pub mid: BTreeMap<String, IdDelta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Fraction of the run's steps spent in linear warmup.
    pub warmup_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_fraction: 0.05,
        }
    }
}

/// Mean binary cross-entropy over the batch and its exact analytic gradient.
pub fn bce_loss_and_grad(
    params: &RerankerParams,
    batch: &[TrainExample],
) -> Result<(f64, Gradient), RerankerError> {
    if batch.is_empty() {
        return Err(RerankerError::EmptyDataset);
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = Gradient {
        w_shared: vec![0.0; FEATURE_DIM],
        bias_shared: 0.0,
        tid: BTreeMap::new(),
        mid: BTreeMap::new(),
    };

    for ex in batch {
        debug_assert!(ex.label <= 1);
        let p = sigmoid(params.logit(&ex.ids, &ex.features)?);
        let f = ex.label as f64;
        let p_safe = p.clamp(CLAMP, 1.0 - CLAMP);
        loss -= (f * p_safe.ln() + (1.0 - f) * (1.0 - p_safe).ln()) / n;

        // d(mean BCE)/d(logit) for this example
        let dz = (p - f) / n;
        grad.bias_shared += dz;
        for (g, x) in grad.w_shared.iter_mut().zip(ex.features.values()) {
            *g += dz * x;
        }
        for (map, id) in [(&mut grad.tid, &ex.ids.tid), (&mut grad.mid, &ex.ids.mid)] {
            if id == UNK_ID {
                continue;
            }
            let slot = map.entry(id.clone()).or_insert_with(|| IdDelta {
                w: vec![0.0; FEATURE_DIM],
                bias: 0.0,
            });
            slot.bias += dz;
            for (g, x) in slot.w.iter_mut().zip(ex.features.values()) {
                *g += dz * x;
            }
        }
    }
    Ok((loss, grad))
}

/// Replaces both IDs with `"unk"` for each sample independently with
/// probability `rate`.
pub fn apply_id_dropout(batch: &mut [TrainExample], rate: f64, rng: &mut impl Rng) {
    assert!((0.0..=1.0).contains(&rate));
    for ex in batch.iter_mut() {
        if rng.gen::<f64>() < rate {
            ex.ids = AgentIds::unknown();
        }
    }
}

/// Mini-batch Adam on the BCE objective with linear warmup.
///
/// Shuffling is seeded, so identical inputs produce bit-identical parameters.
/// `epochs = 0` returns the parameters unchanged.
pub fn train(
    mut params: RerankerParams,
    dataset: &[TrainExample],
    epochs: u32,
    config: &OptimizerConfig,
    seed: u64,
) -> Result<RerankerParams, RerankerError> {
    if dataset.is_empty() {
        return Err(RerankerError::EmptyDataset);
    }
    if epochs == 0 {
        return Ok(params);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = epochs as u64 * batches_per_epoch as u64;
    let warmup_steps = ((config.warmup_fraction * total_steps as f64).ceil()) as u64;

    let mut run_step = 0u64;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let (loss, grad) = bce_loss_and_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(RerankerError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            run_step += 1;
            let warm = if warmup_steps == 0 {
                1.0
            } else {
                (run_step as f64 / warmup_steps as f64).min(1.0)
            };
            apply_adam(&mut params, &grad, config, config.learning_rate * warm);
        }
    }
    Ok(params)
}

fn apply_adam(params: &mut RerankerParams, grad: &Gradient, cfg: &OptimizerConfig, lr: f64) {
    params.opt.step += 1;
    let t = params.opt.step;

    adam_block(
        &mut params.w_shared,
        &mut params.bias_shared,
        &mut params.opt.shared,
        &grad.w_shared,
        grad.bias_shared,
        cfg,
        lr,
        t,
    );
    for (id, g) in &grad.tid {
        let moments = params
            .opt
            .tid
            .entry(id.clone())
            .or_insert_with(Moments::zero);
        let delta = params
            .tid_deltas
            .entry(id.clone())
            .or_insert_with(IdDelta::zero);
        adam_block(
            &mut delta.w,
            &mut delta.bias,
            moments,
            &g.w,
            g.bias,
            cfg,
            lr,
            t,
        );
    }
    for (id, g) in &grad.mid {
        let moments = params
            .opt
            .mid
            .entry(id.clone())
            .or_insert_with(Moments::zero);
        let delta = params
            .mid_deltas
            .entry(id.clone())
            .or_insert_with(IdDelta::zero);
        adam_block(
            &mut delta.w,
            &mut delta.bias,
            moments,
            &g.w,
            g.bias,
            cfg,
            lr,
            t,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_block(
    w: &mut [f64],
    bias: &mut f64,
    moments: &mut Moments,
    grad_w: &[f64],
    grad_bias: f64,
    cfg: &OptimizerConfig,
    lr: f64,
    t: u64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..w.len() {
        moments.m_w[i] = cfg.beta1 * moments.m_w[i] + (1.0 - cfg.beta1) * grad_w[i];
        moments.v_w[i] = cfg.beta2 * moments.v_w[i] + (1.0 - cfg.beta2) * grad_w[i] * grad_w[i];
        let m_hat = moments.m_w[i] / bc1;
        let v_hat = moments.v_w[i] / bc2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    moments.m_bias = cfg.beta1 * moments.m_bias + (1.0 - cfg.beta1) * grad_bias;
    moments.v_bias = cfg.beta2 * moments.v_bias + (1.0 - cfg.beta2) * grad_bias * grad_bias;
    let m_hat = moments.m_bias / bc1;
    let v_hat = moments.v_bias / bc2;
    *bias -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector(values.to_vec())
    }

    fn random_features(rng: &mut impl Rng) -> FeatureVector {
        FeatureVector((0..FEATURE_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    fn random_params(rng: &mut impl Rng, ids: &[&str], mids: &[&str]) -> RerankerParams {
        let mut p = RerankerParams::zeros();
        p.w_shared = (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.bias_shared = rng.gen_range(-1.0..1.0);
        for id in ids {
            p.tid_deltas.insert(
                id.to_string(),
                IdDelta {
                    w: (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    bias: rng.gen_range(-1.0..1.0),
                },
            );
        }
        for id in mids {
            p.mid_deltas.insert(
                id.to_string(),
                IdDelta {
                    w: (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    bias: rng.gen_range(-1.0..1.0),
                },
            );
        }
        p
    }

    #[test]
    fn single_example_at_half_prob_has_ln2_loss() {
        let params = RerankerParams::zeros();
        let batch = vec![TrainExample {
            ids: AgentIds::unknown(),
            features: fv(&[0.0; FEATURE_DIM]),
            label: 1,
        }];
        let (loss, _) = bce_loss_and_grad(&params, &batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    /// Central finite differences on the mean BCE loss, perturbing one
    /// coordinate at a time.
    fn finite_diff_check(params: &RerankerParams, batch: &[TrainExample], h: f64, tol: f64) {
        let (_, grad) = bce_loss_and_grad(params, batch).unwrap();
        let loss_at = |p: &RerankerParams| bce_loss_and_grad(p, batch).unwrap().0;
        let mut max_rel = 0.0f64;
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            // scaled error: relative for O(1) components, absolute below
            // that, so float roundoff in the O(1) loss cannot dominate
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        };

        for i in 0..FEATURE_DIM {
            let mut up = params.clone();
            up.w_shared[i] += h;
            let mut down = params.clone();
            down.w_shared[i] -= h;
            check(grad.w_shared[i], loss_at(&up), loss_at(&down));
        }
        {
            let mut up = params.clone();
            up.bias_shared += h;
            let mut down = params.clone();
            down.bias_shared -= h;
            check(grad.bias_shared, loss_at(&up), loss_at(&down));
        }
        for (id, g) in &grad.tid {
            for i in 0..FEATURE_DIM {
                let mut up = params.clone();
                up.tid_deltas.get_mut(id).unwrap().w[i] += h;
                let mut down = params.clone();
                down.tid_deltas.get_mut(id).unwrap().w[i] -= h;
                check(g.w[i], loss_at(&up), loss_at(&down));
            }
            let mut up = params.clone();
            up.tid_deltas.get_mut(id).unwrap().bias += h;
            let mut down = params.clone();
            down.tid_deltas.get_mut(id).unwrap().bias -= h;
            check(g.bias, loss_at(&up), loss_at(&down));
        }
        for (id, g) in &grad.mid {
            for i in 0..FEATURE_DIM {
                let mut up = params.clone();
                up.mid_deltas.get_mut(id).unwrap().w[i] += h;
                let mut down = params.clone();
                down.mid_deltas.get_mut(id).unwrap().w[i] -= h;
                check(g.w[i], loss_at(&up), loss_at(&down));
            }
        }
        assert!(max_rel <= tol, "max relative gradient error {max_rel}");
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..20 {
            let params = random_params(&mut rng, &["t1", "t2"], &["m1"]);
            let batch: Vec<TrainExample> = (0..8)
                .map(|i| TrainExample {
                    ids: AgentIds::new(if i % 2 == 0 { "t1" } else { "t2" }, "m1"),
                    features: random_features(&mut rng),
                    label: (i % 3 == 0) as u8,
                })
                .collect();
            finite_diff_check(&params, &batch, 1e-6, 1e-6);
        }
    }

    #[test]
    fn gradient_of_duplicate_pair_is_mean_of_singles() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let params = random_params(&mut rng, &["t1"], &["m1"]);
        let features = random_features(&mut rng);
        let make = |label| TrainExample {
            ids: AgentIds::new("t1", "m1"),
            features: features.clone(),
            label,
        };
        let (_, g_pos) = bce_loss_and_grad(&params, &[make(1)]).unwrap();
        let (_, g_neg) = bce_loss_and_grad(&params, &[make(0)]).unwrap();
        let (_, g_both) = bce_loss_and_grad(&params, &[make(1), make(0)]).unwrap();
        for i in 0..FEATURE_DIM {
            let mean = (g_pos.w_shared[i] + g_neg.w_shared[i]) / 2.0;
            assert!((g_both.w_shared[i] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn unk_never_accrues_gradient_entries() {
        let params = RerankerParams::zeros();
        let batch = vec![TrainExample {
            ids: AgentIds::unknown(),
            features: fv(&[1.0; FEATURE_DIM]),
            label: 1,
        }];
        let (_, grad) = bce_loss_and_grad(&params, &batch).unwrap();
        assert!(grad.tid.is_empty());
        assert!(grad.mid.is_empty());
    }

    fn separable_dataset(n: usize) -> Vec<TrainExample> {
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let mut values = vec![0.0; FEATURE_DIM];
                values[1] = if positive { 1.0 } else { 0.0 };
                values[7] = 1.0;
                TrainExample {
                    ids: AgentIds::new("t1", "m1"),
                    features: fv(&values),
                    label: positive as u8,
                }
            })
            .collect()
    }

    #[test]
    fn separable_data_reaches_full_accuracy_with_decreasing_loss() {
        let data = separable_dataset(200);
        let cfg = OptimizerConfig::default();
        let mut params = RerankerParams::zeros();
        let mut losses = Vec::new();
        for epoch in 0..4 {
            params = train(params, &data, 1, &cfg, 99 + epoch).unwrap();
            losses.push(bce_loss_and_grad(&params, &data).unwrap().0);
        }
        assert!(
            losses.windows(2).all(|w| w[1] < w[0]),
            "loss not strictly decreasing: {losses:?}"
        );
        let correct = data
            .iter()
            .filter(|ex| {
                let p = params.score(&ex.ids, &ex.features).unwrap();
                (p >= 0.5) == (ex.label == 1)
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = separable_dataset(10);
        let params = RerankerParams::zeros();
        let out = train(params.clone(), &data, 0, &OptimizerConfig::default(), 1).unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn same_seed_same_data_is_bit_identical() {
        let data = separable_dataset(64);
        let cfg = OptimizerConfig::default();
        let a = train(RerankerParams::zeros(), &data, 2, &cfg, 42).unwrap();
        let b = train(RerankerParams::zeros(), &data, 2, &cfg, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_zero_labels_push_mean_probability_down() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let data: Vec<TrainExample> = (0..100)
            .map(|_| TrainExample {
                ids: AgentIds::new("t1", "m1"),
                features: random_features(&mut rng),
                label: 0,
            })
            .collect();
        let init = RerankerParams::zeros();
        let mean = |p: &RerankerParams| {
            data.iter()
                .map(|ex| p.score(&ex.ids, &ex.features).unwrap())
                .sum::<f64>()
                / data.len() as f64
        };
        let before = mean(&init);
        let trained = train(init, &data, 2, &OptimizerConfig::default(), 5).unwrap();
        assert!(mean(&trained) < before);
    }

    #[test]
    fn id_dropout_edge_rates() {
        let mut batch = separable_dataset(20);
        let snapshot = batch.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        apply_id_dropout(&mut batch, 0.0, &mut rng);
        assert_eq!(batch, snapshot);
        apply_id_dropout(&mut batch, 1.0, &mut rng);
        assert!(batch.iter().all(|ex| ex.ids == AgentIds::unknown()));
    }

    #[test]
    fn id_dropout_rate_concentrates() {
        let mut batch = separable_dataset(10_000);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        apply_id_dropout(&mut batch, 0.1, &mut rng);
        let dropped = batch
            .iter()
            .filter(|ex| ex.ids == AgentIds::unknown())
            .count() as f64
            / batch.len() as f64;
        assert!(
            (0.08..=0.12).contains(&dropped),
            "dropped fraction {dropped}"
        );
    }
}
