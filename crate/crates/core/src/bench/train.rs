use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{argmax_labels, loss_and_grad, ToyModel};
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::metrics::{boundary_fscore, confusion_matrix, miou, LabelMap};
use crate::tensor::{lit, FeatureMap, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Seeds the per-epoch scene order.
    pub seed: u64,
    /// Backpropagate through the guidance branch of an SDN neck.
    pub guidance_grad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 4, learning_rate: 0.1, momentum: 0.9, seed: 0, guidance_grad: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean loss over the whole dataset before the first update.
    pub initial_loss: f64,
    /// Mean minibatch loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the whole dataset after the last update.
    pub final_loss: f64,
    pub steps: usize,
}

struct Sample<T> {
    image: FeatureMap<T>,
    labels: LabelMap,
}

fn cast_scenes<T: Scalar>(scenes: &[Scene]) -> Vec<Sample<T>> {
    scenes.iter().map(|s| Sample { image: s.image.cast(), labels: s.labels.clone() }).collect()
}

fn dataset_loss<T: Scalar>(model: &ToyModel<T>, data: &[Sample<T>]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        total += loss_and_grad(&model.forward(&s.image)?, &s.labels)?.0;
    }
    Ok(total / data.len() as f64)
}

/// Minibatch SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − η·v`.
/// Scenes are visited in an order reshuffled each epoch from `cfg.seed`.
pub fn train<T: Scalar>(model: &mut ToyModel<T>, scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidParameter(format!("bad training config {cfg:?}")));
    }
    let data = cast_scenes::<T>(scenes);
    let initial_loss = dataset_loss(model, &data)?;
    let mut velocity: Vec<Tensor<T>> = model.params_mut().into_iter().map(|p| p.zeros_like()).collect();
    let (lr, mu) = (lit::<T>(cfg.learning_rate), lit::<T>(cfg.momentum));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<Vec<Tensor<T>>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let act = model.forward_cached(&data[i].image)?;
                let (loss, gs) = loss_and_grad(&act.scores, &data[i].labels)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { step, loss });
                }
                batch_loss += loss;
                let g = model.backward(&act, &gs, cfg.guidance_grad)?;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(&g) {
                            a.axpy(T::one(), gi)?;
                        }
                    }
                }
            }
            let scale = lit::<T>(1.0 / batch.len() as f64);
            let grads = grads.expect("chunks are nonempty");
            for ((p, v), g) in model.params_mut().into_iter().zip(&mut velocity).zip(&grads) {
                for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vi = mu * *vi + gi * scale;
                    *pi = *pi - lr * *vi;
                }
            }
            if !model.params_mut().iter().all(|p| p.all_finite()) {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
            epoch_total += batch_loss;
            step += 1;
        }
        epoch_losses.push(epoch_total / data.len() as f64);
    }
    let final_loss = dataset_loss(model, &data)?;
    Ok(TrainReport { initial_loss, epoch_losses, final_loss, steps: step })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub miou: f64,
    pub f1px: f64,
    pub f3px: f64,
}

pub fn predict<T: Scalar>(model: &ToyModel<T>, image: &FeatureMap) -> Result<LabelMap> {
    argmax_labels(&model.forward(&image.cast())?)
}

/// Per-scene metrics averaged over scenes. A scene whose metric is
/// undefined (no boundary, say) is left out of that metric's average.
pub fn evaluate_model<T: Scalar>(model: &ToyModel<T>, scenes: &[Scene]) -> Result<EvalMetrics> {
    let n = model.n_classes();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for s in scenes {
        let pred = predict(model, &s.image)?;
        let vals = [
            miou(&confusion_matrix(&pred, &s.labels, n, None)?),
            boundary_fscore(&pred, &s.labels, 1)?,
            boundary_fscore(&pred, &s.labels, 3)?,
        ];
        for (k, v) in vals.into_iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    let avg = |k: usize| if counts[k] == 0 { f64::NAN } else { sums[k] / counts[k] as f64 };
    Ok(EvalMetrics { miou: avg(0), f1px: avg(1), f3px: avg(2) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::model::{ModelConfig, Neck, NeckKind};
    use crate::bench::scene::{gen_scene, SceneConfig};

    fn scenes(n: usize) -> Vec<Scene> {
        (0..n).map(|i| gen_scene(&SceneConfig { seed: 100 + i as u64, ..Default::default() }).unwrap()).collect()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = scenes(3);
        let mut m = ToyModel::<f64>::new(&ModelConfig::default(), NeckKind::Sdn, 0).unwrap();
        let before = m.clone();
        let r = train(&mut m, &data, &TrainConfig { epochs: 2, learning_rate: 0.0, batch_size: 2, ..Default::default() })
            .unwrap();
        assert_eq!(m, before);
        assert_eq!(r.initial_loss, r.final_loss);
        assert_eq!(r.epoch_losses[0], r.epoch_losses[1]);
    }

    #[test]
    fn same_seeds_same_curve() {
        let data = scenes(4);
        let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 0.05, ..Default::default() };
        let run = || {
            let mut m = ToyModel::<f64>::new(&ModelConfig::default(), NeckKind::Cdc, 4).unwrap();
            let r = train(&mut m, &data, &cfg).unwrap();
            (r, m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn center_tap_never_moves() {
        let data = scenes(2);
        let mut m = ToyModel::<f64>::new(&ModelConfig::default(), NeckKind::Sdn, 2).unwrap();
        let before = m.clone();
        train(&mut m, &data, &TrainConfig { epochs: 1, batch_size: 2, learning_rate: 0.1, ..Default::default() }).unwrap();
        let (Neck::Sdn(a), Neck::Sdn(b)) = (&before.neck, &m.neck) else { unreachable!() };
        let (wa, wb) = (a.sdc.weights().data(), b.sdc.weights().data());
        let mut moved = 0;
        for (i, (x, y)) in wa.iter().zip(wb).enumerate() {
            if i % 9 == 4 {
                assert_eq!(x, y);
            } else if x != y {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn divergence_is_reported() {
        let data = scenes(2);
        let mut m = ToyModel::<f64>::new(&ModelConfig::default(), NeckKind::Vanilla, 1).unwrap();
        let err = train(&mut m, &data, &TrainConfig { epochs: 20, batch_size: 1, learning_rate: 1e30, ..Default::default() });
        assert!(matches!(err, Err(Error::Diverged { .. })), "{err:?}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut m = ToyModel::<f64>::new(&ModelConfig::default(), NeckKind::None, 1).unwrap();
        assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn evaluation_is_repeatable() {
        let data = scenes(2);
        let m = ToyModel::<f64>::new(&ModelConfig::default(), NeckKind::Sdn, 1).unwrap();
        assert_eq!(evaluate_model(&m, &data).unwrap(), evaluate_model(&m, &data).unwrap());
    }
}
