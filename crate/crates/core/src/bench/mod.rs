//! Desk-scale benchmark: synthetic textured scenes, a tiny segmenter with a
//! pluggable neck, deterministic training and boundary-aware evaluation.

pub mod model;
pub mod scene;
pub mod train;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use model::{argmax_labels, loss_and_grad, ModelConfig, Neck, NeckInit, NeckKind, ToyModel};
pub use scene::{gen_scene, texture_fixture, Scene, SceneConfig, TextureFixture, FIXTURE_LAMBDA, PALETTE};
pub use train::{evaluate_model, predict, train, EvalMetrics, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::io::Raster;
use crate::metrics::LabelMap;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// One benchmark experiment. Every field has a default, so `{}` is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<NeckKind>,
    /// Template for every scene; its `seed` is an offset into the scene stream.
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
}

/// The default is the high-texture comparison: strong texture with a period
/// longer than the encoder stride, every neck starting as one diffusion step,
/// and the same training budget for every variant.
impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seeds: (0..8).collect(),
            variants: NeckKind::ALL.to_vec(),
            scene: SceneConfig { texture: 2.0, texture_period: [8.0, 16.0], ..Default::default() },
            train_scenes: 32,
            test_scenes: 16,
            model: ModelConfig {
                lambda: 0.5,
                fusion_beta: 0.1,
                neck_init: NeckInit::Diffusion,
                rectify_branch: true,
                ..Default::default()
            },
            train: TrainConfig { epochs: 25, learning_rate: 0.02, ..Default::default() },
            precision: Precision::F64,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() || self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::InvalidParameter(
                "bench config needs at least one seed, variant, training and test scene".into(),
            ));
        }
        if self.model.n_classes != self.scene.n_classes {
            return Err(Error::InvalidParameter(format!(
                "model predicts {} classes but scenes have {}",
                self.model.n_classes, self.scene.n_classes
            )));
        }
        self.scene.validate()
    }

    /// Scenes for one seed. Training and test streams never overlap.
    pub fn datasets(&self, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
        let base = self.scene.seed.wrapping_add(seed.wrapping_mul(1 << 20));
        let make = |offset: u64, n: usize| -> Result<Vec<Scene>> {
            (0..n as u64).map(|i| gen_scene(&self.scene.with_seed(base + offset + i))).collect()
        };
        Ok((make(0, self.train_scenes)?, make(1 << 19, self.test_scenes)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: NeckKind,
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub report: TrainReport,
}

/// Renderings of the first test scene for one (variant, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub variant: NeckKind,
    pub seed: u64,
    pub image: Raster,
    pub prediction: Raster,
    /// White where the prediction is wrong, black elsewhere.
    pub errors: Raster,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub snapshots: Vec<Snapshot>,
}

/// Variant means of `(mIoU, F@1px, F@3px)` over seeds, in config order.
pub fn summarize(rows: &[BenchRow]) -> Vec<(NeckKind, EvalMetrics)> {
    let mut order: Vec<NeckKind> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let sel: Vec<&EvalMetrics> = rows.iter().filter(|r| r.variant == v).map(|r| &r.metrics).collect();
            let n = sel.len() as f64;
            let mean = |f: fn(&EvalMetrics) -> f64| sel.iter().map(|m| f(m)).sum::<f64>() / n;
            (v, EvalMetrics { miou: mean(|m| m.miou), f1px: mean(|m| m.f1px), f3px: mean(|m| m.f3px) })
        })
        .collect()
}

fn run_one<T: Scalar>(cfg: &BenchConfig, kind: NeckKind, seed: u64, train_set: &[Scene], test_set: &[Scene]) -> Result<(BenchRow, Snapshot)> {
    let mut model = ToyModel::<T>::new(&cfg.model, kind, seed)?;
    let tcfg = TrainConfig { seed: cfg.train.seed.wrapping_add(seed), ..cfg.train.clone() };
    let report = train(&mut model, train_set, &tcfg)?;
    let metrics = evaluate_model(&model, test_set)?;
    let first = &test_set[0];
    let pred = predict(&model, &first.image)?;
    let snapshot = Snapshot {
        variant: kind,
        seed,
        image: Raster::from_feature_map(&first.image)?,
        prediction: label_raster(&pred),
        errors: error_raster(&pred, &first.labels)?,
    };
    Ok((BenchRow { variant: kind, seed, metrics, report }, snapshot))
}

/// Trains and evaluates every variant for every seed. Variants sharing a
/// seed see the same scenes, the same backbone init and the same budget.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    for &seed in &cfg.seeds {
        let (train_set, test_set) = cfg.datasets(seed)?;
        for &kind in &cfg.variants {
            let (row, snap) = match cfg.precision {
                Precision::F64 => run_one::<f64>(cfg, kind, seed, &train_set, &test_set)?,
                Precision::F32 => run_one::<f32>(cfg, kind, seed, &train_set, &test_set)?,
            };
            rows.push(row);
            snapshots.push(snap);
        }
    }
    Ok(BenchOutcome { rows, snapshots })
}

pub fn label_raster(labels: &LabelMap) -> Raster {
    let pixels = labels
        .labels()
        .iter()
        .flat_map(|&l| PALETTE[l % PALETTE.len()].map(|c| (c * 255.0).round() as u8))
        .collect();
    Raster { width: labels.width(), height: labels.height(), samples: 3, pixels }
}

pub fn error_raster(pred: &LabelMap, gt: &LabelMap) -> Result<Raster> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch("prediction and ground truth extents differ".into()));
    }
    let pixels = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .flat_map(|(p, g)| [if p == g { 0 } else { 255 }; 3])
        .collect();
    Ok(Raster { width: gt.width(), height: gt.height(), samples: 3, pixels })
}

/// `variant,seed,miou,f1px,f3px` with one row per run.
pub fn metrics_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,seed,miou,f1px,f3px\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.variant.name(), r.seed, m.miou, m.f1px, m.f3px);
    }
    s
}

/// `variant,seed,epoch,loss`; epoch 0 is the loss before training.
pub fn loss_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,seed,epoch,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{},0,{:.9}", r.variant.name(), r.seed, r.report.initial_loss);
        for (e, l) in r.report.epoch_losses.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{:.9}", r.variant.name(), r.seed, e + 1, l);
        }
    }
    s
}

/// `variant,miou,f1px,f3px` with seed means.
pub fn summary_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,miou,f1px,f3px\n");
    for (v, m) in summarize(rows) {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", v.name(), m.miou, m.f1px, m.f3px);
    }
    s
}
