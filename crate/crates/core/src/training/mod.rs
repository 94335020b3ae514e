//! Losses and the optimization loop: brief supervised pre-training of the
//! teacher on the class labels, then detector training on normal data only
//! (feature distillation + classification supervision + style consistency),
//! with the teacher frozen throughout the second phase.

pub mod checkpoint;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::FeatureMapSet;
use crate::datasets::{augment_ood, derive_seed, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::model::{ModelFlags, RoadsModel};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParamId;
use crate::nn::{AdamW, AdamWConfig};
use crate::prompts::ce_loss;
use crate::raster::ImageBuf;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// Loss weighting (KD, CE, CS).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta: f64,
    pub delta: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eta: 0.95,
            delta: 0.025,
            mu: 0.025,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 || self.delta < 0.0 || self.mu < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Two readings of the distillation loss; `Rd` (per-position channel cosine,
/// spatial mean, sum over levels) is the default, `Literal` flattens each
/// level to a single cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdForm {
    Rd,
    Literal,
}

impl Default for KdForm {
    fn default() -> Self {
        KdForm::Rd
    }
}

const KD_NORM_EPS: f64 = 1e-8;

/// Distillation loss between matching pyramids. The `Rd` form lies in
/// `[0, 2M]`: per spatial position one minus the channel-wise cosine, meaned
/// over positions, summed over levels.
pub fn kd_loss(
    g: &mut Graph,
    teacher: &FeatureMapSet,
    student: &FeatureMapSet,
    form: KdForm,
) -> Result<Var> {
    if teacher.levels.len() != student.levels.len() {
        return Err(Error::Shape(format!(
            "kd_loss level counts differ: {} vs {}",
            teacher.levels.len(),
            student.levels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&e, &d) in teacher.levels.iter().zip(&student.levels) {
        if g.shape(e) != g.shape(d) {
            return Err(Error::Shape(format!(
                "kd_loss level shapes differ: {:?} vs {:?}",
                g.shape(e),
                g.shape(d)
            )));
        }
        let level_loss = match form {
            KdForm::Rd => {
                let prod = g.mul(e, d);
                let dot = g.channel_sum(prod);
                let ee = g.mul(e, e);
                let se = g.channel_sum(ee);
                let ne = g.sqrt(se);
                let dd = g.mul(d, d);
                let sd = g.channel_sum(dd);
                let nd = g.sqrt(sd);
                let ne_e = g.add_scalar(ne, KD_NORM_EPS);
                let nd_e = g.add_scalar(nd, KD_NORM_EPS);
                let denom = g.mul(ne_e, nd_e);
                let cos = g.div(dot, denom);
                let mean_cos = g.mean_all(cos);
                let neg = g.neg(mean_cos);
                g.add_scalar(neg, 1.0)
            }
            KdForm::Literal => {
                let n = g.value(e).len();
                let ef = g.reshape(e, &[n]);
                let df = g.reshape(d, &[n]);
                let cos = g.cosine_1d(ef, df, KD_NORM_EPS);
                g.neg(cos)
            }
        };
        total = Some(match total {
            Some(t) => g.add(t, level_loss),
            None => level_loss,
        });
    }
    let total = total.ok_or_else(|| Error::Shape("kd_loss on empty pyramids".into()))?;
    Ok(match form {
        KdForm::Rd => total,
        // literal reading: 1 - sum_i cos_i
        KdForm::Literal => g.add_scalar(total, 1.0),
    })
}

/// Scalar weighted sum; rejects non-finite inputs (training aborts rather
/// than silently skipping a poisoned step).
pub fn total_loss(l_kd: f64, l_ce: f64, l_cs: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("kd", l_kd), ("ce", l_ce), ("cs", l_cs)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("loss term {name} is not finite ({v})")));
        }
    }
    Ok(w.eta * l_kd + w.delta * l_ce + w.mu * l_cs)
}

/// Training configuration; ablation presets map onto the component grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub use_prompts: bool,
    pub use_adapter: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub kd_form: KdForm,
    /// Fine-tune the adapter trunk (at 0.1x lr) instead of freezing it.
    pub adapter_finetune_trunk: bool,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            use_prompts: true,
            use_adapter: true,
            epochs: 6,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 0,
            kd_form: KdForm::Rd,
            adapter_finetune_trunk: true,
            teacher_epochs: 3,
            teacher_lr: 2e-3,
        }
    }
}

impl TrainConfig {
    /// Ablation presets: `roads-0` (distillation only), `roads-1` (+style
    /// consistency), `roads-2` (+classification), `roads-3` (both), and the
    /// weight variants `roads-4`..`roads-7`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        match name {
            "roads-0" => {
                cfg.use_prompts = false;
                cfg.use_adapter = false;
            }
            "roads-1" => {
                cfg.use_prompts = false;
                cfg.use_adapter = true;
            }
            "roads-2" => {
                cfg.use_prompts = true;
                cfg.use_adapter = false;
            }
            "roads-3" | "roads-4" => {}
            "roads-5" => cfg.weights = LossWeights { eta: 0.95, delta: 0.01, mu: 0.04 },
            "roads-6" => cfg.weights = LossWeights { eta: 0.95, delta: 0.04, mu: 0.01 },
            "roads-7" => cfg.weights = LossWeights { eta: 0.9, delta: 0.05, mu: 0.05 },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected roads-0..roads-7)"
                )))
            }
        }
        Ok(cfg)
    }

    pub fn flags(&self) -> ModelFlags {
        ModelFlags {
            use_prompts: self.use_prompts,
            use_adapter: self.use_adapter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One optimization step's logged losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_kd: f64,
    pub l_ce: f64,
    pub l_cs: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub steps: Vec<StepRecord>,
    pub teacher_epoch_ce: Vec<f64>,
}

impl TrainStats {
    pub fn epoch_mean_total(&self, epoch: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.epoch == epoch)
            .map(|s| s.l_total)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

struct LoadedSet {
    images: Vec<ImageBuf>,
    labels: Vec<usize>,
}

fn load_train_set(dataset: &DatasetIndex) -> Result<LoadedSet> {
    dataset.validate()?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for s in dataset.train_samples() {
        if s.label != 0 {
            return Err(Error::Data(format!(
                "anomalous sample {} cannot enter a training batch",
                s.rel_path
            )));
        }
        images.push(s.load_image()?);
        labels.push(s.class_index);
    }
    if images.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(LoadedSet { images, labels })
}

type GradMap = std::collections::HashMap<ParamId, ArrayD<f64>>;

fn merge_grads(maps: Vec<GradMap>) -> GradMap {
    let mut out = GradMap::new();
    for m in maps {
        for (id, g) in m {
            match out.get_mut(&id) {
                Some(acc) => *acc += &g,
                None => {
                    out.insert(id, g);
                }
            }
        }
    }
    out
}

/// Phase 1: supervised pre-training of the teacher on class labels, then
/// freeze it and seed the adapter trunk from its weights.
pub fn pretrain_teacher(
    model: &mut RoadsModel,
    dataset: &DatasetIndex,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let set = load_train_set(dataset)?;
    let n = set.images.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.teacher_lr,
        weight_decay: cfg.weight_decay,
        total_steps: cfg.teacher_epochs * steps_per_epoch,
        ..Default::default()
    });
    let mut epoch_ce = Vec::new();
    for epoch in 0..cfg.teacher_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("teacher.epoch{epoch}")));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(GradMap, f64)>> = chunk
                .par_iter()
                .map(|&idx| {
                    use crate::backbone::Encoder;
                    let mut g = Graph::new();
                    let img = g.constant(model.image_to_input(&set.images[idx])?.into_dyn());
                    let fs = model.teacher.encode(&mut g, &model.store, img)?;
                    let deepest = *fs.levels.last().expect("non-empty");
                    let logits = model.teacher.head_logits(&mut g, &model.store, deepest);
                    let ce = ce_loss(&mut g, logits, set.labels[idx]);
                    let scaled = g.mul_scalar(ce, 1.0 / chunk.len() as f64);
                    let loss_val = g.scalar_value(ce);
                    if !loss_val.is_finite() {
                        return Err(Error::Numerical("teacher CE diverged".into()));
                    }
                    let grads = g.backward(scaled);
                    Ok((grads.into_param_map(), loss_val))
                })
                .collect();
            let mut grad_maps = Vec::with_capacity(results.len());
            let mut batch_loss = 0.0;
            let count = results.len();
            for r in results {
                let (gm, l) = r?;
                grad_maps.push(gm);
                batch_loss += l;
            }
            opt.step_map(&mut model.store, &merge_grads(grad_maps));
            epoch_loss += batch_loss / count as f64;
            batches += 1;
        }
        epoch_ce.push(epoch_loss / batches as f64);
    }
    model.teacher.freeze(&mut model.store);
    model.adapter.load_trunk_from_teacher(&mut model.store, &model.teacher);
    model
        .adapter
        .set_trunk_trainable(&mut model.store, cfg.adapter_finetune_trunk);
    Ok(epoch_ce)
}

/// Losses for one training sample, assembled on its own graph.
fn sample_losses(
    model: &RoadsModel,
    cfg: &TrainConfig,
    x_id: &ImageBuf,
    label: usize,
    ood_seed: u64,
    batch_len: usize,
) -> Result<(GradMap, f64, f64, f64)> {
    let mut g = Graph::new();
    let x_ood = cfg.use_adapter.then(|| augment_ood(x_id, ood_seed));
    let fwd = model.forward_train(&mut g, x_id, x_ood.as_ref(), label)?;

    let kd = kd_loss(&mut g, &fwd.teacher_fs, &fwd.student_fs, cfg.kd_form)?;
    let kd_val = g.scalar_value(kd);

    // both classification surfaces train under the CE term: the final
    // GAP head over the posterior tokens and the routing classifier
    let (ce, ce_val) = if cfg.use_prompts {
        let final_ce = ce_loss(&mut g, fwd.final_logits.expect("prompts on"), label);
        let zeta_ce = ce_loss(&mut g, fwd.zeta_logits.expect("prompts on"), label);
        let sum = g.add(final_ce, zeta_ce);
        let v = g.scalar_value(sum);
        (Some(sum), v)
    } else {
        (None, 0.0)
    };

    let (cs, cs_val) = if cfg.use_adapter {
        let l = crate::adapter::style_consistency_loss(
            &mut g,
            fwd.code_id.expect("adapter on"),
            fwd.code_ood.expect("adapter on"),
        )?;
        let v = g.scalar_value(l);
        (Some(l), v)
    } else {
        (None, 0.0)
    };

    // abort on non-finite losses before touching the optimizer
    total_loss(kd_val, ce_val, cs_val, &cfg.weights)?;

    let mut acc = g.mul_scalar(kd, cfg.weights.eta);
    if let Some(ce) = ce {
        let w = g.mul_scalar(ce, cfg.weights.delta);
        acc = g.add(acc, w);
    }
    if let Some(cs) = cs {
        let w = g.mul_scalar(cs, cfg.weights.mu);
        acc = g.add(acc, w);
    }
    let scaled = g.mul_scalar(acc, 1.0 / batch_len as f64);
    let grads = g.backward(scaled);
    Ok((grads.into_param_map(), kd_val, ce_val, cs_val))
}

/// Phase 2: detector training on normal data. The teacher must already be
/// frozen (run [`pretrain_teacher`] first).
pub fn train(model: &mut RoadsModel, dataset: &DatasetIndex, cfg: &TrainConfig) -> Result<TrainStats> {
    cfg.validate()?;
    if model.flags != cfg.flags() {
        return Err(Error::Config(
            "model component flags do not match the training config".into(),
        ));
    }
    let set = load_train_set(dataset)?;
    let n = set.images.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        total_steps: cfg.epochs * steps_per_epoch,
        ..Default::default()
    });
    let mut stats = TrainStats::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("train.epoch{epoch}")));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(GradMap, f64, f64, f64)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let ood_seed = derive_seed(cfg.seed, &format!("ood.{epoch}.{idx}"));
                    sample_losses(model, cfg, &set.images[idx], set.labels[idx], ood_seed, chunk.len())
                })
                .collect();
            let mut grad_maps = Vec::with_capacity(results.len());
            let (mut kd_m, mut ce_m, mut cs_m) = (0.0, 0.0, 0.0);
            let count = chunk.len() as f64;
            for r in results {
                let (gm, kd, ce, cs) = r?;
                grad_maps.push(gm);
                kd_m += kd / count;
                ce_m += ce / count;
                cs_m += cs / count;
            }
            let l_total = total_loss(kd_m, ce_m, cs_m, &cfg.weights)?;
            opt.step_map(&mut model.store, &merge_grads(grad_maps));
            stats.steps.push(StepRecord {
                step,
                epoch,
                l_kd: kd_m,
                l_ce: ce_m,
                l_cs: cs_m,
                l_total,
            });
            step += 1;
        }
    }
    Ok(stats)
}

/// Convenience: full pipeline (init, teacher phase, detector phase).
pub fn train_from_scratch(
    dataset: &DatasetIndex,
    arch: crate::arch::ArchConfig,
    cfg: &TrainConfig,
) -> Result<(RoadsModel, TrainStats)> {
    let mut model = RoadsModel::new(arch, dataset.classes.clone(), cfg.flags(), cfg.seed)?;
    let teacher_ce = pretrain_teacher(&mut model, dataset, cfg)?;
    let mut stats = train(&mut model, dataset, cfg)?;
    stats.teacher_epoch_ce = teacher_ce;
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchConfig, FeatureSource};
    use crate::nn::gradcheck::check_grad_input;
    use ndarray::IxDyn;
    use rand::Rng;

    fn pyramid(g: &mut Graph, vals: &[ArrayD<f64>], source: FeatureSource, leaf: bool) -> FeatureMapSet {
        FeatureMapSet {
            levels: vals
                .iter()
                .map(|v| if leaf { g.leaf(v.clone()) } else { g.constant(v.clone()) })
                .collect(),
            source,
        }
    }

    fn rand_levels(seed: u64) -> Vec<ArrayD<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [(4usize, 4usize), (3, 2), (2, 1)]
            .iter()
            .map(|&(c, hw)| ArrayD::from_shape_fn(IxDyn(&[c, hw, hw]), |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn kd_identities() {
        let vals = rand_levels(1);
        let mut g = Graph::new();
        let t = pyramid(&mut g, &vals, FeatureSource::Teacher, false);
        let s_same = pyramid(&mut g, &vals, FeatureSource::Student, false);
        let l = kd_loss(&mut g, &t, &s_same, KdForm::Rd).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-6);

        let neg_vals: Vec<ArrayD<f64>> = vals.iter().map(|v| -v).collect();
        let s_neg = pyramid(&mut g, &neg_vals, FeatureSource::Student, false);
        let l2 = kd_loss(&mut g, &t, &s_neg, KdForm::Rd).unwrap();
        assert!((g.scalar_value(l2) - 6.0).abs() < 1e-6, "got {}", g.scalar_value(l2));
    }

    #[test]
    fn kd_orthogonal_gives_m() {
        // build per-position orthogonal channel vectors: e = (a, 0), d = (0, b)
        let mut g = Graph::new();
        let mut e = ArrayD::zeros(IxDyn(&[2, 2, 2]));
        let mut d = ArrayD::zeros(IxDyn(&[2, 2, 2]));
        for y in 0..2 {
            for x in 0..2 {
                e[[0, y, x]] = 1.0 + (y + x) as f64;
                d[[1, y, x]] = 2.0 - y as f64;
            }
        }
        let t = pyramid(&mut g, &[e.clone(), e.clone(), e], FeatureSource::Teacher, false);
        let s = pyramid(&mut g, &[d.clone(), d.clone(), d], FeatureSource::Student, false);
        let l = kd_loss(&mut g, &t, &s, KdForm::Rd).unwrap();
        assert!((g.scalar_value(l) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn kd_invariant_to_positive_rescaling() {
        let vals = rand_levels(2);
        let mut g = Graph::new();
        let t = pyramid(&mut g, &vals, FeatureSource::Teacher, false);
        let s_vals = rand_levels(3);
        let s = pyramid(&mut g, &s_vals, FeatureSource::Student, false);
        let l1 = kd_loss(&mut g, &t, &s, KdForm::Rd).unwrap();
        let scaled: Vec<ArrayD<f64>> = s_vals.iter().map(|v| v * 7.3).collect();
        let s2 = pyramid(&mut g, &scaled, FeatureSource::Student, false);
        let l2 = kd_loss(&mut g, &t, &s2, KdForm::Rd).unwrap();
        assert!((g.scalar_value(l1) - g.scalar_value(l2)).abs() < 1e-7);
    }

    #[test]
    fn kd_gradient_matches_fd() {
        let t_vals = rand_levels(4);
        let d0 = rand_levels(5);
        for form in [KdForm::Rd, KdForm::Literal] {
            let build = |d: &ArrayD<f64>| {
                let mut g = Graph::new();
                let t = pyramid(&mut g, &t_vals, FeatureSource::Teacher, false);
                // vary only the first student level
                let mut s_levels = vec![g.leaf(d.clone())];
                for v in &d0[1..] {
                    s_levels.push(g.constant(v.clone()));
                }
                let s = FeatureMapSet {
                    levels: s_levels,
                    source: FeatureSource::Student,
                };
                let input = s.levels[0];
                let loss = kd_loss(&mut g, &t, &s, form).unwrap();
                (g, input, loss)
            };
            let err = check_grad_input(&build, &d0[0]);
            assert!(err < 1e-5, "{form:?} rel err {err}");
        }
    }

    #[test]
    fn kd_shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = ArrayD::<f64>::zeros(IxDyn(&[2, 2, 2]));
        let b = ArrayD::<f64>::zeros(IxDyn(&[2, 4, 4]));
        let t = pyramid(&mut g, &[a.mapv(|v| v + 1.0)], FeatureSource::Teacher, false);
        let s = pyramid(&mut g, &[b.mapv(|v| v + 1.0)], FeatureSource::Student, false);
        assert!(kd_loss(&mut g, &t, &s, KdForm::Rd).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        let v = total_loss(1.0, 2.0, 4.0, &w).unwrap();
        assert!((v - 1.1).abs() < 1e-12);
        let only_kd = LossWeights { eta: 1.0, delta: 0.0, mu: 0.0 };
        assert_eq!(total_loss(3.5, 100.0, 7.0, &only_kd).unwrap(), 3.5);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn presets_match_component_grid() {
        let p0 = TrainConfig::preset("roads-0").unwrap();
        assert!(!p0.use_prompts && !p0.use_adapter);
        let p1 = TrainConfig::preset("roads-1").unwrap();
        assert!(!p1.use_prompts && p1.use_adapter);
        let p2 = TrainConfig::preset("roads-2").unwrap();
        assert!(p2.use_prompts && !p2.use_adapter);
        let p3 = TrainConfig::preset("roads-3").unwrap();
        assert!(p3.use_prompts && p3.use_adapter);
        assert_eq!(p3.weights, LossWeights { eta: 0.95, delta: 0.025, mu: 0.025 });
        let p7 = TrainConfig::preset("roads-7").unwrap();
        assert_eq!(p7.weights, LossWeights { eta: 0.9, delta: 0.05, mu: 0.05 });
        assert!(TrainConfig::preset("roads-9").is_err());
    }

    fn tiny_dataset(seed: u64) -> DatasetIndex {
        crate::datasets::generate_toy_dataset(&crate::datasets::ToySpec {
            n_classes: 2,
            image_size: 32,
            n_train: 4,
            n_test_normal: 1,
            n_test_anomalous: 1,
            defect_kinds: vec![crate::datasets::DefectKind::Hole],
            seed,
        })
        .unwrap()
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            input_size: 32,
            channels: vec![8, 12, 16],
            bottleneck_channels: 16,
            num_classes: 2,
            prompt_len: 2,
            token_dim: 16,
            num_heads: 2,
            ffn_mult: 2,
            style_dim: 8,
            classifier_hidden: 16,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            teacher_epochs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn identical_seeds_give_identical_loss_traces() {
        let ds = tiny_dataset(1);
        let run = || {
            let (_, stats) = train_from_scratch(&ds, tiny_arch(), &tiny_cfg()).unwrap();
            stats.steps.iter().map(|s| s.l_total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn teacher_is_bit_identical_after_training() {
        let ds = tiny_dataset(2);
        let cfg = tiny_cfg();
        let mut model = RoadsModel::new(tiny_arch(), ds.classes.clone(), cfg.flags(), 0).unwrap();
        pretrain_teacher(&mut model, &ds, &cfg).unwrap();
        let before: Vec<ArrayD<f64>> = model
            .teacher
            .param_ids()
            .iter()
            .map(|&id| model.store.value(id).clone())
            .collect();
        train(&mut model, &ds, &cfg).unwrap();
        for (id, b) in model.teacher.param_ids().iter().zip(&before) {
            assert_eq!(model.store.value(*id), b, "teacher param changed");
        }
    }

    #[test]
    fn kd_only_config_reports_zero_ce_cs() {
        let ds = tiny_dataset(3);
        let mut cfg = TrainConfig::preset("roads-0").unwrap();
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg.teacher_epochs = 1;
        let (_, stats) = train_from_scratch(&ds, tiny_arch(), &cfg).unwrap();
        for s in &stats.steps {
            assert_eq!(s.l_ce, 0.0);
            assert_eq!(s.l_cs, 0.0);
            assert!((s.l_total - cfg.weights.eta * s.l_kd).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_gradient_isolation_across_step() {
        // a batch containing only class 0 must leave the other pool slices
        // bit-identical through a full optimizer step
        let ds = tiny_dataset(4);
        let cfg = tiny_cfg();
        let mut model = RoadsModel::new(tiny_arch(), ds.classes.clone(), cfg.flags(), 1).unwrap();
        pretrain_teacher(&mut model, &ds, &cfg).unwrap();
        let pool_before = model.store.value(model.prompts.pool.param).clone();
        // restrict to class-0 samples only
        let class0 = DatasetIndex {
            classes: ds.classes.clone(),
            samples: ds
                .samples
                .iter()
                .filter(|s| s.class_index == 0)
                .cloned()
                .collect(),
        };
        let mut one_step = cfg.clone();
        one_step.epochs = 1;
        train(&mut model, &class0, &one_step).unwrap();
        let pool_after = model.store.value(model.prompts.pool.param);
        let before1 = pool_before.index_axis(ndarray::Axis(0), 1);
        let after1 = pool_after.index_axis(ndarray::Axis(0), 1);
        assert_eq!(before1, after1, "untouched class slice changed");
        let before0 = pool_before.index_axis(ndarray::Axis(0), 0);
        let after0 = pool_after.index_axis(ndarray::Axis(0), 0);
        assert_ne!(before0, after0, "trained class slice did not move");
    }

    #[test]
    fn gradients_reach_all_components() {
        let ds = tiny_dataset(5);
        let cfg = tiny_cfg();
        let mut model = RoadsModel::new(tiny_arch(), ds.classes.clone(), cfg.flags(), 2).unwrap();
        pretrain_teacher(&mut model, &ds, &cfg).unwrap();
        let img = ds.samples[0].load_image().unwrap();
        let (gm, _, _, _) = sample_losses(&model, &cfg, &img, 0, 99, 1).unwrap();
        let nonzero = |id: crate::nn::params::ParamId| {
            gm.get(&id).map(|g| g.mapv(f64::abs).sum() > 0.0).unwrap_or(false)
        };
        assert!(model.bottleneck.param_ids().iter().any(|&id| nonzero(id)), "bottleneck");
        assert!(model.decoder.param_ids().iter().any(|&id| nonzero(id)), "decoder");
        assert!(nonzero(model.prompts.pool.param), "prompt pool");
        assert!(
            model.adapter.gamma_heads.iter().any(|&(w, b)| nonzero(w) || nonzero(b)),
            "adain heads"
        );
        // frozen teacher receives nothing
        assert!(model.teacher.param_ids().iter().all(|&id| !gm.contains_key(&id)));
    }
}
