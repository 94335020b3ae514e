//! Anomaly scoring and the evaluation pipeline: teacher/student discrepancy
//! maps, image scores, per-class and aggregate metrics under optional test
//! corruption.

pub mod chart;
pub mod metrics;
pub mod report;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{corrupt, derive_seed, CorruptionSpec, DatasetIndex};
use crate::error::{Error, Result};
use crate::model::RoadsModel;
use crate::raster::{gaussian_smooth_2d, resample_bilinear_2d, BitMask};

pub use metrics::{aupro, auroc, connected_components_8};

const NORM_EPS: f64 = 1e-8;

/// Per-pixel anomaly scores at model input resolution plus the image score.
#[derive(Debug, Clone)]
pub struct AnomalyMap {
    pub map: Array2<f64>,
    pub image_score: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Gaussian smoothing std-dev applied to the summed map.
    pub smooth_sigma: f64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions { smooth_sigma: 4.0 }
    }
}

/// Per level: one minus the channel-wise cosine at each position, bilinearly
/// upsampled to `out_size` and summed over levels; Gaussian smoothing, then
/// the image score is the map maximum.
pub fn anomaly_map(
    teacher: &[Array3<f64>],
    student: &[Array3<f64>],
    out_size: usize,
    opts: &ScoreOptions,
) -> Result<AnomalyMap> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Shape("anomaly_map needs matching non-empty pyramids".into()));
    }
    let mut total = Array2::<f64>::zeros((out_size, out_size));
    for (e, d) in teacher.iter().zip(student) {
        if e.dim() != d.dim() {
            return Err(Error::Shape(format!(
                "level shapes differ: {:?} vs {:?}",
                e.dim(),
                d.dim()
            )));
        }
        let (c, h, w) = e.dim();
        let mut level = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0;
                let mut ne = 0.0;
                let mut nd = 0.0;
                for ci in 0..c {
                    let ev = e[[ci, y, x]];
                    let dv = d[[ci, y, x]];
                    dot += ev * dv;
                    ne += ev * ev;
                    nd += dv * dv;
                }
                let cos = dot / ((ne.sqrt() + NORM_EPS) * (nd.sqrt() + NORM_EPS));
                level[[y, x]] = 1.0 - cos;
            }
        }
        let up = if (h, w) == (out_size, out_size) {
            level
        } else {
            resample_bilinear_2d(&level, out_size, out_size)
        };
        total += &up;
    }
    let smoothed = gaussian_smooth_2d(&total, opts.smooth_sigma);
    let image_score = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(AnomalyMap {
        map: smoothed,
        image_score,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub corruption: Option<CorruptionSpec>,
    pub fpr_limit: f64,
    pub score: ScoreOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            corruption: None,
            fpr_limit: 0.3,
            score: ScoreOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub p_aupro: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub p_aupro: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScore {
    pub rel_path: String,
    pub class_name: String,
    pub label: u8,
    pub image_score: f64,
    pub pred_class: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// "id" or "<kind>_s<severity>".
    pub condition: String,
    pub classes: Vec<ClassMetrics>,
    pub aggregate: AggregateMetrics,
    /// Routing-classifier accuracy on normal test images (prompts on only).
    pub classifier_accuracy: Option<f64>,
    pub samples: Vec<SampleScore>,
}

pub fn condition_name(corruption: &Option<CorruptionSpec>) -> String {
    match corruption {
        None => "id".to_string(),
        Some(c) => format!("{}_s{}", c.kind.name(), c.severity),
    }
}

/// Evaluate a model on the test split, optionally under corruption. Also
/// returns the per-sample anomaly maps aligned with `report.samples` for
/// heatmap emission.
pub fn evaluate(
    model: &RoadsModel,
    dataset: &DatasetIndex,
    options: &EvalOptions,
) -> Result<(EvalReport, Vec<AnomalyMap>)> {
    dataset.validate()?;
    if dataset.classes != model.classes {
        return Err(Error::Data(format!(
            "dataset classes {:?} do not match checkpoint classes {:?}",
            dataset.classes, model.classes
        )));
    }
    let test: Vec<_> = dataset.test_samples().collect();
    if test.is_empty() {
        return Err(Error::Data("dataset has no test samples".into()));
    }
    let input_size = model.arch.input_size;

    struct PerSample {
        class_index: usize,
        label: u8,
        rel_path: String,
        map: AnomalyMap,
        mask: Option<BitMask>,
        pred_class: Option<usize>,
    }

    let results: Vec<Result<PerSample>> = test
        .par_iter()
        .map(|s| {
            let mut img = s.load_image()?;
            if let Some(spec) = &options.corruption {
                // corruption applied at native resolution, before the model resize
                let per_image = CorruptionSpec {
                    seed: derive_seed(spec.seed, &s.rel_path),
                    ..*spec
                };
                img = corrupt(&img, &per_image)?;
            }
            let inference = model.infer(&img)?;
            let map = anomaly_map(
                &inference.teacher_levels,
                &inference.student_levels,
                input_size,
                &options.score,
            )?;
            let mask = match s.load_mask()? {
                Some(m) => {
                    if m.height() != img.height() || m.width() != img.width() {
                        return Err(Error::Data(format!(
                            "mask size does not match image for {}",
                            s.rel_path
                        )));
                    }
                    Some(resize_mask_nearest(&m, input_size, input_size))
                }
                None => None,
            };
            Ok(PerSample {
                class_index: s.class_index,
                label: s.label,
                rel_path: s.rel_path.clone(),
                map,
                mask,
                pred_class: inference.pred_class,
            })
        })
        .collect();
    let mut per_sample = Vec::with_capacity(results.len());
    for r in results {
        per_sample.push(r?);
    }

    let mut classes = Vec::new();
    for (ci, class_name) in model.classes.iter().enumerate() {
        let rows: Vec<&PerSample> = per_sample.iter().filter(|p| p.class_index == ci).collect();
        if rows.is_empty() {
            return Err(Error::Data(format!(
                "class {class_name} has no test samples to evaluate"
            )));
        }
        let scores: Vec<f64> = rows.iter().map(|p| p.map.image_score).collect();
        let labels: Vec<u8> = rows.iter().map(|p| p.label).collect();
        let i_auroc = auroc(&scores, &labels)?;

        let mut pixel_scores = Vec::new();
        let mut pixel_labels = Vec::new();
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for p in &rows {
            let mask = match &p.mask {
                Some(m) => m.clone(),
                None => BitMask::zeros(input_size, input_size),
            };
            for ((y, x), &v) in p.map.map.indexed_iter() {
                pixel_scores.push(v);
                pixel_labels.push(u8::from(mask.data[[y, x]]));
            }
            maps.push(p.map.map.clone());
            masks.push(mask);
        }
        let p_auroc = auroc(&pixel_scores, &pixel_labels)?;
        let p_aupro = aupro(&maps, &masks, options.fpr_limit)?;
        classes.push(ClassMetrics {
            class_name: class_name.clone(),
            i_auroc,
            p_auroc,
            p_aupro,
            n_normal: labels.iter().filter(|&&l| l == 0).count(),
            n_anomalous: labels.iter().filter(|&&l| l == 1).count(),
        });
    }

    let n = classes.len() as f64;
    let aggregate = AggregateMetrics {
        i_auroc: classes.iter().map(|c| c.i_auroc).sum::<f64>() / n,
        p_auroc: classes.iter().map(|c| c.p_auroc).sum::<f64>() / n,
        p_aupro: classes.iter().map(|c| c.p_aupro).sum::<f64>() / n,
    };

    let classifier_accuracy = if model.flags.use_prompts {
        let normals: Vec<&PerSample> = per_sample.iter().filter(|p| p.label == 0).collect();
        let correct = normals
            .iter()
            .filter(|p| p.pred_class == Some(p.class_index))
            .count();
        Some(correct as f64 / normals.len().max(1) as f64)
    } else {
        None
    };

    let samples: Vec<SampleScore> = per_sample
        .iter()
        .map(|p| SampleScore {
            rel_path: p.rel_path.clone(),
            class_name: model.classes[p.class_index].clone(),
            label: p.label,
            image_score: p.map.image_score,
            pred_class: p.pred_class.map(|c| model.classes[c].clone()),
        })
        .collect();
    let maps: Vec<AnomalyMap> = per_sample.into_iter().map(|p| p.map).collect();

    Ok((
        EvalReport {
            condition: condition_name(&options.corruption),
            classes,
            aggregate,
            classifier_accuracy,
            samples,
        },
        maps,
    ))
}

fn resize_mask_nearest(mask: &BitMask, new_h: usize, new_w: usize) -> BitMask {
    if mask.height() == new_h && mask.width() == new_w {
        return mask.clone();
    }
    let mut out = BitMask::zeros(new_h, new_w);
    let sy = mask.height() as f64 / new_h as f64;
    let sx = mask.width() as f64 / new_w as f64;
    for y in 0..new_h {
        for x in 0..new_w {
            let my = (((y as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
            let mx = (((x as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
            out.data[[y, x]] = mask.data[[my, mx]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn level(c: usize, h: usize, vals: impl Fn(usize, usize, usize) -> f64) -> Array3<f64> {
        Array3::from_shape_fn((c, h, h), |(ci, y, x)| vals(ci, y, x))
    }

    #[test]
    fn identical_pyramids_give_zero_map() {
        let e = vec![level(4, 8, |c, y, x| (c + y * x) as f64 + 1.0)];
        let opts = ScoreOptions { smooth_sigma: 0.0 };
        let am = anomaly_map(&e, &e.clone(), 8, &opts).unwrap();
        assert!(am.map.iter().all(|v| v.abs() < 1e-6));
        assert!(am.image_score.abs() < 1e-6);
    }

    #[test]
    fn single_antipodal_position_peaks_at_two() {
        let e = vec![level(2, 4, |c, _, _| if c == 0 { 1.0 } else { 0.5 })];
        let mut d = e.clone();
        // flip one position
        d[0][[0, 2, 1]] = -1.0;
        d[0][[1, 2, 1]] = -0.5;
        let opts = ScoreOptions { smooth_sigma: 0.0 };
        let am = anomaly_map(&e, &d, 4, &opts).unwrap();
        assert!((am.map[[2, 1]] - 2.0).abs() < 1e-6);
        assert!(am.map[[0, 0]].abs() < 1e-6);
        assert!((am.image_score - 2.0).abs() < 1e-6);
    }

    #[test]
    fn image_score_is_map_max() {
        let e = vec![level(2, 2, |_, _, _| 1.0)];
        let mut d = e.clone();
        d[0][[0, 0, 1]] = 0.2;
        d[0][[1, 0, 1]] = 2.0;
        let opts = ScoreOptions { smooth_sigma: 0.0 };
        let am = anomaly_map(&e, &d, 2, &opts).unwrap();
        let max = am.map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(am.image_score, max);
    }

    #[test]
    fn unsmoothed_map_is_permutation_covariant() {
        let e = vec![level(3, 4, |c, y, x| ((c * 7 + y * 3 + x) % 5) as f64 + 0.5)];
        let d = vec![level(3, 4, |c, y, x| ((c * 5 + y + x * 2) % 7) as f64 + 0.25)];
        let opts = ScoreOptions { smooth_sigma: 0.0 };
        let base = anomaly_map(&e, &d, 4, &opts).unwrap();
        // apply the same spatial permutation (transpose) to both pyramids
        let tpose = |a: &Array3<f64>| {
            Array3::from_shape_fn(a.dim(), |(c, y, x)| a[[c, x, y]])
        };
        let ep = vec![tpose(&e[0])];
        let dp = vec![tpose(&d[0])];
        let perm = anomaly_map(&ep, &dp, 4, &opts).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert!((base.map[[y, x]] - perm.map[[x, y]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let e = vec![level(2, 4, |_, _, _| 1.0)];
        let d = vec![level(2, 8, |_, _, _| 1.0)];
        assert!(anomaly_map(&e, &d, 8, &ScoreOptions::default()).is_err());
    }
}
