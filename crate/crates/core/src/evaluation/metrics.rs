//! Detection and localization metrics. `auroc` is computed from tie-aware
//! ranks (equals the pairwise Mann-Whitney statistic); `aupro` sweeps every
//! distinct threshold with an incremental sort-based pass, integrating the
//! mean per-region overlap against false-positive rate up to an FPR limit.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::raster::BitMask;

/// Area under the ROC curve; equals `P(score+ > score-) + 0.5 P(tie)`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "auroc got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "auroc needs both positive and negative labels".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("auroc scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// 8-connected components of a binary mask; returns pixel lists.
pub fn connected_components_8(mask: &BitMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut components = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask.data[[sy, sx]] || seen[[sy, sx]] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = std::collections::VecDeque::new();
            seen[[sy, sx]] = true;
            queue.push_back((sy, sx));
            while let Some((y, x)) = queue.pop_front() {
                comp.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.data[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            components.push(comp);
        }
    }
    components
}

/// Cap on recorded curve points; beyond this the sweep keeps every
/// threshold's state but records quantile-spaced points only.
const MAX_CURVE_POINTS: usize = 5000;

/// Area under the per-region-overlap curve vs. false-positive rate,
/// integrated on `[0, fpr_limit]` and normalized by the limit.
///
/// `maps` and `masks` are aligned; normal images contribute all-negative
/// masks. Every anomalous mask must be non-empty and at least one component
/// must exist overall.
pub fn aupro(maps: &[Array2<f64>], masks: &[BitMask], fpr_limit: f64) -> Result<f64> {
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(Error::Shape("aupro needs aligned, non-empty maps and masks".into()));
    }
    if !(0.0 < fpr_limit && fpr_limit <= 1.0) {
        return Err(Error::Config(format!("fpr limit {fpr_limit} out of (0, 1]")));
    }

    // label every pixel with its component id (or none) and count negatives
    let mut comp_sizes: Vec<usize> = Vec::new();
    let mut pixel_comp: Vec<Array2<i64>> = Vec::new();
    let mut negatives = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        if map.shape() != [mask.height(), mask.width()] {
            return Err(Error::Shape(format!(
                "map {:?} does not align with mask {}x{}",
                map.shape(),
                mask.height(),
                mask.width()
            )));
        }
        let mut ids = Array2::<i64>::from_elem((mask.height(), mask.width()), -1);
        for comp in connected_components_8(mask) {
            let cid = comp_sizes.len() as i64;
            comp_sizes.push(comp.len());
            for (y, x) in comp {
                ids[[y, x]] = cid;
            }
        }
        negatives += mask.data.iter().filter(|&&v| !v).count();
        pixel_comp.push(ids);
    }
    if comp_sizes.is_empty() {
        return Err(Error::Data("aupro needs at least one ground-truth component".into()));
    }
    if negatives == 0 {
        return Err(Error::Data("aupro needs background pixels for the FPR axis".into()));
    }

    // sort all pixels by score descending and sweep thresholds
    let mut pixels: Vec<(f64, u32, u32, u32)> = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        for ((y, x), &v) in map.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Numerical("anomaly map contains non-finite values".into()));
            }
            pixels.push((v, i as u32, y as u32, x as u32));
        }
    }
    pixels.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let distinct = {
        let mut d = 1usize;
        for w in pixels.windows(2) {
            if w[0].0 != w[1].0 {
                d += 1;
            }
        }
        d
    };
    let record_every = distinct.div_ceil(MAX_CURVE_POINTS).max(1);

    let mut comp_hits = vec![0usize; comp_sizes.len()];
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut i = 0usize;
    let mut group = 0usize;
    while i < pixels.len() {
        let threshold = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == threshold {
            let (_, img, y, x) = pixels[i];
            let cid = pixel_comp[img as usize][[y as usize, x as usize]];
            if cid >= 0 {
                comp_hits[cid as usize] += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        group += 1;
        let is_last = i == pixels.len();
        if group % record_every == 0 || is_last {
            let pro = comp_hits
                .iter()
                .zip(&comp_sizes)
                .map(|(&h, &s)| h as f64 / s as f64)
                .sum::<f64>()
                / comp_sizes.len() as f64;
            let fpr = fp as f64 / negatives as f64;
            points.push((fpr, pro));
        }
    }

    Ok(integrate_pro_curve(&points, fpr_limit))
}

/// Trapezoidal integral of a monotone-FPR curve from (0, 0) up to `limit`,
/// interpolating at the boundary, normalized by the limit.
pub fn integrate_pro_curve(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    let mut prev = (0.0, 0.0);
    for &(fpr, pro) in points {
        if fpr >= limit {
            if fpr > prev.0 {
                let t = (limit - prev.0) / (fpr - prev.0);
                let pro_at = prev.1 + t * (pro - prev.1);
                area += (limit - prev.0) * (prev.1 + pro_at) / 2.0;
            }
            return area / limit;
        }
        area += (fpr - prev.0) * (pro + prev.1) / 2.0;
        prev = (fpr, pro);
    }
    // curve never reached the limit (no negatives beyond); treat the last
    // observed PRO as holding to the limit
    area += (limit - prev.0) * prev.1;
    area / limit
}
