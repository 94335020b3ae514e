//! Report emission: JSON summary, CSV score table, optional per-image
//! heatmap PNGs (min-max normalized under a fixed colormap).

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::evaluation::{AnomalyMap, EvalReport};
use crate::raster::ImageBuf;

/// Fixed perceptual colormap (viridis-style anchor interpolation).
pub fn colormap(t: f64) -> [u8; 3] {
    const ANCHORS: [(f64, [f64; 3]); 9] = [
        (0.000, [68.0, 1.0, 84.0]),
        (0.125, [71.0, 44.0, 122.0]),
        (0.250, [59.0, 81.0, 139.0]),
        (0.375, [44.0, 113.0, 142.0]),
        (0.500, [33.0, 144.0, 141.0]),
        (0.625, [39.0, 173.0, 129.0]),
        (0.750, [92.0, 200.0, 99.0]),
        (0.875, [170.0, 220.0, 50.0]),
        (1.000, [253.0, 231.0, 37.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let mut lo = ANCHORS[0];
    for hi in ANCHORS.iter().skip(1) {
        if t <= hi.0 {
            let f = if hi.0 > lo.0 { (t - lo.0) / (hi.0 - lo.0) } else { 0.0 };
            return [
                (lo.1[0] + f * (hi.1[0] - lo.1[0])).round() as u8,
                (lo.1[1] + f * (hi.1[1] - lo.1[1])).round() as u8,
                (lo.1[2] + f * (hi.1[2] - lo.1[2])).round() as u8,
            ];
        }
        lo = *hi;
    }
    [253, 231, 37]
}

/// Min-max normalize a score map and render it through the fixed colormap.
pub fn heatmap_image(map: &Array2<f64>) -> ImageBuf {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    let mut img = ImageBuf::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let c = colormap((map[[y, x]] - min) / span);
            img.data[[y, x, 0]] = f64::from(c[0]) / 255.0;
            img.data[[y, x, 1]] = f64::from(c[1]) / 255.0;
            img.data[[y, x, 2]] = f64::from(c[2]) / 255.0;
        }
    }
    img
}

/// Write `report.json`, `scores.csv` and (optionally) `heatmaps/*.png` under
/// `dir`. `maps` must align with `report.samples`.
pub fn write_eval_outputs(
    dir: &Path,
    report: &EvalReport,
    maps: &[AnomalyMap],
    heatmaps: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jpath = dir.join("report.json");
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?;
    std::fs::write(&jpath, text).map_err(|e| Error::io(&jpath, e))?;

    let cpath = dir.join("scores.csv");
    let mut wtr = csv::Writer::from_path(&cpath).map_err(|e| Error::Data(format!("{e}")))?;
    wtr.write_record(["rel_path", "class", "label", "image_score", "pred_class"])
        .map_err(|e| Error::Data(format!("{e}")))?;
    for s in &report.samples {
        wtr.write_record([
            s.rel_path.as_str(),
            s.class_name.as_str(),
            &s.label.to_string(),
            &format!("{:.9}", s.image_score),
            s.pred_class.as_deref().unwrap_or(""),
        ])
        .map_err(|e| Error::Data(format!("{e}")))?;
    }
    wtr.flush().map_err(|e| Error::io(&cpath, e))?;

    if heatmaps {
        if maps.len() != report.samples.len() {
            return Err(Error::Shape(
                "heatmap list does not align with the sample table".into(),
            ));
        }
        let hdir = dir.join("heatmaps");
        std::fs::create_dir_all(&hdir).map_err(|e| Error::io(&hdir, e))?;
        for (s, m) in report.samples.iter().zip(maps) {
            let name = s.rel_path.replace('/', "_");
            let path = hdir.join(format!("{name}"));
            let path = path.with_extension("png");
            heatmap_image(&m.map).save_png(&path)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [68, 1, 84]);
        assert_eq!(colormap(1.0), [253, 231, 37]);
        assert_eq!(colormap(-5.0), [68, 1, 84]);
        assert_eq!(colormap(7.0), [253, 231, 37]);
    }

    #[test]
    fn heatmap_normalizes_constant_maps() {
        let map = Array2::from_elem((4, 4), 3.0);
        let img = heatmap_image(&map);
        assert!(img.is_finite());
    }
}
