//! Self-contained grouped-bar-chart rendering for the comparison reports.
//! Uses a built-in 5x7 bitmap font so the binary has no font-stack
//! dependency and renders identically everywhere.

use std::path::Path;

use crate::error::Result;
use crate::raster::ImageBuf;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0E],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        _ => [0x00; 7],
    }
}

fn put_pixel(img: &mut ImageBuf, x: i64, y: i64, color: [f64; 3]) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    for c in 0..3 {
        img.data[[y as usize, x as usize, c]] = color[c];
    }
}

pub fn draw_text(img: &mut ImageBuf, x: i64, y: i64, text: &str, color: [f64; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (gy, row) in rows.iter().enumerate() {
            for gx in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - gx)) != 0 {
                    put_pixel(img, cx + gx as i64, y + gy as i64, color);
                }
            }
        }
        cx += GLYPH_W as i64 + 1;
    }
}

pub fn text_width(text: &str) -> usize {
    text.chars().count() * (GLYPH_W + 1)
}

fn fill_rect(img: &mut ImageBuf, x0: i64, y0: i64, w: i64, h: i64, color: [f64; 3]) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            put_pixel(img, x, y, color);
        }
    }
}

const SERIES_COLORS: [[f64; 3]; 6] = [
    [0.22, 0.49, 0.72],
    [0.89, 0.47, 0.20],
    [0.30, 0.69, 0.29],
    [0.84, 0.22, 0.27],
    [0.58, 0.40, 0.74],
    [0.55, 0.55, 0.55],
];

/// Grouped bar chart with values in `[0, 1]`: one group per `group_labels`
/// entry, one bar per series inside each group.
pub fn bar_chart(
    path: &Path,
    title: &str,
    group_labels: &[String],
    series_labels: &[String],
    values: &[Vec<f64>],
) -> Result<()> {
    assert_eq!(values.len(), series_labels.len(), "one value row per series");
    for row in values {
        assert_eq!(row.len(), group_labels.len(), "one value per group");
    }
    let n_groups = group_labels.len().max(1);
    let n_series = series_labels.len().max(1);

    let bar_w = 14i64;
    let gap_in_group = 2i64;
    let group_gap = 24i64;
    let group_w = n_series as i64 * (bar_w + gap_in_group) + group_gap;
    let margin_left = 52i64;
    let margin_right = 20i64;
    let plot_h = 220i64;
    let margin_top = 26i64;
    let legend_h = 14 * n_series as i64 + 8;
    let margin_bottom = 34i64 + legend_h;

    let width = (margin_left + margin_right + group_w * n_groups as i64) as usize;
    let height = (margin_top + plot_h + margin_bottom) as usize;
    let mut img = ImageBuf::filled(height, width.max(title.len() * 6 + 20), [1.0, 1.0, 1.0]);

    let black = [0.0, 0.0, 0.0];
    let grey = [0.8, 0.8, 0.8];
    draw_text(&mut img, margin_left, 8, title, black);

    // axis + gridlines every 0.1
    let y_of = |v: f64| margin_top + plot_h - (v.clamp(0.0, 1.0) * plot_h as f64) as i64;
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let y = y_of(v);
        for x in margin_left..(img.width() as i64 - margin_right) {
            put_pixel(&mut img, x, y, grey);
        }
        draw_text(&mut img, 8, y - 3, &format!("{v:.1}"), black);
    }
    for y in margin_top..=margin_top + plot_h {
        put_pixel(&mut img, margin_left, y, black);
    }

    for (gi, glabel) in group_labels.iter().enumerate() {
        let gx = margin_left + 12 + gi as i64 * group_w;
        for si in 0..n_series {
            let v = values[si][gi];
            let x0 = gx + si as i64 * (bar_w + gap_in_group);
            let y0 = y_of(v);
            let color = SERIES_COLORS[si % SERIES_COLORS.len()];
            fill_rect(&mut img, x0, y0, bar_w, margin_top + plot_h - y0, color);
        }
        let lx = gx + (n_series as i64 * (bar_w + gap_in_group)) / 2 - text_width(glabel) as i64 / 2;
        draw_text(&mut img, lx.max(0), margin_top + plot_h + 6, glabel, black);
    }

    // legend
    let ly0 = margin_top + plot_h + 22;
    for (si, slabel) in series_labels.iter().enumerate() {
        let y = ly0 + si as i64 * 14;
        fill_rect(&mut img, margin_left, y, 10, 10, SERIES_COLORS[si % SERIES_COLORS.len()]);
        draw_text(&mut img, margin_left + 14, y + 1, slabel, black);
    }

    img.save_png(path)
}
