//! Image panels for predictions and pseudo masks.

use ndarray::{s, Array2, Array3};

use crate::dataset::IGNORE;

const GAP: usize = 4;
const LEGEND_HEIGHT: usize = 12;
const IGNORE_COLOR: [u8; 3] = [255, 255, 255];

/// Distinct colours for labels `0..=k`; label 0 is black.
pub fn palette(k: usize) -> Vec<[u8; 3]> {
    let mut out = vec![[0, 0, 0]];
    for i in 0..k {
        let h = i as f64 / k.max(1) as f64;
        out.push(hsv(h, 0.75, 0.95));
    }
    out
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Label map painted with `colors`; ignore pixels are white and labels past
/// the palette grey.
pub fn colorize(labels: &Array2<u8>, colors: &[[u8; 3]]) -> Array3<u8> {
    let (h, w) = labels.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let v = labels[[y, x]];
        if v == IGNORE {
            IGNORE_COLOR[c]
        } else {
            colors.get(v as usize).map_or(128, |col| col[c])
        }
    })
}

/// `pixels` with the foreground of a binary mask tinted.
pub fn overlay(pixels: &Array3<u8>, mask: &Array2<u8>, tint: [u8; 3]) -> Array3<u8> {
    let mut out = pixels.clone();
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 1 {
            for c in 0..3 {
                out[[y, x, c]] = ((out[[y, x, c]] as u16 + tint[c] as u16) / 2) as u8;
            }
        } else if v == IGNORE {
            for c in 0..3 {
                out[[y, x, c]] /= 2;
            }
        }
    }
    out
}

/// Panels placed left to right on a grey canvas.
pub fn hstack(panels: &[Array3<u8>]) -> Array3<u8> {
    let h = panels.iter().map(|p| p.dim().0).max().unwrap_or(0);
    let w: usize = panels.iter().map(|p| p.dim().1).sum::<usize>() + GAP * panels.len().saturating_sub(1);
    let mut out = Array3::from_elem((h, w, 3), 64u8);
    let mut x0 = 0;
    for p in panels {
        let (ph, pw, _) = p.dim();
        out.slice_mut(s![..ph, x0..x0 + pw, ..]).assign(p);
        x0 += pw + GAP;
    }
    out
}

/// Support with its mask, query, query ground truth and prediction.
pub fn episode_panel(support: &Array3<u8>, support_mask: &Array2<u8>, query: &Array3<u8>, gt: &Array2<u8>, pred: &Array2<u8>) -> Array3<u8> {
    let green = [40, 220, 60];
    let red = [230, 50, 40];
    hstack(&[
        overlay(support, support_mask, green),
        query.clone(),
        overlay(query, gt, green),
        overlay(query, pred, red),
    ])
}

/// Image beside its colourised pseudo mask, with a legend strip of one
/// swatch per label `0..=k` underneath.
pub fn pseudo_panel(pixels: &Array3<u8>, labels: &Array2<u8>, k: usize) -> Array3<u8> {
    let colors = palette(k);
    let top = hstack(&[pixels.clone(), colorize(labels, &colors)]);
    let (h, w, _) = top.dim();
    let legend = legend_strip(&colors, w);
    let mut out = Array3::from_elem((h + GAP + LEGEND_HEIGHT, w, 3), 64u8);
    out.slice_mut(s![..h, .., ..]).assign(&top);
    out.slice_mut(s![h + GAP.., .., ..]).assign(&legend);
    out
}

/// Equal-width swatches, one per colour.
pub fn legend_strip(colors: &[[u8; 3]], width: usize) -> Array3<u8> {
    let n = colors.len().max(1);
    Array3::from_shape_fn((LEGEND_HEIGHT, width, 3), |(_, x, c)| colors[(x * n / width.max(1)).min(n - 1)][c])
}
