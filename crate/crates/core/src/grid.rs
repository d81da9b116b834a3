//! Nearest-neighbour resampling and flips for label maps and images.

use ndarray::{s, Array2, Array3};

/// Nearest-neighbour resize: output `(i, j)` reads input
/// `(floor(i * H / h), floor(j * W / w))`.
pub fn resize_nearest<T: Copy>(src: &Array2<T>, h: usize, w: usize) -> Array2<T> {
    let (sh, sw) = src.dim();
    let rows: Vec<usize> = (0..h).map(|i| i * sh / h).collect();
    let cols: Vec<usize> = (0..w).map(|j| j * sw / w).collect();
    Array2::from_shape_fn((h, w), |(i, j)| src[[rows[i], cols[j]]])
}

pub fn flip_horizontal<T: Copy>(src: &Array2<T>) -> Array2<T> {
    src.slice(s![.., ..;-1]).to_owned()
}

pub fn flip_horizontal_rgb(src: &Array3<u8>) -> Array3<u8> {
    src.slice(s![.., ..;-1, ..]).to_owned()
}
