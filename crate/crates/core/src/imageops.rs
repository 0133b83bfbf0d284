//! Resampling helpers for slices, masks and predictions.

use ndarray::Array2;

/// Bilinear interpolation weights mapping `n_in` samples onto `n_out`
/// samples with half-pixel centres (`align_corners = false`). Row `o` holds
/// the weights of output sample `o`.
pub fn bilinear_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let t = src - i0 as f64;
        m[[o, i0]] += 1.0 - t;
        m[[o, i1]] += t;
    }
    m
}

/// Bilinear resize of a 2-D array.
pub fn resize_bilinear(img: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    if img.dim() == (h, w) {
        return img.clone();
    }
    let rows = bilinear_matrix(h, img.nrows());
    let cols = bilinear_matrix(w, img.ncols());
    rows.dot(img).dot(&cols.t())
}

/// Nearest-neighbour resize, sampling the source pixel containing each
/// output pixel centre.
pub fn resize_nearest<T: Copy>(img: &Array2<T>, h: usize, w: usize) -> Array2<T> {
    let (ih, iw) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * ih as f64 / h as f64) as usize).min(ih - 1);
        let sx = (((x as f64 + 0.5) * iw as f64 / w as f64) as usize).min(iw - 1);
        img[[sy, sx]]
    })
}

/// Downsample a binary mask onto a coarser grid. Nearest-neighbour first;
/// a non-empty mask that vanishes under nearest sampling falls back to
/// "any pixel of the cell is set", so foreground never disappears.
pub fn downsample_mask(mask: &Array2<bool>, h: usize, w: usize) -> Array2<bool> {
    let near = resize_nearest(mask, h, w);
    if near.iter().any(|&b| b) || !mask.iter().any(|&b| b) {
        return near;
    }
    let (ih, iw) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            out[[(y * h / ih).min(h - 1), (x * w / iw).min(w - 1)]] = true;
        }
    }
    out
}

/// Zero-mean, unit-variance standardisation; constant inputs map to zeros.
pub fn standardize(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
    (mean, std)
}

pub fn to_f64_mask(mask: &Array2<bool>) -> Array2<f64> {
    mask.mapv(|b| if b { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bilinear_rows_are_convex() {
        for &(o, i) in &[(128, 16), (7, 3), (5, 5), (3, 9)] {
            let m = bilinear_matrix(o, i);
            for r in m.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
                assert!(r.iter().all(|&x| x >= 0.0));
            }
        }
        assert_eq!(bilinear_matrix(4, 4), Array2::<f64>::eye(4));
    }

    #[test]
    fn bilinear_2x_matches_half_pixel_convention() {
        let m = bilinear_matrix(4, 2);
        // output centres at 0.25, 0.75, 1.25, 1.75 in input pixel units
        let expect = array![[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        assert!((&m - &expect).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn nearest_downsample_and_fallback() {
        let mut m = Array2::from_elem((16, 16), false);
        m[[0, 1]] = true;
        let d = downsample_mask(&m, 2, 2);
        assert_eq!(d.iter().filter(|&&b| b).count(), 1);
        assert!(d[[0, 0]]);

        let full = Array2::from_elem((16, 16), true);
        assert!(downsample_mask(&full, 4, 4).iter().all(|&b| b));
    }

    #[test]
    fn standardize_constant() {
        let (m, s) = standardize([2.0, 2.0, 2.0].into_iter());
        assert_eq!((m, s), (2.0, 1.0));
    }
}
