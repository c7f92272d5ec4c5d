//! Interpolation kernels shared by image preprocessing and the network upsampler.
//!
//! Bilinear sampling follows the half-pixel-center convention: output pixel `i`
//! samples input coordinate `(i + 0.5) * in / out - 0.5`, clamped to the grid.

use crate::data::{FloodMask, ImageTensor};

/// One output sample expressed as two weighted input taps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f32,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let w_hi = if hi == lo { 0.0 } else { (src - lo as f64) as f32 };
            Tap { lo, hi, w_hi }
        })
        .collect()
}

/// Dense `out_len x in_len` interpolation matrix, row-major.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f32> {
    let mut m = vec![0f32; out_len * in_len];
    for (i, t) in bilinear_taps(in_len, out_len).into_iter().enumerate() {
        m[i * in_len + t.lo] += 1.0 - t.w_hi;
        m[i * in_len + t.hi] += t.w_hi;
    }
    m
}

/// Bilinear resize of a single row-major plane.
pub fn resize_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in &ty {
        let r0 = &src[y.lo * w..(y.lo + 1) * w];
        let r1 = &src[y.hi * w..(y.hi + 1) * w];
        for x in &tx {
            let top = r0[x.lo] * (1.0 - x.w_hi) + r0[x.hi] * x.w_hi;
            let bot = r1[x.lo] * (1.0 - x.w_hi) + r1[x.hi] * x.w_hi;
            out.push(top * (1.0 - y.w_hi) + bot * y.w_hi);
        }
    }
    out
}

pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    if img.height() == out_h && img.width() == out_w {
        return img.clone();
    }
    let ty = bilinear_taps(img.height(), out_h);
    let tx = bilinear_taps(img.width(), out_w);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for y in &ty {
        for x in &tx {
            for c in 0..3 {
                let top = img.get(y.lo, x.lo, c) * (1.0 - x.w_hi) + img.get(y.lo, x.hi, c) * x.w_hi;
                let bot = img.get(y.hi, x.lo, c) * (1.0 - x.w_hi) + img.get(y.hi, x.hi, c) * x.w_hi;
                data.push(top * (1.0 - y.w_hi) + bot * y.w_hi);
            }
        }
    }
    ImageTensor::with_domain(out_h, out_w, data, img.domain())
}

/// Nearest-neighbour resize; keeps the value set of the mask intact.
pub fn resize_nearest(mask: &FloodMask, out_h: usize, out_w: usize) -> FloodMask {
    let (h, w) = (mask.height(), mask.width());
    let src = |i: usize, n_in: usize, n_out: usize| ((i * n_in) / n_out).min(n_in - 1);
    FloodMask::from_fn(out_h, out_w, |y, x| mask.get(src(y, h, out_h), src(x, w, out_w)) == 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_identity_when_sizes_match() {
        for (i, t) in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(t.lo, i);
            assert_eq!(t.w_hi, 0.0);
        }
    }

    #[test]
    fn matrix_rows_sum_to_one() {
        let m = bilinear_matrix(7, 224);
        for row in m.chunks(7) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_by_four_matches_half_pixel_rule() {
        // out pixel 3 -> src 0.375, out pixel 4 -> src 0.625
        let t = bilinear_taps(2, 8);
        assert_eq!((t[3].lo, t[3].hi), (0, 1));
        assert!((t[3].w_hi - 0.375).abs() < 1e-7);
        assert!((t[4].w_hi - 0.625).abs() < 1e-7);
        assert_eq!(t[0].w_hi, 0.0);
    }

    #[test]
    fn nearest_preserves_binary_values() {
        let m = FloodMask::from_fn(385, 512, |y, x| (x + y) % 7 < 3);
        let r = resize_nearest(&m, 224, 224);
        assert_eq!(r.height(), 224);
        assert!(r.data().iter().all(|&v| v <= 1));
        assert!(r.count_ones() > 0 && r.count_ones() < 224 * 224);
    }
}
