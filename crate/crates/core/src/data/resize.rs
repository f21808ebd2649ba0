//! Bilinear resampling with half-pixel centres.

use super::DataError;
use crate::tensor::Tensor;

fn taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Resizes an `[H, W, C]` image to `[out_h, out_w, C]`.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, DataError> {
    let &[h, w, c] = img.shape() else {
        return Err(DataError::Invalid(format!("resize expects [H, W, C], got {:?}", img.shape())));
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(DataError::Invalid("resize with an empty extent".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out).map_err(|e| DataError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let t = Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.37);
        assert!(resize_bilinear(&t, 3, 4).unwrap().bit_eq(&t));
    }

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::full(&[5, 7, 3], 0.25);
        let r = resize_bilinear(&t, 11, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn downsample_by_two_averages() {
        let t = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_bilinear(&t, 1, 1).unwrap();
        assert!((r.data()[0] - 1.5).abs() < 1e-15);
    }
}
