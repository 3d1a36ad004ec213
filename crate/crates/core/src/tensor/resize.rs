use super::{Scalar, Tensor};
use crate::error::{EscError, Result};

fn sample_axis(i: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, (input - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(input - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize of a `[C,H,W]` image with half-pixel sample centres and
/// clamped borders.
pub fn bilinear_resize<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(EscError::Shape(format!("resize expects [C,H,W], got {s:?}"))),
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(EscError::Shape("resize needs non-empty input and output".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let rows: Vec<_> = (0..out_h).map(|i| sample_axis(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| sample_axis(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in image.data().chunks(h * w) {
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let p = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(T::of_f64(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::<f32>::full(&[2, 5, 3], 7.0);
        for (oh, ow) in [(1, 1), (4, 9), (13, 2)] {
            let out = bilinear_resize(&img, oh, ow).unwrap();
            assert_eq!(out.shape(), &[2, oh, ow]);
            assert!(out.data().iter().all(|&v| (v - 7.0).abs() < 1e-6));
        }
    }

    #[test]
    fn same_size_is_identity() {
        let img = Tensor::<f32>::new(vec![1, 3, 4], (0..12).map(|v| v as f32 * 1.7).collect()).unwrap();
        assert_eq!(bilinear_resize(&img, 3, 4).unwrap(), img);
    }

    #[test]
    fn two_by_two_upsampled_to_four() {
        // reference grid from a standalone scalar interpolation with
        // src = (i + 0.5) * 2 / 4 - 0.5 clamped to [0, 1]
        let expected = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        let img = Tensor::<f64>::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = bilinear_resize(&img, 4, 4).unwrap();
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_empty_output() {
        let img = Tensor::<f32>::zeros(&[1, 2, 2]);
        assert!(bilinear_resize(&img, 0, 3).is_err());
    }
}
