use ndarray::{Array2, ArrayView2};

use super::SirenError;

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Align-corners source taps for resizing an axis of `n_in` samples to `n_out`.
fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                return Tap { lo: 0, hi: 0, frac: 0.0 };
            }
            // Exact rational position keeps corner samples exact.
            let num = i * (n_in - 1);
            let den = n_out - 1;
            let lo = num / den;
            let frac = (num % den) as f64 / den as f64;
            Tap {
                lo,
                hi: (lo + 1).min(n_in - 1),
                frac,
            }
        })
        .collect()
}

fn check(features: &ArrayView2<f64>, height: usize, width: usize) -> Result<(), SirenError> {
    if features.nrows() != height * width {
        return Err(SirenError::ShapeMismatch(format!(
            "{} feature rows for a {height}x{width} lattice",
            features.nrows()
        )));
    }
    Ok(())
}

/// Bilinear upsampling of a `height x width` feature map (rows in
/// row-major pixel order) by an integer factor, align-corners convention.
pub fn upsample_bilinear(
    features: ArrayView2<f64>,
    height: usize,
    width: usize,
    factor: usize,
) -> Result<Array2<f64>, SirenError> {
    check(&features, height, width)?;
    if factor == 0 {
        return Err(SirenError::InvalidSpec("upsample factor 0".into()));
    }
    if factor == 1 {
        return Ok(features.to_owned());
    }
    let (oh, ow) = (height * factor, width * factor);
    let ty = taps(height, oh);
    let tx = taps(width, ow);
    let c = features.ncols();
    let mut out = Array2::zeros((oh * ow, c));
    for (yo, ry) in ty.iter().enumerate() {
        for (xo, rx) in tx.iter().enumerate() {
            let weights = [
                ((ry.lo, rx.lo), (1.0 - ry.frac) * (1.0 - rx.frac)),
                ((ry.lo, rx.hi), (1.0 - ry.frac) * rx.frac),
                ((ry.hi, rx.lo), ry.frac * (1.0 - rx.frac)),
                ((ry.hi, rx.hi), ry.frac * rx.frac),
            ];
            let mut dst = out.row_mut(yo * ow + xo);
            for ((yi, xi), wgt) in weights {
                if wgt != 0.0 {
                    dst.scaled_add(wgt, &features.row(yi * width + xi));
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`]: maps gradients on the upsampled map
/// back onto the `height x width` input map.
pub fn upsample_bilinear_backward(
    grad_out: ArrayView2<f64>,
    height: usize,
    width: usize,
    factor: usize,
) -> Result<Array2<f64>, SirenError> {
    if factor == 0 {
        return Err(SirenError::InvalidSpec("upsample factor 0".into()));
    }
    let (oh, ow) = (height * factor, width * factor);
    check(&grad_out, oh, ow)?;
    if factor == 1 {
        return Ok(grad_out.to_owned());
    }
    let ty = taps(height, oh);
    let tx = taps(width, ow);
    let mut grad_in = Array2::zeros((height * width, grad_out.ncols()));
    for (yo, ry) in ty.iter().enumerate() {
        for (xo, rx) in tx.iter().enumerate() {
            let src = grad_out.row(yo * ow + xo);
            let weights = [
                ((ry.lo, rx.lo), (1.0 - ry.frac) * (1.0 - rx.frac)),
                ((ry.lo, rx.hi), (1.0 - ry.frac) * rx.frac),
                ((ry.hi, rx.lo), ry.frac * (1.0 - rx.frac)),
                ((ry.hi, rx.hi), ry.frac * rx.frac),
            ];
            for ((yi, xi), wgt) in weights {
                if wgt != 0.0 {
                    grad_in.row_mut(yi * width + xi).scaled_add(wgt, &src);
                }
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_factor() {
        let f = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(upsample_bilinear(f.view(), 1, 2, 1).unwrap(), f);
    }

    #[test]
    fn constant_preserved() {
        let f = Array2::from_elem((4, 1), 0.7);
        let up = upsample_bilinear(f.view(), 2, 2, 2).unwrap();
        assert_eq!(up.nrows(), 16);
        assert!(up.iter().all(|v| (*v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn row_interpolation() {
        let f = array![[0.0], [1.0]];
        let up = upsample_bilinear(f.view(), 1, 2, 2).unwrap();
        // 2 rows x 4 columns; each output row is [0, 1/3, 2/3, 1].
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for r in 0..2 {
            for (x, e) in expect.iter().enumerate() {
                assert!((up[[r * 4 + x, 0]] - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <U f, g> == <f, U^T g> for arbitrary f, g.
        let (h, w, n) = (3, 2, 3);
        let f = Array2::from_shape_fn((h * w, 2), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let g = Array2::from_shape_fn((h * n * w * n, 2), |(i, j)| ((i * 5 + j) % 7) as f64 * 0.5);
        let up = upsample_bilinear(f.view(), h, w, n).unwrap();
        let back = upsample_bilinear_backward(g.view(), h, w, n).unwrap();
        let lhs: f64 = (&up * &g).sum();
        let rhs: f64 = (&f * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn shape_errors() {
        let f = Array2::<f64>::zeros((5, 1));
        assert!(upsample_bilinear(f.view(), 2, 2, 2).is_err());
        assert!(upsample_bilinear_backward(f.view(), 1, 1, 2).is_err());
    }
}
