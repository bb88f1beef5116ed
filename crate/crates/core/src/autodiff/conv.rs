use ndarray::{linalg::general_mat_mul, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::{GradSink, Graph, Real, Var};

const K: usize = 3;

/// Unfolds one `[C, T, F]` sample into `[C·9, T·F]` columns for a 3×3
/// convolution with zero padding 1.
fn im2col<F: Real>(src: &[F], channels: usize, t: usize, f: usize, cols: &mut [F]) {
    let plane = t * f;
    for c in 0..channels {
        let sp = &src[c * plane..(c + 1) * plane];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((c * K + ky) * K + kx) * plane..((c * K + ky) * K + kx + 1) * plane];
                for ti in 0..t {
                    let dst = &mut row[ti * f..(ti + 1) * f];
                    let st = ti as isize + ky as isize - 1;
                    if st < 0 || st >= t as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let srow = &sp[st as usize * f..(st as usize + 1) * f];
                    match kx {
                        0 => {
                            dst[0] = F::zero();
                            dst[1..].copy_from_slice(&srow[..f - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..f - 1].copy_from_slice(&srow[1..]);
                            dst[f - 1] = F::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
fn col2im<F: Real>(cols: &[F], channels: usize, t: usize, f: usize, dst: &mut [F]) {
    let plane = t * f;
    for c in 0..channels {
        let dp = &mut dst[c * plane..(c + 1) * plane];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((c * K + ky) * K + kx) * plane..((c * K + ky) * K + kx + 1) * plane];
                for ti in 0..t {
                    let st = ti as isize + ky as isize - 1;
                    if st < 0 || st >= t as isize {
                        continue;
                    }
                    let drow = &mut dp[st as usize * f..(st as usize + 1) * f];
                    let src = &row[ti * f..(ti + 1) * f];
                    match kx {
                        0 => drow[..f - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => drow.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => drow[1..].iter_mut().zip(&src[..f - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
}

impl<F: Real> Graph<F> {
    /// 3×3 convolution with zero padding 1 and unit stride, no bias.
    /// `x` is `[B, Cin, T, F]`, `weight` is `[Cout, Cin·9]`.
    pub fn conv3x3(&mut self, x: Var, weight: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "conv3x3: input must be [B, C, T, F]");
        let (batch, cin, t, f) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = self.shape(weight)[0];
        assert_eq!(self.shape(weight)[1], cin * K * K, "conv3x3: weight shape");
        let plane = t * f;
        let (vx, vw) = (self.value_rc(x), self.value_rc(weight));
        let wmat = ArrayView2::from_shape((cout, cin * K * K), vw.as_slice().expect("layout")).expect("shape");
        let mut cols = vec![F::zero(); cin * K * K * plane];
        let mut value = ArrayD::zeros(IxDyn(&[batch, cout, t, f]));
        {
            let src = vx.as_slice().expect("layout");
            let dst = value.as_slice_mut().expect("layout");
            for b in 0..batch {
                im2col(&src[b * cin * plane..(b + 1) * cin * plane], cin, t, f, &mut cols);
                let cview = ArrayView2::from_shape((cin * K * K, plane), &cols[..]).expect("shape");
                let mut out =
                    ArrayViewMut2::from_shape((cout, plane), &mut dst[b * cout * plane..(b + 1) * cout * plane]).expect("shape");
                general_mat_mul(F::one(), &wmat, &cview, F::zero(), &mut out);
            }
        }
        self.push_op(value, &[x, weight], move |g, sink: &mut GradSink<F>| {
            let gs = g.as_slice().expect("layout");
            let src = vx.as_slice().expect("layout");
            let wmat = ArrayView2::from_shape((cout, cin * K * K), vw.as_slice().expect("layout")).expect("shape");
            let want_x = sink.wants(x);
            let want_w = sink.wants(weight);
            let mut cols = vec![F::zero(); cin * K * K * plane];
            let mut dcols = vec![F::zero(); if want_x { cin * K * K * plane } else { 0 }];
            let mut dw = ArrayD::<F>::zeros(IxDyn(&[cout, cin * K * K]));
            let mut dx = if want_x { Some(ArrayD::<F>::zeros(IxDyn(&xs))) } else { None };
            for b in 0..batch {
                let gview = ArrayView2::from_shape((cout, plane), &gs[b * cout * plane..(b + 1) * cout * plane]).expect("shape");
                if want_w {
                    im2col(&src[b * cin * plane..(b + 1) * cin * plane], cin, t, f, &mut cols);
                    let cview = ArrayView2::from_shape((cin * K * K, plane), &cols[..]).expect("shape");
                    let mut dwv =
                        ArrayViewMut2::from_shape((cout, cin * K * K), dw.as_slice_mut().expect("layout")).expect("shape");
                    general_mat_mul(F::one(), &gview, &cview.t(), F::one(), &mut dwv);
                }
                if let Some(dx) = dx.as_mut() {
                    let mut dcv = ArrayViewMut2::from_shape((cin * K * K, plane), &mut dcols[..]).expect("shape");
                    general_mat_mul(F::one(), &wmat.t(), &gview, F::zero(), &mut dcv);
                    let dxs = dx.as_slice_mut().expect("layout");
                    col2im(&dcols, cin, t, f, &mut dxs[b * cin * plane..(b + 1) * cin * plane]);
                }
            }
            if want_w {
                sink.add(weight, dw);
            }
            if let Some(dx) = dx {
                sink.add(x, dx);
            }
        })
    }
}
