use ndarray::{linalg::general_mat_mul, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

use super::{Graph, Real, Var};

/// Parameter nodes of one GRU direction. Gates are packed `[r, z, n]`.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    /// `[input, 3·hidden]`
    pub w_ih: Var,
    /// `[hidden, 3·hidden]`
    pub w_hh: Var,
    /// `[3·hidden]`
    pub b_ih: Var,
    /// `[3·hidden]`
    pub b_hh: Var,
}

fn sigmoid<F: Real>(x: F) -> F {
    x.sigmoid()
}

impl<F: Real> Graph<F> {
    /// Single-direction gated recurrent layer over `[B, T, D]`, returning the
    /// hidden sequence `[B, T, H]`. With `reverse` the sequence is read from
    /// the last frame backwards; outputs stay aligned with input frames.
    ///
    /// `r = σ(Wx + b + Uh + c)`, `z = σ(...)`,
    /// `n = tanh(Wx + b + r ⊙ (Uh + c))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
    pub fn gru(&mut self, x: Var, p: GruParams, reverse: bool) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let h = self.shape(p.w_hh)[0];
        let h3 = 3 * h;
        assert_eq!(self.shape(p.w_ih), &[d, h3], "gru: w_ih shape");
        assert_eq!(self.shape(p.w_hh), &[h, h3], "gru: w_hh shape");

        let (vx, w_ih, w_hh) = (self.value_rc(x), self.value_rc(p.w_ih), self.value_rc(p.w_hh));
        let b_ih = self.value(p.b_ih).as_slice().expect("layout").to_vec();
        let b_hh = self.value(p.b_hh).as_slice().expect("layout").to_vec();
        let w_ih_v = ArrayView2::from_shape((d, h3), w_ih.as_slice().expect("layout")).expect("shape");
        let w_hh_v = ArrayView2::from_shape((h, h3), w_hh.as_slice().expect("layout")).expect("shape");

        // input projections for every (item, frame)
        let mut xp = vec![F::zero(); b * t * h3];
        {
            let xv = ArrayView2::from_shape((b * t, d), vx.as_slice().expect("layout")).expect("shape");
            let mut xpv = ArrayViewMut2::from_shape((b * t, h3), &mut xp[..]).expect("shape");
            general_mat_mul(F::one(), &xv, &w_ih_v, F::zero(), &mut xpv);
        }
        for row in xp.chunks_mut(h3) {
            row.iter_mut().zip(&b_ih).for_each(|(v, &bias)| *v += bias);
        }

        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        let mut out = vec![F::zero(); b * t * h];
        // per (item, frame): r, z, n, and the recurrent candidate term
        let mut gates = vec![F::zero(); b * t * 4 * h];
        let mut hidden = vec![F::zero(); b * h];
        let mut hp = vec![F::zero(); b * h3];
        for &ti in &order {
            {
                let hv = ArrayView2::from_shape((b, h), &hidden[..]).expect("shape");
                let mut hpv = ArrayViewMut2::from_shape((b, h3), &mut hp[..]).expect("shape");
                general_mat_mul(F::one(), &hv, &w_hh_v, F::zero(), &mut hpv);
            }
            for bi in 0..b {
                let xrow = &xp[(bi * t + ti) * h3..(bi * t + ti + 1) * h3];
                let hrow = &hp[bi * h3..(bi + 1) * h3];
                let grow = &mut gates[(bi * t + ti) * 4 * h..(bi * t + ti + 1) * 4 * h];
                for j in 0..h {
                    let r = sigmoid(xrow[j] + hrow[j] + b_hh[j]);
                    let z = sigmoid(xrow[h + j] + hrow[h + j] + b_hh[h + j]);
                    let hn = hrow[2 * h + j] + b_hh[2 * h + j];
                    let n = (xrow[2 * h + j] + r * hn).tanh();
                    let prev = hidden[bi * h + j];
                    let next = (F::one() - z) * n + z * prev;
                    grow[j] = r;
                    grow[h + j] = z;
                    grow[2 * h + j] = n;
                    grow[3 * h + j] = hn;
                    hidden[bi * h + j] = next;
                    out[(bi * t + ti) * h + j] = next;
                }
            }
        }

        let value = ArrayD::from_shape_vec(IxDyn(&[b, t, h]), out).expect("shape");
        let states = value.clone();
        let params = [p.w_ih, p.w_hh, p.b_ih, p.b_hh];
        self.push_op(value, &[x, p.w_ih, p.w_hh, p.b_ih, p.b_hh], move |g, sink| {
            let gs = g.as_slice().expect("layout");
            let states = states.as_slice().expect("layout");
            let w_hh_v = ArrayView2::from_shape((h, h3), w_hh.as_slice().expect("layout")).expect("shape");
            let mut dxp = vec![F::zero(); b * t * h3];
            let mut dw_hh = ArrayD::<F>::zeros(IxDyn(&[h, h3]));
            let mut db_hh = vec![F::zero(); h3];
            let mut dh_next = vec![F::zero(); b * h];
            let mut dhp = vec![F::zero(); b * h3];
            let mut prev = vec![F::zero(); b * h];
            for (step, &ti) in order.iter().enumerate().rev() {
                for bi in 0..b {
                    for j in 0..h {
                        prev[bi * h + j] = if step == 0 {
                            F::zero()
                        } else {
                            states[(bi * t + order[step - 1]) * h + j]
                        };
                    }
                }
                for bi in 0..b {
                    let grow = &gates[(bi * t + ti) * 4 * h..(bi * t + ti + 1) * 4 * h];
                    let drow = &mut dxp[(bi * t + ti) * h3..(bi * t + ti + 1) * h3];
                    let dhrow = &mut dhp[bi * h3..(bi + 1) * h3];
                    for j in 0..h {
                        let (r, z, n, hn) = (grow[j], grow[h + j], grow[2 * h + j], grow[3 * h + j]);
                        let dh = gs[(bi * t + ti) * h + j] + dh_next[bi * h + j];
                        let dn = dh * (F::one() - z);
                        let dz = dh * (prev[bi * h + j] - n);
                        let dan = dn * (F::one() - n * n);
                        let dar = dan * hn * r * (F::one() - r);
                        let daz = dz * z * (F::one() - z);
                        drow[j] = dar;
                        drow[h + j] = daz;
                        drow[2 * h + j] = dan;
                        dhrow[j] = dar;
                        dhrow[h + j] = daz;
                        dhrow[2 * h + j] = dan * r;
                        // direct path through z ⊙ h
                        dh_next[bi * h + j] = dh * z;
                    }
                }
                let pv = ArrayView2::from_shape((b, h), &prev[..]).expect("shape");
                let dhpv = ArrayView2::from_shape((b, h3), &dhp[..]).expect("shape");
                {
                    let mut dwv = ArrayViewMut2::from_shape((h, h3), dw_hh.as_slice_mut().expect("layout")).expect("shape");
                    general_mat_mul(F::one(), &pv.t(), &dhpv, F::one(), &mut dwv);
                }
                for row in dhp.chunks(h3) {
                    db_hh.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                let mut dnv = ArrayViewMut2::from_shape((b, h), &mut dh_next[..]).expect("shape");
                general_mat_mul(F::one(), &dhpv, &w_hh_v.t(), F::one(), &mut dnv);
            }

            let dxpv = ArrayView2::from_shape((b * t, h3), &dxp[..]).expect("shape");
            if sink.wants(x) {
                let w_ih_v = ArrayView2::from_shape((d, h3), w_ih.as_slice().expect("layout")).expect("shape");
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[b, t, d]));
                {
                    let mut dxv = ArrayViewMut2::from_shape((b * t, d), dx.as_slice_mut().expect("layout")).expect("shape");
                    general_mat_mul(F::one(), &dxpv, &w_ih_v.t(), F::zero(), &mut dxv);
                }
                sink.add(x, dx);
            }
            sink.accumulate_with(params[0], &[d, h3], |dw| {
                let xv = ArrayView2::from_shape((b * t, d), vx.as_slice().expect("layout")).expect("shape");
                let mut dwv = ArrayViewMut2::from_shape((d, h3), dw.as_slice_mut().expect("layout")).expect("shape");
                general_mat_mul(F::one(), &xv.t(), &dxpv, F::one(), &mut dwv);
            });
            sink.add(params[1], dw_hh);
            sink.accumulate_with(params[2], &[h3], |db| *db += &dxpv.sum_axis(Axis(0)).into_dyn());
            sink.add(params[3], ArrayD::from_shape_vec(IxDyn(&[h3]), db_hh).expect("shape"));
        })
    }

    /// Bidirectional layer: forward and backward hidden sequences
    /// concatenated to `[B, T, 2H]`.
    pub fn bigru(&mut self, x: Var, forward: GruParams, backward: GruParams) -> Var {
        let f = self.gru(x, forward, false);
        let b = self.gru(x, backward, true);
        self.concat_last(&[f, b])
    }
}
