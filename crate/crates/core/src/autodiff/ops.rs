use ndarray::{linalg::general_mat_mul, Array1, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};
use rand::Rng;

use super::{lit, Graph, Real, Var};

fn view2<F: Real>(a: &ArrayD<F>, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), a.as_slice().expect("standard layout")).expect("shape")
}

fn view2_mut<F: Real>(a: &mut ArrayD<F>, rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), a.as_slice_mut().expect("standard layout")).expect("shape")
}

fn standard<F: Real>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Sum of `f(a_i, b_i)` with eight interleaved accumulators, so the loop
/// vectorizes and rounding error grows with `n / 8` rather than `n`.
#[inline]
fn lane_sum<F: Real>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += f(x[k], y[k]);
        }
    }
    let tail = ra.iter().zip(rb).fold(F::zero(), |s, (&x, &y)| s + f(x, y));
    acc.iter().fold(tail, |s, &v| s + v)
}

fn sigmoid<F: Real>(x: F) -> F {
    x.sigmoid()
}

/// Batch-normalization statistics source.
pub enum BatchNormMode<'a, F: Real> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a Array1<F>, var: &'a Array1<F> },
}

impl<F: Real> Graph<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = standard(self.value(a) + self.value(b));
        self.push_op(value, &[a, b], move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = standard(self.value(a) - self.value(b));
        self.push_op(value, &[a, b], move |g, sink| {
            sink.add(a, g.clone());
            if sink.wants(b) {
                sink.add(b, g.mapv(|x| -x));
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        let value = standard(&*va * &*vb);
        self.push_op(value, &[a, b], move |g, sink| {
            if sink.wants(a) {
                sink.add(a, standard(g * &*vb));
            }
            if sink.wants(b) {
                sink.add(b, standard(g * &*va));
            }
        })
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a).mapv(|x| x * factor);
        self.push_op(value, &[a], move |g, sink| sink.add(a, g.mapv(|x| x * factor)))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push_op(value, &[a], move |g, sink| {
            let gs = g.iter().copied().next().unwrap_or_else(F::zero);
            sink.add(a, ArrayD::from_elem(IxDyn(&shape), gs));
        })
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, F::one() / lit(n as f64))
    }

    /// Sum of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter().copied();
        let first = iter.next().expect("add_all needs at least one term");
        iter.fold(first, |acc, t| self.add(acc, t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.shape(a).to_vec();
        let value = self.value(a).clone().into_shape_with_order(IxDyn(shape)).expect("reshape: size mismatch");
        self.push_op(value, &[a], move |g, sink| {
            sink.add(a, g.clone().into_shape_with_order(IxDyn(&old)).expect("shape"));
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let out = std::rc::Rc::new(value.clone());
        self.push_op(value, &[a], move |g, sink| {
            let mut d = g.clone();
            d.zip_mut_with(&out, |d, &y| *d *= y * (F::one() - y));
            sink.add(a, d);
        })
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (k, n) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(*xs.last().expect("rank >= 1"), k, "linear: input width mismatch");
        assert_eq!(self.shape(b), &[n], "linear: bias shape");
        let m = xs.iter().product::<usize>() / k;
        let (vx, vw) = (self.value_rc(x), self.value_rc(w));
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("rank >= 1") = n;
        let mut value = ArrayD::zeros(IxDyn(&out_shape));
        {
            let mut out = view2_mut(&mut value, m, n);
            out += &self.value(b).view().into_shape_with_order(n).expect("bias");
            general_mat_mul(F::one(), &view2(&vx, m, k), &view2(&vw, k, n), F::one(), &mut out);
        }
        self.push_op(value, &[x, w, b], move |g, sink| {
            let gv = view2(g, m, n);
            if sink.wants(x) {
                let mut dx = ArrayD::zeros(IxDyn(&xs));
                general_mat_mul(F::one(), &gv, &view2(&vw, k, n).t(), F::zero(), &mut view2_mut(&mut dx, m, k));
                sink.add(x, dx);
            }
            sink.accumulate_with(w, &[k, n], |dw| {
                general_mat_mul(F::one(), &view2(&vx, m, k).t(), &gv, F::one(), &mut view2_mut(dw, k, n));
            });
            sink.accumulate_with(b, &[n], |db| {
                *db += &gv.sum_axis(Axis(0)).into_dyn();
            });
        })
    }

    /// Gated linear unit over the channel axis of `[B, 2C, ...]`: first half
    /// times the sigmoid of the second half.
    pub fn glu(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2 && xs[1] % 2 == 0, "glu: channel axis must be even");
        let batch = xs[0];
        let half = xs[1] / 2 * xs[2..].iter().product::<usize>();
        let mut out_shape = xs.clone();
        out_shape[1] /= 2;
        let vx = self.value_rc(x);
        let src = vx.as_slice().expect("standard layout");
        let mut gate = Vec::with_capacity(batch * half);
        let mut out = Vec::with_capacity(batch * half);
        for chunk in src.chunks_exact(2 * half) {
            let (lin, gat) = chunk.split_at(half);
            let start = gate.len();
            gate.extend(gat.iter().map(|&v| sigmoid(v)));
            out.extend(lin.iter().zip(&gate[start..]).map(|(&a, &s)| a * s));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("shape");
        self.push_op(value, &[x], move |g, sink| {
            let gs = g.as_slice().expect("standard layout");
            let src = vx.as_slice().expect("standard layout");
            sink.accumulate_with(x, &xs, |dx| {
                let dx = dx.as_slice_mut().expect("standard layout");
                let rows = dx.chunks_exact_mut(2 * half).zip(src.chunks_exact(2 * half));
                for ((dx, src), (gate, gs)) in rows.zip(gate.chunks_exact(half).zip(gs.chunks_exact(half))) {
                    let (dlin, dgat) = dx.split_at_mut(half);
                    for (((dl, dg), &a), (&s, &go)) in dlin.iter_mut().zip(dgat.iter_mut()).zip(&src[..half]).zip(gate.iter().zip(gs)) {
                        *dl += go * s;
                        *dg += go * a * s * (F::one() - s);
                    }
                }
            });
        })
    }

    /// Per-channel normalization of `[B, C, T, F]` followed by an affine map.
    /// In training mode also returns the batch mean and biased variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, F>,
        eps: f64,
    ) -> (Var, Option<(Array1<F>, Array1<F>)>) {
        let xs = self.shape(x).to_vec();
        let (batch, channels) = (xs[0], xs[1]);
        let plane = xs[2..].iter().product::<usize>();
        let count = batch * plane;
        let vx = self.value_rc(x);
        let src = vx.as_slice().expect("standard layout");
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = Array1::<F>::zeros(channels);
                let mut var = Array1::<F>::zeros(channels);
                let planes = |c: usize| (0..batch).map(move |bi| (bi * channels + c) * plane);
                for c in 0..channels {
                    let acc: f64 = planes(c).map(|off| lane_sum(&src[off..off + plane], &src[off..off + plane], |v, _| v).to_f64().unwrap_or(0.0)).sum();
                    let m: F = lit(acc / count as f64);
                    let sq: f64 = planes(c)
                        .map(|off| {
                            let p = &src[off..off + plane];
                            lane_sum(p, p, |v, _| (v - m) * (v - m)).to_f64().unwrap_or(0.0)
                        })
                        .sum();
                    mean[c] = m;
                    var[c] = lit(sq / count as f64);
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => (mean.clone(), var.clone(), false),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + lit(eps)).sqrt()).collect();
        let gv = self.value_rc(gamma);
        let bv = self.value(beta).clone();
        let mut normalized = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (i, src) in src.chunks_exact(plane).enumerate() {
            let c = i % channels;
            let (m, is, ga, be) = (mean[c], inv_std[c], gv[[c]], bv[[c]]);
            let start = normalized.len();
            normalized.extend(src.iter().map(|&v| (v - m) * is));
            out.extend(normalized[start..].iter().map(|&xh| ga * xh + be));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&xs), out).expect("shape");
        let stats = train.then(|| (mean.clone(), var.clone()));
        let out = self.push_op(value, &[x, gamma, beta], move |g, sink| {
            let gs = g.as_slice().expect("standard layout");
            let mut sum_dy = vec![F::zero(); channels];
            let mut sum_dy_xh = vec![F::zero(); channels];
            for (i, (g, nrm)) in gs.chunks_exact(plane).zip(normalized.chunks_exact(plane)).enumerate() {
                let c = i % channels;
                sum_dy[c] += lane_sum(g, g, |v, _| v);
                sum_dy_xh[c] += lane_sum(g, nrm, |v, n| v * n);
            }
            sink.accumulate_with(gamma, &[channels], |d| {
                for c in 0..channels {
                    d[[c]] += sum_dy_xh[c];
                }
            });
            sink.accumulate_with(beta, &[channels], |d| {
                for c in 0..channels {
                    d[[c]] += sum_dy[c];
                }
            });
            sink.accumulate_with(x, &xs, |dx| {
                let dx = dx.as_slice_mut().expect("standard layout");
                let n: F = lit(count as f64);
                let rows = dx.chunks_exact_mut(plane).zip(gs.chunks_exact(plane)).zip(normalized.chunks_exact(plane));
                for (i, ((dx, g), nrm)) in rows.enumerate() {
                    let c = i % channels;
                    let k = gv[[c]] * inv_std[c];
                    if train {
                        let (mdy, mdyx) = (sum_dy[c] / n, sum_dy_xh[c] / n);
                        for ((d, &gi), &xh) in dx.iter_mut().zip(g).zip(nrm) {
                            *d += k * (gi - mdy - xh * mdyx);
                        }
                    } else {
                        for (d, &gi) in dx.iter_mut().zip(g) {
                            *d += k * gi;
                        }
                    }
                }
            });
        });
        (out, stats)
    }

    /// Average pooling of `[B, C, T, F]` by `(pool_t, pool_f)`. A trailing
    /// partial window averages over the entries it covers.
    pub fn avg_pool(&mut self, x: Var, pool_t: usize, pool_f: usize) -> Var {
        let xs = self.shape(x).to_vec();
        if pool_t == 1 && pool_f == 1 {
            return x;
        }
        let (bc, t, f) = (xs[0] * xs[1], xs[2], xs[3]);
        let (to, fo) = (t.div_ceil(pool_t), f.div_ceil(pool_f));
        let vx = self.value_rc(x);
        let src = vx.as_slice().expect("standard layout");
        let mut value = ArrayD::zeros(IxDyn(&[xs[0], xs[1], to, fo]));
        let dst = value.as_slice_mut().expect("standard layout");
        let win = move |o: usize, p: usize, n: usize| (o * p, ((o + 1) * p).min(n));
        // bin index and reciprocal width along frequency
        let bins: Vec<usize> = (0..f).map(|fi| fi / pool_f).collect();
        let mut row = vec![F::zero(); f];
        for plane in 0..bc {
            let sp = &src[plane * t * f..(plane + 1) * t * f];
            let dp = &mut dst[plane * to * fo..(plane + 1) * to * fo];
            for ot in 0..to {
                let (t0, t1) = win(ot, pool_t, t);
                row.copy_from_slice(&sp[t0 * f..(t0 + 1) * f]);
                for ti in t0 + 1..t1 {
                    row.iter_mut().zip(&sp[ti * f..(ti + 1) * f]).for_each(|(r, &v)| *r += v);
                }
                let out = &mut dp[ot * fo..(ot + 1) * fo];
                for (&b, &v) in bins.iter().zip(&row) {
                    out[b] += v;
                }
                for (of, o) in out.iter_mut().enumerate() {
                    let (f0, f1) = win(of, pool_f, f);
                    *o /= lit(((t1 - t0) * (f1 - f0)) as f64);
                }
            }
        }
        self.push_op(value, &[x], move |g, sink| {
            let gs = g.as_slice().expect("standard layout");
            sink.accumulate_with(x, &xs, |dx| {
                let dx = dx.as_slice_mut().expect("standard layout");
                let mut row = vec![F::zero(); f];
                for plane in 0..bc {
                    for ot in 0..to {
                        let (t0, t1) = win(ot, pool_t, t);
                        let gout = &gs[plane * to * fo + ot * fo..plane * to * fo + (ot + 1) * fo];
                        for (fi, r) in row.iter_mut().enumerate() {
                            let of = bins[fi];
                            let (f0, f1) = win(of, pool_f, f);
                            *r = gout[of] / lit(((t1 - t0) * (f1 - f0)) as f64);
                        }
                        for ti in t0..t1 {
                            let base = plane * t * f + ti * f;
                            dx[base..base + f].iter_mut().zip(&row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            });
        })
    }

    /// `[B, C, T, F]` to the sequence layout `[B, T, C·F]`.
    pub fn to_sequence(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, c, t, f) = (xs[0], xs[1], xs[2], xs[3]);
        let value = standard(self.value(x).view().permuted_axes(IxDyn(&[0, 2, 1, 3])).to_owned())
            .into_shape_with_order(IxDyn(&[b, t, c * f]))
            .expect("shape");
        self.push_op(value, &[x], move |g, sink| {
            let back = g.view().into_shape_with_order(IxDyn(&[b, t, c, f])).expect("shape");
            sink.add(x, standard(back.permuted_axes(IxDyn(&[0, 2, 1, 3])).to_owned()));
        })
    }

    /// Inverted dropout: surviving entries are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep: F = lit(1.0 / (1.0 - p));
        let mask = ArrayD::from_shape_fn(self.value(x).raw_dim(), |_| {
            if rng.random::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        });
        let value = standard(self.value(x) * &mask);
        self.push_op(value, &[x], move |g, sink| sink.add(x, standard(g * &mask)))
    }

    /// Softmax-attention pooling over time. `probs` and `logits` are
    /// `[B, T, C]`; returns `[B, C]` with weights `softmax_T(logits)`.
    pub fn attention_pool(&mut self, probs: Var, logits: Var) -> Var {
        let xs = self.shape(probs).to_vec();
        assert_eq!(xs, self.shape(logits), "attention_pool: shape mismatch");
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        let (vp, vl) = (self.value_rc(probs), self.value_rc(logits));
        let (p, l) = (vp.as_slice().expect("layout"), vl.as_slice().expect("layout"));
        let mut weights = vec![F::zero(); b * t * c];
        let mut value = ArrayD::zeros(IxDyn(&[b, c]));
        {
            let out = value.as_slice_mut().expect("layout");
            for bi in 0..b {
                for ci in 0..c {
                    let at = |ti: usize| (bi * t + ti) * c + ci;
                    let max = (0..t).map(|ti| l[at(ti)]).fold(F::neg_infinity(), F::max);
                    let mut z = F::zero();
                    for ti in 0..t {
                        let e = (l[at(ti)] - max).exp();
                        weights[at(ti)] = e;
                        z += e;
                    }
                    let mut acc = F::zero();
                    for ti in 0..t {
                        weights[at(ti)] /= z;
                        acc += weights[at(ti)] * p[at(ti)];
                    }
                    out[bi * c + ci] = acc;
                }
            }
        }
        let pooled = value.clone();
        self.push_op(value, &[probs, logits], move |g, sink| {
            let gs = g.as_slice().expect("layout");
            let p = vp.as_slice().expect("layout");
            let pooled = pooled.as_slice().expect("layout");
            sink.accumulate_with(probs, &xs, |dp| {
                let dp = dp.as_slice_mut().expect("layout");
                for i in 0..b * t * c {
                    let (bi, ci) = (i / (t * c), i % c);
                    dp[i] += gs[bi * c + ci] * weights[i];
                }
            });
            sink.accumulate_with(logits, &xs, |dl| {
                let dl = dl.as_slice_mut().expect("layout");
                for i in 0..b * t * c {
                    let (bi, ci) = (i / (t * c), i % c);
                    dl[i] += gs[bi * c + ci] * weights[i] * (p[i] - pooled[bi * c + ci]);
                }
            });
        })
    }

    /// Mean over axis 1 of `[B, T, D]`.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let t = xs[1];
        let value = self.value(x).mean_axis(Axis(1)).expect("non-empty time axis");
        self.push_op(value, &[x], move |g, sink| {
            let share = g.mapv(|v| v / lit(t as f64)).insert_axis(Axis(1));
            let d = share.broadcast(IxDyn(&xs)).expect("broadcast").to_owned();
            sink.add(x, d);
        })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last: no inputs");
        let rank = self.shape(parts[0]).len();
        let axis = Axis(rank - 1);
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[rank - 1]).collect();
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = standard(ndarray::concatenate(axis, &views).expect("concat_last: shape mismatch"));
        let parts_owned = parts.to_vec();
        self.push_op(value, parts, move |g, sink| {
            let mut start = 0;
            for (p, w) in parts_owned.iter().zip(&widths) {
                if sink.wants(*p) {
                    sink.add(*p, standard(g.slice_axis(axis, (start..start + w).into()).to_owned()));
                }
                start += w;
            }
        })
    }

    /// Weighted binary cross-entropy `Σ w·bce(p, t) / Σ w` between
    /// probabilities `pred` and constant `target`. Zero when `Σ w = 0`.
    pub fn bce(&mut self, pred: Var, target: &ArrayD<F>, weight: &ArrayD<F>) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "bce: target shape");
        assert_eq!(target.shape(), weight.shape(), "bce: weight shape");
        let total: F = weight.sum();
        if total <= F::zero() {
            return self.constant(ArrayD::zeros(IxDyn(&[])));
        }
        let eps: F = if std::mem::size_of::<F>() == 4 { lit(1e-7) } else { lit(1e-12) };
        let vp = self.value_rc(pred);
        let mut loss = F::zero();
        for ((&p, &t), &w) in vp.iter().zip(target.iter()).zip(weight.iter()) {
            if w == F::zero() {
                continue;
            }
            let p = p.max(eps).min(F::one() - eps);
            loss += -w * (t * p.ln() + (F::one() - t) * (F::one() - p).ln());
        }
        let value = ArrayD::from_elem(IxDyn(&[]), loss / total);
        let (target, weight) = (target.clone(), weight.clone());
        self.push_op(value, &[pred], move |g, sink| {
            let gs = g.iter().copied().next().unwrap_or_else(F::zero) / total;
            let mut d = ArrayD::zeros(vp.raw_dim());
            ndarray::Zip::from(&mut d).and(&*vp).and(&target).and(&weight).for_each(|d, &p, &t, &w| {
                if w != F::zero() {
                    let p = p.max(eps).min(F::one() - eps);
                    *d = gs * w * (p - t) / (p * (F::one() - p));
                }
            });
            sink.add(pred, d);
        })
    }

    /// Mean squared error between `pred` and a constant `target`.
    pub fn mse(&mut self, pred: Var, target: &ArrayD<F>) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "mse: shape mismatch");
        let n: F = lit(target.len().max(1) as f64);
        let diff = standard(self.value(pred) - target);
        let value = ArrayD::from_elem(IxDyn(&[]), diff.iter().map(|&d| d * d).sum::<F>() / n);
        self.push_op(value, &[pred], move |g, sink| {
            let gs = g.iter().copied().next().unwrap_or_else(F::zero);
            let k = gs * lit::<F>(2.0) / n;
            sink.add(pred, diff.mapv(|d| d * k));
        })
    }

    /// Rows `index` of axis 0.
    pub fn select_items(&mut self, x: Var, index: &[usize]) -> Var {
        let xs = self.shape(x).to_vec();
        let value = standard(self.value(x).select(Axis(0), index));
        let index = index.to_vec();
        self.push_op(value, &[x], move |g, sink| {
            sink.accumulate_with(x, &xs, |dx| {
                for (k, &i) in index.iter().enumerate() {
                    let mut row = dx.index_axis_mut(Axis(0), i);
                    row += &g.index_axis(Axis(0), k);
                }
            });
        })
    }

    /// Stacks same-shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = standard(ndarray::stack(Axis(0), &views).expect("stack: shape mismatch"));
        let parts_owned = parts.to_vec();
        self.push_op(value, parts, move |g, sink| {
            for (k, p) in parts_owned.iter().enumerate() {
                if sink.wants(*p) {
                    sink.add(*p, g.index_axis(Axis(0), k).to_owned());
                }
            }
        })
    }

    /// Slice `[start, end)` of axis 0.
    pub fn slice_items(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let value = standard(self.value(x).slice_axis(Axis(0), (start..end).into()).to_owned());
        self.push_op(value, &[x], move |g, sink| {
            sink.accumulate_with(x, &xs, |dx| {
                let mut part = dx.slice_axis_mut(Axis(0), (start..end).into());
                part += g;
            });
        })
    }
}
