//! Differentiable operations. Each op computes its value eagerly and pushes a
//! backward closure capturing parent handles and whatever it needs to replay.

use super::tape::{Grads, Tape, Var};
use super::Tensor;

// Raw matmul kernels shared by forward and backward paths.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    // a: (m, k), b: (n, k), out: (m, n)
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    // a: (k, m), b: (k, n), out: (m, n) = a^T b
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    fn next_var(&self) -> Var {
        Var(self.len())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let shape = va.shape().to_vec();
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = self.next_var();
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[a, b],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                if na {
                    grads.accumulate(a, &sh, g.data());
                }
                if nb {
                    grads.accumulate(b, &sh, g.data());
                }
                grads.restore(out, g);
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let shape = va.shape().to_vec();
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = self.next_var();
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[a, b],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                if na {
                    let other = vals[b.0].data();
                    let contrib: Vec<f64> =
                        g.data().iter().zip(other).map(|(gi, o)| gi * o).collect();
                    grads.accumulate(a, &sh, &contrib);
                }
                if nb {
                    let other = vals[a.0].data();
                    let contrib: Vec<f64> =
                        g.data().iter().zip(other).map(|(gi, o)| gi * o).collect();
                    grads.accumulate(b, &sh, &contrib);
                }
                grads.restore(out, g);
            }),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let data = vx.data().iter().map(|v| v * c).collect();
        let out = self.next_var();
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[x],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                let contrib: Vec<f64> = g.data().iter().map(|gi| gi * c).collect();
                grads.accumulate(x, &sh, &contrib);
                grads.restore(out, g);
            }),
        )
    }

    /// Scalar-valued linear combination of scalar vars.
    pub fn affine_combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0;
        for (v, c) in terms {
            acc += self.value(*v).item() * c;
        }
        let parents: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        let coeffs: Vec<f64> = terms.iter().map(|(_, c)| *c).collect();
        let out = self.next_var();
        let ps = parents.clone();
        self.push_op(
            Tensor::scalar(acc),
            &parents,
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                let gv = g.item();
                for (p, c) in ps.iter().zip(&coeffs) {
                    grads.accumulate(*p, &[], &[gv * c]);
                }
                grads.restore(out, g);
            }),
        )
    }

    /// Broadcast-add a length-C bias over the rows of a (P, C) tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let c = vx.cols();
        assert_eq!(vb.numel(), c, "bias width mismatch");
        let shape = vx.shape().to_vec();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (r, b) in row.iter_mut().zip(vb.data()) {
                *r += *b;
            }
        }
        let out = self.next_var();
        let (nx, nb) = (self.requires_grad(x), self.requires_grad(bias));
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[x, bias],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                if nx {
                    grads.accumulate(x, &sh, g.data());
                }
                if nb {
                    grads.with(bias, &[c], |gb| {
                        for row in g.data().chunks(c) {
                            for (b, r) in gb.iter_mut().zip(row) {
                                *b += *r;
                            }
                        }
                    });
                }
                grads.restore(out, g);
            }),
        )
    }

    /// Column-wise learned scaling: y[p, c] = x[p, c] * s[c]. LayerScale.
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Var {
        let vx = self.value(x);
        let vs = self.value(s);
        let c = vx.cols();
        assert_eq!(vs.numel(), c);
        let shape = vx.shape().to_vec();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (r, sv) in row.iter_mut().zip(vs.data()) {
                *r *= *sv;
            }
        }
        let out = self.next_var();
        let (nx, ns) = (self.requires_grad(x), self.requires_grad(s));
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[x, s],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                if nx {
                    let sv = vals[s.0].data();
                    let mut contrib = g.data().to_vec();
                    for row in contrib.chunks_mut(c) {
                        for (r, s) in row.iter_mut().zip(sv) {
                            *r *= *s;
                        }
                    }
                    grads.accumulate(x, &sh, &contrib);
                }
                if ns {
                    let xv = vals[x.0].data();
                    grads.with(s, &[c], |gs| {
                        for (grow, xrow) in g.data().chunks(c).zip(xv.chunks(c)) {
                            for i in 0..c {
                                gs[i] += grow[i] * xrow[i];
                            }
                        }
                    });
                }
                grads.restore(out, g);
            }),
        )
    }

    /// Row-wise constant scaling (drop-path keep masks, padded-row zeroing).
    pub fn scale_rows_const(&mut self, x: Var, scales: Vec<f64>) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        assert_eq!(vx.rows(), scales.len());
        let shape = vx.shape().to_vec();
        let mut data = vx.data().to_vec();
        for (row, sc) in data.chunks_mut(c).zip(&scales) {
            for r in row.iter_mut() {
                *r *= *sc;
            }
        }
        let out = self.next_var();
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[x],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                let mut contrib = g.data().to_vec();
                for (row, sc) in contrib.chunks_mut(c).zip(&scales) {
                    for r in row.iter_mut() {
                        *r *= *sc;
                    }
                }
                grads.accumulate(x, &sh, &contrib);
                grads.restore(out, g);
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let data = mm_nn(va.data(), vb.data(), m, k, n);
        let out = self.next_var();
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        self.push_op(
            Tensor::new(&[m, n], data),
            &[a, b],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                if na {
                    let contrib = mm_nt(g.data(), vals[b.0].data(), m, n, k);
                    grads.accumulate(a, &[m, k], &contrib);
                }
                if nb {
                    let contrib = mm_tn(vals[a.0].data(), g.data(), m, k, n);
                    grads.accumulate(b, &[k, n], &contrib);
                }
                grads.restore(out, g);
            }),
        )
    }

    /// a (m, k) @ b (n, k)^T -> (m, n). Used for attention logits.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (m, k) = (va.rows(), va.cols());
        let (n, k2) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let data = mm_nt(va.data(), vb.data(), m, k, n);
        let out = self.next_var();
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        self.push_op(
            Tensor::new(&[m, n], data),
            &[a, b],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                if na {
                    let contrib = mm_nn(g.data(), vals[b.0].data(), m, n, k);
                    grads.accumulate(a, &[m, k], &contrib);
                }
                if nb {
                    let contrib = mm_tn(g.data(), vals[a.0].data(), m, n, k);
                    grads.accumulate(b, &[n, k], &contrib);
                }
                grads.restore(out, g);
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.numel(), new_shape.iter().product::<usize>(), "reshape numel mismatch");
        let old_shape = vx.shape().to_vec();
        let data = vx.data().to_vec();
        let out = self.next_var();
        self.push_op(
            Tensor::new(new_shape, data),
            &[x],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                grads.accumulate(x, &old_shape, g.data());
                grads.restore(out, g);
            }),
        )
    }

    /// Slice `len` rows of a (P, C) tensor starting at `start`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let p = vx.rows();
        assert!(start + len <= p, "slice_rows out of range");
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let out = self.next_var();
        self.push_op(
            Tensor::new(&[len, c], data),
            &[x],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                grads.with(x, &[p, c], |gx| {
                    for (gi, go) in gx[start * c..(start + len) * c].iter_mut().zip(g.data()) {
                        *gi += *go;
                    }
                });
                grads.restore(out, g);
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut lens = Vec::new();
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), c, "concat_rows width mismatch");
            lens.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = lens.iter().sum();
        let out = self.next_var();
        let parts_v = parts.to_vec();
        self.push_op(
            Tensor::new(&[total, c], data),
            parts,
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                let mut offset = 0;
                for (p, len) in parts_v.iter().zip(&lens) {
                    let sl = &g.data()[offset * c..(offset + len) * c];
                    grads.accumulate(*p, &[*len, c], sl);
                    offset += len;
                }
                grads.restore(out, g);
            }),
        )
    }

    /// Slice `len` columns starting at `start` from a (P, C) tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (p, c) = (vx.rows(), vx.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(p * len);
        for row in vx.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = self.next_var();
        self.push_op(
            Tensor::new(&[p, len], data),
            &[x],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                grads.with(x, &[p, c], |gx| {
                    for (i, grow) in g.data().chunks(len).enumerate() {
                        for (j, gv) in grow.iter().enumerate() {
                            gx[i * c + start + j] += gv;
                        }
                    }
                });
                grads.restore(out, g);
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let p = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|v| self.value(*v).cols()).collect();
        for v in parts {
            assert_eq!(self.value(*v).rows(), p, "concat_cols row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; p * total];
        let mut offset = 0;
        for (part, w) in parts.iter().zip(&widths) {
            let v = self.value(*part);
            for i in 0..p {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = self.next_var();
        let parts_v = parts.to_vec();
        self.push_op(
            Tensor::new(&[p, total], data),
            parts,
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                let mut offset = 0;
                for (part, w) in parts_v.iter().zip(&widths) {
                    grads.with(*part, &[p, *w], |gp| {
                        for i in 0..p {
                            for j in 0..*w {
                                gp[i * w + j] += g.data()[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
                grads.restore(out, g);
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let data: Vec<f64> = vx.data().iter().map(|v| v.max(0.0)).collect();
        let out = self.next_var();
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[x],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                let xv = vals[x.0].data();
                let contrib: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 })
                    .collect();
                grads.accumulate(x, &sh, &contrib);
                grads.restore(out, g);
            }),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let data: Vec<f64> = vx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()))
            .collect();
        let out = self.next_var();
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[x],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                let xv = vals[x.0].data();
                let contrib: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| {
                        let u = C * (v + A * v * v * v);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * A * v * v);
                        gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                grads.accumulate(x, &sh, &contrib);
                grads.restore(out, g);
            }),
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let shape = vx.shape().to_vec();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        let out = self.next_var();
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[x],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                let y = vals[out.0].data();
                let mut contrib = vec![0.0; g.numel()];
                for ((crow, grow), yrow) in
                    contrib.chunks_mut(c).zip(g.data().chunks(c)).zip(y.chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for i in 0..c {
                        crow[i] = yrow[i] * (grow[i] - dot);
                    }
                }
                grads.accumulate(x, &sh, &contrib);
                grads.restore(out, g);
            }),
        )
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let shape = vx.shape().to_vec();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|r| (r - mx).exp()).sum::<f64>().ln();
            for r in row.iter_mut() {
                *r -= lse;
            }
        }
        let out = self.next_var();
        let sh = shape.clone();
        self.push_op(
            Tensor::new(&shape, data),
            &[x],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                let y = vals[out.0].data();
                let mut contrib = vec![0.0; g.numel()];
                for ((crow, grow), yrow) in
                    contrib.chunks_mut(c).zip(g.data().chunks(c)).zip(y.chunks(c))
                {
                    let gsum: f64 = grow.iter().sum();
                    for i in 0..c {
                        crow[i] = grow[i] - yrow[i].exp() * gsum;
                    }
                }
                grads.accumulate(x, &sh, &contrib);
                grads.restore(out, g);
            }),
        )
    }

    pub fn layernorm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let c = vx.cols();
        assert_eq!(self.value(gain).numel(), c);
        assert_eq!(self.value(bias).numel(), c);
        let shape = vx.shape().to_vec();
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut data = vec![0.0; vx.numel()];
        for (yrow, xrow) in data.chunks_mut(c).zip(vx.data().chunks(c)) {
            let m = xrow.iter().sum::<f64>() / c as f64;
            let v = xrow.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
            let iv = 1.0 / (v + EPS).sqrt();
            for i in 0..c {
                yrow[i] = gv[i] * (xrow[i] - m) * iv + bv[i];
            }
        }
        let out = self.next_var();
        let sh = shape.clone();
        let (nx, ng, nb) =
            (self.requires_grad(x), self.requires_grad(gain), self.requires_grad(bias));
        self.push_op(
            Tensor::new(&shape, data),
            &[x, gain, bias],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                let xv = vals[x.0].data();
                let gainv = vals[gain.0].data();
                if nx {
                    let mut contrib = vec![0.0; g.numel()];
                    for ((crow, grow), xrow) in
                        contrib.chunks_mut(c).zip(g.data().chunks(c)).zip(xv.chunks(c))
                    {
                        let m = xrow.iter().sum::<f64>() / c as f64;
                        let v = xrow.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
                        let iv = 1.0 / (v + EPS).sqrt();
                        // dxhat, then the standard layernorm backward.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..c {
                            let xhat = (xrow[i] - m) * iv;
                            let dxhat = grow[i] * gainv[i];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for i in 0..c {
                            let xhat = (xrow[i] - m) * iv;
                            let dxhat = grow[i] * gainv[i];
                            crow[i] = iv
                                * (dxhat
                                    - sum_dxhat / c as f64
                                    - xhat * sum_dxhat_xhat / c as f64);
                        }
                    }
                    grads.accumulate(x, &sh, &contrib);
                }
                if ng {
                    grads.with(gain, &[c], |gg| {
                        for (grow, xrow) in g.data().chunks(c).zip(xv.chunks(c)) {
                            let m = xrow.iter().sum::<f64>() / c as f64;
                            let v =
                                xrow.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
                            let iv = 1.0 / (v + EPS).sqrt();
                            for i in 0..c {
                                gg[i] += grow[i] * (xrow[i] - m) * iv;
                            }
                        }
                    });
                }
                if nb {
                    grads.with(bias, &[c], |gb| {
                        for grow in g.data().chunks(c) {
                            for i in 0..c {
                                gb[i] += grow[i];
                            }
                        }
                    });
                }
                grads.restore(out, g);
            }),
        )
    }

    /// Training-mode batchnorm over the rows of a (P, C) tensor. Rows with
    /// `valid[p] == false` are excluded from the statistics but still
    /// transformed. Returns the output var plus the batch mean/var so the
    /// caller can fold them into running averages.
    pub fn batchnorm_rows_train(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        valid: Option<&[bool]>,
    ) -> (Var, Tensor, Tensor) {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (p, c) = (vx.rows(), vx.cols());
        let valid: Vec<bool> = match valid {
            Some(v) => {
                assert_eq!(v.len(), p);
                v.to_vec()
            }
            None => vec![true; p],
        };
        let n_valid = valid.iter().filter(|b| **b).count().max(1);
        let mut mean = vec![0.0; c];
        for (row, ok) in vx.data().chunks(c).zip(&valid) {
            if *ok {
                for i in 0..c {
                    mean[i] += row[i];
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= n_valid as f64;
        }
        let mut var = vec![0.0; c];
        for (row, ok) in vx.data().chunks(c).zip(&valid) {
            if *ok {
                for i in 0..c {
                    let d = row[i] - mean[i];
                    var[i] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= n_valid as f64;
        }
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let iv: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
        let mut data = vec![0.0; p * c];
        for (yrow, xrow) in data.chunks_mut(c).zip(vx.data().chunks(c)) {
            for i in 0..c {
                yrow[i] = gv[i] * (xrow[i] - mean[i]) * iv[i] + bv[i];
            }
        }
        let out = self.next_var();
        let (nx, ng, nb) =
            (self.requires_grad(x), self.requires_grad(gain), self.requires_grad(bias));
        let mean_t = Tensor::new(&[c], mean.clone());
        let var_t = Tensor::new(&[c], var.clone());
        let valid_b = valid.clone();
        let (mean_b, iv_b) = (mean.clone(), iv.clone());
        let var = self.push_op(
            Tensor::new(&[p, c], data),
            &[x, gain, bias],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                let xv = vals[x.0].data();
                let gainv = vals[gain.0].data();
                if nx {
                    // Stats depend on valid rows only; every row's output
                    // depends on the stats.
                    let nf = n_valid as f64;
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    for ((grow, xrow), _) in g
                        .data()
                        .chunks(c)
                        .zip(xv.chunks(c))
                        .zip(&valid_b)
                        .filter(|(_, ok)| **ok)
                    {
                        for i in 0..c {
                            let dxhat = grow[i] * gainv[i];
                            sum_dxhat[i] += dxhat;
                            sum_dxhat_xhat[i] += dxhat * (xrow[i] - mean_b[i]) * iv_b[i];
                        }
                    }
                    // Contributions routed through the statistics also pick
                    // up gradient from invalid (padded) rows.
                    let mut pad_dxhat = vec![0.0; c];
                    let mut pad_dxhat_xhat = vec![0.0; c];
                    for ((grow, xrow), _) in g
                        .data()
                        .chunks(c)
                        .zip(xv.chunks(c))
                        .zip(&valid_b)
                        .filter(|(_, ok)| !**ok)
                    {
                        for i in 0..c {
                            let dxhat = grow[i] * gainv[i];
                            pad_dxhat[i] += dxhat;
                            pad_dxhat_xhat[i] += dxhat * (xrow[i] - mean_b[i]) * iv_b[i];
                        }
                    }
                    let mut contrib = vec![0.0; p * c];
                    for ((crow, (grow, xrow)), ok) in contrib
                        .chunks_mut(c)
                        .zip(g.data().chunks(c).zip(xv.chunks(c)))
                        .zip(&valid_b)
                    {
                        for i in 0..c {
                            let dxhat = grow[i] * gainv[i];
                            let xhat = (xrow[i] - mean_b[i]) * iv_b[i];
                            let direct = dxhat * iv_b[i];
                            if *ok {
                                let dm = (sum_dxhat[i] + pad_dxhat[i]) / nf;
                                let dv =
                                    (sum_dxhat_xhat[i] + pad_dxhat_xhat[i]) / nf * xhat;
                                crow[i] = direct - iv_b[i] * (dm + dv);
                            } else {
                                crow[i] = direct;
                            }
                        }
                    }
                    grads.accumulate(x, &[p, c], &contrib);
                }
                if ng {
                    grads.with(gain, &[c], |gg| {
                        for (grow, xrow) in g.data().chunks(c).zip(xv.chunks(c)) {
                            for i in 0..c {
                                gg[i] += grow[i] * (xrow[i] - mean_b[i]) * iv_b[i];
                            }
                        }
                    });
                }
                if nb {
                    grads.with(bias, &[c], |gb| {
                        for grow in g.data().chunks(c) {
                            for i in 0..c {
                                gb[i] += grow[i];
                            }
                        }
                    });
                }
                grads.restore(out, g);
            }),
        );
        (var, mean_t, var_t)
    }

    /// Eval-mode batchnorm: affine transform with frozen running statistics.
    pub fn batchnorm_rows_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (p, c) = (vx.rows(), vx.cols());
        assert_eq!(running_mean.numel(), c);
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let rm = running_mean.data().to_vec();
        let iv: Vec<f64> =
            running_var.data().iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
        let mut data = vec![0.0; p * c];
        for (yrow, xrow) in data.chunks_mut(c).zip(vx.data().chunks(c)) {
            for i in 0..c {
                yrow[i] = gv[i] * (xrow[i] - rm[i]) * iv[i] + bv[i];
            }
        }
        let out = self.next_var();
        let (nx, ng, nb) =
            (self.requires_grad(x), self.requires_grad(gain), self.requires_grad(bias));
        let (rm_b, iv_b) = (rm.clone(), iv.clone());
        self.push_op(
            Tensor::new(&[p, c], data),
            &[x, gain, bias],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                let xv = vals[x.0].data();
                let gainv = vals[gain.0].data();
                if nx {
                    let mut contrib = vec![0.0; p * c];
                    for (crow, grow) in contrib.chunks_mut(c).zip(g.data().chunks(c)) {
                        for i in 0..c {
                            crow[i] = grow[i] * gainv[i] * iv_b[i];
                        }
                    }
                    grads.accumulate(x, &[p, c], &contrib);
                }
                if ng {
                    grads.with(gain, &[c], |gg| {
                        for (grow, xrow) in g.data().chunks(c).zip(xv.chunks(c)) {
                            for i in 0..c {
                                gg[i] += grow[i] * (xrow[i] - rm_b[i]) * iv_b[i];
                            }
                        }
                    });
                }
                if nb {
                    grads.with(bias, &[c], |gb| {
                        for grow in g.data().chunks(c) {
                            for i in 0..c {
                                gb[i] += grow[i];
                            }
                        }
                    });
                }
                grads.restore(out, g);
            }),
        )
    }

    /// Token embedding lookup: (V, D) table, id list -> (L, D).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let out = self.next_var();
        let ids_v = ids.to_vec();
        let l = ids.len();
        self.push_op(
            Tensor::new(&[l, d], data),
            &[table],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                grads.with(table, &[v, d], |gt| {
                    for (row, &id) in g.data().chunks(d).zip(&ids_v) {
                        for i in 0..d {
                            gt[id * d + i] += row[i];
                        }
                    }
                });
                grads.restore(out, g);
            }),
        )
    }

    /// Materializes the (T, T) relative-position bias for one head from a
    /// (heads, 2*max_dist+1) table; offsets are clipped at +-max_dist.
    pub fn rel_bias(&mut self, table: Var, head: usize, t: usize) -> Var {
        let vt = self.value(table);
        let w = vt.cols();
        assert!(w % 2 == 1, "relative bias table width must be odd");
        let max_dist = (w - 1) / 2;
        let heads = vt.rows();
        assert!(head < heads);
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                let off = (j as isize - i as isize)
                    .clamp(-(max_dist as isize), max_dist as isize);
                data[i * t + j] = vt.data()[head * w + (off + max_dist as isize) as usize];
            }
        }
        let out = self.next_var();
        self.push_op(
            Tensor::new(&[t, t], data),
            &[table],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                grads.with(table, &[heads, w], |gt| {
                    for i in 0..t {
                        for j in 0..t {
                            let off = (j as isize - i as isize)
                                .clamp(-(max_dist as isize), max_dist as isize);
                            gt[head * w + (off + max_dist as isize) as usize] +=
                                g.data()[i * t + j];
                        }
                    }
                });
                grads.restore(out, g);
            }),
        )
    }

    /// Replaces the listed rows of (T, D) features with a learned token.
    pub fn substitute_rows(&mut self, x: Var, rows: &[usize], token: Var) -> Var {
        let vx = self.value(x);
        let (p, d) = (vx.rows(), vx.cols());
        assert_eq!(self.value(token).numel(), d, "mask token width mismatch");
        let tok = self.value(token).data().to_vec();
        let mut data = vx.data().to_vec();
        for &r in rows {
            assert!(r < p, "substitute_rows index out of range");
            data[r * d..(r + 1) * d].copy_from_slice(&tok);
        }
        let out = self.next_var();
        let rows_v: Vec<usize> = rows.to_vec();
        let (nx, nt) = (self.requires_grad(x), self.requires_grad(token));
        self.push_op(
            Tensor::new(&[p, d], data),
            &[x, token],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                let replaced: std::collections::HashSet<usize> =
                    rows_v.iter().copied().collect();
                if nx {
                    let mut contrib = g.data().to_vec();
                    for &r in &rows_v {
                        for v in contrib[r * d..(r + 1) * d].iter_mut() {
                            *v = 0.0;
                        }
                    }
                    grads.accumulate(x, &[p, d], &contrib);
                }
                if nt {
                    grads.with(token, &[d], |gt| {
                        for &r in &replaced {
                            for i in 0..d {
                                gt[i] += g.data()[r * d + i];
                            }
                        }
                    });
                }
                grads.restore(out, g);
            }),
        )
    }

    /// Stop-gradient: value passes through, backward stops here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Negative cosine similarity summed over the given frame indices.
    /// Frames where either side has (near-)zero norm contribute 0.
    pub fn neg_cosine_set(&mut self, pred: Var, target: Var, set: &[usize]) -> Var {
        const EPS: f64 = 1e-12;
        let vp = self.value(pred);
        let vt = self.value(target);
        assert_eq!(vp.cols(), vt.cols(), "feature width mismatch");
        assert_eq!(vp.rows(), vt.rows(), "feature length mismatch");
        let d = vp.cols();
        let mut acc = 0.0;
        for &n in set {
            let p = &vp.data()[n * d..(n + 1) * d];
            let t = &vt.data()[n * d..(n + 1) * d];
            let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if np < EPS || nt < EPS {
                continue;
            }
            let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            acc -= dot / (np * nt);
        }
        let out = self.next_var();
        let set_v = set.to_vec();
        let (np_g, nt_g) = (self.requires_grad(pred), self.requires_grad(target));
        let (pr, pc) = (vp.rows(), d);
        self.push_op(
            Tensor::scalar(acc),
            &[pred, target],
            Box::new(move |vals, grads| {
                let g = grads.take(out).unwrap();
                let gv = g.item();
                let pv = vals[pred.0].data();
                let tv = vals[target.0].data();
                let mut gp = vec![0.0; pr * pc];
                let mut gt = vec![0.0; pr * pc];
                for &n in &set_v {
                    let p = &pv[n * pc..(n + 1) * pc];
                    let t = &tv[n * pc..(n + 1) * pc];
                    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if np < EPS || nt < EPS {
                        continue;
                    }
                    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
                    for i in 0..pc {
                        // d(-cos)/dp = -(t/(|p||t|) - dot * p / (|p|^3 |t|))
                        gp[n * pc + i] -=
                            gv * (t[i] / (np * nt) - dot * p[i] / (np * np * np * nt));
                        gt[n * pc + i] -=
                            gv * (p[i] / (np * nt) - dot * t[i] / (nt * nt * nt * np));
                    }
                }
                if np_g {
                    grads.accumulate(pred, &[pr, pc], &gp);
                }
                if nt_g {
                    grads.accumulate(target, &[pr, pc], &gt);
                }
                grads.restore(out, g);
            }),
        )
    }

    /// Mean negative log-likelihood of `targets` under per-row log-probs.
    pub fn nll_mean(&mut self, logp: Var, targets: &[usize]) -> Var {
        let v = self.value(logp);
        let (l, c) = (v.rows(), v.cols());
        assert_eq!(l, targets.len(), "target length mismatch");
        let mut acc = 0.0;
        for (row, &t) in v.data().chunks(c).zip(targets) {
            assert!(t < c, "target id out of range");
            acc -= row[t];
        }
        acc /= l as f64;
        let out = self.next_var();
        let tv = targets.to_vec();
        self.push_op(
            Tensor::scalar(acc),
            &[logp],
            Box::new(move |_vals, grads| {
                let g = grads.take(out).unwrap();
                let gv = g.item();
                grads.with(logp, &[l, c], |gl| {
                    for (i, &t) in tv.iter().enumerate() {
                        gl[i * c + t] -= gv / l as f64;
                    }
                });
                grads.restore(out, g);
            }),
        )
    }

    /// Custom-op escape hatch used by the CTC loss.
    pub(crate) fn custom_op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: super::tape::BackwardFn,
    ) -> Var {
        self.push_op(value, parents, backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data))
    }

    #[test]
    fn matmul_matches_hand_example() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, &[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let y = tape.softmax_rows(x);
        for row in tape.value(y).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn neg_cosine_identical_vectors() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[3, 2], vec![1.0, 0.0, 0.0, 2.0, 3.0, 3.0]);
        let t = tape.detach(p);
        let set = [0usize, 1, 2];
        let loss = tape.neg_cosine_set(p, t, &set);
        assert!((tape.value(loss).item() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn neg_cosine_zero_norm_contributes_zero() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[2, 2], vec![0.0, 0.0, 1.0, 0.0]);
        let t = leaf(&mut tape, &[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let loss = tape.neg_cosine_set(p, t, &[0, 1]);
        assert!((tape.value(loss).item() + 1.0).abs() < 1e-12);
        let g = tape.backward(loss);
        assert!(g.get(p).unwrap().is_finite());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[], vec![2.0]);
        let d = tape.detach(x);
        let y = tape.mul(d, x); // y = const(2) * x
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }
}
