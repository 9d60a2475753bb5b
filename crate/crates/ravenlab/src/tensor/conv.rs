//! Direct convolution and pooling kernels, channels-last layout. Inner loops
//! accumulate over the trailing channel axis so they autovectorize.

use super::tape::{Tape, Var};
use super::Tensor;

impl Tape {
    /// 3-D convolutional stem over a single-channel (T, H, W) clip.
    /// Temporal stride is 1 with same-padding, so T is preserved.
    /// Weights: (kt, kh, kw, Co). Output: (T, Ho, Wo, Co).
    pub fn conv3d_stem(&mut self, x: Var, w: Var, b: Var, spatial_stride: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv3d_stem expects (T, H, W)");
        assert_eq!(ws.len(), 4, "conv3d_stem weights are (kt, kh, kw, Co)");
        let (t, h, wd) = (xs[0], xs[1], xs[2]);
        let (kt, kh, kw, co) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(self.value(b).numel(), co);
        let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
        let s = spatial_stride;
        let ho = (h + 2 * ph - kh) / s + 1;
        let wo = (wd + 2 * pw - kw) / s + 1;

        let bias = self.value(b).data().to_vec();
        let mut out = vec![0.0; t * ho * wo * co];
        {
            let xd = vx.data();
            let wdta = vw.data();
            for to in 0..t {
                for hh in 0..ho {
                    for ww in 0..wo {
                        let orow =
                            &mut out[((to * ho + hh) * wo + ww) * co..((to * ho + hh) * wo + ww + 1) * co];
                        orow.copy_from_slice(&bias);
                        for ki in 0..kt {
                            let ti = to as isize + ki as isize - pt as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            for kj in 0..kh {
                                let hi = (hh * s + kj) as isize - ph as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for kk in 0..kw {
                                    let wi = (ww * s + kk) as isize - pw as isize;
                                    if wi < 0 || wi >= wd as isize {
                                        continue;
                                    }
                                    let xv = xd[(ti as usize * h + hi as usize) * wd
                                        + wi as usize];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let wrow = &wdta[((ki * kh + kj) * kw + kk) * co
                                        ..((ki * kh + kj) * kw + kk + 1) * co];
                                    for (o, wv) in orow.iter_mut().zip(wrow) {
                                        *o += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let outv = Var(self.len());
        let (nx, nw, nb) =
            (self.requires_grad(x), self.requires_grad(w), self.requires_grad(b));
        self.push_op(
            Tensor::new(&[t, ho, wo, co], out),
            &[x, w, b],
            Box::new(move |vals, grads| {
                let g = grads.take(outv).unwrap();
                let gd = g.data();
                let xd = vals[x.0].data();
                let wdta = vals[w.0].data();
                let mut gx = if nx { vec![0.0; t * h * wd] } else { Vec::new() };
                let mut gw = if nw { vec![0.0; kt * kh * kw * co] } else { Vec::new() };
                let mut gb = if nb { vec![0.0; co] } else { Vec::new() };
                for to in 0..t {
                    for hh in 0..ho {
                        for ww in 0..wo {
                            let grow = &gd[((to * ho + hh) * wo + ww) * co
                                ..((to * ho + hh) * wo + ww + 1) * co];
                            if nb {
                                for (a, gi) in gb.iter_mut().zip(grow) {
                                    *a += *gi;
                                }
                            }
                            for ki in 0..kt {
                                let ti = to as isize + ki as isize - pt as isize;
                                if ti < 0 || ti >= t as isize {
                                    continue;
                                }
                                for kj in 0..kh {
                                    let hi = (hh * s + kj) as isize - ph as isize;
                                    if hi < 0 || hi >= h as isize {
                                        continue;
                                    }
                                    for kk in 0..kw {
                                        let wi = (ww * s + kk) as isize - pw as isize;
                                        if wi < 0 || wi >= wd as isize {
                                            continue;
                                        }
                                        let xix = (ti as usize * h + hi as usize) * wd
                                            + wi as usize;
                                        let wix = ((ki * kh + kj) * kw + kk) * co;
                                        if nx {
                                            let wrow = &wdta[wix..wix + co];
                                            let mut acc = 0.0;
                                            for (gi, wv) in grow.iter().zip(wrow) {
                                                acc += gi * wv;
                                            }
                                            gx[xix] += acc;
                                        }
                                        if nw {
                                            let xv = xd[xix];
                                            if xv != 0.0 {
                                                let wrow = &mut gw[wix..wix + co];
                                                for (a, gi) in wrow.iter_mut().zip(grow) {
                                                    *a += xv * gi;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if nx {
                    grads.accumulate(x, &[t, h, wd], &gx);
                }
                if nw {
                    grads.accumulate(w, &[kt, kh, kw, co], &gw);
                }
                if nb {
                    grads.accumulate(b, &[co], &gb);
                }
                grads.restore(outv, g);
            }),
        )
    }

    /// 2-D convolution over a batch of frames: x (N, H, W, Ci), w (kh, kw, Ci, Co).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects (N, H, W, Ci)");
        assert_eq!(ws.len(), 4, "conv2d weights are (kh, kw, Ci, Co)");
        let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, ci2, co) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        assert_eq!(self.value(b).numel(), co);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let bias = self.value(b).data().to_vec();
        let mut out = vec![0.0; n * ho * wo * co];
        {
            let xd = vx.data();
            let wdta = vw.data();
            for ni in 0..n {
                for hh in 0..ho {
                    for ww in 0..wo {
                        let oix = ((ni * ho + hh) * wo + ww) * co;
                        let orow = &mut out[oix..oix + co];
                        orow.copy_from_slice(&bias);
                        for kj in 0..kh {
                            let hi = (hh * stride + kj) as isize - pad as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for kk in 0..kw {
                                let wi = (ww * stride + kk) as isize - pad as isize;
                                if wi < 0 || wi >= wd as isize {
                                    continue;
                                }
                                let xix = ((ni * h + hi as usize) * wd + wi as usize) * ci;
                                let wix = (kj * kw + kk) * ci * co;
                                for c_in in 0..ci {
                                    let xv = xd[xix + c_in];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let wrow = &wdta[wix + c_in * co..wix + (c_in + 1) * co];
                                    for (o, wv) in orow.iter_mut().zip(wrow) {
                                        *o += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let outv = Var(self.len());
        let (nx, nw, nb) =
            (self.requires_grad(x), self.requires_grad(w), self.requires_grad(b));
        self.push_op(
            Tensor::new(&[n, ho, wo, co], out),
            &[x, w, b],
            Box::new(move |vals, grads| {
                let g = grads.take(outv).unwrap();
                let gd = g.data();
                let xd = vals[x.0].data();
                let wdta = vals[w.0].data();
                let mut gx = if nx { vec![0.0; n * h * wd * ci] } else { Vec::new() };
                let mut gw = if nw { vec![0.0; kh * kw * ci * co] } else { Vec::new() };
                let mut gb = if nb { vec![0.0; co] } else { Vec::new() };
                for ni in 0..n {
                    for hh in 0..ho {
                        for ww in 0..wo {
                            let oix = ((ni * ho + hh) * wo + ww) * co;
                            let grow = &gd[oix..oix + co];
                            if nb {
                                for (a, gi) in gb.iter_mut().zip(grow) {
                                    *a += *gi;
                                }
                            }
                            for kj in 0..kh {
                                let hi = (hh * stride + kj) as isize - pad as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for kk in 0..kw {
                                    let wi = (ww * stride + kk) as isize - pad as isize;
                                    if wi < 0 || wi >= wd as isize {
                                        continue;
                                    }
                                    let xix =
                                        ((ni * h + hi as usize) * wd + wi as usize) * ci;
                                    let wix = (kj * kw + kk) * ci * co;
                                    for c_in in 0..ci {
                                        if nx {
                                            let wrow =
                                                &wdta[wix + c_in * co..wix + (c_in + 1) * co];
                                            let mut acc = 0.0;
                                            for (gi, wv) in grow.iter().zip(wrow) {
                                                acc += gi * wv;
                                            }
                                            gx[xix + c_in] += acc;
                                        }
                                        if nw {
                                            let xv = xd[xix + c_in];
                                            if xv != 0.0 {
                                                let wrow = &mut gw
                                                    [wix + c_in * co..wix + (c_in + 1) * co];
                                                for (a, gi) in wrow.iter_mut().zip(grow) {
                                                    *a += xv * gi;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if nx {
                    grads.accumulate(x, &[n, h, wd, ci], &gx);
                }
                if nw {
                    grads.accumulate(w, &[kh, kw, ci, co], &gw);
                }
                if nb {
                    grads.accumulate(b, &[co], &gb);
                }
                grads.restore(outv, g);
            }),
        )
    }

    /// 1-D convolution: x (L, Ci), w (k, Ci, Co) -> (Lo, Co).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        assert_eq!(xs.len(), 2, "conv1d expects (L, Ci)");
        assert_eq!(ws.len(), 3, "conv1d weights are (k, Ci, Co)");
        let (l, ci) = (xs[0], xs[1]);
        let (k, ci2, co) = (ws[0], ws[1], ws[2]);
        assert_eq!(ci, ci2);
        assert_eq!(self.value(b).numel(), co);
        let lo = (l + 2 * pad - k) / stride + 1;
        let bias = self.value(b).data().to_vec();
        let mut out = vec![0.0; lo * co];
        {
            let xd = vx.data();
            let wdta = vw.data();
            for li in 0..lo {
                let orow = &mut out[li * co..(li + 1) * co];
                orow.copy_from_slice(&bias);
                for ki in 0..k {
                    let xi = (li * stride + ki) as isize - pad as isize;
                    if xi < 0 || xi >= l as isize {
                        continue;
                    }
                    let xrow = &xd[xi as usize * ci..(xi as usize + 1) * ci];
                    let wbase = ki * ci * co;
                    for (c_in, xv) in xrow.iter().enumerate() {
                        if *xv == 0.0 {
                            continue;
                        }
                        let wrow = &wdta[wbase + c_in * co..wbase + (c_in + 1) * co];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let outv = Var(self.len());
        let (nx, nw, nb) =
            (self.requires_grad(x), self.requires_grad(w), self.requires_grad(b));
        self.push_op(
            Tensor::new(&[lo, co], out),
            &[x, w, b],
            Box::new(move |vals, grads| {
                let g = grads.take(outv).unwrap();
                let gd = g.data();
                let xd = vals[x.0].data();
                let wdta = vals[w.0].data();
                let mut gx = if nx { vec![0.0; l * ci] } else { Vec::new() };
                let mut gw = if nw { vec![0.0; k * ci * co] } else { Vec::new() };
                let mut gb = if nb { vec![0.0; co] } else { Vec::new() };
                for li in 0..lo {
                    let grow = &gd[li * co..(li + 1) * co];
                    if nb {
                        for (a, gi) in gb.iter_mut().zip(grow) {
                            *a += *gi;
                        }
                    }
                    for ki in 0..k {
                        let xi = (li * stride + ki) as isize - pad as isize;
                        if xi < 0 || xi >= l as isize {
                            continue;
                        }
                        let xbase = xi as usize * ci;
                        let wbase = ki * ci * co;
                        for c_in in 0..ci {
                            if nx {
                                let wrow = &wdta[wbase + c_in * co..wbase + (c_in + 1) * co];
                                let mut acc = 0.0;
                                for (gi, wv) in grow.iter().zip(wrow) {
                                    acc += gi * wv;
                                }
                                gx[xbase + c_in] += acc;
                            }
                            if nw {
                                let xv = xd[xbase + c_in];
                                if xv != 0.0 {
                                    let wrow =
                                        &mut gw[wbase + c_in * co..wbase + (c_in + 1) * co];
                                    for (a, gi) in wrow.iter_mut().zip(grow) {
                                        *a += xv * gi;
                                    }
                                }
                            }
                        }
                    }
                }
                if nx {
                    grads.accumulate(x, &[l, ci], &gx);
                }
                if nw {
                    grads.accumulate(w, &[k, ci, co], &gw);
                }
                if nb {
                    grads.accumulate(b, &[co], &gb);
                }
                grads.restore(outv, g);
            }),
        )
    }

    /// Spatial max-pool over (N, H, W, C), kernel 3, stride 2, pad 1.
    pub fn maxpool2d(&mut self, x: Var) -> Var {
        let (k, s, p) = (3usize, 2usize, 1usize);
        let vx = self.value(x);
        let xs = vx.shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![f64::NEG_INFINITY; n * ho * wo * c];
        let mut argmax = vec![0usize; n * ho * wo * c];
        {
            let xd = vx.data();
            for ni in 0..n {
                for hh in 0..ho {
                    for ww in 0..wo {
                        let oix = ((ni * ho + hh) * wo + ww) * c;
                        for kj in 0..k {
                            let hi = (hh * s + kj) as isize - p as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for kk in 0..k {
                                let wi = (ww * s + kk) as isize - p as isize;
                                if wi < 0 || wi >= w as isize {
                                    continue;
                                }
                                let xix = ((ni * h + hi as usize) * w + wi as usize) * c;
                                for cc in 0..c {
                                    if xd[xix + cc] > out[oix + cc] {
                                        out[oix + cc] = xd[xix + cc];
                                        argmax[oix + cc] = xix + cc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let outv = Var(self.len());
        self.push_op(
            Tensor::new(&[n, ho, wo, c], out),
            &[x],
            Box::new(move |_vals, grads| {
                let g = grads.take(outv).unwrap();
                grads.with(x, &[n, h, w, c], |gx| {
                    for (gi, &ix) in g.data().iter().zip(&argmax) {
                        gx[ix] += gi;
                    }
                });
                grads.restore(outv, g);
            }),
        )
    }

    /// Non-overlapping 1-D average pool: x (L, C), kernel == stride.
    pub fn avgpool1d(&mut self, x: Var, k: usize) -> Var {
        let vx = self.value(x);
        let (l, c) = (vx.rows(), vx.cols());
        assert_eq!(l % k, 0, "avgpool1d length {l} not divisible by {k}");
        let lo = l / k;
        let mut out = vec![0.0; lo * c];
        for li in 0..lo {
            let orow = &mut out[li * c..(li + 1) * c];
            for ki in 0..k {
                let xrow = &vx.data()[(li * k + ki) * c..(li * k + ki + 1) * c];
                for (o, xv) in orow.iter_mut().zip(xrow) {
                    *o += xv / k as f64;
                }
            }
        }
        let outv = Var(self.len());
        self.push_op(
            Tensor::new(&[lo, c], out),
            &[x],
            Box::new(move |_vals, grads| {
                let g = grads.take(outv).unwrap();
                grads.with(x, &[l, c], |gx| {
                    for li in 0..lo {
                        let grow = &g.data()[li * c..(li + 1) * c];
                        for ki in 0..k {
                            let xrow = &mut gx[(li * k + ki) * c..(li * k + ki + 1) * c];
                            for (a, gi) in xrow.iter_mut().zip(grow) {
                                *a += gi / k as f64;
                            }
                        }
                    }
                });
                grads.restore(outv, g);
            }),
        )
    }

    /// Global spatial average pool: (N, H, W, C) -> (N, C).
    pub fn global_avg_spatial(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let xs = vx.shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let area = (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for hw in 0..h * w {
                let xrow = &vx.data()[(ni * h * w + hw) * c..(ni * h * w + hw + 1) * c];
                let orow = &mut out[ni * c..(ni + 1) * c];
                for (o, xv) in orow.iter_mut().zip(xrow) {
                    *o += xv / area;
                }
            }
        }
        let outv = Var(self.len());
        self.push_op(
            Tensor::new(&[n, c], out),
            &[x],
            Box::new(move |_vals, grads| {
                let g = grads.take(outv).unwrap();
                grads.with(x, &[n, h, w, c], |gx| {
                    for ni in 0..n {
                        let grow = &g.data()[ni * c..(ni + 1) * c];
                        for hw in 0..h * w {
                            let xrow =
                                &mut gx[(ni * h * w + hw) * c..(ni * h * w + hw + 1) * c];
                            for (a, gi) in xrow.iter_mut().zip(grow) {
                                *a += gi / area;
                            }
                        }
                    }
                });
                grads.restore(outv, g);
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_length_arithmetic() {
        // k=80, s=4, p=38 keeps L/4 exact.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[640, 1]));
        let w = tape.leaf(Tensor::zeros(&[80, 1, 4]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.conv1d(x, w, b, 4, 38);
        assert_eq!(tape.shape(y), &[160, 4]);
    }

    #[test]
    fn conv2d_halving_chain_matches_extractor_plan() {
        // 22 -> 11 -> 6 -> 3 with k=3, s=2, p=1.
        let mut tape = Tape::new();
        let mut x = tape.leaf(Tensor::zeros(&[1, 22, 22, 2]));
        for expect in [11usize, 6, 3] {
            let w = tape.leaf(Tensor::zeros(&[3, 3, 2, 2]));
            let b = tape.leaf(Tensor::zeros(&[2]));
            x = tape.conv2d(x, w, b, 2, 1);
            assert_eq!(tape.shape(x)[1], expect);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 16];
        data[5] = 7.0; // (h=1, w=1)
        let x = tape.leaf(Tensor::new(&[1, 4, 4, 1], data));
        let y = tape.maxpool2d(x);
        assert_eq!(tape.shape(y), &[1, 2, 2, 1]);
        let s = tape.global_avg_spatial(y);
        let l = tape.reshape(s, &[]);
        let g = tape.backward(l);
        let gx = g.get(x).unwrap();
        assert!(gx.data()[5] > 0.0);
    }
}
