//! Structured operators: convolution, pooling, resampling.

use super::{Tape, Value, Var};
use crate::error::{contract_err, shape_err, Result};

/// Splits `dims` around `axis` into (outer, len, inner) element counts.
fn axis_split(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(shape_err!("axis {axis} out of range for {dims:?}"));
    }
    Ok((
        dims[..axis].iter().product(),
        dims[axis],
        dims[axis + 1..].iter().product(),
    ))
}

fn reduced_dims(dims: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = dims.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Last two axes as (leading count, H, W).
fn planes(dims: &[usize]) -> Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(shape_err!("expected rank >= 2, got {dims:?}"));
    }
    let n = dims.len();
    Ok((dims[..n - 2].iter().product(), dims[n - 2], dims[n - 1]))
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Visits every (input index, output index, kernel index) triple that
    /// contributes to the correlation, for one (c_out, c_in) pair.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let k = ky * self.kw + kx;
                for oy in 0..self.oh {
                    let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..self.ow {
                        let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(iy * self.w + ix as usize, oy * self.ow + ox, k);
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, kh, kw]`; the
    /// result is `[C_out, H', W']` with `H' = (H + 2 pad_h - kh) / stride_h + 1`.
    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let xv = self.value(input);
        let kv = self.value(kernel);
        let (xd, kd) = (xv.dims(), kv.dims());
        if xd.len() != 3 || kd.len() != 4 {
            return Err(shape_err!("conv2d needs [C,H,W] and [O,C,kh,kw], got {xd:?}, {kd:?}"));
        }
        if kd[1] != xd[0] {
            return Err(shape_err!("conv2d channel mismatch: input {xd:?}, kernel {kd:?}"));
        }
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        if sh == 0 || sw == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let (span_h, span_w) = (xd[1] + 2 * ph, xd[2] + 2 * pw);
        if kd[2] > span_h || kd[3] > span_w {
            return Err(shape_err!("kernel {kd:?} larger than padded input {xd:?}"));
        }
        if (span_h - kd[2]) % sh != 0 || (span_w - kd[3]) % sw != 0 {
            return Err(shape_err!(
                "stride {stride:?} does not divide padded input {xd:?} minus kernel {kd:?}"
            ));
        }
        let g = ConvGeom {
            c_in: xd[0],
            h: xd[1],
            w: xd[2],
            c_out: kd[0],
            kh: kd[2],
            kw: kd[3],
            sh,
            sw,
            ph,
            pw,
            oh: (span_h - kd[2]) / sh + 1,
            ow: (span_w - kd[3]) / sw + 1,
        };
        let (plane_in, plane_out, ksz) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
        let mut out = vec![0.0; g.c_out * plane_out];
        for co in 0..g.c_out {
            let o = &mut out[co * plane_out..(co + 1) * plane_out];
            for ci in 0..g.c_in {
                let x = &xv.data()[ci * plane_in..(ci + 1) * plane_in];
                let k = &kv.data()[(co * g.c_in + ci) * ksz..(co * g.c_in + ci + 1) * ksz];
                g.for_each_tap(|ii, oi, ki| o[oi] += k[ki] * x[ii]);
            }
        }
        let value = Value::from_parts(vec![g.c_out, g.oh, g.ow], out);
        Ok(self.custom(&[input, kernel], value, move |gout, needs| {
            let go = gout.data();
            let gin = needs[0].then(|| {
                let mut gi = vec![0.0; g.c_in * plane_in];
                for co in 0..g.c_out {
                    let gslice = &go[co * plane_out..(co + 1) * plane_out];
                    for ci in 0..g.c_in {
                        let k = &kv.data()[(co * g.c_in + ci) * ksz..(co * g.c_in + ci + 1) * ksz];
                        let dst = &mut gi[ci * plane_in..(ci + 1) * plane_in];
                        g.for_each_tap(|ii, oi, ki| dst[ii] += k[ki] * gslice[oi]);
                    }
                }
                Value::from_parts(xv.dims().to_vec(), gi)
            });
            let gker = needs[1].then(|| {
                let mut gk = vec![0.0; kv.len()];
                for co in 0..g.c_out {
                    let gslice = &go[co * plane_out..(co + 1) * plane_out];
                    for ci in 0..g.c_in {
                        let x = &xv.data()[ci * plane_in..(ci + 1) * plane_in];
                        let dst = &mut gk[(co * g.c_in + ci) * ksz..(co * g.c_in + ci + 1) * ksz];
                        g.for_each_tap(|ii, oi, ki| dst[ki] += x[ii] * gslice[oi]);
                    }
                }
                Value::from_parts(kv.dims().to_vec(), gk)
            });
            vec![gin, gker]
        }))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` node.
    pub fn add_channel_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = xv.dims()[0];
        if bv.dims() != [c] {
            return Err(shape_err!("bias {:?} for input {:?}", bv.dims(), xv.dims()));
        }
        let per = xv.len() / c;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i / per])
            .collect();
        let xdims = xv.dims().to_vec();
        Ok(self.custom(&[x, bias], Value::from_parts(xdims.clone(), data), move |g, needs| {
            let gb = needs[1].then(|| {
                let sums = g.data().chunks(per).map(|ch| ch.iter().sum()).collect();
                Value::from_parts(vec![c], sums)
            });
            vec![needs[0].then(|| g.clone()), gb]
        }))
    }

    /// Mean over `axis`, removing it. Backward spreads `g / len`.
    pub fn pool_mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.dims(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let dims = xv.dims().to_vec();
        let value = Value::from_parts(reduced_dims(&dims, axis), out);
        Ok(self.custom(&[x], value, move |g, _| {
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gi[(o * len + l) * inner + i] = g.data()[o * inner + i] * inv;
                    }
                }
            }
            vec![Some(Value::from_parts(dims.clone(), gi))]
        }))
    }

    /// Max over `axis`, removing it. Backward routes `g` to the first
    /// (lowest-index) maximizer.
    pub fn pool_max_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.dims(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = xv.data()[o * len * inner + i];
                for l in 1..len {
                    let v = xv.data()[(o * len + l) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = l;
                    }
                }
                out[o * inner + i] = best_v;
                arg[o * inner + i] = (o * len + best) * inner + i;
            }
        }
        let dims = xv.dims().to_vec();
        let value = Value::from_parts(reduced_dims(&dims, axis), out);
        Ok(self.custom(&[x], value, move |g, _| {
            let mut gi = vec![0.0; outer * len * inner];
            for (j, &src) in arg.iter().enumerate() {
                gi[src] += g.data()[j];
            }
            vec![Some(Value::from_parts(dims.clone(), gi))]
        }))
    }

    /// Endpoint-aligned linear upsampling of the last axis of `[C, W2]` by an
    /// integer factor: output column `w` reads position `w (W2-1)/(W-1)`.
    pub fn upsample_linear_1d(&self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(shape_err!("upsample_linear_1d needs [C, W], got {:?}", xv.dims()));
        }
        if factor == 0 {
            return Err(contract_err!("upsampling factor must be >= 1"));
        }
        let (c, w2) = (xv.dims()[0], xv.dims()[1]);
        if factor > 1 && w2 < 2 {
            return Err(contract_err!("cannot upsample a single column by {factor}"));
        }
        let w = w2 * factor;
        // (left index, right index, right weight) per output column
        let taps: Vec<(usize, usize, f64)> = (0..w)
            .map(|o| {
                if w == 1 {
                    return (0, 0, 0.0);
                }
                let num = o * (w2 - 1);
                let i0 = num / (w - 1);
                let frac = (num % (w - 1)) as f64 / (w - 1) as f64;
                (i0, (i0 + 1).min(w2 - 1), frac)
            })
            .collect();
        let mut out = vec![0.0; c * w];
        for ch in 0..c {
            let src = &xv.data()[ch * w2..(ch + 1) * w2];
            for (o, &(i0, i1, f)) in taps.iter().enumerate() {
                out[ch * w + o] = (1.0 - f) * src[i0] + f * src[i1];
            }
        }
        let value = Value::from_parts(vec![c, w], out);
        Ok(self.custom(&[x], value, move |g, _| {
            let mut gi = vec![0.0; c * w2];
            for ch in 0..c {
                for (o, &(i0, i1, f)) in taps.iter().enumerate() {
                    let go = g.data()[ch * w + o];
                    gi[ch * w2 + i0] += (1.0 - f) * go;
                    gi[ch * w2 + i1] += f * go;
                }
            }
            vec![Some(Value::from_parts(vec![c, w2], gi))]
        }))
    }

    /// Block-mean downsampling of the last two axes by `(fy, fx)`. Partial
    /// blocks at the far edges average the elements they cover.
    pub fn area_downsample(&self, x: Var, fy: usize, fx: usize) -> Result<Var> {
        if fy == 0 || fx == 0 {
            return Err(contract_err!("downsampling factors must be >= 1"));
        }
        let xv = self.value(x);
        let (lead, h, w) = planes(xv.dims())?;
        let (oh, ow) = (h.div_ceil(fy), w.div_ceil(fx));
        let mut out = vec![0.0; lead * oh * ow];
        let counts: Vec<f64> = (0..oh * ow)
            .map(|i| {
                let (oy, ox) = (i / ow, i % ow);
                let ny = (h - oy * fy).min(fy);
                let nx = (w - ox * fx).min(fx);
                (ny * nx) as f64
            })
            .collect();
        for l in 0..lead {
            for y in 0..h {
                for xx in 0..w {
                    out[l * oh * ow + (y / fy) * ow + xx / fx] += xv.data()[(l * h + y) * w + xx];
                }
            }
            for i in 0..oh * ow {
                out[l * oh * ow + i] /= counts[i];
            }
        }
        let mut dims = xv.dims().to_vec();
        let n = dims.len();
        dims[n - 2] = oh;
        dims[n - 1] = ow;
        let src_dims = xv.dims().to_vec();
        Ok(self.custom(&[x], Value::from_parts(dims, out), move |g, _| {
            let mut gi = vec![0.0; lead * h * w];
            for l in 0..lead {
                for y in 0..h {
                    for xx in 0..w {
                        let o = (y / fy) * ow + xx / fx;
                        gi[(l * h + y) * w + xx] = g.data()[l * oh * ow + o] / counts[o];
                    }
                }
            }
            vec![Some(Value::from_parts(src_dims.clone(), gi))]
        }))
    }

    /// Replicate-pads the last two axes by `py` rows and `px` columns on each side.
    pub fn pad_edge(&self, x: Var, py: usize, px: usize) -> Result<Var> {
        let xv = self.value(x);
        let (lead, h, w) = planes(xv.dims())?;
        let (oh, ow) = (h + 2 * py, w + 2 * px);
        let src_index = move |l: usize, oy: usize, ox: usize| {
            let y = (oy as isize - py as isize).clamp(0, h as isize - 1) as usize;
            let xx = (ox as isize - px as isize).clamp(0, w as isize - 1) as usize;
            (l * h + y) * w + xx
        };
        let mut out = Vec::with_capacity(lead * oh * ow);
        for l in 0..lead {
            for oy in 0..oh {
                for ox in 0..ow {
                    out.push(xv.data()[src_index(l, oy, ox)]);
                }
            }
        }
        let mut dims = xv.dims().to_vec();
        let n = dims.len();
        dims[n - 2] = oh;
        dims[n - 1] = ow;
        let src_dims = xv.dims().to_vec();
        Ok(self.custom(&[x], Value::from_parts(dims, out), move |g, _| {
            let mut gi = vec![0.0; lead * h * w];
            let mut k = 0;
            for l in 0..lead {
                for oy in 0..oh {
                    for ox in 0..ow {
                        gi[src_index(l, oy, ox)] += g.data()[k];
                        k += 1;
                    }
                }
            }
            vec![Some(Value::from_parts(src_dims.clone(), gi))]
        }))
    }
}
