//! Forward operations and their backward rules.
//!
//! Values are stored as f32; every reduction (dot products, sums, losses)
//! accumulates in f64. Hot loops keep independent accumulators per output
//! element so the compiler can pipeline them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};

/// Dot product with four-way unrolled f64 accumulation.
fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] as f64 * b[i] as f64;
        acc[1] += a[i + 1] as f64 * b[i + 1] as f64;
        acc[2] += a[i + 2] as f64 * b[i + 2] as f64;
        acc[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    for i in chunks * 4..a.len() {
        acc[0] += a[i] as f64 * b[i] as f64;
    }
    acc[0] + acc[1] + acc[2] + acc[3]
}

fn add_into(dst: &mut [f32], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s as f32;
    }
}

/// `out[n,j] = Σ_i x[n,i]·w[i,j] + b[j]` for `x: [N×d_in]`, `w: [d_in×d_out]`,
/// `b: [d_out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (xs, ws, bs) = (tape.shape(x).to_vec(), tape.shape(w).to_vec(), tape.shape(b).to_vec());
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
        return Err(Error::Shape(format!(
            "linear expects x [N×d_in], w [d_in×d_out], b [d_out]; got {xs:?}, {ws:?}, {bs:?}"
        )));
    }
    let (n, d_in, d_out) = (xs[0], xs[1], ws[1]);
    let (xd, wd, bd) = (tape.value(x), tape.value(w), tape.value(b));

    let mut out = vec![0.0f32; n * d_out];
    let mut acc = vec![0.0f64; d_out];
    for row in 0..n {
        for (a, &bv) in acc.iter_mut().zip(bd) {
            *a = bv as f64;
        }
        for i in 0..d_in {
            let xv = xd[row * d_in + i] as f64;
            let wrow = &wd[i * d_out..(i + 1) * d_out];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv as f64;
            }
        }
        for (o, &a) in out[row * d_out..(row + 1) * d_out].iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }

    let needs = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
    let saved = if needs { (xd.to_vec(), wd.to_vec()) } else { (Vec::new(), Vec::new()) };
    let ov = tape.push(vec![n, d_out], out, needs);
    if needs {
        let (xg, wg, bg) = (tape.needs_grad(x), tape.needs_grad(w), tape.needs_grad(b));
        let (xd, wd) = saved;
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                if xg {
                    let dx = grads.accum(x);
                    for row in 0..n {
                        let grow = &gout[row * d_out..(row + 1) * d_out];
                        for i in 0..d_in {
                            dx[row * d_in + i] +=
                                dot_f64(grow, &wd[i * d_out..(i + 1) * d_out]) as f32;
                        }
                    }
                }
                if wg {
                    let mut dw = vec![0.0f64; d_in * d_out];
                    for row in 0..n {
                        let grow = &gout[row * d_out..(row + 1) * d_out];
                        for i in 0..d_in {
                            let xv = xd[row * d_in + i] as f64;
                            let drow = &mut dw[i * d_out..(i + 1) * d_out];
                            for (d, &g) in drow.iter_mut().zip(grow) {
                                *d += xv * g as f64;
                            }
                        }
                    }
                    add_into(grads.accum(w), &dw);
                }
                if bg {
                    let mut db = vec![0.0f64; d_out];
                    for row in 0..n {
                        for (d, &g) in db.iter_mut().zip(&gout[row * d_out..(row + 1) * d_out]) {
                            *d += g as f64;
                        }
                    }
                    add_into(grads.accum(b), &db);
                }
            }),
        );
    }
    Ok(ov)
}

/// Cross-correlation of `x: [N×C×H×W]` with `kernels: [F×C×k×k]`, plus bias.
/// `H' = (H + 2·pad − k)/stride + 1`, likewise for `W'`.
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    kernels: Var,
    bias: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(kernels).to_vec();
    let bs = tape.shape(bias).to_vec();
    if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
        return Err(Error::Shape(format!(
            "conv2d expects x [N×C×H×W], kernels [F×C×k×k], bias [F]; got {xs:?}, {ks:?}, {bs:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::Param("conv2d stride must be positive".into()));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c || bs[0] != f {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: x has {c} channels, kernels expect {kc}, bias {}",
            bs[0]
        )));
    }
    if kh != kw {
        return Err(Error::Shape(format!("conv2d kernels must be square, got {kh}×{kw}")));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}×{kw} larger than padded input {}×{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let (xd, kd, bd) = (tape.value(x), tape.value(kernels), tape.value(bias));

    // Valid output range for a kernel offset: indices oy with
    // 0 <= oy*stride + ky - pad < h.
    let orange = move |kk: usize, extent: usize, out_extent: usize| -> (usize, usize) {
        let lo = pad.saturating_sub(kk).div_ceil(stride);
        let hi = if extent + pad > kk { ((extent + pad - 1 - kk) / stride + 1).min(out_extent) } else { 0 };
        (lo.min(hi), hi)
    };

    let mut out = vec![0.0f32; n * f * oh * ow];
    let mut acc = vec![0.0f64; oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            acc.iter_mut().for_each(|a| *a = bd[fi] as f64);
            for ci in 0..c {
                let xplane = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = orange(ky, h, oh);
                    for kx in 0..kw {
                        let kv = kd[((fi * c + ci) * kh + ky) * kw + kx] as f64;
                        if kv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = orange(kx, w, ow);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let arow = &mut acc[oy * ow..oy * ow + ow];
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            for ox in ox0..ox1 {
                                arow[ox] += kv * xrow[ox * stride + kx - pad] as f64;
                            }
                        }
                    }
                }
            }
            let oplane = &mut out[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
            for (o, &a) in oplane.iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }

    let needs = tape.needs_grad(x) || tape.needs_grad(kernels) || tape.needs_grad(bias);
    let saved = if needs { (xd.to_vec(), kd.to_vec()) } else { (Vec::new(), Vec::new()) };
    let ov = tape.push(vec![n, f, oh, ow], out, needs);
    if needs {
        let (xg, kg, bg) = (tape.needs_grad(x), tape.needs_grad(kernels), tape.needs_grad(bias));
        let (xd, kd) = saved;
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                if bg {
                    let mut db = vec![0.0f64; f];
                    for ni in 0..n {
                        for (fi, d) in db.iter_mut().enumerate() {
                            let plane = &gout[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                            let mut s = 0.0f64;
                            for &g in plane {
                                s += g as f64;
                            }
                            *d += s;
                        }
                    }
                    add_into(grads.accum(bias), &db);
                }
                if kg {
                    let mut dk = vec![0.0f64; f * c * kh * kw];
                    for ni in 0..n {
                        for fi in 0..f {
                            let gplane =
                                &gout[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                            for ci in 0..c {
                                let xplane =
                                    &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                                for ky in 0..kh {
                                    let (oy0, oy1) = orange(ky, h, oh);
                                    for kx in 0..kw {
                                        let (ox0, ox1) = orange(kx, w, ow);
                                        let mut s = 0.0f64;
                                        for oy in oy0..oy1 {
                                            let iy = oy * stride + ky - pad;
                                            let grow = &gplane[oy * ow..oy * ow + ow];
                                            let xrow = &xplane[iy * w..(iy + 1) * w];
                                            for ox in ox0..ox1 {
                                                s += grow[ox] as f64
                                                    * xrow[ox * stride + kx - pad] as f64;
                                            }
                                        }
                                        dk[((fi * c + ci) * kh + ky) * kw + kx] += s;
                                    }
                                }
                            }
                        }
                    }
                    add_into(grads.accum(kernels), &dk);
                }
                if xg {
                    let mut dxp = vec![0.0f64; h * w];
                    let dx = grads.accum(x);
                    for ni in 0..n {
                        for ci in 0..c {
                            dxp.iter_mut().for_each(|v| *v = 0.0);
                            for fi in 0..f {
                                let gplane =
                                    &gout[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                                for ky in 0..kh {
                                    let (oy0, oy1) = orange(ky, h, oh);
                                    for kx in 0..kw {
                                        let kv = kd[((fi * c + ci) * kh + ky) * kw + kx] as f64;
                                        if kv == 0.0 {
                                            continue;
                                        }
                                        let (ox0, ox1) = orange(kx, w, ow);
                                        for oy in oy0..oy1 {
                                            let iy = oy * stride + ky - pad;
                                            let grow = &gplane[oy * ow..oy * ow + ow];
                                            let drow = &mut dxp[iy * w..(iy + 1) * w];
                                            for ox in ox0..ox1 {
                                                drow[ox * stride + kx - pad] +=
                                                    kv * grow[ox] as f64;
                                            }
                                        }
                                    }
                                }
                            }
                            let dst = &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                            add_into(dst, &dxp);
                        }
                    }
                }
            }),
        );
    }
    Ok(ov)
}

/// Non-overlapping 2×2 mean pooling; trailing odd row/column is dropped.
pub fn mean_pool2(tape: &mut Tape, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::Shape(format!("mean_pool2 expects [N×C×H×W], got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("mean_pool2 needs H,W ≥ 2, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = tape.value(x);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let xplane = &xd[p * h * w..(p + 1) * h * w];
        let oplane = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (iy, ix) = (oy * 2, ox * 2);
                let s = xplane[iy * w + ix] as f64
                    + xplane[iy * w + ix + 1] as f64
                    + xplane[(iy + 1) * w + ix] as f64
                    + xplane[(iy + 1) * w + ix + 1] as f64;
                oplane[oy * ow + ox] = (s * 0.25) as f32;
            }
        }
    }
    let needs = tape.needs_grad(x);
    let ov = tape.push(vec![n, c, oh, ow], out, needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let dx = grads.accum(x);
                for p in 0..n * c {
                    let gplane = &gout[p * oh * ow..(p + 1) * oh * ow];
                    let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gplane[oy * ow + ox] * 0.25;
                            let (iy, ix) = (oy * 2, ox * 2);
                            dplane[iy * w + ix] += g;
                            dplane[iy * w + ix + 1] += g;
                            dplane[(iy + 1) * w + ix] += g;
                            dplane[(iy + 1) * w + ix + 1] += g;
                        }
                    }
                }
            }),
        );
    }
    Ok(ov)
}

/// Elementwise max(0, x); gradient is gated on x > 0.
pub fn relu(tape: &mut Tape, x: Var) -> Var {
    let out: Vec<f32> = tape.value(x).iter().map(|&v| v.max(0.0)).collect();
    let needs = tape.needs_grad(x);
    let ov = tape.push(tape.shape(x).to_vec(), out.clone(), needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let dx = grads.accum(x);
                for ((d, &g), &o) in dx.iter_mut().zip(gout).zip(&out) {
                    if o > 0.0 {
                        *d += g;
                    }
                }
            }),
        );
    }
    ov
}

/// Inverted dropout: each element is zeroed with probability `p` and the
/// survivors scaled by 1/(1−p); inference (`training == false`) is identity.
pub fn dropout(
    tape: &mut Tape,
    x: Var,
    p: f32,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("dropout p must be in [0,1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..tape.value(x).len())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { scale })
        .collect();
    let out: Vec<f32> = tape.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    let needs = tape.needs_grad(x);
    let ov = tape.push(tape.shape(x).to_vec(), out, needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let dx = grads.accum(x);
                for ((d, &g), &m) in dx.iter_mut().zip(gout).zip(&mask) {
                    *d += g * m;
                }
            }),
        );
    }
    Ok(ov)
}

/// Reshapes `[N×…]` to `[N×prod(rest)]`. Data is unchanged.
pub fn flatten(tape: &mut Tape, x: Var) -> Var {
    let xs = tape.shape(x);
    let n = xs[0];
    let rest: usize = xs[1..].iter().product();
    let needs = tape.needs_grad(x);
    let ov = tape.push(vec![n, rest], tape.value(x).to_vec(), needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let dx = grads.accum(x);
                for (d, &g) in dx.iter_mut().zip(gout) {
                    *d += g;
                }
            }),
        );
    }
    ov
}

fn row_softmax_f64(row: &[f32]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Row-wise softmax over `[N×K]`, computed with a max shift.
pub fn softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 {
        return Err(Error::Shape(format!("softmax expects [N×K], got {xs:?}")));
    }
    let (n, k) = (xs[0], xs[1]);
    let xd = tape.value(x);
    let mut out = vec![0.0f32; n * k];
    for row in 0..n {
        let p = row_softmax_f64(&xd[row * k..(row + 1) * k]);
        for (o, &v) in out[row * k..(row + 1) * k].iter_mut().zip(&p) {
            *o = v as f32;
        }
    }
    let needs = tape.needs_grad(x);
    let probs = out.clone();
    let ov = tape.push(vec![n, k], out, needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let dx = grads.accum(x);
                for row in 0..n {
                    let p = &probs[row * k..(row + 1) * k];
                    let g = &gout[row * k..(row + 1) * k];
                    let dot: f64 =
                        p.iter().zip(g).map(|(&pv, &gv)| pv as f64 * gv as f64).sum();
                    for i in 0..k {
                        dx[row * k + i] += (p[i] as f64 * (g[i] as f64 - dot)) as f32;
                    }
                }
            }),
        );
    }
    Ok(ov)
}

/// Mean over rows of −log softmax(logits)[label], log-sum-exp shifted.
/// Backward yields (softmax − onehot)/N.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.shape(logits).to_vec();
    if ls.len() != 2 {
        return Err(Error::Shape(format!("cross entropy expects logits [N×K], got {ls:?}")));
    }
    let (n, k) = (ls[0], ls[1]);
    if n == 0 || labels.len() != n {
        return Err(Error::Shape(format!(
            "cross entropy got {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
    }
    let ld = tape.value(logits);
    let mut probs = vec![0.0f32; n * k];
    let mut loss = 0.0f64;
    for row in 0..n {
        let r = &ld[row * k..(row + 1) * k];
        let m = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut z = 0.0f64;
        for &v in r {
            z += (v as f64 - m).exp();
        }
        let lse = m + z.ln();
        loss += lse - r[labels[row]] as f64;
        for (p, &v) in probs[row * k..(row + 1) * k].iter_mut().zip(r) {
            *p = ((v as f64 - lse).exp()) as f32;
        }
    }
    loss /= n as f64;

    let needs = tape.needs_grad(logits);
    let labels = labels.to_vec();
    let ov = tape.push(vec![1], vec![loss as f32], needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let g = gout[0] as f64 / n as f64;
                let dl = grads.accum(logits);
                for row in 0..n {
                    for i in 0..k {
                        let onehot = if i == labels[row] { 1.0 } else { 0.0 };
                        dl[row * k + i] += (g * (probs[row * k + i] as f64 - onehot)) as f32;
                    }
                }
            }),
        );
    }
    Ok(ov)
}

/// Mean squared error over all elements of two equally-shaped tensors.
pub fn mse_loss(tape: &mut Tape, target: Var, pred: Var) -> Result<Var> {
    if tape.shape(target) != tape.shape(pred) {
        return Err(Error::Shape(format!(
            "mse extents differ: {:?} vs {:?}",
            tape.shape(target),
            tape.shape(pred)
        )));
    }
    let (td, pd) = (tape.value(target), tape.value(pred));
    let len = td.len();
    let mut s = 0.0f64;
    for (&t, &p) in td.iter().zip(pd) {
        let d = t as f64 - p as f64;
        s += d * d;
    }
    let loss = s / len as f64;

    let needs = tape.needs_grad(target) || tape.needs_grad(pred);
    let saved = if needs { (td.to_vec(), pd.to_vec()) } else { (Vec::new(), Vec::new()) };
    let ov = tape.push(vec![1], vec![loss as f32], needs);
    if needs {
        let (tg, pg) = (tape.needs_grad(target), tape.needs_grad(pred));
        let (td, pd) = saved;
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let scale = 2.0 * gout[0] as f64 / len as f64;
                if pg {
                    let dp = grads.accum(pred);
                    for i in 0..len {
                        dp[i] += (scale * (pd[i] as f64 - td[i] as f64)) as f32;
                    }
                }
                if tg {
                    let dt = grads.accum(target);
                    for i in 0..len {
                        dt[i] += (scale * (td[i] as f64 - pd[i] as f64)) as f32;
                    }
                }
            }),
        );
    }
    Ok(ov)
}

/// Identity forward; backward multiplies the incoming gradient by −lambda.
pub fn gradient_reversal(tape: &mut Tape, x: Var, lambda: f32) -> Var {
    let needs = tape.needs_grad(x);
    let ov = tape.push(tape.shape(x).to_vec(), tape.value(x).to_vec(), needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let dx = grads.accum(x);
                for (d, &g) in dx.iter_mut().zip(gout) {
                    *d += -lambda * g;
                }
            }),
        );
    }
    ov
}

/// Copies the value and cuts it off from the gradient graph.
pub fn detach(tape: &mut Tape, x: Var) -> Var {
    tape.push(tape.shape(x).to_vec(), tape.value(x).to_vec(), false)
}

/// Adds `vals[i]` at flat position `idx[i]`; every other element is copied
/// verbatim. The perturbation is constant data: the backward rule is identity.
pub fn add_sparse(tape: &mut Tape, x: Var, idx: &[usize], vals: &[f32]) -> Result<Var> {
    if idx.len() != vals.len() {
        return Err(Error::Shape("add_sparse index/value length mismatch".into()));
    }
    let mut out = tape.value(x).to_vec();
    for (&i, &v) in idx.iter().zip(vals) {
        if i >= out.len() {
            return Err(Error::Index(format!("add_sparse index {i} beyond {}", out.len())));
        }
        out[i] += v;
    }
    let needs = tape.needs_grad(x);
    let ov = tape.push(tape.shape(x).to_vec(), out, needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let dx = grads.accum(x);
                for (d, &g) in dx.iter_mut().zip(gout) {
                    *d += g;
                }
            }),
        );
    }
    Ok(ov)
}

/// Row-wise outer product `features ⊗ probs`, flattened so block `k` holds
/// the features scaled by `probs[k]`: `out[n, k·d + i] = f[n,i]·p[n,k]`.
pub fn outer_condition(tape: &mut Tape, features: Var, probs: Var) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let ps = tape.shape(probs).to_vec();
    if fs.len() != 2 || ps.len() != 2 || fs[0] != ps[0] {
        return Err(Error::Shape(format!(
            "outer_condition expects [N×d] and [N×K]; got {fs:?}, {ps:?}"
        )));
    }
    let (n, d, k) = (fs[0], fs[1], ps[1]);
    let (fd, pd) = (tape.value(features), tape.value(probs));
    let mut out = vec![0.0f32; n * d * k];
    for row in 0..n {
        let frow = &fd[row * d..(row + 1) * d];
        let prow = &pd[row * k..(row + 1) * k];
        let orow = &mut out[row * d * k..(row + 1) * d * k];
        for (kc, &pv) in prow.iter().enumerate() {
            for (i, &fv) in frow.iter().enumerate() {
                orow[kc * d + i] = fv * pv;
            }
        }
    }
    let needs = tape.needs_grad(features) || tape.needs_grad(probs);
    let saved = if needs { (fd.to_vec(), pd.to_vec()) } else { (Vec::new(), Vec::new()) };
    let ov = tape.push(vec![n, d * k], out, needs);
    if needs {
        let (fg, pg) = (tape.needs_grad(features), tape.needs_grad(probs));
        let (fd, pd) = saved;
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                if fg {
                    let df = grads.accum(features);
                    for row in 0..n {
                        let grow = &gout[row * d * k..(row + 1) * d * k];
                        let prow = &pd[row * k..(row + 1) * k];
                        for i in 0..d {
                            let mut s = 0.0f64;
                            for (kc, &pv) in prow.iter().enumerate() {
                                s += grow[kc * d + i] as f64 * pv as f64;
                            }
                            df[row * d + i] += s as f32;
                        }
                    }
                }
                if pg {
                    let dp = grads.accum(probs);
                    for row in 0..n {
                        let grow = &gout[row * d * k..(row + 1) * d * k];
                        let frow = &fd[row * d..(row + 1) * d];
                        for kc in 0..k {
                            dp[row * k + kc] +=
                                dot_f64(&grow[kc * d..(kc + 1) * d], frow) as f32;
                        }
                    }
                }
            }),
        );
    }
    Ok(ov)
}

/// Weighted sum of scalar vars: `Σ w·v`.
pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f32)]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Usage("weighted_sum needs at least one term".into()));
    }
    let mut total = 0.0f64;
    for &(v, w) in terms {
        if tape.value(v).len() != 1 {
            return Err(Error::Shape(format!(
                "weighted_sum term has shape {:?}, expected scalar",
                tape.shape(v)
            )));
        }
        total += tape.value(v)[0] as f64 * w as f64;
    }
    let needs = terms.iter().any(|&(v, _)| tape.needs_grad(v));
    let terms = terms.to_vec();
    let ov = tape.push(vec![1], vec![total as f32], needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                for &(v, w) in &terms {
                    grads.accum(v)[0] += gout[0] * w;
                }
            }),
        );
    }
    Ok(ov)
}

/// Gathers rows of `[N×K]` by index into `[M×K]`.
pub fn select_rows(tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 {
        return Err(Error::Shape(format!("select_rows expects [N×K], got {xs:?}")));
    }
    let (n, k) = (xs[0], xs[1]);
    if rows.is_empty() {
        return Err(Error::Usage("select_rows needs at least one row".into()));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Index(format!("row {bad} out of range for {n} rows")));
    }
    let xd = tape.value(x);
    let mut out = Vec::with_capacity(rows.len() * k);
    for &r in rows {
        out.extend_from_slice(&xd[r * k..(r + 1) * k]);
    }
    let needs = tape.needs_grad(x);
    let rows = rows.to_vec();
    let ov = tape.push(vec![rows.len(), k], out, needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let dx = grads.accum(x);
                for (m, &r) in rows.iter().enumerate() {
                    for i in 0..k {
                        dx[r * k + i] += gout[m * k + i];
                    }
                }
            }),
        );
    }
    Ok(ov)
}

/// Sum of all elements, as a scalar.
pub fn sum(tape: &mut Tape, x: Var) -> Var {
    let mut s = 0.0f64;
    for &v in tape.value(x) {
        s += v as f64;
    }
    let needs = tape.needs_grad(x);
    let ov = tape.push(vec![1], vec![s as f32], needs);
    if needs {
        tape.push_step(
            ov,
            Box::new(move |gout, grads| {
                let dx = grads.accum(x);
                for d in dx.iter_mut() {
                    *d += gout[0];
                }
            }),
        );
    }
    ov
}
