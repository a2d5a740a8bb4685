//! Numeric kernels shared by forward and backward passes.

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a_t`/`b_t` read the stored row-major matrices as transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted lengths cover every index reachable from the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 3x3, stride-1, zero-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
}

pub(crate) fn conv3x3_forward(
    g: ConvGeom,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let plane = h * w;
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let dst = &mut out[(b * g.out_ch + o) * plane..(b * g.out_ch + o + 1) * plane];
            if let Some(bias) = bias {
                dst.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..g.in_ch {
                let src = &input[(b * g.in_ch + c) * plane..(b * g.in_ch + c + 1) * plane];
                let k = &kernel[(o * g.in_ch + c) * 9..(o * g.in_ch + c + 1) * 9];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += src[sy as usize * w + sx as usize] * k[ky * 3 + kx];
                            }
                        }
                        dst[y * w + x] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients for [`conv3x3_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    g: ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let (h, w) = (g.height, g.width);
    let plane = h * w;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let go = &grad_out[(b * g.out_ch + o) * plane..(b * g.out_ch + o + 1) * plane];
            for c in 0..g.in_ch {
                let base_in = (b * g.in_ch + c) * plane;
                let base_k = (o * g.in_ch + c) * 9;
                for y in 0..h {
                    for x in 0..w {
                        let gv = go[y * w + x];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let idx = base_in + sy as usize * w + sx as usize;
                                if let Some(gi) = grad_input.as_deref_mut() {
                                    gi[idx] += gv * kernel[base_k + ky * 3 + kx];
                                }
                                if let Some(gk) = grad_kernel.as_deref_mut() {
                                    gk[base_k + ky * 3 + kx] += gv * input[idx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = grad_bias {
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                let go = &grad_out[(b * g.out_ch + o) * plane..(b * g.out_ch + o + 1) * plane];
                gb[o] += go.iter().sum::<f64>();
            }
        }
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
