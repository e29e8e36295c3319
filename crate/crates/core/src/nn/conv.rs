//! Grouped 2-D convolution via im2col and GEMM.
//!
//! Column matrices are `[K × N]` per group with `K = C_in/groups · kh · kw`
//! and `N = B · H_out · W_out`; column `n` enumerates `(batch, oy, ox)`.

use super::graph::ConvGeometry;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    fn cig(&self) -> usize {
        self.cin / self.geom.groups
    }

    fn cog(&self) -> usize {
        self.cout / self.geom.groups
    }

    fn k(&self) -> usize {
        self.cig() * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn is_depthwise(&self) -> bool {
        self.cig() == 1 && self.cog() == 1
    }
}

/// `C = A·B + beta·C` for `m×k` by `k×n` operands addressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    let max_index = |rows: usize, cols: usize, (rs, cs): (isize, isize)| -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(max_index(m, k, a_strides) <= a.len());
    assert!(max_index(k, n, b_strides) <= b.len());
    assert!(m * n <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    if m == 1 || k == 1 {
        // Packing overhead dominates for vector-shaped operands.
        small_gemm(m, k, n, a, a_strides, b, b_strides, c, beta);
        return;
    }
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (ars, acs): (isize, isize),
    b: &[f64],
    (brs, bcs): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    let (ars, acs, brs, bcs) = (ars as usize, acs as usize, brs as usize, bcs as usize);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            crow.fill(0.0);
        } else {
            crow.iter_mut().for_each(|v| *v *= beta);
        }
        if brs == 1 && acs == 1 {
            // B is column-contiguous: each output is a dot product.
            let arow = &a[i * ars..i * ars + k];
            for (j, cv) in crow.iter_mut().enumerate() {
                let bcol = &b[j * bcs..j * bcs + k];
                *cv += arow.iter().zip(bcol).map(|(x, y)| x * y).sum::<f64>();
            }
            continue;
        }
        for p in 0..k {
            let av = a[i * ars + p * acs];
            if bcs == 1 {
                let brow = &b[p * brs..p * brs + n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            } else {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += av * b[p * brs + j * bcs];
                }
            }
        }
    }
}

fn valid_range(k: usize, pad: usize, stride: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_num = len_in as isize - 1 + pad as isize - k as isize;
    let hi = if hi_num < 0 { 0 } else { hi_num as usize / stride + 1 };
    let (lo, hi) = (lo.min(len_out), hi.min(len_out));
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], d: &ConvDims, group: usize, cols: &mut [f64]) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let n = d.n();
    let cig = d.cig();
    for icg in 0..cig {
        let ic = group * cig + icg;
        for ky in 0..d.kh {
            let (oy0, oy1) = valid_range(ky, ph, sh, d.h, d.ho);
            for kx in 0..d.kw {
                let (ox0, ox1) = valid_range(kx, pw, sw, d.w, d.wo);
                let row = &mut cols[((icg * d.kh + ky) * d.kw + kx) * n..][..n];
                for b in 0..d.batch {
                    let plane = &x[(b * d.cin + ic) * d.h * d.w..][..d.h * d.w];
                    for oy in oy0..oy1 {
                        let iy = oy * sh + ky - ph;
                        let dst = &mut row[(b * d.ho + oy) * d.wo..][..d.wo];
                        let src = &plane[iy * d.w..][..d.w];
                        if sw == 1 {
                            let s0 = ox0 + kx - pw;
                            dst[ox0..ox1].copy_from_slice(&src[s0..s0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] = src[ox * sw + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(gcols: &[f64], d: &ConvDims, group: usize, gx: &mut [f64]) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let n = d.n();
    let cig = d.cig();
    for icg in 0..cig {
        let ic = group * cig + icg;
        for ky in 0..d.kh {
            let (oy0, oy1) = valid_range(ky, ph, sh, d.h, d.ho);
            for kx in 0..d.kw {
                let (ox0, ox1) = valid_range(kx, pw, sw, d.w, d.wo);
                let row = &gcols[((icg * d.kh + ky) * d.kw + kx) * n..][..n];
                for b in 0..d.batch {
                    let plane = &mut gx[(b * d.cin + ic) * d.h * d.w..][..d.h * d.w];
                    for oy in oy0..oy1 {
                        let iy = oy * sh + ky - ph;
                        let src = &row[(b * d.ho + oy) * d.wo..][..d.wo];
                        let dst = &mut plane[iy * d.w..][..d.w];
                        for ox in ox0..ox1 {
                            dst[ox * sw + kx - pw] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the `[B, C_out, H_out, W_out]` output and the cached column matrices.
pub(crate) fn forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> (Vec<f64>, Vec<f64>) {
    if d.is_depthwise() {
        return (depthwise_forward(x, weight, bias, d), Vec::new());
    }
    let (k, n, cog) = (d.k(), d.n(), d.cog());
    let groups = d.geom.groups;
    let hw = d.ho * d.wo;
    let mut cols = vec![0.0; groups * k * n];
    let mut out_g = vec![0.0; cog * n];
    let mut out = vec![0.0; d.batch * d.cout * hw];
    for g in 0..groups {
        let cols_g = &mut cols[g * k * n..(g + 1) * k * n];
        im2col(x, d, g, cols_g);
        let w_g = &weight[g * cog * k..(g + 1) * cog * k];
        gemm(cog, k, n, w_g, (k as isize, 1), cols_g, (n as isize, 1), &mut out_g, 0.0);
        for o in 0..cog {
            let oc = g * cog + o;
            let bv = bias.map_or(0.0, |b| b[oc]);
            for b in 0..d.batch {
                let src = &out_g[o * n + b * hw..][..hw];
                let dst = &mut out[(b * d.cout + oc) * hw..][..hw];
                for (dv, sv) in dst.iter_mut().zip(src) {
                    *dv = sv + bv;
                }
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    grad_out: &[f64],
    x: &[f64],
    weight: &[f64],
    cols: &[f64],
    d: &ConvDims,
    want: (bool, bool, bool),
) -> ConvGrads {
    if d.is_depthwise() {
        return depthwise_backward(grad_out, x, weight, d, want);
    }
    let (k, n, cog) = (d.k(), d.n(), d.cog());
    let groups = d.geom.groups;
    let hw = d.ho * d.wo;
    // Rearrange to [C_out × N] so each group is a contiguous row block.
    let mut gt = vec![0.0; d.cout * n];
    for b in 0..d.batch {
        for oc in 0..d.cout {
            gt[oc * n + b * hw..][..hw].copy_from_slice(&grad_out[(b * d.cout + oc) * hw..][..hw]);
        }
    }
    let (want_x, want_w, want_b) = want;
    let mut gx = want_x.then(|| vec![0.0; d.batch * d.cin * d.h * d.w]);
    let mut gw = want_w.then(|| vec![0.0; weight.len()]);
    let mut gcols = if want_x { vec![0.0; k * n] } else { Vec::new() };
    for g in 0..groups {
        let gt_g = &gt[g * cog * n..(g + 1) * cog * n];
        let cols_g = &cols[g * k * n..(g + 1) * k * n];
        if let Some(gw) = gw.as_mut() {
            let gw_g = &mut gw[g * cog * k..(g + 1) * cog * k];
            gemm(cog, n, k, gt_g, (n as isize, 1), cols_g, (1, n as isize), gw_g, 0.0);
        }
        if let Some(gx) = gx.as_mut() {
            let w_g = &weight[g * cog * k..(g + 1) * cog * k];
            gemm(k, cog, n, w_g, (1, k as isize), gt_g, (n as isize, 1), &mut gcols, 0.0);
            col2im_add(&gcols, d, g, gx);
        }
    }
    let gb = want_b.then(|| (0..d.cout).map(|oc| gt[oc * n..(oc + 1) * n].iter().sum()).collect());
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// `[B, C, H, W]` to `[C, H, W, B]` (batch innermost), or back with `inverse`.
fn batch_last(src: &[f64], b: usize, c: usize, hw: usize, inverse: bool) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                let bchw = (bi * c + ci) * hw + p;
                let chwb = (ci * hw + p) * b + bi;
                if inverse {
                    dst[bchw] = src[chwb];
                } else {
                    dst[chwb] = src[bchw];
                }
            }
        }
    }
    dst
}

/// Depthwise kernels run in batch-last layout so the innermost loop spans
/// `batch` contiguous values instead of a short spatial row.
fn depthwise_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let nb = d.batch;
    let xt = batch_last(x, nb, d.cin, d.h * d.w, false);
    let mut ot = vec![0.0; d.cout * d.ho * d.wo * nb];
    for c in 0..d.cout {
        let xin = &xt[c * d.h * d.w * nb..][..d.h * d.w * nb];
        let out = &mut ot[c * d.ho * d.wo * nb..][..d.ho * d.wo * nb];
        if let Some(b) = bias {
            out.fill(b[c]);
        }
        for ky in 0..d.kh {
            let (oy0, oy1) = valid_range(ky, ph, sh, d.h, d.ho);
            for kx in 0..d.kw {
                let (ox0, ox1) = valid_range(kx, pw, sw, d.w, d.wo);
                let wk = weight[(c * d.kh + ky) * d.kw + kx];
                for oy in oy0..oy1 {
                    let iy = oy * sh + ky - ph;
                    if sw == 1 {
                        let len = (ox1 - ox0) * nb;
                        let dst = &mut out[(oy * d.wo + ox0) * nb..][..len];
                        let src = &xin[(iy * d.w + ox0 + kx - pw) * nb..][..len];
                        for (o, i) in dst.iter_mut().zip(src) {
                            *o += wk * i;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            let dst = &mut out[(oy * d.wo + ox) * nb..][..nb];
                            let src = &xin[(iy * d.w + ox * sw + kx - pw) * nb..][..nb];
                            for (o, i) in dst.iter_mut().zip(src) {
                                *o += wk * i;
                            }
                        }
                    }
                }
            }
        }
    }
    batch_last(&ot, nb, d.cout, d.ho * d.wo, true)
}

fn depthwise_backward(grad_out: &[f64], x: &[f64], weight: &[f64], d: &ConvDims, want: (bool, bool, bool)) -> ConvGrads {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let nb = d.batch;
    let (want_x, want_w, want_b) = want;
    let xt = batch_last(x, nb, d.cin, d.h * d.w, false);
    let gt = batch_last(grad_out, nb, d.cout, d.ho * d.wo, false);
    let mut gxt = if want_x { vec![0.0; xt.len()] } else { Vec::new() };
    let mut gw = vec![0.0; weight.len()];
    for c in 0..d.cout {
        let xin = &xt[c * d.h * d.w * nb..][..d.h * d.w * nb];
        let gout = &gt[c * d.ho * d.wo * nb..][..d.ho * d.wo * nb];
        for ky in 0..d.kh {
            let (oy0, oy1) = valid_range(ky, ph, sh, d.h, d.ho);
            for kx in 0..d.kw {
                let (ox0, ox1) = valid_range(kx, pw, sw, d.w, d.wo);
                let widx = (c * d.kh + ky) * d.kw + kx;
                let wk = weight[widx];
                let mut acc = 0.0;
                for oy in oy0..oy1 {
                    let iy = oy * sh + ky - ph;
                    let runs: Box<dyn Iterator<Item = (usize, usize, usize)>> = if sw == 1 {
                        Box::new(std::iter::once(((oy * d.wo + ox0) * nb, (iy * d.w + ox0 + kx - pw) * nb, (ox1 - ox0) * nb)))
                    } else {
                        Box::new((ox0..ox1).map(move |ox| ((oy * d.wo + ox) * nb, (iy * d.w + ox * sw + kx - pw) * nb, nb)))
                    };
                    for (go, xi, len) in runs {
                        let gsl = &gout[go..go + len];
                        if want_w {
                            acc += gsl.iter().zip(&xin[xi..xi + len]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if want_x {
                            for (dst, gv) in gxt[c * d.h * d.w * nb + xi..][..len].iter_mut().zip(gsl) {
                                *dst += wk * gv;
                            }
                        }
                    }
                }
                gw[widx] = acc;
            }
        }
    }
    let gb = want_b.then(|| {
        (0..d.cout)
            .map(|c| gt[c * d.ho * d.wo * nb..][..d.ho * d.wo * nb].iter().sum())
            .collect()
    });
    ConvGrads {
        input: want_x.then(|| batch_last(&gxt, nb, d.cin, d.h * d.w, true)),
        weight: want_w.then_some(gw),
        bias: gb,
    }
}
