//! Raw numeric kernels behind the heavier tape operations.

/// Geometry of a 2-D convolution over an `[batch, in_ch, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// `c = a · b + beta · c` for row-major `a: m×k` and `b: k×n`, with optional
/// transposition of either operand (the slices then hold the transposed
/// storage, i.e. `a` is `k×m` when `trans_a`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every slice to exactly the extent that
    // the given strides address, and `c` does not alias `a` or `b`.
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

/// Unfold one sample `[in_ch, h, w]` into a `[patch_len, out_plane]` matrix.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto one sample.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dxc[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns the output and the unfolded patches of
/// every sample (needed again for the weight gradient).
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.in_ch * g.height * g.width;
    let mut cols = vec![0.0; g.batch * patch * plane];
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    for b in 0..g.batch {
        let col_b = &mut cols[b * patch * plane..(b + 1) * patch * plane];
        im2col(g, &x[b * in_len..(b + 1) * in_len], col_b);
        let out_b = &mut out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        for (oc, chunk) in out_b.chunks_mut(plane).enumerate() {
            chunk.fill(bias[oc]);
        }
        gemm(g.out_ch, patch, plane, w, false, col_b, false, 1.0, out_b);
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    cols: &[f64],
    w: &[f64],
    dout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.in_ch * g.height * g.width;
    let mut dx = need.0.then(|| vec![0.0; g.batch * in_len]);
    let mut dw = need.1.then(|| vec![0.0; g.out_ch * patch]);
    let mut db = need.2.then(|| vec![0.0; g.out_ch]);
    let mut dcols = if need.0 { vec![0.0; patch * plane] } else { Vec::new() };
    for b in 0..g.batch {
        let dout_b = &dout[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        let col_b = &cols[b * patch * plane..(b + 1) * patch * plane];
        if let Some(dw) = dw.as_mut() {
            gemm(g.out_ch, plane, patch, dout_b, false, col_b, true, 1.0, dw);
        }
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in dout_b.chunks(plane).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(patch, g.out_ch, plane, w, true, dout_b, false, 0.0, &mut dcols);
            col2im(g, &dcols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Non-overlapping max pooling with window = stride = `size` over
/// `[planes, h, w]`. Returns the pooled values and the flat input index of
/// each winner (first maximum in scan order).
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
