//! Plain-slice numeric kernels used by the tape ops.
//!
//! Every kernel that sums over the leading (batch) axis does so in index
//! order, starting from zero, one instance at a time. Per-instance gradient
//! accumulation relies on this to reproduce full-batch gradients bit for bit.

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `da[m×k] = dc[m×n] · bᵀ`
pub(crate) fn matmul_grad_lhs(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (&d, &bv) in drow.iter().zip(brow) {
                acc += d * bv;
            }
            da[i * k + kk] = acc;
        }
    }
    da
}

/// `db[k×n] = aᵀ · dc[m×n]`, accumulated row by row of `a`.
pub(crate) fn matmul_grad_rhs(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let dbrow = &mut db[kk * n..(kk + 1) * n];
            for (o, &d) in dbrow.iter_mut().zip(drow) {
                *o += av * d;
            }
        }
    }
    db
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Unrolls one `C×H×W` image into `[C·kh·kw, H·W]` patches with zero
/// same-padding.
pub(crate) fn im2col(img: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let hw = g.pixels();
    for c in 0..g.channels {
        let plane = &img[c * hw..(c + 1) * hw];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let r = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y + dy as isize - ph;
                    for x in 0..w {
                        let sx = x + dx as isize - pw;
                        dst[(y * w + x) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`]: adds patch gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom, img: &mut [f64]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let hw = g.pixels();
    for c in 0..g.channels {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let r = (c * g.kh + dy) * g.kw + dx;
                let src = &cols[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y + dy as isize - ph;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx as isize - pw;
                        if sx >= 0 && sx < w {
                            img[c * hw + (sy * w + sx) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], n: usize, outc: usize, g: ConvGeom) -> Vec<f64> {
    let hw = g.pixels();
    let in_sz = g.channels * hw;
    let mut cols = vec![0.0; g.rows() * hw];
    let mut out = Vec::with_capacity(n * outc * hw);
    for img in 0..n {
        im2col(&x[img * in_sz..(img + 1) * in_sz], g, &mut cols);
        out.extend(matmul(k, &cols, outc, g.rows(), hw));
    }
    out
}

/// Returns `(dx, dk)` for a same-padded stride-1 convolution.
pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    n: usize,
    outc: usize,
    g: ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.pixels();
    let rows = g.rows();
    let in_sz = g.channels * hw;
    let out_sz = outc * hw;
    let mut cols = vec![0.0; rows * hw];
    let mut dx = need_dx.then(|| vec![0.0; n * in_sz]);
    let mut dk = need_dk.then(|| vec![0.0; outc * rows]);
    for img in 0..n {
        let dimg = &dy[img * out_sz..(img + 1) * out_sz];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[img * in_sz..(img + 1) * in_sz], g, &mut cols);
            for o in 0..outc {
                let drow = &dimg[o * hw..(o + 1) * hw];
                for r in 0..rows {
                    let crow = &cols[r * hw..(r + 1) * hw];
                    let mut acc = 0.0;
                    for (&d, &c) in drow.iter().zip(crow) {
                        acc += d * c;
                    }
                    dk[o * rows + r] += acc;
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[rows×hw] = kᵀ · dimg
            let mut dcols = vec![0.0; rows * hw];
            for o in 0..outc {
                let drow = &dimg[o * hw..(o + 1) * hw];
                for r in 0..rows {
                    let kv = k[o * rows + r];
                    let dst = &mut dcols[r * hw..(r + 1) * hw];
                    for (t, &d) in dst.iter_mut().zip(drow) {
                        *t += kv * d;
                    }
                }
            }
            col2im(&dcols, g, &mut dx[img * in_sz..(img + 1) * in_sz]);
        }
    }
    (dx, dk)
}

/// 2×2 stride-2 max pooling over `[N, C, H, W]`; odd trailing rows/columns
/// are dropped. Returns the pooled values and, per output, the flat input
/// index of the first (row-major) maximum of its window.
pub(crate) fn maxpool2x2(x: &[f64], nc: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for plane in 0..nc {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
