// Raw numeric kernels on flat buffers. No graph bookkeeping here.

use super::strides;

/// Strided view of a row-major matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.row_stride + (self.cols - 1) as isize * self.col_stride)
            as usize
    }
}

/// `c = a * b + beta * c`, with `c` a dense row-major `[a.rows, b.cols]` block.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.max_offset() < a.data.len());
    assert!(b.max_offset() < b.data.len());
    // SAFETY: the asserts above keep every strided access of a, b and the
    // dense m*n block of c inside their slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a same-padded 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height - 1) / self.stride + 1,
            (self.width - 1) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfold one image `[C,H,W]` into `[C*kh*kw, Ho*Wo]` patches.
pub(crate) fn im2col(img: &[f64], g: ConvGeom, col: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let cols = ho * wo;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - ph as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pw as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatter-add patches back into `[C,H,W]`.
pub(crate) fn col2im(col: &[f64], g: ConvGeom, img: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let cols = ho * wo;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - ph as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - pw as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
