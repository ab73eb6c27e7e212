//! Dense kernels shared by the tape ops: GEMM and the im2col/col2im pair.

/// Row-major `f64` matrix operand: `rows x cols`, optionally stored transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    /// When true, `data` holds the `cols x rows` matrix whose transpose is meant.
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Views `data` (stored `rows x cols`) as its `cols x rows` transpose.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// Products up to this many multiply-adds skip dgemm's packing.
const SMALL_GEMM: usize = 1024;

/// `c = beta * c + a * b` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    if m * k * n <= SMALL_GEMM {
        let at = |i: usize, p: usize| a.data[i * rsa as usize + p * csa as usize];
        let bt = |p: usize, j: usize| b.data[p * rsb as usize + j * csb as usize];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += at(i, p) * bt(p, j);
                }
                let dst = &mut c[i * n + j];
                *dst = if beta == 0.0 { acc } else { beta * *dst + acc };
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index dgemm touches: a spans
    // m*k elements, b spans k*n, and c is exactly m*n with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided 2D window sweep over a `(h, w)` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(channels: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Window {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Output indices `lo..hi` whose tap `k` lands inside `0..limit`.
    fn valid(&self, k: usize, limit: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if limit + self.pad > k {
            ((limit - 1 + self.pad - k) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds `batch` images (`[batch, channels, h, w]`) into a
/// `[channels*kh*kw, batch*out_h*out_w]` column matrix.
pub(crate) fn im2col(x: &[f64], batch: usize, g: &Window, cols: &mut [f64]) {
    let area = g.out_area();
    let ncols = batch * area;
    let img = g.channels * g.h * g.w;
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let (lo, hi) = g.valid(j, g.w, g.out_w);
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..batch {
                    let plane = &x[n * img + c * g.h * g.w..n * img + (c + 1) * g.h * g.w];
                    let dst = &mut dst[n * area..(n + 1) * area];
                    for oy in 0..g.out_h {
                        let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        match g.source(oy, i, g.h) {
                            None => line.fill(0.0),
                            Some(y) => {
                                line[..lo].fill(0.0);
                                line[hi..].fill(0.0);
                                let row = &plane[y * g.w..(y + 1) * g.w];
                                for (ox, v) in line[lo..hi].iter_mut().enumerate() {
                                    *v = row[(lo + ox) * g.stride + j - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into images.
pub(crate) fn col2im(cols: &[f64], batch: usize, g: &Window, x: &mut [f64]) {
    let area = g.out_area();
    let ncols = batch * area;
    let img = g.channels * g.h * g.w;
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let (lo, hi) = g.valid(j, g.w, g.out_w);
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..batch {
                    let plane = &mut x[n * img + c * g.h * g.w..n * img + (c + 1) * g.h * g.w];
                    let src = &src[n * area..(n + 1) * area];
                    for oy in 0..g.out_h {
                        let Some(y) = g.source(oy, i, g.h) else { continue };
                        let row = &mut plane[y * g.w..(y + 1) * g.w];
                        for ox in lo..hi {
                            row[ox * g.stride + j - g.pad] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[a, b, c] -> [b, a, c]` for contiguous row-major data.
pub(crate) fn swap_outer(src: &[f64], a: usize, b: usize, c: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), a * b * c);
    for i in 0..a {
        for j in 0..b {
            dst[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(&src[(i * b + j) * c..(i * b + j + 1) * c]);
        }
    }
}
