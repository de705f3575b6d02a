//! Raw slice kernels shared by the tape and by the untracked helpers.

use crate::error::{Error, Result};

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op` optionally
/// transposes. `a` is m×k (stored k×m when `trans_a`), `b` is k×n (stored
/// n×k when `trans_b`), `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every index dgemm touches for these strides.
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

pub(crate) fn check_matmul(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::dim(format!(
            "matmul needs [m, k] x [k, n], got {a:?} x {b:?}"
        )));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::dim(format!(
                "conv2d needs input [B, C, H, W] and kernel [F, C, kh, kw], got {x:?} and {w:?}"
            )));
        }
        let (kh, kw) = (w[2], w[3]);
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
            return Err(Error::dim(format!("unsupported kernel size {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let span = size + 2 * pad;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::dim(format!(
                    "conv2d output size ({size} + 2*{pad} - {k})/{stride} + 1 is not integral"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(Self {
            c: x[1],
            h: x[2],
            w: x[3],
            kh,
            kw,
            stride,
            pad,
            ho: out(x[2], kh)?,
            wo: out(x[3], kw)?,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// True when the unfolded columns equal the image itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.wo && (lo * self.stride + kx) < self.pad {
            lo += 1;
        }
        let mut hi = self.wo;
        while hi > lo && (hi - 1) * self.stride + kx >= self.pad + self.w {
            hi -= 1;
        }
        (lo, hi)
    }

    /// Unfolds one image `[C, H, W]` into columns `[C·kh·kw, Ho·Wo]`.
    pub fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let npix = self.out_pixels();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * npix..(row + 1) * npix];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(ch * self.h + iy as usize) * self.w..][..self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo == hi {
                            continue;
                        }
                        let first = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[first + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back, accumulating.
    pub fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let npix = self.out_pixels();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let src = &col[row * npix..(row + 1) * npix];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * self.stride + kx - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(ch * self.h + iy as usize) * self.w..][..self.w];
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        for (j, v) in line[lo..hi].iter().enumerate() {
                            dst[first + j * self.stride] += v;
                        }
                    }
                }
            }
        }
    }
}
