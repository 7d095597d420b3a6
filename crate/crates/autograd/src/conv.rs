//! im2col based 2D cross-correlation kernels (NCHW layout, zero padding).

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = dims4(x, "conv2d")?;
        let (cout, wcin, kh, kw) = dims4(weight, "conv2d")?;
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Geometry {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < kh || pw < kw {
            return Err(TensorError::Geometry {
                op: "conv2d",
                reason: format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            });
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(TensorError::Geometry {
                op: "conv2d",
                reason: format!("stride {stride} does not tile padded input {ph}x{pw} with kernel {kh}x{kw}"),
            });
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_image(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }
}

/// Output column range `[lo, hi)` for which `o * stride + k - pad` lands in `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out && (lo * stride + k) < pad {
        lo += 1;
    }
    let mut hi = out;
    while hi > lo && ((hi - 1) * stride + k) >= pad + len {
        hi -= 1;
    }
    (lo, hi)
}

fn im2col<T: Element>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let chan = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(g.h, g.ho, i, g.stride, g.pad);
            for j in 0..g.kw {
                let row = &mut col[((c * g.kh + i) * g.kw + j) * plane..][..plane];
                let (xlo, xhi) = valid_range(g.w, g.wo, j, g.stride, g.pad);
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + i - g.pad;
                    let src = &chan[iy * g.w..(iy + 1) * g.w];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = xlo + j - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * g.stride + j - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let chan = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(g.h, g.ho, i, g.stride, g.pad);
            for j in 0..g.kw {
                let row = &col[((c * g.kh + i) * g.kw + j) * plane..][..plane];
                let (xlo, xhi) = valid_range(g.w, g.wo, j, g.stride, g.pad);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + i - g.pad;
                    let dst = &mut chan[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        dst[ox * g.stride + j - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![g.cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for n in 0..g.n {
        let img = &x.data()[n * g.in_image()..(n + 1) * g.in_image()];
        let dst = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        if let Some(b) = bias {
            for (k, &bk) in b.data().iter().enumerate() {
                dst[k * plane..(k + 1) * plane].fill(bk);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            patch,
            plane,
            T::one(),
            weight.data(),
            (patch as isize, 1),
            src,
            (plane as isize, 1),
            beta,
            dst,
            (plane as isize, 1),
        );
    }
    Ok((Tensor::from_parts(g.output_shape(), out), g))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let (want_x, want_w, want_b) = want;
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_w.then(|| vec![T::zero(); weight.len()]);
    let mut db = want_b.then(|| vec![T::zero(); g.cout]);
    let mut col = if g.is_pointwise() || !(want_x || want_w) {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for n in 0..g.n {
        let dyn_ = &dy[n * g.cout * plane..(n + 1) * g.cout * plane];
        let img = &x.data()[n * g.in_image()..(n + 1) * g.in_image()];
        if let Some(db) = db.as_mut() {
            for k in 0..g.cout {
                db[k] += dyn_[k * plane..(k + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut col);
                &col
            };
            // dW (cout x patch) += dY (cout x plane) * col^T (plane x patch)
            T::gemm(
                g.cout,
                plane,
                patch,
                T::one(),
                dyn_,
                (plane as isize, 1),
                src,
                (1, plane as isize),
                T::one(),
                dw,
                (patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[n * g.in_image()..(n + 1) * g.in_image()];
            if g.is_pointwise() {
                T::gemm(
                    patch,
                    g.cout,
                    plane,
                    T::one(),
                    weight.data(),
                    (1, patch as isize),
                    dyn_,
                    (plane as isize, 1),
                    T::zero(),
                    dimg,
                    (plane as isize, 1),
                );
            } else {
                // dcol (patch x plane) = W^T (patch x cout) * dY (cout x plane)
                T::gemm(
                    patch,
                    g.cout,
                    plane,
                    T::one(),
                    weight.data(),
                    (1, patch as isize),
                    dyn_,
                    (plane as isize, 1),
                    T::zero(),
                    &mut col,
                    (plane as isize, 1),
                );
                col2im(&col, g, dimg);
            }
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        weight: dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::from_parts(vec![g.cout], d)),
    }
}
