//! Single-level 2D Haar analysis and synthesis, plus the non-trainable
//! wavelet pooling / unpooling layers built on them.
//!
//! Each 2x2 block `[[a, b], [c, d]]` is mapped by the orthonormal kernels
//!
//! ```text
//! ll = ( a + b + c + d) / 2
//! lh = (-a - b + c + d) / 2
//! hl = (-a + b - c + d) / 2
//! hh = ( a - b - c + d) / 2
//! ```
//!
//! so synthesis is the transpose of analysis and energy is preserved.

use tms_autograd::{dims4, CustomOp, Element, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Sign pattern of each kernel over the block positions (a, b, c, d).
const KERNELS: [[f64; 4]; 4] = [
    [1.0, 1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0, 1.0],
    [-1.0, 1.0, -1.0, 1.0],
    [1.0, -1.0, -1.0, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Ll = 0,
    Lh = 1,
    Hl = 2,
    Hh = 3,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::Ll, Band::Lh, Band::Hl, Band::Hh];
}

/// The four half-resolution subbands of one decomposition level.
#[derive(Clone, Debug, PartialEq)]
pub struct Subbands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Element> Subbands<T> {
    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    fn check(&self) -> Result<()> {
        let s = self.ll.shape();
        for b in [&self.lh, &self.hl, &self.hh] {
            if b.shape() != s {
                return Err(Error::SubbandMismatch(s.to_vec(), b.shape().to_vec()));
            }
        }
        dims4(s, "haar_reconstruct")?;
        Ok(())
    }
}

fn check_even(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = dims4(shape, "haar_decompose")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDims { h, w });
    }
    Ok((n * c, h, w))
}

/// One analysis band over `planes` images of `h x w`.
fn analyze_band<T: Element>(x: &[T], planes: usize, h: usize, w: usize, band: Band) -> Vec<T> {
    let k = KERNELS[band as usize].map(|s| T::from_f64_lossy(0.5 * s));
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * h2 * w2);
    for p in 0..planes {
        let img = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            let top = &img[2 * i * w..(2 * i + 1) * w];
            let bot = &img[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..w2 {
                out.push(
                    k[0] * top[2 * j] + k[1] * top[2 * j + 1] + k[2] * bot[2 * j] + k[3] * bot[2 * j + 1],
                );
            }
        }
    }
    out
}

/// Adds the synthesis contribution of `coeffs` in `band` into `out`.
fn synthesize_band<T: Element>(coeffs: &[T], planes: usize, h2: usize, w2: usize, band: Band, out: &mut [T]) {
    let k = KERNELS[band as usize].map(|s| T::from_f64_lossy(0.5 * s));
    let (h, w) = (2 * h2, 2 * w2);
    for p in 0..planes {
        let src = &coeffs[p * h2 * w2..(p + 1) * h2 * w2];
        let img = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let v = src[i * w2 + j];
                img[2 * i * w + 2 * j] += k[0] * v;
                img[2 * i * w + 2 * j + 1] += k[1] * v;
                img[(2 * i + 1) * w + 2 * j] += k[2] * v;
                img[(2 * i + 1) * w + 2 * j + 1] += k[3] * v;
            }
        }
    }
}

fn half_shape(shape: &[usize]) -> Vec<usize> {
    vec![shape[0], shape[1], shape[2] / 2, shape[3] / 2]
}

/// Stride-2 analysis with the four Haar kernels. Input is `[N, C, H, W]`
/// with even `H` and `W`.
pub fn haar_decompose<T: Element>(f: &Tensor<T>) -> Result<Subbands<T>> {
    let (planes, h, w) = check_even(f.shape())?;
    let shape = half_shape(f.shape());
    let band = |b| Tensor::new(shape.clone(), analyze_band(f.data(), planes, h, w, b));
    Ok(Subbands {
        ll: band(Band::Ll)?,
        lh: band(Band::Lh)?,
        hl: band(Band::Hl)?,
        hh: band(Band::Hh)?,
    })
}

/// Exact inverse of [`haar_decompose`].
pub fn haar_reconstruct<T: Element>(s: &Subbands<T>) -> Result<Tensor<T>> {
    s.check()?;
    let (n, c, h2, w2) = dims4(s.ll.shape(), "haar_reconstruct")?;
    let mut out = vec![T::zero(); n * c * 4 * h2 * w2];
    for (band, t) in Band::ALL.into_iter().zip(s.bands()) {
        synthesize_band(t.data(), n * c, h2, w2, band, &mut out);
    }
    Ok(Tensor::new(vec![n, c, 2 * h2, 2 * w2], out)?)
}

/// Subbands recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SubbandVars {
    pub ll: Var,
    pub lh: Var,
    pub hl: Var,
    pub hh: Var,
}

impl SubbandVars {
    pub fn highs(&self) -> [Var; 3] {
        [self.lh, self.hl, self.hh]
    }
}

struct AnalysisOp {
    band: Band,
}

impl<T: Element> CustomOp<T> for AnalysisOp {
    fn name(&self) -> &'static str {
        "wavelet_pool"
    }

    fn backward(&self, inputs: &[&Tensor<T>], grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let shape = inputs[0].shape().to_vec();
        let (n, c, h2, w2) = (grad.shape()[0], grad.shape()[1], grad.shape()[2], grad.shape()[3]);
        let mut out = vec![T::zero(); shape.iter().product()];
        synthesize_band(grad.data(), n * c, h2, w2, self.band, &mut out);
        vec![Tensor::new(shape, out).ok()]
    }
}

struct SynthesisOp;

impl<T: Element> CustomOp<T> for SynthesisOp {
    fn name(&self) -> &'static str {
        "wavelet_unpool"
    }

    fn backward(&self, inputs: &[&Tensor<T>], grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = (grad.shape()[0], grad.shape()[1], grad.shape()[2], grad.shape()[3]);
        Band::ALL
            .into_iter()
            .zip(needs)
            .map(|(band, &need)| {
                need.then(|| {
                    Tensor::new(
                        inputs[band as usize].shape().to_vec(),
                        analyze_band(grad.data(), n * c, h, w, band),
                    )
                    .ok()
                })
                .flatten()
            })
            .collect()
    }
}

/// Wavelet pooling layer: decomposes `x` into four differentiable subbands.
pub fn wavelet_pool<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<SubbandVars> {
    let (planes, h, w) = check_even(tape.shape(x))?;
    let shape = half_shape(tape.shape(x));
    let mut vars = [x; 4];
    for band in Band::ALL {
        let data = analyze_band(tape.value(x).data(), planes, h, w, band);
        let out = Tensor::new(shape.clone(), data)?;
        vars[band as usize] = tape.custom(&[x], out, Box::new(AnalysisOp { band }))?;
    }
    Ok(SubbandVars {
        ll: vars[0],
        lh: vars[1],
        hl: vars[2],
        hh: vars[3],
    })
}

/// Wavelet unpooling layer: synthesizes the full-resolution map.
pub fn wavelet_unpool<T: Element>(tape: &mut Tape<T>, s: &SubbandVars) -> Result<Var> {
    let out = haar_reconstruct(&Subbands {
        ll: tape.value(s.ll).clone(),
        lh: tape.value(s.lh).clone(),
        hl: tape.value(s.hl).clone(),
        hh: tape.value(s.hh).clone(),
    })?;
    Ok(tape.custom(&[s.ll, s.lh, s.hl, s.hh], out, Box::new(SynthesisOp))?)
}
