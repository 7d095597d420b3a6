//! Input degradations used to synthesize poor segmentations: FGSM and BIM
//! perturbations against the network's own loss, and Rician noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tms_autograd::{Element, Tape, Tensor};

use crate::error::{Error, Result};
use crate::model::TmsNet;
use crate::volume::{Mask3D, ViewAxis, Volume3D};

pub const BIM_ALPHA: f64 = 1.0;
pub const BIM_ITERS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fgsm,
    Bim,
    Rician,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Fgsm => "fgsm",
            Method::Bim => "bim",
            Method::Rician => "rician",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Method::Fgsm),
            "bim" => Ok(Method::Bim),
            "rician" => Ok(Method::Rician),
            other => Err(Error::Config(format!("unknown corruption method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Views {
    /// Perturb axial, coronal and sagittal slices in turn.
    Three,
    /// Perturb the standard view only.
    Single,
}

impl std::fmt::Display for Views {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Views::Three => "three",
            Views::Single => "single",
        })
    }
}

impl std::str::FromStr for Views {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three" => Ok(Views::Three),
            "single" => Ok(Views::Single),
            other => Err(Error::Config(format!("unknown view protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub method: Method,
    /// `epsilon` for FGSM/BIM, `sigma` for Rician.
    pub magnitude: f64,
    pub views: Views,
    pub bim_alpha: f64,
    pub bim_iters: usize,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn fgsm(eps: f64, views: Views) -> Self {
        Self::new(Method::Fgsm, eps, views, 0)
    }

    pub fn bim(eps: f64, views: Views) -> Self {
        Self::new(Method::Bim, eps, views, 0)
    }

    pub fn rician(sigma: f64, seed: u64) -> Self {
        Self::new(Method::Rician, sigma, Views::Three, seed)
    }

    fn new(method: Method, magnitude: f64, views: Views, seed: u64) -> Self {
        Self {
            method,
            magnitude,
            views,
            bim_alpha: BIM_ALPHA,
            bim_iters: BIM_ITERS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::Config(format!("magnitude {} must be finite and >= 0", self.magnitude)));
        }
        if self.method == Method::Bim && (self.bim_iters == 0 || self.bim_alpha <= 0.0) {
            return Err(Error::Config("BIM needs positive alpha and iterations".into()));
        }
        Ok(())
    }
}

/// Gradient of the mean BCE loss of `(encoder, decoder_view)` with respect
/// to the input slices. Parameters receive no gradient.
pub fn input_gradient<T: Element>(
    net: &TmsNet<T>,
    view: ViewAxis,
    slices: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::without_param_grads();
    let x = tape.input(slices.clone(), true)?;
    let y = net.forward(&mut tape, view, x)?;
    let loss = tape.bce_loss(y, mask)?;
    let grads = tape.backward(loss)?;
    grads
        .wrt(x)
        .cloned()
        .ok_or_else(|| Error::Config("input gradient was not recorded".into()))
}

/// `clamp(x + eps * sign(grad), 0, 1)`.
pub fn fgsm_slices<T: Element>(
    net: &TmsNet<T>,
    view: ViewAxis,
    slices: &Tensor<T>,
    mask: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if eps == 0.0 {
        return Ok(slices.clone());
    }
    let g = input_gradient(net, view, slices, mask)?;
    fgsm_step(slices, &g, eps)
}

/// `clamp(x + eps * sign(g), 0, 1)` for a precomputed gradient.
pub fn fgsm_step<T: Element>(x: &Tensor<T>, g: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let e = T::from_f64_lossy(eps);
    Ok(x.zip_map(&g.sign(), |v, s| v + e * s)?.clamp(T::zero(), T::one()))
}

/// One BIM update: a sign step of `step` from `x`, projected onto the `eps`
/// ball around `original` intersected with `[0, 1]`.
pub fn bim_step<T: Element>(x: &Tensor<T>, original: &Tensor<T>, g: &Tensor<T>, step: f64, eps: f64) -> Result<Tensor<T>> {
    let step = T::from_f64_lossy(step);
    let e = T::from_f64_lossy(eps);
    let stepped = x.zip_map(&g.sign(), |v, s| v + step * s)?;
    Ok(stepped.zip_map(original, |v, o| v.max(o - e).min(o + e).max(T::zero()).min(T::one()))?)
}

/// Iterated sign steps of size `min(alpha, eps)`, each followed by
/// projection onto the `eps` ball around the input intersected with `[0, 1]`.
pub fn bim_slices<T: Element>(
    net: &TmsNet<T>,
    view: ViewAxis,
    slices: &Tensor<T>,
    mask: &Tensor<T>,
    eps: f64,
    alpha: f64,
    iters: usize,
) -> Result<Tensor<T>> {
    if eps == 0.0 {
        return Ok(slices.clone());
    }
    let mut x = slices.clone();
    for _ in 0..iters {
        let g = input_gradient(net, view, &x, mask)?;
        x = bim_step(&x, slices, &g, alpha.min(eps), eps)?;
    }
    Ok(x)
}

fn slice_batch(v: &Volume3D, start: usize, n: usize) -> Result<Tensor<f32>> {
    let [_, h, w] = v.dims();
    let len = h * w;
    Ok(Tensor::new(vec![n, 1, h, w], v.data()[start * len..(start + n) * len].to_vec())?)
}

fn mask_batch(m: &Mask3D, start: usize, n: usize) -> Result<Tensor<f32>> {
    let [_, h, w] = m.dims();
    let len = h * w;
    let data = m.data()[start * len..(start + n) * len].iter().map(|&b| f32::from(b)).collect();
    Ok(Tensor::new(vec![n, 1, h, w], data)?)
}

/// Perturbs every slice of `v` seen from `view` against that view's decoder.
/// Returns the volume in its original orientation.
pub fn perturb_view(
    net: &TmsNet<f32>,
    v: &Volume3D,
    mask: &Mask3D,
    view: ViewAxis,
    spec: &CorruptionSpec,
    batch: usize,
) -> Result<Volume3D> {
    let orientation = v.orientation();
    let mut vv = v.reslice(view);
    let mm = mask.reslice(view);
    if vv.dims() != mm.dims() {
        return Err(Error::Geometry(format!(
            "volume {:?} and mask {:?} differ",
            v.dims(),
            mask.dims()
        )));
    }
    let len = vv.slice_len();
    let batch = batch.max(1);
    let mut start = 0;
    while start < vv.n_slices() {
        let n = batch.min(vv.n_slices() - start);
        let x = slice_batch(&vv, start, n)?;
        let m = mask_batch(&mm, start, n)?;
        let out = match spec.method {
            Method::Fgsm => fgsm_slices(net, view, &x, &m, spec.magnitude)?,
            Method::Bim => bim_slices(net, view, &x, &m, spec.magnitude, spec.bim_alpha, spec.bim_iters)?,
            Method::Rician => return Err(Error::Config("Rician noise is not view based".into())),
        };
        vv.data_mut()[start * len..(start + n) * len].copy_from_slice(out.data());
        start += n;
    }
    Ok(vv.reslice(orientation))
}

/// Applies `spec` to a whole volume. Engineered noise needs the ground-truth
/// mask; Rician noise ignores it.
pub fn corrupt_volume(
    net: &TmsNet<f32>,
    v: &Volume3D,
    mask: &Mask3D,
    spec: &CorruptionSpec,
    batch: usize,
) -> Result<Volume3D> {
    spec.validate()?;
    match (spec.method, spec.views) {
        (Method::Rician, _) => Ok(rician(v, spec.magnitude, spec.seed)),
        (_, Views::Three) => {
            let mut cur = v.clone();
            for view in ViewAxis::ALL {
                cur = perturb_view(net, &cur, mask, view, spec, batch)?;
            }
            Ok(cur)
        }
        (_, Views::Single) => perturb_view(net, v, mask, net.config().standard_view, spec, batch),
    }
}

/// `sqrt((I + G1)^2 + G2^2)` with independent `N(0, sigma^2)` draws, before
/// clamping.
pub fn rician_raw(v: &Volume3D, sigma: f64, seed: u64) -> Volume3D {
    if sigma == 0.0 {
        return v.map(f32::abs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut out = v.clone();
    for x in out.data_mut() {
        let g1: f64 = normal.sample(&mut rng);
        let g2: f64 = normal.sample(&mut rng);
        let a = *x as f64 + g1;
        *x = (a * a + g2 * g2).sqrt() as f32;
    }
    out
}

/// Rician noise clamped back into `[0, 1]`.
pub fn rician(v: &Volume3D, sigma: f64, seed: u64) -> Volume3D {
    let mut out = rician_raw(v, sigma, seed);
    out.data_mut().iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    out.intensity_range = v.intensity_range;
    out
}
