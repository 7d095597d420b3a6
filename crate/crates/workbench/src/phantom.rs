//! Synthetic left-atrium-like phantoms: a smoothly deformed ellipsoid with
//! attached tubes, textured intensities and baseline Rician noise.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tmsnet_core::corruption::rician_raw;
use tmsnet_core::{Error, Mask3D, Result, Volume3D};

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.20;
/// Knots of the random walk that bends the ellipsoid along its long axis.
const WALK_KNOTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    /// Unit direction from the ellipsoid centre, in `(z, y, x)`.
    pub direction: [f64; 3],
    pub radius: f64,
    /// Length beyond the ellipsoid surface, in voxels.
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub size: usize,
    /// Ellipsoid centre `(z, y, x)` in voxels.
    pub center: [f64; 3],
    /// Semi-axes in voxels along the body frame's first, second and third
    /// axis; the first is the long axis.
    pub semi_axes: [f64; 3],
    /// Rotation angles (degrees) of the body frame about z, y and x.
    pub rotation: [f64; 3],
    /// Strength of the random-walk bending and radius modulation; 0 keeps
    /// the exact ellipsoid.
    pub deform: f64,
    pub tubes: Vec<Tube>,
    /// Radius of the cylindrical body along z; voxels outside are air.
    pub body_radius: f64,
    /// Unlabelled bright vessel along z: `(y, x)` centre and radius.
    pub vessel: Option<([f64; 2], f64)>,
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub air_mean: f64,
    pub vessel_mean: f64,
    pub texture: f64,
    pub noise_sigma: f64,
}

impl PhantomParams {
    /// Random geometry for a cube of side `size`, fixed by `seed`.
    pub fn sample(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9ea7);
        let s = size as f64;
        let long = rng.gen_range(0.26..0.34) * s;
        let mid = rng.gen_range(0.16..0.21) * s;
        let short = rng.gen_range(0.14..0.18) * s;
        let c = s / 2.0 - 0.5;
        let jitter = 0.06 * s;
        let n_tubes = rng.gen_range(1..=3);
        let tubes = (0..n_tubes)
            .map(|_| {
                let mut d: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let n = norm(d).max(1e-6);
                d.iter_mut().for_each(|v| *v /= n);
                Tube {
                    direction: d,
                    radius: rng.gen_range(0.035..0.055) * s,
                    length: rng.gen_range(0.08..0.16) * s,
                }
            })
            .collect();
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let vessel_r = rng.gen_range(0.05..0.07) * s;
        let vessel_d = 0.36 * s;
        Self {
            size,
            center: [
                c + rng.gen_range(-jitter..jitter),
                c + rng.gen_range(-jitter..jitter),
                c + rng.gen_range(-jitter..jitter),
            ],
            semi_axes: [long, mid, short],
            rotation: [
                rng.gen_range(0.0..360.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
            ],
            deform: 1.0,
            tubes,
            body_radius: 0.47 * s,
            vessel: Some(([c + vessel_d * angle.sin(), c + vessel_d * angle.cos()], vessel_r)),
            foreground_mean: 0.6,
            background_mean: 0.3,
            air_mean: 0.05,
            vessel_mean: 0.75,
            texture: 0.05,
            noise_sigma: 0.03,
        }
    }

    /// An exact axis-aligned ellipsoid with no tubes, texture or noise.
    pub fn ellipsoid(size: usize, semi_axes: [f64; 3]) -> Self {
        let c = size as f64 / 2.0 - 0.5;
        Self {
            size,
            center: [c; 3],
            semi_axes,
            rotation: [0.0; 3],
            deform: 0.0,
            tubes: Vec::new(),
            body_radius: size as f64,
            vessel: None,
            foreground_mean: 0.6,
            background_mean: 0.3,
            air_mean: 0.05,
            vessel_mean: 0.75,
            texture: 0.0,
            noise_sigma: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.size > 0
            && self.semi_axes.iter().all(|&a| a > 0.0)
            && self.deform >= 0.0
            && self.texture >= 0.0
            && self.noise_sigma >= 0.0
            && self.body_radius > 0.0
            && self.tubes.iter().all(|t| t.radius > 0.0 && t.length >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid phantom parameters {self:?}")))
        }
    }
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rows are the body-frame axes expressed in `(z, y, x)`.
fn body_frame(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = deg.map(f64::to_radians);
    // rotations about z, y, x acting on (x, y, z) column vectors
    let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rx = [[1.0, 0.0, 0.0], [0.0, c.cos(), -c.sin()], [0.0, c.sin(), c.cos()]];
    let r = matmul(rz, matmul(ry, rx));
    // body axis k is column k in (x, y, z); reorder to (z, y, x)
    let mut frame = [[0.0; 3]; 3];
    for (k, row) in frame.iter_mut().enumerate() {
        *row = [r[2][k], r[1][k], r[0][k]];
    }
    frame
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Piecewise-linear profile over `u` in `[-1, 1]`.
struct Profile(Vec<f64>);

impl Profile {
    fn at(&self, u: f64) -> f64 {
        let n = self.0.len() - 1;
        let t = ((u.clamp(-1.0, 1.0) + 1.0) / 2.0) * n as f64;
        let i = (t.floor() as usize).min(n - 1);
        let f = t - i as f64;
        self.0[i] * (1.0 - f) + self.0[i + 1] * f
    }
}

/// Smoothed Gaussian random walk, centred to zero mean.
fn random_walk(rng: &mut ChaCha8Rng, step: f64) -> Profile {
    let normal = Normal::new(0.0, step).expect("step is finite");
    let mut walk = Vec::with_capacity(WALK_KNOTS);
    let mut pos = 0.0;
    for _ in 0..WALK_KNOTS {
        pos += normal.sample(rng);
        walk.push(pos);
    }
    let smooth: Vec<f64> = (0..WALK_KNOTS)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(WALK_KNOTS - 1);
            walk[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    Profile(smooth.into_iter().map(|v| v - mean).collect())
}

#[derive(Clone, Debug)]
pub struct PhantomSample {
    pub volume: Volume3D,
    pub mask: Mask3D,
    pub seed: u64,
    pub params: PhantomParams,
}

impl PhantomSample {
    /// SHA-256 of the volume and mask payloads.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.volume.data() {
            h.update(v.to_le_bytes());
        }
        h.update(self.mask.data());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Rasterizes the phantom shape.
pub fn rasterize(params: &PhantomParams, seed: u64) -> Mask3D {
    let n = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_4a9e);
    let frame = body_frame(params.rotation);
    let bend_v = random_walk(&mut rng, 0.12 * params.deform);
    let bend_w = random_walk(&mut rng, 0.12 * params.deform);
    let radius = random_walk(&mut rng, 0.06 * params.deform);
    let [a, b, c] = params.semi_axes;
    let mut mask = Mask3D::filled([n, n, n], 0);
    let tube_segments: Vec<([f64; 3], [f64; 3], f64)> = params
        .tubes
        .iter()
        .map(|t| {
            // surface point of the undeformed ellipsoid along the direction
            let local = [dot(t.direction, frame[0]) / a, dot(t.direction, frame[1]) / b, dot(t.direction, frame[2]) / c];
            let reach = 1.0 / norm(local).max(1e-9);
            let start: [f64; 3] = std::array::from_fn(|k| params.center[k] + 0.5 * reach * t.direction[k]);
            let end: [f64; 3] = std::array::from_fn(|k| params.center[k] + (reach + t.length) * t.direction[k]);
            (start, end, t.radius)
        })
        .collect();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [z as f64, y as f64, x as f64];
                let d = [p[0] - params.center[0], p[1] - params.center[1], p[2] - params.center[2]];
                let u = dot(d, frame[0]) / a;
                let v = dot(d, frame[1]) / b - bend_v.at(u);
                let w = dot(d, frame[2]) / c - bend_w.at(u);
                let rf = 1.0 + radius.at(u);
                let inside = u * u + (v * v + w * w) / (rf * rf) <= 1.0
                    || tube_segments.iter().any(|&(s, e, r)| segment_distance(p, s, e) <= r);
                if inside {
                    mask.set([z, y, x], 1);
                }
            }
        }
    }
    largest_component(&mask)
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(ap, ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
    norm(q)
}

/// Labels 6-connected foreground components; returns the label volume and
/// the component sizes (label `k + 1` has size `sizes[k]`).
pub fn label_components(mask: &Mask3D) -> (Vec<u32>, Vec<usize>) {
    let [d, h, w] = mask.dims();
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if mask.data()[j] != 0 && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest 6-connected component (the first on ties).
pub fn largest_component(mask: &Mask3D) -> Mask3D {
    let (labels, sizes) = label_components(mask);
    let Some(best) = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k as u32 + 1)
    else {
        return mask.clone();
    };
    let data = labels.iter().map(|&l| u8::from(l == best)).collect();
    mask.with_data(data).expect("same geometry")
}

/// Low-frequency intensity field: a few random plane waves.
fn texture_field(n: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * std::f64::consts::TAU / n as f64 * 2.0);
            (k, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut out = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [z as f64, y as f64, x as f64];
                let v: f64 = waves.iter().map(|(k, phase)| (dot(*k, p) + phase).cos()).sum::<f64>() / 3.0;
                out.push((amplitude * v) as f32);
            }
        }
    }
    out
}

/// Builds a phantom; errors when the shape's foreground fraction falls
/// outside `[2%, 20%]`.
pub fn generate_phantom(seed: u64, params: &PhantomParams) -> Result<PhantomSample> {
    params.validate()?;
    let mask = rasterize(params, seed);
    let fraction = mask.foreground_fraction();
    if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fraction) {
        return Err(Error::Dataset(format!(
            "foreground fraction {:.4} outside [{MIN_FOREGROUND}, {MAX_FOREGROUND}]",
            fraction
        )));
    }
    let n = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_57e0);
    let texture = texture_field(n, params.texture, &mut rng);
    let c = n as f64 / 2.0 - 0.5;
    let mut data = Vec::with_capacity(mask.len());
    for (i, (&m, &t)) in mask.data().iter().zip(&texture).enumerate() {
        let (y, x) = (((i / n) % n) as f64, (i % n) as f64);
        let in_body = (y - c).hypot(x - c) <= params.body_radius;
        let in_vessel = params
            .vessel
            .is_some_and(|([vy, vx], r)| (y - vy).hypot(x - vx) <= r);
        let base = if m != 0 {
            params.foreground_mean
        } else if in_vessel {
            params.vessel_mean
        } else if in_body {
            params.background_mean
        } else {
            params.air_mean
        };
        data.push((base as f32 + t).max(0.0));
    }
    let clean = mask.with_data(data)?;
    let noise_seed = rng.gen();
    let noisy = rician_raw(&clean, params.noise_sigma, noise_seed);
    Ok(PhantomSample {
        volume: noisy.normalize_slices(),
        mask,
        seed,
        params: params.clone(),
    })
}

/// [`PhantomParams::sample`] followed by [`generate_phantom`].
pub fn random_phantom(seed: u64, size: usize) -> Result<PhantomSample> {
    generate_phantom(seed, &PhantomParams::sample(seed, size))
}
