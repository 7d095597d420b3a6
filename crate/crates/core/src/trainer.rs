//! Four-phase training: the encoder against the mean loss of all three
//! decoders with the decoders frozen, then each decoder in turn with
//! everything else frozen.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tms_autograd::{Adam, AdamConfig, Tape, Tensor};

use crate::error::{Error, Result};
use crate::model::{TmsNet, Variant};
use crate::quality::dice;
use crate::segment::{segment_volume, DEFAULT_BATCH};
use crate::volume::{Mask3D, ViewAxis, Volume3D};

/// Slices next to the labelled extent that are never sampled.
pub const EXCLUDED_NEIGHBOURS: usize = 5;
/// Sampling interval for slices outside the labelled extent.
pub const NON_LA_INTERVAL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Maximum shift per axis, in pixels.
    pub translate: f64,
    /// Maximum rotation, in degrees.
    pub rotate: f64,
    pub scale: [f64; 2],
    /// Maximum shear angle per axis, in degrees.
    pub shear: f64,
    pub contrast: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            translate: 30.0,
            rotate: 45.0,
            scale: [0.8, 1.2],
            shear: 10.0,
            contrast: [0.8, 1.2],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.translate >= 0.0
            && self.rotate >= 0.0
            && self.shear >= 0.0
            && self.shear < 90.0
            && self.scale[0] > 0.0
            && self.scale[0] <= self.scale[1]
            && self.contrast[0] >= 0.0
            && self.contrast[0] <= self.contrast[1];
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation ranges {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_decay: 0.9,
            weight_decay: 1e-3,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.weight_decay >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "lr {}, decay {}, weight decay {}, batch {}",
                self.lr, self.lr_decay, self.weight_decay, self.batch_size
            )));
        }
        self.augment.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr, self.lr_decay, epoch)
    }
}

/// `lr0 * decay^epoch`.
pub fn lr_schedule(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Indices of the slices used for training, given which slices contain
/// foreground. Every slice between the first and last labelled slice is
/// kept; outside that extent the five nearest slices are skipped and every
/// fifth slice after them is kept. Without foreground every fifth slice is
/// kept.
pub fn select_slices(labelled: &[bool]) -> Vec<usize> {
    let first = labelled.iter().position(|&l| l);
    let last = labelled.iter().rposition(|&l| l);
    let (Some(first), Some(last)) = (first, last) else {
        return (0..labelled.len()).step_by(NON_LA_INTERVAL).collect();
    };
    let keep_far = |d: usize| d > EXCLUDED_NEIGHBOURS && (d - EXCLUDED_NEIGHBOURS - 1) % NON_LA_INTERVAL == 0;
    (0..labelled.len())
        .filter(|&i| {
            if i < first {
                keep_far(first - i)
            } else if i > last {
                keep_far(i - last)
            } else {
                true
            }
        })
        .collect()
}

/// Training slices of one view, stored contiguously.
#[derive(Clone, Debug, Default)]
pub struct SliceSet {
    pub h: usize,
    pub w: usize,
    pub images: Vec<f32>,
    pub masks: Vec<u8>,
}

impl SliceSet {
    pub fn len(&self) -> usize {
        if self.h * self.w == 0 {
            0
        } else {
            self.images.len() / (self.h * self.w)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        let n = self.h * self.w;
        &self.masks[i * n..(i + 1) * n]
    }
}

/// Per-view slice sets drawn from training volumes.
#[derive(Clone, Debug, Default)]
pub struct SliceDataset {
    pub views: [SliceSet; 3],
}

impl SliceDataset {
    pub fn from_volumes(samples: &[(Volume3D, Mask3D)]) -> Result<Self> {
        let mut ds = SliceDataset::default();
        for (v, m) in samples {
            if v.dims() != m.dims() || v.orientation() != m.orientation() {
                return Err(Error::Dataset(format!(
                    "volume {:?} and mask {:?} differ",
                    v.dims(),
                    m.dims()
                )));
            }
            for view in ViewAxis::ALL {
                let vv = v.reslice(view);
                let mm = m.reslice(view);
                let [d, h, w] = vv.dims();
                let set = &mut ds.views[view.index()];
                if set.images.is_empty() {
                    set.h = h;
                    set.w = w;
                } else if (set.h, set.w) != (h, w) {
                    return Err(Error::Dataset(format!(
                        "{view} slices of {h}x{w} mixed with {}x{}",
                        set.h, set.w
                    )));
                }
                let labelled: Vec<bool> = (0..d).map(|i| mm.slice(i).iter().any(|&b| b != 0)).collect();
                for i in select_slices(&labelled) {
                    set.images.extend_from_slice(vv.slice(i));
                    set.masks.extend_from_slice(mm.slice(i));
                }
            }
        }
        if ds.views.iter().any(SliceSet::is_empty) {
            return Err(Error::Dataset("no training slices".into()));
        }
        Ok(ds)
    }
}

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Shift `(dx, dy)` in pixels.
    pub translate: [f64; 2],
    /// Degrees, counter-clockwise in `(x, y)` image coordinates.
    pub rotate: f64,
    pub scale: f64,
    /// Shear angles `(x, y)` in degrees.
    pub shear: [f64; 2],
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            translate: [0.0, 0.0],
            rotate: 0.0,
            scale: 1.0,
            shear: [0.0, 0.0],
            contrast: 1.0,
        }
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let range = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        Self {
            translate: [sym(rng, cfg.translate), sym(rng, cfg.translate)],
            rotate: sym(rng, cfg.rotate),
            scale: range(rng, cfg.scale),
            shear: [sym(rng, cfg.shear), sym(rng, cfg.shear)],
            contrast: range(rng, cfg.contrast),
        }
    }

    /// Forward linear part `R * s * K` about the slice centre.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (sin, cos) = self.rotate.to_radians().sin_cos();
        let kx = self.shear[0].to_radians().tan();
        let ky = self.shear[1].to_radians().tan();
        let s = self.scale;
        // K = [[1, kx], [ky, 1]]
        [
            [s * (cos - sin * ky), s * (cos * kx - sin)],
            [s * (sin + cos * ky), s * (sin * kx + cos)],
        ]
    }
}

/// Applies one affine draw to an image/mask pair: bilinear sampling for the
/// image, nearest neighbour for the mask, zero outside the slice; then the
/// contrast factor about the image mean, clamped to `[0, 1]`.
pub fn augment(image: &[f32], mask: &[u8], h: usize, w: usize, p: &AugmentParams) -> (Vec<f32>, Vec<u8>) {
    let m = p.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out_img = vec![0.0f32; h * w];
    let mut out_mask = vec![0u8; h * w];
    let pixel = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            image[y as usize * w + x as usize] as f64
        }
    };
    for yo in 0..h {
        for xo in 0..w {
            let dx = xo as f64 - cx - p.translate[0];
            let dy = yo as f64 - cy - p.translate[1];
            let xs = inv[0][0] * dx + inv[0][1] * dy + cx;
            let ys = inv[1][0] * dx + inv[1][1] * dy + cy;
            let (xr, yr) = (xs.round(), ys.round());
            if xr >= 0.0 && yr >= 0.0 && xr < w as f64 && yr < h as f64 {
                out_mask[yo * w + xo] = mask[yr as usize * w + xr as usize];
            }
            let (x0, y0) = (xs.floor(), ys.floor());
            let (fx, fy) = (xs - x0, ys - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * pixel(x0, y0) + fx * pixel(x0 + 1, y0))
                + fy * ((1.0 - fx) * pixel(x0, y0 + 1) + fx * pixel(x0 + 1, y0 + 1));
            out_img[yo * w + xo] = v as f32;
        }
    }
    if p.contrast != 1.0 {
        let mean = out_img.iter().map(|&v| v as f64).sum::<f64>() / out_img.len().max(1) as f64;
        for v in &mut out_img {
            *v = ((*v as f64) * p.contrast + mean * (1.0 - p.contrast)).clamp(0.0, 1.0) as f32;
        }
    }
    (out_img, out_mask)
}

/// The four steps of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Encoder,
    Decoder(ViewAxis),
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Encoder,
        Phase::Decoder(ViewAxis::Axial),
        Phase::Decoder(ViewAxis::Coronal),
        Phase::Decoder(ViewAxis::Sagittal),
    ];
}

/// Freezes every parameter except those trained in `phase`.
pub fn freeze_for(net: &mut TmsNet<f32>, phase: Phase) {
    let trainable = match phase {
        Phase::Encoder => net.encoder_params(),
        Phase::Decoder(v) => net.decoder_params(v).to_vec(),
    };
    let store = net.store_mut();
    store.freeze_all(true);
    for id in trainable {
        store.set_frozen(id, false);
    }
}

fn batch_tensors(set: &SliceSet, idx: &[usize], aug: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (set.h, set.w);
    let mut x = Vec::with_capacity(idx.len() * h * w);
    let mut y = Vec::with_capacity(idx.len() * h * w);
    for &i in idx {
        if aug.enabled {
            let p = AugmentParams::sample(aug, rng);
            let (img, m) = augment(set.image(i), set.mask(i), h, w, &p);
            x.extend(img);
            y.extend(m.into_iter().map(f32::from));
        } else {
            x.extend_from_slice(set.image(i));
            y.extend(set.mask(i).iter().map(|&b| f32::from(b)));
        }
    }
    Ok((
        Tensor::new(vec![idx.len(), 1, h, w], x)?,
        Tensor::new(vec![idx.len(), 1, h, w], y)?,
    ))
}

/// Mean BCE of a view's decoder on one batch, recorded on `tape`.
pub fn loss_decoder(
    tape: &mut Tape<f32>,
    net: &TmsNet<f32>,
    view: ViewAxis,
    x: Tensor<f32>,
    y: &Tensor<f32>,
) -> Result<tms_autograd::Var> {
    let xv = tape.input(x, false)?;
    let p = net.forward(tape, view, xv)?;
    Ok(tape.bce_loss(p, y)?)
}

/// Runs one phase over the dataset and returns its mean loss.
pub fn train_phase(
    net: &mut TmsNet<f32>,
    adam: &mut Adam<f32>,
    data: &SliceDataset,
    phase: Phase,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    freeze_for(net, phase);
    let bs = cfg.batch_size;
    let orders: Vec<Vec<usize>> = data
        .views
        .iter()
        .map(|set| {
            let mut o: Vec<usize> = (0..set.len()).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    let views: Vec<ViewAxis> = match phase {
        Phase::Encoder => ViewAxis::ALL.to_vec(),
        Phase::Decoder(v) => vec![v],
    };
    let steps = views
        .iter()
        .map(|v| data.views[v.index()].len().div_ceil(bs))
        .max()
        .unwrap_or(0);
    if steps == 0 {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut total = 0.0;
    for step in 0..steps {
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(views.len());
        for &view in &views {
            let set = &data.views[view.index()];
            let order = &orders[view.index()];
            let start = step * bs;
            let idx: Vec<usize> = if start < order.len() {
                order[start..(start + bs).min(order.len())].to_vec()
            } else {
                // shorter views cycle so every step sees one batch per view
                (start..start + bs.min(order.len())).map(|k| order[k % order.len()]).collect()
            };
            let (x, y) = batch_tensors(set, &idx, &cfg.augment, rng)?;
            losses.push(loss_decoder(&mut tape, net, view, x, &y)?);
        }
        let loss = match (phase, net.variant()) {
            (Phase::Decoder(_), _) => losses[0],
            (Phase::Encoder, Variant::Shared) => {
                let s = sum_vars(&mut tape, &losses)?;
                tape.mul_scalar(s, 1.0 / losses.len() as f32)?
            }
            // each encoder only sees its own view's loss
            (Phase::Encoder, Variant::Independent3) => sum_vars(&mut tape, &losses)?,
        };
        let report = match (phase, net.variant()) {
            (Phase::Encoder, Variant::Independent3) => tape.value(loss).data()[0] as f64 / losses.len() as f64,
            _ => tape.value(loss).data()[0] as f64,
        };
        total += report;
        let grads = tape.backward(loss)?;
        let store = net.store_mut();
        store.accumulate(&grads)?;
        adam.step(store, lr)?;
    }
    net.store_mut().freeze_all(false);
    Ok(total / steps as f64)
}

fn sum_vars(tape: &mut Tape<f32>, vars: &[tms_autograd::Var]) -> Result<tms_autograd::Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean losses of the encoder, axial, coronal and sagittal phases.
    pub phase_losses: [f64; 4],
    /// Mean Dice of the Otsu-thresholded aggregated output on validation
    /// volumes.
    pub val_dice: Option<f64>,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,encoder_loss,axial_loss,coronal_loss,sagittal_loss,val_dice,lr";

impl EpochReport {
    pub fn csv_row(&self) -> String {
        let [e, a, c, s] = self.phase_losses;
        let dice = self.val_dice.map(|d| format!("{d:.6}")).unwrap_or_default();
        format!("{},{e:.6},{a:.6},{c:.6},{s:.6},{dice},{:.6e}", self.epoch, self.lr)
    }
}

/// Mean aggregated Dice over labelled volumes.
pub fn mean_dice(net: &TmsNet<f32>, samples: &[(Volume3D, Mask3D)]) -> Result<f64> {
    let mut total = 0.0;
    for (v, m) in samples {
        let seg = segment_volume(net, v, DEFAULT_BATCH)?;
        total += dice(&seg.threshold().mask, &m.reslice(ViewAxis::Axial))?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Training state: optimizer moments survive across epochs.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: Adam<f32>,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        });
        Ok(Self { cfg, adam, epoch: 0 })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Generator for one epoch, derived from the run seed.
    pub fn epoch_rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.cfg.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&(self.epoch as u64).to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    pub fn train_epoch(
        &mut self,
        net: &mut TmsNet<f32>,
        data: &SliceDataset,
        val: &[(Volume3D, Mask3D)],
    ) -> Result<EpochReport> {
        let lr = self.cfg.lr_at(self.epoch);
        let mut rng = self.epoch_rng();
        let mut phase_losses = [0.0; 4];
        for (slot, phase) in phase_losses.iter_mut().zip(Phase::ALL) {
            *slot = train_phase(net, &mut self.adam, data, phase, &self.cfg, lr, &mut rng)?;
        }
        let val_dice = if val.is_empty() { None } else { Some(mean_dice(net, val)?) };
        let report = EpochReport {
            epoch: self.epoch,
            phase_losses,
            val_dice,
            lr,
        };
        self.epoch += 1;
        Ok(report)
    }

    /// Runs all configured epochs, appending one CSV row per epoch to `log`.
    pub fn fit(
        &mut self,
        net: &mut TmsNet<f32>,
        train: &[(Volume3D, Mask3D)],
        val: &[(Volume3D, Mask3D)],
        log: Option<&Path>,
    ) -> Result<Vec<EpochReport>> {
        let data = SliceDataset::from_volumes(train)?;
        if let Some(path) = log {
            fs::write(path, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        }
        let mut reports = Vec::with_capacity(self.cfg.epochs);
        while self.epoch < self.cfg.epochs {
            let r = self.train_epoch(net, &data, val)?;
            if let Some(path) = log {
                let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
                writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(path, e))?;
            }
            reports.push(r);
        }
        Ok(reports)
    }
}
