//! 3D scalar fields, orthogonal-view reslicing, per-slice smoothing and the
//! multi-view aggregation.
//!
//! Canonical storage order is `(z, y, x)`. A grid resliced to a view keeps
//! the slice index on its first axis:
//!
//! | view     | axes        |
//! |----------|-------------|
//! | axial    | `(z, y, x)` |
//! | coronal  | `(y, z, x)` |
//! | sagittal | `(x, z, y)` |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewAxis {
    Axial,
    Coronal,
    Sagittal,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal];

    /// Canonical axis (0 = z, 1 = y, 2 = x) stored on each axis of this view.
    pub fn axes(self) -> [usize; 3] {
        match self {
            ViewAxis::Axial => [0, 1, 2],
            ViewAxis::Coronal => [1, 0, 2],
            ViewAxis::Sagittal => [2, 0, 1],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewAxis::Axial => "axial",
            ViewAxis::Coronal => "coronal",
            ViewAxis::Sagittal => "sagittal",
        }
    }

    pub fn letter(self) -> char {
        match self {
            ViewAxis::Axial => 'A',
            ViewAxis::Coronal => 'C',
            ViewAxis::Sagittal => 'S',
        }
    }
}

impl fmt::Display for ViewAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ViewAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(ViewAxis::Axial),
            "coronal" => Ok(ViewAxis::Coronal),
            "sagittal" => Ok(ViewAxis::Sagittal),
            other => Err(Error::Config(format!("unknown view {other:?}"))),
        }
    }
}

/// Dense 3D grid stored in the axis order of `orientation`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<V> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<V>,
    orientation: ViewAxis,
    /// Global value range, recorded by [`Volume3D::normalize_slices`].
    pub intensity_range: Option<[f32; 2]>,
}

pub type Volume3D = Grid3<f32>;
pub type Mask3D = Grid3<u8>;

impl<V: Copy + Default> Grid3<V> {
    /// A canonical-order (axial) grid.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<V>) -> Result<Self> {
        Self::with_orientation(dims, spacing, data, ViewAxis::Axial)
    }

    pub fn with_orientation(dims: [usize; 3], spacing: [f64; 3], data: Vec<V>, orientation: ViewAxis) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Geometry(format!(
                "dims {dims:?} do not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            orientation,
            intensity_range: None,
        })
    }

    pub fn filled(dims: [usize; 3], value: V) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.iter().product()],
            orientation: ViewAxis::Axial,
            intensity_range: None,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn orientation(&self) -> ViewAxis {
        self.orientation
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<V> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    /// Number of slices along the first axis.
    pub fn n_slices(&self) -> usize {
        self.dims[0]
    }

    pub fn slice(&self, i: usize) -> &[V] {
        let n = self.slice_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut [V] {
        let n = self.slice_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, idx: [usize; 3]) -> V {
        self.data[(idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]]
    }

    pub fn set(&mut self, idx: [usize; 3], v: V) {
        let i = (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2];
        self.data[i] = v;
    }

    /// Same geometry and orientation, new values.
    pub fn with_data<U: Copy + Default>(&self, data: Vec<U>) -> Result<Grid3<U>> {
        let mut g = Grid3::with_orientation(self.dims, self.spacing, data, self.orientation)?;
        g.intensity_range = None;
        Ok(g)
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(V) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
            orientation: self.orientation,
            intensity_range: None,
        }
    }

    /// Pure axis permutation into `to_view`. No resampling happens, so
    /// reslicing back is bit-exact.
    pub fn reslice(&self, to_view: ViewAxis) -> Self {
        if to_view == self.orientation {
            return self.clone();
        }
        let from = self.orientation.axes();
        let to = to_view.axes();
        // canonical extent and stride of each canonical axis in the source
        let mut canon_dims = [0; 3];
        let mut canon_stride = [0; 3];
        let src_strides = [self.dims[1] * self.dims[2], self.dims[2], 1];
        let mut canon_spacing = [0.0; 3];
        for k in 0..3 {
            canon_dims[from[k]] = self.dims[k];
            canon_stride[from[k]] = src_strides[k];
            canon_spacing[from[k]] = self.spacing[k];
        }
        let dims = to.map(|a| canon_dims[a]);
        let strides = to.map(|a| canon_stride[a]);
        let spacing = to.map(|a| canon_spacing[a]);
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                let base = i * strides[0] + j * strides[1];
                for k in 0..dims[2] {
                    data.push(self.data[base + k * strides[2]]);
                }
            }
        }
        Self {
            dims,
            spacing,
            data,
            orientation: to_view,
            intensity_range: self.intensity_range,
        }
    }

    /// In-plane crop to `size x size` around the slice centre.
    pub fn center_crop(&self, size: usize) -> Result<Self> {
        let [d, h, w] = self.dims;
        if size > h || size > w || size == 0 {
            return Err(Error::Geometry(format!(
                "crop size {size} does not fit slices of {h}x{w}"
            )));
        }
        let (y0, x0) = ((h - size) / 2, (w - size) / 2);
        let mut data = Vec::with_capacity(d * size * size);
        for s in 0..d {
            let sl = self.slice(s);
            for y in y0..y0 + size {
                data.extend_from_slice(&sl[y * w + x0..y * w + x0 + size]);
            }
        }
        Grid3::with_orientation([d, size, size], self.spacing, data, self.orientation)
    }

    /// Errors unless every dimension is a multiple of `factor`, which makes
    /// every view's slices divisible too.
    pub fn check_divisible(&self, factor: usize) -> Result<()> {
        for &dim in &self.dims {
            if dim % factor != 0 {
                return Err(Error::Indivisible { dim, factor });
            }
        }
        Ok(())
    }
}

impl Volume3D {
    /// Min-max scales every slice (first axis) into `[0, 1]`. Constant
    /// slices map to 0.
    pub fn normalize_slices(&self) -> Self {
        let mut out = self.clone();
        for s in 0..out.n_slices() {
            let sl = out.slice_mut(s);
            let (lo, hi) = sl
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if hi > lo {
                let range = hi - lo;
                sl.iter_mut().for_each(|v| *v = (*v - lo) / range);
            } else {
                sl.fill(0.0);
            }
        }
        let (lo, hi) = out
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        out.intensity_range = Some([lo, hi]);
        out
    }

    /// The standardizing map `G`: reslice into `standard_view`, then smooth
    /// every slice with the 5x5 Gaussian of [`gaussian_kernel`].
    pub fn standardize(&self, standard_view: ViewAxis) -> Self {
        let mut out = self.reslice(standard_view);
        let k = gaussian_kernel();
        let [d, h, w] = out.dims;
        let mut tmp = vec![0.0f32; h * w];
        for s in 0..d {
            smooth_slice(out.slice_mut(s), &mut tmp, h, w, &k);
        }
        out
    }

    /// Row-major flattening into a column vector.
    pub fn vectorize(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

impl Mask3D {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.len().max(1) as f64
    }
}

/// Radius of the smoothing kernel (5x5 support).
pub const SMOOTH_RADIUS: usize = 2;
pub const SMOOTH_SIGMA: f64 = 1.0;

/// Normalized 1D Gaussian taps for offsets `-2..=2`; the 2D kernel is
/// their outer product.
pub fn gaussian_kernel() -> [f32; 2 * SMOOTH_RADIUS + 1] {
    let mut k = [0.0f64; 2 * SMOOTH_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SMOOTH_RADIUS as f64;
        *v = (-x * x / (2.0 * SMOOTH_SIGMA * SMOOTH_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.map(|v| (v / total) as f32)
}

/// Half-sample symmetric reflection: `-1 -> 0`, `-2 -> 1`, `n -> n-1`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn smooth_slice(sl: &mut [f32], tmp: &mut [f32], h: usize, w: usize, k: &[f32; 5]) {
    let r = SMOOTH_RADIUS as isize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (t, &kv) in k.iter().enumerate() {
                let xx = reflect(x as isize + t as isize - r, w);
                acc += kv * sl[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (t, &kv) in k.iter().enumerate() {
                let yy = reflect(y as isize + t as isize - r, h);
                acc += kv * tmp[yy * w + x];
            }
            sl[y * w + x] = acc;
        }
    }
}

/// Mean of the three standardized per-view probability volumes.
pub fn aggregate(views: [&Volume3D; 3], standard_view: ViewAxis) -> Result<Volume3D> {
    let std: Vec<Volume3D> = views.iter().map(|v| v.standardize(standard_view)).collect();
    aggregate_standardized([&std[0], &std[1], &std[2]])
}

/// Mean of three volumes that are already in the same orientation.
pub fn aggregate_standardized(views: [&Volume3D; 3]) -> Result<Volume3D> {
    let first = views[0];
    for v in &views[1..] {
        if v.dims() != first.dims() || v.orientation() != first.orientation() {
            return Err(Error::Geometry(format!(
                "cannot aggregate {:?}/{} with {:?}/{}",
                first.dims(),
                first.orientation(),
                v.dims(),
                v.orientation()
            )));
        }
    }
    let data = (0..first.len())
        .map(|i| (views[0].data[i] + views[1].data[i] + views[2].data[i]) / 3.0)
        .collect();
    first.with_data(data)
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    order: String,
}

/// Voxel types that can be written to the raw payload.
pub trait Voxel: Copy + Default {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(b: &[u8]) -> Self;
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(b: &[u8]) -> Self {
        b[0]
    }
}

/// Raw payload path that accompanies a JSON sidecar.
pub fn payload_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("raw")
}

/// Writes `<stem>.json` and `<stem>.raw` in canonical `zyx` order.
pub fn write_grid<V: Voxel>(grid: &Grid3<V>, sidecar: &Path) -> Result<()> {
    let canonical = grid.reslice(ViewAxis::Axial);
    let meta = Sidecar {
        dims: canonical.dims,
        spacing: canonical.spacing,
        dtype: V::DTYPE.to_string(),
        order: "zyx".to_string(),
    };
    let json = serde_json::to_string(&meta).map_err(|e| Error::json(sidecar, e))?;
    if let Some(dir) = sidecar.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(sidecar, json).map_err(|e| Error::io(sidecar, e))?;
    let mut bytes = Vec::with_capacity(canonical.len() * V::BYTES);
    for &v in &canonical.data {
        v.write_le(&mut bytes);
    }
    let raw = payload_path(sidecar);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_grid<V: Voxel>(sidecar: &Path) -> Result<Grid3<V>> {
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(sidecar, e))?;
    if meta.dtype != V::DTYPE {
        return Err(Error::Format(format!(
            "{}: dtype {} where {} was expected",
            sidecar.display(),
            meta.dtype,
            V::DTYPE
        )));
    }
    if meta.order != "zyx" {
        return Err(Error::Format(format!("unsupported order {}", meta.order)));
    }
    let raw = payload_path(sidecar);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = meta.dims.iter().product();
    if bytes.len() != n * V::BYTES {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, dims need {}",
            raw.display(),
            bytes.len(),
            n * V::BYTES
        )));
    }
    let data = bytes.chunks_exact(V::BYTES).map(V::read_le).collect();
    Grid3::new(meta.dims, meta.spacing, data)
}

pub fn write_volume(v: &Volume3D, sidecar: &Path) -> Result<()> {
    write_grid(v, sidecar)
}

pub fn read_volume(sidecar: &Path) -> Result<Volume3D> {
    read_grid(sidecar)
}

pub fn write_mask(m: &Mask3D, sidecar: &Path) -> Result<()> {
    if m.data.iter().any(|&v| v > 1) {
        return Err(Error::Format("mask values must be 0 or 1".into()));
    }
    write_grid(m, sidecar)
}

pub fn read_mask(sidecar: &Path) -> Result<Mask3D> {
    let m: Mask3D = read_grid(sidecar)?;
    if m.data.iter().any(|&v| v > 1) {
        return Err(Error::Format(format!("{}: mask values must be 0 or 1", sidecar.display())));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume3D {
        let n = dims.iter().product();
        Volume3D::new(dims, [1.0, 2.0, 3.0], (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn reslice_round_trip_is_exact() {
        let v = ramp([4, 6, 8]);
        for view in ViewAxis::ALL {
            let r = v.reslice(view);
            assert_eq!(r.reslice(ViewAxis::Axial), v);
            for other in ViewAxis::ALL {
                assert_eq!(r.reslice(other).reslice(ViewAxis::Axial), v);
            }
        }
    }

    #[test]
    fn reslice_index_permutation() {
        let mut v = Volume3D::filled([2, 2, 2], 0.0);
        v.set([0, 1, 1], 1.0);
        let c = v.reslice(ViewAxis::Coronal);
        assert_eq!(c.get([1, 0, 1]), 1.0);
        assert_eq!(c.data().iter().filter(|&&x| x == 1.0).count(), 1);
    }

    #[test]
    fn reslice_shape_and_spacing() {
        let v = Volume3D::new([88, 64, 32], [2.7, 1.25, 1.0], vec![0.0; 88 * 64 * 32]).unwrap();
        let s = v.reslice(ViewAxis::Sagittal);
        assert_eq!(s.dims(), [32, 88, 64]);
        assert_eq!(s.spacing(), [1.0, 2.7, 1.25]);
        assert_eq!(v.reslice(ViewAxis::Coronal).dims(), [64, 88, 32]);
    }

    #[test]
    fn normalize_examples() {
        let v = Volume3D::new([2, 1, 3], [1.0; 3], vec![10.0, 20.0, 30.0, 4.0, 4.0, 4.0]).unwrap();
        let n = v.normalize_slices();
        assert_eq!(n.slice(0), &[0.0, 0.5, 1.0]);
        assert_eq!(n.slice(1), &[0.0, 0.0, 0.0]);
        let unit = Volume3D::new([1, 1, 3], [1.0; 3], vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(unit.normalize_slices().data(), unit.data());
    }

    #[test]
    fn crop_examples() {
        let v = ramp([1, 8, 8]);
        let c = v.center_crop(4).unwrap();
        assert_eq!(c.dims(), [1, 4, 4]);
        assert_eq!(c.get([0, 0, 0]), v.get([0, 2, 2]));
        assert_eq!(c.get([0, 3, 3]), v.get([0, 5, 5]));
        assert_eq!(v.center_crop(8).unwrap(), v);
        assert!(v.center_crop(9).is_err());
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(k[0], k[4]);
        assert_eq!(k[1], k[3]);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let v = Volume3D::filled([3, 7, 5], 0.625);
        for view in ViewAxis::ALL {
            let s = v.standardize(view);
            assert!(s.data().iter().all(|&x| (x - 0.625).abs() < 1e-6));
        }
    }

    #[test]
    fn impulse_gives_gaussian_stamp() {
        let mut v = Volume3D::filled([1, 9, 9], 0.0);
        v.set([0, 4, 4], 1.0);
        let s = v.standardize(ViewAxis::Axial);
        let total: f32 = s.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        // analytic stamp: g(dy) g(dx) with g(t) = exp(-t^2/2) / sum
        let norm: f64 = (-2..=2).map(|t: i32| (-(t * t) as f64 / 2.0).exp()).sum();
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let g = |t: i32| (-(t * t) as f64 / 2.0).exp() / norm;
                let expected = g(dy) * g(dx);
                let got = s.get([0, (4 + dy) as usize, (4 + dx) as usize]) as f64;
                assert!((got - expected).abs() < 1e-6);
            }
        }
        assert_eq!(s.get([0, 0, 0]), 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let one = Volume3D::filled([4, 4, 4], 1.0);
        let zero = Volume3D::filled([4, 4, 4], 0.0);
        let agg = aggregate(
            [&one, &zero.reslice(ViewAxis::Coronal), &zero.reslice(ViewAxis::Sagittal)],
            ViewAxis::Axial,
        )
        .unwrap();
        assert!(agg.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
        let c = Volume3D::filled([4, 4, 4], 0.4);
        let agg = aggregate([&c, &c, &c], ViewAxis::Sagittal).unwrap();
        assert_eq!(agg.orientation(), ViewAxis::Sagittal);
        assert!(agg.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        let other = Volume3D::filled([4, 4, 8], 0.4);
        assert!(aggregate([&c, &c, &other], ViewAxis::Axial).is_err());
    }

    #[test]
    fn vectorize_is_row_major() {
        let v = ramp([2, 2, 2]);
        assert_eq!(v.vectorize(), (0..8).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn file_round_trip_and_sidecar_format() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp([2, 3, 4]).reslice(ViewAxis::Sagittal);
        let path = dir.path().join("vol.json");
        write_volume(&v, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            r#"{"dims":[2,3,4],"spacing":[1.0,2.0,3.0],"dtype":"f32","order":"zyx"}"#
        );
        assert_eq!(fs::read(payload_path(&path)).unwrap().len(), 24 * 4);
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v.reslice(ViewAxis::Axial));

        let m = Mask3D::new([1, 2, 2], [1.0; 3], vec![0, 1, 1, 0]).unwrap();
        let mp = dir.path().join("mask.json");
        write_mask(&m, &mp).unwrap();
        assert_eq!(read_mask(&mp).unwrap(), m);
        assert!(read_volume(&mp).is_err());
    }
}
