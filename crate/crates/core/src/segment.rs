//! Volume-level inference: per-view slice segmentation, standardization and
//! aggregation.

use tms_autograd::Tensor;

use crate::error::{Error, Result};
use crate::model::{TmsNet, INPUT_MULTIPLE};
use crate::quality::{consistency, otsu_threshold, ConsistencyReport, OtsuResult};
use crate::volume::{aggregate_standardized, ViewAxis, Volume3D};

/// Slices per inference batch.
pub const DEFAULT_BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct Segmentation {
    /// Decoder probabilities, each in its own view orientation, indexed by
    /// [`ViewAxis::index`].
    pub probs: [Volume3D; 3],
    /// The same volumes after reslicing to the standard view and smoothing.
    pub standardized: [Volume3D; 3],
    /// Mean of the standardized volumes, in the standard view.
    pub aggregated: Volume3D,
}

impl Segmentation {
    pub fn consistency(&self, tau: f64) -> Result<ConsistencyReport> {
        let [a, c, s] = &self.standardized;
        consistency(a, c, s, tau)
    }

    /// Otsu mask of the aggregated output, in canonical orientation.
    pub fn threshold(&self) -> OtsuResult {
        otsu_threshold(&self.aggregated.reslice(ViewAxis::Axial))
    }
}

/// Probability volume of one view, in that view's orientation.
pub fn segment_view(net: &TmsNet<f32>, v: &Volume3D, view: ViewAxis, batch: usize) -> Result<Volume3D> {
    let vv = v.reslice(view);
    let [d, h, w] = vv.dims();
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::Indivisible {
            dim: if h % INPUT_MULTIPLE != 0 { h } else { w },
            factor: INPUT_MULTIPLE,
        });
    }
    let len = h * w;
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(vv.len());
    let mut start = 0;
    while start < d {
        let n = batch.min(d - start);
        let x = Tensor::new(vec![n, 1, h, w], vv.data()[start * len..(start + n) * len].to_vec())?;
        out.extend_from_slice(net.predict(view, x)?.data());
        start += n;
    }
    vv.with_data(out)
}

/// Segments `v` from all three views and aggregates in the network's
/// standard view.
pub fn segment_volume(net: &TmsNet<f32>, v: &Volume3D, batch: usize) -> Result<Segmentation> {
    v.check_divisible(INPUT_MULTIPLE)?;
    let standard = net.config().standard_view;
    let probs = [
        segment_view(net, v, ViewAxis::Axial, batch)?,
        segment_view(net, v, ViewAxis::Coronal, batch)?,
        segment_view(net, v, ViewAxis::Sagittal, batch)?,
    ];
    let standardized = [
        probs[0].standardize(standard),
        probs[1].standardize(standard),
        probs[2].standardize(standard),
    ];
    let aggregated = aggregate_standardized([&standardized[0], &standardized[1], &standardized[2]])?;
    Ok(Segmentation {
        probs,
        standardized,
        aggregated,
    })
}
