use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input-to-mask resolution ratio.
const MASK_STRIDE: usize = 4;

/// Nearest-rank 99th percentile of `values` (the cutoff for the top 1%).
pub fn upper_percentile(values: &[f32]) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::Data("percentile of an empty array".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    // rank = ceil(0.99 * n), in integers to avoid float rounding
    let rank = (99 * sorted.len()).div_ceil(100).max(1);
    Ok(sorted[rank - 1])
}

/// Clips the top 1% of intensities and maps `[min, p99]` linearly to `[0, 1]`.
///
/// The upper bound is the 99th percentile under the nearest-rank rule. A
/// constant input has no range and maps to all zeros.
pub fn percentile_normalize(values: &[f32]) -> Result<Vec<f32>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite intensity".into()));
    }
    let upper = upper_percentile(values)?;
    let lower = values.iter().copied().fold(f32::INFINITY, f32::min);
    if upper <= lower {
        return Ok(vec![0.0; values.len()]);
    }
    let range = upper - lower;
    Ok(values
        .iter()
        .map(|&v| ((v.min(upper) - lower) / range).clamp(0.0, 1.0))
        .collect())
}

/// Maps 8-bit intensities to `[0, 1]` by dividing by 255.
pub fn rgb_normalize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if let Some(v) = image.data().iter().find(|&&v| !(0.0..=255.0).contains(&v)) {
        return Err(Error::Data(format!("8-bit intensity {v} outside [0, 255]")));
    }
    let data = image.data().iter().map(|&v| v / 255.0).collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Nearest-neighbour downsampling of `[h × w × c]` labels by `stride`,
/// sampling input pixel `stride * i + stride / 2`.
pub fn downsample_nearest(labels: &Tensor<f32>, stride: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = match *labels.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::dim(format!("labels must be h×w×c, got {s:?}"))),
    };
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Data(format!("{h}×{w} labels not divisible by stride {stride}")));
    }
    let (oh, ow) = (h / stride, w / stride);
    let off = stride / 2;
    let src = labels.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            let base = ((i * stride + off) * w + (j * stride + off)) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Cuts an `[h × w × d]` volume (already in `[0, 1]`) with `[h × w × d × c]`
/// labels into `d` samples sharing `volume_id`, in slice order. Each slice is
/// replicated to three channels and its labels are downsampled to `h / 4`.
pub fn slice_volume(
    volume: &Tensor<f32>,
    masks: &Tensor<f32>,
    volume_id: &str,
    client_id: u32,
) -> Result<Vec<SegSample>> {
    let (h, w, d) = match *volume.shape() {
        [h, w, d] => (h, w, d),
        ref s => return Err(Error::Data(format!("volume must be h×w×d, got {s:?}"))),
    };
    let c = match *masks.shape() {
        [mh, mw, md, c] if (mh, mw) == (h, w) && md == d => c,
        [_, _, md, _] if md != d => {
            return Err(Error::Data(format!("mask depth {md} does not match volume depth {d}")))
        }
        ref s => return Err(Error::Data(format!("masks {s:?} do not match volume {h}×{w}×{d}"))),
    };
    let vol = volume.data();
    let lab = masks.data();
    (0..d)
        .map(|z| {
            let mut image = Vec::with_capacity(h * w * 3);
            let mut labels = Vec::with_capacity(h * w * c);
            for p in 0..h * w {
                let v = vol[p * d + z];
                image.extend_from_slice(&[v, v, v]);
                let base = (p * d + z) * c;
                labels.extend_from_slice(&lab[base..base + c]);
            }
            let labels = Tensor::new(vec![h, w, c], labels)?;
            Ok(SegSample {
                id: format!("{volume_id}/{z:03}"),
                image: Tensor::new(vec![h, w, 3], image)?,
                mask: downsample_nearest(&labels, MASK_STRIDE)?,
                volume_id: Some(volume_id.to_owned()),
                client_id,
            })
        })
        .collect()
}
