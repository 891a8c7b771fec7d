//! Segmentation samples, the synthetic Non-IID federation, the real-data
//! preprocessing transforms and the leave-one-client-out protocol.

mod corpus;
mod partition;
mod preprocess;
mod synth;

pub use corpus::{read_client, write_client, CorpusHeader, SampleMeta};
pub use partition::{partition_leave_one_out, Split, DEFAULT_VAL_RATIO};
pub use preprocess::{downsample_nearest, percentile_normalize, rgb_normalize, slice_volume, upper_percentile};
pub use synth::{
    generate_federation, generate_federation_with_shapes, pretraining_corpus, rasterize_mask, ClientProfile,
    FederationSpec, GeneratedSample, Geometry, Modality, Shape, ShapeFamily,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its per-class ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// Unique within a federation, e.g. `"c2/017"`.
    pub id: String,
    /// `[input × input × 3]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[mask × mask × classes]`, entries in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub volume_id: Option<String>,
    pub client_id: u32,
}

impl SegSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.rank() != 3 || self.image.shape()[2] != 3 {
            return Err(Error::Data(format!("sample {}: image must be h×w×3", self.id)));
        }
        if self.mask.rank() != 3 {
            return Err(Error::Data(format!("sample {}: mask must be h×w×c", self.id)));
        }
        if self.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data(format!("sample {}: image outside [0, 1]", self.id)));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }
}

/// All samples held by one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub name: String,
    pub samples: Vec<SegSample>,
}

impl ClientDataset {
    pub fn new(client_id: u32, name: impl Into<String>, samples: Vec<SegSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data(format!("client {client_id} has no samples")));
        }
        Ok(Self {
            client_id,
            name: name.into(),
            samples,
        })
    }

    /// N_k^(local), the FedAvg weight of this client.
    pub fn n_local(&self) -> usize {
        self.samples.len()
    }

    /// Mean pixel intensity of each image.
    pub fn image_means(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| s.image.data().iter().map(|&v| v as f64).sum::<f64>() / s.image.len() as f64)
            .collect()
    }
}
