//! One-file-per-client corpus format: `FFMC`, a little-endian u32 header
//! length, a JSON header, then each sample's image and mask as raw
//! little-endian f32 blocks in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, ClientProfile, SegSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FFMC";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub volume_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format_version: u32,
    pub client_id: u32,
    pub name: String,
    pub input_size: usize,
    pub mask_size: usize,
    pub num_classes: usize,
    /// Generative parameters the client was drawn from, when synthetic.
    pub profile: Option<ClientProfile>,
    pub seed: Option<u64>,
    pub samples: Vec<SampleMeta>,
}

pub fn write_client(
    path: &Path,
    dataset: &ClientDataset,
    profile: Option<&ClientProfile>,
    seed: Option<u64>,
) -> Result<()> {
    let first = &dataset.samples[0];
    let (input_size, mask_size, num_classes) = (first.image.shape()[0], first.mask.shape()[0], first.mask.shape()[2]);
    let header = CorpusHeader {
        format_version: FORMAT_VERSION,
        client_id: dataset.client_id,
        name: dataset.name.clone(),
        input_size,
        mask_size,
        num_classes,
        profile: profile.cloned(),
        seed,
        samples: dataset
            .samples
            .iter()
            .map(|s| SampleMeta {
                id: s.id.clone(),
                volume_id: s.volume_id.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("corpus header: {e}")))?;
    let per_sample = 4 * (input_size * input_size * 3 + mask_size * mask_size * num_classes);
    let mut buf = Vec::with_capacity(8 + json.len() + per_sample * dataset.samples.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in &dataset.samples {
        if s.image.shape() != [input_size, input_size, 3] || s.mask.shape() != [mask_size, mask_size, num_classes] {
            return Err(Error::Data(format!("sample {} has a different geometry from the first", s.id)));
        }
        for v in s.image.data().iter().chain(s.mask.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, path: &Path) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Data(format!("{}: truncated corpus file", path.display())))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

fn floats(raw: &[u8]) -> Vec<f32> {
    raw.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn read_client(path: &Path) -> Result<(CorpusHeader, ClientDataset)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut at = 0;
    if take(&bytes, &mut at, 4, path)? != MAGIC {
        return Err(Error::Data(format!("{}: not a corpus file", path.display())));
    }
    let len = u32::from_le_bytes(take(&bytes, &mut at, 4, path)?.try_into().expect("4 bytes")) as usize;
    let header: CorpusHeader = serde_json::from_slice(take(&bytes, &mut at, len, path)?)
        .map_err(|e| Error::Data(format!("{}: bad corpus header: {e}", path.display())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported corpus version {}",
            path.display(),
            header.format_version
        )));
    }
    let (is, ms, c) = (header.input_size, header.mask_size, header.num_classes);
    let mut samples = Vec::with_capacity(header.samples.len());
    for meta in &header.samples {
        let image = Tensor::new(vec![is, is, 3], floats(take(&bytes, &mut at, 4 * is * is * 3, path)?))?;
        let mask = Tensor::new(vec![ms, ms, c], floats(take(&bytes, &mut at, 4 * ms * ms * c, path)?))?;
        let sample = SegSample {
            id: meta.id.clone(),
            image,
            mask,
            volume_id: meta.volume_id.clone(),
            client_id: header.client_id,
        };
        sample.validate()?;
        samples.push(sample);
    }
    if at != bytes.len() {
        return Err(Error::Data(format!("{}: trailing bytes after corpus", path.display())));
    }
    let dataset = ClientDataset::new(header.client_id, header.name.clone(), samples)?;
    Ok((header, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_federation, FederationSpec};

    #[test]
    fn roundtrip_is_bitwise() {
        let spec = FederationSpec::synthetic(3, 32, 2, 11);
        let fed = generate_federation(&spec, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (c, p) in fed.iter().zip(&spec.clients) {
            let path = dir.path().join(format!("client{}.ffmc", c.client_id));
            write_client(&path, c, Some(p), Some(spec.seed)).unwrap();
            let (h, back) = read_client(&path).unwrap();
            assert_eq!(&back, c);
            assert_eq!(h.profile.as_ref(), Some(p));
        }
    }

    #[test]
    fn truncated_and_missing() {
        let fed = generate_federation(&FederationSpec::synthetic(1, 32, 2, 0), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ffmc");
        write_client(&path, &fed[0], None, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_client(&path), Err(Error::Data(_))));
        assert!(matches!(read_client(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
