//! IDX files as distributed with MNIST: big-endian `u32` magic and dimensions,
//! then a `u8` payload. Images (`0x00000803`) are scaled by 1/255.

use std::path::Path;

use softcbm_tensor::Tensor;

use crate::error::{CoreError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `[n, rows, cols]`, values in `[0, 1]`.
    Images(Tensor),
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| CoreError::Format {
            offset,
            detail: format!("truncated header: missing {what}"),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = be_u32(bytes, 0, "magic")?;
    let rank = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => {
            return Err(CoreError::Format {
                offset: 0,
                detail: format!("bad magic 0x{other:08x}"),
            })
        }
    };
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        dims.push(be_u32(bytes, 4 + 4 * d, "dimension")? as usize);
    }
    let start = 4 + 4 * rank;
    let numel: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < numel {
        return Err(CoreError::Format {
            offset: bytes.len(),
            detail: format!("truncated payload: expected {numel} bytes after offset {start}, found {}", payload.len()),
        });
    }
    let payload = &payload[..numel];
    Ok(match magic {
        IMAGES_MAGIC => IdxData::Images(Tensor::new(dims, payload.iter().map(|&b| f64::from(b) / 255.0).collect())?),
        _ => IdxData::Labels(payload.to_vec()),
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    parse_idx(&std::fs::read(path)?)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// MNIST images with per-digit index lists.
#[derive(Debug, Clone)]
pub struct MnistStore {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub by_digit: [Vec<usize>; 10],
}

impl MnistStore {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.rank() != 3 || images.rows() != labels.len() {
            return Err(CoreError::Data(format!("{:?} images for {} labels", images.shape(), labels.len())));
        }
        let mut by_digit: [Vec<usize>; 10] = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            let bucket = by_digit
                .get_mut(usize::from(l))
                .ok_or_else(|| CoreError::Data(format!("label {l} at {i} is not a digit")))?;
            bucket.push(i);
        }
        Ok(Self { images, labels, by_digit })
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let IdxData::Images(img) = load_idx(images)? else {
            return Err(CoreError::Data("image file holds labels".into()));
        };
        let IdxData::Labels(lab) = load_idx(labels)? else {
            return Err(CoreError::Data("label file holds images".into()));
        };
        Self::new(img, lab)
    }

    /// Loads `{prefix}-images-idx3-ubyte` and `{prefix}-labels-idx1-ubyte` from `dir`
    /// (`prefix` is `train` or `t10k` for the standard files).
    pub fn load_split(dir: impl AsRef<Path>, prefix: &str) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load(dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn image_len(&self) -> usize {
        self.images.row_len()
    }
}
