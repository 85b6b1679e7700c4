use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

const MAGIC: &[u8; 8] = b"MOASEDS\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row-major `side x side` grayscale pixels in `[0, 1]`.
    pub image: Vec<f64>,
    pub label: usize,
    /// True on shape pixels.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Images `start..end` stacked into a `b x side x side` tensor.
    pub fn batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let end = end.min(self.len());
        if start >= end {
            return Err(Error::shape(format!("empty batch {start}..{end}")));
        }
        let data = self.samples[start..end].iter().flat_map(|s| s.image.iter().copied()).collect();
        Tensor::new(&[end - start, self.side, self.side], data)
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            side: self.side,
            samples: self.samples[range].to_vec(),
        }
    }
}

/// Describes how a cached dataset was produced; a cache hit requires an
/// exact match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheHeader {
    pub side: usize,
    pub classes: Vec<String>,
    pub kind: Option<String>,
    pub severity: u8,
    pub seed: u64,
    pub count: usize,
}

pub fn write_dataset(path: &Path, header: &CacheHeader, data: &Dataset) -> Result<()> {
    let header_json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for s in &data.samples {
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(s.mask.iter().map(|&m| m as u8));
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("truncated dataset file".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn read_dataset(path: &Path) -> Result<(CacheHeader, Dataset)> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut bytes = raw.as_slice();
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Format(format!("{} is not a dataset file", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap()) as usize;
    let header: CacheHeader =
        serde_json::from_slice(take(&mut bytes, len)?).map_err(|e| Error::Format(e.to_string()))?;
    let pixels = header.side * header.side;
    let mut samples = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let label = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap()) as usize;
        let image = take(&mut bytes, 8 * pixels)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = take(&mut bytes, pixels)?.iter().map(|&b| b != 0).collect();
        samples.push(Sample { image, label, mask });
    }
    if !bytes.is_empty() {
        return Err(Error::Format("trailing bytes in dataset file".into()));
    }
    let side = header.side;
    Ok((header, Dataset { side, samples }))
}

/// Loads `path` when its header equals `header`, otherwise runs `make` and
/// writes the result there.
pub fn load_or_generate(path: &Path, header: &CacheHeader, make: impl FnOnce() -> Result<Dataset>) -> Result<Dataset> {
    if path.exists() {
        if let Ok((found, data)) = read_dataset(path) {
            if &found == header {
                return Ok(data);
            }
        }
    }
    let data = make()?;
    write_dataset(path, header, &data)?;
    Ok(data)
}
