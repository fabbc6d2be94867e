//! Network container format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "QCFSNET\0"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     header length H in bytes, u32 little-endian
//! 16      H     UTF-8 JSON header
//! 16+H    …     weight blob: little-endian IEEE-754 f32 values
//! ```
//!
//! The header lists `input_shape` and `layers` in graph order. Every layer
//! record carries its `inputs` (`"input"` or `{"layer": i}`) and a `kind`
//! tag; tensors inside a record are `{"offset": o, "shape": [...]}`, where
//! `o` counts f32 elements from the start of the blob.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{BatchNormSpec, ConvGeometry, ConvSpec};
use crate::tensor::Tensor;

use super::{Activation, DetectHead, Layer, NetworkGraph, Node, Source};

pub const MAGIC: &[u8; 8] = b"QCFSNET\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobRef {
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LayerRecord {
    Conv {
        geometry: ConvGeometry,
        weights: BlobRef,
        bias: BlobRef,
    },
    Batchnorm {
        epsilon: f32,
        gamma: BlobRef,
        beta: BlobRef,
        running_mean: BlobRef,
        running_variance: BlobRef,
    },
    Activation {
        activation: Activation,
    },
    Avgpool {
        kernel: usize,
        stride: usize,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    Concat,
    DetectHead {
        head: DetectHead,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeRecord {
    inputs: Vec<Source>,
    #[serde(flatten)]
    layer: LayerRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    input_shape: [usize; 3],
    layers: Vec<NodeRecord>,
}

struct BlobWriter(Vec<f32>);

impl BlobWriter {
    fn put(&mut self, shape: &[usize], data: &[f32]) -> BlobRef {
        let offset = self.0.len();
        self.0.extend_from_slice(data);
        BlobRef {
            offset,
            shape: shape.to_vec(),
        }
    }
}

fn take(blob: &[f32], r: &BlobRef) -> Result<Tensor> {
    let len: usize = r.shape.iter().product();
    let end = r.offset.checked_add(len).filter(|&e| e <= blob.len()).ok_or_else(|| {
        Error::Format(format!("blob reference {r:?} exceeds blob of {} values", blob.len()))
    })?;
    Tensor::new(r.shape.clone(), blob[r.offset..end].to_vec())
}

fn take_vec(blob: &[f32], r: &BlobRef, channels: usize) -> Result<Vec<f32>> {
    let t = take(blob, r)?;
    if t.len() != channels {
        return Err(Error::Format(format!("expected {channels} values, found {}", t.len())));
    }
    Ok(t.into_data())
}

impl NetworkGraph<f32> {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut blob = BlobWriter(Vec::new());
        let layers = self
            .nodes()
            .iter()
            .map(|node| {
                let layer = match &node.layer {
                    Layer::Conv(c) => LayerRecord::Conv {
                        geometry: c.geometry(),
                        weights: blob.put(c.weights.shape(), c.weights.data()),
                        bias: blob.put(c.bias.shape(), c.bias.data()),
                    },
                    Layer::BatchNorm(b) => LayerRecord::Batchnorm {
                        epsilon: b.epsilon,
                        gamma: blob.put(&[b.channels()], &b.gamma),
                        beta: blob.put(&[b.channels()], &b.beta),
                        running_mean: blob.put(&[b.channels()], &b.running_mean),
                        running_variance: blob.put(&[b.channels()], &b.running_variance),
                    },
                    Layer::Activation(a) => LayerRecord::Activation { activation: *a },
                    Layer::AvgPool { kernel, stride } => LayerRecord::Avgpool {
                        kernel: *kernel,
                        stride: *stride,
                    },
                    Layer::MaxPool { kernel, stride } => LayerRecord::Maxpool {
                        kernel: *kernel,
                        stride: *stride,
                    },
                    Layer::Upsample { factor } => LayerRecord::UpsampleNearest { factor: *factor },
                    Layer::Concat => LayerRecord::Concat,
                    Layer::Detect(h) => LayerRecord::DetectHead { head: h.clone() },
                };
                NodeRecord {
                    inputs: node.inputs.clone(),
                    layer,
                }
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            input_shape: self.input_shape(),
            layers,
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&header_len.to_le_bytes())?;
        w.write_all(&header)?;
        let mut bytes = Vec::with_capacity(blob.0.len() * 4);
        for v in &blob.0 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut fixed = [0u8; 16];
        r.read_exact(&mut fixed)
            .map_err(|_| Error::Format("truncated preamble".into()))?;
        if &fixed[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(fixed[12..16].try_into().unwrap()) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format("blob length is not a multiple of 4".into()));
        }
        let blob: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();

        let nodes = header
            .layers
            .into_iter()
            .map(|rec| {
                let layer = match rec.layer {
                    LayerRecord::Conv { geometry, weights, bias } => {
                        Layer::Conv(ConvSpec::new(geometry, take(&blob, &weights)?, take(&blob, &bias)?)?)
                    }
                    LayerRecord::Batchnorm {
                        epsilon,
                        gamma,
                        beta,
                        running_mean,
                        running_variance,
                    } => {
                        let c = gamma.shape.iter().product();
                        Layer::BatchNorm(BatchNormSpec {
                            gamma: take_vec(&blob, &gamma, c)?,
                            beta: take_vec(&blob, &beta, c)?,
                            running_mean: take_vec(&blob, &running_mean, c)?,
                            running_variance: take_vec(&blob, &running_variance, c)?,
                            epsilon,
                        })
                    }
                    LayerRecord::Activation { activation } => Layer::Activation(activation),
                    LayerRecord::Avgpool { kernel, stride } => Layer::AvgPool { kernel, stride },
                    LayerRecord::Maxpool { kernel, stride } => Layer::MaxPool { kernel, stride },
                    LayerRecord::UpsampleNearest { factor } => Layer::Upsample { factor },
                    LayerRecord::Concat => Layer::Concat,
                    LayerRecord::DetectHead { head } => Layer::Detect(head),
                };
                Ok(Node::new(layer, rec.inputs))
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkGraph::new(header.input_shape, nodes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
