//! Tiny encoder-decoder segmentation network shared by the teacher and both
//! students, plus its binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamNodes, ParamVector, Segment, Tensor4};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DCF1";

/// Architecture of the reference network:
///
/// ```text
/// enc1 conv3x3(in->8)+relu ─┬─ pool ─ enc2 conv3x3(8->16)+relu ─ pool ─ enc3 conv3x3(16->16)+relu
///                           │        up2x ─ dec1 conv3x3(16->8)+relu ─ up2x ─┐
///                           └──────────────────────────── concat ───────────┘
///                                     dec2 conv3x3(16->8)+relu ─ head conv1x1(8->classes) ─ softmax
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TinySegSpec {
    pub input_channels: usize,
    pub class_count: usize,
}

impl Default for TinySegSpec {
    fn default() -> Self {
        Self {
            input_channels: 1,
            class_count: 2,
        }
    }
}

/// (name, c_out, c_in, kernel)
type ConvLayout = (&'static str, usize, usize, usize);

impl TinySegSpec {
    fn convs(&self) -> [ConvLayout; 6] {
        [
            ("enc1", 8, self.input_channels, 3),
            ("enc2", 16, 8, 3),
            ("enc3", 16, 16, 3),
            ("dec1", 8, 16, 3),
            ("dec2", 8, 16, 3),
            ("head", self.class_count, 8, 1),
        ]
    }

    /// Zero-valued parameter vector with the network's segment layout.
    pub fn zero_params(&self) -> ParamVector {
        let mut segments = Vec::new();
        for (name, c_out, c_in, k) in self.convs() {
            segments.push(Segment::zeros(format!("{name}.weight"), vec![c_out, c_in, k, k]));
            segments.push(Segment::zeros(format!("{name}.bias"), vec![c_out]));
        }
        ParamVector::new(segments)
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.zero_params();
        for (seg, (_, c_out, c_in, k)) in params.segments_mut().chunks_mut(2).zip(self.convs()) {
            let fan_in = (c_in * k * k) as f32;
            let fan_out = (c_out * k * k) as f32;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for w in seg[0].data.iter_mut() {
                *w = dist.sample(&mut rng);
            }
        }
        params
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        self.zero_params().check_structure(params, "segnet")
    }

    pub fn check_input(&self, input: &Tensor4) -> Result<()> {
        let [_, c, h, w] = input.dims();
        if c != self.input_channels {
            return Err(Error::shape(
                "segnet",
                format!("input has {c} channels, network expects {}", self.input_channels),
            ));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "segnet",
                format!("spatial dims {h}x{w} must be positive multiples of 4"),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `g`; returns the per-pixel class
    /// probabilities.
    pub fn forward_on(&self, g: &mut Graph, params: &ParamNodes, input: NodeId) -> Result<NodeId> {
        self.check_input(g.value(input)?)?;
        let ids = params.ids();
        if ids.len() != 12 {
            return Err(Error::shape("segnet", format!("{} parameter segments, expected 12", ids.len())));
        }
        let conv = |g: &mut Graph, x: NodeId, layer: usize, relu: bool| -> Result<NodeId> {
            let (w, b) = (ids[2 * layer], ids[2 * layer + 1]);
            let k = g.value(w)?.dims()[2];
            let y = g.conv2d(x, w, b, (k - 1) / 2)?;
            if relu {
                g.relu(y)
            } else {
                Ok(y)
            }
        };
        let e1 = conv(g, input, 0, true)?;
        let p1 = g.maxpool2x2(e1)?;
        let e2 = conv(g, p1, 1, true)?;
        let p2 = g.maxpool2x2(e2)?;
        let e3 = conv(g, p2, 2, true)?;
        let u1 = g.upsample_nearest2x(e3)?;
        let d1 = conv(g, u1, 3, true)?;
        let u2 = g.upsample_nearest2x(d1)?;
        let skip = g.concat_channels(u2, e1)?;
        let d2 = conv(g, skip, 4, true)?;
        let logits = conv(g, d2, 5, false)?;
        g.softmax_channels(logits)
    }

    /// Class probabilities for `input`. Without `record_tape` no backward
    /// state is created.
    pub fn forward(&self, params: &ParamVector, input: &Tensor4, record_tape: bool) -> Result<Tensor4> {
        self.check_params(params)?;
        let mut g = if record_tape { Graph::new() } else { Graph::inference() };
        let nodes = g.params(params)?;
        let x = g.constant(input.clone())?;
        let out = self.forward_on(&mut g, &nodes, x)?;
        Ok(g.value(out)?.clone())
    }
}

pub fn encode_checkpoint(params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.total_len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for seg in params.segments() {
        out.extend_from_slice(&(seg.name.len() as u32).to_le_bytes());
        out.extend_from_slice(seg.name.as_bytes());
        out.extend_from_slice(&(seg.dims.len() as u32).to_le_bytes());
        for &d in &seg.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &seg.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamVector> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, expected DCF1".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let mut segments = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(name_len, "segment name")?)
            .map_err(|_| Error::Checkpoint("segment name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32("dim count")?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("segment {name} has {rank} dims")));
        }
        let dims = (0..rank).map(|_| cur.u32("dims")).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let raw = cur.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("segment too large".into()))?, "data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        segments.push(Segment::new(name, dims, data)?);
    }
    Ok(ParamVector::new(segments))
}

pub fn save_checkpoint(params: &ParamVector, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
