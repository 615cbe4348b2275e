use crate::error::{Error, Result};

/// Dense rank-4 tensor laid out as (batch, channels, height, width), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Single-channel batch built from equally sized planes.
    pub fn from_planes(planes: &[&[f32]], height: usize, width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(planes.len() * height * width);
        for plane in planes {
            if plane.len() != height * width {
                return Err(Error::shape(
                    "tensor",
                    format!("plane of {} values in a {height}x{width} batch", plane.len()),
                ));
            }
            data.extend_from_slice(plane);
        }
        Self::new([planes.len(), 1, height, width], data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, ch, h, w] = self.dims;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    /// All channels of batch item `n`.
    pub fn item_slice(&self, n: usize) -> &[f32] {
        let stride = self.dims[1] * self.plane_len();
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.plane_len();
        let start = (n * self.dims[1] + c) * p;
        &self.data[start..start + p]
    }

    /// Copy of the batch items in `range`.
    pub fn select_items(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.dims[0] {
            return Err(Error::shape(
                "select_items",
                format!("items {start}..{} of {}", start + count, self.dims[0]),
            ));
        }
        let stride = self.dims[1] * self.plane_len();
        let data = self.data[start * stride..(start + count) * stride].to_vec();
        Ok(Self {
            dims: [count, self.dims[1], self.dims[2], self.dims[3]],
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Segment {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "segment",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            name: name.into(),
            dims,
            data,
        })
    }

    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self {
            name: name.into(),
            dims,
            data: vec![0.0; len],
        }
    }

    /// Dims right-aligned into rank 4, padded with leading ones.
    pub fn dims4(&self) -> [usize; 4] {
        let mut out = [1; 4];
        let offset = 4 - self.dims.len().min(4);
        for (slot, d) in out[offset..].iter_mut().zip(&self.dims) {
            *slot = *d;
        }
        out
    }
}

/// Flat ordered collection of every trainable tensor of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamVector {
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|s| Segment::zeros(s.name.clone(), s.dims.clone()))
                .collect(),
        }
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.name == b.name && a.dims == b.dims)
    }

    pub fn check_structure(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::shape(op, "parameter vectors differ in segment names or dims"))
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.segments.iter().flat_map(|s| s.data.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f32> + '_ {
        self.segments.iter_mut().flat_map(|s| s.data.iter_mut())
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f32::is_finite)
    }
}
