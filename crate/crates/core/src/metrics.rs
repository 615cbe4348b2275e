//! Overlap and surface-distance metrics on binary masks.
//!
//! Surface pixels are mask pixels with at least one 4-neighbour outside the
//! mask; the image border counts as outside. Distances are Euclidean between
//! pixel centres. Nearest-surface distances come from an exact squared
//! Euclidean distance transform in integer arithmetic, so they agree bit for
//! bit with an all-pairs search.

use crate::autodiff::Tensor4;
use crate::error::{EmptySide, Error, Result};

/// Clamp applied inside the logarithm of the cross-entropy metric.
pub const CE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} mask with {} bits", bits.len()),
            ));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    /// Per-pixel argmax of item `n` of a class-probability tensor. Class 1 is
    /// foreground; ties resolve to the lower class index.
    pub fn harden(probs: &Tensor4, n: usize) -> Self {
        let [_, c, h, w] = probs.dims();
        let plane = h * w;
        let item = probs.item_slice(n);
        let bits = (0..plane)
            .map(|p| {
                let mut best = 0;
                for ch in 1..c {
                    if item[ch * plane + p] > item[best * plane + p] {
                        best = ch;
                    }
                }
                best == 1
            })
            .collect();
        Self { height: h, width: w, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Class labels as bytes (0 background, 1 foreground).
    pub fn labels(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    /// Coordinates of surface pixels in row-major order.
    pub fn surface(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let boundary = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if boundary {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn check_dims(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    (inter, na, nb)
}

/// 2|A∩B| / (|A|+|B|); two empty masks score 1.
pub fn dice_score(pred: &Mask, truth: &Mask) -> Result<f64> {
    check_dims("dice_score", pred, truth)?;
    let (inter, na, nb) = overlap(pred, truth);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// |A∩B| / |A∪B|; two empty masks score 1.
pub fn jaccard_score(pred: &Mask, truth: &Mask) -> Result<f64> {
    check_dims("jaccard_score", pred, truth)?;
    let (inter, na, nb) = overlap(pred, truth);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Nearest-rank percentile: element `ceil(q*n) - 1` of the sorted values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("percentile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Argument(format!("percentile fraction {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

fn nearest_rank(q: f64, n: usize) -> usize {
    // q*n carries representation error (0.95 is not exact); snap it first.
    let rank = (q * n as f64 - 1e-9).ceil();
    (rank.max(1.0) as usize).min(n)
}

const FAR: i64 = i64::MAX / 4;

/// Squared distance of every pixel to the nearest `true` pixel of `features`,
/// `FAR` when there are none.
fn squared_distance_transform(features: &[bool], h: usize, w: usize) -> Vec<i64> {
    let mut grid: Vec<i64> = features.iter().map(|&f| if f { 0 } else { FAR }).collect();
    let n = h.max(w);
    let mut line = vec![0i64; n];
    let mut out = vec![0i64; n];
    let mut scratch = EnvelopeScratch::new(n);
    for x in 0..w {
        for y in 0..h {
            line[y] = grid[y * w + x];
        }
        lower_envelope(&line[..h], &mut out[..h], &mut scratch);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        lower_envelope(&line[..w], &mut out[..w], &mut scratch);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

struct EnvelopeScratch {
    vertex: Vec<usize>,
    // Boundary between parabola k-1 and k as the fraction num/den, den > 0.
    bound: Vec<(i64, i64)>,
}

impl EnvelopeScratch {
    fn new(n: usize) -> Self {
        Self {
            vertex: vec![0; n],
            bound: vec![(0, 1); n + 1],
        }
    }
}

/// One-dimensional squared distance transform via the lower envelope of
/// parabolas rooted at finite samples. Boundaries are kept as exact
/// fractions so every comparison is integer.
fn lower_envelope(f: &[i64], out: &mut [i64], s: &mut EnvelopeScratch) {
    let mut top: Option<usize> = None;
    for q in 0..f.len() {
        if f[q] >= FAR {
            continue;
        }
        let qi = q as i64;
        loop {
            let Some(k) = top else {
                s.vertex[0] = q;
                top = Some(0);
                break;
            };
            let p = s.vertex[k] as i64;
            let num = (f[q] + qi * qi) - (f[p as usize] + p * p);
            let den = 2 * (qi - p);
            if k > 0 {
                let (zn, zd) = s.bound[k];
                if num * zd <= zn * den {
                    top = Some(k - 1);
                    continue;
                }
            }
            s.vertex[k + 1] = q;
            s.bound[k + 1] = (num, den);
            top = Some(k + 1);
            break;
        }
    }
    let Some(last) = top else {
        out.fill(FAR);
        return;
    };
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        let qi = q as i64;
        while k < last {
            let (zn, zd) = s.bound[k + 1];
            if zn < qi * zd {
                k += 1;
            } else {
                break;
            }
        }
        let v = s.vertex[k];
        let d = qi - v as i64;
        *slot = d * d + f[v];
    }
}

/// Distances from every surface pixel of `from` to the nearest surface pixel
/// of `to`, in the row-major order of `from`'s surface.
fn directed_surface_distances(from: &Mask, to: &Mask) -> Vec<f64> {
    let (h, w) = to.dims();
    let mut features = vec![false; h * w];
    for (y, x) in to.surface() {
        features[y * w + x] = true;
    }
    let sq = squared_distance_transform(&features, h, w);
    from.surface()
        .into_iter()
        .map(|(y, x)| (sq[y * w + x] as f64).sqrt())
        .collect()
}

fn non_empty(pred: &Mask, truth: &Mask) -> Result<()> {
    match (pred.is_empty(), truth.is_empty()) {
        (false, false) => Ok(()),
        (true, false) => Err(Error::UndefinedMetric(EmptySide::Pred)),
        (false, true) => Err(Error::UndefinedMetric(EmptySide::Truth)),
        (true, true) => Err(Error::UndefinedMetric(EmptySide::Both)),
    }
}

/// Symmetric surface-distance percentile: the larger of the two directed
/// nearest-rank percentiles.
pub fn surface_distance_percentile(pred: &Mask, truth: &Mask, q: f64) -> Result<f64> {
    check_dims("surface_distance", pred, truth)?;
    non_empty(pred, truth)?;
    let ab = percentile(&directed_surface_distances(pred, truth), q)?;
    let ba = percentile(&directed_surface_distances(truth, pred), q)?;
    Ok(ab.max(ba))
}

pub fn hd95(pred: &Mask, truth: &Mask) -> Result<f64> {
    surface_distance_percentile(pred, truth, 0.95)
}

/// Exact symmetric Hausdorff distance between the two surfaces.
pub fn hausdorff(pred: &Mask, truth: &Mask) -> Result<f64> {
    surface_distance_percentile(pred, truth, 1.0)
}

/// Mean of the two directed average surface distances.
pub fn asd(pred: &Mask, truth: &Mask) -> Result<f64> {
    check_dims("asd", pred, truth)?;
    non_empty(pred, truth)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let ab = mean(directed_surface_distances(pred, truth));
    let ba = mean(directed_surface_distances(truth, pred));
    Ok(0.5 * (ab + ba))
}

/// Mean over pixels of `-ln max(p_true, 1e-7)` across every item of `probs`.
pub fn ce_metric(probs: &Tensor4, truths: &[Mask]) -> Result<f64> {
    check_probs("ce_metric", probs, truths)?;
    let plane = probs.plane_len();
    let mut total = 0.0f64;
    for (n, truth) in truths.iter().enumerate() {
        let item = probs.item_slice(n);
        for (p, &fg) in truth.bits().iter().enumerate() {
            let prob = item[fg as usize * plane + p] as f64;
            total -= prob.max(CE_EPS).ln();
        }
    }
    Ok(total / (truths.len() * plane) as f64)
}

pub(crate) fn check_probs(op: &'static str, probs: &Tensor4, truths: &[Mask]) -> Result<()> {
    let [n, c, h, w] = probs.dims();
    if c != 2 {
        return Err(Error::shape(op, format!("expected 2 class channels, got {c}")));
    }
    if n != truths.len() {
        return Err(Error::shape(op, format!("{n} predictions for {} masks", truths.len())));
    }
    if let Some(bad) = truths.iter().find(|m| m.dims() != (h, w)) {
        return Err(Error::shape(
            op,
            format!("mask {:?} against {h}x{w} prediction", bad.dims()),
        ));
    }
    Ok(())
}

/// Full metric set for one predicted mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub ce: f64,
}

impl MetricReport {
    /// Scores item `n` of `probs` against `truth`.
    pub fn evaluate(probs: &Tensor4, n: usize, truth: &Mask) -> Result<Self> {
        let single = probs.select_items(n, 1)?;
        let pred = Mask::harden(&single, 0);
        Self::from_masks(&pred, truth, ce_metric(&single, std::slice::from_ref(truth))?)
    }

    pub fn from_masks(pred: &Mask, truth: &Mask, ce: f64) -> Result<Self> {
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            dice: dice_score(pred, truth)?,
            jaccard: jaccard_score(pred, truth)?,
            hd95: defined(hd95(pred, truth))?,
            asd: defined(asd(pred, truth))?,
            ce,
        })
    }
}
