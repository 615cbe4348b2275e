//! Independent f64 reference implementations used as test oracles.
#![allow(dead_code)]

use dcf::autodiff::{Graph, NodeId, Tensor4};
use dcf::metrics::Mask;
pub mod gradcheck;

use rand::Rng;

/// Plain NCHW tensor in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct T {
    pub d: [usize; 4],
    pub v: Vec<f64>,
}

impl T {
    pub fn zeros(d: [usize; 4]) -> Self {
        T { d, v: vec![0.0; d.iter().product()] }
    }

    pub fn from32(t: &Tensor4) -> Self {
        T {
            d: t.dims(),
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.d[1] + c) * self.d[2] + y) * self.d[3] + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[self.idx(n, c, y, x)]
    }
}

/// Records every relu sign and maxpool choice so callers can tell whether a
/// perturbation crossed a non-differentiable point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pattern(pub Vec<u32>);

pub fn conv2d(x: &T, w: &T, b: &[f64], pad: usize) -> T {
    let [n, ci, h, wd] = x.d;
    let [co, _, k, _] = w.d;
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let mut out = T::zeros([n, co, oh, ow]);
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.at(o, c, ky, kx) * x.at(b_, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    let i = out.idx(b_, o, y, xx);
                    out.v[i] = s;
                }
            }
        }
    }
    out
}

pub fn relu(x: &T, pat: &mut Pattern) -> T {
    pat.0.extend(x.v.iter().map(|&v| (v > 0.0) as u32));
    T {
        d: x.d,
        v: x.v.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn softmax(x: &T) -> T {
    let [n, c, h, w] = x.d;
    let mut out = T::zeros(x.d);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let m = (0..c).map(|k| x.at(b, k, y, xx)).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|k| (x.at(b, k, y, xx) - m).exp()).sum();
                for k in 0..c {
                    let i = out.idx(b, k, y, xx);
                    out.v[i] = (x.at(b, k, y, xx) - m).exp() / z;
                }
            }
        }
    }
    out
}

pub fn maxpool(x: &T, pat: &mut Pattern) -> T {
    let [n, c, h, w] = x.d;
    let mut out = T::zeros([n, c, h / 2, w / 2]);
    for b in 0..n {
        for k in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (j, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = x.at(b, k, 2 * y + dy, 2 * xx + dx);
                        if v > best.0 {
                            best = (v, j);
                        }
                    }
                    pat.0.push(best.1 as u32);
                    let i = out.idx(b, k, y, xx);
                    out.v[i] = best.0;
                }
            }
        }
    }
    out
}

pub fn upsample(x: &T) -> T {
    let [n, c, h, w] = x.d;
    let mut out = T::zeros([n, c, 2 * h, 2 * w]);
    for b in 0..n {
        for k in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let i = out.idx(b, k, y, xx);
                    out.v[i] = x.at(b, k, y / 2, xx / 2);
                }
            }
        }
    }
    out
}

pub fn concat(a: &T, b: &T) -> T {
    let [n, ca, h, w] = a.d;
    let cb = b.d[1];
    let mut out = T::zeros([n, ca + cb, h, w]);
    for i in 0..n {
        for k in 0..ca + cb {
            for y in 0..h {
                for x in 0..w {
                    let v = if k < ca { a.at(i, k, y, x) } else { b.at(i, k - ca, y, x) };
                    let j = out.idx(i, k, y, x);
                    out.v[j] = v;
                }
            }
        }
    }
    out
}

pub fn select(x: &T, start: usize, count: usize) -> T {
    let stride = x.d[1] * x.d[2] * x.d[3];
    T {
        d: [count, x.d[1], x.d[2], x.d[3]],
        v: x.v[start * stride..(start + count) * stride].to_vec(),
    }
}

pub fn labels(m: &Mask) -> Vec<f64> {
    m.bits().iter().map(|&b| b as u8 as f64).collect()
}

pub fn ce(p: &T, truths: &[Mask]) -> f64 {
    let [n, _, h, w] = p.d;
    let mut total = 0.0;
    for (b, m) in truths.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let k = m.get(y, x) as usize;
                total -= p.at(b, k, y, x).max(1e-7).ln();
            }
        }
    }
    total / (n * h * w) as f64
}

pub fn dice(p: &T, truths: &[Mask]) -> f64 {
    let [n, _, h, w] = p.d;
    let eps = 1e-5;
    let mut total = 0.0;
    for (b, m) in truths.iter().enumerate() {
        let (mut inter, mut sum) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let g = m.get(y, x) as u8 as f64;
                let pf = p.at(b, 1, y, x);
                inter += pf * g;
                sum += pf + g;
            }
        }
        total += 1.0 - (2.0 * inter + eps) / (sum + eps);
    }
    total / n as f64
}

pub fn seg(p: &T, truths: &[Mask]) -> f64 {
    ce(p, truths) + dice(p, truths)
}

/// Argmax masks, ties to background, with the chosen classes appended to
/// `pat`.
pub fn harden(p: &T, pat: &mut Pattern) -> Vec<Mask> {
    let [n, _, h, w] = p.d;
    (0..n)
        .map(|b| {
            let m = Mask::from_fn(h, w, |y, x| p.at(b, 1, y, x) > p.at(b, 0, y, x));
            pat.0.extend(m.bits().iter().map(|&v| v as u32));
            m
        })
        .collect()
}

pub fn cps(p1: &T, p2: &T, pat: &mut Pattern) -> f64 {
    let (h1, h2) = (harden(p1, pat), harden(p2, pat));
    seg(p1, &h2) + seg(p2, &h1)
}

pub fn ms(ps: &T, pt: &T, pat: &mut Pattern) -> f64 {
    seg(ps, &harden(pt, pat))
}

/// The small segmentation network, parameters in segment order.
pub fn segnet(params: &[T], x: &T, pat: &mut Pattern) -> T {
    let conv = |x: &T, i: usize, pat: &mut Pattern, act: bool| {
        let (w, b) = (&params[2 * i], &params[2 * i + 1]);
        let y = conv2d(x, w, &b.v, (w.d[2] - 1) / 2);
        if act {
            relu(&y, pat)
        } else {
            y
        }
    };
    let e1 = conv(x, 0, pat, true);
    let p1 = maxpool(&e1, pat);
    let e2 = conv(&p1, 1, pat, true);
    let p2 = maxpool(&e2, pat);
    let e3 = conv(&p2, 2, pat, true);
    let d1 = conv(&upsample(&e3), 3, pat, true);
    let skip = concat(&upsample(&d1), &e1);
    let d2 = conv(&skip, 4, pat, true);
    softmax(&conv(&d2, 5, pat, false))
}

/// Largest relative disagreement between analytic and central-difference
/// gradients, `|a - n| / max(|a|, |n|, floor)`.
pub struct FdResult {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central differences of `f` with step `h` at the given coordinates of
/// `inputs`. A coordinate is skipped when either perturbation changes the
/// recorded pattern, i.e. crosses a kink of the function.
pub fn finite_difference_check(
    inputs: &[T],
    analytic: &[Vec<f64>],
    coords: &[(usize, usize)],
    h: f64,
    floor: f64,
    f: impl Fn(&[T], &mut Pattern) -> f64,
) -> FdResult {
    let mut base = Pattern::default();
    f(inputs, &mut base);
    let mut res = FdResult {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for &(t, i) in coords {
        let orig = work[t].v[i];
        work[t].v[i] = orig + h;
        let mut pp = Pattern::default();
        let fp = f(&work, &mut pp);
        work[t].v[i] = orig - h;
        let mut pm = Pattern::default();
        let fm = f(&work, &mut pm);
        work[t].v[i] = orig;
        if pp != base || pm != base {
            res.skipped += 1;
            continue;
        }
        let num = (fp - fm) / (2.0 * h);
        let a = analytic[t][i];
        let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
        res.max_rel_err = res.max_rel_err.max(err);
        res.checked += 1;
    }
    res
}

/// Every coordinate of every input.
pub fn all_coords(inputs: &[T]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.v.len()).map(move |i| (t, i)))
        .collect()
}

/// Analytic gradients of a scalar built by `build` from variables holding
/// `inputs`, in f64.
pub fn analytic_grads(inputs: &[Tensor4], build: impl FnOnce(&mut Graph, &[NodeId]) -> NodeId) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss).unwrap();
    ids.iter()
        .zip(inputs)
        .map(|(id, t)| match grads.get(*id) {
            Some(gr) => gr.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; t.len()],
        })
        .collect()
}

pub fn random_tensor(rng: &mut impl Rng, dims: [usize; 4], lo: f32, hi: f32) -> Tensor4 {
    let n = dims.iter().product();
    Tensor4::new(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values of magnitude at least `gap`, with random sign.
pub fn away_from_zero(rng: &mut impl Rng, dims: [usize; 4], gap: f32) -> Tensor4 {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor4::new(dims, data).unwrap()
}

/// Two-class probability maps whose classes differ by at least `margin`.
pub fn probs_with_margin(rng: &mut impl Rng, n: usize, h: usize, w: usize, margin: f32) -> Tensor4 {
    let plane = h * w;
    let mut data = vec![0.0f32; n * 2 * plane];
    for b in 0..n {
        for p in 0..plane {
            let half = margin / 2.0;
            let fg = if rng.gen_bool(0.5) {
                rng.gen_range(0.5 + half..0.97)
            } else {
                rng.gen_range(0.03..0.5 - half)
            };
            data[(b * 2 + 1) * plane + p] = fg;
            data[b * 2 * plane + p] = 1.0 - fg;
        }
    }
    Tensor4::new([n, 2, h, w], data).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

/// Surface pixels: foreground with a 4-neighbour that is background or off
/// the grid.
pub fn brute_surface(m: &Mask) -> Vec<(i64, i64)> {
    let (h, w) = m.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            let nb = !edge && (!m.get(y - 1, x) || !m.get(y + 1, x) || !m.get(y, x - 1) || !m.get(y, x + 1));
            if edge || nb {
                out.push((y as i64, x as i64));
            }
        }
    }
    out
}

/// For every point of `from`, the distance to the nearest point of `to`,
/// by exhaustive search.
pub fn brute_directed(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(ty, tx)| (((y - ty).pow(2) + (x - tx).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q * v.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    v[rank - 1]
}

/// (hd95, asd) by all-pairs search; `None` if either mask is empty.
pub fn brute_hd95_asd(pred: &Mask, truth: &Mask) -> Option<(f64, f64)> {
    let (sp, st) = (brute_surface(pred), brute_surface(truth));
    if sp.is_empty() || st.is_empty() {
        return None;
    }
    let (a, b) = (brute_directed(&sp, &st), brute_directed(&st, &sp));
    let hd = nearest_rank(&a, 0.95).max(nearest_rank(&b, 0.95));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some((hd, (mean(&a) + mean(&b)) / 2.0))
}
