use super::*;
use dcf::autodiff::{Graph, NodeId, Tensor4};
use dcf::losses::{cps_loss, ce_loss, dice_loss, ms_loss, pseudo_labels, seg_loss};
use dcf::metrics::Mask;
use dcf::segnet::TinySegSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const FLOOR: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

/// Reduces an op output to a scalar with fixed random weights, on both the
/// tape and the reference side.
fn weights_for(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn weighted(out: &T, w: &[f32]) -> f64 {
    out.v.iter().zip(w).map(|(a, b)| a * *b as f64).sum()
}

pub fn check_op(
    name: &str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor4>,
    tape: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    reference: impl Fn(&[T], &mut Pattern) -> T,
) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let refs: Vec<T> = inputs.iter().map(T::from32).collect();
        let out_len = reference(&refs, &mut Pattern::default()).v.len();
        let w = weights_for(&mut rng, out_len);
        let grads = analytic_grads(&inputs, |g, ids| {
            let y = tape(g, ids);
            g.dot_const(y, w.clone()).unwrap()
        });
        let r = finite_difference_check(&refs, &grads, &all_coords(&refs), H, FLOOR, |xs, p| {
            weighted(&reference(xs, p), &w)
        });
        assert!(r.checked > 0, "{name}: nothing checked");
        worst = worst.max(r.max_rel_err);
    }
    worst
}

pub fn check_loss(
    name: &str,
    make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor4>, Vec<Mask>),
    tape: impl Fn(&mut Graph, &[NodeId], &[Mask]) -> NodeId,
    reference: impl Fn(&[T], &[Mask], &mut Pattern) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (inputs, truths) = make(&mut rng);
        let refs: Vec<T> = inputs.iter().map(T::from32).collect();
        let grads = analytic_grads(&inputs, |g, ids| tape(g, ids, &truths));
        let r = finite_difference_check(&refs, &grads, &all_coords(&refs), H, FLOOR, |xs, p| reference(xs, &truths, p));
        assert_eq!(r.skipped, 0, "{name}: a perturbation flipped a pseudo-label");
        worst = worst.max(r.max_rel_err);
    }
    worst
}

fn masks(rng: &mut impl Rng, n: usize) -> Vec<Mask> {
    (0..n).map(|_| random_mask(rng, 4, 5, 0.4)).collect()
}

/// Worst error of every differentiable graph op.
pub fn op_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for pad in [0, 1] {
        let e = check_op(
            &format!("conv2d pad {pad}"),
            |rng| {
                let ci = rng.gen_range(1..3);
                let co = rng.gen_range(1..3);
                vec![
                    random_tensor(rng, [2, ci, 5, 4], -1.0, 1.0),
                    random_tensor(rng, [co, ci, 3, 3], -1.0, 1.0),
                    random_tensor(rng, [1, 1, 1, co], -1.0, 1.0),
                ]
            },
            move |g, ids| g.conv2d(ids[0], ids[1], ids[2], pad).unwrap(),
            move |xs, _| conv2d(&xs[0], &xs[1], &xs[2].v, pad),
        );
        out.push((format!("conv2d pad {pad}"), e));
    }
    out.push((
        "relu".into(),
        check_op(
            "relu",
            |rng| vec![away_from_zero(rng, [2, 2, 3, 3], 0.05)],
            |g, ids| g.relu(ids[0]).unwrap(),
            |xs, p| relu(&xs[0], p),
        ),
    ));
    out.push((
        "softmax".into(),
        check_op(
            "softmax",
            |rng| vec![random_tensor(rng, [2, 3, 2, 3], -3.0, 3.0)],
            |g, ids| g.softmax_channels(ids[0]).unwrap(),
            |xs, _| softmax(&xs[0]),
        ),
    ));
    out.push((
        "maxpool".into(),
        check_op(
            "maxpool",
            |rng| {
                // Distinct values on a coarse lattice keep every window's
                // maximum well clear of the step.
                let mut vals: Vec<f32> = (0..48).map(|i| i as f32 * 0.05).collect();
                for i in (1..vals.len()).rev() {
                    vals.swap(i, rng.gen_range(0..=i));
                }
                vec![Tensor4::new([1, 3, 4, 4], vals).unwrap()]
            },
            |g, ids| g.maxpool2x2(ids[0]).unwrap(),
            |xs, p| maxpool(&xs[0], p),
        ),
    ));
    out.push((
        "upsample".into(),
        check_op(
            "upsample",
            |rng| vec![random_tensor(rng, [2, 2, 2, 3], -1.0, 1.0)],
            |g, ids| g.upsample_nearest2x(ids[0]).unwrap(),
            |xs, _| upsample(&xs[0]),
        ),
    ));
    out.push((
        "concat".into(),
        check_op(
            "concat",
            |rng| {
                vec![
                    random_tensor(rng, [2, 1, 3, 2], -1.0, 1.0),
                    random_tensor(rng, [2, 2, 3, 2], -1.0, 1.0),
                ]
            },
            |g, ids| g.concat_channels(ids[0], ids[1]).unwrap(),
            |xs, _| concat(&xs[0], &xs[1]),
        ),
    ));
    out.push((
        "add".into(),
        check_op(
            "add",
            |rng| {
                vec![
                    random_tensor(rng, [1, 2, 3, 3], -1.0, 1.0),
                    random_tensor(rng, [1, 2, 3, 3], -1.0, 1.0),
                ]
            },
            |g, ids| g.add(ids[0], ids[1]).unwrap(),
            |xs, _| T {
                d: xs[0].d,
                v: xs[0].v.iter().zip(&xs[1].v).map(|(a, b)| a + b).collect(),
            },
        ),
    ));
    out.push((
        "scale".into(),
        check_op(
            "scale",
            |rng| vec![random_tensor(rng, [1, 2, 3, 3], -1.0, 1.0)],
            |g, ids| g.scale(ids[0], -0.75).unwrap(),
            |xs, _| T {
                d: xs[0].d,
                v: xs[0].v.iter().map(|a| a * -0.75).collect(),
            },
        ),
    ));
    out.push((
        "sum".into(),
        check_op(
            "sum",
            |rng| vec![random_tensor(rng, [2, 2, 2, 2], -1.0, 1.0)],
            |g, ids| g.sum(ids[0]).unwrap(),
            |xs, _| T {
                d: [1, 1, 1, 1],
                v: vec![xs[0].v.iter().sum()],
            },
        ),
    ));
    out.push((
        "select_items".into(),
        check_op(
            "select_items",
            |rng| vec![random_tensor(rng, [4, 2, 2, 2], -1.0, 1.0)],
            |g, ids| g.select_items(ids[0], 1, 2).unwrap(),
            |xs, _| select(&xs[0], 1, 2),
        ),
    ));
    out
}

/// Worst error of every loss, including the assembled per-student objective.
pub fn loss_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let make = |rng: &mut ChaCha8Rng| (vec![probs_with_margin(rng, 2, 4, 5, 0.0)], masks(rng, 2));
    out.push(("ce".into(), check_loss("ce", make, |g, ids, m| ce_loss(g, ids[0], m).unwrap(), |xs, m, _| ce(&xs[0], m))));
    out.push((
        "dice".into(),
        check_loss("dice", make, |g, ids, m| dice_loss(g, ids[0], m).unwrap(), |xs, m, _| dice(&xs[0], m)),
    ));
    out.push((
        "seg".into(),
        check_loss("seg", make, |g, ids, m| seg_loss(g, ids[0], m).unwrap(), |xs, m, _| seg(&xs[0], m)),
    ));
    let two = |rng: &mut ChaCha8Rng| {
        (
            vec![probs_with_margin(rng, 2, 4, 5, 0.05), probs_with_margin(rng, 2, 4, 5, 0.05)],
            vec![],
        )
    };
    out.push((
        "cps".into(),
        check_loss("cps", two, |g, ids, _| cps_loss(g, ids[0], ids[1]).unwrap(), |xs, _, p| cps(&xs[0], &xs[1], p)),
    ));
    out.push((
        "ms".into(),
        check_loss("ms", two, |g, ids, _| ms_loss(g, ids[0], ids[1]).unwrap(), |xs, _, p| ms(&xs[0], &xs[1], p)),
    ));
    // l_seg + lambda (cps + ms) on one student's probabilities, the other
    // student and the teacher supplying hardened targets.
    let lambda = 0.37f32;
    out.push((
        "total".into(),
        check_loss(
            "total",
            |rng| {
                let logits = |rng: &mut ChaCha8Rng| {
                    let p = probs_with_margin(rng, 2, 4, 5, 0.1);
                    Tensor4::new(p.dims(), p.data().iter().map(|v| v.ln()).collect()).unwrap()
                };
                (vec![logits(rng), logits(rng), logits(rng)], masks(rng, 2))
            },
            |g, ids, truths| {
                let ps = g.softmax_channels(ids[0]).unwrap();
                let po = g.softmax_channels(ids[1]).unwrap();
                let pt = g.softmax_channels(ids[2]).unwrap();
                let l_seg = seg_loss(g, ps, truths).unwrap();
                let other = pseudo_labels(g.value(po).unwrap());
                let cps = seg_loss(g, ps, &other).unwrap();
                let ms = ms_loss(g, ps, pt).unwrap();
                let unsup = g.add(cps, ms).unwrap();
                let weighted = g.scale(unsup, lambda).unwrap();
                g.add(l_seg, weighted).unwrap()
            },
            |xs, truths, p| {
                let (ps, po, pt) = (softmax(&xs[0]), softmax(&xs[1]), softmax(&xs[2]));
                let other = harden(&po, p);
                seg(&ps, truths) + lambda as f64 * (seg(&ps, &other) + ms(&ps, &pt, p))
            },
        ),
    ));
    out
}

/// The whole network under the supervised loss on 8x8 inputs, 40 sampled
/// parameters per instance. Returns (worst error, checked, skipped).
pub fn segnet_check() -> (f64, usize, usize) {
    let net = TinySegSpec::default();
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let params = net.init_params(seed);
        let input = random_tensor(&mut rng, [1, 1, 8, 8], 0.0, 1.0);
        let truths = vec![random_mask(&mut rng, 8, 8, 0.4)];
        let mut g = Graph::new();
        let pn = g.params(&params).unwrap();
        let x = g.constant(input.clone()).unwrap();
        let probs = net.forward_on(&mut g, &pn, x).unwrap();
        let loss = seg_loss(&mut g, probs, &truths).unwrap();
        let grads = g.backward(loss).unwrap().for_params(&pn);
        let analytic: Vec<Vec<f64>> = grads
            .segments()
            .iter()
            .map(|s| s.data.iter().map(|&v| v as f64).collect())
            .collect();
        let refs: Vec<T> = params
            .segments()
            .iter()
            .map(|s| T {
                d: s.dims4(),
                v: s.data.iter().map(|&v| v as f64).collect(),
            })
            .collect();
        let x64 = T::from32(&input);
        let coords: Vec<(usize, usize)> = (0..40)
            .map(|_| {
                let t = rng.gen_range(0..refs.len());
                (t, rng.gen_range(0..refs[t].v.len()))
            })
            .collect();
        let r = finite_difference_check(&refs, &analytic, &coords, H, FLOOR, |ps, p| {
            seg(&segnet(ps, &x64, p), &truths)
        });
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
        skipped += r.skipped;
    }
    (worst, checked, skipped)
}
